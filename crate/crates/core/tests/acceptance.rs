//! End-to-end acceptance run: one PASS/FAIL line per criterion, detail lines indented below.
//!
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL like any other but do not fail
//! the process; any other failure does.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use robust_icl::distributions::{
    derive_seed, feature_stats, preprocess_binary, rng_from_seed, sample_episode, TrainDistSpec, TrainMixture,
};
use robust_icl::eval::{
    adversarial_context_eval, evaluate, evaluate_pairs, sample_size_study, table1_test_spec, tradeoff_experiment,
    EvalReport, EvalSource, EvalTask, RealKind, TradeoffSpec, TABLE1_TEST_EPS, TABLE1_TRAIN_EPS,
};
use robust_icl::model::{predict, reduced_predict, robust_margin, Episode, Label, PromptMatrix, Sample, TransformerParams};
use robust_icl::theory::{closed_form_params, epsilon_thresholds, map_to_params, score, Regime};
use robust_icl::training::{loss_and_gradient, loss_with_fixed_attack, param_distance, train, TrainConfig};

const KNOWN_FAILURES: [u32; 4] = [1, 2, 3, 8];

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Outcome {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn detail(mut self, lines: impl IntoIterator<Item = String>) -> Self {
        self.details.extend(lines);
        self
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("ICL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn random_instance(rng: &mut impl Rng, max_d: usize, max_n: usize) -> (Vec<Sample>, Vec<f64>, TransformerParams, Label) {
    let d = rng.random_range(1..=max_d);
    let n = rng.random_range(1..=max_n);
    let label = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { Label::Pos } else { Label::Neg };
    let demos = (0..n)
        .map(|_| Sample::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), label(rng)))
        .collect();
    let query = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = DMatrix::from_fn(d + 1, d + 1, |_, _| rng.random::<f64>());
    let q = DMatrix::from_fn(d + 1, d + 1, |_, _| rng.random::<f64>());
    let y = label(rng);
    (demos, query, TransformerParams::new(p, q).unwrap(), y)
}

fn gate_gradient() -> Outcome {
    let mut rng = rng_from_seed(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (demos, query, params, y) = random_instance(&mut rng, 5, 20);
        let d = query.len();
        let eps = rng.random_range(0.0..0.5);
        let episodes = vec![Episode::new(&demos, &Sample::new(query, y)).unwrap()];
        let batch = loss_and_gradient(&params, &episodes, eps).unwrap();
        for which in 0..2 {
            for i in 0..=d {
                for j in 0..=d {
                    let bump = |s: f64| {
                        let mut p = params.clone();
                        if which == 0 {
                            p.p[(i, j)] += s
                        } else {
                            p.q[(i, j)] += s
                        }
                        loss_with_fixed_attack(&p, &episodes, &batch.attacks).unwrap()
                    };
                    let fd = (bump(1e-5) - bump(-1e-5)) / 2e-5;
                    let g = if which == 0 { batch.grad_p[(i, j)] } else { batch.grad_q[(i, j)] };
                    worst = worst.max((g - fd).abs() / (fd.abs() + 1e-4));
                }
            }
        }
    }
    Outcome::new(worst <= 1e-4, format!("gradient vs central differences, worst relative error {worst:.2e} (tol 1e-4)"))
}

fn gate_equivalence() -> Outcome {
    let mut rng = rng_from_seed(102);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (demos, query, params, _) = random_instance(&mut rng, 10, 40);
        let z = PromptMatrix::build(&demos, &query, &vec![0.0; query.len()]).unwrap();
        let full = predict(&z, &params).unwrap();
        let red = reduced_predict(&params.reduced(), &z).unwrap();
        worst = worst.max((full - red).abs() / full.abs().max(1.0));
    }
    Outcome::new(worst <= 1e-10, format!("forward vs reduced prediction, worst relative error {worst:.2e} (tol 1e-10)"))
}

fn criterion1() -> Outcome {
    let t = epsilon_thresholds(20, 0.1).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for (eps, regime) in [
        (0.0, Regime::Standard),
        (0.0975, Regime::Adversarial),
        (t.eps1 + 0.01, Regime::StrongAdversarial),
    ] {
        let start = Instant::now();
        let cfg = TrainConfig {
            eps,
            ..TrainConfig::default()
        };
        let (params, hist) = train(&cfg).unwrap();
        let target = closed_form_params(regime, 20).unwrap();
        let dist = param_distance(&params, &target).unwrap();
        let mut off_label = params.clone();
        let mut target_off = target.clone();
        off_label.q.row_mut(20).fill(0.0);
        target_off.q.row_mut(20).fill(0.0);
        let rest = param_distance(&off_label, &target_off).unwrap();
        pass &= dist <= 0.05;
        details.push(format!(
            "eps={eps:.4} -> {regime}: max-abs distance {dist:.4} (excluding label row of Q: {rest:.4}), final loss {:.5}, {:.1}s",
            hist.steps.last().unwrap().loss,
            start.elapsed().as_secs_f64()
        ));
    }
    Outcome::new(pass, "training recovers the three closed forms within 0.05 (d=20, lambda=0.1, 100 steps x 1000 datasets x N=1000)").detail(details)
}

fn synth_task(source: EvalSource, eps: f64) -> EvalTask {
    EvalTask::new(source, eps).full_scale()
}

fn pair_reports(task: &EvalTask, d: usize) -> (EvalReport, EvalReport) {
    (
        evaluate(&closed_form_params(Regime::Standard, d).unwrap(), task).unwrap(),
        evaluate(&closed_form_params(Regime::Adversarial, d).unwrap(), task).unwrap(),
    )
}

fn criterion2() -> Outcome {
    let tr = synth_task(EvalSource::TrainMixture { d: 100, lambda: 0.1 }, TABLE1_TRAIN_EPS);
    let te = synth_task(EvalSource::TestNormal(table1_test_spec()), TABLE1_TEST_EPS);
    let (tr_s, tr_a) = pair_reports(&tr, 100);
    let (te_s, te_a) = pair_reports(&te, 100);
    let checks = [
        ("D^tr standard", &tr_s, 0.98, None, Some(0.02)),
        ("D^tr adversarial", &tr_a, 0.98, Some(0.98), None),
        ("D^te standard", &te_s, 0.98, None, Some(0.02)),
        ("D^te adversarial", &te_a, 0.96, Some(0.90), None),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (name, r, clean_min, robust_min, robust_max) in checks {
        let ok = r.clean_accuracy >= clean_min
            && robust_min.is_none_or(|m| r.robust_accuracy >= m)
            && robust_max.is_none_or(|m| r.robust_accuracy <= m);
        pass &= ok;
        let bound = match (robust_min, robust_max) {
            (Some(m), _) => format!(">= {}", pct(m)),
            (_, Some(m)) => format!("<= {}", pct(m)),
            _ => unreachable!(),
        };
        details.push(format!(
            "{name}: clean {} (need >= {}), robust {} (need {bound}) {}",
            pct(r.clean_accuracy),
            pct(clean_min),
            pct(r.robust_accuracy),
            if ok { "ok" } else { "MISS" }
        ));
    }
    Outcome::new(pass, "Table 1 synthetic columns at 1000 batches x (1000 demos, 1000 queries)").detail(details)
}

fn criterion3() -> Outcome {
    let start = Instant::now();
    let targets = [
        (RealKind::Mnist, [0.94, 0.04, 0.93, 0.72]),
        (RealKind::FashionMnist, [0.91, 0.20, 0.89, 0.62]),
        (RealKind::Cifar10, [0.68, 0.21, 0.64, 0.34]),
    ];
    let root = data_root();
    let mut pass = true;
    let mut details = Vec::new();
    for (kind, want) in targets {
        let ds = match kind.load(&root) {
            Ok(Some(ds)) => ds,
            Ok(None) => {
                pass = false;
                details.push(format!("{}: NOT RUN, files absent under {}", kind.name(), root.join(kind.subdir()).display()));
                continue;
            }
            Err(e) => {
                pass = false;
                details.push(format!("{}: NOT RUN, {e}", kind.name()));
                continue;
            }
        };
        if let Ok(note) = std::fs::read_to_string(root.join(kind.subdir()).join("PROVENANCE.txt")) {
            details.push(format!("{} data note: {}", kind.name(), note.trim()));
        }
        let pairs = ds.pairs().unwrap();
        let template = EvalTask::new(EvalSource::RealPair(Box::new(pairs[0].clone())), kind.table_eps());
        let d = ds.train.dim;
        let s = evaluate_pairs(&closed_form_params(Regime::Standard, d).unwrap(), &pairs, &template).unwrap();
        let a = evaluate_pairs(&closed_form_params(Regime::Adversarial, d).unwrap(), &pairs, &template).unwrap();
        let got = [s.clean_accuracy, s.robust_accuracy, a.clean_accuracy, a.robust_accuracy];
        let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.05);
        pass &= ok;
        details.push(format!(
            "{} (eps={}): standard {} / {} (target {} / {}), adversarial {} / {} (target {} / {}) {}",
            kind.name(),
            kind.table_eps(),
            pct(got[0]),
            pct(got[1]),
            pct(want[0]),
            pct(want[1]),
            pct(got[2]),
            pct(got[3]),
            pct(want[2]),
            pct(want[3]),
            if ok { "ok" } else { "MISS" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= 1800.0;
    details.push(format!("elapsed {secs:.1}s (limit 1800s)"));
    Outcome::new(pass, "Table 1 real columns within 5 points, 45-pair averages").detail(details)
}

/// Loss `−y wᵀx + ε‖w‖₁` for every mapped `(d', b)` on shared datasets.
fn criterion4() -> Outcome {
    const DATASETS: usize = 10_000;
    const N: usize = 1000;
    let mut pass = true;
    let mut argmin_ok = true;
    let mut worst_z: f64 = 0.0;
    let mut compared = 0;
    let mut details = Vec::new();
    for d in [2usize, 5, 10] {
        for lambda in [0.1, 0.5] {
            let t = epsilon_thresholds(d, lambda).unwrap();
            let grid = [0.0, t.eps4, t.eps7, t.eps1];
            let mut configs = Vec::new();
            for (ei, &eps) in grid.iter().enumerate() {
                for dp in 0..=d {
                    for bl in 0..=1u8 {
                        let (rp, _) = map_to_params(dp, bl, d, lambda, eps).unwrap();
                        configs.push((ei, eps, dp, bl, rp, score(dp, bl, d, lambda, eps).unwrap()));
                    }
                }
            }
            let mut sum = vec![0.0; configs.len()];
            let mut sq = vec![0.0; configs.len()];
            let mix = TrainMixture { d, lambda };
            let seed = derive_seed(404, (d * 10) as u64 + (lambda * 10.0) as u64);
            for i in 0..DATASETS {
                let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                let spec = mix.pick(&mut rng);
                let ep = sample_episode(&spec, N, &mut rng);
                let gram = ep.prompt.masked_gram();
                let x: DVector<f64> = ep.prompt.query();
                let y = ep.label.value();
                for (k, (_, eps, _, _, rp, _)) in configs.iter().enumerate() {
                    let w = gram.weights(rp).unwrap();
                    let loss = -y * w.dot(&x) + eps * w.lp_norm(1);
                    sum[k] += loss;
                    sq[k] += loss * loss;
                }
            }
            let n = DATASETS as f64;
            for (k, (_, eps, dp, bl, _, sc)) in configs.iter().enumerate() {
                let mean = sum[k] / n;
                let se = ((sq[k] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
                let target = -sc / d as f64;
                let z = if se > 0.0 {
                    (mean - target).abs() / se
                } else if (mean - target).abs() <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                compared += 1;
                if z > worst_z {
                    worst_z = z;
                }
                if z > 3.0 {
                    pass = false;
                    details.push(format!(
                        "d={d} lambda={lambda} eps={eps:.4} (d'={dp}, b={bl}): MC {mean:.5} vs -score/d {target:.5}, {z:.2} SE"
                    ));
                }
            }
            for (ei, &eps) in grid.iter().enumerate() {
                let idx: Vec<usize> = (0..configs.len()).filter(|&k| configs[k].0 == ei).collect();
                let best_score = idx.iter().map(|&k| configs[k].5).fold(f64::NEG_INFINITY, f64::max);
                let argmin = *idx.iter().min_by(|&&a, &&b| sum[a].total_cmp(&sum[b])).unwrap();
                let ok = configs[argmin].5 >= best_score - 1e-9 * (1.0 + best_score.abs());
                if !ok {
                    argmin_ok = false;
                    details.push(format!(
                        "d={d} lambda={lambda} eps={eps:.4}: empirical argmin (d'={}, b={}) has score {:.5} < max {best_score:.5}",
                        configs[argmin].2, configs[argmin].3, configs[argmin].5
                    ));
                }
            }
        }
    }
    details.insert(0, format!("{compared} (d, lambda, eps, d', b) points, worst deviation {worst_z:.2} SE"));
    details.insert(1, format!("empirical loss argmin attains the maximal score at every grid point: {argmin_ok}"));
    Outcome::new(pass && argmin_ok, "Monte-Carlo loss of mapped params equals -score/d within 3 SE (10^4 datasets, N=1000)")
        .detail(details)
}

fn criterion5() -> Outcome {
    let mut rng = rng_from_seed(505);
    let mut bad = 0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=500);
        let lambda = rng.random_range(0.01..0.99);
        bad += !epsilon_thresholds(d, lambda).unwrap().is_ordered() as usize;
    }
    let unit: Vec<f64> = [0.01, 0.1, 0.37, 0.5, 0.9, 0.98]
        .iter()
        .map(|&l| epsilon_thresholds(1, l).unwrap().eps1)
        .collect();
    let ones = unit.iter().all(|&v| v == 1.0);
    Outcome::new(
        bad == 0 && ones,
        format!("threshold ordering on 1000 random draws ({bad} violations); eps1(1, lambda) == 1 exactly: {ones}"),
    )
}

fn criterion6() -> Outcome {
    let mut rng = rng_from_seed(606);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (demos, query, params, y) = random_instance(&mut rng, 12, 10);
        let d = query.len();
        let eps = rng.random_range(0.0..1.0);
        let z = PromptMatrix::build(&demos, &query, &vec![0.0; d]).unwrap();
        let closed = robust_margin(&params.reduced(), &z, y, eps).unwrap();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << d) {
            let corner: Vec<f64> = (0..d).map(|i| if mask >> i & 1 == 1 { eps } else { -eps }).collect();
            best = best.min(y.value() * predict(&z.perturb_query(&corner).unwrap(), &params).unwrap());
        }
        worst = worst.max((closed - best).abs());
    }
    Outcome::new(worst <= 1e-9, format!("closed-form attack vs 2^d corner search, 100 instances, worst gap {worst:.2e} (tol 1e-9)"))
}

fn criterion7() -> Outcome {
    let spec = TradeoffSpec {
        p: 0.8,
        alpha: 1.0,
        beta: 0.1,
        d: 21,
        n_demos: 1000,
        trials: 10_000,
    };
    let r = tradeoff_experiment(&spec, 707).unwrap();
    let pass = r.standard.accuracy >= 0.99 && (r.adversarial.accuracy - 0.80).abs() <= 0.02;
    Outcome::new(
        pass,
        format!(
            "trade-off p=0.8: standard clean {} (need >= 99), adversarial clean {} (need 80 +- 2), 10^4 queries",
            pct(r.standard.accuracy),
            pct(r.adversarial.accuracy)
        ),
    )
}

fn criterion8() -> Outcome {
    let spec = TradeoffSpec {
        p: 0.55,
        alpha: 1.0,
        beta: 0.1,
        d: 21,
        n_demos: 4,
        trials: 10_000,
    };
    let rows = sample_size_study(&spec, &[4, 8, 16, 32], 808).unwrap();
    let bound_ok = rows.iter().all(|r| r.standard_fraction >= r.bound);
    let lower = rows[0].adversarial_fraction < rows[0].standard_fraction;
    let details = rows.iter().map(|r| {
        format!(
            "N={}: standard fraction {:.4} (bound {:.4}), adversarial fraction {:.4}",
            r.n_demos, r.standard_fraction, r.bound, r.adversarial_fraction
        )
    });
    Outcome::new(
        bound_ok && lower,
        format!("sample size: standard meets 1-exp(-pN) at all N: {bound_ok}; adversarial strictly lower at N=4: {lower}"),
    )
    .detail(details)
}

fn criterion9() -> Outcome {
    let spec = TrainDistSpec::new(100, 0.1, 0).unwrap();
    let params = closed_form_params(Regime::Standard, 100).unwrap();
    let r = adversarial_context_eval(&params, &spec, 0.15, 1000, 1000, 1000, 909).unwrap();
    let pass = r.mean_robust_margin <= 0.0 && r.robust_accuracy <= 0.02;
    Outcome::new(
        pass,
        format!(
            "adversarial context, eps=0.15, d=100: mean margin {:.4} (need <= 0), robust accuracy {} (need <= 2)",
            r.mean_robust_margin,
            pct(r.robust_accuracy)
        ),
    )
}

fn criterion10() -> Outcome {
    let root = data_root();
    let ds = match RealKind::Mnist.load(&root) {
        Ok(Some(ds)) => ds,
        other => {
            let why = match other {
                Err(e) => e.to_string(),
                _ => format!("files absent under {}", root.join("mnist").display()),
            };
            return Outcome::new(false, format!("MNIST preprocessing statistics NOT RUN: {why}"));
        }
    };
    let mut aligned_all = true;
    let mut majority_all = true;
    let mut min_frac: f64 = 1.0;
    for (c0, c1) in robust_icl::distributions::class_pairs(10) {
        let pre = preprocess_binary(&ds.train.class_samples(c0), &ds.train.class_samples(c1)).unwrap();
        let aligned = (0..pre.dim()).all(|i| pre.samples.iter().map(|s| s.y.value() * s.x[i]).sum::<f64>() >= 0.0);
        let frac = feature_stats(&pre).unwrap().nonnegative_cov_fraction();
        aligned_all &= aligned;
        majority_all &= frac > 0.5;
        min_frac = min_frac.min(frac);
    }
    let mut out = Outcome::new(
        aligned_all && majority_all,
        format!(
            "MNIST 45 pairs: all aligned sums >= 0: {aligned_all}; strict majority of nonnegative total covariance: {majority_all} (min fraction {min_frac:.3})"
        ),
    );
    if let Ok(note) = std::fs::read_to_string(root.join("mnist/PROVENANCE.txt")) {
        out.details.push(format!("data note: {}", note.trim()));
    }
    out
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let print = |tag: &str, o: &Outcome| {
        println!("[{}] {tag}: {}", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        for line in &o.details {
            println!("    {line}");
        }
    };
    let gates = [("gate gradient", gate_gradient()), ("gate equivalence", gate_equivalence())];
    for (tag, o) in &gates {
        print(tag, o);
    }
    if gates.iter().any(|(_, o)| !o.pass) {
        println!("gates failed; criteria 1-10 not run");
        return ExitCode::FAILURE;
    }

    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
        (9, criterion9),
        (10, criterion10),
    ];
    let mut unexpected = Vec::new();
    let mut failed = Vec::new();
    for (k, run) in criteria {
        let o = run();
        print(&format!("criterion {k}"), &o);
        if !o.pass {
            failed.push(k);
            if !KNOWN_FAILURES.contains(&k) {
                unexpected.push(k);
            }
        }
    }
    println!(
        "acceptance: {} of 10 criteria pass; failing {:?} (known {:?}); {:.1}s",
        10 - failed.len(),
        failed,
        KNOWN_FAILURES,
        start.elapsed().as_secs_f64()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}

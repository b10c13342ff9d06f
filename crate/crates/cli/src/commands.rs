use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use robust_icl::distributions::{
    align_signs, class_pairs, feature_stats, pca_align, rng_from_seed, sample_episode, write_csv, DatasetManifest,
    Preprocessor, Provenance, TestDistSpec, TrainDistSpec,
};
use robust_icl::eval::{
    evaluate, evaluate_pairs, mean_sd, run_table1, sweep as run_sweep, sweep_csv, EvalReport, EvalSource, EvalTask,
    RealKind, SweepAxis, Table1Config,
};
use robust_icl::model::{optimal_attack, predict, robust_margin};
use robust_icl::theory::{brute_force_optimum, closed_form_params, epsilon_thresholds, Regime, ScoreTable};
use robust_icl::training::{finetune, train as run_train, InitKind, InitSpec, TrainConfig, TrainMode};
use robust_icl::Result;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::*;

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// JSON file with the same keys as the flags; flags win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Demonstrations per dataset.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    datasets_per_step: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// full, P_only or Q_only; the partial modes finetune `--start` on one robust index.
    #[arg(long)]
    mode: Option<String>,
    /// Parameters to finetune from.
    #[arg(long)]
    start: Option<PathBuf>,
    /// Robust coordinate of the finetuning distribution (zero-based).
    #[arg(long)]
    robust_index: Option<usize>,
    /// constant or uniform.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| invalid(format!("{flag} is required")))
}

pub fn train(flags: TrainArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let out = required(&a.out, "--out")?;
    let seed = seed_or_default(a.seed);
    let base = TrainConfig::default();
    let kind = match a.init.as_deref() {
        None | Some("constant") => InitKind::Constant,
        Some("uniform") => InitKind::Uniform,
        Some(other) => return Err(invalid(format!("unknown init {other:?}; expected constant or uniform"))),
    };
    let cfg = TrainConfig {
        d: a.d.unwrap_or(base.d),
        lambda: a.lambda.unwrap_or(base.lambda),
        eps: a.eps.unwrap_or(base.eps),
        n_demos: a.n.unwrap_or(base.n_demos),
        datasets_per_step: a.datasets_per_step.unwrap_or(base.datasets_per_step),
        steps: a.steps.unwrap_or(base.steps),
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        momentum: a.momentum.unwrap_or(base.momentum),
        plateau_patience: a.patience.unwrap_or(base.plateau_patience),
        plateau_factor: a.factor.unwrap_or(base.plateau_factor),
        plateau_threshold: a.threshold.unwrap_or(base.plateau_threshold),
        seed,
        mode: a.mode.as_deref().map(str::parse).transpose()?.unwrap_or_default(),
        init: InitSpec {
            kind,
            active_scale: a.init_scale.unwrap_or(base.init.active_scale),
            ..InitSpec::default()
        },
        workers: a.workers.unwrap_or(1),
    };
    cfg.validate()?;

    let mut manifest = RunManifest::new("train", json!({ "flags": resolved, "train_config": cfg }), Some(seed))
        .output(out);
    if let Some(h) = &a.history {
        manifest = manifest.output(h);
    }
    if let Some(s) = &a.start {
        manifest = manifest.input(s)?;
    }
    manifest.write(&manifest_path(out))?;

    let (params, history) = match (&a.start, cfg.mode) {
        (None, TrainMode::Full) => run_train(&cfg)?,
        (Some(start), mode) if mode != TrainMode::Full => {
            let start = load_params(start)?;
            let spec = TrainDistSpec::new(cfg.d, cfg.lambda, a.robust_index.unwrap_or(0))?;
            finetune(&start, mode, &spec, &cfg)?
        }
        _ => return Err(invalid("--start and a P_only/Q_only --mode must be given together")),
    };
    save_params(&params, out)?;
    if let Some(h) = &a.history {
        history.write_csv(h)?;
    }
    let last = history.steps.last().map_or(f64::NAN, |s| s.loss);
    println!("final loss {last:.6} after {} steps", history.steps.len());
    for (regime, dist) in &history.distances {
        println!("max-abs distance to {regime}: {dist:.4}");
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
#[serde(rename_all = "kebab-case")]
pub struct TaskArgs {
    /// dtr, dte, mnist, fmnist or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    /// Budget of the shift applied to every demonstration.
    #[arg(long)]
    context_eps: Option<f64>,
    /// Dimension of the training distribution.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Fixed robust coordinate of the training distribution; unset draws one per batch.
    #[arg(long)]
    robust_index: Option<usize>,
    #[arg(long)]
    d_rob: Option<usize>,
    #[arg(long)]
    d_vul: Option<usize>,
    #[arg(long)]
    d_irr: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Demonstrations per context; real datasets default to the whole training split.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// 1000 batches of 1000 demonstrations and 1000 queries.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    full_scale: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

enum Task {
    Synthetic(EvalTask),
    Real { kind: RealKind, task: EvalTask, files: Vec<PathBuf> },
}

impl Task {
    fn dim(&self, pairs: &Option<Vec<robust_icl::eval::RealPair>>) -> usize {
        match (self, pairs) {
            (Task::Synthetic(t), _) => t.source.dim(),
            (Task::Real { .. }, Some(p)) => p[0].dim(),
            _ => 0,
        }
    }
}

fn synthetic_source(a: &TaskArgs, dataset: &str) -> Result<EvalSource> {
    Ok(match dataset {
        "dtr" => {
            let d = a.d.unwrap_or(100);
            let lambda = a.lambda.unwrap_or(0.1);
            match a.robust_index {
                Some(c) => EvalSource::Train(TrainDistSpec::new(d, lambda, c)?),
                None => {
                    TrainDistSpec::new(d, lambda, 0)?;
                    EvalSource::TrainMixture { d, lambda }
                }
            }
        }
        _ => EvalSource::TestNormal(TestDistSpec::blocks(
            a.d_rob.unwrap_or(10),
            a.d_vul.unwrap_or(90),
            a.d_irr.unwrap_or(0),
            a.alpha.unwrap_or(1.0),
            a.beta.unwrap_or(0.1),
            a.gamma.unwrap_or(1.0),
        )?),
    })
}

fn build_task(a: &TaskArgs, seed: u64) -> Result<Task> {
    let dataset = a.dataset.as_deref().unwrap_or("dtr").to_ascii_lowercase();
    let real = match dataset.as_str() {
        "dtr" | "dte" => None,
        other => Some(other.parse::<RealKind>()?),
    };
    let default_eps = match (&real, dataset.as_str()) {
        (Some(k), _) => k.table_eps(),
        (None, "dtr") => 0.15,
        _ => 0.2,
    };
    let eps = a.eps.unwrap_or(default_eps);
    let source = match real {
        Some(_) => EvalSource::TrainMixture { d: 1, lambda: 0.5 },
        None => synthetic_source(a, &dataset)?,
    };
    let mut task = EvalTask::new(source, eps);
    if a.full_scale.unwrap_or(false) {
        task = task.full_scale();
    }
    task.context_eps = a.context_eps.unwrap_or(0.0);
    task.seed = seed;
    task.workers = a.workers.unwrap_or(1);
    if let Some(b) = a.batches {
        task.batches = b;
    }
    if let Some(q) = a.queries {
        task.queries_per_batch = q;
    }
    match real {
        None => {
            if let Some(n) = a.n {
                task.n_demos = Some(n);
            }
            task.validate()?;
            Ok(Task::Synthetic(task))
        }
        Some(kind) => {
            task.n_demos = a.n;
            let (train, test) = kind.files(&data_root(a.data_dir.as_deref()));
            Ok(Task::Real {
                kind,
                task,
                files: train.into_iter().chain(test).collect(),
            })
        }
    }
}

fn load_pairs(kind: RealKind, root: &Path) -> Result<Vec<robust_icl::eval::RealPair>> {
    let ds = kind.load(root)?.ok_or_else(|| {
        let dir = root.join(kind.subdir());
        io_err(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset files not found"))
    })?;
    ds.pairs()
}

fn report_line(name: &str, r: &EvalReport) -> String {
    format!(
        "{name}: clean {:.2}% (sd {:.2}), robust {:.2}% (sd {:.2}), mean robust margin {:.4}",
        100.0 * r.clean_accuracy,
        100.0 * r.clean_sd,
        100.0 * r.robust_accuracy,
        100.0 * r.robust_sd,
        r.mean_robust_margin
    )
}

fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("task,model,eps,clean,clean_sd,robust,robust_sd,mean_robust_margin\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.meta.task,
        r.meta.regime.as_deref().unwrap_or("custom"),
        r.meta.eps,
        r.clean_accuracy,
        r.clean_sd,
        r.robust_accuracy,
        r.robust_sd,
        r.mean_robust_margin
    );
    if !r.pairs.is_empty() {
        out.push_str("\nclass_pos,class_neg,clean,robust\n");
        for p in &r.pairs {
            let _ = writeln!(out, "{},{},{},{}", p.classes.0, p.classes.1, p.clean, p.robust);
        }
    }
    out
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// std, adv, strong, or a parameter JSON file.
    #[arg(long)]
    params: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(flags: EvalArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let params_arg = ParamsArg::parse(a.params.as_deref().ok_or_else(|| invalid("--params is required"))?);
    let seed = seed_or_default(a.task.seed);
    let task = build_task(&a.task, seed)?;
    let pairs = match &task {
        Task::Real { kind, .. } => Some(load_pairs(*kind, &data_root(a.task.data_dir.as_deref()))?),
        Task::Synthetic(_) => None,
    };
    let params = params_arg.load(task.dim(&pairs), a.task.d)?;

    if let Some(out) = &a.out {
        let mut m = RunManifest::new("eval", resolved, Some(seed)).output(out);
        if let Some(p) = params_arg.input_file() {
            m = m.input(p)?;
        }
        if let Task::Real { files, .. } = &task {
            m = m.inputs(files)?;
        }
        m.write(&manifest_path(out))?;
    }
    let report = match (&task, &pairs) {
        (Task::Synthetic(t), _) => evaluate(&params, t)?,
        (Task::Real { task, .. }, Some(p)) => evaluate_pairs(&params, p, task)?,
        _ => unreachable!("real tasks always load their pairs"),
    };
    println!("{}", report_line(&report.meta.task, &report));
    if let Some(out) = &a.out {
        write_output(out, &report_csv(&report))?;
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct Table1Args {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    full_scale: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for table1.txt, table1.csv, table1_pairs.csv and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn table1(flags: Table1Args) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let seed = seed_or_default(a.seed);
    let root = data_root(a.data_dir.as_deref());
    let scale = if a.full_scale.unwrap_or(false) { 1000 } else { 200 };
    let cfg = Table1Config {
        data_dir: root.clone(),
        seed,
        batches: a.batches.unwrap_or(if a.full_scale.unwrap_or(false) { 1000 } else { 100 }),
        queries_per_batch: a.queries.unwrap_or(scale),
        n_demos: a.n.unwrap_or(scale),
        workers: a.workers.unwrap_or(1),
    };
    let outputs = a.out.as_ref().map(|dir| {
        (
            dir.join("table1.txt"),
            dir.join("table1.csv"),
            dir.join("table1_pairs.csv"),
            dir.join("manifest.json"),
        )
    });
    if let Some((txt, csv, pairs, manifest)) = &outputs {
        let inputs: Vec<PathBuf> = RealKind::ALL
            .iter()
            .flat_map(|k| {
                let (tr, te) = k.files(&root);
                tr.into_iter().chain(te)
            })
            .collect();
        RunManifest::new("table1", json!({ "flags": resolved, "table": cfg }), Some(seed))
            .inputs(&inputs)?
            .output(txt)
            .output(csv)
            .output(pairs)
            .write(manifest)?;
    }
    let report = run_table1(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for kind in RealKind::ALL {
        let note = root.join(kind.subdir()).join("PROVENANCE.txt");
        if let Ok(text) = std::fs::read_to_string(&note) {
            eprintln!("note ({}): {}", kind.name(), text.trim());
        }
    }
    let text = report.to_text();
    print!("{text}");
    if let Some((txt, csv, pairs, _)) = &outputs {
        write_output(txt, &text)?;
        write_output(csv, &report.to_csv())?;
        write_output(pairs, &report.pairs_csv())?;
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// d_vul, d_rob, d_irr, N or eps.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long)]
    values: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sweep(flags: SweepArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let axis: SweepAxis = a.axis.as_deref().ok_or_else(|| invalid("--axis is required"))?.parse()?;
    let values = a
        .values
        .as_deref()
        .ok_or_else(|| invalid("--values is required"))?
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(format!("bad sweep value {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let seed = seed_or_default(a.task.seed);
    let mut task_args = a.task.clone();
    task_args.dataset.get_or_insert_with(|| "dte".into());
    let Task::Synthetic(base) = build_task(&task_args, seed)? else {
        return Err(invalid("sweeps run on the synthetic dtr or dte tasks"));
    };
    if let Some(out) = &a.out {
        RunManifest::new("sweep", resolved, Some(seed)).output(out).write(&manifest_path(out))?;
    }
    let csv = sweep_csv(&run_sweep(&base, axis, &values)?);
    match &a.out {
        Some(out) => write_output(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct ScoreTableArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// CSV path; a JSON sidecar with thresholds is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn score_table(flags: ScoreTableArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let table = ScoreTable::compute(a.d.unwrap_or(20), a.lambda.unwrap_or(0.1), a.eps.unwrap_or(0.0))?;
    match &a.out {
        Some(out) => {
            RunManifest::new("score-table", resolved, None)
                .output(out)
                .output(&out.with_extension("json"))
                .write(&manifest_path(out))?;
            table.write(out)?;
        }
        None => print!("{}", table.to_csv()),
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct VerifyArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

pub fn verify_theory(a: VerifyArgs) -> Result<()> {
    let d = a.d.unwrap_or(20);
    let lambda = a.lambda.unwrap_or(0.1);
    let th = epsilon_thresholds(d, lambda)?;
    println!("thresholds for d = {d}, lambda = {lambda}:");
    for (name, v) in th.ordered() {
        println!("  {name:<7} {v:.6}");
    }
    println!("ordering holds: {}", th.is_ordered());
    println!("{:>10}  {:>4} {:>6} {:>12}  optimum", "eps", "d'", "b_last", "score");
    let mut grid = vec![0.0, th.eps_s5.min(th.eps7) / 2.0];
    grid.extend(th.ordered().iter().map(|(_, v)| *v));
    grid.push(th.eps1 + 0.01);
    for eps in grid {
        let opt = brute_force_optimum(d, lambda, eps)?;
        let mut form = "partial".to_string();
        for r in Regime::ALL {
            let cf = closed_form_params(r, d)?;
            if cf.p == opt.params.p && cf.q == opt.params.q {
                form = r.to_string();
            }
        }
        println!("{eps:>10.6}  {:>4} {:>6} {:>12.6}  {form}", opt.d_prime, opt.b_last, opt.score);
    }
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct PreprocessArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// mnist, fmnist or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Class pair `a,b`; `a` becomes label +1.
    #[arg(long)]
    classes: Option<String>,
    /// Project onto this many principal directions after alignment.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_classes(s: &str) -> Result<(u8, u8)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || invalid(format!("--classes expects two distinct digits a,b; got {s:?}"));
    let [a, b] = parts[..] else { return Err(bad()) };
    let (a, b) = (a.parse::<u8>().map_err(|_| bad())?, b.parse::<u8>().map_err(|_| bad())?);
    if a == b || a > 9 || b > 9 {
        return Err(bad());
    }
    Ok((a, b))
}

pub fn preprocess(flags: PreprocessArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let kind: RealKind = a.dataset.as_deref().ok_or_else(|| invalid("--dataset is required"))?.parse()?;
    let classes = parse_classes(a.classes.as_deref().unwrap_or("0,1"))?;
    let out = required(&a.out, "--out")?;
    let root = data_root(a.data_dir.as_deref());
    let (train_files, test_files) = kind.files(&root);
    let inputs: Vec<PathBuf> = train_files.iter().chain(&test_files).cloned().collect();
    let ds = kind.load(&root)?.ok_or_else(|| {
        io_err(&root.join(kind.subdir()), std::io::Error::new(std::io::ErrorKind::NotFound, "dataset files not found"))
    })?;

    let (train_csv, test_csv, meta) = (out.join("train.csv"), out.join("test.csv"), out.join("dataset.json"));
    RunManifest::new("preprocess", resolved, None)
        .inputs(&inputs)?
        .output(&train_csv)
        .output(&test_csv)
        .output(&meta)
        .write(&out.join("manifest.json"))?;

    let (tr0, tr1) = (ds.train.class_samples(classes.0), ds.train.class_samples(classes.1));
    let (te0, te1) = (ds.test.class_samples(classes.0), ds.test.class_samples(classes.1));
    let pre = Preprocessor::fit(&tr0, &tr1)?;
    let prov = Provenance::RealPair {
        source: kind.name().into(),
        positive_class: classes.0,
        negative_class: classes.1,
    };
    let mut train = pre.apply_pair(&tr0, &tr1, prov.clone())?;
    let mut test = pre.apply_pair(&te0, &te1, prov)?;
    if let Some(k) = a.pca {
        let basis = robust_icl::distributions::PcaBasis::fit(&train, k)?;
        train = basis.transform(&train)?;
        test = basis.transform(&test)?;
    }
    write_csv(&train_csv, &train)?;
    write_csv(&test_csv, &test)?;
    DatasetManifest {
        source_files: inputs,
        class_pair: classes,
        signs: pre.signs.clone(),
        train_count: train.len(),
        test_count: test.len(),
        dim: train.dim(),
    }
    .write(&meta)?;
    println!(
        "{} pair {}-{}: {} train, {} test, dimension {}",
        kind.name(),
        classes.0,
        classes.1,
        train.len(),
        test.len(),
        train.dim()
    );
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct StatsArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// One pair `a,b`; all 45 pairs when omitted.
    #[arg(long)]
    classes: Option<String>,
    /// Reduce to this many principal directions before computing statistics.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn stats(flags: StatsArgs) -> Result<()> {
    let (a, resolved) = resolve(&flags, flags.config.as_deref())?;
    let kind: RealKind = a.dataset.as_deref().ok_or_else(|| invalid("--dataset is required"))?.parse()?;
    let pairs = match a.classes.as_deref() {
        Some(c) => vec![parse_classes(c)?],
        None => class_pairs(10),
    };
    let root = data_root(a.data_dir.as_deref());
    let (tr, te) = kind.files(&root);
    if let Some(out) = &a.out {
        RunManifest::new("stats", resolved, None)
            .inputs(tr.iter().chain(&te))?
            .output(out)
            .write(&manifest_path(out))?;
    }
    let ds = kind.load(&root)?.ok_or_else(|| {
        io_err(&root.join(kind.subdir()), std::io::Error::new(std::io::ErrorKind::NotFound, "dataset files not found"))
    })?;
    let mut csv = String::from("class_pos,class_neg,dim,aligned,nonnegative_cov_fraction\n");
    let mut fractions = Vec::new();
    for (c0, c1) in pairs {
        let pre = robust_icl::distributions::preprocess_binary(&ds.train.class_samples(c0), &ds.train.class_samples(c1))?;
        let pre = match a.pca {
            Some(k) => align_signs(&pca_align(&pre, k)?).0,
            None => pre,
        };
        let st = feature_stats(&pre)?;
        let aligned = (0..pre.dim()).all(|i| pre.samples.iter().map(|s| s.y.value() * s.x[i]).sum::<f64>() >= 0.0);
        let frac = st.nonnegative_cov_fraction();
        fractions.push(frac);
        let _ = writeln!(csv, "{c0},{c1},{},{aligned},{frac}", pre.dim());
    }
    let (mean, sd) = mean_sd(&fractions);
    match &a.out {
        Some(out) => write_output(out, &csv)?,
        None => print!("{csv}"),
    }
    println!("mean nonnegative total-covariance fraction {mean:.4} (sd {sd:.4}) over {} pairs", fractions.len());
    Ok(())
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub struct AttackDemoArgs {
    #[arg(long)]
    params: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn attack_demo(a: AttackDemoArgs) -> Result<()> {
    let d = a.d.unwrap_or(5);
    let params_arg = ParamsArg::parse(a.params.as_deref().unwrap_or("std"));
    let params = params_arg.load(d, None)?;
    let lambda = a.lambda.unwrap_or(0.1);
    let eps = a.eps.unwrap_or(0.15);
    let seed = seed_or_default(a.seed);
    let mut rng = rng_from_seed(seed);
    let spec = robust_icl::distributions::TrainMixture { d, lambda }.pick(&mut rng);
    let ep = sample_episode(&spec, a.n.unwrap_or(20), &mut rng);
    let delta = optimal_attack(&ep.prompt, ep.label, &params, eps)?;
    let attacked = ep.prompt.perturb_query(&delta)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" ");
    let query: Vec<f64> = ep.prompt.query().iter().copied().collect();
    println!("robust coordinate {} (zero-based), label {:+}", spec.robust_index, ep.label.value());
    println!("query        {}", fmt(&query));
    println!("perturbation {}", fmt(&delta));
    println!("clean prediction    {:+.6}", predict(&ep.prompt, &params)?);
    println!("attacked prediction {:+.6}", predict(&attacked, &params)?);
    println!("robust margin       {:+.6}", robust_margin(&params.reduced(), &ep.prompt, ep.label, eps)?);
    Ok(())
}

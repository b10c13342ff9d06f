use std::fs;
use std::path::{Path, PathBuf};

use robust_icl::model::TransformerParams;
use robust_icl::theory::{closed_form_params, Regime};
use robust_icl::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 0;

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

/// Overlays the flags that were given on top of a JSON config file with the same keys.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(flags: &T, config: Option<&Path>) -> Result<(T, Value)> {
    let mut merged = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(invalid(format!("config {} must hold a JSON object", path.display()))),
                Err(e) => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        msg: e.to_string(),
                    })
                }
            }
        }
        None => Map::new(),
    };
    if let Value::Object(known) = serde_json::to_value(T::default())? {
        if let Some(k) = merged.keys().find(|k| !known.contains_key(*k)) {
            return Err(invalid(format!("unknown config key {k:?}")));
        }
    }
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    let value = Value::Object(merged);
    let resolved = serde_json::from_value(value.clone()).map_err(|e| invalid(format!("config: {e}")))?;
    Ok((resolved, value))
}

pub fn seed_or_default(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        eprintln!("no --seed given, using default seed {DEFAULT_SEED}");
        DEFAULT_SEED
    })
}

/// Data root: the flag, else `ICL_DATA_DIR`, else `./data`.
pub fn data_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("ICL_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn save_params(params: &TransformerParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(params)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_params(path: &Path) -> Result<TransformerParams> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub enum ParamsArg {
    Closed(Regime),
    File(PathBuf),
}

impl ParamsArg {
    pub fn parse(s: &str) -> Self {
        s.parse().map_or_else(|_| ParamsArg::File(PathBuf::from(s)), ParamsArg::Closed)
    }

    /// Resolves against the task dimension; an explicit `--d` must agree with both.
    pub fn load(&self, task_d: usize, flag_d: Option<usize>) -> Result<TransformerParams> {
        if let Some(d) = flag_d.filter(|&d| d != task_d) {
            return Err(invalid(format!("--d {d} does not match the task dimension {task_d}")));
        }
        let params = match self {
            ParamsArg::Closed(r) => closed_form_params(*r, task_d)?,
            ParamsArg::File(p) => load_params(p)?,
        };
        if params.d() != task_d {
            return Err(invalid(format!(
                "parameters are for d = {} but the task has d = {task_d}",
                params.d()
            )));
        }
        Ok(params)
    }

    pub fn input_file(&self) -> Option<&Path> {
        match self {
            ParamsArg::File(p) => Some(p),
            ParamsArg::Closed(_) => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<Self> {
        for p in paths {
            if p.exists() {
                self = self.input(p)?;
            }
        }
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Written next to the first output before any output exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// `out.csv` → `out.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn write_output(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

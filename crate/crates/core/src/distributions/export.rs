use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Sidecar describing where a preprocessed CSV came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_files: Vec<PathBuf>,
    pub class_pair: (u8, u8),
    pub signs: Vec<f64>,
    pub train_count: usize,
    pub test_count: usize,
    pub dim: usize,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Header `dim_0,…,dim_{d-1},label`; labels written as `1` or `-1`.
pub fn write_csv(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..ds.dim()).map(|i| format!("dim_{i}")).collect();
    writeln!(w, "{},label", header.join(",")).map_err(io)?;
    for s in &ds.samples {
        for v in &s.x {
            write!(w, "{v},").map_err(io)?;
        }
        writeln!(w, "{}", s.y.value() as i32).map_err(io)?;
    }
    w.flush().map_err(io)
}

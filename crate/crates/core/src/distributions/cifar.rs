use std::fs;
use std::path::Path;

use super::RawDataset;
use crate::error::{Error, Result};

/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_DIM: usize = 3 * 32 * 32;

/// Concatenates CIFAR-10 binary batch files; every channel is kept, giving `d = 3072`.
pub fn load_cifar<P: AsRef<Path>>(batch_paths: &[P]) -> Result<RawDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        pixels.reserve(bytes.len() / CIFAR_RECORD * CIFAR_DIM);
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok(RawDataset {
        dim: CIFAR_DIM,
        pixels,
        labels,
    })
}

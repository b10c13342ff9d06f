use std::fs;
use std::path::Path;

use super::RawDataset;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, offset + 4, bytes.len()))
}

fn truncated(path: &Path, needed: usize, have: usize) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("file truncated: need {needed} bytes, found {have}"),
        ),
    )
}

/// Parses an uncompressed IDX image file (`0x00000803`) and its label file (`0x00000801`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        ));
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        ));
    }
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }

    let dim = rows * cols;
    let need = 16 + count * dim;
    if img.len() < need {
        return Err(truncated(images_path, need, img.len()));
    }
    if lab.len() < 8 + count {
        return Err(truncated(labels_path, 8 + count, lab.len()));
    }
    Ok(RawDataset {
        dim,
        pixels: img[16..need].to_vec(),
        labels: lab[8..8 + count].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(magic: u32, images: &[[u8; 4]]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            out.extend_from_slice(im);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn parses_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let im = write(dir.path(), "im", &idx_images(IMAGE_MAGIC, &[[0, 255, 0, 255]]));
        let lb = write(dir.path(), "lb", &idx_labels(&[7]));
        let raw = load_idx(&im, &lb).unwrap();
        assert_eq!(raw.dim, 4);
        assert_eq!(raw.features(0), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(raw.class_samples(7).len(), 1);
    }

    #[test]
    fn wrong_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let im = write(dir.path(), "im", &idx_images(0x0000_0802, &[[0, 0, 0, 0]]));
        let lb = write(dir.path(), "lb", &idx_labels(&[0]));
        let err = load_idx(&im, &lb).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("0x00000802"), "{err}");
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let im = write(dir.path(), "im", &idx_images(IMAGE_MAGIC, &[[0, 0, 0, 0], [1, 1, 1, 1]]));
        let lb = write(dir.path(), "lb", &idx_labels(&[0]));
        assert!(matches!(load_idx(&im, &lb), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(IMAGE_MAGIC, &[[0, 0, 0, 0], [1, 1, 1, 1]]);
        bytes.truncate(bytes.len() - 3);
        let im = write(dir.path(), "im", &bytes);
        let lb = write(dir.path(), "lb", &idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&im, &lb), Err(Error::Io { .. })));
        let missing = dir.path().join("nope");
        assert!(matches!(load_idx(&missing, &lb), Err(Error::Io { .. })));
    }
}

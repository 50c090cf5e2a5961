//! IDX reader/writer (the MNIST distribution format).
//!
//! Layout: a 4-byte big-endian magic (`0x00000803` for rank-3 unsigned-byte
//! images, `0x00000801` for rank-1 unsigned-byte labels), one 4-byte
//! big-endian size per dimension, then the raw payload.

use std::fs;
use std::path::Path;

use super::DataMatrix;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// Raw images: `(count, rows, cols, pixels)` with pixels row-major per image.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated payload: header promises {need} pixel bytes, file has {}",
                payload.len()
            ),
        ));
    }
    Ok((n, rows, cols, payload[..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated payload: header promises {n} labels, file has {}",
                payload.len()
            ),
        ));
    }
    Ok(payload[..n].to_vec())
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]` and each image becomes a column.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DataMatrix> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            labels_path,
            4,
            format!(
                "label count {} does not match image count {n} in {}",
                labels.len(),
                images_path.display()
            ),
        ));
    }
    let dim = rows * cols;
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    // Each image is contiguous, so the byte order is already column-major d × N.
    let x = Matrix::from_vec(dim, n, data);
    DataMatrix::new(x, Some(labels.into_iter().map(usize::from).collect()))
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::Domain(format!(
                "image has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img.idx");
        let lab = dir.join("lab.idx");
        let a: Vec<u8> = (0..4).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
        let b: Vec<u8> = vec![255, 255, 0, 0];
        write_idx_images(&img, 2, 2, &[a, b]).unwrap();
        write_idx_labels(&lab, &[3, 7]).unwrap();
        (img, lab)
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let data = load_idx(&img, &lab).unwrap();
        assert_eq!(data.dim(), 4);
        assert_eq!(data.len(), 2);
        assert_eq!(data.labels().unwrap(), &[3, 7]);
        assert_eq!(data.x().column(0).as_slice(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(data.x().column(1).as_slice(), &[1.0, 1.0, 0.0, 0.0]);
        let (n, r, c, raw) = read_idx_images(&img).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(raw, vec![0, 255, 0, 255, 255, 255, 0, 0]);
    }

    #[test]
    fn bad_magic_names_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let err = load_idx(&lab, &img).unwrap_err();
        match &err {
            Error::Format { path, offset, .. } => {
                assert_eq!(path, &lab);
                assert_eq!(*offset, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&img, bytes).unwrap();
        let err = load_idx(&img, &lab).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        write_idx_labels(&lab, &[1, 2, 3]).unwrap();
        let err = load_idx(&img, &lab).unwrap_err().to_string();
        assert!(err.contains("does not match image count"), "{err}");
    }
}

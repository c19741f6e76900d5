//! Reader for IDX image/label files (the MNIST distribution format).

use std::path::Path;

use super::{Dataset, ModelError, Split};
use crate::autodiff::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, ModelError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ModelError::InvalidData("truncated IDX header".into()))
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), ModelError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(ModelError::InvalidData(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(ModelError::InvalidData(format!(
            "IDX images declare {n}x{rows}x{cols} bytes, file has {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8], ModelError> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(ModelError::InvalidData(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(ModelError::InvalidData(format!(
            "IDX labels declare {n} entries, file has {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Loads unsigned-byte IDX images as `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    split: Split,
) -> Result<Dataset, ModelError> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    let (n, rows, cols, pixels) = parse_images(&image_bytes)?;
    let ys = parse_labels(&label_bytes)?;
    if ys.len() != n {
        return Err(ModelError::InvalidData(format!(
            "{n} images but {} labels",
            ys.len()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    Dataset::new(inputs, ys.iter().map(|&y| y as usize).collect(), num_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, r: u32, c: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, n, r, c] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn labels(body: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(body.len() as u32).to_be_bytes());
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn round_trip_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, images(2, 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4])).unwrap();
        std::fs::write(&lp, labels(&[1, 0])).unwrap();
        let d = load_idx(&ip, &lp, 10, Split::Test).unwrap();
        assert_eq!(d.inputs().shape(), &[2, 1, 2, 2]);
        assert_eq!(d.inputs().data()[1], 1.0);
        assert_eq!(d.inputs().data()[2], 0.2);
        assert_eq!(d.labels(), &[1, 0]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_images(&images(2, 2, 2, &[0; 7])).is_err());
        assert!(parse_images(&labels(&[1])).is_err());
        assert!(parse_labels(&[0, 0]).is_err());
    }
}

//! IDX image/label file parsing (the classic MNIST container).
//!
//! Images file: magic 0x00000803, then big-endian u32 counts for
//! (n, rows, cols), then n*rows*cols unsigned bytes. Labels file: magic
//! 0x00000801, then a big-endian u32 count, then n label bytes. Pixels are
//! scaled to [0, 1]; the label count is inferred from the data.

use std::fs;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse(format!("truncated file while reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let img = fs::read(images_path.as_ref())?;
    let lab = fs::read(labels_path.as_ref())?;

    let magic = read_u32_be(&img, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse(format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32_be(&img, 4, "image count")? as usize;
    let rows = read_u32_be(&img, 8, "image rows")? as usize;
    let cols = read_u32_be(&img, 12, "image cols")? as usize;
    let pixels = &img[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::Parse(format!(
            "image payload holds {} bytes, header promises {}",
            pixels.len(),
            n * rows * cols
        )));
    }

    let magic = read_u32_be(&lab, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse(format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n_lab = read_u32_be(&lab, 4, "label count")? as usize;
    if n_lab != n {
        return Err(Error::Parse(format!("{n} images but {n_lab} labels")));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() != n {
        return Err(Error::Parse("truncated label payload".into()));
    }

    let dim = rows * cols;
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| pixels[i * dim..(i + 1) * dim].iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_labels = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(features, labels, None, num_labels, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("ecp-idx-{name}-{}", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    /// Byte-by-byte fixture: 4 images of 2x2 pixels plus matching labels.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 255, 128, 64, 1, 2, 3, 4, 255, 255, 0, 0, 10, 20, 30, 40]);

        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&4u32.to_be_bytes());
        lab.extend_from_slice(&[3, 0, 1, 2]);
        (img, lab)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let (img, lab) = fixture();
        let ipath = write_tmp("img", &img);
        let lpath = write_tmp("lab", &lab);
        let ds = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[3, 0, 1, 2]);
        assert_eq!(ds.num_labels(), 4);
        assert_eq!(ds.feature_row(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        std::fs::remove_file(ipath).ok();
        std::fs::remove_file(lpath).ok();
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let (img, mut lab) = fixture();
        lab[7] = 3; // claim 3 labels for 4 images
        lab.truncate(8 + 3);
        let ipath = write_tmp("img2", &img);
        let lpath = write_tmp("lab2", &lab);
        assert!(load_idx(&ipath, &lpath).is_err());
        std::fs::remove_file(ipath).ok();
        std::fs::remove_file(lpath).ok();
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let (mut img, lab) = fixture();
        img[3] = 0x99;
        let ipath = write_tmp("img3", &img);
        let lpath = write_tmp("lab3", &lab);
        assert!(matches!(load_idx(&ipath, &lpath), Err(Error::Parse(_))));

        let (mut img, _) = fixture();
        img.truncate(img.len() - 2);
        let ipath2 = write_tmp("img4", &img);
        assert!(load_idx(&ipath2, &lpath).is_err());
        std::fs::remove_file(ipath).ok();
        std::fs::remove_file(ipath2).ok();
        std::fs::remove_file(lpath).ok();
    }
}

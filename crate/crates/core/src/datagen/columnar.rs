//! Columnar binary dataset serialization.
//!
//! Layout (all integers little-endian u32, features little-endian f64):
//!
//! ```text
//! magic "ECD1" | n | dim | K | G
//! features: n * dim f64, row-major
//! labels:   n u32
//! groups:   n i32 (only when G > 0; -1 marks a missing group id)
//! ```

use std::fs;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ECD1";

pub fn save_columnar(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(20 + ds.len() * (ds.dim() * 8 + 8));
    out.extend_from_slice(MAGIC);
    for v in [ds.len(), ds.dim(), ds.num_labels(), ds.num_groups()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        for &x in ds.feature_row(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.label(i) as u32).to_le_bytes());
    }
    if ds.num_groups() > 0 {
        for i in 0..ds.len() {
            let z = ds.side(i).map_or(-1i32, |z| z as i32);
            out.extend_from_slice(&z.to_le_bytes());
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

pub fn load_columnar(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not an ECD1 file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()) as usize;
    let (n, dim, k, g) = (word(0), word(1), word(2), word(3));

    let feat_bytes = n * dim * 8;
    let label_bytes = n * 4;
    let group_bytes = if g > 0 { n * 4 } else { 0 };
    if bytes.len() != 20 + feat_bytes + label_bytes + group_bytes {
        return Err(Error::Parse(format!(
            "ECD1 payload holds {} bytes, header promises {}",
            bytes.len() - 20,
            feat_bytes + label_bytes + group_bytes
        )));
    }

    let mut offset = 20;
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim)
            .map(|d| f64::from_le_bytes(bytes[offset + d * 8..offset + d * 8 + 8].try_into().unwrap()))
            .collect();
        offset += dim * 8;
        features.push(row);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize);
        offset += 4;
    }
    let side = if g > 0 {
        let mut side = Vec::with_capacity(n);
        for _ in 0..n {
            let z = i32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
            side.push(if z < 0 { None } else { Some(z as usize) });
        }
        Some(side)
    } else {
        None
    };
    LabeledDataset::new(features, labels, side, k, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RngSeed;
    use crate::datagen::{gen_discrete_task, grouped_task};

    #[test]
    fn round_trip_preserves_everything() {
        let spec = grouped_task(6, 3, 0.6).unwrap();
        let ds = gen_discrete_task(&spec, 37, RngSeed(2)).unwrap();
        let path = std::env::temp_dir().join(format!("ecp-ecd-{}.ecd", std::process::id()));
        save_columnar(&ds, &path).unwrap();
        let back = load_columnar(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.dim(), ds.dim());
        assert_eq!(back.num_labels(), ds.num_labels());
        assert_eq!(back.num_groups(), ds.num_groups());
        assert_eq!(back.labels(), ds.labels());
        for i in 0..ds.len() {
            assert_eq!(back.feature_row(i), ds.feature_row(i));
            assert_eq!(back.side(i), ds.side(i));
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn rejects_foreign_bytes() {
        let path = std::env::temp_dir().join(format!("ecp-ecd-bad-{}.ecd", std::process::id()));
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(load_columnar(&path).is_err());
        std::fs::remove_file(path).ok();
    }
}

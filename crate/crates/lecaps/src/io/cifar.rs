//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (1024 red, 1024 green, 1024 blue, row-major 32x32).

use std::path::PathBuf;

use lecaps_core::data::DatasetSplit;
use lecaps_core::Tensor;

use super::read_file;
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// `(labels, pixels)` of one batch file.
pub fn parse_records(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>), String> {
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(format!(
            "size {} is not a positive multiple of {RECORD_LEN}",
            bytes.len()
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    for rec in bytes.chunks_exact(RECORD_LEN) {
        if rec[0] > 9 {
            return Err(format!("label {} outside 0..10", rec[0]));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Concatenates batch files into one `[n, 3, 32, 32]` split.
pub fn load_cifar10_binary(paths: &[PathBuf], name: &str) -> Result<DatasetSplit> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 batch files given".into()));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let (l, p) = parse_records(&read_file(path)?).map_err(|m| Error::format(path, m))?;
        labels.extend(l);
        pixels.extend(p);
    }
    split_from_bytes(&labels, &pixels, name)
}

fn split_from_bytes(labels: &[u8], pixels: &[u8], name: &str) -> Result<DatasetSplit> {
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(&[labels.len(), 3, 32, 32], data)?;
    Ok(DatasetSplit::new(name, images, labels.to_vec(), 10)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (labels, pixels) = parse_records(&rec).unwrap();
        assert_eq!(labels, [7]);
        let split = split_from_bytes(&labels, &pixels, "t").unwrap();
        assert_eq!(split.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(split.images.data()[1], 1.0 / 255.0);
    }

    #[test]
    fn truncated_record_rejected() {
        let rec = vec![0u8; RECORD_LEN + 10];
        assert!(parse_records(&rec).is_err());
        assert!(parse_records(&[]).is_err());
    }
}

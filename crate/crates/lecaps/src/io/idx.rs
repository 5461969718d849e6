//! IDX files as used by MNIST and Fashion-MNIST: a big-endian magic
//! (`0x00000803` for u8 images, `0x00000801` for u8 labels), big-endian u32
//! dimensions, then raw bytes.

use std::path::Path;

use lecaps_core::data::DatasetSplit;
use lecaps_core::Tensor;

use super::{read_file, write_file};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded image file: `n` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, String> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(format!("truncated header: {} bytes", bytes.len()));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(format!("bad magic 0x{:08x}, expected 0x{magic:08x}", word(0)));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, String> {
    let dims = header(bytes, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(format!(
            "expected {n}x{rows}x{cols} = {} pixel bytes, found {}",
            n * rows * cols,
            body.len()
        ));
    }
    Ok(IdxImages {
        n,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, String> {
    let dims = header(bytes, LABELS_MAGIC, 1)?;
    let body = &bytes[8..];
    if body.len() != dims[0] {
        return Err(format!("expected {} labels, found {}", dims[0], body.len()));
    }
    Ok(body.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for w in [IMAGES_MAGIC, images.n as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, name: &str) -> Result<DatasetSplit> {
    let images = parse_images(&read_file(images_path)?).map_err(|m| Error::format(images_path, m))?;
    let labels = parse_labels(&read_file(labels_path)?).map_err(|m| Error::format(labels_path, m))?;
    if images.n != labels.len() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images in {}", labels.len(), images.n, images_path.display()),
        ));
    }
    if images.n == 0 {
        return Err(Error::format(images_path, "file holds no images"));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let data = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let tensor = Tensor::new(&[images.n, 1, images.rows, images.cols], data)?;
    Ok(DatasetSplit::new(name, tensor, labels, n_classes)?)
}

/// Writes a single-channel split as IDX; pixels are rounded to the nearest byte.
pub fn save_idx(split: &DatasetSplit, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = split.image_shape();
    if c != 1 {
        return Err(Error::Config(format!("IDX output needs one channel, split has {c}")));
    }
    let pixels = split
        .images
        .data()
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let images = IdxImages {
        n: split.len(),
        rows: h,
        cols: w,
        pixels,
    };
    write_file(images_path, &encode_images(&images))?;
    write_file(labels_path, &encode_labels(&split.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = IdxImages {
            n: 2,
            rows: 2,
            cols: 3,
            pixels: (0..12).collect(),
        };
        assert_eq!(parse_images(&encode_images(&img)).unwrap(), img);
        assert_eq!(parse_labels(&encode_labels(&[3, 7])).unwrap(), [3, 7]);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = encode_labels(&[1]);
        bytes[3] = 0x03;
        let err = parse_labels(&bytes).unwrap_err();
        assert!(err.contains("bad magic"), "{err}");
        assert!(parse_images(&encode_labels(&[1])).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let img = IdxImages {
            n: 2,
            rows: 2,
            cols: 2,
            pixels: vec![0; 8],
        };
        let bytes = encode_images(&img);
        assert!(parse_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_images(&bytes[..10]).is_err());
    }
}

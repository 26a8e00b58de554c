//! IDX binary files (big-endian headers, unsigned byte payloads).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::vision::Image;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], at: usize, file: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: header truncated at byte {at}", file.display())))
}

fn read_header(bytes: &[u8], expected: u32, ndim: usize, file: &Path) -> Result<(Vec<usize>, usize)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{}: magic {magic}, expected {expected}",
            file.display()
        )));
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, file).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndim;
    let expected_len = dims.iter().product::<usize>();
    let actual = bytes.len() - offset;
    if actual != expected_len {
        return Err(Error::Format(format!(
            "{}: payload holds {actual} bytes, header promises {expected_len}",
            file.display()
        )));
    }
    Ok((dims, offset))
}

/// Parses an image file (magic 2051, `n × rows × cols`) and a label file
/// (magic 2049, `n`).
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, off) = read_header(images, IMAGES_MAGIC, 3, images_path)?;
    let (ldims, loff) = read_header(labels, LABELS_MAGIC, 1, labels_path)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::Format(format!(
            "{} holds {n} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            ldims[0]
        )));
    }
    let size = rows * cols;
    let imgs = (0..n)
        .map(|i| {
            let px = images[off + i * size..off + (i + 1) * size]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            Image::new(rows, cols, 1, px)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels[loff..].iter().map(|&b| b as usize).collect();
    Dataset::new(imgs, labels, None)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, images_path, labels_path)
}

/// Encodes grayscale images as an IDX image file.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("no images to encode".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), first.height(), first.width()] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        if img.channels() != 1 || img.height() != first.height() || img.width() != first.width() {
            return Err(Error::Input("IDX images must be same-size grayscale".into()));
        }
        out.extend(img.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

//! Binary PPM (P6) and PGM (P5) images, one subdirectory per class.

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::vision::transforms::resize_box;
use crate::vision::Image;

/// Parses a binary P6 or P5 file.
pub fn parse_pnm(bytes: &[u8], file: &Path) -> Result<Image> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", file.display()));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(bad(&format!("unsupported variant {other:?}; only binary P6/P5"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| bad(&format!("invalid {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if !(1..=65535).contains(&maxval) || width == 0 || height == 0 {
        return Err(bad("invalid dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * sample_bytes;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() >= need)
        .ok_or_else(|| bad(&format!("raster needs {need} bytes")))?;
    let scale = maxval as f32;
    let px = if sample_bytes == 1 {
        raster[..need].iter().map(|&b| b as f32 / scale).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
            .collect()
    };
    Image::new(height, width, channels, px)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

fn to_rgb(img: &Image) -> Image {
    if img.channels() == 3 {
        return img.clone();
    }
    let px = img.pixels().iter().flat_map(|&p| [p, p, p]).collect();
    Image::new(img.height(), img.width(), 3, px).expect("same dimensions")
}

/// Result of loading a class-per-directory tree.
#[derive(Clone, Debug)]
pub struct PpmLoad {
    pub dataset: Dataset,
    /// Files that were resampled to the target resolution.
    pub resized: Vec<PathBuf>,
}

/// Loads `root/<class>/<file>`. Class ids follow the lexicographic order of
/// the subdirectory names. Images whose size differs from `resolution`
/// (or, if `None`, from the first image) are bilinearly resampled.
pub fn load_ppm_dir(root: &Path, resolution: Option<usize>) -> Result<PpmLoad> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Input(format!("{} has no class subdirectories", root.display())));
    }
    let mut files = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (p, label)));
    }
    let mut raw = Vec::with_capacity(files.len());
    for (path, label) in &files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        raw.push((parse_pnm(&bytes, path)?, *label));
    }
    let any_rgb = raw.iter().any(|(img, _)| img.channels() == 3);
    let (th, tw) = match (resolution, raw.first()) {
        (Some(r), _) => (r, r),
        (None, Some((img, _))) => (img.height(), img.width()),
        (None, None) => return Err(Error::Input(format!("{} holds no images", root.display()))),
    };
    let mut images = Vec::with_capacity(raw.len());
    let mut labels = Vec::with_capacity(raw.len());
    let mut resized = Vec::new();
    for ((img, label), (path, _)) in raw.into_iter().zip(&files) {
        let img = if any_rgb { to_rgb(&img) } else { img };
        let img = if (img.height(), img.width()) != (th, tw) {
            log::info!(
                "resized {} from {}x{} to {th}x{tw}",
                path.display(),
                img.height(),
                img.width()
            );
            resized.push(path.clone());
            resize_box(&img, 0.0, 0.0, img.height() as f64, img.width() as f64, th, tw)?
        } else {
            img
        };
        images.push(img);
        labels.push(label);
    }
    let mut dataset = Dataset::new(images, labels, None)?;
    dataset.num_classes = classes.len();
    dataset.class_names = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    Ok(PpmLoad { dataset, resized })
}

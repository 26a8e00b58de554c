//! Individual augmentations. Each one is split into parameter sampling and a
//! pure `apply` so a [`TransformRecord`] can replay it exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::kernels::bilinear_taps;

/// The smallest side any crop source or target may have.
pub const MIN_SIDE: usize = 4;

/// Sampled parameters of one color jitter application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Order of the sub-ops: 0 brightness, 1 contrast, 2 saturation, 3 hue.
    pub order: [u8; 4],
    /// Saturation and hue were requested on a single-channel image and skipped.
    pub skipped_color: bool,
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [0, 1, 2, 3],
            skipped_color: false,
        }
    }
}

/// Ranges color jitter factors are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

/// One applied (or deliberately skipped) augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformOp {
    Crop {
        top: f64,
        left: f64,
        height: f64,
        width: f64,
        out_height: usize,
        out_width: usize,
    },
    Flip {
        applied: bool,
    },
    ColorJitter {
        params: JitterParams,
        applied: bool,
    },
    Blur {
        sigma: f64,
        applied: bool,
    },
    Solarize {
        threshold: f64,
        applied: bool,
    },
    Rotate {
        degrees: f64,
    },
    Elastic {
        alpha: f64,
        sigma: f64,
        applied: bool,
    },
}

impl TransformOp {
    pub fn name(&self) -> &'static str {
        match self {
            TransformOp::Crop { .. } => "crop",
            TransformOp::Flip { .. } => "flip",
            TransformOp::ColorJitter { .. } => "color_jitter",
            TransformOp::Blur { .. } => "blur",
            TransformOp::Solarize { .. } => "solarize",
            TransformOp::Rotate { .. } => "rotate",
            TransformOp::Elastic { .. } => "elastic",
        }
    }
}

/// An op together with the stream its parameters were drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub op: TransformOp,
    pub stream: RngStream,
}

impl TransformRecord {
    /// Re-applies the recorded op with its recorded parameters.
    pub fn replay(&self, img: &Image) -> Result<Image> {
        Ok(match &self.op {
            TransformOp::Crop {
                top,
                left,
                height,
                width,
                out_height,
                out_width,
            } => resize_box(img, *top, *left, *height, *width, *out_height, *out_width)?,
            TransformOp::Flip { applied } => {
                if *applied {
                    horizontal_flip(img)
                } else {
                    img.clone()
                }
            }
            TransformOp::ColorJitter { params, applied } => {
                if *applied {
                    apply_color_jitter(img, params)
                } else {
                    img.clone()
                }
            }
            TransformOp::Blur { sigma, applied } => {
                if *applied {
                    apply_gaussian_blur(img, *sigma)
                } else {
                    img.clone()
                }
            }
            TransformOp::Solarize { threshold, applied } => {
                if *applied {
                    solarize(img, *threshold)
                } else {
                    img.clone()
                }
            }
            TransformOp::Rotate { degrees } => apply_rotation(img, *degrees),
            TransformOp::Elastic {
                alpha,
                sigma,
                applied,
            } => {
                if *applied {
                    apply_elastic(img, *alpha, *sigma, &self.stream)
                } else {
                    img.clone()
                }
            }
        })
    }
}

/// Bilinear resample of the box `(top, left, height, width)` to
/// `out_height × out_width`, with edge replication.
pub fn resize_box(
    img: &Image,
    top: f64,
    left: f64,
    height: f64,
    width: f64,
    out_height: usize,
    out_width: usize,
) -> Result<Image> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Input("resize target must be non-empty".into()));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0f32; out_height * out_width * c];
    let sy = height / out_height as f64;
    let sx = width / out_width as f64;
    for oy in 0..out_height {
        let y = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for ox in 0..out_width {
            let x = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let dst = &mut out[(oy * out_width + ox) * c..(oy * out_width + ox + 1) * c];
            let mut acc = [0.0f64; 3];
            for &(idx, wt) in &bilinear_taps(x, y, w, h) {
                if wt == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(&img.pixels()[idx * c..(idx + 1) * c]) {
                    *a += wt * v as f64;
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
        }
    }
    Image::new(out_height, out_width, c, out)
}

/// Samples a crop box covering `scale` of the image area with aspect ratio
/// in `[3/4, 4/3]` and resamples it to `target × target`.
pub fn random_resized_crop(
    img: &Image,
    scale: (f64, f64),
    target: usize,
    stream: RngStream,
) -> Result<(Image, TransformRecord)> {
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(Error::Input(format!(
            "image {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
            img.height(),
            img.width()
        )));
    }
    if target < MIN_SIDE {
        return Err(Error::Input(format!("crop target {target} is below {MIN_SIDE}")));
    }
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::Input(format!("crop scale range {scale:?} not within (0, 1]")));
    }
    let mut rng = stream.rng();
    let (ih, iw) = (img.height() as f64, img.width() as f64);
    let area = ih * iw;
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut chosen = None;
    let mut target_area = area * scale.1;
    for _ in 0..10 {
        target_area = area * sample_range(&mut rng, scale.0, scale.1);
        let ratio = sample_range(&mut rng, lr_lo, lr_hi).exp();
        let w = (target_area * ratio).sqrt();
        let h = (target_area / ratio).sqrt();
        if w <= iw && h <= ih {
            let top = rng.gen::<f64>() * (ih - h);
            let left = rng.gen::<f64>() * (iw - w);
            chosen = Some((top, left, h, w));
            break;
        }
    }
    let (top, left, h, w) = chosen.unwrap_or_else(|| {
        // Keep the sampled area; pick the squarest box that fits.
        let w = iw.min(target_area.sqrt().max(target_area / ih));
        let h = target_area / w;
        ((ih - h) / 2.0, (iw - w) / 2.0, h, w)
    });
    let op = TransformOp::Crop {
        top,
        left,
        height: h,
        width: w,
        out_height: target,
        out_width: target,
    };
    let record = TransformRecord { op, stream };
    Ok((record.replay(img)?, record))
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Reverses column order in every row.
pub fn horizontal_flip(img: &Image) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = Vec::with_capacity(img.pixels().len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(img.pixel(y, x));
        }
    }
    Image::new(h, w, c, out).expect("same dimensions")
}

/// Draws jitter factors uniformly from `[1 − r, 1 + r]` (hue from
/// `[−r, r]`) and a random sub-op order.
pub fn sample_jitter(ranges: &JitterRanges, channels: usize, stream: &RngStream) -> JitterParams {
    let mut rng = stream.rng();
    let factor = |rng: &mut rand_chacha::ChaCha8Rng, r: f64| sample_range(rng, (1.0 - r).max(0.0), 1.0 + r);
    let brightness = factor(&mut rng, ranges.brightness);
    let contrast = factor(&mut rng, ranges.contrast);
    let saturation = factor(&mut rng, ranges.saturation);
    let hue = sample_range(&mut rng, -ranges.hue, ranges.hue);
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(&mut rng);
    JitterParams {
        brightness,
        contrast,
        saturation,
        hue,
        order,
        skipped_color: channels == 1,
    }
}

/// Color jitter with factors drawn from `ranges`.
pub fn color_jitter(img: &Image, ranges: &JitterRanges, stream: RngStream) -> (Image, TransformRecord) {
    let params = sample_jitter(ranges, img.channels(), &stream);
    let out = apply_color_jitter(img, &params);
    let record = TransformRecord {
        op: TransformOp::ColorJitter {
            params,
            applied: true,
        },
        stream,
    };
    (out, record)
}

/// Applies jitter sub-ops in the recorded order.
pub fn apply_color_jitter(img: &Image, p: &JitterParams) -> Image {
    let mut x = img.to_f64();
    let c = img.channels();
    for &op in &p.order {
        match op {
            0 => {
                for v in &mut x {
                    *v = (p.brightness * *v).clamp(0.0, 1.0);
                }
            }
            1 => {
                let gray = gray_mean(&x, c);
                for v in &mut x {
                    *v = (gray + p.contrast * (*v - gray)).clamp(0.0, 1.0);
                }
            }
            2 if c == 3 && !p.skipped_color => {
                for px in x.chunks_exact_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb(h, (s * p.saturation).clamp(0.0, 1.0), v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
            3 if c == 3 && !p.skipped_color => {
                for px in x.chunks_exact_mut(3) {
                    let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb((h + p.hue).rem_euclid(1.0), s, v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
            _ => {}
        }
    }
    Image::from_f64(img.height(), img.width(), c, &x).expect("same dimensions")
}

fn gray_mean(x: &[f64], channels: usize) -> f64 {
    let n = x.len() / channels;
    let total: f64 = x
        .chunks_exact(channels)
        .map(|px| {
            if channels == 3 {
                0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
            } else {
                px[0]
            }
        })
        .sum();
    total / n as f64
}

/// RGB in `[0,1]` to `(hue in [0,1), saturation, value)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Normalized discrete Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as i64;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Reflect (mirror without repeating the edge) an index into `0..n`.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable blur of an `h × w × c` buffer with reflect padding.
pub(crate) fn blur_buffer(x: &[f64], h: usize, w: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = reflect(xx as i64 + k as i64 - r, w);
                    acc += wt * x[(y * w + sx) * c + ch];
                }
                tmp[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + k as i64 - r, h);
                    acc += wt * tmp[(sy * w + xx) * c + ch];
                }
                out[(y * w + xx) * c + ch] = acc;
            }
        }
    }
    out
}

pub fn apply_gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let out = blur_buffer(&img.to_f64(), img.height(), img.width(), img.channels(), &k);
    Image::from_f64(img.height(), img.width(), img.channels(), &out).expect("same dimensions")
}

/// Blur with σ drawn uniformly from `sigma_range`.
pub fn gaussian_blur(img: &Image, sigma_range: (f64, f64), stream: RngStream) -> (Image, TransformRecord) {
    let mut rng = stream.rng();
    let sigma = sample_range(&mut rng, sigma_range.0, sigma_range.1);
    let record = TransformRecord {
        op: TransformOp::Blur {
            sigma,
            applied: true,
        },
        stream,
    };
    (apply_gaussian_blur(img, sigma), record)
}

/// `p → 1 − p` for every `p ≥ threshold`.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    let t = threshold as f32;
    let px = img
        .pixels()
        .iter()
        .map(|&p| if p >= t { 1.0 - p } else { p })
        .collect();
    Image::new(img.height(), img.width(), img.channels(), px).expect("same dimensions")
}

/// Exact `(cos, sin)` for multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Counter-clockwise rotation about the image center with bilinear sampling
/// and zero fill; output size is unchanged.
pub fn apply_rotation(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (cos, sin) = cos_sin(degrees);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    sample_map(img, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        (cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
    })
    .unwrap_or_else(|| Image::filled(h, w, c, 0.0))
}

/// Samples the source at `map(x, y)` for every output pixel, zero fill.
fn sample_map(img: &Image, map: impl Fn(usize, usize) -> (f64, f64)) -> Option<Image> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x, y);
            let mut acc = [0.0f64; 3];
            for &(idx, wt) in &bilinear_taps(sx, sy, w, h) {
                if wt == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(&img.pixels()[idx * c..(idx + 1) * c]) {
                    *a += wt * v as f64;
                }
            }
            for (d, a) in out[(y * w + x) * c..(y * w + x + 1) * c].iter_mut().zip(acc) {
                *d = a as f32;
            }
        }
    }
    Image::new(h, w, c, out).ok()
}

/// Rotation by an angle drawn uniformly from the open interval `range`.
pub fn rotate(img: &Image, range: (f64, f64), stream: RngStream) -> (Image, TransformRecord) {
    let mut rng = stream.rng();
    let degrees = if range.1 > range.0 {
        loop {
            let d = rng.gen_range(range.0..range.1);
            if d > range.0 {
                break d;
            }
        }
    } else {
        range.0
    };
    let record = TransformRecord {
        op: TransformOp::Rotate { degrees },
        stream,
    };
    (apply_rotation(img, degrees), record)
}

/// Per-pixel displacement in pixels `(dx, dy)` for an elastic warp.
pub fn elastic_field(h: usize, w: usize, alpha: f64, sigma: f64, stream: &RngStream) -> Vec<(f64, f64)> {
    let mut rng = stream.child(0xE1A5).rng();
    let n = h * w;
    let raw_x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let raw_y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let k = gaussian_kernel(sigma);
    let sx = blur_buffer(&raw_x, h, w, 1, &k);
    let sy = blur_buffer(&raw_y, h, w, 1, &k);
    // Normalized displacement alpha / max(H, W); one normalized unit spans
    // half the image side.
    let scale = alpha / h.max(w) as f64;
    sx.iter()
        .zip(&sy)
        .map(|(&dx, &dy)| (dx * scale * w as f64 / 2.0, dy * scale * h as f64 / 2.0))
        .collect()
}

pub fn apply_elastic_field(img: &Image, field: &[(f64, f64)]) -> Image {
    let w = img.width();
    sample_map(img, |x, y| {
        let (dx, dy) = field[y * w + x];
        (x as f64 + dx, y as f64 + dy)
    })
    .expect("same dimensions")
}

pub fn apply_elastic(img: &Image, alpha: f64, sigma: f64, stream: &RngStream) -> Image {
    if alpha == 0.0 {
        return img.clone();
    }
    let field = elastic_field(img.height(), img.width(), alpha, sigma, stream);
    apply_elastic_field(img, &field)
}

/// Elastic warp with a smoothed random displacement field.
pub fn elastic_transform(img: &Image, alpha: f64, sigma: f64, stream: RngStream) -> Result<(Image, TransformRecord)> {
    if alpha < 0.0 || sigma <= 0.0 {
        return Err(Error::Input(format!("elastic alpha {alpha} / sigma {sigma} out of range")));
    }
    let record = TransformRecord {
        op: TransformOp::Elastic {
            alpha,
            sigma,
            applied: true,
        },
        stream,
    };
    Ok((record.replay(img)?, record))
}

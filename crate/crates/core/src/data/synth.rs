//! Procedural shapes on value-noise backgrounds with exact ground truth.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, SampleMeta};
use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};
use crate::vision::transforms::hsv_to_rgb;
use crate::vision::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Star => "star",
        }
    }

    /// Half-side of the square in units of the shape radius.
    pub const SQUARE_HALF_SIDE: f64 = 0.72;

    /// Membership test in shape-local coordinates scaled to unit radius.
    pub fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeKind::Circle => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs().max(y.abs()) <= Self::SQUARE_HALF_SIDE,
            ShapeKind::Cross => {
                (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95)
            }
            ShapeKind::Ring => {
                let r2 = x * x + y * y;
                (0.3025..=1.0).contains(&r2)
            }
            ShapeKind::Triangle => in_polygon(&*TRIANGLE, x, y),
            ShapeKind::Star => in_polygon(&*STAR, x, y),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("classes", format!("unknown shape {s:?}")))
    }
}

/// Vertices as `(angle in degrees, radius)`; y points down, so -90 is up.
const TRIANGLE_POLAR: [(f64, f64); 3] = [(-90.0, 1.0), (30.0, 1.0), (150.0, 1.0)];
const STAR_POLAR: [(f64, f64); 10] = [
    (-90.0, 1.0),
    (-54.0, 0.45),
    (-18.0, 1.0),
    (18.0, 0.45),
    (54.0, 1.0),
    (90.0, 0.45),
    (126.0, 1.0),
    (162.0, 0.45),
    (198.0, 1.0),
    (234.0, 0.45),
];

fn cartesian<const N: usize>(polar: &[(f64, f64); N]) -> [(f64, f64); N] {
    polar.map(|(deg, r)| {
        let a = deg.to_radians();
        (r * a.cos(), r * a.sin())
    })
}

static TRIANGLE: LazyLock<[(f64, f64); 3]> = LazyLock::new(|| cartesian(&TRIANGLE_POLAR));
static STAR: LazyLock<[(f64, f64); 10]> = LazyLock::new(|| cartesian(&STAR_POLAR));

/// Even-odd point-in-polygon test.
fn in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    /// Independent random hue per sample.
    Random,
    /// One fixed hue per class.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: Vec<ShapeKind>,
    pub per_class: usize,
    pub resolution: usize,
    /// Orientation range in degrees, counter-clockwise.
    pub orientation_range: (f64, f64),
    /// Shape radius as a fraction of the image side.
    pub scale_range: (f64, f64),
    pub palette: Palette,
    pub background_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: ShapeKind::ALL.to_vec(),
            per_class: 2000,
            resolution: 64,
            orientation_range: (-20.0, 20.0),
            scale_range: (0.25, 0.4),
            palette: Palette::Random,
            background_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::config(
                "resolution",
                format!("must be at least 16, got {}", self.resolution),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes", "at least one shape kind is required"));
        }
        if self.per_class == 0 {
            return Err(Error::config("per_class", "must be positive"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::config("scale_range", "must satisfy 0 < lo <= hi <= 0.5"));
        }
        if self.orientation_range.0 > self.orientation_range.1 {
            return Err(Error::config("orientation_range", "lo must not exceed hi"));
        }
        if !(0.0..=0.5).contains(&self.background_amplitude) {
            return Err(Error::config("background_amplitude", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len() * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const NOISE_CELL: f64 = 8.0;
const SUPERSAMPLE: usize = 4;

/// Smooth value noise in `[-1, 1]`.
fn value_noise(h: usize, w: usize, stream: &RngStream) -> Vec<f64> {
    let gh = (h as f64 / NOISE_CELL).ceil() as usize + 2;
    let gw = (w as f64 / NOISE_CELL).ceil() as usize + 2;
    let mut rng = stream.rng();
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / NOISE_CELL;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / NOISE_CELL;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Renders one sample. Returns the image and its ground-truth metadata.
pub fn render_shape(
    kind: ShapeKind,
    class_index: usize,
    spec: &SynthSpec,
    stream: &RngStream,
) -> (Image, SampleMeta) {
    let n = spec.resolution;
    let mut rng = stream.rng();
    let (olo, ohi) = spec.orientation_range;
    let orientation = if olo < ohi { rng.gen_range(olo..ohi) } else { olo };
    let (slo, shi) = spec.scale_range;
    let scale = if slo < shi { rng.gen_range(slo..shi) } else { slo };
    let radius = scale * n as f64;
    // Keep the whole shape inside the frame.
    let margin = radius + 1.0;
    let span = (n as f64 - 1.0 - 2.0 * margin).max(0.0);
    let cx = margin + rng.gen::<f64>() * span;
    let cy = margin + rng.gen::<f64>() * span;
    let hue = match spec.palette {
        Palette::Random => rng.gen::<f64>(),
        Palette::PerClass => class_index as f64 / spec.classes.len() as f64,
    };
    let sat = rng.gen_range(0.4..1.0);
    let val = rng.gen_range(0.65..1.0);
    let (r, g, b) = hsv_to_rgb(hue, sat, val);
    let color = [r, g, b];
    let base = rng.gen_range(0.05..0.35);
    let noise = value_noise(n, n, &stream.child(1));

    let rad = orientation.to_radians();
    let (cos, sin) = (rad.cos(), rad.sin());
    let mut px = Vec::with_capacity(n * n * 3);
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..n {
        for x in 0..n {
            let bg = (base + spec.background_amplitude * noise[y * n + x]).clamp(0.0, 1.0);
            let mut hits = 0usize;
            let (dx0, dy0) = (x as f64 - cx, y as f64 - cy);
            if dx0 * dx0 + dy0 * dy0 <= (radius + 1.5) * (radius + 1.5) {
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = dx0 - 0.5 + (sx as f64 + 0.5) * sub;
                        let dy = dy0 - 0.5 + (sy as f64 + 0.5) * sub;
                        // Same mapping as the image rotation op, so the shape
                        // reads as rotated counter-clockwise by `orientation`.
                        let lx = (dx * cos - dy * sin) / radius;
                        let ly = (dx * sin + dy * cos) / radius;
                        hits += kind.contains(lx, ly) as usize;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in color {
                px.push((cover * c + (1.0 - cover) * bg) as f32);
            }
        }
    }
    let meta = SampleMeta {
        orientation,
        scale,
        center: (cx, cy),
        color,
    };
    (Image::new(n, n, 3, px).expect("valid dimensions"), meta)
}

/// Generates the dataset. Sample `i` has class `i % classes.len()` and is
/// rendered from its own stream, so the output does not depend on the
/// thread count.
pub fn synth_shapes(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.classes.len();
    let rendered: Vec<(Image, SampleMeta)> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let class = i % c;
            let stream = RngStream::keyed(spec.seed, &[purpose::SYNTH, i as u64]);
            render_shape(spec.classes[class], class, spec, &stream)
        })
        .collect();
    let labels = (0..spec.len()).map(|i| i % c).collect();
    let (images, meta): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let mut ds = Dataset::new(images, labels, Some(meta))?;
    ds.num_classes = c;
    ds.class_names = spec.classes.iter().map(|k| k.name().to_string()).collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            per_class: 5,
            resolution: 24,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_shapes(&small(3)).unwrap();
        let b = synth_shapes(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![5; 6]);
        assert_ne!(a, synth_shapes(&small(4)).unwrap());
    }

    #[test]
    fn resolution_below_sixteen_rejected() {
        let spec = SynthSpec {
            resolution: 15,
            ..small(0)
        };
        assert!(matches!(synth_shapes(&spec), Err(Error::Config { key, .. }) if key == "resolution"));
    }

    #[test]
    fn shapes_are_distinct_at_origin() {
        assert!(ShapeKind::Circle.contains(0.0, 0.0));
        assert!(!ShapeKind::Ring.contains(0.0, 0.0));
        assert!(ShapeKind::Ring.contains(0.8, 0.0));
        assert!(ShapeKind::Star.contains(0.0, -0.9));
        assert!(!ShapeKind::Star.contains(0.0, 0.9));
        assert!(ShapeKind::Triangle.contains(0.0, -0.9));
        assert!(!ShapeKind::Cross.contains(0.6, 0.6));
        assert!(ShapeKind::Square.contains(0.6, 0.6));
    }

    #[test]
    fn shape_color_fills_center() {
        let spec = SynthSpec {
            classes: vec![ShapeKind::Circle],
            ..small(1)
        };
        let ds = synth_shapes(&spec).unwrap();
        let m = &ds.meta.as_ref().unwrap()[0];
        let px = ds.images[0].pixel(m.center.1.round() as usize, m.center.0.round() as usize);
        for (p, c) in px.iter().zip(m.color) {
            assert!((*p as f64 - c).abs() < 1e-6);
        }
    }
}

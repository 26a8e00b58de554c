//! Augmentation strategies, multi-crop view generation and the fixed
//! perturbation suites used at evaluation time.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transforms::{
    color_jitter, elastic_transform, gaussian_blur, horizontal_flip, random_resized_crop, rotate,
    solarize, JitterRanges, TransformOp, TransformRecord,
};
use super::Image;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Training-time augmentation strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "BAug")]
    BAug,
    #[serde(rename = "CAug")]
    CAug,
    #[serde(rename = "CAug+")]
    CAugPlus,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::BAug => "BAug",
            Strategy::CAug => "CAug",
            Strategy::CAugPlus => "CAug+",
        }
    }

    pub fn rotates(self) -> bool {
        !matches!(self, Strategy::BAug)
    }

    pub fn warps(self) -> bool {
        matches!(self, Strategy::CAugPlus)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BAug" => Ok(Strategy::BAug),
            "CAug" => Ok(Strategy::CAug),
            "CAug+" => Ok(Strategy::CAugPlus),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy {other:?}; expected BAug, CAug or CAug+"),
            )),
        }
    }
}

/// Knobs of the view generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub local_views: usize,
    /// Local crop side relative to the global side.
    pub local_fraction: f64,
    pub flip_p: f64,
    pub jitter: JitterRanges,
    pub jitter_p: f64,
    pub blur_sigma: (f64, f64),
    /// Blur probability for global view 1, global view 2 and local views.
    pub blur_p: (f64, f64, f64),
    pub solarize_p: f64,
    pub solarize_threshold: f64,
    pub rotation_degrees: (f64, f64),
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub elastic_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            local_views: 4,
            local_fraction: 3.0 / 8.0,
            flip_p: 0.5,
            jitter: JitterRanges::default(),
            jitter_p: 0.8,
            blur_sigma: (0.1, 2.0),
            blur_p: (0.5, 0.1, 0.5),
            solarize_p: 0.2,
            solarize_threshold: 0.5,
            rotation_degrees: (-90.0, 90.0),
            elastic_alpha: 100.0,
            elastic_sigma: 5.0,
            elastic_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn local_size(&self, global: usize) -> usize {
        ((global as f64 * self.local_fraction).round() as usize).max(super::transforms::MIN_SIDE)
    }
}

/// One augmented view and the ops that produced it, in application order.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub records: Vec<TransformRecord>,
}

impl View {
    /// Replays every recorded op on the source image.
    pub fn replay(&self, source: &Image) -> Result<Image> {
        self.records
            .iter()
            .try_fold(source.clone(), |img, r| r.replay(&img))
    }

    pub fn has_op(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.op.name() == name)
    }
}

/// Two global views plus the configured number of local views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub global_views: Vec<View>,
    pub local_views: Vec<View>,
    pub source_index: usize,
}

#[derive(Clone, Copy)]
enum ViewKind {
    Global1,
    Global2,
    Local,
}

mod tag {
    pub const ROTATE: u64 = 1;
    pub const ELASTIC: u64 = 2;
    pub const CROP: u64 = 3;
    pub const FLIP: u64 = 4;
    pub const JITTER: u64 = 5;
    pub const BLUR: u64 = 6;
    pub const SOLARIZE: u64 = 7;
}

fn coin(stream: &RngStream, p: f64) -> bool {
    // Separate stream so the gate never shifts the op's own parameters.
    p > 0.0 && stream.child(0xC01).rng().gen::<f64>() < p
}

fn build_view(
    strategy: Strategy,
    kind: ViewKind,
    img: &Image,
    target: usize,
    cfg: &AugmentConfig,
    stream: RngStream,
) -> Result<View> {
    let mut records = Vec::new();
    let mut cur = img.clone();

    if strategy.rotates() {
        let (out, rec) = rotate(&cur, cfg.rotation_degrees, stream.child(tag::ROTATE));
        cur = out;
        records.push(rec);
    }
    if strategy.warps() {
        let s = stream.child(tag::ELASTIC);
        if coin(&s, cfg.elastic_p) {
            let (out, rec) = elastic_transform(&cur, cfg.elastic_alpha, cfg.elastic_sigma, s)?;
            cur = out;
            records.push(rec);
        } else {
            records.push(TransformRecord {
                op: TransformOp::Elastic {
                    alpha: cfg.elastic_alpha,
                    sigma: cfg.elastic_sigma,
                    applied: false,
                },
                stream: s,
            });
        }
    }

    let scale = match kind {
        ViewKind::Local => cfg.local_scale,
        _ => cfg.global_scale,
    };
    let (out, rec) = random_resized_crop(&cur, scale, target, stream.child(tag::CROP))?;
    cur = out;
    records.push(rec);

    let s = stream.child(tag::FLIP);
    let flip = coin(&s, cfg.flip_p);
    if flip {
        cur = horizontal_flip(&cur);
    }
    records.push(TransformRecord {
        op: TransformOp::Flip { applied: flip },
        stream: s,
    });

    let s = stream.child(tag::JITTER);
    if coin(&s, cfg.jitter_p) {
        let (out, rec) = color_jitter(&cur, &cfg.jitter, s);
        cur = out;
        records.push(rec);
    }

    let blur_p = match kind {
        ViewKind::Global1 => cfg.blur_p.0,
        ViewKind::Global2 => cfg.blur_p.1,
        ViewKind::Local => cfg.blur_p.2,
    };
    let s = stream.child(tag::BLUR);
    if coin(&s, blur_p) {
        let (out, rec) = gaussian_blur(&cur, cfg.blur_sigma, s);
        cur = out;
        records.push(rec);
    }

    if matches!(kind, ViewKind::Global2) {
        let s = stream.child(tag::SOLARIZE);
        let applied = coin(&s, cfg.solarize_p);
        if applied {
            cur = solarize(&cur, cfg.solarize_threshold);
        }
        records.push(TransformRecord {
            op: TransformOp::Solarize {
                threshold: cfg.solarize_threshold,
                applied,
            },
            stream: s,
        });
    }

    Ok(View {
        image: cur,
        records,
    })
}

/// Builds the multi-crop view bundle for one source image.
///
/// Rotation (CAug, CAug+) and the elastic warp (CAug+) are sampled
/// independently for every view and applied to the full image before that
/// view's crop.
pub fn compose_strategy(
    strategy: Strategy,
    img: &Image,
    source_index: usize,
    cfg: &AugmentConfig,
    stream: RngStream,
) -> Result<ViewBundle> {
    let global = img.height().min(img.width());
    let local = cfg.local_size(global);
    let global_views = vec![
        build_view(strategy, ViewKind::Global1, img, global, cfg, stream.child(0))?,
        build_view(strategy, ViewKind::Global2, img, global, cfg, stream.child(1))?,
    ];
    let local_views = (0..cfg.local_views)
        .map(|i| build_view(strategy, ViewKind::Local, img, local, cfg, stream.child(2 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewBundle {
        global_views,
        local_views,
        source_index,
    })
}

/// Evaluation-time perturbation suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    Orig,
    Cj,
    CjFlip,
    CjRo,
    CjRoEt,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Orig, Suite::Cj, Suite::CjFlip, Suite::CjRo, Suite::CjRoEt];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Orig => "Orig",
            Suite::Cj => "CJ",
            Suite::CjFlip => "CJ+Flip",
            Suite::CjRo => "CJ+Ro",
            Suite::CjRoEt => "CJ+Ro+ET",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "suite",
                    format!("unknown suite {s:?}; expected one of Orig, CJ, CJ+Flip, CJ+Ro, CJ+Ro+ET"),
                )
            })
    }
}

/// Applies a perturbation suite. Every op in the suite is always applied.
pub fn perturbation_suite(
    suite: Suite,
    img: &Image,
    cfg: &AugmentConfig,
    stream: RngStream,
) -> Result<(Image, Vec<TransformRecord>)> {
    let mut records = Vec::new();
    let mut cur = img.clone();
    if suite == Suite::Orig {
        return Ok((cur, records));
    }
    let (out, rec) = color_jitter(&cur, &cfg.jitter, stream.child(tag::JITTER));
    cur = out;
    records.push(rec);
    match suite {
        Suite::CjFlip => {
            cur = horizontal_flip(&cur);
            records.push(TransformRecord {
                op: TransformOp::Flip { applied: true },
                stream: stream.child(tag::FLIP),
            });
        }
        Suite::CjRo | Suite::CjRoEt => {
            let (out, rec) = rotate(&cur, cfg.rotation_degrees, stream.child(tag::ROTATE));
            cur = out;
            records.push(rec);
            if suite == Suite::CjRoEt {
                let (out, rec) = elastic_transform(
                    &cur,
                    cfg.elastic_alpha,
                    cfg.elastic_sigma,
                    stream.child(tag::ELASTIC),
                )?;
                cur = out;
                records.push(rec);
            }
        }
        _ => {}
    }
    Ok((cur, records))
}

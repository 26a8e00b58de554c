//! Frozen-encoder probes and the robustness, equivariance and rotation
//! protocols built on them.

mod probe;

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rng::{purpose, RngStream};
use crate::tensor::Tensor;
use crate::train::fmt_f64;
use crate::vision::transforms::{apply_color_jitter, apply_elastic, apply_rotation, JitterParams};
use crate::vision::{perturbation_suite, AugmentConfig, Image, Suite};

pub use probe::{extract_features, train_probe, FeatureSource, LinearProbe, ProbeConfig};

const BIN_KEY: u64 = 100;
const ROTATION_TASK_KEY: u64 = 200;
const INVARIANCE_KEY: u64 = 300;
const TRANSFORM_KEY: u64 = 400;

fn map_images<F>(images: &[Image], f: F) -> Result<Vec<Image>>
where
    F: Fn(usize, &Image) -> Result<Image> + Sync,
{
    images.par_iter().enumerate().map(|(i, img)| f(i, img)).collect()
}

/// A probe fitted on the training split and the held-out split it is
/// scored on.
#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub probe: LinearProbe,
    pub accuracy: f64,
    pub test: Dataset,
}

/// Splits `data`, trains a probe on frozen training features and scores
/// it on the held-out part. `net` is borrowed immutably throughout.
pub fn linear_probe(net: &Network, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("linear probe on an empty dataset".into()));
    }
    let (train, test) = data.split(cfg.seed, cfg.test_fraction);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(format!(
            "split of {} samples left an empty side ({} train, {} test)",
            data.len(),
            train.len(),
            test.len()
        )));
    }
    let features = extract_features(net, &train.images, cfg.source)?;
    let probe = train_probe(&features, &train.labels, data.num_classes, cfg)?;
    let accuracy = probe.accuracy(&extract_features(net, &test.images, cfg.source)?, &test.labels)?;
    Ok(ProbeRun { probe, accuracy, test })
}

/// One report row: a label and the accuracy per suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub label: String,
    pub source: FeatureSource,
    pub cells: Vec<(Suite, f64)>,
}

impl RobustnessRow {
    pub fn get(&self, suite: Suite) -> Option<f64> {
        self.cells.iter().find(|(s, _)| *s == suite).map(|&(_, a)| a)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// `row,<suite names...>` followed by one line per row.
    pub fn to_csv(&self) -> Result<String> {
        let Some(first) = self.rows.first() else {
            return Err(Error::Input("empty robustness report".into()));
        };
        let suites: Vec<Suite> = first.cells.iter().map(|&(s, _)| s).collect();
        let mut out = String::from("row");
        for s in &suites {
            out.push(',');
            out.push_str(s.name());
        }
        out.push('\n');
        for row in &self.rows {
            if row.cells.iter().map(|&(s, _)| s).ne(suites.iter().copied()) {
                return Err(Error::Contract(format!("row {:?} covers different suites", row.label)));
            }
            out.push_str(&row.label);
            for &(_, a) in &row.cells {
                out.push(',');
                out.push_str(&fmt_f64(a));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Trains one probe on clean training features and scores that same probe
/// on each perturbation suite applied to the held-out images.
pub fn robustness_eval(
    net: &Network,
    data: &Dataset,
    suites: &[Suite],
    cfg: &ProbeConfig,
    augment: &AugmentConfig,
    label: &str,
) -> Result<RobustnessRow> {
    if suites.is_empty() {
        return Err(Error::config("suite", "at least one suite is required"));
    }
    let run = linear_probe(net, data, cfg)?;
    let mut cells = Vec::with_capacity(suites.len());
    for &suite in suites {
        let acc = if suite == Suite::Orig {
            run.accuracy
        } else {
            let index = Suite::ALL.iter().position(|&s| s == suite).expect("listed") as u64;
            let perturbed = map_images(&run.test.images, |i, img| {
                let stream = RngStream::keyed(cfg.seed, &[purpose::EVAL, index, i as u64]);
                Ok(perturbation_suite(suite, img, augment, stream)?.0)
            })?;
            run.probe
                .accuracy(&extract_features(net, &perturbed, cfg.source)?, &run.test.labels)?
        };
        cells.push((suite, acc));
    }
    Ok(RobustnessRow {
        label: label.to_string(),
        source: cfg.source,
        cells,
    })
}

/// A family of transformations cut into classes ("bins") for the
/// equivariance diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TransformFamily {
    /// Every bin leaves the image untouched.
    Identity { bins: usize },
    /// Bin `b` rotates by `b · 360 / bins` degrees.
    Rotation { bins: usize },
    /// Bin 0 is clean, bin 1 is elastically warped.
    Elastic,
    /// Brightness factors evenly spaced over `1 ± range`.
    Brightness { bins: usize, range: f64 },
}

impl TransformFamily {
    pub fn rotation() -> Self {
        TransformFamily::Rotation { bins: 8 }
    }

    pub fn brightness() -> Self {
        TransformFamily::Brightness { bins: 4, range: 0.4 }
    }

    pub fn bins(&self) -> usize {
        match *self {
            TransformFamily::Identity { bins }
            | TransformFamily::Rotation { bins }
            | TransformFamily::Brightness { bins, .. } => bins,
            TransformFamily::Elastic => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins() < 2 {
            return Err(Error::config("bins", format!("need at least 2 bins, got {}", self.bins())));
        }
        if let TransformFamily::Brightness { range, .. } = *self {
            if !(0.0..1.0).contains(&range) {
                return Err(Error::config("range", format!("brightness range must lie in [0, 1), got {range}")));
            }
        }
        Ok(())
    }

    /// Applies the transformation of `bin`.
    pub fn apply(&self, img: &Image, bin: usize, augment: &AugmentConfig, stream: &RngStream) -> Image {
        match *self {
            TransformFamily::Identity { .. } => img.clone(),
            TransformFamily::Rotation { bins } => apply_rotation(img, 360.0 * bin as f64 / bins as f64),
            TransformFamily::Elastic if bin == 0 => img.clone(),
            TransformFamily::Elastic => apply_elastic(img, augment.elastic_alpha, augment.elastic_sigma, stream),
            TransformFamily::Brightness { bins, range } => {
                let t = bin as f64 / (bins - 1) as f64;
                let params = JitterParams {
                    brightness: 1.0 - range + 2.0 * range * t,
                    ..JitterParams::identity()
                };
                apply_color_jitter(img, &params)
            }
        }
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformFamily::Identity { bins } => write!(f, "identity/{bins}"),
            TransformFamily::Rotation { bins } => write!(f, "rotation/{bins}"),
            TransformFamily::Elastic => write!(f, "elastic/2"),
            TransformFamily::Brightness { bins, .. } => write!(f, "brightness/{bins}"),
        }
    }
}

/// Invariance residuals `1 - cos(z(x), z(t x))` and bin predictability per
/// branch. The EF fields are `None` when the branch is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceDiagnostics {
    pub family: String,
    pub bins: usize,
    pub residual_ir: f64,
    pub residual_ef: Option<f64>,
    pub predictability_ir: f64,
    pub predictability_ef: Option<f64>,
}

pub const DIAGNOSTICS_HEADER: &str = "family,bins,residual_ir,residual_ef,predictability_ir,predictability_ef";

impl EquivarianceDiagnostics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
        format!(
            "{},{},{},{},{},{}",
            self.family,
            self.bins,
            fmt_f64(self.residual_ir),
            opt(self.residual_ef),
            fmt_f64(self.predictability_ir),
            opt(self.predictability_ef)
        )
    }
}

fn mean_cosine_residual(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.last_dim();
    let rows = a.rows();
    let total: f64 = a
        .data()
        .chunks_exact(d)
        .zip(b.data().chunks_exact(d))
        .map(|(x, y)| {
            if x == y {
                return 0.0;
            }
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx < 1e-12 && ny < 1e-12 {
                return 0.0;
            }
            if nx < 1e-12 || ny < 1e-12 {
                return 1.0;
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            (1.0 - dot / (nx * ny)).clamp(0.0, 2.0)
        })
        .sum();
    total / rows as f64
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(vec![idx.len(), d], data)
}

/// Held-out accuracy of a probe predicting `labels` from `features`.
pub fn predictability(features: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    let (train, test) = split_indices(cfg.seed, labels.len(), cfg.test_fraction);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(format!("{} samples are too few to split", labels.len())));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let probe = train_probe(&rows_of(features, &train)?, &pick(&train), classes, cfg)?;
    probe.accuracy(&rows_of(features, &test)?, &pick(&test))
}

/// Transforms each image by a randomly drawn bin of `family`, then
/// measures how much each branch moves and how well a probe on each
/// branch recovers the bin.
pub fn equivariance_diagnostics(
    net: &Network,
    data: &Dataset,
    family: &TransformFamily,
    cfg: &ProbeConfig,
    augment: &AugmentConfig,
) -> Result<EquivarianceDiagnostics> {
    family.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("equivariance diagnostics on an empty dataset".into()));
    }
    let bins = family.bins();
    let assigned: Vec<usize> = (0..data.len())
        .map(|i| {
            RngStream::keyed(cfg.seed, &[purpose::EVAL, BIN_KEY, i as u64])
                .rng()
                .gen_range(0..bins)
        })
        .collect();
    let moved = map_images(&data.images, |i, img| {
        let stream = RngStream::keyed(cfg.seed, &[purpose::EVAL, TRANSFORM_KEY, i as u64]);
        Ok(family.apply(img, assigned[i], augment, &stream))
    })?;
    let has_ef = net.dims().1 > 0;
    let branch = |source: FeatureSource| -> Result<(f64, f64)> {
        let clean = extract_features(net, &data.images, source)?;
        let shifted = extract_features(net, &moved, source)?;
        Ok((
            mean_cosine_residual(&clean, &shifted),
            predictability(&shifted, &assigned, bins, cfg)?,
        ))
    };
    let (residual_ir, predictability_ir) = branch(FeatureSource::Ir)?;
    let ef = if has_ef { Some(branch(FeatureSource::Ef)?) } else { None };
    Ok(EquivarianceDiagnostics {
        family: family.to_string(),
        bins,
        residual_ir,
        residual_ef: ef.map(|e| e.0),
        predictability_ir,
        predictability_ef: ef.map(|e| e.1),
    })
}

/// Four-way rotation prediction: each image is turned by 90, 180, 270 or
/// 360 degrees (classes 0 to 3) and a probe on frozen features names the
/// angle.
pub fn rotation_sensitivity_task(net: &Network, data: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("rotation task on an empty dataset".into()));
    }
    let classes: Vec<usize> = (0..data.len())
        .map(|i| {
            RngStream::keyed(cfg.seed, &[purpose::EVAL, ROTATION_TASK_KEY, i as u64])
                .rng()
                .gen_range(0..4)
        })
        .collect();
    let rotated = map_images(&data.images, |i, img| Ok(apply_rotation(img, 90.0 * (classes[i] + 1) as f64)))?;
    predictability(&extract_features(net, &rotated, cfg.source)?, &classes, 4, cfg)
}

/// Accuracy of a probe trained on upright images when the held-out images
/// are turned by a uniform angle within `±90` and `±180` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationalInvariance {
    pub orig: f64,
    pub ro90: f64,
    pub ro180: f64,
}

pub const ROTATIONAL_INVARIANCE_HEADER: &str = "row,Orig,Ro(90),Ro(180)";

pub fn rotational_invariance_eval(net: &Network, data: &Dataset, cfg: &ProbeConfig) -> Result<RotationalInvariance> {
    let run = linear_probe(net, data, cfg)?;
    let at = |limit: f64, key: u64| -> Result<f64> {
        let rotated = map_images(&run.test.images, |i, img| {
            let mut rng = RngStream::keyed(cfg.seed, &[purpose::EVAL, INVARIANCE_KEY, key, i as u64]).rng();
            Ok(apply_rotation(img, rng.gen_range(-limit..=limit)))
        })?;
        run.probe
            .accuracy(&extract_features(net, &rotated, cfg.source)?, &run.test.labels)
    };
    Ok(RotationalInvariance {
        orig: run.accuracy,
        ro90: at(90.0, 0)?,
        ro180: at(180.0, 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_net(rho: f64) -> Network {
        Network::new(
            ModelConfig {
                output_dim: 10,
                rho,
                head_hidden: 4,
                head_out: 3,
                resolution: 8,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn tiny_data(n: usize) -> Dataset {
        let images = (0..n)
            .map(|i| {
                let px = (0..8 * 8 * 3).map(|j| ((i * 31 + j * 7) % 97) as f32 / 96.0).collect();
                Image::new(8, 8, 3, px).unwrap()
            })
            .collect();
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), None).unwrap()
    }

    #[test]
    fn fewer_than_two_bins_is_a_config_error() {
        let err = TransformFamily::Rotation { bins: 1 }.validate().unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "bins"));
    }

    #[test]
    fn ef_probe_needs_an_ef_branch() {
        let err = extract_features(&tiny_net(1.0), &tiny_data(2).images, FeatureSource::Ef).unwrap_err();
        assert!(matches!(err, Error::Config { key, .. } if key == "source"));
    }

    #[test]
    fn identity_family_has_zero_residual() {
        let cfg = ProbeConfig {
            epochs: 2,
            ..ProbeConfig::default()
        };
        let d = equivariance_diagnostics(
            &tiny_net(0.8),
            &tiny_data(20),
            &TransformFamily::Identity { bins: 2 },
            &cfg,
            &AugmentConfig::default(),
        )
        .unwrap();
        assert_eq!(d.residual_ir, 0.0);
        assert_eq!(d.residual_ef, Some(0.0));
    }

    #[test]
    fn orig_cell_equals_plain_probe() {
        let net = tiny_net(0.8);
        let data = tiny_data(30);
        let cfg = ProbeConfig {
            epochs: 3,
            ..ProbeConfig::default()
        };
        let row = robustness_eval(&net, &data, &Suite::ALL, &cfg, &AugmentConfig::default(), "m").unwrap();
        assert_eq!(row.get(Suite::Orig), Some(linear_probe(&net, &data, &cfg).unwrap().accuracy));
        let csv = RobustnessReport { rows: vec![row] }.to_csv().unwrap();
        assert!(csv.starts_with("row,Orig,CJ,CJ+Flip,CJ+Ro,CJ+Ro+ET\nm,"));
    }
}

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{joint_feature, Network};
use crate::rng::{purpose, RngStream};
use crate::tensor::{Tape, Tensor};
use crate::vision::{batch_tensor, Image};

const FEATURE_CHUNK: usize = 64;

/// Which part of the representation a probe sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSource {
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "EF")]
    Ef,
    #[serde(rename = "joint")]
    Joint,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 3] = [FeatureSource::Ir, FeatureSource::Ef, FeatureSource::Joint];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Ir => "IR",
            FeatureSource::Ef => "EF",
            FeatureSource::Joint => "joint",
        }
    }

    /// Feature width for a network with the given branch widths.
    pub fn width(self, d_ir: usize, d_ef: usize) -> usize {
        match self {
            FeatureSource::Ir => d_ir,
            FeatureSource::Ef => d_ef,
            FeatureSource::Joint => d_ir + d_ef,
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSource::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("source", format!("unknown feature source {s:?}; expected IR, EF or joint")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub source: FeatureSource,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Held-out share of the labeled data.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            source: FeatureSource::Joint,
            epochs: 50,
            lr: 0.002,
            weight_decay: 0.0,
            momentum: 0.9,
            batch_size: 64,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Frozen features of `images` from the chosen branch, one row per image.
pub fn extract_features(net: &Network, images: &[Image], source: FeatureSource) -> Result<Tensor> {
    let (d_ir, d_ef) = net.dims();
    if source == FeatureSource::Ef && d_ef == 0 {
        return Err(Error::config(
            "source",
            "EF features requested but rho = 1 leaves the equivariant branch empty",
        ));
    }
    let width = source.width(d_ir, d_ef);
    let chunks: Vec<Vec<f64>> = images
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| {
            let refs: Vec<&Image> = chunk.iter().collect();
            let split = net.encode_and_split(&batch_tensor(&refs)?)?;
            let t = match source {
                FeatureSource::Ir => split.z_ir,
                FeatureSource::Ef => split.z_ef,
                FeatureSource::Joint => joint_feature(&split)?,
            };
            Ok(t.to_vec())
        })
        .collect::<Result<_>>()?;
    Tensor::from_vec(vec![images.len(), width], chunks.concat())
}

/// A linear classifier over standardized features. Standardization uses
/// training-set statistics and is fixed once training starts.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.ndim() != 2 || features.last_dim() != d {
            return Err(Error::shape(
                "probe",
                format!("expects (n, {d}) features, got {:?}", features.shape()),
            ));
        }
        let data = features
            .data()
            .chunks_exact(d.max(1))
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) * self.scale[j]))
            .collect();
        Tensor::from_vec(features.shape().to_vec(), data)
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(self.standardize(features)?);
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let xw = tape.matmul(x, w)?;
        let out = tape.bias_add(xw, b)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        let k = self.num_classes();
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        if features.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Input("accuracy over an empty set".into()));
        }
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn column_stats(features: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (features.rows(), features.last_dim());
    let mut mean = vec![0.0; d];
    for row in features.data().chunks_exact(d.max(1)) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in features.data().chunks_exact(d.max(1)) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    // A constant column carries no information; it is zeroed, not amplified.
    let scale = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    (mean, scale)
}

/// Trains a linear probe with momentum SGD on mean cross-entropy.
/// The weights start at zero, so the result is a pure function of the
/// inputs and `cfg.seed`.
pub fn train_probe(features: &Tensor, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let n = features.rows();
    if n == 0 || n != labels.len() {
        return Err(Error::Input(format!("{n} feature rows for {} labels", labels.len())));
    }
    if num_classes < 2 {
        return Err(Error::Input(format!("a probe needs at least 2 classes, got {num_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
    }
    let d = features.last_dim();
    let (mean, scale) = column_stats(features);
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Tensor::zeros(&[d, num_classes]),
        bias: Tensor::zeros(&[num_classes]),
    };
    let x_all = probe.standardize(features)?;
    let mut vel_w = vec![0.0; d * num_classes];
    let mut vel_b = vec![0.0; num_classes];
    let root = RngStream::keyed(cfg.seed, &[purpose::PROBE]);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut root.child(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            let m = batch.len();
            let mut xb = Vec::with_capacity(m * d);
            let mut onehot = vec![0.0; m * num_classes];
            for (r, &i) in batch.iter().enumerate() {
                xb.extend_from_slice(&x_all.data()[i * d..(i + 1) * d]);
                onehot[r * num_classes + labels[i]] = 1.0;
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(vec![m, d], xb)?);
            let t = tape.constant(Tensor::from_vec(vec![m, num_classes], onehot)?);
            let w = tape.leaf(probe.weight.clone(), true);
            let b = tape.leaf(probe.bias.clone(), true);
            let xw = tape.matmul(x, w)?;
            let logits = tape.bias_add(xw, b)?;
            let p = tape.softmax(logits)?;
            let logp = tape.log(p)?;
            let picked = tape.mul(logp, t)?;
            let total = tape.sum(picked)?;
            let loss = tape.scale(total, -1.0 / m as f64)?;
            let grads = tape.backward(loss)?;
            for (param, vel, var) in [(&mut probe.weight, &mut vel_w, w), (&mut probe.bias, &mut vel_b, b)] {
                let g = grads
                    .get(var)
                    .ok_or_else(|| Error::Contract("probe parameter received no gradient".into()))?;
                let values: Vec<f64> = param
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(vel.iter_mut())
                    .map(|((&p, &g), v)| {
                        *v = cfg.momentum * *v + g + cfg.weight_decay * p;
                        p - cfg.lr * *v
                    })
                    .collect();
                *param = Tensor::from_vec(param.shape().to_vec(), values)?;
            }
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_blobs_are_learned() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            data.extend([c as f64 + 0.01 * (i as f64).sin(), 1.0 - c as f64, 0.5]);
            labels.push(c);
        }
        let x = Tensor::from_vec(vec![60, 3], data).unwrap();
        let cfg = ProbeConfig {
            epochs: 30,
            lr: 0.1,
            ..ProbeConfig::default()
        };
        let probe = train_probe(&x, &labels, 3, &cfg).unwrap();
        assert_eq!(probe.accuracy(&x, &labels).unwrap(), 1.0);
        assert_eq!(probe.scale[2], 0.0);
    }

    #[test]
    fn source_names_round_trip() {
        for s in FeatureSource::ALL {
            assert_eq!(s.name().parse::<FeatureSource>().unwrap(), s);
        }
        assert!(matches!("both".parse::<FeatureSource>(), Err(Error::Config { key, .. }) if key == "source"));
    }
}

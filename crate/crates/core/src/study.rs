//! Multi-run experiments: the paired collapse study and one-parameter
//! ablation sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{fmt_f64, train, CollapseRow, TrainConfig, TrainOutput};

/// Regularization weights of the two collapse-study arms.
pub const COLLAPSE_LAMBDAS: [f64; 2] = [0.0, 0.001];

#[derive(Clone, Debug)]
pub struct CollapseArm {
    pub lambda: f64,
    pub output: TrainOutput,
}

impl CollapseArm {
    /// Largest `|log10 |h_EF| - log10 |h_IR||` over the logged epochs.
    pub fn max_gap(&self) -> f64 {
        self.output
            .collapse
            .iter()
            .map(|r| r.head_gap().abs())
            .fold(0.0, f64::max)
    }

    /// `log10 |h_IR| - log10 |h_EF|` at the last logged epoch.
    pub fn final_gap(&self) -> f64 {
        self.output.collapse.last().map_or(0.0, |r| -r.head_gap())
    }
}

/// Trains one arm per `lambda` from the same seed and data.
pub fn collapse_study(base: &TrainConfig, data: &Dataset, lambdas: &[f64]) -> Result<Vec<CollapseArm>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            log::info!("collapse study: lambda = {lambda}");
            Ok(CollapseArm {
                lambda,
                output: train(cfg, data)?,
            })
        })
        .collect()
}

/// One row per epoch; four columns per arm, suffixed with the arm's lambda.
pub fn collapse_study_csv(arms: &[CollapseArm]) -> Result<String> {
    let Some(first) = arms.first() else {
        return Err(Error::Input("collapse study without arms".into()));
    };
    let epochs: Vec<usize> = first.output.collapse.iter().map(|r| r.epoch).collect();
    let mut s = String::from("epoch");
    for arm in arms {
        if arm.output.collapse.iter().map(|r| r.epoch).ne(epochs.iter().copied()) {
            return Err(Error::Contract("collapse-study arms logged different epochs".into()));
        }
        for col in ["h_ir", "h_ef", "z_ir", "z_ef"] {
            let _ = write!(s, ",{col}[lambda={}]", fmt_f64(arm.lambda));
        }
    }
    s.push('\n');
    for (i, epoch) in epochs.iter().enumerate() {
        let _ = write!(s, "{epoch}");
        for arm in arms {
            let r: &CollapseRow = &arm.output.collapse[i];
            for v in [r.log10_h_ir, r.log10_h_ef, r.log10_z_ir, r.log10_z_ef] {
                let _ = write!(s, ",{}", fmt_f64(v));
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// A hyperparameter the ablation harness can sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationParam {
    Rho,
    K,
    Lambda,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Rho => "rho",
            AblationParam::K => "K",
            AblationParam::Lambda => "lambda",
        }
    }

    /// Writes `value` into the matching field and revalidates.
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            AblationParam::Rho => cfg.train.model.rho = value,
            AblationParam::Lambda => cfg.train.loss.lambda = value,
            AblationParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config("K", format!("must be a positive integer, got {value}")));
                }
                cfg.train.model.head_out = value as usize;
            }
        }
        cfg.validate()
    }
}

impl FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(AblationParam::Rho),
            "K" | "k" | "head_out" => Ok(AblationParam::K),
            "lambda" => Ok(AblationParam::Lambda),
            _ => Err(Error::config("param", format!("unknown parameter {s:?}; expected rho, K or lambda"))),
        }
    }
}

/// Parses a comma-separated grid such as `0.5,0.6,0.7`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("grid", format!("{t:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::config("grid", "empty grid"));
    }
    Ok(values)
}

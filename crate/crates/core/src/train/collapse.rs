use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Network;
use crate::tensor::Tensor;

/// Per-epoch orders of magnitude of both heads and both branches.
/// An exact zero is logged as negative infinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    pub epoch: usize,
    pub log10_h_ir: f64,
    pub log10_h_ef: f64,
    pub log10_z_ir: f64,
    pub log10_z_ef: f64,
}

impl CollapseRow {
    /// `log10 mean |h_EF| - log10 mean |h_IR|`.
    pub fn head_gap(&self) -> f64 {
        self.log10_h_ef - self.log10_h_ir
    }
}

fn log10_or_neg_inf(x: f64) -> f64 {
    if x == 0.0 {
        f64::NEG_INFINITY
    } else {
        x.log10()
    }
}

/// Mean absolute value over each head's parameters and over each branch of
/// the representation of `probe` (an NHWC batch). With no equivariant
/// branch both EF columns are negative infinity.
pub fn collapse_monitor(net: &Network, probe: &Tensor, epoch: usize) -> Result<CollapseRow> {
    let split = net.encode_and_split(probe)?;
    let h_ef = net.head_ef().map_or(0.0, |h| net.param_mean_abs(h));
    let z_ef = if split.z_ef.is_empty() {
        0.0
    } else {
        split.z_ef.mean_abs()
    };
    Ok(CollapseRow {
        epoch,
        log10_h_ir: log10_or_neg_inf(net.param_mean_abs(net.head_ir())),
        log10_h_ef: log10_or_neg_inf(h_ef),
        log10_z_ir: log10_or_neg_inf(split.z_ir.mean_abs()),
        log10_z_ef: log10_or_neg_inf(z_ef),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn net() -> Network {
        Network::new(
            ModelConfig {
                output_dim: 10,
                head_hidden: 4,
                head_out: 3,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_is_neg_inf_and_tens_are_one() {
        let mut n = net();
        for i in n.head_ef().unwrap().param_ids() {
            let shape = n.params.get(i).shape().to_vec();
            n.params.set(i, Tensor::zeros(&shape)).unwrap();
        }
        for i in n.head_ir().param_ids() {
            let shape = n.params.get(i).shape().to_vec();
            n.params.set(i, Tensor::full(&shape, 10.0)).unwrap();
        }
        let probe = Tensor::full(&[2, 8, 8, 3], 0.5);
        let row = collapse_monitor(&n, &probe, 3).unwrap();
        assert_eq!(row.log10_h_ef, f64::NEG_INFINITY);
        assert_eq!(row.log10_h_ir, 1.0);
        assert_eq!(row.epoch, 3);
    }
}

//! Training objectives.
//!
//! Teacher inputs are plain tensors, so no gradient can reach them; student
//! inputs are tape nodes.
//!
//! ```
//! use clever::objectives::{LossBreakdown, LossWeights};
//!
//! let w = LossWeights::default();
//! let b = LossBreakdown::new(0.5, 0.2, 3.0, &w);
//! assert!((b.l_total - 0.703).abs() < 1e-12);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, SplitVars};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Tape, Tensor, Var, LOG_FLOOR};

/// Smallest norm accepted by the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// Temperature of both softmaxes in the orthogonal loss.
    pub orth_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.001,
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            orth_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        for (key, v) in [
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
            ("orth_temperature", self.orth_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::config(
                "center_momentum",
                format!("must lie in [0, 1), got {}", self.center_momentum),
            ));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_orth: f64,
    pub l_preg: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Combines components with the same operation order as
    /// [`total_loss`], so both agree bit for bit.
    pub fn new(l_cl: f64, l_orth: f64, l_preg: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            l_cl,
            l_orth,
            l_preg,
            l_total: combine(l_cl, l_orth, l_preg, w),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cl, self.l_orth, self.l_preg, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn combine(cl: f64, orth: f64, preg: f64, w: &LossWeights) -> f64 {
    (w.alpha * cl + w.beta * orth) + w.lambda * preg
}

fn probs(logits: &Tensor, shift: Option<&Tensor>, temperature: f64) -> Result<Tensor> {
    let k = logits.last_dim();
    if k == 0 {
        return Err(Error::shape("softmax", "logits have no columns"));
    }
    let data: Vec<f64> = match shift {
        Some(c) => {
            if c.len() != k {
                return Err(Error::shape(
                    "contrastive_loss",
                    format!("center has {} entries, logits have {k}", c.len()),
                ));
            }
            logits
                .data()
                .chunks_exact(k)
                .flat_map(|row| row.iter().zip(c.data()).map(|(x, c)| (x - c) / temperature))
                .collect()
        }
        None => logits.data().iter().map(|x| x / temperature).collect(),
    };
    Tensor::from_vec(logits.shape().to_vec(), softmax_rows(&data, k))
}

/// Self-distillation cross-entropy over every (teacher view `g`, student
/// view `v`) pair with `v != g`. Student views are indexed so that the
/// first `teacher.len()` entries are the same global views the teacher saw.
pub fn contrastive_loss(
    tape: &mut Tape,
    teacher_logits: &[Tensor],
    student_logits: &[Var],
    center: &Tensor,
    w: &LossWeights,
) -> Result<Var> {
    let pairs: Vec<(usize, usize)> = (0..teacher_logits.len())
        .flat_map(|g| (0..student_logits.len()).filter(move |&v| v != g).map(move |v| (g, v)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Contract(format!(
            "contrastive loss needs a teacher view and a different student view; got {} and {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    let targets = teacher_logits
        .iter()
        .map(|t| probs(t, Some(center), w.tau_t))
        .collect::<Result<Vec<_>>>()?;
    let log_probs = student_logits
        .iter()
        .map(|&s| {
            let scaled = tape.scale(s, 1.0 / w.tau_s)?;
            let p = tape.softmax(scaled)?;
            tape.log(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Option<Var> = None;
    for &(g, v) in &pairs {
        let target = tape.constant(targets[g].clone());
        let rows = targets[g].rows() as f64;
        let prod = tape.mul(target, log_probs[v])?;
        let s = tape.sum(prod)?;
        let ce = tape.scale(s, -1.0 / rows)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    tape.scale(acc.expect("pairs non-empty"), 1.0 / pairs.len() as f64)
}

/// Mean over cross pairs `(i, j)`, `i != j`, of the batch-mean dot product
/// between the student distribution of view `i` and the teacher
/// distribution of view `j`. Returns `None` when there is no equivariant
/// branch.
pub fn orthogonal_loss(
    tape: &mut Tape,
    student_ef_logits: &[Var],
    teacher_ef_logits: &[Tensor],
    temperature: f64,
) -> Result<Option<Var>> {
    if student_ef_logits.is_empty() {
        return Ok(None);
    }
    if student_ef_logits.len() != teacher_ef_logits.len() || student_ef_logits.len() < 2 {
        return Err(Error::Contract(format!(
            "orthogonal loss needs matching global views (at least 2); got {} student and {} teacher",
            student_ef_logits.len(),
            teacher_ef_logits.len()
        )));
    }
    let n = student_ef_logits.len();
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for i in 0..n {
        let scaled = tape.scale(student_ef_logits[i], 1.0 / temperature)?;
        let p = tape.softmax(scaled)?;
        for (j, t) in teacher_ef_logits.iter().enumerate() {
            if i == j {
                continue;
            }
            let q = tape.constant(probs(t, None, temperature)?);
            let rows = t.rows() as f64;
            let prod = tape.mul(p, q)?;
            let s = tape.sum(prod)?;
            let d = tape.scale(s, 1.0 / rows)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d)?,
                None => d,
            });
            count += 1;
        }
    }
    Ok(Some(tape.scale(acc.expect("n >= 2"), 1.0 / count as f64)?))
}

/// `| ||h_EF||^2 - ||h_IR||^2 |` over the bound student parameters.
/// Returns `None` when there is no equivariant head.
pub fn preg_loss(tape: &mut Tape, vars: &[Var], net: &Network) -> Result<Option<Var>> {
    let Some(ef) = net.head_ef() else {
        return Ok(None);
    };
    let n_ef = net.param_sq_norm_var(tape, vars, ef)?;
    let n_ir = net.param_sq_norm_var(tape, vars, net.head_ir())?;
    let d = tape.sub(n_ef, n_ir)?;
    Ok(Some(tape.abs(d)?))
}

/// Weighted sum on the tape. Absent components count as 0.
pub fn total_loss(
    tape: &mut Tape,
    l_cl: Var,
    l_orth: Option<Var>,
    l_preg: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let zero = || Tensor::scalar(0.0);
    let orth = match l_orth {
        Some(v) => v,
        None => tape.constant(zero()),
    };
    let preg = match l_preg {
        Some(v) => v,
        None => tape.constant(zero()),
    };
    let a = tape.scale(l_cl, w.alpha)?;
    let b = tape.scale(orth, w.beta)?;
    let c = tape.scale(preg, w.lambda)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let breakdown = LossBreakdown {
        l_cl: tape.value(l_cl).item()?,
        l_orth: tape.value(orth).item()?,
        l_preg: tape.value(preg).item()?,
        l_total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

fn row_dots(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    tape.sum_last_axis(p)
}

/// Batch mean of the row-wise cosine similarity. Fails if any row norm is
/// below [`COSINE_EPS`].
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na2 = row_dots(tape, a, a)?;
    let nb2 = row_dots(tape, b, b)?;
    for v in [na2, nb2] {
        if let Some(x) = tape.value(v).data().iter().find(|&&x| x.sqrt() < COSINE_EPS) {
            return Err(Error::Numeric(format!(
                "cosine similarity of a near-zero vector (norm {})",
                x.sqrt()
            )));
        }
    }
    let na = tape.sqrt(na2)?;
    let nb = tape.sqrt(nb2)?;
    let dot = row_dots(tape, a, b)?;
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    tape.mean(cos)
}

/// Two-view similarity losses on raw projections: `L_I` is the negative
/// cosine of the invariant projections and `L_V` the batch-mean dot product
/// of the equivariant projections.
pub fn ddcl_losses(
    tape: &mut Tape,
    h_i: (Var, Var),
    h_v: Option<(Var, Var)>,
) -> Result<(Var, Option<Var>)> {
    let cos = cosine_similarity(tape, h_i.0, h_i.1)?;
    let l_i = tape.scale(cos, -1.0)?;
    let l_v = match h_v {
        Some((a, b)) => {
            let rows = tape.value(a).rows() as f64;
            let d = tape.dot(a, b)?;
            Some(tape.scale(d, 1.0 / rows)?)
        }
        None => None,
    };
    Ok((l_i, l_v))
}

/// Logits of both heads for one view.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub ir: Var,
    pub ef: Option<Var>,
}

pub fn project(tape: &mut Tape, vars: &[Var], net: &Network, split: &SplitVars) -> Result<HeadOutputs> {
    let ir = net.head_ir().forward(tape, vars, split.z_ir)?;
    let ef = match (net.head_ef(), split.z_ef) {
        (Some(h), Some(z)) => Some(h.forward(tape, vars, z)?),
        _ => None,
    };
    Ok(HeadOutputs { ir, ef })
}

/// Upper bound of the contrastive loss under the log floor.
pub fn contrastive_upper_bound() -> f64 {
    -LOG_FLOOR.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, data.len() / rows], data.to_vec()).unwrap()
    }

    fn unit_temps() -> LossWeights {
        LossWeights {
            tau_s: 1.0,
            tau_t: 1.0,
            ..LossWeights::default()
        }
    }

    #[test]
    fn one_hot_target_against_uniform_student() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(1, &[0.0, 0.0]), true);
        let teacher = t(1, &[1e4, 0.0]);
        let l = contrastive_loss(&mut tape, &[teacher], &[s, s], &Tensor::zeros(&[2]), &unit_temps()).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn uniform_student_over_k_gives_log_k() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(&[3, 7]), true);
        let mut tl = vec![0.0; 21];
        for r in 0..3 {
            tl[r * 7 + r] = 1e4;
        }
        let l = contrastive_loss(&mut tape, &[t(3, &tl)], &[s, s], &Tensor::zeros(&[7]), &unit_temps()).unwrap();
        assert!((tape.value(l).item().unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matched_one_hots_give_zero() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(1, &[1e4, 0.0, 0.0]), true);
        let l = contrastive_loss(
            &mut tape,
            &[t(1, &[1e4, 0.0, 0.0])],
            &[s, s],
            &Tensor::zeros(&[3]),
            &unit_temps(),
        )
        .unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn single_view_has_no_pair() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(1, &[0.0, 0.0]), true);
        let err = contrastive_loss(&mut tape, &[t(1, &[0.0, 0.0])], &[s], &Tensor::zeros(&[2]), &unit_temps());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn orthogonal_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, &[1e4, 0.0]), true);
        let b = tape.leaf(t(1, &[0.0, 1e4]), true);
        let l = orthogonal_loss(&mut tape, &[a, b], &[t(1, &[1e4, 0.0]), t(1, &[0.0, 1e4])], 1.0)
            .unwrap()
            .unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        let l = orthogonal_loss(&mut tape, &[a, a], &[t(1, &[1e4, 0.0]), t(1, &[1e4, 0.0])], 1.0)
            .unwrap()
            .unwrap();
        assert!((tape.value(l).item().unwrap() - 1.0).abs() < 1e-12);

        let u = tape.leaf(Tensor::zeros(&[1, 4]), true);
        let z = Tensor::zeros(&[1, 4]);
        let l = orthogonal_loss(&mut tape, &[u, u], &[z.clone(), z], 1.0).unwrap().unwrap();
        assert!((tape.value(l).item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_skipped_without_branch() {
        let mut tape = Tape::new();
        assert!(orthogonal_loss(&mut tape, &[], &[], 1.0).unwrap().is_none());
    }

    #[test]
    fn total_matches_breakdown() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let cl = tape.leaf(Tensor::scalar(0.5), true);
        let o = tape.leaf(Tensor::scalar(0.2), true);
        let p = tape.leaf(Tensor::scalar(3.0), true);
        let (v, b) = total_loss(&mut tape, cl, Some(o), Some(p), &w).unwrap();
        assert_eq!(b, LossBreakdown::new(0.5, 0.2, 3.0, &w));
        assert!((tape.value(v).item().unwrap() - 0.703).abs() < 1e-12);
        let g = tape.backward(v).unwrap();
        assert_eq!(g.get(p).unwrap().item().unwrap(), 0.001);
    }

    #[test]
    fn ddcl_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, &[0.6, 0.8]), true);
        let b = tape.leaf(t(1, &[0.8, -0.6]), true);
        let (li, lv) = ddcl_losses(&mut tape, (a, a), Some((a, b))).unwrap();
        assert!((tape.value(li).item().unwrap() + 1.0).abs() < 1e-15);
        assert!(tape.value(lv.unwrap()).item().unwrap().abs() < 1e-15);
        let z = tape.leaf(Tensor::zeros(&[1, 2]), true);
        let (_, lv) = ddcl_losses(&mut tape, (a, b), Some((z, z))).unwrap();
        assert_eq!(tape.value(lv.unwrap()).item().unwrap(), 0.0);
        assert!(matches!(ddcl_losses(&mut tape, (z, a), None), Err(Error::Numeric(_))));
    }

    #[test]
    fn weight_validation_names_key() {
        let w = LossWeights {
            tau_t: 0.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config { key, .. }) if key == "tau_t"));
    }
}

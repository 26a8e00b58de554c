//! Encoders, projection heads, the invariant/equivariant split and the
//! EMA student-teacher pair.
//!
//! ```
//! use clever::model::split_dims;
//!
//! assert_eq!(split_dims(10, 0.8).unwrap(), (8, 2));
//! assert_eq!(split_dims(80, 1.0).unwrap(), (80, 0));
//! assert!(split_dims(4, 0.1).is_err());
//! ```

mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};
use crate::tensor::{Tape, Tensor, Var};

pub use params::{uniform_init, InitScheme, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    ConvTiny,
    MlpTiny,
}

pub const CONV_CHANNELS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Encoder output width `D`.
    pub output_dim: usize,
    /// Fraction of `D` assigned to the invariant branch.
    pub rho: f64,
    pub head_hidden: usize,
    /// Head output width `K`.
    pub head_out: usize,
    pub mlp_hidden: usize,
    /// Input side length; only the MLP encoder depends on it.
    pub resolution: usize,
    pub channels: usize,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::ConvTiny,
            output_dim: 80,
            rho: 0.8,
            head_hidden: 256,
            head_out: 256,
            mlp_hidden: 256,
            resolution: 64,
            channels: 3,
            init: InitScheme::He,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        split_dims(self.output_dim, self.rho)?;
        for (key, v) in [
            ("head_hidden", self.head_hidden),
            ("head_out", self.head_out),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", "must be 1 or 3"));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        split_dims(self.output_dim, self.rho).expect("validated")
    }
}

/// `(d_IR, d_EF)` with `d_IR = floor(rho · D)`.
pub fn split_dims(d: usize, rho: f64) -> Result<(usize, usize)> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config("rho", format!("must lie in (0, 1], got {rho}")));
    }
    // Tolerance so that e.g. 0.29 · 100 lands on 29.
    let d_ir = (rho * d as f64 + 1e-9).floor() as usize;
    if d_ir == 0 {
        return Err(Error::config(
            "rho",
            format!("floor({rho} · {d}) is 0; the invariant branch cannot be empty"),
        ));
    }
    Ok((d_ir, d - d_ir))
}

#[derive(Clone, Debug, PartialEq)]
enum Encoder {
    Conv { kernels: Vec<(usize, usize)>, fc: Linear },
    Mlp { layers: [Linear; 3], input: usize },
}

/// Two hidden ReLU layers then a linear map to `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    layers: [Linear; 3],
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, input: usize, cfg: &ModelConfig, stream: &RngStream) -> Self {
        Head {
            layers: [
                Linear::new(store, &format!("{name}.0"), input, cfg.head_hidden, cfg.init, &stream.child(0)),
                Linear::new(store, &format!("{name}.1"), cfg.head_hidden, cfg.head_hidden, cfg.init, &stream.child(1)),
                Linear::new(store, &format!("{name}.2"), cfg.head_hidden, cfg.head_out, cfg.init, &stream.child(2)),
            ],
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let mut h = self.layers[0].forward(tape, vars, z)?;
        h = tape.relu(h)?;
        h = self.layers[1].forward(tape, vars, h)?;
        h = tape.relu(h)?;
        self.layers[2].forward(tape, vars, h)
    }

    pub fn param_ids(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Encoder output cut into its two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRepresentation {
    pub z_ir: Tensor,
    /// Width 0 when `rho = 1`.
    pub z_ef: Tensor,
}

/// Tape handles of a split forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SplitVars {
    pub z: Var,
    pub z_ir: Var,
    pub z_ef: Option<Var>,
}

/// Encoder plus the two heads, all parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    head_ir: Head,
    head_ef: Option<Head>,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::keyed(seed, &[purpose::INIT]);
        let mut store = ParamStore::new();
        let encoder = match config.encoder {
            EncoderKind::ConvTiny => {
                let mut kernels = Vec::new();
                let mut cin = config.channels;
                for (i, &cout) in CONV_CHANNELS.iter().enumerate() {
                    let s = root.child(10 + i as u64);
                    let w = store.add(format!("encoder.conv{i}.weight"), uniform_init(&[3, 3, cin, cout], 9 * cin, config.init, &s));
                    let b = store.add(format!("encoder.conv{i}.bias"), Tensor::zeros(&[cout]));
                    kernels.push((w, b));
                    cin = cout;
                }
                let fc = Linear::new(&mut store, "encoder.fc", cin, config.output_dim, config.init, &root.child(20));
                Encoder::Conv { kernels, fc }
            }
            EncoderKind::MlpTiny => {
                let input = config.resolution * config.resolution * config.channels;
                let h = config.mlp_hidden;
                Encoder::Mlp {
                    layers: [
                        Linear::new(&mut store, "encoder.fc0", input, h, config.init, &root.child(30)),
                        Linear::new(&mut store, "encoder.fc1", h, h, config.init, &root.child(31)),
                        Linear::new(&mut store, "encoder.fc2", h, config.output_dim, config.init, &root.child(32)),
                    ],
                    input,
                }
            }
        };
        let (d_ir, d_ef) = config.dims();
        let head_ir = Head::new(&mut store, "head_ir", d_ir, &config, &root.child(40));
        let head_ef = (d_ef > 0).then(|| Head::new(&mut store, "head_ef", d_ef, &config, &root.child(50)));
        Ok(Network {
            config,
            params: store,
            encoder,
            head_ir,
            head_ef,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.config.dims()
    }

    pub fn head_ir(&self) -> &Head {
        &self.head_ir
    }

    pub fn head_ef(&self) -> Option<&Head> {
        self.head_ef.as_ref()
    }

    pub fn encoder_param_ids(&self) -> Vec<usize> {
        let head: Vec<usize> = self
            .head_ir
            .param_ids()
            .into_iter()
            .chain(self.head_ef.iter().flat_map(|h| h.param_ids()))
            .collect();
        (0..self.params.len()).filter(|i| !head.contains(i)).collect()
    }

    /// Encoder forward: NHWC batch to `(batch, D)`.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.config.channels {
            return Err(Error::shape(
                "encode",
                format!("expects (batch, h, w, {}), got {shape:?}", self.config.channels),
            ));
        }
        match &self.encoder {
            Encoder::Conv { kernels, fc } => {
                let mut h = x;
                for &(w, b) in kernels {
                    h = tape.conv2d(h, vars[w], 2)?;
                    h = tape.bias_add(h, vars[b])?;
                    h = tape.relu(h)?;
                }
                let pooled = tape.global_avg_pool(h)?;
                fc.forward(tape, vars, pooled)
            }
            Encoder::Mlp { layers, input } => {
                let flat = shape[1] * shape[2] * shape[3];
                if flat != *input {
                    return Err(Error::shape(
                        "encode",
                        format!(
                            "the MLP encoder expects {0}x{0} inputs, got {1}x{2}",
                            self.config.resolution, shape[1], shape[2]
                        ),
                    ));
                }
                let mut h = tape.reshape(x, vec![shape[0], flat])?;
                h = layers[0].forward(tape, vars, h)?;
                h = tape.relu(h)?;
                h = layers[1].forward(tape, vars, h)?;
                h = tape.relu(h)?;
                layers[2].forward(tape, vars, h)
            }
        }
    }

    /// Encoder forward followed by the branch split.
    pub fn encode_split(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<SplitVars> {
        let z = self.encode(tape, vars, x)?;
        let (d_ir, d_ef) = self.dims();
        let z_ir = tape.slice(z, 0, d_ir)?;
        let z_ef = if d_ef > 0 {
            Some(tape.slice(z, d_ir, d_ir + d_ef)?)
        } else {
            None
        };
        Ok(SplitVars { z, z_ir, z_ef })
    }

    /// Frozen forward pass on a batch tensor.
    pub fn encode_and_split(&self, images: &Tensor) -> Result<SplitRepresentation> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let s = self.encode_split(&mut tape, &vars, x)?;
        let z_ir = tape.value(s.z_ir).clone();
        let z_ef = match s.z_ef {
            Some(v) => tape.value(v).clone(),
            None => Tensor::zeros(&[z_ir.rows(), 0]),
        };
        Ok(SplitRepresentation { z_ir, z_ef })
    }

    /// `sum w^2` over every parameter of a head.
    pub fn param_sq_norm(&self, head: &Head) -> f64 {
        head.param_ids().iter().map(|&i| self.params.get(i).sq_norm()).sum()
    }

    /// Mean absolute parameter value of a head.
    pub fn param_mean_abs(&self, head: &Head) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for i in head.param_ids() {
            let t = self.params.get(i);
            s += t.data().iter().map(|v| v.abs()).sum::<f64>();
            n += t.len();
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Tape node holding `sum w^2` of a head's bound parameters.
    pub fn param_sq_norm_var(&self, tape: &mut Tape, vars: &[Var], head: &Head) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for i in head.param_ids() {
            let s = tape.sq_norm(vars[i])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        acc.ok_or_else(|| Error::Contract("head has no parameters".into()))
    }
}

/// `concat(z_IR, z_EF)`, the feature handed to joint probes.
pub fn joint_feature(split: &SplitRepresentation) -> Result<Tensor> {
    let (n, a, b) = (split.z_ir.rows(), split.z_ir.last_dim(), split.z_ef.last_dim());
    if split.z_ef.rows() != n {
        return Err(Error::shape("joint_feature", "branches disagree on batch size"));
    }
    let mut data = Vec::with_capacity(n * (a + b));
    for r in 0..n {
        data.extend_from_slice(&split.z_ir.data()[r * a..(r + 1) * a]);
        data.extend_from_slice(&split.z_ef.data()[r * b..(r + 1) * b]);
    }
    Tensor::from_vec(vec![n, a + b], data)
}

/// Student, its EMA teacher and the teacher-logit center.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTeacher {
    pub student: Network,
    pub teacher: Network,
    pub center: Tensor,
}

impl StudentTeacher {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let student = Network::new(config, seed)?;
        let k = student.config.head_out;
        Ok(StudentTeacher {
            teacher: student.clone(),
            student,
            center: Tensor::zeros(&[k]),
        })
    }

    /// `teacher <- m · teacher + (1 - m) · student`, elementwise, stored at
    /// f32 precision.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::config("ema_momentum", format!("must lie in [0, 1], got {m}")));
        }
        for i in 0..self.teacher.params.len() {
            let t = self.teacher.params.get(i);
            let s = self.student.params.get(i);
            let data = t
                .data()
                .iter()
                .zip(s.data())
                .map(|(&tv, &sv)| m * tv + (1.0 - m) * sv)
                .collect();
            let next = Tensor::from_vec(t.shape().to_vec(), data)?.round_to_f32();
            self.teacher.params.set(i, next)?;
        }
        Ok(())
    }

    /// `center <- m_c · center + (1 - m_c) · mean over rows of logits`.
    pub fn center_update(&mut self, teacher_logits: &[&Tensor], m_c: f64) -> Result<()> {
        let k = self.center.len();
        let mut sum = vec![0.0; k];
        let mut rows = 0usize;
        for t in teacher_logits {
            if t.last_dim() != k {
                return Err(Error::shape("center_update", format!("logits {:?} vs K={k}", t.shape())));
            }
            for row in t.data().chunks_exact(k) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            rows += t.rows();
        }
        if rows == 0 {
            return Ok(());
        }
        let data = self
            .center
            .data()
            .iter()
            .zip(&sum)
            .map(|(&c, &s)| m_c * c + (1.0 - m_c) * s / rows as f64)
            .collect();
        self.center = Tensor::from_vec(vec![k], data)?.round_to_f32();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(encoder: EncoderKind, rho: f64) -> ModelConfig {
        ModelConfig {
            encoder,
            output_dim: 10,
            rho,
            head_hidden: 6,
            head_out: 5,
            mlp_hidden: 7,
            resolution: 8,
            channels: 3,
            init: InitScheme::FanIn,
        }
    }

    fn batch(n: usize, side: usize) -> Tensor {
        let len = n * side * side * 3;
        Tensor::from_vec(vec![n, side, side, 3], (0..len).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap()
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_dims(10, 0.8).unwrap(), (8, 2));
        assert_eq!(split_dims(100, 0.29).unwrap(), (29, 71));
        assert!(matches!(split_dims(3, 0.2), Err(Error::Config { key, .. }) if key == "rho"));
        assert!(split_dims(3, 0.0).is_err());
    }

    #[test]
    fn conv_output_shape_any_resolution() {
        let net = Network::new(small(EncoderKind::ConvTiny, 0.8), 1).unwrap();
        for side in [8, 12, 32] {
            let s = net.encode_and_split(&batch(2, side)).unwrap();
            assert_eq!(s.z_ir.shape(), &[2, 8]);
            assert_eq!(s.z_ef.shape(), &[2, 2]);
        }
    }

    #[test]
    fn mlp_rejects_other_resolutions() {
        let net = Network::new(small(EncoderKind::MlpTiny, 0.8), 1).unwrap();
        assert_eq!(net.encode_and_split(&batch(3, 8)).unwrap().z_ir.shape(), &[3, 8]);
        assert!(matches!(net.encode_and_split(&batch(3, 6)), Err(Error::Shape { .. })));
    }

    #[test]
    fn split_then_join_is_identity() {
        let net = Network::new(small(EncoderKind::ConvTiny, 0.8), 3).unwrap();
        let x = batch(2, 8);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = net.encode(&mut tape, &vars, xv).unwrap();
        let joint = joint_feature(&net.encode_and_split(&x).unwrap()).unwrap();
        assert_eq!(joint.data(), tape.value(z).data());
    }

    #[test]
    fn rho_one_has_no_ef_head() {
        let net = Network::new(small(EncoderKind::ConvTiny, 1.0), 3).unwrap();
        assert!(net.head_ef().is_none());
        let s = net.encode_and_split(&batch(1, 8)).unwrap();
        assert_eq!(s.z_ef.shape(), &[1, 0]);
        assert_eq!(joint_feature(&s).unwrap(), s.z_ir);
    }

    #[test]
    fn heads_share_shape_except_input() {
        let net = Network::new(small(EncoderKind::ConvTiny, 0.8), 3).unwrap();
        let ir = net.head_ir().param_ids();
        let ef = net.head_ef().unwrap().param_ids();
        assert_eq!(net.params.get(ir[0]).shape(), &[8, 6]);
        assert_eq!(net.params.get(ef[0]).shape(), &[2, 6]);
        for (a, b) in ir.iter().zip(&ef).skip(1) {
            assert_eq!(net.params.get(*a).shape(), net.params.get(*b).shape());
        }
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let net = Network::new(small(EncoderKind::ConvTiny, 0.8), 9).unwrap();
        for (name, t) in net.params.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let fan_in: usize = t.shape()[..t.ndim() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt() + 1e-7;
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
            assert_eq!(t.round_to_f32(), *t);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = Network::new(small(EncoderKind::ConvTiny, 0.8), 3).unwrap();
        for i in net.head_ir().param_ids() {
            let shape = net.params.get(i).shape().to_vec();
            net.params.set(i, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::full(&[2, 8], 0.7));
        let out = net.head_ir().forward(&mut tape, &vars, z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(net.param_sq_norm(net.head_ir()), 0.0);
    }

    #[test]
    fn head_width_mismatch_is_shape_error() {
        let net = Network::new(small(EncoderKind::ConvTiny, 0.8), 3).unwrap();
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(net.head_ir().forward(&mut tape, &vars, z), Err(Error::Shape { .. })));
    }

    #[test]
    fn sq_norm_homogeneity() {
        let mut net = Network::new(small(EncoderKind::ConvTiny, 0.8), 4).unwrap();
        let before = net.param_sq_norm(net.head_ef().unwrap());
        for i in net.head_ef().unwrap().param_ids() {
            let doubled = net.params.get(i).map(|v| 2.0 * v);
            net.params.set(i, doubled).unwrap();
        }
        let after = net.param_sq_norm(net.head_ef().unwrap());
        assert!((after - 4.0 * before).abs() < 1e-12 * after);
    }

    #[test]
    fn ema_endpoints() {
        let mut pair = StudentTeacher::new(small(EncoderKind::ConvTiny, 0.8), 5).unwrap();
        let shifted: Vec<Tensor> = pair.student.params.values().iter().map(|t| t.map(|v| v + 0.5).round_to_f32()).collect();
        for (i, t) in shifted.into_iter().enumerate() {
            pair.student.params.set(i, t).unwrap();
        }
        let before = pair.teacher.clone();
        pair.ema_update(1.0).unwrap();
        assert_eq!(pair.teacher, before);
        pair.ema_update(0.0).unwrap();
        assert_eq!(pair.teacher.params, pair.student.params);
    }

    #[test]
    fn ema_mixes_elementwise() {
        let mut pair = StudentTeacher::new(small(EncoderKind::ConvTiny, 0.8), 5).unwrap();
        for i in 0..pair.teacher.params.len() {
            let shape = pair.teacher.params.get(i).shape().to_vec();
            pair.teacher.params.set(i, Tensor::full(&shape, 1.0)).unwrap();
            pair.student.params.set(i, Tensor::zeros(&shape)).unwrap();
        }
        pair.ema_update(0.9).unwrap();
        for t in pair.teacher.params.values() {
            assert!(t.data().iter().all(|&v| v == 0.9f32 as f64));
        }
        assert!(pair.ema_update(1.5).is_err());
    }

    #[test]
    fn center_moves_toward_batch_mean() {
        let mut pair = StudentTeacher::new(small(EncoderKind::ConvTiny, 0.8), 5).unwrap();
        let logits = Tensor::from_vec(vec![2, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        pair.center_update(&[&logits], 0.9).unwrap();
        assert!((pair.center.data()[0] - 0.2).abs() < 1e-7);
    }
}

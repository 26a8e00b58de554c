use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::container::Record;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{}: {:?} does not match {:?}",
                    self.names[i],
                    value.shape(),
                    self.values[i].shape()
                ),
            ));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect()
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.iter()
            .map(|(n, t)| Record::from_tensor(format!("{prefix}{n}"), t))
            .collect()
    }

    /// Loads values for every parameter from `records`, by name.
    pub fn load_records(&mut self, prefix: &str, records: &[Record]) -> Result<()> {
        for i in 0..self.len() {
            let full = format!("{prefix}{}", self.names[i]);
            let rec = records
                .iter()
                .find(|r| r.name == full)
                .ok_or_else(|| Error::Format(format!("missing parameter record {full:?}")))?;
            let t = rec.to_tensor()?;
            self.set(i, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

/// Weight initialization bound for a layer with `fan_in` inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// `1/sqrt(fan_in)`.
    FanIn,
    /// `sqrt(6/fan_in)`, variance preserving under ReLU.
    #[default]
    He,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::FanIn => 1.0 / (fan_in as f64).sqrt(),
            InitScheme::He => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Uniform in `[-bound, bound]`, rounded to f32.
pub fn uniform_init(shape: &[usize], fan_in: usize, scheme: InitScheme, stream: &RngStream) -> Tensor {
    let bound = scheme.bound(fan_in);
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape.to_vec(), data)
        .expect("length matches shape")
        .round_to_f32()
}

/// A dense layer `x W + b` with `W: (in, out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        scheme: InitScheme,
        stream: &RngStream,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[inputs, outputs], inputs.max(1), scheme, stream),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let width = tape.value(x).last_dim();
        if tape.value(x).ndim() != 2 || width != self.inputs {
            return Err(Error::shape(
                "linear",
                format!(
                    "expects (batch, {}), got {:?}",
                    self.inputs,
                    tape.value(x).shape()
                ),
            ));
        }
        let y = tape.matmul(x, vars[self.weight])?;
        tape.bias_add(y, vars[self.bias])
    }

    pub fn params(&self) -> [usize; 2] {
        [self.weight, self.bias]
    }
}

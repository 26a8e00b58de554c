use std::path::Path;

use serde_json::json;

use super::TrainConfig;
use crate::data::container::{Container, Record, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::model::StudentTeacher;
use crate::tensor::Tensor;

/// Everything needed to continue a run: the configuration echo, the step
/// counter, both networks, the center and the optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub pair: StudentTeacher,
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut records = self.pair.student.params.to_records("student.");
        records.extend(self.pair.teacher.params.to_records("teacher."));
        records.extend(
            self.pair
                .student
                .params
                .names()
                .iter()
                .zip(&self.velocity)
                .map(|(n, v)| Record::from_tensor(format!("velocity.{n}"), v)),
        );
        records.push(Record::from_tensor("center", &self.pair.center));
        Container {
            meta: json!({
                "config": self.config,
                "step": self.step,
                "rng": { "seed": self.config.seed, "kind": "counter" },
            }),
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config echo: {e}")))?;
        let step = c.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Format("checkpoint step counter missing".into()))? as usize;
        let mut pair = StudentTeacher::new(config.model.clone(), config.seed)?;
        pair.student.params.load_records("student.", &c.records)?;
        pair.teacher.params.load_records("teacher.", &c.records)?;
        let center = c.require("center")?.to_tensor()?;
        if center.shape() != pair.center.shape() {
            return Err(Error::Format(format!(
                "center has shape {:?}, expected {:?}",
                center.shape(),
                pair.center.shape()
            )));
        }
        pair.center = center;
        let velocity = pair
            .student
            .params
            .iter()
            .map(|(n, p)| {
                let v = c.require(&format!("velocity.{n}"))?.to_tensor()?;
                if v.shape() != p.shape() {
                    return Err(Error::Format(format!("velocity.{n} has the wrong shape")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config,
            step,
            pair,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_container(&Container::read(path, CHECKPOINT_MAGIC)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode(CHECKPOINT_MAGIC)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Checkpoint::from_container(&Container::decode(bytes, CHECKPOINT_MAGIC)?)
    }
}

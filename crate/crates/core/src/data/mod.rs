//! Datasets: IDX and PNM loaders, the synthetic shapes generator, the
//! deterministic train/test split and the on-disk cache.

pub mod container;
pub mod idx;
pub mod ppm;
pub mod synth;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};
use crate::vision::Image;
use container::{Container, Record, DATASET_MAGIC};

pub use idx::load_idx;
pub use ppm::{load_ppm_dir, PpmLoad};
pub use synth::{synth_shapes, Palette, ShapeKind, SynthSpec};

/// Ground-truth rendering parameters of a synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Counter-clockwise rotation in degrees.
    pub orientation: f64,
    /// Shape radius as a fraction of the image side.
    pub scale: f64,
    /// Shape center `(x, y)` in pixels.
    pub center: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub meta: Option<Vec<SampleMeta>>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, meta: Option<Vec<SampleMeta>>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(m) = &meta {
            if m.len() != images.len() {
                return Err(Error::Input(format!(
                    "{} images but {} metadata entries",
                    images.len(),
                    m.len()
                )));
            }
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Dataset {
            images,
            labels,
            num_classes,
            class_names: (0..num_classes).map(|c| c.to_string()).collect(),
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Samples at `indices`, keeping class ids and names.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            meta: self
                .meta
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }

    /// `(train, test)` split; see [`split_indices`].
    pub fn split(&self, seed: u64, test_fraction: f64) -> (Dataset, Dataset) {
        let (train, test) = split_indices(seed, self.len(), test_fraction);
        (self.subset(&train), self.subset(&test))
    }

    pub fn to_container(&self) -> Container {
        let mut records: Vec<Record> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| Record {
                name: format!("image.{i}"),
                shape: vec![img.height(), img.width(), img.channels()],
                data: img.pixels().to_vec(),
            })
            .collect();
        records.push(Record {
            name: "labels".into(),
            shape: vec![self.labels.len()],
            data: self.labels.iter().map(|&l| l as f32).collect(),
        });
        Container {
            meta: json!({
                "num_classes": self.num_classes,
                "class_names": self.class_names,
                "samples": self.meta,
            }),
            records,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let labels: Vec<usize> = c.require("labels")?.data.iter().map(|&l| l as usize).collect();
        let images = (0..labels.len())
            .map(|i| {
                let r = c.require(&format!("image.{i}"))?;
                match r.shape[..] {
                    [h, w, ch] => Image::new(h, w, ch, r.data.clone()),
                    _ => Err(Error::Format(format!("image.{i} is not rank 3"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let bad = |k: &str| Error::Format(format!("dataset meta field {k:?} is malformed"));
        let meta: Option<Vec<SampleMeta>> =
            serde_json::from_value(c.meta["samples"].clone()).map_err(|_| bad("samples"))?;
        let mut ds = Dataset::new(images, labels, meta)?;
        ds.num_classes = c.meta["num_classes"].as_u64().ok_or_else(|| bad("num_classes"))? as usize;
        ds.class_names =
            serde_json::from_value(c.meta["class_names"].clone()).map_err(|_| bad("class_names"))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, DATASET_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_container(&Container::read(path, DATASET_MAGIC)?)
    }
}

/// Assigns index `i` to the test side when a uniform draw keyed by
/// `(seed, i)` falls below `test_fraction`. The assignment of one index
/// never depends on `n` or on any other index.
pub fn split_indices(seed: u64, n: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..n {
        let u: f64 = RngStream::keyed(seed, &[purpose::SPLIT, i as u64]).rng().gen();
        if u < test_fraction {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_under_growth() {
        let (a_train, a_test) = split_indices(9, 100, 0.2);
        let (b_train, b_test) = split_indices(9, 200, 0.2);
        assert_eq!(&b_test[..a_test.len()], &a_test[..]);
        assert_eq!(&b_train[..a_train.len()], &a_train[..]);
        let frac = b_test.len() as f64 / 200.0;
        assert!((0.1..0.3).contains(&frac));
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let img = Image::filled(2, 2, 1, 0.0);
        assert!(Dataset::new(vec![img], vec![0, 1], None).is_err());
    }

    #[test]
    fn cache_round_trip_keeps_metadata() {
        let spec = SynthSpec {
            per_class: 2,
            resolution: 16,
            seed: 11,
            ..SynthSpec::default()
        };
        let ds = synth_shapes(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.clvd");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}

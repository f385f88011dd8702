//! Seeded synthetic datasets with complementary information across
//! modalities: pixel-aligned token grids and point + image scenes.

mod heterogeneous;
mod homogeneous;

pub use heterogeneous::{gen_heterogeneous, HeterogeneousConfig};
pub use homogeneous::{gen_homogeneous, HomogeneousConfig};

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{find, read_manifest, read_tensor, write_manifest, write_tensor, TensorEntry};
use crate::error::{Error, Result};
use crate::fusion::Topology;
use crate::numeric::Tensor;
use crate::projection::CameraModel;

/// Generator settings, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Homogeneous(HomogeneousConfig),
    Heterogeneous(HeterogeneousConfig),
}

impl DataConfig {
    pub fn topology(&self) -> Topology {
        match self {
            DataConfig::Homogeneous(_) => Topology::Homogeneous,
            DataConfig::Heterogeneous(_) => Topology::Heterogeneous,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Homogeneous(c) => c.validate(),
            DataConfig::Heterogeneous(c) => c.validate(),
        }
    }
}

pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    match cfg {
        DataConfig::Homogeneous(c) => gen_homogeneous(c),
        DataConfig::Heterogeneous(c) => gen_heterogeneous(c),
    }
}

/// Camera as stored on disk: row-major 16-element matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub k: Vec<f64>,
    pub rt: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
}

impl CameraRecord {
    pub fn from_camera(cam: &CameraModel) -> Self {
        CameraRecord {
            k: cam.k.iter().flatten().copied().collect(),
            rt: cam.rt.iter().flatten().copied().collect(),
            width: cam.width,
            height: cam.height,
            patch: cam.patch,
        }
    }

    pub fn to_camera(&self) -> Result<CameraModel> {
        let mat = |v: &[f64], name: &str| -> Result<[[f64; 4]; 4]> {
            if v.len() != 16 {
                return Err(Error::Format(format!("camera {name} has {} entries, expected 16", v.len())));
            }
            let mut m = [[0.0; 4]; 4];
            for (i, x) in v.iter().enumerate() {
                m[i / 4][i % 4] = *x;
            }
            Ok(m)
        };
        CameraModel::new(mat(&self.k, "k")?, mat(&self.rt, "rt")?, self.width, self.height, self.patch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: DataConfig,
    pub modalities: Vec<String>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub camera: Option<CameraRecord>,
    pub tensors: Vec<TensorEntry>,
}

/// One split. Every tensor has the sample index as its leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub samples: usize,
    /// `[S, N_m, C_m]` per modality.
    pub inputs: Vec<Tensor<f32>>,
    /// `[S, N_m, 1]` per modality.
    pub targets: Vec<Tensor<f32>>,
    /// Homogeneous with classes: `[S, N]` class index per token.
    pub classes: Option<Tensor<f32>>,
    /// Homogeneous: `[S, N]` per modality, 1 where the modality sees nothing.
    pub hidden: Vec<Tensor<f32>>,
    /// Generator latent, kept for inspection.
    pub latent: Tensor<f32>,
    /// Heterogeneous: `[S, N_point, 3]` world coordinates.
    pub points: Option<Tensor<f32>>,
    /// Heterogeneous: `[S, N_point]` true patch index, −1 when none.
    pub gt_patch: Option<Tensor<f32>>,
}

impl Split {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (m, t) in self.inputs.iter().enumerate() {
            out.push((format!("{prefix}.x{m}"), t));
        }
        for (m, t) in self.targets.iter().enumerate() {
            out.push((format!("{prefix}.y{m}"), t));
        }
        for (m, t) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}.hidden{m}"), t));
        }
        out.push((format!("{prefix}.latent"), &self.latent));
        if let Some(t) = &self.classes {
            out.push((format!("{prefix}.classes"), t));
        }
        if let Some(t) = &self.points {
            out.push((format!("{prefix}.points"), t));
        }
        if let Some(t) = &self.gt_patch {
            out.push((format!("{prefix}.gt_patch"), t));
        }
        out
    }

    fn load(dir: &Path, entries: &[TensorEntry], prefix: &str, modalities: usize, samples: usize) -> Result<Split> {
        let get = |name: String| -> Result<Tensor<f32>> {
            let t = read_tensor::<f32>(dir, find(entries, &name)?)?;
            if t.shape()[0] != samples {
                return Err(Error::Format(format!("{name} holds {} samples, manifest says {samples}", t.shape()[0])));
            }
            Ok(t)
        };
        let opt = |name: String| -> Result<Option<Tensor<f32>>> {
            if entries.iter().any(|e| e.name == name) {
                get(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut hidden = Vec::new();
        for m in 0..modalities {
            if let Some(t) = opt(format!("{prefix}.hidden{m}"))? {
                hidden.push(t);
            }
        }
        Ok(Split {
            samples,
            inputs: (0..modalities).map(|m| get(format!("{prefix}.x{m}"))).collect::<Result<_>>()?,
            targets: (0..modalities).map(|m| get(format!("{prefix}.y{m}"))).collect::<Result<_>>()?,
            classes: opt(format!("{prefix}.classes"))?,
            hidden,
            latent: get(format!("{prefix}.latent"))?,
            points: opt(format!("{prefix}.points"))?,
            gt_patch: opt(format!("{prefix}.gt_patch"))?,
        })
    }

    /// Tokens per sample of modality `m`.
    pub fn tokens(&self, m: usize) -> usize {
        self.inputs[m].shape()[1]
    }

    pub fn channels(&self, m: usize) -> usize {
        self.inputs[m].shape()[2]
    }
}

pub const DATASET_FORMAT: &str = "tokenfusion-dataset-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub modalities: Vec<String>,
    pub camera: Option<CameraModel>,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(Error::Config(format!("unknown split {other:?}, expected train or val"))),
        }
    }

    /// Writes the manifest and one raw buffer per tensor, in a fixed order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        for (prefix, split) in [("train", &self.train), ("val", &self.val)] {
            for (name, t) in split.named(prefix) {
                tensors.push(write_tensor(dir, &name, t)?);
            }
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            config: self.config.clone(),
            modalities: self.modalities.clone(),
            train_samples: self.train.samples,
            val_samples: self.val.samples,
            camera: self.camera.as_ref().map(CameraRecord::from_camera),
            tensors,
        };
        write_manifest(dir, &manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_manifest(dir)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format(format!("{} is not a dataset (format {:?})", dir.display(), manifest.format)));
        }
        manifest.config.validate()?;
        let m = manifest.modalities.len();
        let camera = manifest.camera.as_ref().map(CameraRecord::to_camera).transpose()?;
        if (manifest.config.topology() == Topology::Heterogeneous) != camera.is_some() {
            return Err(Error::Format("camera must be present exactly for heterogeneous datasets".into()));
        }
        Ok(Dataset {
            train: Split::load(dir, &manifest.tensors, "train", m, manifest.train_samples)?,
            val: Split::load(dir, &manifest.tensors, "val", m, manifest.val_samples)?,
            config: manifest.config,
            modalities: manifest.modalities,
            camera,
        })
    }
}

/// Generator for one sample: the dataset seed with a per-(split, sample) stream.
pub(crate) fn sample_rng(seed: u64, split: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 40) | sample as u64);
    rng
}

/// Generator for dataset-level constants (mixing matrices, camera).
pub(crate) fn global_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

pub(crate) fn check_counts(train: usize, val: usize) -> Result<()> {
    if train == 0 || val == 0 {
        return Err(Error::Config("train and val splits need at least one sample each".into()));
    }
    if train >= 1 << 40 || val >= 1 << 40 {
        return Err(Error::Config("split too large".into()));
    }
    Ok(())
}

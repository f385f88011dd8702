use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::FusedBatch;
use crate::numeric::Tensor;
use crate::objective::{Target, TaskKind};
use crate::projection::{point_correspondences, CameraModel};
use crate::synth::Split;

/// Step → sample indices. Every epoch is a fresh seeded permutation, so the
/// sampler has no state beyond the step counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSampler {
    pub seed: u64,
    pub samples: usize,
    pub batch: usize,
}

impl BatchSampler {
    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut p: Vec<usize> = (0..self.samples).collect();
        p.shuffle(&mut rng);
        p
    }

    /// Indices for 0-based `step`.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let s = self.samples as u64;
        let start = step * self.batch as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..self.batch as u64)
            .map(|i| {
                let k = start + i;
                let epoch = k / s;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, self.permutation(epoch)));
                }
                cached.as_ref().unwrap().1[(k % s) as usize]
            })
            .collect()
    }
}

/// A split plus what the model needs per sample.
pub struct DataView<'a> {
    pub split: &'a Split,
    /// Dataset modality per model stack.
    pub modalities: Vec<usize>,
    pub task: TaskKind,
    /// Heterogeneous: projected patch per point, `[S · N_point]`.
    pub correspondence: Option<Vec<Option<usize>>>,
}

/// Model inputs and targets for one set of samples.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub samples: Vec<usize>,
    pub fused: FusedBatch<f64>,
    pub targets: Vec<Target<f64>>,
}

impl<'a> DataView<'a> {
    pub fn new(split: &'a Split, modalities: Vec<usize>, task: TaskKind, camera: Option<&CameraModel>) -> Result<Self> {
        let correspondence = match (camera, &split.points) {
            (Some(cam), Some(points)) => {
                let pts: Vec<[f64; 3]> =
                    points.data().chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
                Some(point_correspondences(&pts, cam))
            }
            (None, None) => None,
            _ => return Err(Error::Format("points and camera must come together".into())),
        };
        if task == TaskKind::CrossEntropy && split.classes.is_none() {
            return Err(Error::Config("cross-entropy training needs a dataset generated with classes".into()));
        }
        Ok(DataView { split, modalities, task, correspondence })
    }

    pub fn samples(&self) -> usize {
        self.split.samples
    }

    fn rows(t: &Tensor<f32>, samples: &[usize]) -> Vec<f64> {
        let per: usize = t.shape()[1..].iter().product();
        samples.iter().flat_map(|&s| t.data()[s * per..(s + 1) * per].iter().map(|&v| v as f64)).collect()
    }

    pub fn batch(&self, samples: &[usize]) -> Result<PreparedBatch> {
        if samples.is_empty() || samples.iter().any(|&s| s >= self.split.samples) {
            return Err(Error::Contract(format!("sample indices {samples:?} outside {} samples", self.split.samples)));
        }
        let b = samples.len();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for &m in &self.modalities {
            let (n, c) = (self.split.tokens(m), self.split.channels(m));
            inputs.push(Tensor::new(&[b * n, c], Self::rows(&self.split.inputs[m], samples))?);
            targets.push(match self.task {
                TaskKind::Mse => Target::Values(Tensor::new(&[b * n, 1], Self::rows(&self.split.targets[m], samples))?),
                TaskKind::CrossEntropy => {
                    let classes = self.split.classes.as_ref().expect("checked in new");
                    Target::Classes(Self::rows(classes, samples).iter().map(|&v| v as usize).collect())
                }
            });
        }
        let correspondence = self.correspondence.as_ref().map(|corr| {
            let n = self.split.tokens(0);
            samples.iter().flat_map(|&s| corr[s * n..(s + 1) * n].iter().copied()).collect()
        });
        Ok(PreparedBatch { samples: samples.to_vec(), fused: FusedBatch { inputs, batch: b, correspondence }, targets })
    }

    /// Per model stack, `hidden[row]` for the rows of `samples`.
    pub fn hidden_rows(&self, samples: &[usize]) -> Option<Vec<Vec<bool>>> {
        if self.split.hidden.is_empty() {
            return None;
        }
        Some(
            self.modalities
                .iter()
                .map(|&m| Self::rows(&self.split.hidden[m], samples).iter().map(|&v| v == 1.0).collect())
                .collect(),
        )
    }
}

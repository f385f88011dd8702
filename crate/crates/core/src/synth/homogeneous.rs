use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_counts, global_rng, sample_rng, DataConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Pixel-aligned token grids observing a shared latent field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomogeneousConfig {
    pub modalities: usize,
    /// Tokens per side; `N = grid²`.
    pub grid: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub noise: f64,
    /// Spatial correlation length of the latent field in tokens; 0 gives i.i.d. tokens.
    pub smoothing: f64,
    /// Number of target classes; 0 stores regression targets only.
    pub classes: usize,
    pub seed: u64,
}

impl Default for HomogeneousConfig {
    fn default() -> Self {
        HomogeneousConfig {
            modalities: 2,
            grid: 4,
            channels: 4,
            latent_dim: 4,
            train_samples: 512,
            val_samples: 128,
            noise: 0.05,
            smoothing: 0.75,
            classes: 0,
            seed: 0,
        }
    }
}

impl HomogeneousConfig {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.modalities) {
            return Err(Error::Config(format!("modalities must lie in [2, 4], got {}", self.modalities)));
        }
        if self.grid < 2 || self.channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("grid must be at least 2 and channels, latent_dim positive".into()));
        }
        if self.tokens() < self.modalities {
            return Err(Error::Config("fewer tokens than modalities".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("noise and smoothing must be finite and non-negative".into()));
        }
        if self.classes == 1 {
            return Err(Error::Config("classes must be 0 or at least 2".into()));
        }
        check_counts(self.train_samples, self.val_samples)
    }
}

struct Constants {
    mixing: Vec<Vec<f64>>,
    readout: Vec<f64>,
    kernel: Vec<Vec<f64>>,
}

impl Constants {
    fn new(cfg: &HomogeneousConfig) -> Self {
        let mut rng = global_rng(cfg.seed);
        let (c, d) = (cfg.channels, cfg.latent_dim);
        let mixing = (0..cfg.modalities)
            .map(|_| (0..c * d).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x / (d as f64).sqrt()).collect())
            .collect();
        let mut readout: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = readout.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        readout.iter_mut().for_each(|x| *x *= 1.5 / norm);

        let n = cfg.tokens();
        let g = cfg.grid;
        let kernel = (0..n)
            .map(|a| {
                let mut row: Vec<f64> = (0..n)
                    .map(|b| {
                        if cfg.smoothing == 0.0 {
                            return if a == b { 1.0 } else { 0.0 };
                        }
                        let (dy, dx) = ((a / g) as f64 - (b / g) as f64, (a % g) as f64 - (b % g) as f64);
                        (-(dx * dx + dy * dy) / (2.0 * cfg.smoothing * cfg.smoothing)).exp()
                    })
                    .collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
                row
            })
            .collect();
        Constants { mixing, readout, kernel }
    }
}

struct Sample {
    x: Vec<Vec<f32>>,
    y: Vec<f32>,
    class: Vec<f32>,
    hidden: Vec<Vec<f32>>,
    latent: Vec<f32>,
}

/// Tokens sorted along a random direction and cut into `m` contiguous chunks.
fn visible_chunks(rng: &mut impl Rng, grid: usize, m: usize) -> Vec<usize> {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (angle.cos(), angle.sin());
    let mid = (grid as f64 - 1.0) / 2.0;
    let n = grid * grid;
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|t| (((t % grid) as f64 - mid) * c + ((t / grid) as f64 - mid) * s, t))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut owner = vec![0; n];
    for (rank, &(_, t)) in order.iter().enumerate() {
        owner[t] = rank * m / n;
    }
    owner
}

fn sample(cfg: &HomogeneousConfig, k: &Constants, split: u64, index: usize) -> Sample {
    let mut rng = sample_rng(cfg.seed, split, index);
    let (n, c, d) = (cfg.tokens(), cfg.channels, cfg.latent_dim);
    let white: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<f64> = (0..n * d)
        .map(|i| {
            let (t, j) = (i / d, i % d);
            (0..n).map(|b| k.kernel[t][b] * white[b * d + j]).sum()
        })
        .collect();
    let owner = visible_chunks(&mut rng, cfg.grid, cfg.modalities);
    let mut x = vec![vec![0.0f32; n * c]; cfg.modalities];
    let mut hidden = vec![vec![0.0f32; n]; cfg.modalities];
    for m in 0..cfg.modalities {
        for t in 0..n {
            if owner[t] != m {
                hidden[m][t] = 1.0;
                continue;
            }
            for ch in 0..c {
                let clean: f64 = (0..d).map(|j| k.mixing[m][ch * d + j] * z[t * d + j]).sum();
                let eps: f64 = StandardNormal.sample(&mut rng);
                x[m][t * c + ch] = (clean + cfg.noise * eps) as f32;
            }
        }
    }
    let y: Vec<f64> = (0..n).map(|t| (0..d).map(|j| k.readout[j] * z[t * d + j]).sum::<f64>().tanh()).collect();
    let class = y
        .iter()
        .map(|&v| {
            if cfg.classes == 0 {
                0.0
            } else {
                (((v + 1.0) / 2.0 * cfg.classes as f64).floor() as usize).min(cfg.classes - 1) as f32
            }
        })
        .collect();
    Sample {
        x,
        y: y.iter().map(|&v| v as f32).collect(),
        class,
        hidden,
        latent: z.iter().map(|&v| v as f32).collect(),
    }
}

fn build_split(cfg: &HomogeneousConfig, k: &Constants, split: u64, count: usize) -> Result<Split> {
    let samples: Vec<Sample> = (0..count).into_par_iter().map(|i| sample(cfg, k, split, i)).collect();
    let (n, c) = (cfg.tokens(), cfg.channels);
    let cat = |f: &dyn Fn(&Sample) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
    let mut inputs = Vec::new();
    let mut hidden = Vec::new();
    let mut targets = Vec::new();
    for m in 0..cfg.modalities {
        inputs.push(Tensor::new(&[count, n, c], cat(&|s| &s.x[m]))?);
        hidden.push(Tensor::new(&[count, n], cat(&|s| &s.hidden[m]))?);
        targets.push(Tensor::new(&[count, n, 1], cat(&|s| &s.y))?);
    }
    Ok(Split {
        samples: count,
        inputs,
        targets,
        classes: (cfg.classes > 0).then(|| Tensor::new(&[count, n], cat(&|s| &s.class))).transpose()?,
        hidden,
        latent: Tensor::new(&[count, n, cfg.latent_dim], cat(&|s| &s.latent))?,
        points: None,
        gt_patch: None,
    })
}

/// Modality `m` sees `A_m z + σε` on its chunk of the grid and zeros elsewhere;
/// the target `tanh(u·z)` needs every chunk.
pub fn gen_homogeneous(cfg: &HomogeneousConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = Constants::new(cfg);
    Ok(Dataset {
        config: DataConfig::Homogeneous(cfg.clone()),
        modalities: (0..cfg.modalities).map(|m| format!("view{m}")).collect(),
        camera: None,
        train: build_split(cfg, &k, 0, cfg.train_samples)?,
        val: build_split(cfg, &k, 1, cfg.val_samples)?,
    })
}

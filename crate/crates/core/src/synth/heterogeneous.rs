use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_counts, global_rng, sample_rng, DataConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::projection::CameraModel;

const FIELD_TERMS: usize = 4;

/// Point + image scenes under one exactly known camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeterogeneousConfig {
    pub points: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub patch: usize,
    pub point_channels: usize,
    pub image_channels: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub noise: f64,
    /// Share of points whose own features are zero.
    pub featureless_fraction: f64,
    /// Share of points that project inside the image.
    pub in_image_fraction: f64,
    pub seed: u64,
}

impl Default for HeterogeneousConfig {
    fn default() -> Self {
        HeterogeneousConfig {
            points: 16,
            image_width: 64,
            image_height: 64,
            patch: 16,
            point_channels: 4,
            image_channels: 4,
            train_samples: 512,
            val_samples: 128,
            noise: 0.05,
            featureless_fraction: 0.5,
            in_image_fraction: 0.9,
            seed: 0,
        }
    }
}

impl HeterogeneousConfig {
    pub fn patches(&self) -> usize {
        (self.image_width / self.patch.max(1)) * (self.image_height / self.patch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.point_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("points and channel counts must be positive".into()));
        }
        CameraModel::new(crate::projection::IDENTITY4, crate::projection::IDENTITY4, self.image_width, self.image_height, self.patch)?;
        if !(0.8..=1.0).contains(&self.in_image_fraction) {
            return Err(Error::Config(format!("in_image_fraction {} must lie in [0.8, 1]", self.in_image_fraction)));
        }
        if !(0.0..=1.0).contains(&self.featureless_fraction) {
            return Err(Error::Config("featureless_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        check_counts(self.train_samples, self.val_samples)
    }
}

/// Pinhole camera with focal length `W`, centred principal point and a small
/// rotation about the vertical axis plus translation.
fn make_camera(cfg: &HeterogeneousConfig, rng: &mut impl Rng) -> Result<CameraModel> {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let f = w;
    let k = [[f, 0.0, w / 2.0, 0.0], [0.0, f, h / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let a: f64 = rng.random_range(-0.1..0.1);
    let t: [f64; 3] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.5)];
    let (c, s) = (a.cos(), a.sin());
    let rt = [[c, 0.0, s, t[0]], [0.0, 1.0, 0.0, t[1]], [-s, 0.0, c, t[2]], [0.0, 0.0, 0.0, 1.0]];
    CameraModel::new(k, rt, cfg.image_width, cfg.image_height, cfg.patch)
}

/// World point whose camera-frame coordinates are `d · K⁻¹ [u, v, 1]`.
fn back_project(cam: &CameraModel, u: f64, v: f64, depth: f64) -> [f64; 3] {
    let (f, cx, cy) = (cam.k[0][0], cam.k[0][2], cam.k[1][2]);
    let cam_pt = [depth * (u - cx) / f, depth * (v - cy) / cam.k[1][1], depth];
    let r = &cam.rt;
    let d = [cam_pt[0] - r[0][3], cam_pt[1] - r[1][3], cam_pt[2] - r[2][3]];
    // Rᵀ d
    [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * d[i]).sum())
}

struct Constants {
    camera: CameraModel,
    point_gain: Vec<f64>,
    image_gain: Vec<f64>,
    image_bias: Vec<f64>,
}

struct Scene {
    x_pt: Vec<f32>,
    x_img: Vec<f32>,
    y_pt: Vec<f32>,
    y_img: Vec<f32>,
    points: Vec<f32>,
    gt: Vec<f32>,
    latent: Vec<f32>,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    InImage,
    OutOfImage,
    Behind,
}

fn scene(cfg: &HeterogeneousConfig, k: &Constants, split: u64, index: usize) -> Scene {
    let mut rng = sample_rng(cfg.seed, split, index);
    let cam = &k.camera;
    let (w, h, p) = (cfg.image_width as f64, cfg.image_height as f64, cfg.patch);
    let terms: Vec<[f64; 4]> = (0..FIELD_TERMS)
        .map(|_| {
            let amp: f64 = StandardNormal.sample(&mut rng);
            [amp * 0.5, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(0.0..std::f64::consts::TAU)]
        })
        .collect();
    let field = |u: f64, v: f64| -> f64 {
        terms.iter().map(|t| t[0] * (std::f64::consts::TAU * (t[1] * u / w + t[2] * v / h) + t[3]).sin()).sum()
    };

    let cols = cfg.image_width / p;
    let patches = cfg.patches();
    let patch_field: Vec<f64> = (0..patches)
        .map(|j| field(((j % cols) * p) as f64 + p as f64 / 2.0, ((j / cols) * p) as f64 + p as f64 / 2.0))
        .collect();
    let mut x_img = Vec::with_capacity(patches * cfg.image_channels);
    for &fv in &patch_field {
        for c in 0..cfg.image_channels {
            let eps: f64 = StandardNormal.sample(&mut rng);
            x_img.push((k.image_gain[c] * fv + k.image_bias[c] + cfg.noise * eps) as f32);
        }
    }

    let n = cfg.points;
    let inside = ((cfg.in_image_fraction * n as f64).ceil() as usize).min(n);
    let rest = n - inside;
    let mut kinds: Vec<Kind> = (0..n)
        .map(|i| match i {
            i if i < inside => Kind::InImage,
            i if i < inside + rest.div_ceil(2) => Kind::OutOfImage,
            _ => Kind::Behind,
        })
        .collect();
    kinds.shuffle(&mut rng);

    let mut scene = Scene {
        x_pt: Vec::with_capacity(n * cfg.point_channels),
        x_img,
        y_pt: Vec::with_capacity(n),
        y_img: patch_field.iter().map(|&v| v as f32).collect(),
        points: Vec::with_capacity(n * 3),
        gt: Vec::with_capacity(n),
        latent: Vec::with_capacity(n * 2),
    };
    for kind in kinds {
        let depth = rng.random_range(2.0..6.0);
        let (pt, gt) = match kind {
            Kind::InImage => {
                let (px, py) = (rng.random_range(0..cfg.image_width), rng.random_range(0..cfg.image_height));
                let pt = back_project(cam, px as f64 + 0.5, py as f64 + 0.5, depth);
                (pt, Some((py / p) * cols + px / p))
            }
            Kind::OutOfImage => {
                let u = w + 1.5 + rng.random_range(0.0..w / 2.0).floor();
                let v: f64 = rng.random_range(0..cfg.image_height) as f64 + 0.5;
                (back_project(cam, u, v, depth), None)
            }
            Kind::Behind => {
                let (u, v) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
                (back_project(cam, u, v, -depth), None)
            }
        };
        let featureless = rng.random_bool(cfg.featureless_fraction);
        let q: f64 = if featureless { 0.0 } else { StandardNormal.sample(&mut rng) };
        for c in 0..cfg.point_channels {
            let v = if featureless {
                0.0
            } else {
                let eps: f64 = StandardNormal.sample(&mut rng);
                k.point_gain[c] * q + cfg.noise * eps
            };
            scene.x_pt.push(v as f32);
        }
        let fv = gt.map_or(0.0, |j| patch_field[j]);
        scene.y_pt.push((q + fv) as f32);
        scene.points.extend(pt.map(|v| v as f32));
        scene.gt.push(gt.map_or(-1.0, |j| j as f32));
        scene.latent.extend([q as f32, fv as f32]);
    }
    scene
}

fn build_split(cfg: &HeterogeneousConfig, k: &Constants, split: u64, count: usize) -> Result<Split> {
    let scenes: Vec<Scene> = (0..count).into_par_iter().map(|i| scene(cfg, k, split, i)).collect();
    let cat = |f: &dyn Fn(&Scene) -> &[f32]| scenes.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
    let (n, j) = (cfg.points, cfg.patches());
    Ok(Split {
        samples: count,
        inputs: vec![
            Tensor::new(&[count, n, cfg.point_channels], cat(&|s| &s.x_pt))?,
            Tensor::new(&[count, j, cfg.image_channels], cat(&|s| &s.x_img))?,
        ],
        targets: vec![Tensor::new(&[count, n, 1], cat(&|s| &s.y_pt))?, Tensor::new(&[count, j, 1], cat(&|s| &s.y_img))?],
        classes: None,
        hidden: Vec::new(),
        latent: Tensor::new(&[count, n, 2], cat(&|s| &s.latent))?,
        points: Some(Tensor::new(&[count, n, 3], cat(&|s| &s.points))?),
        gt_patch: Some(Tensor::new(&[count, n], cat(&|s| &s.gt))?),
    })
}

/// Image patches encode a random spatial field; each point's target is its
/// own scalar plus the field value at the patch it projects to.
pub fn gen_heterogeneous(cfg: &HeterogeneousConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = global_rng(cfg.seed);
    let camera = make_camera(cfg, &mut rng)?;
    let mut unit = |len: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / norm * (len as f64).sqrt()).collect()
    };
    let point_gain = unit(cfg.point_channels);
    let image_gain = unit(cfg.image_channels);
    let image_bias = (0..cfg.image_channels).map(|_| rng.random_range(-0.5..0.5)).collect();
    let k = Constants { camera: camera.clone(), point_gain, image_gain, image_bias };
    Ok(Dataset {
        config: DataConfig::Heterogeneous(cfg.clone()),
        modalities: vec!["points".into(), "image".into()],
        camera: Some(camera),
        train: build_split(cfg, &k, 0, cfg.train_samples)?,
        val: build_split(cfg, &k, 1, cfg.val_samples)?,
    })
}

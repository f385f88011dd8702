//! Inter-modal token alignment.
//!
//! Homogeneous modalities correspond position by position. Heterogeneous
//! point/image pairs correspond through a pinhole camera: a point maps to the
//! image patch containing its projected pixel, and the patch feature passes
//! through a small adapter MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Real, Tensor};
use crate::transformer::{Bound, Init, Linear, ParamStore, TokenSet};

/// Pinhole camera with 4×4 intrinsics and extrinsics, on a `W×H` image cut
/// into `P×P` patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub k: [[f64; 4]; 4],
    pub rt: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub patch: usize,
}

/// Why a point has no image patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unresolved {
    BehindCamera,
    OutOfImage,
}

impl std::fmt::Display for Unresolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Unresolved::BehindCamera => "point is behind the camera",
            Unresolved::OutOfImage => "pixel is outside the image",
        })
    }
}

impl std::error::Error for Unresolved {}

pub const IDENTITY4: [[f64; 4]; 4] = [[1., 0., 0., 0.], [0., 1., 0., 0.], [0., 0., 1., 0.], [0., 0., 0., 1.]];

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl CameraModel {
    pub fn new(k: [[f64; 4]; 4], rt: [[f64; 4]; 4], width: usize, height: usize, patch: usize) -> Result<Self> {
        let cam = CameraModel { k, rt, width, height, patch };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image and patch sizes must be positive".into()));
        }
        if self.width % self.patch != 0 || self.height % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.width, self.height, self.patch
            )));
        }
        if self.k.iter().chain(&self.rt).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera matrix entry".into()));
        }
        Ok(())
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_cols() * self.grid_rows()
    }

    /// `K · Rt`.
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        mat4_mul(&self.k, &self.rt)
    }
}

/// Pixel of a point in homogeneous coordinates `[x, y, z, w]`.
pub fn project_homogeneous(p: [f64; 4], cam: &CameraModel) -> Result<(i64, i64), Unresolved> {
    let m = cam.matrix();
    let row = |i: usize| (0..4).map(|k| m[i][k] * p[k]).sum::<f64>();
    let (u, v, z) = (row(0), row(1), row(2));
    if z <= 0.0 || !z.is_finite() {
        return Err(Unresolved::BehindCamera);
    }
    let (px, py) = ((u / z).floor(), (v / z).floor());
    if !px.is_finite() || !py.is_finite() || px.abs() > i64::MAX as f64 / 2.0 || py.abs() > i64::MAX as f64 / 2.0 {
        return Err(Unresolved::OutOfImage);
    }
    Ok((px as i64, py as i64))
}

/// Pixel `(⌊u/z⌋, ⌊v/z⌋)` of a 3D point.
pub fn project_point(p: [f64; 3], cam: &CameraModel) -> Result<(i64, i64), Unresolved> {
    project_homogeneous([p[0], p[1], p[2], 1.0], cam)
}

/// Row-major patch index of a pixel.
pub fn pixel_to_patch(pixel: (i64, i64), cam: &CameraModel) -> Result<usize, Unresolved> {
    let (px, py) = pixel;
    if px < 0 || py < 0 || px as usize >= cam.width || py as usize >= cam.height {
        return Err(Unresolved::OutOfImage);
    }
    Ok((py as usize / cam.patch) * cam.grid_cols() + px as usize / cam.patch)
}

pub fn point_to_patch(p: [f64; 3], cam: &CameraModel) -> Result<usize, Unresolved> {
    pixel_to_patch(project_point(p, cam)?, cam)
}

/// Patch index per point, `None` when unresolved.
pub fn point_correspondences(points: &[[f64; 3]], cam: &CameraModel) -> Vec<Option<usize>> {
    points.iter().map(|&p| point_to_patch(p, cam).ok()).collect()
}

/// Two-layer GELU adapter from source width to target width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterMLP {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AdapterMLP {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, source: usize, target: usize) -> Self {
        let hidden = source.max(target);
        AdapterMLP {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), source, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, target),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn num_scalars(&self) -> usize {
        self.fc1.num_scalars() + self.fc2.num_scalars()
    }
}

/// How target tokens find their source token within the same sample.
#[derive(Clone, Copy, Debug)]
pub enum Correspondence<'a> {
    /// Same position in both modalities.
    Identity,
    /// Source index per target row (`batch · N_target` entries).
    Table(&'a [Option<usize>]),
}

impl Correspondence<'_> {
    /// Source row in the batched source matrix for target row `row`.
    fn source_row(&self, row: usize, target_tokens: usize, source_tokens: usize) -> Result<Option<usize>> {
        let (b, n) = (row / target_tokens, row % target_tokens);
        let idx = match self {
            Correspondence::Identity => Some(n),
            Correspondence::Table(t) => *t
                .get(row)
                .ok_or_else(|| Error::Contract(format!("no correspondence entry for target row {row}")))?,
        };
        match idx {
            Some(i) if i < source_tokens => Ok(Some(b * source_tokens + i)),
            Some(i) => Err(Error::dim("projection", format!("source token {i} of {source_tokens}"))),
            None => Ok(None),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Adapter<'a> {
    Identity,
    Mlp(&'a AdapterMLP),
}

/// Projected features for selected target rows.
#[derive(Clone, Debug)]
pub struct RowProjection {
    /// `[resolved.len() × C′_target]`, one row per resolved request in order.
    pub features: Option<NodeId>,
    /// Target rows that resolved, in request order.
    pub resolved: Vec<usize>,
}

/// Projects only the requested target rows; unresolved rows are dropped.
pub fn project_rows<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    source: &TokenSet,
    target_tokens: usize,
    rows: &[usize],
    corr: Correspondence<'_>,
    adapter: Adapter<'_>,
) -> Result<RowProjection> {
    let mut src_rows = Vec::with_capacity(rows.len());
    let mut resolved = Vec::with_capacity(rows.len());
    for &r in rows {
        if r >= source.batch * target_tokens {
            return Err(Error::dim("projection", format!("target row {r} beyond batch {}", source.batch)));
        }
        if let Some(s) = corr.source_row(r, target_tokens, source.tokens)? {
            src_rows.push(s);
            resolved.push(r);
        }
    }
    if src_rows.is_empty() {
        return Ok(RowProjection { features: None, resolved });
    }
    let picked = g.gather_rows(source.features, src_rows)?;
    let features = match adapter {
        Adapter::Identity => picked,
        Adapter::Mlp(a) => a.forward(g, p, picked)?,
    };
    Ok(RowProjection { features: Some(features), resolved })
}

/// Projection of a single target token of sample `b`, `None` when unresolved.
#[allow(clippy::too_many_arguments)]
pub fn token_projection<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    source: &TokenSet,
    target_tokens: usize,
    b: usize,
    n_target: usize,
    corr: Correspondence<'_>,
    adapter: Adapter<'_>,
) -> Result<Option<NodeId>> {
    let r = project_rows(g, p, source, target_tokens, &[b * target_tokens + n_target], corr, adapter)?;
    Ok(r.features)
}

/// Projected matrix for every target row.
#[derive(Clone, Debug)]
pub struct ModalityProjection {
    /// `[batch · N_target × C′_target]`; unresolved rows are zero.
    pub features: NodeId,
    pub resolved: Vec<bool>,
}

pub fn modality_projection<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    source: &TokenSet,
    target_tokens: usize,
    corr: Correspondence<'_>,
    adapter: Adapter<'_>,
    target_dim: usize,
) -> Result<ModalityProjection> {
    let total = source.batch * target_tokens;
    let all: Vec<usize> = (0..total).collect();
    let rp = project_rows(g, p, source, target_tokens, &all, corr, adapter)?;
    let mut resolved = vec![false; total];
    for &r in &rp.resolved {
        resolved[r] = true;
    }
    let features = match rp.features {
        Some(f) if rp.resolved.len() == total => f,
        Some(f) => {
            let zero = g.constant(Tensor::zeros(&[1, target_dim]));
            let table = g.concat_rows(&[f, zero])?;
            let mut index = vec![rp.resolved.len(); total];
            for (k, &r) in rp.resolved.iter().enumerate() {
                index[r] = k;
            }
            g.gather_rows(table, index)?
        }
        None => g.constant(Tensor::zeros(&[total, target_dim])),
    };
    Ok(ModalityProjection { features, resolved })
}

//! Threshold masks, donor-group allocation, token substitution and residual
//! positional alignment, plus the fused multi-stack model built from them.

mod model;

pub use model::{
    FusedBatch, FusedModel, FusedOutput, LayerMask, MaskPolicy, ModelSpec, Topology,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Real};
use crate::transformer::{add_positional, Bound, PositionalEmbedding, TokenSet};

pub const DEFAULT_THETA: f64 = 2e-2;

/// Which tokens keep their features (`s ≥ θ`) and which are replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMask {
    pub keep: Vec<bool>,
    pub substitute: Vec<bool>,
    pub threshold: f64,
}

impl FusionMask {
    pub fn from_substitute(substitute: Vec<bool>, threshold: f64) -> Self {
        let keep = substitute.iter().map(|&s| !s).collect();
        FusionMask { keep, substitute, threshold }
    }

    pub fn none(len: usize) -> Self {
        Self::from_substitute(vec![false; len], 0.0)
    }

    pub fn count(&self) -> usize {
        self.substitute.iter().filter(|&&s| s).count()
    }
}

pub fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {theta} must lie in (0, 1)")))
    }
}

/// `substitute[n] ⇔ s[n] < θ`. Plain values, so nothing is differentiated.
pub fn make_mask<T: Real>(scores: &[T], theta: f64) -> Result<FusionMask> {
    check_theta(theta)?;
    let substitute = scores.iter().map(|s| s.as_f64() < theta).collect();
    Ok(FusionMask::from_substitute(substitute, theta))
}

/// Fixed assignment of every token of modality `modality` to one donor modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAllocation {
    pub owner: Vec<usize>,
    pub modality: usize,
    pub modalities: usize,
    pub seed: u64,
}

impl GroupAllocation {
    /// Tokens assigned to donor `m′`, in index order.
    pub fn group(&self, donor: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&n| self.owner[n] == donor).collect()
    }
}

/// Seeded shuffle of `0..n`, dealt round-robin into the `M−1` donor groups.
pub fn allocate_groups(n: usize, modalities: usize, modality: usize, seed: u64) -> Result<GroupAllocation> {
    if modalities < 2 {
        return Err(Error::Config(format!("group allocation needs at least 2 modalities, got {modalities}")));
    }
    if modality >= modalities {
        return Err(Error::Config(format!("modality {modality} out of range for {modalities}")));
    }
    if n < modalities - 1 {
        return Err(Error::Config(format!("{n} tokens cannot fill {} donor groups", modalities - 1)));
    }
    let donors: Vec<usize> = (0..modalities).filter(|&d| d != modality).collect();
    let mut owner = vec![donors[0]; n];
    if donors.len() > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(modality as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (k, &tok) in order.iter().enumerate() {
            owner[tok] = donors[k % donors.len()];
        }
    }
    Ok(GroupAllocation { owner, modality, modalities, seed })
}

/// Donor features aligned to the target's rows.
#[derive(Clone, Debug)]
pub struct ProjectedSource {
    pub modality: usize,
    pub features: NodeId,
    /// Target row → row of `features`; `None` leaves the target token in place.
    pub row_of: Vec<Option<usize>>,
}

impl ProjectedSource {
    /// Source already laid out row for row like the target.
    pub fn dense(modality: usize, features: NodeId, rows: usize) -> Self {
        ProjectedSource { modality, features, row_of: (0..rows).map(Some).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Substitution {
    pub tokens: TokenSet,
    /// Rows actually replaced (masked and resolvable).
    pub applied: Vec<bool>,
}

/// Replaces masked rows of `e` by their donor's projected features.
///
/// `mask` and the result cover all `batch · N` rows; token `n` of every
/// sample uses donor `alloc.owner[n]`. `projections` is indexed by modality.
pub fn substitute_tokens<T: Real>(
    g: &mut Graph<T>,
    e: &TokenSet,
    mask: &FusionMask,
    alloc: &GroupAllocation,
    projections: &[Option<ProjectedSource>],
) -> Result<Substitution> {
    let rows = e.rows();
    if mask.substitute.len() != rows {
        return Err(Error::dim("substitute_tokens", format!("mask of {} rows for {rows} tokens", mask.substitute.len())));
    }
    if alloc.owner.len() != e.tokens {
        return Err(Error::dim(
            "substitute_tokens",
            format!("allocation over {} tokens for {} tokens per sample", alloc.owner.len(), e.tokens),
        ));
    }
    let mut parts = vec![e.features];
    let mut offsets: Vec<Option<usize>> = vec![None; projections.len().max(alloc.modalities)];
    let mut offset = rows;
    let mut index: Vec<usize> = (0..rows).collect();
    let mut applied = vec![false; rows];
    for r in 0..rows {
        if !mask.substitute[r] {
            continue;
        }
        let donor = alloc.owner[r % e.tokens];
        let src = projections
            .get(donor)
            .and_then(|p| p.as_ref())
            .ok_or_else(|| Error::Contract(format!("no projection from modality {donor} into modality {}", e.modality)))?;
        let Some(k) = src.row_of.get(r).copied().flatten() else {
            continue;
        };
        let base = match offsets[donor] {
            Some(b) => b,
            None => {
                let b = offset;
                offset += g.value(src.features).rows();
                parts.push(src.features);
                offsets[donor] = Some(b);
                b
            }
        };
        index[r] = base + k;
        applied[r] = true;
    }
    if parts.len() == 1 {
        return Ok(Substitution { tokens: *e, applied });
    }
    let table = g.concat_rows(&parts)?;
    let features = g.gather_rows(table, index)?;
    Ok(Substitution { tokens: e.with_features(features), applied })
}

/// Positional injection: differentiable at layer 1, detached afterwards.
pub fn rpa_inject<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    pe: &PositionalEmbedding,
    layer: usize,
) -> Result<TokenSet> {
    add_positional(g, p, e, pe, layer >= 2)
}

#[cfg(test)]
mod tests;

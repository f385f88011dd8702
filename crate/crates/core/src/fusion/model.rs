use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{allocate_groups, check_theta, make_mask, rpa_inject, substitute_tokens, FusionMask, GroupAllocation, ProjectedSource};
use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Real, Tensor};
use crate::projection::{project_rows, Adapter, AdapterMLP, Correspondence};
use crate::transformer::{
    block_with_scores, embed_input, score_token_subset, BlockOptions, Bound, Init, ModalityStack, ParamId, ParamStore,
    ScoreVector, Sharing, StackDims, TokenSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Pixel-aligned modalities on one token grid.
    Homogeneous,
    /// A point stack (modality 0) and an image stack (modality 1).
    Heterogeneous,
}

/// Everything needed to build a [`FusedModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub topology: Topology,
    /// One entry per modality; `tokens` excludes query tokens.
    pub stacks: Vec<StackDims>,
    pub share_backbone: bool,
    pub share_pe: bool,
    pub residuals: bool,
    pub rpa: bool,
    pub theta: f64,
    /// Heterogeneous only: image tokens may also be replaced by point features.
    pub bidirectional: bool,
    /// Heterogeneous only: learnable tokens appended to each stack, never pruned.
    pub num_query_tokens: usize,
    /// Initial score logit.
    pub score_bias: f64,
    pub alloc_seed: u64,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        match self.topology {
            Topology::Homogeneous => {
                if !(1..=4).contains(&self.stacks.len()) {
                    return Err(Error::Config(format!("homogeneous fusion supports 1 to 4 modalities, got {}", self.stacks.len())));
                }
                let t = self.stacks[0].tokens;
                if self.stacks.iter().any(|s| s.tokens != t) {
                    return Err(Error::Config("homogeneous modalities need equal token counts".into()));
                }
                if self.num_query_tokens != 0 {
                    return Err(Error::Config("query tokens exist only in the heterogeneous topology".into()));
                }
                if self.stacks.len() > 1 && t < self.stacks.len() - 1 {
                    return Err(Error::Config("too few tokens for the donor groups".into()));
                }
            }
            Topology::Heterogeneous => {
                if self.stacks.len() != 2 {
                    return Err(Error::Config("heterogeneous topology needs exactly a point and an image stack".into()));
                }
                if self.bidirectional && self.stacks[0].layers != self.stacks[1].layers {
                    return Err(Error::Config("bidirectional fusion requires equal stack depths".into()));
                }
                if self.share_backbone || self.share_pe {
                    return Err(Error::Config("heterogeneous stacks cannot share parameters".into()));
                }
            }
        }
        Ok(())
    }
}

/// How substitution masks are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    /// `s < θ`.
    Score,
    /// Never substitute; scores still feed the loss.
    Disabled,
    /// Each prunable token substituted with probability `rate`, independent of scores.
    Random { rate: f64, seed: u64 },
    /// Masks given per `[layer − 1][modality]`, each covering all rows.
    Fixed(Vec<Vec<Vec<bool>>>),
}

/// Inputs of one fused forward pass.
#[derive(Clone, Debug)]
pub struct FusedBatch<T: Real> {
    /// Flattened tokens per modality, `[batch · N_m × C_m]`.
    pub inputs: Vec<Tensor<T>>,
    pub batch: usize,
    /// Heterogeneous: patch index of each point row, `None` if unresolved.
    pub correspondence: Option<Vec<Option<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub layer: usize,
    pub modality: usize,
    /// Requested substitution per row.
    pub substitute: Vec<bool>,
    /// Rows actually replaced.
    pub applied: Vec<bool>,
    /// Rows eligible for substitution (not query tokens).
    pub prunable: usize,
}

impl LayerMask {
    pub fn applied_fraction(&self) -> f64 {
        self.applied.iter().filter(|&&a| a).count() as f64 / self.prunable as f64
    }
}

#[derive(Clone, Debug)]
pub struct FusedOutput {
    pub final_tokens: Vec<TokenSet>,
    /// Task head output per modality over its real tokens.
    pub predictions: Vec<NodeId>,
    pub scores: Vec<ScoreVector>,
    pub masks: Vec<LayerMask>,
    /// Per modality, the post-substitution, pre-PE input of every layer.
    pub layer_inputs: Vec<Vec<TokenSet>>,
    /// Per modality, the tokens entering every block (after PE injection).
    pub block_inputs: Vec<Vec<TokenSet>>,
}

/// Parameter layout of a fused model; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub spec: ModelSpec,
    pub stacks: Vec<ModalityStack>,
    pub allocations: Vec<Option<GroupAllocation>>,
    /// Heterogeneous: image → point adapter per point layer.
    pub adapters: Vec<AdapterMLP>,
    /// Heterogeneous bidirectional: point → image adapter per image layer.
    pub reverse_adapters: Vec<AdapterMLP>,
    pub queries: Vec<Option<ParamId>>,
}

struct Step {
    next: TokenSet,
    score: Option<ScoreVector>,
    mask: LayerMask,
    raw: TokenSet,
    input: TokenSet,
}

impl Step {
    fn record(self, out: &mut FusedOutput) -> TokenSet {
        let m = self.mask.modality;
        out.scores.extend(self.score);
        out.masks.push(self.mask);
        out.layer_inputs[m].push(self.raw);
        out.block_inputs[m].push(self.input);
        self.next
    }
}

struct StepCtx<'a> {
    layer: usize,
    modality: usize,
    step: u64,
    policy: &'a MaskPolicy,
}

impl FusedModel {
    pub fn build<T: Real>(spec: ModelSpec) -> Result<(Self, ParamStore<T>)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(spec.init_seed);
        let k = spec.num_query_tokens;
        let mut stacks: Vec<ModalityStack> = Vec::with_capacity(spec.stacks.len());
        for (m, d) in spec.stacks.iter().enumerate() {
            let dims = StackDims { tokens: d.tokens + k, ..*d };
            let share = (m > 0 && spec.topology == Topology::Homogeneous)
                .then(|| (&stacks[0], Sharing { backbone: spec.share_backbone, positional: spec.share_pe }));
            let s = ModalityStack::build(&mut store, &mut init, m, dims, share, spec.score_bias)?;
            stacks.push(s);
        }
        if spec.share_pe && stacks.len() > 1 {
            stacks.iter_mut().for_each(|s| s.mark_pe_shared());
        }
        let modalities = stacks.len();
        let allocations = (0..modalities)
            .map(|m| {
                (modalities > 1)
                    .then(|| allocate_groups(stacks[m].dims.tokens, modalities, m, spec.alloc_seed))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut adapters = Vec::new();
        let mut reverse_adapters = Vec::new();
        let mut queries = vec![None; modalities];
        if spec.topology == Topology::Heterogeneous {
            let (pt, img) = (spec.stacks[0], spec.stacks[1]);
            for l in 0..pt.layers {
                adapters.push(AdapterMLP::new(&mut store, &mut init, &format!("adapter.img2pt.l{l}"), img.dim, pt.dim));
            }
            if spec.bidirectional {
                for l in 0..img.layers {
                    reverse_adapters.push(AdapterMLP::new(&mut store, &mut init, &format!("adapter.pt2img.l{l}"), pt.dim, img.dim));
                }
            }
            if k > 0 {
                for (m, q) in queries.iter_mut().enumerate() {
                    *q = Some(store.add(format!("m{m}.queries"), init.normal(&[k, spec.stacks[m].dim], 0.02)));
                }
            }
        }
        Ok((FusedModel { spec, stacks, allocations, adapters, reverse_adapters, queries }, store))
    }

    pub fn modalities(&self) -> usize {
        self.stacks.len()
    }

    /// Image layer consumed by point layer `l` (both 1-based).
    pub fn paired_image_layer(&self, l: usize) -> usize {
        let (lp, li) = (self.stacks[0].dims.layers, self.stacks[1].dims.layers);
        (l * li).div_ceil(lp)
    }

    /// LN scale parameters for the channel-sparsity loss.
    pub fn ln_scales(&self) -> Vec<ParamId> {
        self.stacks.iter().flat_map(|s| s.ln_scales()).collect()
    }

    fn opts(&self) -> BlockOptions {
        BlockOptions { residuals: self.spec.residuals }
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: usize, x: &Tensor<T>, batch: usize) -> Result<TokenSet> {
        let stack = &self.stacks[m];
        let xn = g.constant(x.clone());
        let e = embed_input(g, p, xn, &stack.embed, m, batch)?;
        let Some(q) = self.queries[m] else {
            return Ok(e);
        };
        let (n, k) = (e.tokens, self.spec.num_query_tokens);
        let table = g.concat_rows(&[e.features, p.node(q)])?;
        let index = (0..batch)
            .flat_map(|b| (0..n).map(move |i| b * n + i).chain((0..k).map(move |j| batch * n + j)))
            .collect();
        let features = g.gather_rows(table, index)?;
        Ok(TokenSet { features, tokens: n + k, ..e })
    }

    fn real_tokens(&self, m: usize) -> usize {
        self.spec.stacks[m].tokens
    }

    fn prunable_rows(&self, m: usize, batch: usize) -> Vec<usize> {
        let (n, total) = (self.real_tokens(m), self.stacks[m].dims.tokens);
        (0..batch).flat_map(|b| (0..n).map(move |i| b * total + i)).collect()
    }

    fn requested_mask(&self, ctx: &StepCtx<'_>, s: Option<&ScoreVector>, g: &Graph<impl Real>, prunable: &[usize], rows: usize) -> Result<Vec<bool>> {
        let mut out = vec![false; rows];
        let has_head = self.stacks[ctx.modality].layers[ctx.layer - 1].score_head.is_some();
        match ctx.policy {
            MaskPolicy::Disabled => {}
            MaskPolicy::Score => {
                if let Some(s) = s {
                    let mask = make_mask(s.values(g), self.spec.theta)?;
                    for (k, &r) in prunable.iter().enumerate() {
                        out[r] = mask.substitute[k];
                    }
                }
            }
            MaskPolicy::Random { rate, seed } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::Config(format!("random mask rate {rate} outside [0, 1]")));
                }
                if has_head {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    rng.set_stream((ctx.step << 16) | ((ctx.layer as u64) << 8) | ctx.modality as u64);
                    for &r in prunable {
                        out[r] = rng.random::<f64>() < *rate;
                    }
                }
            }
            MaskPolicy::Fixed(masks) => {
                let given = masks
                    .get(ctx.layer - 1)
                    .and_then(|l| l.get(ctx.modality))
                    .ok_or_else(|| Error::Contract(format!("no fixed mask for layer {} modality {}", ctx.layer, ctx.modality)))?;
                if given.len() != rows {
                    return Err(Error::dim("fixed mask", format!("{} rows for {rows} tokens", given.len())));
                }
                for &r in prunable {
                    out[r] = given[r];
                }
            }
        }
        Ok(out)
    }

    /// One layer of one modality: PE, scores, mask, substitution, block.
    #[allow(clippy::too_many_arguments)]
    fn layer_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        e: &TokenSet,
        ctx: &StepCtx<'_>,
        donors: &mut dyn FnMut(&mut Graph<T>, &[bool]) -> Result<Vec<Option<ProjectedSource>>>,
    ) -> Result<Step> {
        let stack = &self.stacks[ctx.modality];
        let w = &stack.layers[ctx.layer - 1];
        let inject = ctx.layer == 1 || self.spec.rpa;
        let input = if inject { rpa_inject(g, p, e, &stack.pe, ctx.layer)? } else { *e };
        let prunable = self.prunable_rows(ctx.modality, e.batch);
        let s = match &w.score_head {
            Some(head) => Some(score_token_subset(g, p, &input, head, &prunable)?),
            None => None,
        };
        let rows = e.rows();
        let substitute = self.requested_mask(ctx, s.as_ref(), g, &prunable, rows)?;
        let mut applied = vec![false; rows];
        let mut raw = *e;
        let mut fused_input = input;
        if substitute.iter().any(|&x| x) {
            let sources = donors(g, &substitute)?;
            let alloc = self.allocations[ctx.modality]
                .as_ref()
                .ok_or_else(|| Error::Contract("substitution requested in a single-modality model".into()))?;
            let mask = FusionMask::from_substitute(substitute.clone(), self.spec.theta);
            let sub = substitute_tokens(g, e, &mask, alloc, &sources)?;
            if sub.applied.iter().any(|&a| a) {
                raw = sub.tokens;
                fused_input = if inject { rpa_inject(g, p, &raw, &stack.pe, ctx.layer)? } else { raw };
            }
            applied = sub.applied;
        }
        let next = block_with_scores(g, p, &fused_input, s.as_ref(), w, self.opts())?;
        let lm = LayerMask { layer: ctx.layer, modality: ctx.modality, substitute, applied, prunable: prunable.len() };
        Ok(Step { next, score: s, mask: lm, raw, input: fused_input })
    }

    fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, m: usize, e: &TokenSet) -> Result<NodeId> {
        let stack = &self.stacks[m];
        let e = if self.queries[m].is_some() {
            let rows = self.prunable_rows(m, e.batch);
            let f = g.gather_rows(e.features, rows)?;
            TokenSet { features: f, tokens: self.real_tokens(m), ..*e }
        } else {
            *e
        };
        stack.predict(g, p, &e)
    }

    fn check_batch<T: Real>(&self, batch: &FusedBatch<T>) -> Result<()> {
        if batch.inputs.len() != self.modalities() {
            return Err(Error::Contract(format!(
                "{} modality inputs for a {}-modality model",
                batch.inputs.len(),
                self.modalities()
            )));
        }
        for (m, x) in batch.inputs.iter().enumerate() {
            let d = &self.spec.stacks[m];
            if x.rows() != batch.batch * d.tokens || x.cols() != d.in_channels {
                return Err(Error::dim(
                    "fused_forward",
                    format!("modality {m} input {:?}, expected [{} x {}]", x.shape(), batch.batch * d.tokens, d.in_channels),
                ));
            }
        }
        if self.spec.topology == Topology::Heterogeneous {
            let corr = batch
                .correspondence
                .as_ref()
                .ok_or_else(|| Error::Contract("heterogeneous forward without camera correspondences".into()))?;
            if corr.len() != batch.batch * self.real_tokens(0) {
                return Err(Error::dim("fused_forward", format!("{} correspondences for {} points", corr.len(), batch.batch * self.real_tokens(0))));
            }
            let patches = self.real_tokens(1);
            if corr.iter().flatten().any(|&j| j >= patches) {
                return Err(Error::dim("fused_forward", format!("patch index beyond {patches} image tokens")));
            }
        }
        Ok(())
    }

    /// Full fused forward pass. `step` only seeds the random mask policy.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &FusedBatch<T>,
        policy: &MaskPolicy,
        step: u64,
    ) -> Result<FusedOutput> {
        self.check_batch(batch)?;
        match self.spec.topology {
            Topology::Homogeneous => self.forward_homogeneous(g, p, batch, policy, step),
            Topology::Heterogeneous => self.forward_heterogeneous(g, p, batch, policy, step),
        }
    }

    fn forward_homogeneous<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &FusedBatch<T>,
        policy: &MaskPolicy,
        step: u64,
    ) -> Result<FusedOutput> {
        let mm = self.modalities();
        let mut e: Vec<TokenSet> = (0..mm)
            .map(|m| self.embed(g, p, m, &batch.inputs[m], batch.batch))
            .collect::<Result<_>>()?;
        let mut out = FusedOutput {
            final_tokens: Vec::new(),
            predictions: Vec::new(),
            scores: Vec::new(),
            masks: Vec::new(),
            layer_inputs: vec![Vec::new(); mm],
            block_inputs: vec![Vec::new(); mm],
        };
        for l in 1..=self.spec.stacks[0].layers {
            let raw = e.clone();
            let mut next = Vec::with_capacity(mm);
            for m in 0..mm {
                let ctx = StepCtx { layer: l, modality: m, step, policy };
                let rows = raw[m].rows();
                let mut donors = |_: &mut Graph<T>, _: &[bool]| -> Result<Vec<Option<ProjectedSource>>> {
                    Ok((0..mm)
                        .map(|d| (d != m).then(|| ProjectedSource::dense(d, raw[d].features, rows)))
                        .collect())
                };
                let st = self.layer_step(g, p, &raw[m], &ctx, &mut donors)?;
                next.push(st.record(&mut out));
            }
            e = next;
        }
        for (m, t) in e.iter().enumerate() {
            out.predictions.push(self.predict(g, p, m, t)?);
        }
        out.final_tokens = e;
        Ok(out)
    }

    /// Row tables for both projection directions over the query-padded rows.
    fn correspondence_tables(&self, batch: usize, corr: &[Option<usize>]) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let (np, ni) = (self.real_tokens(0), self.real_tokens(1));
        let (tp, ti) = (self.stacks[0].dims.tokens, self.stacks[1].dims.tokens);
        let mut pt = vec![None; batch * tp];
        let mut img = vec![None; batch * ti];
        for b in 0..batch {
            for n in 0..np {
                let c = corr[b * np + n];
                pt[b * tp + n] = c;
                if let Some(j) = c {
                    if img[b * ti + j].is_none() {
                        img[b * ti + j] = Some(n);
                    }
                }
            }
        }
        debug_assert!(ni <= ti);
        (pt, img)
    }

    #[allow(clippy::too_many_arguments)]
    fn hetero_sources<T: Real>(
        g: &mut Graph<T>,
        p: &Bound,
        source: &TokenSet,
        target_tokens: usize,
        table: &[Option<usize>],
        adapter: &AdapterMLP,
        substitute: &[bool],
        donor: usize,
    ) -> Result<Vec<Option<ProjectedSource>>> {
        let rows: Vec<usize> = (0..substitute.len()).filter(|&r| substitute[r]).collect();
        let rp = project_rows(g, p, source, target_tokens, &rows, Correspondence::Table(table), Adapter::Mlp(adapter))?;
        let mut srcs = vec![None, None];
        if let Some(features) = rp.features {
            let mut row_of = vec![None; substitute.len()];
            for (k, &r) in rp.resolved.iter().enumerate() {
                row_of[r] = Some(k);
            }
            srcs[donor] = Some(ProjectedSource { modality: donor, features, row_of });
        } else {
            srcs[donor] = Some(ProjectedSource { modality: donor, features: source.features, row_of: vec![None; substitute.len()] });
        }
        Ok(srcs)
    }

    fn forward_heterogeneous<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &FusedBatch<T>,
        policy: &MaskPolicy,
        step: u64,
    ) -> Result<FusedOutput> {
        let corr = batch.correspondence.as_deref().unwrap_or_default();
        let (pt_table, img_table) = self.correspondence_tables(batch.batch, corr);
        let (tp, ti) = (self.stacks[0].dims.tokens, self.stacks[1].dims.tokens);
        let mut out = FusedOutput {
            final_tokens: Vec::new(),
            predictions: Vec::new(),
            scores: Vec::new(),
            masks: Vec::new(),
            layer_inputs: vec![Vec::new(), Vec::new()],
            block_inputs: vec![Vec::new(), Vec::new()],
        };
        let mut ep = self.embed(g, p, 0, &batch.inputs[0], batch.batch)?;
        let mut ei = self.embed(g, p, 1, &batch.inputs[1], batch.batch)?;

        if self.spec.bidirectional {
            for l in 1..=self.stacks[0].dims.layers {
                let (rp, ri) = (ep, ei);
                let ctx = StepCtx { layer: l, modality: 0, step, policy };
                let adapter = self.adapters[l - 1];
                let mut donors = |g: &mut Graph<T>, sub: &[bool]| Self::hetero_sources(g, p, &ri, tp, &pt_table, &adapter, sub, 1);
                let sp = self.layer_step(g, p, &rp, &ctx, &mut donors)?;
                let ctx = StepCtx { layer: l, modality: 1, step, policy };
                let adapter = self.reverse_adapters[l - 1];
                let mut donors = |g: &mut Graph<T>, sub: &[bool]| Self::hetero_sources(g, p, &rp, ti, &img_table, &adapter, sub, 0);
                let si = self.layer_step(g, p, &ri, &ctx, &mut donors)?;
                ep = sp.record(&mut out);
                ei = si.record(&mut out);
            }
        } else {
            let mut img_raw = Vec::with_capacity(self.stacks[1].dims.layers);
            for l in 1..=self.stacks[1].dims.layers {
                let ctx = StepCtx { layer: l, modality: 1, step, policy };
                let mut donors = |_: &mut Graph<T>, _: &[bool]| -> Result<Vec<Option<ProjectedSource>>> {
                    Err(Error::Contract("image tokens are substituted only with bidirectional fusion".into()))
                };
                let st = self.layer_step(g, p, &ei, &ctx, &mut donors)?;
                img_raw.push(ei);
                ei = st.record(&mut out);
            }
            for l in 1..=self.stacks[0].dims.layers {
                let src = img_raw[self.paired_image_layer(l) - 1];
                let ctx = StepCtx { layer: l, modality: 0, step, policy };
                let adapter = self.adapters[l - 1];
                let mut donors = |g: &mut Graph<T>, sub: &[bool]| Self::hetero_sources(g, p, &src, tp, &pt_table, &adapter, sub, 1);
                let st = self.layer_step(g, p, &ep, &ctx, &mut donors)?;
                ep = st.record(&mut out);
            }
        }
        out.predictions.push(self.predict(g, p, 0, &ep)?);
        out.predictions.push(self.predict(g, p, 1, &ei)?);
        out.final_tokens = vec![ep, ei];
        Ok(out)
    }
}

//! Modality-aware transformer layers with token scoring.
//!
//! Token features are matrices of shape `[batch·N, C′]`; sample `b` owns the
//! contiguous rows `b·N..(b+1)·N`. Every function here records onto a
//! [`Graph`] and reads parameters through a [`Bound`] view of a
//! [`ParamStore`].

mod params;

pub use params::{Bound, Init, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Real, Tensor, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.normal(&[in_dim, out_dim], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::dim(
                "linear",
                format!("input {:?} into {}→{} map", g.shape(x), self.in_dim, self.out_dim),
            ));
        }
        let y = g.matmul(x, p.node(self.weight))?;
        g.add_tiled(y, p.node(self.bias))
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNormParams { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p.node(self.gamma), p.node(self.beta), T::lit(LN_EPS))
    }
}

/// Token-importance head: linear C′→⌈C′/4⌉, GELU, linear →1, sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ScoreHead {
    pub fn hidden_width(dim: usize) -> usize {
        dim.div_ceil(4)
    }

    /// `output_bias` sets the initial logit, so scores start at `sigmoid(output_bias)`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, output_bias: f64) -> Self {
        let hidden = Self::hidden_width(dim);
        let fc1 = Linear::new(store, init, &format!("{name}.fc1"), dim, hidden);
        let fc2 = Linear::new(store, init, &format!("{name}.fc2"), hidden, 1);
        store.get_mut(fc2.bias).data_mut()[0] = T::lit(output_bias);
        ScoreHead { fc1, fc2 }
    }

    pub fn num_scalars(&self) -> usize {
        self.fc1.num_scalars() + self.fc2.num_scalars()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Msa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Msa {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Msa {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.q.num_scalars() + self.k.num_scalars() + self.v.num_scalars() + self.o.num_scalars()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, ratio: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, dim * ratio),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), dim * ratio, dim),
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

/// One transformer layer as seen by one modality. With sharing enabled the
/// `msa` and `mlp` ids coincide across modalities; norms and the score head
/// are always per-modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerWeights {
    pub msa: Msa,
    pub mlp: Mlp,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub score_head: Option<ScoreHead>,
}

/// Learned positional table `[N, C′]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub tokens: usize,
    pub dim: usize,
    pub shared_across_modalities: bool,
}

impl PositionalEmbedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, tokens: usize, dim: usize, shared: bool) -> Self {
        let table = store.add(format!("{name}.table"), init.normal(&[tokens, dim], 0.02));
        PositionalEmbedding { table, tokens, dim, shared_across_modalities: shared }
    }
}

/// Per-modality token features at the input of layer `layer` (1-based;
/// `layers + 1` denotes the stack output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub modality: usize,
    pub features: NodeId,
    pub layer: usize,
    pub batch: usize,
    /// Tokens per sample.
    pub tokens: usize,
}

impl TokenSet {
    pub fn with_features(self, features: NodeId) -> Self {
        TokenSet { features, ..self }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens
    }
}

/// Sigmoid token scores of one layer and modality.
///
/// `values` covers the prunable tokens and feeds the l1 loss; `multiplier`
/// covers every row of the token matrix and scales the attention input.
/// They are the same node unless non-prunable tokens are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreVector {
    pub values: NodeId,
    pub multiplier: NodeId,
    pub layer: usize,
    pub modality: usize,
    pub batch: usize,
}

impl ScoreVector {
    pub fn values<'g, T: Real>(&self, g: &'g Graph<T>) -> &'g [T] {
        g.value(self.values).data()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    /// Pre-norm residual connections around both sublayers.
    pub residuals: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions { residuals: true }
    }
}

/// First-layer tokens as a linear projection of flattened inputs.
pub fn embed_input<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    x: NodeId,
    embed: &Linear,
    modality: usize,
    batch: usize,
) -> Result<TokenSet> {
    let rows = g.value(x).rows();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("embed_input", format!("{rows} rows for batch {batch}")));
    }
    let features = embed.forward(g, p, x)?;
    Ok(TokenSet { modality, features, layer: 1, batch, tokens: rows / batch })
}

/// Scores every token of `e`.
pub fn score_tokens<T: Real>(g: &mut Graph<T>, p: &Bound, e: &TokenSet, head: &ScoreHead) -> Result<ScoreVector> {
    let rows = e.rows();
    let values = score_rows(g, p, e.features, head)?;
    debug_assert_eq!(g.value(values).len(), rows);
    Ok(ScoreVector { values, multiplier: values, layer: e.layer, modality: e.modality, batch: e.batch })
}

/// Scores only `prunable` rows; the remaining rows get a constant multiplier of one.
pub fn score_token_subset<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    head: &ScoreHead,
    prunable: &[usize],
) -> Result<ScoreVector> {
    let rows = e.rows();
    if prunable.len() == rows {
        return score_tokens(g, p, e, head);
    }
    let picked = g.gather_rows(e.features, prunable.to_vec())?;
    let values = score_rows(g, p, picked, head)?;
    let col = g.reshape(values, &[prunable.len(), 1])?;
    let one = g.constant(Tensor::ones(&[1, 1]));
    let table = g.concat_rows(&[col, one])?;
    let mut index = vec![prunable.len(); rows];
    for (k, &r) in prunable.iter().enumerate() {
        index[r] = k;
    }
    let spread = g.gather_rows(table, index)?;
    let multiplier = g.reshape(spread, &[rows])?;
    Ok(ScoreVector { values, multiplier, layer: e.layer, modality: e.modality, batch: e.batch })
}

fn score_rows<T: Real>(g: &mut Graph<T>, p: &Bound, x: NodeId, head: &ScoreHead) -> Result<NodeId> {
    if g.value(x).cols() != head.fc1.in_dim {
        return Err(Error::dim(
            "score_tokens",
            format!("tokens {:?} into a head of width {}", g.shape(x), head.fc1.in_dim),
        ));
    }
    let h = head.fc1.forward(g, p, x)?;
    let h = g.gelu(h);
    let logit = head.fc2.forward(g, p, h)?;
    let rows = g.value(logit).rows();
    let logit = g.reshape(logit, &[rows])?;
    Ok(g.sigmoid(logit))
}

/// Multi-head self-attention with output projection.
pub fn multi_head_attention<T: Real>(g: &mut Graph<T>, p: &Bound, x: NodeId, msa: &Msa, batch: usize) -> Result<NodeId> {
    let q = msa.q.forward(g, p, x)?;
    let k = msa.k.forward(g, p, x)?;
    let v = msa.v.forward(g, p, x)?;
    let a = g.attention(q, k, v, batch, msa.heads)?;
    msa.o.forward(g, p, a)
}

/// `e + MSA(LN(e) · s)`; the residual is dropped when `residuals` is off.
/// `s = None` is plain MSA.
pub fn scored_msa<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    s: Option<&ScoreVector>,
    w: &LayerWeights,
    opts: BlockOptions,
) -> Result<NodeId> {
    let mut x = w.ln1.forward(g, p, e.features)?;
    if let Some(s) = s {
        x = g.mul_rows(x, s.multiplier)?;
    }
    let a = multi_head_attention(g, p, x, &w.msa, e.batch)?;
    if opts.residuals {
        g.add(e.features, a)
    } else {
        Ok(a)
    }
}

/// The layer body on already-prepared input tokens and precomputed scores.
pub fn block_with_scores<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    s: Option<&ScoreVector>,
    w: &LayerWeights,
    opts: BlockOptions,
) -> Result<TokenSet> {
    let hat = scored_msa(g, p, e, s, w, opts)?;
    let h = w.ln2.forward(g, p, hat)?;
    let m = w.mlp.forward(g, p, h)?;
    let next = if opts.residuals { g.add(hat, m)? } else { m };
    Ok(TokenSet { features: next, layer: e.layer + 1, ..*e })
}

/// Adds the positional table to every sample; `freeze` detaches it.
pub fn add_positional<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    pe: &PositionalEmbedding,
    freeze: bool,
) -> Result<TokenSet> {
    if pe.tokens != e.tokens || pe.dim != g.value(e.features).cols() {
        return Err(Error::dim(
            "positional embedding",
            format!("table [{}, {}] for tokens {:?}", pe.tokens, pe.dim, g.shape(e.features)),
        ));
    }
    let table = if freeze { g.stop_gradient(p.detached_node(pe.table)) } else { p.node(pe.table) };
    let features = g.add_tiled(e.features, table)?;
    Ok(e.with_features(features))
}

/// Optional PE injection, scoring, then the scored layer body.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    e: &TokenSet,
    pe: &PositionalEmbedding,
    w: &LayerWeights,
    inject_pe: bool,
    freeze_pe: bool,
    opts: BlockOptions,
) -> Result<(TokenSet, Option<ScoreVector>)> {
    let input = if inject_pe { add_positional(g, p, e, pe, freeze_pe)? } else { *e };
    let s = match &w.score_head {
        Some(head) => Some(score_tokens(g, p, &input, head)?),
        None => None,
    };
    let next = block_with_scores(g, p, &input, s.as_ref(), w, opts)?;
    Ok((next, s))
}

/// Shape of one modality's stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackDims {
    /// Tokens per sample (including any appended query tokens).
    pub tokens: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Width of the per-token task head.
    pub out_dim: usize,
    pub scoring: bool,
}

/// Which parts of an existing stack a new stack reuses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Sharing {
    /// Embedding, MSA, MLP and task head.
    pub backbone: bool,
    pub positional: bool,
}

/// Embedding, positional table, layers, final norm and task head of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStack {
    pub modality: usize,
    pub dims: StackDims,
    pub embed: Linear,
    pub pe: PositionalEmbedding,
    pub layers: Vec<LayerWeights>,
    pub final_ln: LayerNormParams,
    pub head: Linear,
}

impl ModalityStack {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        modality: usize,
        dims: StackDims,
        share: Option<(&ModalityStack, Sharing)>,
        score_bias: f64,
    ) -> Result<Self> {
        if dims.layers == 0 || dims.tokens == 0 || dims.dim == 0 || dims.in_channels == 0 || dims.out_dim == 0 {
            return Err(Error::Config(format!("degenerate stack dimensions {dims:?}")));
        }
        if let Some((other, flags)) = share {
            if flags.backbone && (other.dims.dim != dims.dim || other.dims.layers != dims.layers || other.dims.in_channels != dims.in_channels) {
                return Err(Error::Config("shared backbone requires identical stack dimensions".into()));
            }
            if flags.positional && other.dims.tokens != dims.tokens {
                return Err(Error::Config("shared positional table requires equal token counts".into()));
            }
        }
        let pre = format!("m{modality}");
        let backbone = share.filter(|(_, f)| f.backbone).map(|(s, _)| s);
        let positional = share.filter(|(_, f)| f.positional).map(|(s, _)| s);

        let embed = match backbone {
            Some(s) => s.embed,
            None => Linear::new(store, init, &format!("{pre}.embed"), dims.in_channels, dims.dim),
        };
        let pe = match positional {
            Some(s) => s.pe,
            None => PositionalEmbedding::new(store, init, &format!("{pre}.pe"), dims.tokens, dims.dim, share.is_some_and(|(_, f)| f.positional)),
        };
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let lp = format!("{pre}.layer{l}");
            let (msa, mlp) = match backbone {
                Some(s) => (s.layers[l].msa, s.layers[l].mlp),
                None => (
                    Msa::new(store, init, &format!("{lp}.msa"), dims.dim, dims.heads)?,
                    Mlp::new(store, init, &format!("{lp}.mlp"), dims.dim, dims.mlp_ratio),
                ),
            };
            let ln1 = LayerNormParams::new(store, &format!("{lp}.ln1"), dims.dim);
            let ln2 = LayerNormParams::new(store, &format!("{lp}.ln2"), dims.dim);
            let score_head = dims
                .scoring
                .then(|| ScoreHead::new(store, init, &format!("{lp}.score"), dims.dim, score_bias));
            layers.push(LayerWeights { msa, mlp, ln1, ln2, score_head });
        }
        let final_ln = LayerNormParams::new(store, &format!("{pre}.final_ln"), dims.dim);
        let head = match backbone {
            Some(s) => s.head,
            None => Linear::zeros(store, &format!("{pre}.head"), dims.dim, dims.out_dim),
        };
        Ok(ModalityStack { modality, dims, embed, pe, layers, final_ln, head })
    }

    /// Mark the stack's positional table as shared by other modalities.
    pub fn mark_pe_shared(&mut self) {
        self.pe.shared_across_modalities = true;
    }

    /// Task head on the normalized stack output.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, e: &TokenSet) -> Result<NodeId> {
        let x = self.final_ln.forward(g, p, e.features)?;
        self.head.forward(g, p, x)
    }

    pub fn ln_scales(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|w| [w.ln1.gamma, w.ln2.gamma]).collect()
    }

    /// The stack on its own: PE injected at layer 1 only, or at every layer
    /// (frozen after the first) when `rpa` is set.
    pub fn forward_single<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: NodeId,
        batch: usize,
        rpa: bool,
        opts: BlockOptions,
    ) -> Result<(TokenSet, Vec<ScoreVector>)> {
        let mut e = embed_input(g, p, x, &self.embed, self.modality, batch)?;
        let mut scores = Vec::new();
        for (l, w) in self.layers.iter().enumerate() {
            let inject = l == 0 || rpa;
            let (next, s) = block_forward(g, p, &e, &self.pe, w, inject, l > 0, opts)?;
            scores.extend(s);
            e = next;
        }
        Ok((e, scores))
    }
}

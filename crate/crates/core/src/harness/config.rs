use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{MaskPolicy, ModelSpec, Topology, DEFAULT_THETA};
use crate::objective::{LossConfig, TaskKind};
use crate::synth::{DataConfig, Dataset, HomogeneousConfig};
use crate::transformer::StackDims;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory; generated in memory from `[data]` when absent.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    /// Heterogeneous depths; `layers` when unset.
    pub point_layers: Option<usize>,
    pub image_layers: Option<usize>,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Share embedding, attention, MLP and head across homogeneous modalities.
    /// Defaults to true for homogeneous data and false otherwise.
    pub share_msa_mlp: Option<bool>,
    pub share_pe: Option<bool>,
    pub residuals: bool,
    pub rpa: bool,
    /// Initial score logit.
    pub score_bias: f64,
    pub num_query_tokens: usize,
    /// Dataset modalities fed to the model; all when empty.
    pub use_modalities: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            point_layers: None,
            image_layers: None,
            dim: 32,
            heads: 4,
            mlp_ratio: 2,
            share_msa_mlp: None,
            share_pe: None,
            residuals: true,
            rpa: true,
            score_bias: 0.0,
            num_query_tokens: 0,
            use_modalities: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Score,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub enabled: bool,
    pub policy: PolicyKind,
    pub theta: f64,
    pub random_rate: f64,
    pub bidirectional: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { enabled: true, policy: PolicyKind::Score, theta: DEFAULT_THETA, random_rate: 0.3, bidirectional: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub task: TaskKind,
    /// Token-sparsity weight; the task default when unset.
    pub lambda_token: Option<f64>,
    pub lambda_channel: f64,
    /// Per-modality task weights; all ones when empty.
    pub task_weights: Vec<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { task: TaskKind::Mse, lambda_token: None, lambda_channel: 0.0, task_weights: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub log_every: u64,
    /// Evaluate shards on the rayon pool.
    pub parallel_eval: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            kind: OptimizerKind::Adam,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            batch_size: 8,
            log_every: 50,
            parallel_eval: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub paths: PathsSection,
    pub model: ModelSection,
    pub fusion: FusionSection,
    pub loss: LossSection,
    pub optim: OptimSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::Homogeneous(HomogeneousConfig::default()),
            paths: PathsSection::default(),
            model: ModelSection::default(),
            fusion: FusionSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `paths.data` is taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(d), Some(base)) = (cfg.paths.data.as_mut(), path.parent()) {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn topology(&self) -> Topology {
        self.data.topology()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = &self.model;
        if m.layers == 0 || m.dim == 0 || m.heads == 0 || m.mlp_ratio == 0 {
            return Err(Error::Config("model layers, dim, heads and mlp_ratio must be positive".into()));
        }
        if m.dim % m.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", m.dim, m.heads)));
        }
        if !m.score_bias.is_finite() {
            return Err(Error::Config("score_bias must be finite".into()));
        }
        match &self.data {
            DataConfig::Homogeneous(d) => {
                if m.point_layers.is_some() || m.image_layers.is_some() || m.num_query_tokens != 0 {
                    return Err(Error::Config("point_layers, image_layers and num_query_tokens are heterogeneous settings".into()));
                }
                if m.use_modalities.iter().any(|&k| k >= d.modalities) {
                    return Err(Error::Config(format!("use_modalities refers past {} modalities", d.modalities)));
                }
                let mut seen = m.use_modalities.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != m.use_modalities.len() {
                    return Err(Error::Config("use_modalities lists a modality twice".into()));
                }
                if self.fusion.bidirectional {
                    return Err(Error::Config("bidirectional fusion is a heterogeneous setting".into()));
                }
                if self.loss.task == TaskKind::CrossEntropy && d.classes < 2 {
                    return Err(Error::Config("cross-entropy needs data.classes of at least 2".into()));
                }
            }
            DataConfig::Heterogeneous(_) => {
                if !m.use_modalities.is_empty() {
                    return Err(Error::Config("use_modalities applies only to homogeneous data".into()));
                }
                if m.share_msa_mlp == Some(true) || m.share_pe == Some(true) {
                    return Err(Error::Config("heterogeneous stacks cannot share parameters; leave share_msa_mlp and share_pe unset".into()));
                }
                if self.loss.task != TaskKind::Mse {
                    return Err(Error::Config("heterogeneous scenes carry regression targets only".into()));
                }
                if m.point_layers == Some(0) || m.image_layers == Some(0) {
                    return Err(Error::Config("stack depths must be positive".into()));
                }
            }
        }
        crate::fusion::check_theta(self.fusion.theta)?;
        if !(0.0..=1.0).contains(&self.fusion.random_rate) {
            return Err(Error::Config("fusion.random_rate must lie in [0, 1]".into()));
        }
        let modalities = self.modalities().len();
        if !self.loss.task_weights.is_empty() && self.loss.task_weights.len() != modalities {
            return Err(Error::Config(format!("{} task weights for {modalities} modalities", self.loss.task_weights.len())));
        }
        self.loss_config().validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if o.batch_size == 0 || o.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        Ok(())
    }

    /// Dataset modality indices the model consumes.
    pub fn modalities(&self) -> Vec<usize> {
        match &self.data {
            DataConfig::Homogeneous(d) if self.model.use_modalities.is_empty() => (0..d.modalities).collect(),
            DataConfig::Homogeneous(_) => self.model.use_modalities.clone(),
            DataConfig::Heterogeneous(_) => vec![0, 1],
        }
    }

    pub fn share_msa_mlp(&self) -> bool {
        self.model.share_msa_mlp.unwrap_or(self.topology() == Topology::Homogeneous)
    }

    pub fn share_pe(&self) -> bool {
        self.model.share_pe.unwrap_or(self.topology() == Topology::Homogeneous)
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut cfg = LossConfig::new(self.loss.task, self.modalities().len());
        if let Some(l) = self.loss.lambda_token {
            cfg.lambda_token = l;
        }
        cfg.lambda_channel = self.loss.lambda_channel;
        if !self.loss.task_weights.is_empty() {
            cfg.task_weights = self.loss.task_weights.clone();
        }
        cfg
    }

    pub fn policy(&self) -> MaskPolicy {
        if !self.fusion.enabled || self.modalities().len() < 2 {
            return MaskPolicy::Disabled;
        }
        match self.fusion.policy {
            PolicyKind::Score => MaskPolicy::Score,
            PolicyKind::Random => MaskPolicy::Random { rate: self.fusion.random_rate, seed: self.seed ^ 0x5eed_0000 },
        }
    }

    fn out_dim(&self) -> usize {
        match (&self.data, self.loss.task) {
            (DataConfig::Homogeneous(d), TaskKind::CrossEntropy) => d.classes,
            _ => 1,
        }
    }

    /// Model layout for this config over `dataset`.
    pub fn model_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        if dataset.config.topology() != self.topology() {
            return Err(Error::Config("dataset topology differs from the config".into()));
        }
        let split = &dataset.train;
        let m = &self.model;
        let base = |tokens: usize, channels: usize, layers: usize, scoring: bool| StackDims {
            tokens,
            in_channels: channels,
            dim: m.dim,
            heads: m.heads,
            layers,
            mlp_ratio: m.mlp_ratio,
            out_dim: self.out_dim(),
            scoring,
        };
        let stacks = match self.topology() {
            Topology::Homogeneous => self
                .modalities()
                .iter()
                .map(|&k| {
                    if k >= split.inputs.len() {
                        return Err(Error::Config(format!("dataset has no modality {k}")));
                    }
                    Ok(base(split.tokens(k), split.channels(k), m.layers, true))
                })
                .collect::<Result<Vec<_>>>()?,
            Topology::Heterogeneous => vec![
                base(split.tokens(0), split.channels(0), m.point_layers.unwrap_or(m.layers), true),
                base(split.tokens(1), split.channels(1), m.image_layers.unwrap_or(m.layers), self.fusion.bidirectional),
            ],
        };
        let spec = ModelSpec {
            topology: self.topology(),
            stacks,
            share_backbone: self.share_msa_mlp(),
            share_pe: self.share_pe(),
            residuals: m.residuals,
            rpa: m.rpa,
            theta: self.fusion.theta,
            bidirectional: self.fusion.bidirectional,
            num_query_tokens: m.num_query_tokens,
            score_bias: m.score_bias,
            alloc_seed: self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1,
            init_seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{BatchSampler, DataView, PreparedBatch};
use super::eval::{evaluate_view, EvalMetrics};
use super::optim::Adam;
use crate::container::{find, read_manifest, read_tensor, write_manifest, write_tensor, TensorEntry};
use crate::error::{Error, Result};
use crate::fusion::{FusedModel, FusedOutput, MaskPolicy};
use crate::numeric::{Graph, Tensor};
use crate::objective::{task_loss, total_loss, LossConfig, LossTerms};
use crate::synth::{generate, Dataset};
use crate::transformer::{Bound, ParamStore};

/// Score and substitution statistics of one layer of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub modality: usize,
    /// `None` for stacks without a score head.
    pub mean_score: Option<f64>,
    pub substituted: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub task: Vec<f64>,
    pub token_l1: f64,
    pub channel_l1: f64,
    pub layers: Vec<LayerStat>,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Graph, outputs and loss terms of one forward pass.
pub(crate) struct Evaluated {
    pub graph: Graph<f64>,
    pub bound: Bound,
    pub out: FusedOutput,
    pub terms: LossTerms,
}

pub(crate) fn forward_loss(
    model: &FusedModel,
    store: &ParamStore<f64>,
    batch: &PreparedBatch,
    policy: &MaskPolicy,
    step: u64,
    loss: &LossConfig,
    trainable: bool,
) -> Result<Evaluated> {
    let mut g = Graph::new();
    let bound = if trainable { store.bind(&mut g) } else { store.bind_frozen(&mut g) };
    let out = model.forward(&mut g, &bound, &batch.fused, policy, step)?;
    let tasks = out
        .predictions
        .iter()
        .zip(&batch.targets)
        .map(|(&p, t)| task_loss(&mut g, p, t, loss.task))
        .collect::<Result<Vec<_>>>()?;
    let gammas: Vec<_> = model.ln_scales().iter().map(|&id| bound.node(id)).collect();
    let terms = total_loss(&mut g, &tasks, &out.scores, &gammas, loss)?;
    Ok(Evaluated { graph: g, bound, out, terms })
}

pub(crate) fn layer_stats(ev: &Evaluated) -> Vec<LayerStat> {
    ev.out
        .masks
        .iter()
        .map(|m| {
            let score = ev.out.scores.iter().find(|s| s.layer == m.layer && s.modality == m.modality);
            let mean_score = score.map(|s| {
                let v = s.values(&ev.graph);
                v.iter().sum::<f64>() / v.len() as f64
            });
            LayerStat { layer: m.layer, modality: m.modality, mean_score, substituted: m.applied_fraction() }
        })
        .collect()
}

/// Model, parameters and optimizer state of a training run.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub dataset: Arc<Dataset>,
    pub model: FusedModel,
    pub store: ParamStore<f64>,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Loads `paths.data` or generates the dataset described by `[data]`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.paths.data {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            if ds.config != cfg.data {
                return Err(Error::Config(format!("dataset at {} was generated from a different [data] section", dir.display())));
            }
            Ok(ds)
        }
        None => generate(&cfg.data),
    }
}

impl Session {
    pub fn new(cfg: ExperimentConfig, dataset: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        if dataset.config != cfg.data {
            return Err(Error::Config("dataset does not match the [data] section".into()));
        }
        let spec = cfg.model_spec(&dataset)?;
        let (model, store) = FusedModel::build::<f64>(spec)?;
        let o = &cfg.optim;
        let adam = Adam::new(o.lr, o.beta1, o.beta2, o.eps, store.tensors());
        Ok(Session { cfg, dataset, model, store, adam, step: 0 })
    }

    pub fn sampler(&self) -> BatchSampler {
        BatchSampler { seed: self.cfg.seed ^ 0xba7c_4000, samples: self.dataset.train.samples, batch: self.cfg.optim.batch_size }
    }

    pub fn view(&self, split: &str) -> Result<DataView<'_>> {
        DataView::new(self.dataset.split(split)?, self.cfg.modalities(), self.cfg.loss.task, self.dataset.camera.as_ref())
    }

    /// One optimizer step; the metrics describe the parameters before the update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let view = self.view("train")?;
        let batch = view.batch(&self.sampler().indices(self.step))?;
        let policy = self.cfg.policy();
        let loss = self.cfg.loss_config();
        let ev = forward_loss(&self.model, &self.store, &batch, &policy, self.step, &loss, true)?;
        let g = &ev.graph;
        let scalar = |n| g.value(n).item();
        let metrics = StepMetrics {
            step: self.step + 1,
            loss: scalar(ev.terms.total)?,
            task: ev.terms.task.iter().map(|&n| scalar(n)).collect::<Result<_>>()?,
            token_l1: scalar(ev.terms.token)?,
            channel_l1: scalar(ev.terms.channel)?,
            layers: layer_stats(&ev),
        };
        if !metrics.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: total {}, task {:?}, token {}, channel {}",
                metrics.step, metrics.loss, metrics.task, metrics.token_l1, metrics.channel_l1
            )));
        }
        let mut grads = g.backward(ev.terms.total)?;
        let grads = self.store.gradients(&mut grads, &ev.bound);
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at step {}", self.store.names()[i], metrics.step)));
        }
        self.adam.update(self.store.tensors_mut(), &grads)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `optim.steps`, handing every logged step to `log`.
    pub fn train(&mut self, log: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        let every = self.cfg.optim.log_every;
        while self.step < self.cfg.optim.steps {
            let m = self.train_step()?;
            if m.step % every == 0 || m.step == self.cfg.optim.steps {
                log(&m)?;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, split: &str) -> Result<EvalMetrics> {
        let view = self.view(split)?;
        evaluate_view(&self.model, &self.store, &view, &self.cfg, split)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            params: self.store.names().iter().cloned().zip(self.store.tensors().iter().cloned()).collect(),
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, dataset: Arc<Dataset>) -> Result<Self> {
        let mut s = Session::new(ckpt.config, dataset)?;
        s.store.load(ckpt.params)?;
        let shapes_match = ckpt.adam.m.len() == s.store.len()
            && ckpt.adam.m.iter().zip(ckpt.adam.v.iter()).zip(s.store.tensors()).all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape());
        if !shapes_match || ckpt.adam.step != ckpt.step {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        s.adam = ckpt.adam;
        s.step = ckpt.step;
        Ok(s)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tokenfusion-checkpoint-v1";

/// Everything needed to continue a run bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor<f64>)>,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// Sampler and random-mask streams are pure functions of these two values.
#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: ExperimentConfig,
    step: u64,
    rng: RngRecord,
    adam: AdamRecord,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            params.push(write_tensor(dir, &format!("param.{name}"), t)?);
            adam_m.push(write_tensor(dir, &format!("adam_m.{name}"), &self.adam.m[i])?);
            adam_v.push(write_tensor(dir, &format!("adam_v.{name}"), &self.adam.v[i])?);
        }
        let a = &self.adam;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            step: self.step,
            rng: RngRecord { seed: self.config.seed, step: self.step },
            adam: AdamRecord { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step },
            params,
            adam_m,
            adam_v,
        };
        write_manifest(dir, &manifest)
    }

    /// Accepts the checkpoint directory or its manifest file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let dir = if path.is_file() { path.parent().unwrap_or(Path::new(".")) } else { path };
        let man: CheckpointManifest = read_manifest(dir)?;
        if man.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{} is not a checkpoint (format {:?})", dir.display(), man.format)));
        }
        man.config.validate()?;
        if man.rng.seed != man.config.seed || man.rng.step != man.step {
            return Err(Error::Format("checkpoint random state disagrees with its step counter".into()));
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &man.params {
            let name = e.name.strip_prefix("param.").ok_or_else(|| Error::Format(format!("bad parameter entry {}", e.name)))?;
            params.push((name.to_string(), read_tensor::<f64>(dir, e)?.with_grad(true)));
            m.push(read_tensor::<f64>(dir, find(&man.adam_m, &format!("adam_m.{name}"))?)?);
            v.push(read_tensor::<f64>(dir, find(&man.adam_v, &format!("adam_v.{name}"))?)?);
        }
        let a = man.adam;
        Ok(Checkpoint {
            config: man.config,
            step: man.step,
            params,
            adam: Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v },
        })
    }
}

/// Final metrics written next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub train: EvalMetrics,
    pub val: EvalMetrics,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SUMMARY_FILE: &str = "final.json";

/// Trains into `out`: `metrics.jsonl`, `checkpoint/` and `final.json`.
/// With `resume`, continues that checkpoint and appends to the metrics stream.
pub fn train_to_dir(cfg: ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let dataset = Arc::new(load_dataset(&cfg)?);
    let mut session = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if ckpt.config.data != cfg.data || ckpt.config.model != cfg.model || ckpt.config.seed != cfg.seed {
                return Err(Error::Config("resumed checkpoint was trained with a different data, model or seed section".into()));
            }
            // A longer schedule or new logging interval is allowed on resume.
            ckpt.config = cfg.clone();
            Session::from_checkpoint(ckpt, dataset)?
        }
        None => Session::new(cfg, dataset)?,
    };
    fs::create_dir_all(out)?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(out.join(METRICS_FILE))?;
    session.train(&mut |m| {
        writeln!(file, "{}", m.to_json_line())?;
        Ok(())
    })?;
    file.flush()?;
    session.checkpoint().save(&out.join(CHECKPOINT_DIR))?;
    let summary = TrainSummary { steps: session.step, train: session.evaluate("train")?, val: session.evaluate("val")? };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

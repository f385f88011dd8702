use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusedBatch, FusedModel, MaskPolicy, ModelSpec, Topology};
use crate::numeric::{finite_diff_grad, max_relative_error, Graph, Tensor, RELATIVE_ERROR_FLOOR};
use crate::objective::{task_loss, total_loss, LossConfig, Target, TaskKind};
use crate::synth::{generate, DataConfig};
use crate::transformer::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub variant: String,
    pub group: String,
    pub scalars: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
    pub worst: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let bad: Vec<String> = self
                .groups
                .iter()
                .filter(|g| g.max_relative_error >= self.tolerance)
                .map(|g| format!("{}/{} {:.3e}", g.variant, g.group, g.max_relative_error))
                .collect();
            Err(Error::Oracle(format!("gradient check above {:e}: {}", self.tolerance, bad.join(", "))))
        }
    }
}

fn is_index(part: &str) -> bool {
    let rest = part.strip_prefix("layer").or_else(|| part.strip_prefix('l')).or_else(|| part.strip_prefix('m'));
    rest.is_some_and(|r| !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()))
}

/// Parameter name without modality and layer indices.
fn group_of(name: &str) -> String {
    name.split('.')
        .filter(|part| !is_index(part))
        .collect::<Vec<_>>()
        .join(".")
}

/// Model layout of `cfg` at most 8 tokens per stack, 2 layers and width 16.
fn reduced_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let mut small = cfg.clone();
    small.paths.data = None;
    match &mut small.data {
        DataConfig::Homogeneous(d) => {
            d.grid = 2;
            d.train_samples = 1;
            d.val_samples = 1;
        }
        DataConfig::Heterogeneous(d) => {
            d.points = d.points.min(8);
            d.image_width = 2 * d.patch;
            d.image_height = 2 * d.patch;
            d.train_samples = 1;
            d.val_samples = 1;
        }
    }
    let m = &mut small.model;
    m.dim = m.dim.min(16);
    m.heads = (1..=m.heads.min(m.dim)).rev().find(|h| m.dim % h == 0).unwrap_or(1);
    m.layers = m.layers.min(2);
    m.point_layers = m.point_layers.map(|l| l.min(2));
    m.image_layers = m.image_layers.map(|l| l.min(2));
    let ds = generate(&small.data)?;
    let mut spec = small.model_spec(&ds)?;
    if spec.topology == Topology::Homogeneous {
        let n = match &cfg.data {
            DataConfig::Homogeneous(d) => d.tokens().min(8),
            _ => unreachable!(),
        };
        spec.stacks.iter_mut().for_each(|s| s.tokens = n);
    }
    spec.validate()?;
    Ok(spec)
}

struct Problem {
    model: FusedModel,
    store: ParamStore<f64>,
    batch: FusedBatch<f64>,
    targets: Vec<Target<f64>>,
    policy: MaskPolicy,
    loss: LossConfig,
}

impl Problem {
    fn build(spec: ModelSpec, task: TaskKind, zero: bool, seed: u64) -> Result<Problem> {
        let (model, mut store) = FusedModel::build::<f64>(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        };
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = if zero { 0.0 } else { *v + normal(0.3) });
        }
        let batch_size = 2;
        let inputs: Vec<Tensor<f64>> = model
            .spec
            .stacks
            .iter()
            .map(|s| Tensor::from_fn(&[batch_size * s.tokens, s.in_channels], |_| normal(1.0)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
        let correspondence = (model.spec.topology == Topology::Heterogeneous).then(|| {
            let patches = model.spec.stacks[1].tokens;
            (0..batch_size * model.spec.stacks[0].tokens)
                .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..patches)))
                .collect()
        });
        let targets = model
            .spec
            .stacks
            .iter()
            .map(|s| match task {
                TaskKind::Mse => Target::Values(Tensor::from_fn(&[batch_size * s.tokens, s.out_dim], |_| rng.random_range(-1.0..1.0))),
                TaskKind::CrossEntropy => Target::Classes((0..batch_size * s.tokens).map(|_| rng.random_range(0..s.out_dim)).collect()),
            })
            .collect();
        let batch = FusedBatch { inputs, batch: batch_size, correspondence };
        let mut loss = LossConfig::new(task, model.modalities());
        loss.lambda_token = 0.05;
        loss.lambda_channel = 0.01;

        // Masks drawn once at random, then held fixed so the objective is smooth.
        let policy = if model.modalities() > 1 {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Random { rate: 0.35, seed }, 0)?;
            let depth = model.spec.stacks.iter().map(|s| s.layers).max().unwrap_or(0);
            let mut masks: Vec<Vec<Vec<bool>>> = (0..depth)
                .map(|_| model.stacks.iter().map(|s| vec![false; batch_size * s.dims.tokens]).collect())
                .collect();
            for m in &out.masks {
                masks[m.layer - 1][m.modality] = m.substitute.clone();
            }
            MaskPolicy::Fixed(masks)
        } else {
            MaskPolicy::Disabled
        };
        Ok(Problem { model, store, batch, targets, policy, loss })
    }

    fn loss_value(&self, store: &ParamStore<f64>, detached: Option<(ParamId, Tensor<f64>)>) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind_with_detached(&mut g, detached.into_iter().collect());
        let total = self.objective(&mut g, &p)?;
        g.value(total).item()
    }

    fn objective(&self, g: &mut Graph<f64>, p: &crate::transformer::Bound) -> Result<crate::numeric::NodeId> {
        let out = self.model.forward(g, p, &self.batch, &self.policy, 0)?;
        let tasks = out
            .predictions
            .iter()
            .zip(&self.targets)
            .map(|(&pr, t)| task_loss(g, pr, t, self.loss.task))
            .collect::<Result<Vec<_>>>()?;
        let gammas: Vec<_> = self.model.ln_scales().iter().map(|&id| p.node(id)).collect();
        Ok(total_loss(g, &tasks, &out.scores, &gammas, &self.loss)?.total)
    }

    /// Max relative error per parameter group. Detached reads keep the
    /// unperturbed value, which is the function the analytic gradient describes.
    fn check(&self, variant: &str, out: &mut Vec<GroupError>) -> Result<()> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let total = self.objective(&mut g, &p)?;
        let mut grads = g.backward(total)?;
        let analytic = self.store.gradients(&mut grads, &p);
        let mut groups: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        let mut probe = self.store.clone();
        for (i, id) in self.store.ids().enumerate() {
            let original = self.store.get(id).clone();
            let numeric = finite_diff_grad(
                |x| {
                    *probe.get_mut(id) = x.clone();
                    self.loss_value(&probe, Some((id, original.clone())))
                },
                &original,
                FD_STEP,
            )?;
            *probe.get_mut(id) = original.clone();
            if !analytic[i].is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {}", self.store.name(id))));
            }
            let err = max_relative_error(&analytic[i], &numeric, RELATIVE_ERROR_FLOOR);
            let e = groups.entry(group_of(self.store.name(id))).or_insert((0, 0.0));
            e.0 += original.len();
            e.1 = e.1.max(err);
        }
        for (group, (scalars, err)) in groups {
            out.push(GroupError { variant: variant.into(), group, scalars, max_relative_error: err });
        }
        Ok(())
    }
}

/// Backward pass against central differences over every parameter group of
/// the reduced model, in three variants: as configured, without residual
/// connections, and with every weight zero.
pub fn grad_check(cfg: &ExperimentConfig, tolerance: f64) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let start = Instant::now();
    let spec = reduced_spec(cfg)?;
    let mut groups = Vec::new();
    let variants = [("default", spec.residuals, false), ("no_residuals", false, false), ("zero_params", spec.residuals, true)];
    for (name, residuals, zero) in variants {
        let spec = ModelSpec { residuals, ..spec.clone() };
        let problem = Problem::build(spec, cfg.loss.task, zero, cfg.seed ^ 0x9c)?;
        problem.check(name, &mut groups)?;
    }
    let worst = groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tolerance, groups, worst, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_drop_indices() {
        assert_eq!(group_of("m1.layer0.msa.q.weight"), "msa.q.weight");
        assert_eq!(group_of("adapter.img2pt.l1.fc1.bias"), "adapter.img2pt.fc1.bias");
        assert_eq!(group_of("m0.pe.table"), "pe.table");
        assert_eq!(group_of("m0.ln1"), "ln1");
    }
}

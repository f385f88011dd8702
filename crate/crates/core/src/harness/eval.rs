use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::DataView;
use super::train::{forward_loss, layer_stats, LayerStat};
use crate::error::{Error, Result};
use crate::fusion::{FusedModel, Topology};
use crate::objective::Target;
use crate::transformer::ParamStore;

/// Forward-only metrics over a whole split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: String,
    pub samples: usize,
    /// Per-modality task loss (MSE or cross-entropy), averaged over tokens.
    pub task: Vec<f64>,
    /// Homogeneous: loss of the mean prediction over modalities.
    pub ensemble: Option<f64>,
    /// Cross-entropy: token accuracy of the mean logits.
    pub accuracy: Option<f64>,
    /// Token-sparsity term per sample.
    pub token_l1: f64,
    pub channel_l1: f64,
    pub layers: Vec<LayerStat>,
    /// Homogeneous: share of substituted tokens that the generator hid from their modality.
    pub hidden_precision: Option<f64>,
    pub substituted_tokens: usize,
}

#[derive(Clone, Debug, Default)]
struct Shard {
    rows: Vec<usize>,
    task: Vec<f64>,
    ens_rows: usize,
    ensemble: f64,
    correct: usize,
    token_l1: f64,
    channel_l1: f64,
    /// Per (layer, modality): score sum, score count, applied, prunable.
    layers: Vec<(usize, usize, bool, f64, usize, usize, usize)>,
    hidden_hits: usize,
    substituted: usize,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Summed squared error or summed negative log-likelihood over rows.
fn error_sum(pred: &[f64], cols: usize, target: &Target<f64>) -> (f64, usize) {
    match target {
        Target::Values(t) => (pred.iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum(), t.len()),
        Target::Classes(c) => {
            let s = c.iter().enumerate().map(|(r, &k)| -log_softmax_row(&pred[r * cols..(r + 1) * cols])[k]).sum();
            (s, c.len())
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn shard(model: &FusedModel, store: &ParamStore<f64>, view: &DataView<'_>, cfg: &ExperimentConfig, index: usize, samples: &[usize]) -> Result<Shard> {
    let batch = view.batch(samples)?;
    let ev = forward_loss(model, store, &batch, &cfg.policy(), index as u64, &cfg.loss_config(), false)?;
    let g = &ev.graph;
    let mut sh = Shard::default();
    let mut preds = Vec::new();
    for (m, (&p, t)) in ev.out.predictions.iter().zip(&batch.targets).enumerate() {
        let v = g.value(p);
        let (s, rows) = error_sum(v.data(), v.cols(), t);
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss of modality {m}")));
        }
        sh.task.push(s);
        sh.rows.push(rows);
        preds.push(v);
    }
    if model.spec.topology == Topology::Homogeneous {
        let cols = preds[0].cols();
        let k = preds.len() as f64;
        let mean: Vec<f64> = (0..preds[0].len()).map(|i| preds.iter().map(|p| p.data()[i]).sum::<f64>() / k).collect();
        let (s, rows) = error_sum(&mean, cols, &batch.targets[0]);
        sh.ensemble = s;
        sh.ens_rows = rows;
        if let Target::Classes(c) = &batch.targets[0] {
            sh.correct = c.iter().enumerate().filter(|(r, &k)| argmax(&mean[r * cols..(r + 1) * cols]) == k).count();
        }
    }
    sh.token_l1 = g.value(ev.terms.token).item()? * samples.len() as f64;
    sh.channel_l1 = g.value(ev.terms.channel).item()?;
    for (stat, mask) in layer_stats(&ev).iter().zip(&ev.out.masks) {
        let score = ev.out.scores.iter().find(|s| s.layer == stat.layer && s.modality == stat.modality);
        let (ssum, scount) = score.map_or((0.0, 0), |s| {
            let v = s.values(g);
            (v.iter().sum(), v.len())
        });
        let applied = mask.applied.iter().filter(|&&a| a).count();
        sh.layers.push((stat.layer, stat.modality, score.is_some(), ssum, scount, applied, mask.prunable));
    }
    if let Some(hidden) = view.hidden_rows(samples) {
        for mask in &ev.out.masks {
            for (r, &a) in mask.applied.iter().enumerate() {
                if a {
                    sh.substituted += 1;
                    sh.hidden_hits += hidden[mask.modality][r] as usize;
                }
            }
        }
    } else {
        sh.substituted = ev.out.masks.iter().map(|m| m.applied.iter().filter(|&&a| a).count()).sum();
    }
    Ok(sh)
}

/// Evaluates `view` in consecutive shards of `optim.batch_size` samples.
/// Shards are computed in parallel when `optim.parallel_eval` is set and
/// always reduced in shard order, so both modes agree bitwise.
pub fn evaluate_view(model: &FusedModel, store: &ParamStore<f64>, view: &DataView<'_>, cfg: &ExperimentConfig, split: &str) -> Result<EvalMetrics> {
    let n = view.samples();
    let b = cfg.optim.batch_size;
    let chunks: Vec<Vec<usize>> = (0..n.div_ceil(b)).map(|i| (i * b..((i + 1) * b).min(n)).collect()).collect();
    let run = |(i, c): (usize, &Vec<usize>)| shard(model, store, view, cfg, i, c);
    let shards: Vec<Shard> = if cfg.optim.parallel_eval {
        chunks.par_iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        chunks.iter().enumerate().map(run).collect::<Result<_>>()?
    };

    let mm = shards[0].task.len();
    let mut task = vec![0.0; mm];
    let mut rows = vec![0usize; mm];
    let (mut ens, mut ens_rows, mut correct, mut token, mut hits, mut subs) = (0.0, 0usize, 0usize, 0.0, 0usize, 0usize);
    let mut channel = 0.0;
    let mut layers = shards[0].layers.clone();
    layers.iter_mut().for_each(|l| (l.3, l.4, l.5, l.6) = (0.0, 0, 0, 0));
    for sh in &shards {
        for m in 0..mm {
            task[m] += sh.task[m];
            rows[m] += sh.rows[m];
        }
        ens += sh.ensemble;
        ens_rows += sh.ens_rows;
        correct += sh.correct;
        token += sh.token_l1;
        channel = sh.channel_l1;
        hits += sh.hidden_hits;
        subs += sh.substituted;
        for (acc, l) in layers.iter_mut().zip(&sh.layers) {
            acc.3 += l.3;
            acc.4 += l.4;
            acc.5 += l.5;
            acc.6 += l.6;
        }
    }
    let homogeneous = model.spec.topology == Topology::Homogeneous;
    let classes = matches!(cfg.loss.task, crate::objective::TaskKind::CrossEntropy);
    Ok(EvalMetrics {
        split: split.to_string(),
        samples: n,
        task: task.iter().zip(&rows).map(|(s, &r)| s / r as f64).collect(),
        ensemble: homogeneous.then(|| ens / ens_rows as f64),
        accuracy: (homogeneous && classes).then(|| correct as f64 / ens_rows as f64),
        token_l1: token / n as f64,
        channel_l1: channel,
        layers: layers
            .iter()
            .map(|&(layer, modality, scored, ssum, scount, applied, prunable)| LayerStat {
                layer,
                modality,
                mean_score: scored.then(|| ssum / scount as f64),
                substituted: applied as f64 / prunable as f64,
            })
            .collect(),
        hidden_precision: (!view.split.hidden.is_empty() && subs > 0).then(|| hits as f64 / subs as f64),
        substituted_tokens: subs,
    })
}

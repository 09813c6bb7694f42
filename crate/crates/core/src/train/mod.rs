//! Optimization loop, schedules, evaluation and the per-epoch run log.

mod schedule;
mod sgd;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use schedule::TrainSchedule;
pub use sgd::{sgd_step, SgdState};

use crate::data::{BatchStream, DatasetRecord, Normalization};
use crate::error::{Error, Result};
use crate::inference::{metrics_from_logits, InferenceMode, Metrics};
use crate::model::checkpoint::{self, CheckpointMeta, CHECKPOINT_VERSION};
use crate::model::{combined_loss, Heads, LossBreakdown, SgnetModel};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Graph, Real};

/// Logits of a whole record set, row-major per sample.
#[derive(Debug, Clone)]
pub struct Logits<T> {
    /// Empty when the super head was skipped.
    pub super_logits: Vec<T>,
    pub finer_logits: Vec<T>,
    pub labels: Vec<usize>,
    pub seconds: f64,
}

/// Runs the model over `records` in order.
pub fn collect_logits<T: Real>(
    model: &SgnetModel<T>,
    records: &[DatasetRecord],
    normalization: Normalization,
    batch_size: usize,
    heads: Heads,
) -> Result<Logits<T>> {
    let stream = BatchStream::evaluation(batch_size.max(1), normalization);
    let batches = stream.batches::<T>(records, 0);
    let start = Instant::now();
    let mut out = Logits {
        super_logits: Vec::new(),
        finer_logits: Vec::new(),
        labels: Vec::new(),
        seconds: 0.0,
    };
    for b in batches {
        let (s, f) = model.logits(&b.images, heads)?;
        if let Some(s) = s {
            out.super_logits.extend_from_slice(s.data());
        }
        out.finer_logits.extend_from_slice(f.data());
        out.labels.extend(b.labels);
    }
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Metrics of one inference mode over one record set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeEval {
    pub mode: InferenceMode,
    pub metrics: Metrics,
    /// Wall time per sample, forward pass included.
    pub seconds_per_sample: f64,
}

/// Evaluates `mode`; DI skips the super-class head.
pub fn evaluate<T: Real>(
    model: &SgnetModel<T>,
    records: &[DatasetRecord],
    taxonomy: &Taxonomy,
    normalization: Normalization,
    batch_size: usize,
    mode: InferenceMode,
) -> Result<ModeEval> {
    if mode == InferenceMode::Tsi && !model.config().has_scb() {
        return Err(Error::Usage(format!(
            "two-step inference needs a super-class head; \"{}\" has none",
            model.config().name
        )));
    }
    let heads = match mode {
        InferenceMode::Tsi => Heads::Both,
        InferenceMode::Di => Heads::FinerOnly,
    };
    let start = Instant::now();
    let l = collect_logits(model, records, normalization, batch_size, heads)?;
    let metrics = metrics_from_logits(mode, &l.super_logits, &l.finer_logits, &l.labels, taxonomy)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(ModeEval {
        mode,
        metrics,
        seconds_per_sample: elapsed / records.len() as f64,
    })
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub set: String,
    pub eval: ModeEval,
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    /// Rate of the epoch's last step.
    pub lr: f64,
    /// Sample-weighted means over the epoch.
    pub loss_total: f64,
    pub loss_fc: f64,
    pub loss_sc: f64,
    pub eval: Vec<EvalEntry>,
    pub wall_time_s: f64,
}

impl EpochEntry {
    pub fn metrics(&self, set: &str, mode: InferenceMode) -> Option<&Metrics> {
        self.eval
            .iter()
            .find(|e| e.set == set && e.eval.mode == mode)
            .map(|e| &e.eval.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_digest: String,
    pub alpha: Option<f64>,
    pub epochs: Vec<EpochEntry>,
    pub steps: Vec<StepRecord>,
    /// Epoch of the best DI finer accuracy on the first evaluation set.
    pub best_epoch: Option<usize>,
}

impl RunLog {
    /// Per-step total losses, the determinism fingerprint of a run.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }

    /// One row per epoch, preceded by `#` lines carrying the digest and seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_digest={}", self.config_digest);
        let _ = writeln!(out, "# seed={}", self.seed);
        let mut header = String::from("epoch,lr,loss_total,loss_fc,loss_sc");
        if let Some(first) = self.epochs.first() {
            for e in &first.eval {
                let tag = format!("{}_{}", e.set, e.eval.mode.to_string().to_lowercase());
                let _ = write!(header, ",{tag}_finer_top1,{tag}_super_top1,{tag}_serious_error_rate");
            }
        }
        header.push_str(",wall_time_s");
        out.push_str(&header);
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{},{},{},{}", e.epoch, e.lr, e.loss_total, e.loss_fc, e.loss_sc);
            for ev in &e.eval {
                let m = &ev.eval.metrics;
                let _ = write!(out, ",{},{},{}", m.finer_top1, m.super_top1, m.serious_error_rate);
            }
            let _ = writeln!(out, ",{:.3}", e.wall_time_s);
        }
        out
    }
}

/// Min-max scaled epoch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub values: Vec<f64>,
    /// Set when every epoch had the same loss; `values` are then all zero.
    pub degenerate: bool,
}

pub fn normalize_series(losses: &[f64]) -> Result<LossCurve> {
    if losses.len() < 2 {
        return Err(Error::validation(format!(
            "loss curve needs at least 2 epochs, got {}",
            losses.len()
        )));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Ok(LossCurve {
            values: vec![0.0; losses.len()],
            degenerate: true,
        });
    }
    Ok(LossCurve {
        values: losses.iter().map(|l| (l - min) / (max - min)).collect(),
        degenerate: false,
    })
}

/// Min-max normalization of the per-epoch total loss.
pub fn normalize_loss_curve(log: &RunLog) -> Result<LossCurve> {
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.loss_total).collect();
    normalize_series(&losses)
}

/// Everything [`train`] needs besides the model and training records.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub schedule: &'a TrainSchedule,
    pub taxonomy: &'a Taxonomy,
    pub alpha: f64,
    pub seed: u64,
    pub augment: bool,
    pub normalization: Normalization,
    /// Named sets evaluated after every epoch in both modes. The first one
    /// selects the best checkpoint.
    pub eval_sets: Vec<(String, &'a [DatasetRecord])>,
    /// Writes `latest` and `best` checkpoints here when set.
    pub checkpoint_dir: Option<PathBuf>,
    pub config_digest: String,
}

/// One training step's loss node for either an SGNet or a baseline config.
fn step_loss(
    g: &mut Graph<f32>,
    model: &SgnetModel<f32>,
    bound: &[crate::tensor::NodeId],
    images: crate::tensor::Tensor<f32>,
    labels: &[usize],
    taxonomy: &Taxonomy,
    alpha: f64,
) -> Result<(crate::tensor::NodeId, LossBreakdown)> {
    let x = g.input(images);
    let out = model.forward(g, bound, x, Heads::Both)?;
    if out.super_logits.is_some() {
        return combined_loss(g, &out, labels, taxonomy, alpha);
    }
    let loss = g.cross_entropy(out.finer_logits, labels)?;
    let v = g.value(loss).item() as f64;
    Ok((
        loss,
        LossBreakdown {
            total: v,
            loss_fc: v,
            loss_sc: 0.0,
            loss_bbox: 0.0,
            alpha: None,
        },
    ))
}

/// Trains `model` in place. `on_epoch` sees each entry as it is appended.
pub fn train(
    model: &mut SgnetModel<f32>,
    records: &[DatasetRecord],
    setup: &TrainSetup<'_>,
    mut on_epoch: impl FnMut(&EpochEntry),
) -> Result<RunLog> {
    let s = setup.schedule;
    s.validate()?;
    model.config().validate()?;
    if records.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let t = setup.taxonomy;
    if t.num_finer() != model.config().num_finer || t.num_super() != model.config().num_super {
        return Err(Error::config(format!(
            "taxonomy has {}/{} super/finer classes but the architecture expects {}/{}",
            t.num_super(),
            t.num_finer(),
            model.config().num_super,
            model.config().num_finer
        )));
    }
    let stream = BatchStream::training(s.batch_size, setup.seed, setup.augment, setup.normalization);
    let steps_per_epoch = records.len().div_ceil(s.batch_size);
    let mut state = SgdState::new();
    let mut log = RunLog {
        seed: setup.seed,
        config_digest: setup.config_digest.clone(),
        alpha: model.config().has_scb().then_some(setup.alpha),
        epochs: Vec::new(),
        steps: Vec::new(),
        best_epoch: None,
    };
    let mut best_acc = f64::NEG_INFINITY;
    let modes: &[InferenceMode] = if model.config().has_scb() {
        &InferenceMode::BOTH
    } else {
        &[InferenceMode::Di]
    };

    for epoch in 0..s.total_epochs {
        let start = Instant::now();
        let (mut sum_total, mut sum_fc, mut sum_sc) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (step, batch) in stream.batches::<f32>(records, epoch).into_iter().enumerate() {
            lr = s.lr_at(epoch, step, steps_per_epoch);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let n = batch.labels.len() as f64;
            let (loss, br) = step_loss(&mut g, model, &bound, batch.images, &batch.labels, t, setup.alpha)?;
            if !br.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    lr,
                    detail: format!("loss_fc = {}, loss_sc = {}", br.loss_fc, br.loss_sc),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = bound.iter().map(|&id| g.grad_or_zeros(id).into_data()).collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            sgd_step(model.params_mut(), &grad_refs, lr, s.momentum, s.weight_decay, &mut state)?;
            sum_total += br.total * n;
            sum_fc += br.loss_fc * n;
            sum_sc += br.loss_sc * n;
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: br,
            });
        }
        if !model.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: steps_per_epoch - 1,
                lr,
                detail: "parameters became non-finite".into(),
            });
        }
        let n = records.len() as f64;
        let mut eval = Vec::new();
        for (name, set) in &setup.eval_sets {
            for &mode in modes {
                let e = evaluate(model, set, t, setup.normalization, s.batch_size.max(64), mode)?;
                eval.push(EvalEntry {
                    set: name.clone(),
                    eval: e,
                });
            }
        }
        let entry = EpochEntry {
            epoch,
            lr,
            loss_total: sum_total / n,
            loss_fc: sum_fc / n,
            loss_sc: sum_sc / n,
            eval,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let primary = entry
            .eval
            .iter()
            .find(|e| e.eval.mode == InferenceMode::Di)
            .map(|e| e.eval.metrics.finer_top1);
        let improved = primary.is_some_and(|a| a > best_acc);
        if improved {
            best_acc = primary.unwrap_or(best_acc);
            log.best_epoch = Some(epoch);
        }
        if let Some(dir) = &setup.checkpoint_dir {
            let meta = CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                config: model.config().clone(),
                taxonomy: t.to_json(),
                normalization: setup.normalization,
                epoch,
                seed: setup.seed,
                config_digest: setup.config_digest.clone(),
            };
            checkpoint::save(&dir.join("latest"), model, &meta)?;
            if improved {
                checkpoint::save(&dir.join("best"), model, &meta)?;
            }
        }
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_curve_examples() {
        let c = normalize_series(&[4.0, 3.0, 2.0]).unwrap();
        assert_eq!(c.values, vec![1.0, 0.5, 0.0]);
        assert!(!c.degenerate);
        let c = normalize_series(&[2.0, 2.0]).unwrap();
        assert_eq!(c.values, vec![0.0, 0.0]);
        assert!(c.degenerate);
        assert!(normalize_series(&[1.0]).is_err());
    }
}

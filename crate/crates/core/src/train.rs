//! AdamW, the warmup + inverse-sqrt learning-rate schedule, and the seeded
//! training loop with metric and memory-snapshot emission.
//!
//! Determinism contract: every random draw comes from a stream derived from
//! (seed, step, purpose), batch samples run in parallel but merge in slot
//! order, and metric records carry wall time 0.0 unless walltime logging is
//! switched on. Identical (config, seed) therefore reproduce bit-identical
//! logs and checkpoints, and a resumed run continues the exact stream of an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Dropout, Model};
use crate::checkpoint::{self, ArrayData, NamedArray};
use crate::diagnostics::attention_entropy;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{FlopCounter, Graph};
use crate::params::{seeded_rng, Parameters};
use crate::tasks::{Dataset, SequenceSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Memory snapshot cadence in steps (0 disables snapshots).
    #[serde(default)]
    pub snapshot_every: u64,
    /// Evaluation/metric cadence in steps (0 = only at the final step).
    #[serde(default)]
    pub eval_every: u64,
    /// Optional global-norm gradient clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Stop once validation accuracy reaches this value.
    #[serde(default)]
    pub early_stop_accuracy: Option<f64>,
    /// Record elapsed seconds in metric records (off by default so that
    /// identical runs produce byte-identical logs).
    #[serde(default)]
    pub log_walltime: bool,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::config("train: base_lr must be positive".to_string()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::config("train: warmup_steps must be >= 1".to_string()));
        }
        if self.total_steps > 0 && self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "train: warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train: batch_size must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train: betas must lie in [0, 1)".to_string()));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("train: adam_eps must be > 0 and weight_decay >= 0".to_string()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::config("train: grad_clip must be positive".to_string()));
            }
        }
        Ok(())
    }
}

/// base_lr · min(1, step/warmup) · 1/√(max(step, warmup)).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    assert!(step >= 1, "lr_at is defined for step >= 1");
    let warmup = cfg.warmup_steps as f64;
    let warmup_mul = (step as f64 / warmup).min(1.0);
    cfg.base_lr * warmup_mul / (step.max(cfg.warmup_steps) as f64).sqrt()
}

/// First/second moment estimates per parameter plus the step counter.
pub struct OptimizerState<E: Elem> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    pub t: u64,
}

impl<E: Elem> OptimizerState<E> {
    pub fn new(params: &Parameters<E>) -> Self {
        OptimizerState { m: params.zeroed_grads(), v: params.zeroed_grads(), t: 0 }
    }
}

/// One decoupled-weight-decay Adam step:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², bias-corrected m̂, v̂,
/// θ ← θ − lr·(m̂/(√v̂+ε) + λθ). Norm gains/biases, plain biases and τ are
/// exempt from decay; non-trainable parameters are left untouched.
pub fn adamw_step<E: Elem>(
    params: &mut Parameters<E>,
    grads: &[Vec<E>],
    state: &mut OptimizerState<E>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::usage(format!(
            "adamw_step: {} gradient buffers for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let beta1 = E::from_f64(cfg.beta1);
    let beta2 = E::from_f64(cfg.beta2);
    let one_minus_beta1 = E::from_f64(1.0 - cfg.beta1);
    let one_minus_beta2 = E::from_f64(1.0 - cfg.beta2);
    let corr1 = E::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let corr2 = E::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let eps = E::from_f64(cfg.adam_eps);
    let lr_e = E::from_f64(lr);

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get(id);
        if !p.trainable {
            continue;
        }
        let g = &grads[id.index()];
        if g.len() != p.numel() {
            return Err(Error::usage(format!(
                "adamw_step: gradient missing or misshaped for parameter {} ({} values for {})",
                p.name,
                g.len(),
                p.numel()
            )));
        }
        let lambda = if p.kind.decays() { E::from_f64(cfg.weight_decay) } else { E::zero() };
        let idx = id.index();
        let p = params.get_mut(id);
        for i in 0..g.len() {
            let m = beta1 * state.m[idx][i] + one_minus_beta1 * g[i];
            let v = beta2 * state.v[idx][i] + one_minus_beta2 * g[i] * g[i];
            state.m[idx][i] = m;
            state.v[idx][i] = v;
            let m_hat = m * corr1;
            let v_hat = v * corr2;
            let theta = p.data[i];
            p.data[i] = theta - lr_e * (m_hat / (v_hat.sqrt() + eps) + lambda * theta);
        }
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm<E: Elem>(grads: &mut [Vec<E>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let x = v.to_f64();
            x * x
        })
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
}

// ── Metric log ──────────────────────────────────────────────────────

/// One line of the metric log: step, split, metric name, value, wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub wall: f64,
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(line)
                .map_err(|e| Error::input(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(records)
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub snapshots_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub resume_checkpoint: PathBuf,
    pub records: Vec<MetricRecord>,
    pub final_step: u64,
    pub final_val_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
}

pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n: usize,
}

fn check_dataset<E: Elem>(model: &Model<E>, ds: &Dataset, name: &str) -> Result<()> {
    if ds.vocab_size > model.cfg.vocab_size {
        return Err(Error::config(format!(
            "{name}: dataset vocab {} exceeds model vocab {}",
            ds.vocab_size, model.cfg.vocab_size
        )));
    }
    if ds.num_classes != model.cfg.num_classes {
        return Err(Error::config(format!(
            "{name}: dataset has {} classes, model {}",
            ds.num_classes, model.cfg.num_classes
        )));
    }
    if ds.dual_input != model.cfg.dual_input {
        return Err(Error::config(format!(
            "{name}: dataset dual_input={} but model dual_input={}",
            ds.dual_input, model.cfg.dual_input
        )));
    }
    for (i, s) in ds.samples.iter().enumerate() {
        let longest = s.tokens.len().max(s.second.as_ref().map_or(0, |t| t.len()));
        if longest > model.cfg.max_len {
            return Err(Error::input(format!(
                "{name}: sample {i} has {longest} tokens, model max_len {}",
                model.cfg.max_len
            )));
        }
    }
    Ok(())
}

fn sample_mask(s: &SequenceSample) -> Option<&[bool]> {
    if s.mask.iter().all(|&v| v) {
        None
    } else {
        Some(&s.mask)
    }
}

fn forward_sample<E: Elem>(
    model: &Model<E>,
    g: &mut Graph<E>,
    s: &SequenceSample,
    dropout: &mut Dropout,
) -> Result<crate::blocks::ForwardOutput> {
    match (&s.second, model.cfg.dual_input) {
        (Some(second), true) => model.forward_pair(
            g,
            (&s.tokens, sample_mask(s)),
            (second, None),
            dropout,
        ),
        (None, false) => model.forward(g, &s.tokens, sample_mask(s), dropout),
        _ => Err(Error::config("sample/model dual_input mismatch".to_string())),
    }
}

struct SamplePass<E: Elem> {
    loss: f64,
    grads: Vec<Vec<E>>,
    flops: FlopCounter,
}

fn train_sample_pass<E: Elem>(
    model: &Model<E>,
    sample: &SequenceSample,
    batch_size: usize,
    step: u64,
    slot: usize,
    cfg: &TrainConfig,
) -> Result<SamplePass<E>> {
    let mut rng = seeded_rng(cfg.seed, &[0xd607, step, slot as u64]);
    let mut dropout = Dropout::new(model.cfg.dropout, &mut rng);
    let mut g: Graph<E> = Graph::new();
    let out = forward_sample(model, &mut g, sample, &mut dropout)?;
    let ce = g.cross_entropy(out.logits, &[sample.label])?;
    let scaled = g.scale(ce, E::from_f64(1.0 / batch_size as f64));
    g.backward(scaled)?;
    let mut grads = model.params.zeroed_grads();
    g.accumulate_param_grads(&mut grads);
    Ok(SamplePass { loss: g.scalar_value(ce).to_f64(), grads, flops: g.flops.clone() })
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

/// Accuracy and mean loss over a dataset (evaluation mode, no dropout).
pub fn evaluate<E: Elem>(model: &Model<E>, ds: &Dataset) -> Result<EvalReport> {
    check_dataset(model, ds, "eval")?;
    if ds.samples.is_empty() {
        return Err(Error::usage("evaluate: empty dataset".to_string()));
    }
    let results: Vec<Result<(bool, f64)>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let mut g: Graph<E> = Graph::new();
            let out = forward_sample(model, &mut g, s, &mut Dropout::off())?;
            let logits: Vec<f64> = g.data(out.logits).iter().map(|&v| Elem::to_f64(v)).collect();
            let ce = g.cross_entropy(out.logits, &[s.label])?;
            Ok((argmax(&logits) == s.label, g.scalar_value(ce).to_f64()))
        })
        .collect();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for r in results {
        let (ok, l) = r?;
        correct += usize::from(ok);
        loss += l;
    }
    let n = ds.samples.len();
    Ok(EvalReport { accuracy: correct as f64 / n as f64, mean_loss: loss / n as f64, n })
}

/// Mean normalized entropy of each block's primary attention over a few
/// validation samples, in block order.
fn entropy_probe<E: Elem>(model: &Model<E>, ds: &Dataset, max_samples: usize) -> Result<Vec<f64>> {
    let n_blocks = model.cfg.blocks;
    let mut sums = vec![0.0; n_blocks];
    let mut counts = vec![0usize; n_blocks];
    for s in ds.samples.iter().take(max_samples) {
        let mut g: Graph<E> = Graph::new();
        let out = forward_sample(model, &mut g, s, &mut Dropout::off())?;
        for (bi, probe) in out.probes.iter().take(n_blocks).enumerate() {
            for &probs in &probe.primary_probs {
                let (rows, keys) = g.shape(probs);
                let mut data: Vec<f64> = g.data(probs).iter().map(|&v| Elem::to_f64(v)).collect();
                // standard-precision rows may be off 1 by more than the
                // entropy op's input gate once widened to f64; renormalize
                for row in data.chunks_mut(keys) {
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= sum);
                }
                sums[bi] += attention_entropy(&data, rows, keys)?;
                counts[bi] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

struct MetricWriter {
    file: fs::File,
    records: Vec<MetricRecord>,
    start: Instant,
    log_walltime: bool,
}

impl MetricWriter {
    fn new(path: &Path, append: bool, log_walltime: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        Ok(MetricWriter { file, records: Vec::new(), start: Instant::now(), log_walltime })
    }

    fn emit(&mut self, step: u64, split: &str, metric: &str, value: f64) -> Result<()> {
        let wall = if self.log_walltime { self.start.elapsed().as_secs_f64() } else { 0.0 };
        let record = MetricRecord {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            wall,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::usage(format!("metric serialization: {e}")))?;
        writeln!(self.file, "{line}")?;
        self.records.push(record);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

const ENTROPY_PROBE_SAMPLES: usize = 8;

/// Run `cfg.total_steps` optimization steps from scratch.
pub fn train<E: Elem>(
    model: &mut Model<E>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    let mut state = OptimizerState::new(&model.params);
    run_training(model, train_set, val_set, cfg, run_dir, &mut state, 0, false)
}

/// Continue a run from its resume checkpoint; the continuation is
/// bit-identical to the uninterrupted run.
pub fn resume<E: Elem>(
    model: &mut Model<E>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    let resume_path = run_dir.join("checkpoints").join("resume.ckpt");
    let mut state = OptimizerState::new(&model.params);
    let start_step = load_resume_state(model, &mut state, &resume_path)?;
    run_training(model, train_set, val_set, cfg, run_dir, &mut state, start_step, true)
}

#[allow(clippy::too_many_arguments)]
fn run_training<E: Elem>(
    model: &mut Model<E>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    run_dir: &Path,
    state: &mut OptimizerState<E>,
    start_step: u64,
    append_log: bool,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    check_dataset(model, train_set, "train")?;
    if !val_set.samples.is_empty() {
        check_dataset(model, val_set, "val")?;
    }
    if cfg.total_steps > start_step && train_set.samples.is_empty() {
        return Err(Error::config("train: empty training set".to_string()));
    }

    fs::create_dir_all(run_dir)?;
    let snapshots_dir = run_dir.join("snapshots");
    let checkpoints_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&snapshots_dir)?;
    fs::create_dir_all(&checkpoints_dir)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut writer = MetricWriter::new(&metrics_path, append_log, cfg.log_walltime)?;

    let final_path = checkpoints_dir.join("final.ckpt");
    let best_path = checkpoints_dir.join("best.ckpt");
    let resume_path = checkpoints_dir.join("resume.ckpt");

    let mut cumulative_flops = FlopCounter::default();
    let mut best_val: Option<f64> = None;
    let mut final_val: Option<f64> = None;
    let mut reached_step = start_step;

    for step in (start_step + 1)..=cfg.total_steps {
        // seeded batch assembly, independent of prior steps
        let mut batch_rng = seeded_rng(cfg.seed, &[0xba7c4, step]);
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rand::Rng::gen_range(&mut batch_rng, 0..train_set.samples.len()))
            .collect();

        let passes: Vec<Result<SamplePass<E>>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                train_sample_pass(model, &train_set.samples[idx], cfg.batch_size, step, slot, cfg)
            })
            .collect();

        let mut grads = model.params.zeroed_grads();
        let mut batch_loss = 0.0;
        for pass in passes {
            let pass = pass?;
            batch_loss += pass.loss / cfg.batch_size as f64;
            cumulative_flops.merge(&pass.flops);
            for (acc, g) in grads.iter_mut().zip(&pass.grads) {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }

        if !batch_loss.is_finite() {
            writer.emit(step, "train", "nan_abort", step as f64)?;
            writer.flush()?;
            return Err(Error::numeric(format!(
                "train: non-finite loss {batch_loss} at step {step}"
            )));
        }

        if let Some(max_norm) = cfg.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }

        // snapshot the block-1 memory input and its gradient before the update
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            if let Some(mem) = model.memory_param() {
                let p = model.params.get(mem);
                let snap_path = snapshots_dir.join(format!("step_{step:07}.ckpt"));
                let mut extra = BTreeMap::new();
                extra.insert("step".to_string(), step.to_string());
                extra.insert("block".to_string(), "0".to_string());
                checkpoint::write_arrays(
                    &snap_path,
                    &extra,
                    &[
                        NamedArray {
                            name: "memory.value".to_string(),
                            shape: p.shape.to_vec(),
                            data: ArrayData::from_elems(&p.data),
                        },
                        NamedArray {
                            name: "memory.grad".to_string(),
                            shape: p.shape.to_vec(),
                            data: ArrayData::from_elems(&grads[mem.index()]),
                        },
                    ],
                )?;
            }
        }

        let lr = lr_at(step, cfg);
        adamw_step(&mut model.params, &grads, state, lr, cfg)?;
        reached_step = step;

        let is_eval_step =
            (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps;
        if is_eval_step {
            writer.emit(step, "train", "loss", batch_loss)?;
            writer.emit(step, "train", "lr", lr)?;
            writer.emit(step, "train", "flops_total", cumulative_flops.total() as f64)?;
            for (bi, tau_id) in model.tau_params() {
                let tau = model.params.get(tau_id).data[0].to_f64();
                writer.emit(step, "train", &format!("tau.block{bi}"), tau)?;
            }
            if !val_set.samples.is_empty() {
                let report = evaluate(model, val_set)?;
                writer.emit(step, "val", "loss", report.mean_loss)?;
                writer.emit(step, "val", "accuracy", report.accuracy)?;
                for (bi, h) in entropy_probe(model, val_set, ENTROPY_PROBE_SAMPLES)?.iter().enumerate() {
                    writer.emit(step, "val", &format!("attn_entropy.block{bi}"), *h)?;
                }
                final_val = Some(report.accuracy);
                if best_val.map_or(true, |b| report.accuracy > b) {
                    best_val = Some(report.accuracy);
                    let mut extra = BTreeMap::new();
                    extra.insert("step".to_string(), step.to_string());
                    extra.insert("val_accuracy".to_string(), report.accuracy.to_string());
                    checkpoint::save_params(&model.params, &best_path, &extra)?;
                }
            }
            writer.flush()?;
            save_resume_state(model, state, step, &resume_path)?;
            if let (Some(target), Some(acc)) = (cfg.early_stop_accuracy, final_val) {
                if acc >= target {
                    break;
                }
            }
        }
    }

    let mut extra = BTreeMap::new();
    extra.insert("step".to_string(), reached_step.to_string());
    checkpoint::save_params(&model.params, &final_path, &extra)?;
    if !best_path.exists() {
        checkpoint::save_params(&model.params, &best_path, &extra)?;
    }
    save_resume_state(model, state, reached_step, &resume_path)?;
    writer.flush()?;

    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        metrics_path,
        snapshots_dir,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        resume_checkpoint: resume_path,
        records: writer.records,
        final_step: reached_step,
        final_val_accuracy: final_val,
        best_val_accuracy: best_val,
    })
}

fn save_resume_state<E: Elem>(
    model: &Model<E>,
    state: &OptimizerState<E>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut arrays: Vec<NamedArray> = model
        .params
        .iter()
        .map(|(_, p)| NamedArray {
            name: p.name.clone(),
            shape: p.shape.to_vec(),
            data: ArrayData::from_elems(&p.data),
        })
        .collect();
    for (id, p) in model.params.iter() {
        arrays.push(NamedArray {
            name: format!("optim.m.{}", p.name),
            shape: p.shape.to_vec(),
            data: ArrayData::from_elems(&state.m[id.index()]),
        });
        arrays.push(NamedArray {
            name: format!("optim.v.{}", p.name),
            shape: p.shape.to_vec(),
            data: ArrayData::from_elems(&state.v[id.index()]),
        });
    }
    let mut extra = BTreeMap::new();
    extra.insert("step".to_string(), step.to_string());
    extra.insert("optim_t".to_string(), state.t.to_string());
    checkpoint::write_arrays(path, &extra, &arrays)
}

fn load_resume_state<E: Elem>(
    model: &mut Model<E>,
    state: &mut OptimizerState<E>,
    path: &Path,
) -> Result<u64> {
    let (extra, arrays) = checkpoint::read_arrays(path)?;
    let by_name: std::collections::HashMap<&str, &NamedArray> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = model.params.get(id).name.clone();
        let value = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::input(format!("resume checkpoint missing {name}")))?;
        model.params.get_mut(id).data = value.data.to_elems::<E>()?;
        let m = by_name
            .get(format!("optim.m.{name}").as_str())
            .ok_or_else(|| Error::input(format!("resume checkpoint missing optimizer state for {name}")))?;
        let v = by_name
            .get(format!("optim.v.{name}").as_str())
            .ok_or_else(|| Error::input(format!("resume checkpoint missing optimizer state for {name}")))?;
        state.m[id.index()] = m.data.to_elems::<E>()?;
        state.v[id.index()] = v.data.to_elems::<E>()?;
    }
    state.t = extra
        .get("optim_t")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::input("resume checkpoint missing optim_t".to_string()))?;
    extra
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::input("resume checkpoint missing step".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Arch, ModelConfig};
    use crate::params::ParamKind;
    use crate::tasks::{gen_marker, TaskKind, TaskSpec};

    fn cfg(total: u64) -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            weight_decay: 0.01,
            warmup_steps: (total / 2).max(1),
            total_steps: total,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            snapshot_every: 0,
            eval_every: 0,
            grad_clip: None,
            early_stop_accuracy: None,
            log_walltime: false,
        }
    }

    #[test]
    fn lr_schedule_fixture_values() {
        let c = TrainConfig { base_lr: 0.01, warmup_steps: 700, ..cfg(10_000) };
        let expect = |step: u64| {
            0.01 * (step as f64 / 700.0).min(1.0) / (step.max(700) as f64).sqrt()
        };
        for step in [1u64, 350, 700, 10_000] {
            assert!((lr_at(step, &c) - expect(step)).abs() < 1e-18);
        }
        assert!((lr_at(700, &c) - 3.7796447300922724e-4).abs() < 1e-12);
        assert!((lr_at(350, &c) - 1.8898223650461362e-4).abs() < 1e-12);

        // step = warmup = 1 → exactly base_lr
        let c1 = TrainConfig { base_lr: 0.25, warmup_steps: 1, ..cfg(10) };
        assert_eq!(lr_at(1, &c1), 0.25);
    }

    #[test]
    fn lr_schedule_continuous_and_decreasing_after_warmup() {
        let c = TrainConfig { base_lr: 0.01, warmup_steps: 700, ..cfg(10_000) };
        // both formula branches agree at step = warmup
        let left = 0.01 * (700.0 / 700.0) / 700f64.sqrt();
        let right = 0.01 * 1.0 / 700f64.sqrt();
        assert_eq!(lr_at(700, &c), left);
        assert_eq!(left, right);
        for step in 700..800 {
            assert!(lr_at(step + 1, &c) < lr_at(step, &c));
        }
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let mut ps: Parameters<f64> = Parameters::new();
        let w = ps.register("w", 1, 1, ParamKind::Matrix, 0).unwrap();
        ps.get_mut(w).data = vec![0.0];
        let mut state = OptimizerState::new(&ps);
        let c = TrainConfig { weight_decay: 0.0, ..cfg(10) };
        let lr = 0.001;
        adamw_step(&mut ps, &[vec![1.0]], &mut state, lr, &c).unwrap();
        // t=1: m̂ = v̂ = 1 → θ' = −lr/(1+ε)
        let expected = -lr * (1.0 / (1.0 + 1e-8));
        assert!((ps.get(w).data[0] - expected).abs() < 1e-15);
        assert!((ps.get(w).data[0] + lr).abs() < 1e-10);
    }

    #[test]
    fn adamw_zero_grads_and_pure_decay() {
        let mut ps: Parameters<f64> = Parameters::new();
        let w = ps.register("w", 1, 2, ParamKind::Matrix, 0).unwrap();
        ps.get_mut(w).data = vec![1.0, -2.0];
        let mut state = OptimizerState::new(&ps);

        let c = TrainConfig { weight_decay: 0.0, ..cfg(10) };
        adamw_step(&mut ps, &[vec![0.0, 0.0]], &mut state, 0.5, &c).unwrap();
        assert_eq!(ps.get(w).data, vec![1.0, -2.0]);

        let c = TrainConfig { weight_decay: 0.1, ..cfg(10) };
        ps.get_mut(w).data = vec![1.0, 1.0];
        adamw_step(&mut ps, &[vec![0.0, 0.0]], &mut state, 0.5, &c).unwrap();
        // θ' = θ − lr·λ·θ = 1 − 0.05
        assert!((ps.get(w).data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adamw_skips_decay_for_exempt_kinds_and_frozen_params() {
        let mut ps: Parameters<f64> = Parameters::new();
        let gamma = ps.register("ln.gamma", 1, 1, ParamKind::NormGain, 0).unwrap();
        let tau = ps.register("tau", 1, 1, ParamKind::Tau, 0).unwrap();
        let frozen = ps.register("frozen", 1, 1, ParamKind::Matrix, 0).unwrap();
        ps.get_mut(gamma).data = vec![1.0];
        ps.get_mut(tau).data = vec![0.5];
        ps.get_mut(frozen).data = vec![3.0];
        ps.get_mut(frozen).trainable = false;
        let mut state = OptimizerState::new(&ps);
        let c = TrainConfig { weight_decay: 0.5, ..cfg(10) };
        let zero = vec![vec![0.0], vec![0.0], vec![0.0]];
        adamw_step(&mut ps, &zero, &mut state, 0.1, &c).unwrap();
        assert_eq!(ps.get(gamma).data, vec![1.0]);
        assert_eq!(ps.get(tau).data, vec![0.5]);
        assert_eq!(ps.get(frozen).data, vec![3.0]);
    }

    #[test]
    fn adamw_matches_reference_elementwise_implementation() {
        use rand::Rng;
        let mut ps: Parameters<f64> = Parameters::new();
        let w = ps.register("w", 3, 3, ParamKind::Matrix, 5).unwrap();
        let mut state = OptimizerState::new(&ps);
        let c = TrainConfig { weight_decay: 0.0, ..cfg(10) };

        // independent reference state
        let mut theta = ps.get(w).data.clone();
        let mut m = vec![0.0; 9];
        let mut v = vec![0.0; 9];

        let mut rng = crate::params::seeded_rng(3, &[1]);
        for t in 1..=5 {
            let g: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() - 0.5).collect();
            adamw_step(&mut ps, &[g.clone()], &mut state, 0.01, &c).unwrap();
            for i in 0..9 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                theta[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..9 {
                assert!((ps.get(w).data[i] - theta[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adamw_missing_grad_names_parameter() {
        let mut ps: Parameters<f64> = Parameters::new();
        ps.register("enc.weight", 2, 2, ParamKind::Matrix, 0).unwrap();
        let mut state = OptimizerState::new(&ps);
        let err = adamw_step(&mut ps, &[vec![0.0]], &mut state, 0.1, &cfg(10)).unwrap_err();
        assert!(err.to_string().contains("enc.weight"), "{err}");
    }

    fn tiny_setup() -> (ModelConfig, TaskSpec) {
        let model_cfg = ModelConfig {
            arch: Arch::Luna,
            blocks: 1,
            d: 8,
            h: 2,
            mlp_dim: 16,
            memory_size: Some(2),
            filter: crate::attention::FilterSpec::identity(),
            vocab_size: 16,
            max_len: 16,
            num_classes: 2,
            dropout: 0.1,
            pooling: None,
            dual_input: false,
            sharing: None,
        };
        let task = TaskSpec {
            kind: TaskKind::Marker,
            seed: 3,
            train_size: 32,
            val_size: 8,
            max_length: 16,
            min_length: 0,
            max_depth: 0,
            vocab_size: 16,
            num_classes: 2,
            dual_input: false,
            grid: 0,
            noise: 0.0,
            path: None,
        };
        (model_cfg, task)
    }

    #[test]
    fn zero_steps_returns_initial_checkpoint_and_empty_log() {
        let (model_cfg, task) = tiny_setup();
        let (train_set, val_set) = task.materialize().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut model: Model<f64> = Model::assemble(model_cfg, 1).unwrap();
        let initial: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| p.data.clone()).collect();
        let artifacts = train(&mut model, &train_set, &val_set, &cfg(0), dir.path()).unwrap();
        assert!(artifacts.records.is_empty());
        assert_eq!(fs::read_to_string(&artifacts.metrics_path).unwrap(), "");
        assert!(artifacts.final_checkpoint.exists());
        let after: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| p.data.clone()).collect();
        assert_eq!(initial, after);
    }

    #[test]
    fn identical_seeds_give_bit_identical_runs() {
        let (model_cfg, task) = tiny_setup();
        let (train_set, val_set) = task.materialize().unwrap();
        let mut c = cfg(6);
        c.eval_every = 3;
        c.snapshot_every = 2;

        let run = |dir: &Path| -> (Vec<u8>, Vec<u8>) {
            let mut model: Model<f32> = Model::assemble(model_cfg.clone(), 11).unwrap();
            let artifacts = train(&mut model, &train_set, &val_set, &c, dir).unwrap();
            (
                fs::read(&artifacts.metrics_path).unwrap(),
                fs::read(&artifacts.final_checkpoint).unwrap(),
            )
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (log1, ckpt1) = run(d1.path());
        let (log2, ckpt2) = run(d2.path());
        assert_eq!(log1, log2);
        assert_eq!(ckpt1, ckpt2);
        assert!(!log1.is_empty());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (model_cfg, task) = tiny_setup();
        let (train_set, val_set) = task.materialize().unwrap();
        let mut full_cfg = cfg(6);
        full_cfg.eval_every = 2;

        let d_full = tempfile::tempdir().unwrap();
        let mut full_model: Model<f64> = Model::assemble(model_cfg.clone(), 2).unwrap();
        let full = train(&mut full_model, &train_set, &val_set, &full_cfg, d_full.path()).unwrap();

        let d_split = tempfile::tempdir().unwrap();
        let mut half_cfg = full_cfg.clone();
        half_cfg.total_steps = 3;
        // eval_every=2 does not divide 3, but the final step always saves
        let mut split_model: Model<f64> = Model::assemble(model_cfg, 2).unwrap();
        train(&mut split_model, &train_set, &val_set, &half_cfg, d_split.path()).unwrap();
        let resumed = resume(&mut split_model, &train_set, &val_set, &full_cfg, d_split.path()).unwrap();

        assert_eq!(resumed.final_step, full.final_step);
        for ((_, a), (_, b)) in full_model.params.iter().zip(split_model.params.iter()) {
            assert_eq!(a.data, b.data, "parameter {} diverged after resume", a.name);
        }
    }

    #[test]
    fn snapshots_written_at_cadence() {
        let (model_cfg, task) = tiny_setup();
        let (train_set, val_set) = task.materialize().unwrap();
        let mut c = cfg(4);
        c.snapshot_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut model: Model<f64> = Model::assemble(model_cfg, 4).unwrap();
        let artifacts = train(&mut model, &train_set, &val_set, &c, dir.path()).unwrap();
        let mut snaps: Vec<_> = fs::read_dir(&artifacts.snapshots_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        snaps.sort();
        assert_eq!(snaps, vec!["step_0000002.ckpt", "step_0000004.ckpt"]);
        let (extra, arrays) = checkpoint::read_arrays(&artifacts.snapshots_dir.join("step_0000002.ckpt")).unwrap();
        assert_eq!(extra.get("step").unwrap(), "2");
        let names: Vec<_> = arrays.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, vec!["memory.value", "memory.grad"]);
        assert_eq!(arrays[0].shape, vec![2, 8]);
    }

    #[test]
    fn marker_training_reduces_loss() {
        let (model_cfg, mut task) = tiny_setup();
        task.train_size = 64;
        let (train_set, val_set) = task.materialize().unwrap();
        let mut c = cfg(30);
        c.eval_every = 15;
        c.base_lr = 0.02;
        let dir = tempfile::tempdir().unwrap();
        let mut model: Model<f32> = Model::assemble(model_cfg, 9).unwrap();
        let artifacts = train(&mut model, &train_set, &val_set, &c, dir.path()).unwrap();
        let losses: Vec<f64> = artifacts
            .records
            .iter()
            .filter(|r| r.metric == "loss" && r.split == "train")
            .map(|r| r.value)
            .collect();
        assert!(losses.len() >= 2);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss did not decrease: {losses:?}"
        );
    }
}

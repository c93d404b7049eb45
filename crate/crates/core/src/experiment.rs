//! Experiment orchestration: the TOML config schema, run-directory layout,
//! multi-seed suites with optional memory-size sweeps, and the compare /
//! diagnose operations over emitted artifacts.
//!
//! Run directory layout (fixed):
//!
//! ```text
//! <output root>/<run_name>/
//!   config.toml              resolved config copy
//!   [mem<M>/]seed_<S>/       one directory per (memory size, seed)
//!     metrics.jsonl          line-delimited metric records
//!     snapshots/             memory snapshots (checkpoint container)
//!     checkpoints/           final.ckpt, best.ckpt, resume.ckpt
//!     report/                diagnose output tables
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{Model, ModelConfig};
use crate::checkpoint;
use crate::diagnostics::{
    degradation_metrics, friedman_test, holm_adjust, MemorySnapshot, SnapshotTag,
    DEFAULT_DEGRADATION_TOL,
};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;
use crate::train::{self, read_metric_log, RunArtifacts, TrainConfig};

pub const OUTPUT_ENV_VAR: &str = "LUNALAB_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "high")]
    High,
}

fn default_precision() -> Precision {
    Precision::Standard
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub memory_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::config(format!("bad run_name {:?}", self.run_name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty".to_string()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.memory_sizes.is_empty() {
                return Err(Error::config("sweep.memory_sizes must be non-empty".to_string()));
            }
            if !self.model.arch.uses_memory() {
                return Err(Error::config("memory sweep needs a memory architecture".to_string()));
            }
            if sweep.memory_sizes.iter().any(|&m| m == 0) {
                return Err(Error::config("sweep.memory_sizes must be >= 1".to_string()));
            }
        }
        // cross-checks between task and model
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Error::config(format!(
                "task vocab {} exceeds model vocab {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if self.task.num_classes != self.model.num_classes {
            return Err(Error::config(format!(
                "task has {} classes, model {}",
                self.task.num_classes, self.model.num_classes
            )));
        }
        if self.task.dual_input != self.model.dual_input {
            return Err(Error::config("task and model disagree on dual_input".to_string()));
        }
        let needed = match self.task.kind {
            crate::tasks::TaskKind::PixelGrid => self.task.grid * self.task.grid,
            _ => self.task.max_length,
        };
        if needed > self.model.max_len {
            return Err(Error::config(format!(
                "task sequences up to {needed} tokens exceed model max_len {}",
                self.model.max_len
            )));
        }
        Ok(())
    }
}

/// Parse a config document, rejecting unknown keys.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn config_to_string(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::usage(format!("config serialization: {e}")))
}

/// Apply a `--set path.to.key=value` override onto the raw TOML document.
/// The value is parsed as TOML (so numbers, booleans and arrays work) and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::usage(format!("bad override path {dotted:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::usage(format!("override {dotted}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::usage(format!("override {dotted}: parent is not a table")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load_config_with_overrides(path: &Path, sets: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut doc: toml::Value = text
        .parse()
        .map_err(|e| Error::config(format!("config parse: {e}")))?;
    for (key, value) in sets {
        apply_override(&mut doc, key, value)?;
    }
    let cfg: ExperimentConfig = doc
        .try_into()
        .map_err(|e| Error::config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve the output root: explicit flag > config > environment > "runs".
pub fn resolve_output_root(cfg: &ExperimentConfig, cli_output: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_output {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    if let Ok(p) = std::env::var(OUTPUT_ENV_VAR) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub path: PathBuf,
    pub seed: u64,
    pub memory_size: Option<usize>,
    pub final_step: u64,
    pub final_val_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteArtifacts {
    pub suite_dir: PathBuf,
    pub config_copy: PathBuf,
    pub runs: Vec<RunSummary>,
}

fn run_one<E: Elem>(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    seed: u64,
    run_dir: &Path,
    resume: bool,
) -> Result<RunArtifacts> {
    let (train_set, val_set) = cfg.task.materialize()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut model: Model<E> = Model::assemble(model_cfg.clone(), seed)?;
    let resume_path = run_dir.join("checkpoints").join("resume.ckpt");
    if resume && resume_path.exists() {
        train::resume(&mut model, &train_set, &val_set, &train_cfg, run_dir)
    } else {
        train::train(&mut model, &train_set, &val_set, &train_cfg, run_dir)
    }
}

fn run_is_complete(run_dir: &Path, total_steps: u64) -> bool {
    let final_path = run_dir.join("checkpoints").join("final.ckpt");
    match checkpoint::read_arrays(&final_path) {
        Ok((extra, _)) => extra
            .get("step")
            .and_then(|s| s.parse::<u64>().ok())
            .is_some_and(|s| s >= total_steps),
        Err(_) => false,
    }
}

/// Execute the whole suite: every seed, and every sweep memory size when a
/// sweep is configured. Completed run directories are never touched again
/// unless `resume` is set (early-stopped runs count as complete).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    cli_output: Option<&Path>,
    resume: bool,
) -> Result<SuiteArtifacts> {
    cfg.validate()?;
    let root = resolve_output_root(cfg, cli_output);
    let suite_dir = root.join(&cfg.run_name);
    fs::create_dir_all(&suite_dir)?;
    let config_copy = suite_dir.join("config.toml");
    fs::write(&config_copy, config_to_string(cfg)?)?;

    let treatments: Vec<Option<usize>> = match &cfg.sweep {
        Some(sweep) => sweep.memory_sizes.iter().map(|&m| Some(m)).collect(),
        None => vec![None],
    };

    let mut runs = Vec::new();
    for mem in &treatments {
        let mut model_cfg = cfg.model.clone();
        if let Some(m) = mem {
            model_cfg.memory_size = Some(*m);
        }
        model_cfg.validate()?;
        for &seed in &cfg.seeds {
            let run_dir = match mem {
                Some(m) => suite_dir.join(format!("mem{m}")).join(format!("seed_{seed}")),
                None => suite_dir.join(format!("seed_{seed}")),
            };
            let early_stopped = run_dir.join("checkpoints").join("final.ckpt").exists()
                && cfg.train.early_stop_accuracy.is_some();
            if run_is_complete(&run_dir, cfg.train.total_steps) || early_stopped {
                if !resume {
                    return Err(Error::usage(format!(
                        "{} already holds a completed run (use resume to extend, or a new run_name)",
                        run_dir.display()
                    )));
                }
                // completed runs are left untouched on resume
                let summary = summarize_run(&run_dir, seed, *mem)?;
                runs.push(summary);
                continue;
            }
            if run_dir.join("metrics.jsonl").exists() && !resume {
                return Err(Error::usage(format!(
                    "{} holds a partial run; pass resume to continue it",
                    run_dir.display()
                )));
            }
            let artifacts = match cfg.precision {
                Precision::Standard => run_one::<f32>(cfg, &model_cfg, seed, &run_dir, resume)?,
                Precision::High => run_one::<f64>(cfg, &model_cfg, seed, &run_dir, resume)?,
            };
            runs.push(RunSummary {
                path: run_dir,
                seed,
                memory_size: *mem,
                final_step: artifacts.final_step,
                final_val_accuracy: artifacts.final_val_accuracy,
                best_val_accuracy: artifacts.best_val_accuracy,
            });
        }
    }
    Ok(SuiteArtifacts { suite_dir, config_copy, runs })
}

fn summarize_run(run_dir: &Path, seed: u64, mem: Option<usize>) -> Result<RunSummary> {
    let records = read_metric_log(&run_dir.join("metrics.jsonl"))?;
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.split == "val" && r.metric == "accuracy")
        .map(|r| r.value)
        .collect();
    Ok(RunSummary {
        path: run_dir.to_path_buf(),
        seed,
        memory_size: mem,
        final_step: records.iter().map(|r| r.step).max().unwrap_or(0),
        final_val_accuracy: accs.last().copied(),
        best_val_accuracy: accs.iter().cloned().reduce(f64::max),
    })
}

// ── compare ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareMetric {
    FinalAccuracy,
    BestAccuracy,
}

impl std::str::FromStr for CompareMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_accuracy" => Ok(CompareMetric::FinalAccuracy),
            "best_accuracy" => Ok(CompareMetric::BestAccuracy),
            other => Err(Error::usage(format!(
                "unknown metric {other:?} (expected final_accuracy or best_accuracy)"
            ))),
        }
    }
}

/// One Friedman test: a suite directory whose treatment subdirectories each
/// hold the same count of seed_* runs; blocks pair the i-th seed across
/// treatments.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyResult {
    pub name: String,
    pub treatments: Vec<String>,
    pub n_blocks: usize,
    pub chi2: f64,
    pub p_raw: f64,
    pub p_holm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SignificanceReport {
    pub metric: String,
    pub families: Vec<FamilyResult>,
}

fn numeric_suffix_sort(mut names: Vec<String>) -> Vec<String> {
    fn key(name: &str) -> (String, u64) {
        let digits: String = name.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
        let digits: String = digits.chars().rev().collect();
        let prefix = name[..name.len() - digits.len()].to_string();
        (prefix, digits.parse().unwrap_or(0))
    }
    names.sort_by_key(|n| key(n));
    names
}

fn extract_run_score(run_dir: &Path, metric: CompareMetric) -> Result<f64> {
    let records = read_metric_log(&run_dir.join("metrics.jsonl"))?;
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.split == "val" && r.metric == "accuracy")
        .map(|r| r.value)
        .collect();
    if accs.is_empty() {
        return Err(Error::usage(format!(
            "{}: no validation accuracy records",
            run_dir.display()
        )));
    }
    Ok(match metric {
        CompareMetric::FinalAccuracy => *accs.last().unwrap(),
        CompareMetric::BestAccuracy => accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    Ok(names)
}

/// Assemble the n_blocks × k_treatments score matrix for one suite.
pub fn collect_scores(suite_dir: &Path, metric: CompareMetric) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let treatment_names: Vec<String> = numeric_suffix_sort(
        subdirs(suite_dir)?
            .into_iter()
            .filter(|n| !n.starts_with("seed_") && !n.starts_with('.') && n != "report")
            .collect(),
    );
    if treatment_names.len() < 2 {
        return Err(Error::usage(format!(
            "{}: need at least 2 treatment subdirectories to compare",
            suite_dir.display()
        )));
    }
    let mut per_treatment: Vec<Vec<f64>> = Vec::new();
    let mut seed_counts = Vec::new();
    for t in &treatment_names {
        let tdir = suite_dir.join(t);
        let seed_dirs = numeric_suffix_sort(
            subdirs(&tdir)?.into_iter().filter(|n| n.starts_with("seed_")).collect(),
        );
        if seed_dirs.is_empty() {
            return Err(Error::usage(format!("{}: no seed_* run directories", tdir.display())));
        }
        let scores: Result<Vec<f64>> = seed_dirs
            .iter()
            .map(|s| extract_run_score(&tdir.join(s), metric))
            .collect();
        let scores = scores?;
        seed_counts.push(scores.len());
        per_treatment.push(scores);
    }
    if seed_counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::usage(format!(
            "{}: treatments have unequal seed counts {seed_counts:?}",
            suite_dir.display()
        )));
    }
    let n = seed_counts[0];
    let blocks: Vec<Vec<f64>> = (0..n)
        .map(|i| per_treatment.iter().map(|t| t[i]).collect())
        .collect();
    Ok((treatment_names, blocks))
}

/// Friedman test per suite, Holm correction across the family of suites.
pub fn compare_suites(suite_dirs: &[PathBuf], metric: CompareMetric) -> Result<SignificanceReport> {
    if suite_dirs.is_empty() {
        return Err(Error::usage("compare: no suite directories given".to_string()));
    }
    let mut names = Vec::new();
    let mut stats = Vec::new();
    let mut raw_ps = Vec::new();
    let mut treatment_lists = Vec::new();
    let mut block_counts = Vec::new();
    for dir in suite_dirs {
        let (treatments, blocks) = collect_scores(dir, metric)?;
        let (chi2, p) = friedman_test(&blocks)?;
        names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| dir.display().to_string()),
        );
        stats.push(chi2);
        raw_ps.push(p);
        treatment_lists.push(treatments);
        block_counts.push(blocks.len());
    }
    let holm = holm_adjust(&raw_ps)?;
    let families = names
        .into_iter()
        .zip(stats)
        .zip(raw_ps)
        .zip(holm)
        .zip(treatment_lists)
        .zip(block_counts)
        .map(|(((((name, chi2), p_raw), p_holm), treatments), n_blocks)| FamilyResult {
            name,
            treatments,
            n_blocks,
            chi2,
            p_raw,
            p_holm,
        })
        .collect();
    Ok(SignificanceReport {
        metric: match metric {
            CompareMetric::FinalAccuracy => "final_accuracy".to_string(),
            CompareMetric::BestAccuracy => "best_accuracy".to_string(),
        },
        families,
    })
}

pub fn render_significance_table(report: &SignificanceReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>8} {:>6} {:>12} {:>12} {:>12}\n",
        "family", "blocks", "k", "chi2", "p_raw", "p_holm"
    ));
    for f in &report.families {
        out.push_str(&format!(
            "{:<24} {:>8} {:>6} {:>12.6} {:>12.6} {:>12.6}\n",
            f.name,
            f.n_blocks,
            f.treatments.len(),
            f.chi2,
            f.p_raw,
            f.p_holm
        ));
    }
    out
}

pub fn write_significance_report(report: &SignificanceReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::usage(format!("report serialization: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

// ── diagnose ────────────────────────────────────────────────────────

/// Read one snapshot file into its value/gradient matrices.
pub fn read_snapshot(path: &Path) -> Result<Vec<MemorySnapshot>> {
    let (extra, arrays) = checkpoint::read_arrays(path)?;
    let step: u64 = extra
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::input(format!("{}: snapshot missing step", path.display())))?;
    let block: usize = extra.get("block").and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut out = Vec::new();
    for a in arrays {
        let tag = match a.name.as_str() {
            "memory.value" => SnapshotTag::Value,
            "memory.grad" => SnapshotTag::Gradient,
            _ => continue,
        };
        if a.shape.len() != 2 {
            return Err(Error::input(format!("{}: snapshot array is not a matrix", path.display())));
        }
        out.push(MemorySnapshot {
            step,
            block,
            tag,
            rows: a.shape[0],
            cols: a.shape[1],
            data: a.data.to_f64_vec(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DiagnoseArtifacts {
    pub degradation_table: PathBuf,
    pub entropy_table: PathBuf,
    pub degradation_rows: usize,
    pub entropy_rows: usize,
}

/// Turn a run's snapshots and metric log into plot-ready TSV tables.
pub fn diagnose_run(run_dir: &Path, tol: f64) -> Result<DiagnoseArtifacts> {
    let snapshots_dir = run_dir.join("snapshots");
    let mut snapshot_files: Vec<PathBuf> = match fs::read_dir(&snapshots_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect(),
        Err(_) => Vec::new(),
    };
    snapshot_files.sort();
    if snapshot_files.is_empty() {
        return Err(Error::usage(format!(
            "{}: no memory snapshots to diagnose",
            run_dir.display()
        )));
    }

    let mut degradation_lines = vec![
        "step\ttag\tmean_pairwise_cosine\tnumerical_rank\tunique_vectors\tdegenerate".to_string(),
    ];
    for path in &snapshot_files {
        for snap in read_snapshot(path)? {
            let report = degradation_metrics(&snap.data, snap.rows, snap.cols, tol)?;
            let tag = match snap.tag {
                SnapshotTag::Value => "value",
                SnapshotTag::Gradient => "gradient",
            };
            degradation_lines.push(format!(
                "{}\t{}\t{:.9}\t{}\t{}\t{}",
                snap.step,
                tag,
                report.mean_pairwise_cosine,
                report.numerical_rank,
                report.unique_vector_count,
                report.degenerate
            ));
        }
    }

    let records = read_metric_log(&run_dir.join("metrics.jsonl"))?;
    let mut entropy_lines = vec!["step\tblock\tnormalized_entropy".to_string()];
    for r in &records {
        if let Some(block) = r.metric.strip_prefix("attn_entropy.block") {
            entropy_lines.push(format!("{}\t{}\t{:.9}", r.step, block, r.value));
        }
    }

    let report_dir = run_dir.join("report");
    fs::create_dir_all(&report_dir)?;
    let degradation_table = report_dir.join("degradation.tsv");
    let entropy_table = report_dir.join("attention_entropy.tsv");
    let mut f = fs::File::create(&degradation_table)?;
    writeln!(f, "{}", degradation_lines.join("\n"))?;
    let mut f = fs::File::create(&entropy_table)?;
    writeln!(f, "{}", entropy_lines.join("\n"))?;

    Ok(DiagnoseArtifacts {
        degradation_table,
        entropy_table,
        degradation_rows: degradation_lines.len() - 1,
        entropy_rows: entropy_lines.len() - 1,
    })
}

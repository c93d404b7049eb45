//! Desk-scale synthetic tasks: nested-list evaluation (ListOps), marker
//! detection, pixel grids, plus ingestion/export of pre-tokenized datasets
//! in a line-based text format.
//!
//! Generators are pure functions of (spec, seed, n); the validation split
//! uses a seed derived disjointly from the training split.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{mix_seed, seeded_rng};

/// ListOps token ids: 0 is reserved for padding.
pub mod listops_vocab {
    pub const PAD: usize = 0;
    pub const DIGIT_BASE: usize = 1; // digit v → id 1 + v
    pub const OPEN: usize = 11;
    pub const CLOSE: usize = 12;
    pub const MAX: usize = 13;
    pub const MIN: usize = 14;
    pub const MED: usize = 15;
    pub const SM: usize = 16;
    pub const VOCAB_SIZE: usize = 17;
}

pub const MARKER_TOKEN: usize = 1;
pub const PIXEL_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub tokens: Vec<usize>,
    /// Second sequence for matching-style (dual input) tasks.
    #[serde(default)]
    pub second: Option<Vec<usize>>,
    pub label: usize,
    /// Valid-position flags, same length as `tokens` (generators emit all
    /// true; padding introduced later flips entries to false).
    pub mask: Vec<bool>,
}

impl SequenceSample {
    pub fn new(tokens: Vec<usize>, label: usize) -> Self {
        let mask = vec![true; tokens.len()];
        SequenceSample { tokens, second: None, label, mask }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub dual_input: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "listops")]
    ListOps,
    #[serde(rename = "marker")]
    Marker,
    #[serde(rename = "pixel-grid")]
    PixelGrid,
    #[serde(rename = "file-ingest")]
    FileIngest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Sequence length bound; exact length for marker, upper bound for
    /// listops.
    #[serde(default)]
    pub max_length: usize,
    #[serde(default)]
    pub min_length: usize,
    /// Maximum nesting depth (listops).
    #[serde(default)]
    pub max_depth: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub dual_input: bool,
    /// Grid side g (pixel-grid); the sequence is the g·g flattened image.
    #[serde(default)]
    pub grid: usize,
    /// Pixel noise stddev (pixel-grid).
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Dataset file (file-ingest); dual files carry two token columns.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_noise() -> f64 {
    0.1
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::ListOps => {
                if self.max_depth < 1 {
                    return Err(Error::config("listops: max_depth must be >= 1".to_string()));
                }
                // smallest expression is [OP d d] = 5 tokens
                if self.max_length < 5 {
                    return Err(Error::config(format!(
                        "listops: max_length {} cannot hold any expression (min 5)",
                        self.max_length
                    )));
                }
                if self.min_length > self.max_length {
                    return Err(Error::config("listops: min_length > max_length".to_string()));
                }
                if self.vocab_size != listops_vocab::VOCAB_SIZE {
                    return Err(Error::config(format!(
                        "listops: vocab_size must be {}",
                        listops_vocab::VOCAB_SIZE
                    )));
                }
                if self.num_classes != 10 {
                    return Err(Error::config("listops: num_classes must be 10".to_string()));
                }
                if self.dual_input {
                    return Err(Error::config("listops: no dual-input variant".to_string()));
                }
            }
            TaskKind::Marker => {
                if self.max_length < 4 {
                    return Err(Error::config("marker: length must be >= 4".to_string()));
                }
                if self.vocab_size < 4 {
                    return Err(Error::config("marker: vocab_size must be >= 4".to_string()));
                }
                if self.num_classes != 2 {
                    return Err(Error::config("marker: num_classes must be 2".to_string()));
                }
            }
            TaskKind::PixelGrid => {
                if self.grid < 4 {
                    return Err(Error::config("pixel-grid: grid side must be >= 4".to_string()));
                }
                if self.grid * self.grid > self.max_length {
                    return Err(Error::config(format!(
                        "pixel-grid: g²={} exceeds max_length {}",
                        self.grid * self.grid,
                        self.max_length
                    )));
                }
                if self.vocab_size != PIXEL_VOCAB {
                    return Err(Error::config(format!("pixel-grid: vocab_size must be {PIXEL_VOCAB}")));
                }
                if !(2..=4).contains(&self.num_classes) {
                    return Err(Error::config("pixel-grid: num_classes must be in 2..=4".to_string()));
                }
                if self.noise < 0.0 {
                    return Err(Error::config("pixel-grid: noise must be >= 0".to_string()));
                }
            }
            TaskKind::FileIngest => {
                if self.path.is_none() {
                    return Err(Error::config("file-ingest: path is required".to_string()));
                }
                if self.vocab_size == 0 || self.num_classes < 2 {
                    return Err(Error::config(
                        "file-ingest: vocab_size and num_classes are required".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Materialize the train and validation splits. Generators draw the two
    /// splits from disjoint seed streams; file ingestion splits the file
    /// tail into validation.
    pub fn materialize(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let train_seed = mix_seed(self.seed, &[0x7104]);
        let val_seed = mix_seed(self.seed, &[0x7a1]);
        match self.kind {
            TaskKind::ListOps => Ok((
                gen_listops(self, self.train_size, train_seed)?,
                gen_listops(self, self.val_size, val_seed)?,
            )),
            TaskKind::Marker => Ok((
                gen_marker(self, self.train_size, train_seed)?,
                gen_marker(self, self.val_size, val_seed)?,
            )),
            TaskKind::PixelGrid => Ok((
                gen_pixel_grid(self, self.train_size, train_seed)?,
                gen_pixel_grid(self, self.val_size, val_seed)?,
            )),
            TaskKind::FileIngest => {
                let ds = ingest_lra(self.path.as_ref().unwrap(), self)?;
                let n = ds.samples.len();
                let n_val = self.val_size.min(n);
                let split = n - n_val;
                let mut train = ds.clone();
                let val_samples = train.samples.split_off(split);
                let mut val = ds;
                val.samples = val_samples;
                Ok((train, val))
            }
        }
    }
}

// ── ListOps ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListOp {
    Max,
    Min,
    Med,
    Sm,
}

#[derive(Clone, Debug)]
pub enum ListExpr {
    Digit(u8),
    Node(ListOp, Vec<ListExpr>),
}

/// Recursive evaluator; the generator labels samples with it. SM is sum mod
/// 10 and MED takes the lower median for even arity.
pub fn eval_listops(expr: &ListExpr) -> u8 {
    match expr {
        ListExpr::Digit(d) => *d,
        ListExpr::Node(op, children) => {
            let values: Vec<u8> = children.iter().map(eval_listops).collect();
            match op {
                ListOp::Max => *values.iter().max().unwrap(),
                ListOp::Min => *values.iter().min().unwrap(),
                ListOp::Med => {
                    let mut sorted = values.clone();
                    sorted.sort_unstable();
                    sorted[(sorted.len() - 1) / 2]
                }
                ListOp::Sm => (values.iter().map(|&v| v as u32).sum::<u32>() % 10) as u8,
            }
        }
    }
}

pub fn tokenize_listops(expr: &ListExpr, out: &mut Vec<usize>) {
    use listops_vocab::*;
    match expr {
        ListExpr::Digit(d) => out.push(DIGIT_BASE + *d as usize),
        ListExpr::Node(op, children) => {
            out.push(OPEN);
            out.push(match op {
                ListOp::Max => MAX,
                ListOp::Min => MIN,
                ListOp::Med => MED,
                ListOp::Sm => SM,
            });
            for c in children {
                tokenize_listops(c, out);
            }
            out.push(CLOSE);
        }
    }
}

/// Parse a token-id sequence back into an expression tree.
pub fn parse_listops(tokens: &[usize]) -> Result<ListExpr> {
    use listops_vocab::*;
    fn parse(tokens: &[usize], pos: &mut usize) -> Result<ListExpr> {
        let t = *tokens.get(*pos).ok_or_else(|| Error::input("listops: truncated expression".to_string()))?;
        *pos += 1;
        match t {
            OPEN => {
                let op = match *tokens.get(*pos).ok_or_else(|| Error::input("listops: missing operator".to_string()))? {
                    MAX => ListOp::Max,
                    MIN => ListOp::Min,
                    MED => ListOp::Med,
                    SM => ListOp::Sm,
                    other => return Err(Error::input(format!("listops: unexpected token {other} after '['"))),
                };
                *pos += 1;
                let mut children = Vec::new();
                loop {
                    match tokens.get(*pos) {
                        Some(&CLOSE) => {
                            *pos += 1;
                            break;
                        }
                        Some(_) => children.push(parse(tokens, pos)?),
                        None => return Err(Error::input("listops: unbalanced brackets".to_string())),
                    }
                }
                if children.is_empty() {
                    return Err(Error::input("listops: empty operator".to_string()));
                }
                Ok(ListExpr::Node(op, children))
            }
            d if (DIGIT_BASE..DIGIT_BASE + 10).contains(&d) => Ok(ListExpr::Digit((d - DIGIT_BASE) as u8)),
            other => Err(Error::input(format!("listops: unexpected token {other}"))),
        }
    }
    let mut pos = 0;
    let expr = parse(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::input("listops: trailing tokens".to_string()));
    }
    Ok(expr)
}

fn gen_expr(rng: &mut ChaCha8Rng, depth: usize, max_depth: usize) -> ListExpr {
    let op = match rng.gen_range(0..4) {
        0 => ListOp::Max,
        1 => ListOp::Min,
        2 => ListOp::Med,
        _ => ListOp::Sm,
    };
    let arity = rng.gen_range(2..=5);
    let subtree_p = if depth + 1 >= max_depth { 0.0 } else { 0.3 * 0.6f64.powi(depth as i32) };
    let children = (0..arity)
        .map(|_| {
            if rng.gen::<f64>() < subtree_p {
                gen_expr(rng, depth + 1, max_depth)
            } else {
                ListExpr::Digit(rng.gen_range(0..10))
            }
        })
        .collect();
    ListExpr::Node(op, children)
}

pub fn gen_listops(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, &[0x115, 0x0b5]);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempts = 0;
        let sample = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::config(format!(
                    "listops: could not fit an expression into [{}, {}] tokens (sample {i})",
                    spec.min_length, spec.max_length
                )));
            }
            let expr = gen_expr(&mut rng, 0, spec.max_depth);
            let mut tokens = Vec::new();
            tokenize_listops(&expr, &mut tokens);
            if tokens.len() >= spec.min_length.max(1) && tokens.len() <= spec.max_length {
                break SequenceSample::new(tokens, eval_listops(&expr) as usize);
            }
        };
        samples.push(sample);
    }
    Ok(Dataset {
        samples,
        vocab_size: listops_vocab::VOCAB_SIZE,
        num_classes: 10,
        dual_input: false,
    })
}

// ── Marker detection ────────────────────────────────────────────────

fn marker_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> (Vec<usize>, bool) {
    let len = spec.max_length;
    let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(2..spec.vocab_size)).collect();
    let positive = rng.gen::<bool>();
    if positive {
        let pos = rng.gen_range(0..len / 2);
        tokens[pos] = MARKER_TOKEN;
    } else if rng.gen::<bool>() {
        // distractor marker in the second half keeps "contains marker
        // anywhere" from solving the task
        let pos = rng.gen_range(len / 2..len);
        tokens[pos] = MARKER_TOKEN;
    }
    (tokens, positive)
}

/// Label 1 iff the marker token appears in the first half of the sequence.
pub fn gen_marker(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, &[0x3a6, 0x2b]);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        if spec.dual_input {
            let (a, pa) = marker_sequence(&mut rng, spec);
            let (b, pb) = marker_sequence(&mut rng, spec);
            let mut s = SequenceSample::new(a, usize::from(pa == pb));
            s.second = Some(b);
            samples.push(s);
        } else {
            let (tokens, positive) = marker_sequence(&mut rng, spec);
            samples.push(SequenceSample::new(tokens, usize::from(positive)));
        }
    }
    Ok(Dataset {
        samples,
        vocab_size: spec.vocab_size,
        num_classes: 2,
        dual_input: spec.dual_input,
    })
}

// ── Pixel grids ─────────────────────────────────────────────────────

/// Quantize intensity 0.0..=1.0 to token ids 0..=255.
pub fn quantize_pixel(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// g×g grayscale images with one of up to four shapes (horizontal bar,
/// vertical bar, diagonal, corner blob), flattened row-major.
pub fn gen_pixel_grid(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let g = spec.grid;
    let mut rng = seeded_rng(seed, &[0x919e1]);
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..spec.num_classes);
        let mut img = vec![0.0f64; g * g];
        match label {
            0 => {
                let row = rng.gen_range(0..g);
                img[row * g..(row + 1) * g].fill(1.0);
            }
            1 => {
                let col = rng.gen_range(0..g);
                for r in 0..g {
                    img[r * g + col] = 1.0;
                }
            }
            2 => {
                let up = rng.gen::<bool>();
                for i in 0..g {
                    let c = if up { g - 1 - i } else { i };
                    img[i * g + c] = 1.0;
                }
            }
            _ => {
                let side = (g / 4).max(2);
                let (r0, c0) = match rng.gen_range(0..4) {
                    0 => (0, 0),
                    1 => (0, g - side),
                    2 => (g - side, 0),
                    _ => (g - side, g - side),
                };
                for r in r0..r0 + side {
                    img[r * g + c0..r * g + c0 + side].fill(1.0);
                }
            }
        }
        let tokens: Vec<usize> = img
            .iter()
            .map(|&v| {
                use rand_distr::Distribution;
                let noisy = v + spec.noise * normal.sample(&mut rng);
                quantize_pixel(noisy)
            })
            .collect();
        samples.push(SequenceSample::new(tokens, label));
    }
    Ok(Dataset { samples, vocab_size: PIXEL_VOCAB, num_classes: spec.num_classes, dual_input: false })
}

// ── Line-based dataset files ────────────────────────────────────────
//
// One sample per line: space-separated integer token ids, a tab, then the
// integer label. Dual-input datasets carry two tab-separated id sequences
// before the label.

fn parse_ids(field: &str, line_no: usize, vocab: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|tok| {
            let id: usize = tok
                .parse()
                .map_err(|_| Error::input(format!("line {line_no}: bad token id {tok:?}")))?;
            if id >= vocab {
                return Err(Error::input(format!(
                    "line {line_no}: token id {id} >= vocab_size {vocab}"
                )));
            }
            Ok(id)
        })
        .collect()
}

/// Stream a dataset file without loading it whole; one malformed line fails
/// with its line number.
pub fn ingest_lra(path: &Path, spec: &TaskSpec) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let expected = if spec.dual_input { 3 } else { 2 };
        if fields.len() != expected {
            return Err(Error::input(format!(
                "line {line_no}: expected {expected} tab-separated fields, found {}",
                fields.len()
            )));
        }
        let tokens = parse_ids(fields[0], line_no, spec.vocab_size)?;
        if tokens.is_empty() {
            return Err(Error::input(format!("line {line_no}: empty token sequence")));
        }
        let second = if spec.dual_input {
            let ids = parse_ids(fields[1], line_no, spec.vocab_size)?;
            if ids.is_empty() {
                return Err(Error::input(format!("line {line_no}: empty second sequence")));
            }
            Some(ids)
        } else {
            None
        };
        let label: usize = fields[expected - 1]
            .trim()
            .parse()
            .map_err(|_| Error::input(format!("line {line_no}: bad label {:?}", fields[expected - 1])))?;
        if label >= spec.num_classes {
            return Err(Error::input(format!(
                "line {line_no}: label {label} >= num_classes {}",
                spec.num_classes
            )));
        }
        if tokens.len() > spec.max_length || second.as_ref().is_some_and(|s| s.len() > spec.max_length) {
            return Err(Error::input(format!(
                "line {line_no}: sequence longer than max_length {}",
                spec.max_length
            )));
        }
        let mut s = SequenceSample::new(tokens, label);
        s.second = second;
        samples.push(s);
    }
    Ok(Dataset {
        samples,
        vocab_size: spec.vocab_size,
        num_classes: spec.num_classes,
        dual_input: spec.dual_input,
    })
}

/// Write the identical line format that [`ingest_lra`] reads.
pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for s in &ds.samples {
        let ids = s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        match &s.second {
            Some(second) => {
                let ids2 = second.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
                writeln!(f, "{ids}\t{ids2}\t{}", s.label)?;
            }
            None => writeln!(f, "{ids}\t{}", s.label)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listops_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::ListOps,
            seed: 7,
            train_size: 64,
            val_size: 16,
            max_length: 64,
            min_length: 0,
            max_depth: 3,
            vocab_size: listops_vocab::VOCAB_SIZE,
            num_classes: 10,
            dual_input: false,
            grid: 0,
            noise: 0.0,
            path: None,
        }
    }

    /// Second, separately coded evaluator: a stack machine over the token
    /// stream, used to cross-check every generated label.
    fn eval_listops_stack(tokens: &[usize]) -> Option<u8> {
        use listops_vocab::*;
        let mut stack: Vec<(usize, Vec<u8>)> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let t = tokens[i];
            match t {
                OPEN => {
                    i += 1;
                    stack.push((*tokens.get(i)?, Vec::new()));
                }
                CLOSE => {
                    let (op, values) = stack.pop()?;
                    let v = match op {
                        MAX => *values.iter().max()?,
                        MIN => *values.iter().min()?,
                        MED => {
                            let mut s = values.clone();
                            s.sort_unstable();
                            s[(s.len() - 1) / 2]
                        }
                        SM => (values.iter().map(|&x| x as u32).sum::<u32>() % 10) as u8,
                        _ => return None,
                    };
                    match stack.last_mut() {
                        Some((_, parent)) => parent.push(v),
                        None => return if i + 1 == tokens.len() { Some(v) } else { None },
                    }
                }
                d if (DIGIT_BASE..DIGIT_BASE + 10).contains(&d) => {
                    stack.last_mut()?.1.push((d - DIGIT_BASE) as u8);
                }
                _ => return None,
            }
            i += 1;
        }
        None
    }

    #[test]
    fn listops_simple_expressions() {
        // [MAX 1 2 3] → 3
        let e = ListExpr::Node(ListOp::Max, vec![ListExpr::Digit(1), ListExpr::Digit(2), ListExpr::Digit(3)]);
        assert_eq!(eval_listops(&e), 3);
        // [MIN 4 [MAX 2 5] 1] → 1
        let e = ListExpr::Node(
            ListOp::Min,
            vec![
                ListExpr::Digit(4),
                ListExpr::Node(ListOp::Max, vec![ListExpr::Digit(2), ListExpr::Digit(5)]),
                ListExpr::Digit(1),
            ],
        );
        assert_eq!(eval_listops(&e), 1);
        // [SM 5 7] → 2
        let e = ListExpr::Node(ListOp::Sm, vec![ListExpr::Digit(5), ListExpr::Digit(7)]);
        assert_eq!(eval_listops(&e), 2);
        // lower median on even arity
        let e = ListExpr::Node(
            ListOp::Med,
            vec![ListExpr::Digit(1), ListExpr::Digit(9), ListExpr::Digit(4), ListExpr::Digit(6)],
        );
        assert_eq!(eval_listops(&e), 4);
    }

    #[test]
    fn listops_labels_agree_with_independent_stack_evaluator() {
        let ds = gen_listops(&listops_spec(), 200, 99).unwrap();
        for s in &ds.samples {
            assert_eq!(eval_listops_stack(&s.tokens), Some(s.label as u8));
            // and the parser round-trips the token stream
            let expr = parse_listops(&s.tokens).unwrap();
            assert_eq!(eval_listops(&expr) as usize, s.label);
        }
    }

    #[test]
    fn listops_respects_bounds_and_brackets() {
        let spec = listops_spec();
        let ds = gen_listops(&spec, 300, 1).unwrap();
        for s in &ds.samples {
            assert!(s.tokens.len() <= spec.max_length);
            assert!(s.tokens.iter().all(|&t| t < listops_vocab::VOCAB_SIZE && t != listops_vocab::PAD));
            let opens = s.tokens.iter().filter(|&&t| t == listops_vocab::OPEN).count();
            let closes = s.tokens.iter().filter(|&&t| t == listops_vocab::CLOSE).count();
            assert_eq!(opens, closes);
        }
    }

    #[test]
    fn listops_infeasible_bounds_error() {
        let mut spec = listops_spec();
        spec.max_length = 4;
        assert!(matches!(gen_listops(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = listops_spec();
        assert_eq!(gen_listops(&spec, 50, 3).unwrap(), gen_listops(&spec, 50, 3).unwrap());

        let mspec = marker_spec();
        assert_eq!(gen_marker(&mspec, 50, 3).unwrap(), gen_marker(&mspec, 50, 3).unwrap());
    }

    fn marker_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Marker,
            seed: 5,
            train_size: 100,
            val_size: 20,
            max_length: 128,
            min_length: 0,
            max_depth: 0,
            vocab_size: 32,
            num_classes: 2,
            dual_input: false,
            grid: 0,
            noise: 0.0,
            path: None,
        }
    }

    #[test]
    fn marker_labels_match_first_half_rule() {
        let spec = marker_spec();
        let ds = gen_marker(&spec, 2000, 11).unwrap();
        for s in &ds.samples {
            let has = s.tokens[..s.tokens.len() / 2].contains(&MARKER_TOKEN);
            assert_eq!(s.label, usize::from(has));
            assert_eq!(s.tokens.len(), 128);
        }
    }

    #[test]
    fn marker_class_balance() {
        let spec = marker_spec();
        let ds = gen_marker(&spec, 10_000, 21).unwrap();
        let positives = ds.samples.iter().filter(|s| s.label == 1).count();
        let balance = positives as f64 / 10_000.0;
        assert!((balance - 0.5).abs() < 0.02, "balance {balance}");
    }

    #[test]
    fn pixel_grid_shapes_and_quantization() {
        assert_eq!(quantize_pixel(1.0), 255);
        assert_eq!(quantize_pixel(0.0), 0);

        let spec = TaskSpec {
            kind: TaskKind::PixelGrid,
            seed: 2,
            train_size: 10,
            val_size: 5,
            max_length: 256,
            min_length: 0,
            max_depth: 0,
            vocab_size: 256,
            num_classes: 4,
            dual_input: false,
            grid: 16,
            noise: 0.0,
            path: None,
        };
        let ds = gen_pixel_grid(&spec, 50, 4).unwrap();
        for s in &ds.samples {
            assert_eq!(s.tokens.len(), 256);
            assert!(s.tokens.iter().all(|&t| t < 256));
        }
        // noiseless horizontal and vertical bars at index r relate by transpose
        let g = 16;
        let horizontal: Vec<usize> = (0..g * g).map(|i| usize::from(i / g == 3) * 255).collect();
        let vertical: Vec<usize> = (0..g * g).map(|i| usize::from(i % g == 3) * 255).collect();
        let transposed: Vec<usize> = (0..g * g).map(|i| horizontal[(i % g) * g + i / g]).collect();
        assert_eq!(vertical, transposed);
    }

    #[test]
    fn pixel_count_baseline_beats_chance() {
        // nearest-centroid on (row sums, col sums) features, fit on half
        let spec = TaskSpec {
            kind: TaskKind::PixelGrid,
            seed: 8,
            train_size: 0,
            val_size: 0,
            max_length: 256,
            min_length: 0,
            max_depth: 0,
            vocab_size: 256,
            num_classes: 4,
            dual_input: false,
            grid: 16,
            noise: 0.1,
            path: None,
        };
        let ds = gen_pixel_grid(&spec, 1000, 77).unwrap();
        let g = 16;
        let features = |tokens: &[usize]| -> Vec<f64> {
            let mut f = vec![0.0; 2 * g];
            for (i, &t) in tokens.iter().enumerate() {
                f[i / g] += t as f64 / 255.0;
                f[g + i % g] += t as f64 / 255.0;
            }
            f
        };
        let (fit, eval) = ds.samples.split_at(500);
        let mut centroids = vec![vec![0.0; 2 * g]; 4];
        let mut counts = [0usize; 4];
        for s in fit {
            let f = features(&s.tokens);
            counts[s.label] += 1;
            for (c, v) in centroids[s.label].iter_mut().zip(&f) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let mut correct = 0;
        for s in eval {
            let f = features(&s.tokens);
            let pred = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&f).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&f).map(|(c, v)| (c - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(pred == s.label);
        }
        let acc = correct as f64 / eval.len() as f64;
        assert!(acc > 0.5, "baseline accuracy {acc} should exceed chance 0.25");
    }

    #[test]
    fn ingest_empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        fs::write(&path, "").unwrap();
        let mut spec = marker_spec();
        spec.kind = TaskKind::FileIngest;
        spec.path = Some(path.clone());
        let ds = ingest_lra(&path, &spec).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn ingest_single_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.tsv");
        fs::write(&path, "3 17 9\t1\n").unwrap();
        let mut spec = marker_spec();
        spec.kind = TaskKind::FileIngest;
        spec.path = Some(path.clone());
        let ds = ingest_lra(&path, &spec).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].tokens, vec![3, 17, 9]);
        assert_eq!(ds.samples[0].label, 1);
    }

    #[test]
    fn ingest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "1 2 3\t0\n4 xyz\t1\n").unwrap();
        let mut spec = marker_spec();
        spec.kind = TaskKind::FileIngest;
        spec.path = Some(path.clone());
        let err = ingest_lra(&path, &spec).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        fs::write(&path, "1 99 3\t0\n").unwrap();
        let err = ingest_lra(&path, &spec).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.tsv");
        let ds = gen_marker(&marker_spec(), 40, 13).unwrap();
        export_dataset(&ds, &path).unwrap();
        let mut spec = marker_spec();
        spec.kind = TaskKind::FileIngest;
        spec.path = Some(path.clone());
        let back = ingest_lra(&path, &spec).unwrap();
        assert_eq!(ds.samples, back.samples);

        // dual-input format round-trips too
        let mut dual_spec = marker_spec();
        dual_spec.dual_input = true;
        let ds = gen_marker(&dual_spec, 25, 14).unwrap();
        let path2 = dir.path().join("dual.tsv");
        export_dataset(&ds, &path2).unwrap();
        dual_spec.kind = TaskKind::FileIngest;
        dual_spec.path = Some(path2.clone());
        let back = ingest_lra(&path2, &dual_spec).unwrap();
        assert_eq!(ds.samples, back.samples);
    }

    #[test]
    fn materialize_gives_disjoint_seeded_splits() {
        let spec = listops_spec();
        let (train, val) = spec.materialize().unwrap();
        assert_eq!(train.samples.len(), 64);
        assert_eq!(val.samples.len(), 16);
        assert_ne!(train.samples[..16], val.samples[..]);
    }
}

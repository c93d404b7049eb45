//! Memory-degradation diagnostics and the nonparametric comparison protocol.
//!
//! Degradation is quantified on a snapshot of the memory matrix with three
//! scalar metrics: mean pairwise cosine between memory rows, numerical rank
//! (singular values above tol·σ_max), and the number of distinct row
//! clusters under complete-linkage with cosine distance ≤ tol. Memory-size
//! comparisons use the Friedman rank test with Holm-corrected p-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotTag {
    #[serde(rename = "value")]
    Value,
    #[serde(rename = "gradient")]
    Gradient,
}

/// A captured memory matrix (the block-1 memory input P, or its gradient)
/// at one training step.
#[derive(Clone, Debug)]
pub struct MemorySnapshot {
    pub step: u64,
    pub block: usize,
    pub tag: SnapshotTag,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const DEFAULT_DEGRADATION_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub mean_pairwise_cosine: f64,
    pub numerical_rank: usize,
    pub unique_vector_count: usize,
    /// Set when the matrix is all zeros; the other fields then describe the
    /// degenerate convention (cosine 1, rank 0, one unique vector).
    pub degenerate: bool,
}

fn row_norms(matrix: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| matrix[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Cosine similarity with the convention that a pair involving an all-zero
/// row scores 0 (and two zero rows score 1, "identical").
fn row_cosine(matrix: &[f64], cols: usize, i: usize, j: usize, norms: &[f64]) -> f64 {
    if norms[i] == 0.0 && norms[j] == 0.0 {
        return 1.0;
    }
    if norms[i] == 0.0 || norms[j] == 0.0 {
        return 0.0;
    }
    let a = &matrix[i * cols..(i + 1) * cols];
    let b = &matrix[j * cols..(j + 1) * cols];
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norms[i] * norms[j])
}

/// Quantify memory collapse on one snapshot matrix.
pub fn degradation_metrics(matrix: &[f64], rows: usize, cols: usize, tol: f64) -> Result<DegradationReport> {
    if rows == 0 || cols == 0 || matrix.len() != rows * cols {
        return Err(Error::usage(format!(
            "degradation_metrics: {rows}x{cols} does not match {} values",
            matrix.len()
        )));
    }
    if !(0.0..1.0).contains(&tol) {
        return Err(Error::usage(format!("degradation_metrics: tol {tol} outside [0, 1)")));
    }
    if matrix.iter().all(|&v| v == 0.0) {
        return Ok(DegradationReport {
            mean_pairwise_cosine: 1.0,
            numerical_rank: 0,
            unique_vector_count: 1,
            degenerate: true,
        });
    }

    let norms = row_norms(matrix, rows, cols);

    let mean_pairwise_cosine = if rows == 1 {
        1.0
    } else {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..rows {
            for j in i + 1..rows {
                sum += row_cosine(matrix, cols, i, j, &norms);
                pairs += 1;
            }
        }
        sum / pairs as f64
    };

    let svd = nalgebra::DMatrix::from_row_slice(rows, cols, matrix).singular_values();
    let sigma_max = svd.iter().cloned().fold(0.0f64, f64::max);
    let numerical_rank = svd.iter().filter(|&&s| s > tol * sigma_max).count();

    // complete-linkage agglomeration under cosine distance ≤ tol
    let mut clusters: Vec<Vec<usize>> = (0..rows).map(|r| vec![r]).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let dist = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| (i, j)))
                    .map(|(i, j)| 1.0 - row_cosine(matrix, cols, i, j, &norms))
                    .fold(f64::NEG_INFINITY, f64::max);
                if dist <= tol && best.map_or(true, |(_, _, d)| dist < d) {
                    best = Some((a, b, dist));
                }
            }
        }
        match best {
            Some((a, b, _)) => {
                let merged = clusters.remove(b);
                clusters[a].extend(merged);
            }
            None => break,
        }
    }

    Ok(DegradationReport {
        mean_pairwise_cosine,
        numerical_rank,
        unique_vector_count: clusters.len(),
        degenerate: false,
    })
}

/// Mean over rows of −Σ p ln p, normalized by ln(keys); one key → 0 by
/// definition. Rows must sum to 1 within 1e-6.
pub fn attention_entropy(rows: &[f64], n_rows: usize, n_keys: usize) -> Result<f64> {
    if n_rows == 0 || n_keys == 0 || rows.len() != n_rows * n_keys {
        return Err(Error::usage(format!(
            "attention_entropy: {n_rows}x{n_keys} does not match {} values",
            rows.len()
        )));
    }
    if n_keys == 1 {
        for (i, &p) in rows.iter().enumerate() {
            if (p - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!("attention_entropy: row {i} sums to {p}, not 1")));
            }
        }
        return Ok(0.0);
    }
    let ln_keys = (n_keys as f64).ln();
    let mut total = 0.0;
    for (i, row) in rows.chunks(n_keys).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!(
                "attention_entropy: row {i} sums to {sum}, not 1"
            )));
        }
        let h: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        total += h / ln_keys;
    }
    Ok(total / n_rows as f64)
}

/// Friedman rank test over an n_blocks × k_treatments score matrix.
/// Ties take mean ranks; the statistic is
/// χ²_F = 12/(n·k·(k+1)) · Σ_j R_j² − 3·n·(k+1)
/// with p from the chi-square survival function at k−1 degrees of freedom.
pub fn friedman_test(scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::usage("friedman_test: need at least 2 blocks".to_string()));
    }
    let k = scores[0].len();
    if k < 2 {
        return Err(Error::usage("friedman_test: need at least 2 treatments".to_string()));
    }
    if scores.iter().any(|row| row.len() != k) {
        return Err(Error::usage("friedman_test: ragged score matrix".to_string()));
    }

    let mut rank_sums = vec![0.0f64; k];
    for row in scores {
        for (j, rank) in mean_ranks(row).into_iter().enumerate() {
            rank_sums[j] += rank;
        }
    }
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let nf = n as f64;
    let kf = k as f64;
    let chi2 = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    // guard tiny negative values from float cancellation at full ties
    let chi2 = if chi2 < 0.0 && chi2 > -1e-9 { 0.0 } else { chi2 };
    let p = chi2_sf(chi2, k - 1);
    Ok((chi2, p))
}

/// Average ranks (1-based) with mean ranks for ties.
fn mean_ranks(row: &[f64]) -> Vec<f64> {
    let k = row.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("no NaN scores"));
    let mut ranks = vec![0.0; k];
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j + 1 < k && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        let mean = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Chi-square survival function via the regularized upper incomplete gamma.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// Exact permutation p-value for the Friedman statistic: enumerate all k!^n
/// equally likely per-block rankings and count those with χ² ≥ observed.
/// Validation-only mode for small n, k.
pub fn friedman_exact_p(scores: &[Vec<f64>]) -> Result<f64> {
    let n = scores.len();
    if n < 2 || scores[0].len() < 2 {
        return Err(Error::usage("friedman_exact_p: need a 2x2 or larger matrix".to_string()));
    }
    let k = scores[0].len();
    let perms = permutations(k);
    let total = (perms.len() as f64).powi(n as i32);
    if total > 3e7 {
        return Err(Error::usage(format!(
            "friedman_exact_p: {}^{n} rank configurations is too many for exact mode",
            perms.len()
        )));
    }
    let (observed, _) = friedman_test(scores)?;

    let nf = n as f64;
    let kf = k as f64;
    let mut hits = 0u64;
    let mut count = 0u64;
    let mut stack = vec![0usize; n];
    loop {
        let mut rank_sums = vec![0.0f64; k];
        for &pi in &stack {
            for (j, &r) in perms[pi].iter().enumerate() {
                rank_sums[j] += r as f64;
            }
        }
        let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
        let chi2 = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
        if chi2 >= observed - 1e-12 {
            hits += 1;
        }
        count += 1;
        // odometer over blocks
        let mut pos = 0;
        loop {
            if pos == n {
                debug_assert_eq!(count as f64, total);
                return Ok(hits as f64 / total);
            }
            stack[pos] += 1;
            if stack[pos] < perms.len() {
                break;
            }
            stack[pos] = 0;
            pos += 1;
        }
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: &mut Vec<usize>, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining.is_empty() {
            out.push(current.clone());
            return;
        }
        for i in 0..remaining.len() {
            let v = remaining.remove(i);
            current.push(v);
            rec(remaining, current, out);
            current.pop();
            remaining.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut (1..=k).collect(), &mut Vec::new(), &mut out);
    out
}

/// Holm step-down adjustment: sort ascending, adjusted_i = min(1, max_{j≤i}
/// (m−j+1)·p_j), returned in the original order.
pub fn holm_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::usage(format!("holm_adjust: p-value {p} outside [0, 1]")));
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).expect("no NaN p-values"));
    let mut adjusted = vec![0.0; m];
    let mut running_max = 0.0f64;
    for (j, &idx) in order.iter().enumerate() {
        let scaled = ((m - j) as f64) * p_values[idx];
        running_max = running_max.max(scaled);
        adjusted[idx] = running_max.min(1.0);
    }
    Ok(adjusted)
}

//! InfoNCE with in-batch negatives, evaluated on frozen embeddings.
//!
//! Scores are `dot(query_i, item_j) / temperature`, so row `i` of the score
//! matrix holds query `i` against every item in the batch and the diagonal is
//! the labeled positive. The per-query loss
//!
//! ```text
//! -ln( exp(s_ii) / sum_j exp(s_ij) )  =  logsumexp_j(s_ij) - s_ii
//! ```
//!
//! is reported split into its smooth-max term (the log-sum-exp) and its
//! positive term. Scores are taken as already temperature-scaled; the
//! temperature appears only in [`similarity_matrix`].
//!
//! Everything is accumulated in `f64`. At temperature 0.02 a cosine of 1 maps
//! to a score of 50.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{dot, EmbeddingSet, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.02;
pub const DEFAULT_HARDNESS_MARGIN: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A square, row-major matrix of scaled scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    size: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Shape(format!(
                "score matrix of size {size} needs {} entries, got {}",
                size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != size) {
            return Err(Error::Shape(format!("row {i} has {} entries, expected {size}", r.len())));
        }
        Self::new(size, rows.concat())
    }

    /// Batch size B.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.size + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.size.max(1))
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite score at ({}, {})",
                pos / self.size,
                pos % self.size
            )));
        }
        Ok(())
    }
}

/// `scores[i][j] = dot(query_i, item_j) / temperature`.
pub fn similarity_matrix(queries: &EmbeddingSet, items: &EmbeddingSet, cfg: &LossConfig) -> Result<ScoreMatrix> {
    cfg.validate()?;
    if queries.count() != items.count() || queries.dim() != items.dim() {
        return Err(Error::Shape(format!(
            "queries are {} x {}, items are {} x {}",
            queries.count(),
            queries.dim(),
            items.count(),
            items.dim()
        )));
    }
    queries
        .check_unit_norm(UNIT_NORM_TOLERANCE)
        .map_err(|e| Error::Precondition(format!("queries: {e}")))?;
    items
        .check_unit_norm(UNIT_NORM_TOLERANCE)
        .map_err(|e| Error::Precondition(format!("items: {e}")))?;
    let b = queries.count();
    let data: Vec<f64> = (0..b)
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = queries.row(i);
            (0..b).map(move |j| dot(q, items.row(j)) / cfg.temperature)
        })
        .collect();
    ScoreMatrix::new(b, data)
}

/// Row max, its position, and `ln(1 + sum_{j != argmax} exp(x_j - max))`.
fn max_and_log1p_tail(row: &[f64]) -> (usize, f64, f64) {
    let (argmax, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
    // Summing everything but the max and using ln_1p keeps full precision when
    // the other entries are far below the max.
    let tail: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != argmax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (argmax, max, tail.ln_1p())
}

/// Smooth max: `ln sum exp(x)`, computed with the row max factored out.
pub fn logsumexp(row: &[f64]) -> f64 {
    if row.is_empty() {
        return f64::NEG_INFINITY;
    }
    let (_, max, log1p_tail) = max_and_log1p_tail(row);
    max + log1p_tail
}

/// Loss as the negative log of the positive's softmax probability, evaluated
/// literally as a ratio of exponentials.
pub fn loss_ratio_form(row: &[f64], positive: usize) -> f64 {
    let denom: f64 = row.iter().map(|v| v.exp()).sum();
    -(row[positive].exp() / denom).ln()
}

/// Loss as `ln sum exp(s) - s_+`, without max shifting.
pub fn loss_rearranged_form(row: &[f64], positive: usize) -> f64 {
    row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[positive]
}

/// Loss as `smooth_max(s) - s_+` with the stable log-sum-exp.
pub fn loss_smoothmax_form(row: &[f64], positive: usize) -> f64 {
    logsumexp(row) - row[positive]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub per_query_loss: Vec<f64>,
    pub mean_loss: f64,
    pub smoothmax_term: Vec<f64>,
    pub positive_term: Vec<f64>,
    /// Filled by [`hardness_stats`]; empty until then.
    pub active_negative_counts: Vec<usize>,
}

impl BatchLossReport {
    pub fn with_hardness(mut self, hardness: &HardnessStats) -> Self {
        self.active_negative_counts = hardness.active_negative_counts.clone();
        self
    }
}

/// Per-query InfoNCE with the diagonal as positive.
pub fn infonce(scores: &ScoreMatrix) -> Result<BatchLossReport> {
    scores.check_finite()?;
    let b = scores.size();
    let mut per_query_loss = Vec::with_capacity(b);
    let mut smoothmax_term = Vec::with_capacity(b);
    let mut positive_term = Vec::with_capacity(b);
    for (i, row) in scores.rows().take(b).enumerate() {
        let (_, max, log1p_tail) = max_and_log1p_tail(row);
        smoothmax_term.push(max + log1p_tail);
        positive_term.push(row[i]);
        // (max - positive) is exact when the positive is the max, so small
        // losses keep their precision instead of cancelling against the score.
        per_query_loss.push(((max - row[i]) + log1p_tail).max(0.0));
    }
    let mean_loss = if b == 0 {
        0.0
    } else {
        per_query_loss.iter().sum::<f64>() / b as f64
    };
    Ok(BatchLossReport {
        per_query_loss,
        mean_loss,
        smoothmax_term,
        positive_term,
        active_negative_counts: Vec::new(),
    })
}

/// Gradient of the row-averaged loss with respect to every score:
/// `(softmax(row_i) - e_i) / B`.
pub fn infonce_gradient(scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    let per_query = infonce_gradient_per_query(scores)?;
    let b = scores.size() as f64;
    let data = per_query.data.iter().map(|g| g / b).collect();
    ScoreMatrix::new(scores.size(), data)
}

/// Unaveraged per-query gradient `softmax(row_i) - e_i`. Each row sums to 0.
pub fn infonce_gradient_per_query(scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    scores.check_finite()?;
    let b = scores.size();
    let mut data = Vec::with_capacity(b * b);
    for (i, row) in scores.rows().take(b).enumerate() {
        let lse = logsumexp(row);
        data.extend(
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - lse).exp() - if i == j { 1.0 } else { 0.0 }),
        );
    }
    ScoreMatrix::new(b, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessStats {
    pub margin: f64,
    /// Per query: negatives scoring at least `positive - margin`.
    pub active_negative_counts: Vec<usize>,
    pub mean_active: f64,
    /// Fraction of queries with no active negative at all.
    pub fraction_without_active: f64,
}

/// Count "active" negatives: off-diagonal `j` with `s_ij >= s_ii - margin`.
pub fn hardness_stats(scores: &ScoreMatrix, margin: f64) -> Result<HardnessStats> {
    scores.check_finite()?;
    if !(margin >= 0.0) {
        return Err(Error::Parameter(format!("margin must be non-negative, got {margin}")));
    }
    let b = scores.size();
    let counts: Vec<usize> = scores
        .rows()
        .take(b)
        .enumerate()
        .map(|(i, row)| {
            let threshold = row[i] - margin;
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v >= threshold)
                .count()
        })
        .collect();
    let (mean_active, fraction_without_active) = if b == 0 {
        (0.0, 0.0)
    } else {
        (
            counts.iter().sum::<usize>() as f64 / b as f64,
            counts.iter().filter(|&&c| c == 0).count() as f64 / b as f64,
        )
    };
    Ok(HardnessStats {
        margin,
        active_negative_counts: counts,
        mean_active,
        fraction_without_active,
    })
}

/// How far the smooth max sits above the hard max: `logsumexp(row) - max(row)`,
/// always in `[0, ln B]`.
pub fn smoothmax_gap(scores_row: &[f64]) -> Result<f64> {
    if scores_row.is_empty() {
        return Err(Error::Parameter("smoothmax_gap of an empty row".into()));
    }
    if scores_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    Ok(max_and_log1p_tail(scores_row).2)
}

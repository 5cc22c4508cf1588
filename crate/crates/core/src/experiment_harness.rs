//! Desk-scale comparison of shuffled and cluster-stratified batching.
//!
//! Synthetic clustered pairs stand in for a real corpus. Both arms are scored
//! with frozen embeddings over one epoch, so any loss difference comes from
//! batch composition alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch_planner::{self, BatchManifest, BatchPlanConfig};
use crate::contrastive_loss::{self, LossConfig, DEFAULT_HARDNESS_MARGIN};
use crate::corpus_io::{sha256_tagged, EmbeddingSet, PairDataset, PairRecord};
use crate::error::{Error, Result};
use crate::seeding::{self, domain};
use crate::sphere_kmeans::{self, DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::stratifier::{self, Side, StratificationPlan};

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub pairs_per_cluster: usize,
    pub dim: usize,
    /// Inverse scale of the Gaussian spread around each center.
    pub concentration: f64,
    /// Scale of the Gaussian displacement of each query from its item.
    pub query_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.pairs_per_cluster == 0 {
            return Err(Error::Parameter("n_clusters and pairs_per_cluster must be positive".into()));
        }
        if self.dim < 2 {
            return Err(Error::Parameter(format!("dim must be at least 2, got {}", self.dim)));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(Error::Parameter(format!("concentration must be positive, got {}", self.concentration)));
        }
        if !(self.query_noise >= 0.0) || !self.query_noise.is_finite() {
            return Err(Error::Parameter(format!("query_noise must be non-negative, got {}", self.query_noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub queries: EmbeddingSet,
    pub items: EmbeddingSet,
    pub pairs: PairDataset,
    /// Generating cluster of each pair.
    pub labels: Vec<usize>,
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

/// Draw uniform unit centers, then per pair
/// `item = normalize(center + g / concentration)` and
/// `query = normalize(item + g' * query_noise)`.
///
/// Pair `i` belongs to cluster `i % n_clusters`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = seeding::stream(spec.seed, &[domain::SYNTHETIC]);
    let d = spec.dim;
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| loop {
            if let Some(c) = normalized(&gaussian(&mut rng, d)) {
                break c;
            }
        })
        .collect();

    let n = spec.n_clusters * spec.pairs_per_cluster;
    let mut item_data = Vec::with_capacity(n * d);
    let mut query_data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_clusters;
        let item = loop {
            let g = gaussian(&mut rng, d);
            let raw: Vec<f64> = centers[c].iter().zip(&g).map(|(m, e)| m + e / spec.concentration).collect();
            if let Some(v) = normalized(&raw) {
                break v;
            }
        };
        let query = loop {
            let g = gaussian(&mut rng, d);
            let raw: Vec<f64> = item.iter().zip(&g).map(|(m, e)| m + e * spec.query_noise).collect();
            if let Some(v) = normalized(&raw) {
                break v;
            }
        };
        item_data.extend(item.iter().map(|&v| v as f32));
        query_data.extend(query.iter().map(|&v| v as f32));
        labels.push(c);
        records.push(PairRecord {
            pair_id: format!("syn-{i:07}"),
            query_ref: format!("q{i}"),
            item_ref: format!("d{i}"),
        });
    }
    Ok(SyntheticCorpus {
        queries: EmbeddingSet::new_normalized(n, d, query_data)?,
        items: EmbeddingSet::new_normalized(n, d, item_data)?,
        pairs: PairDataset::new(records)?,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub k: usize,
    pub side: Side,
    pub max_iters: usize,
    pub tol: f64,
    /// `seed` here is the master seed for clustering and both arms. Comparisons
    /// score a single epoch, and the report records `epochs = 1`.
    pub batch: BatchPlanConfig,
    pub loss: LossConfig,
    pub hardness_margin: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            side: Side::Item,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            batch: BatchPlanConfig::default(),
            loss: LossConfig::default(),
            hardness_margin: DEFAULT_HARDNESS_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub batch_id: usize,
    pub stratum: usize,
    pub size: usize,
    pub mean_loss: f64,
    pub mean_active: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub batches: usize,
    pub queries: usize,
    /// Mean per-query loss over every scored query.
    pub mean_loss: f64,
    /// Sample variance of per-batch mean losses.
    pub batch_loss_variance: f64,
    pub mean_active_negatives: f64,
    pub fraction_without_active: f64,
    pub manifest_digest: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub mean_loss_shuffled: f64,
    pub mean_loss_stratified: f64,
    /// `mean_loss_stratified - mean_loss_shuffled`.
    pub loss_gap: f64,
    pub per_batch_shuffled: Vec<BatchLoss>,
    pub per_batch_stratified: Vec<BatchLoss>,
    pub hardness_shuffled: ArmSummary,
    pub hardness_stratified: ArmSummary,
    pub cluster_sizes: Vec<usize>,
    pub kmeans_objective: f64,
    pub config: CompareConfig,
    pub config_digest: String,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let row = |a: &ArmSummary| {
            format!(
                "{:<11}{:>9}{:>9}{:>13.6}{:>15.6}{:>13.3}{:>13.3}\n",
                a.label,
                a.batches,
                a.queries,
                a.mean_loss,
                a.batch_loss_variance,
                a.mean_active_negatives,
                a.fraction_without_active
            )
        };
        let mut out = format!(
            "{:<11}{:>9}{:>9}{:>13}{:>15}{:>13}{:>13}\n",
            "arm", "batches", "queries", "mean_loss", "batch_var", "mean_active", "no_active"
        );
        out.push_str(&row(&self.hardness_shuffled));
        out.push_str(&row(&self.hardness_stratified));
        out.push_str(&format!("loss_gap (stratified - shuffled) = {:.6}\n", self.loss_gap));
        out.push_str(&format!("config_digest = {}\n", self.config_digest));
        out
    }

    /// Two-column `batch<TAB>loss` series for one arm.
    pub fn series_tsv(batches: &[BatchLoss]) -> String {
        let mut out = String::from("batch\tloss\n");
        for (i, b) in batches.iter().enumerate() {
            out.push_str(&format!("{i}\t{:.9}\n", b.mean_loss));
        }
        out
    }
}

struct ArmResult {
    per_batch: Vec<BatchLoss>,
    summary: ArmSummary,
}

fn score_arm(
    label: &str,
    manifest: &BatchManifest,
    queries: &EmbeddingSet,
    items: &EmbeddingSet,
    loss: &LossConfig,
    margin: f64,
) -> Result<ArmResult> {
    let scored: Vec<(BatchLoss, f64, usize, usize)> = manifest
        .epoch(0)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|b| {
            let q = queries.select(&b.pair_indices)?;
            let it = items.select(&b.pair_indices)?;
            let scores = contrastive_loss::similarity_matrix(&q, &it, loss)?;
            let report = contrastive_loss::infonce(&scores)?;
            let hard = contrastive_loss::hardness_stats(&scores, margin)?;
            let loss_sum: f64 = report.per_query_loss.iter().sum();
            let active: usize = hard.active_negative_counts.iter().sum();
            let without = hard.active_negative_counts.iter().filter(|&&c| c == 0).count();
            Ok((
                BatchLoss {
                    batch_id: b.batch_id,
                    stratum: b.stratum,
                    size: b.pair_indices.len(),
                    mean_loss: report.mean_loss,
                    mean_active: hard.mean_active,
                },
                loss_sum,
                active,
                without,
            ))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::Parameter(format!(
            "the {label} arm produced no batches; lower batch_size or use keep_short"
        )));
    }
    let queries_scored: usize = scored.iter().map(|s| s.0.size).sum();
    let loss_total: f64 = scored.iter().map(|s| s.1).sum();
    let active_total: usize = scored.iter().map(|s| s.2).sum();
    let without_total: usize = scored.iter().map(|s| s.3).sum();
    let per_batch: Vec<BatchLoss> = scored.into_iter().map(|s| s.0).collect();
    let nb = per_batch.len() as f64;
    let batch_mean = per_batch.iter().map(|b| b.mean_loss).sum::<f64>() / nb;
    let batch_loss_variance = if per_batch.len() > 1 {
        per_batch.iter().map(|b| (b.mean_loss - batch_mean).powi(2)).sum::<f64>() / (nb - 1.0)
    } else {
        0.0
    };
    let summary = ArmSummary {
        label: label.to_string(),
        batches: per_batch.len(),
        queries: queries_scored,
        mean_loss: loss_total / queries_scored as f64,
        batch_loss_variance,
        mean_active_negatives: active_total as f64 / queries_scored as f64,
        fraction_without_active: without_total as f64 / queries_scored as f64,
        manifest_digest: manifest.digest(),
        warnings: manifest.warnings.clone(),
    };
    Ok(ArmResult { per_batch, summary })
}

/// Cluster on the configured side, plan both arms for one epoch, and score
/// every batch of each.
///
/// The two arms shuffle on independent streams derived from the master seed,
/// so with `k = 1` they differ only by shuffle order.
pub fn compare(
    queries: &EmbeddingSet,
    items: &EmbeddingSet,
    d: &PairDataset,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    d.check_aligned(queries, "query embeddings")?;
    d.check_aligned(items, "item embeddings")?;
    queries.require_normalized("query embeddings")?;
    items.require_normalized("item embeddings")?;
    cfg.loss.validate()?;
    cfg.batch.validate()?;
    let cfg = &CompareConfig {
        batch: BatchPlanConfig { epochs: 1, ..cfg.batch },
        ..*cfg
    };

    let seed = cfg.batch.seed;
    let clustered = match cfg.side {
        Side::Query => queries,
        Side::Item => items,
    };
    let model = sphere_kmeans::fit(clustered, cfg.k, cfg.max_iters, cfg.tol, seed)?;
    let plan: StratificationPlan = stratifier::split(d, &model, cfg.side, "compare")?;

    let arm_cfg = |tag: u64| BatchPlanConfig {
        seed: seeding::derive_seed(seed, &[tag]),
        ..cfg.batch
    };
    let stratified = batch_planner::plan(&plan, &arm_cfg(domain::ARM_STRATIFIED))?;
    let shuffled = batch_planner::plan_unstratified(d, &arm_cfg(domain::ARM_SHUFFLED))?;

    let (strat, shuf) = rayon::join(
        || score_arm("stratified", &stratified, queries, items, &cfg.loss, cfg.hardness_margin),
        || score_arm("shuffled", &shuffled, queries, items, &cfg.loss, cfg.hardness_margin),
    );
    let (strat, shuf) = (strat?, shuf?);

    let digest_input = serde_json::json!({
        "config": cfg,
        "queries": queries.checksum(),
        "items": items.checksum(),
        "pairs": sha256_tagged(d.to_tsv().as_bytes()),
    });
    Ok(ComparisonReport {
        mean_loss_shuffled: shuf.summary.mean_loss,
        mean_loss_stratified: strat.summary.mean_loss,
        loss_gap: strat.summary.mean_loss - shuf.summary.mean_loss,
        per_batch_shuffled: shuf.per_batch,
        per_batch_stratified: strat.per_batch,
        hardness_shuffled: shuf.summary,
        hardness_stratified: strat.summary,
        cluster_sizes: model.cluster_sizes(),
        kmeans_objective: model.final_objective(),
        config: *cfg,
        config_digest: sha256_tagged(digest_input.to_string().as_bytes()),
    })
}

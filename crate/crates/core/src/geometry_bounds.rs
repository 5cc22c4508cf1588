//! Triangle-inequality bounds on cosine similarity between unit vectors.
//!
//! For unit vectors the chordal distance is `sqrt(2 - 2 cos)`. Given
//! `a = |q - p|` and `b = |p - n|`, the triangle inequality pins
//! `c = |q - n|` to `|a - b| <= c <= min(a + b, 2)`, which converts back to
//! cosine bounds on `sim(q, n)`:
//!
//! ```text
//! upper = 1 - (a - b)^2 / 2          = s_qp + s_pn - 1 + 2 sqrt((1 - s_qp)(1 - s_pn))
//! lower = 1 - min(a + b, 2)^2 / 2    = max(s_qp + s_pn - 1 - 2 sqrt((1 - s_qp)(1 - s_pn)), -1)
//! ```
//!
//! The closed forms on the right are what is evaluated; they avoid a
//! square-then-sqrt round trip, so the bounds collapse exactly onto the other
//! input when either similarity is exactly 1.

use serde::{Deserialize, Serialize};

use crate::corpus_io::{dot, EmbeddingSet};
use crate::error::{Error, Result};
use crate::seeding::{self, domain};
use crate::sphere_kmeans::ClusterModel;
use crate::stratifier::StratificationPlan;

const DOMAIN_SLACK: f64 = 1e-9;

/// A lower bound at or below this is treated as saying nothing.
pub const VACUOUS_LOWER: f64 = -0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBounds {
    pub lower: f64,
    pub upper: f64,
}

impl SimilarityBounds {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, sim: f64, slack: f64) -> bool {
        sim >= self.lower - slack && sim <= self.upper + slack
    }
}

fn check_similarity(name: &str, s: f64) -> Result<f64> {
    if !s.is_finite() || !(-1.0 - DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&s) {
        return Err(Error::Domain(format!("{name} = {s} lies outside [-1, 1]")));
    }
    Ok(s.clamp(-1.0, 1.0))
}

/// Bounds on `sim(q, n)` from `sim(q, p)` and `sim(p, n)`.
pub fn third_side_bounds(sim_qp: f64, sim_pn: f64) -> Result<SimilarityBounds> {
    let s1 = check_similarity("sim_qp", sim_qp)?;
    let s2 = check_similarity("sim_pn", sim_pn)?;
    // (hi - 1) + lo is exact when hi == 1.
    let (hi, lo) = if s1 >= s2 { (s1, s2) } else { (s2, s1) };
    let base = (hi - 1.0) + lo;
    let cross = 2.0 * ((1.0 - s1) * (1.0 - s2)).sqrt();
    Ok(SimilarityBounds {
        lower: (base - cross).max(-1.0),
        upper: (base + cross).min(1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuaranteeConfig {
    /// Items sampled per stratum for the minimum pairwise similarity.
    pub items_per_stratum: usize,
    /// Queries sampled per stratum (drawn from pairs whose item is sampled).
    pub queries_per_stratum: usize,
    pub seed: u64,
}

impl Default for GuaranteeConfig {
    fn default() -> Self {
        Self {
            items_per_stratum: 500,
            queries_per_stratum: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: usize,
    pub sampled_items: usize,
    /// Minimum item-item similarity over the sample.
    pub min_pairwise_item_sim: f64,
    pub sampled_queries: usize,
}

/// One sampled query. Every bound covers the sampled items only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeRow {
    pub stratum: usize,
    pub pair_index: usize,
    pub sim_query_item: f64,
    /// Certified minimum of `sim(query, n)` over sampled in-stratum items `n`.
    pub certified_in_lower: f64,
    /// Measured minimum of the same quantity.
    pub measured_in_min: f64,
    /// Certified maximum of `sim(query, n)` over sampled items of every other
    /// stratum, anchored per stratum on the sampled item farthest from the
    /// query. `None` when there is no other stratum with a usable sample.
    pub certified_out_upper: Option<f64>,
    pub measured_out_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub config: GuaranteeConfig,
    pub strata: Vec<StratumSummary>,
    pub rows: Vec<GuaranteeRow>,
    pub warnings: Vec<String>,
    /// Anchor rule for the out-of-stratum bound, recorded with the output.
    pub out_anchor: String,
}

impl GuaranteeReport {
    /// Fraction of rows whose certified in-stratum lower bound is at or below
    /// [`VACUOUS_LOWER`].
    pub fn vacuous_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.certified_in_lower <= VACUOUS_LOWER).count() as f64 / self.rows.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = format!(
            "# items_per_stratum={}\n# queries_per_stratum={}\n# seed={}\n# out_anchor={}\n",
            self.config.items_per_stratum, self.config.queries_per_stratum, self.config.seed, self.out_anchor
        );
        for w in &self.warnings {
            out.push_str(&format!("# warning={w}\n"));
        }
        out.push_str("stratum\tpair_index\tsim_query_item\tcertified_in_lower\tmeasured_in_min\tcertified_out_upper\tmeasured_out_max\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
                r.stratum,
                r.pair_index,
                r.sim_query_item,
                r.certified_in_lower,
                r.measured_in_min,
                opt(r.certified_out_upper),
                opt(r.measured_out_max)
            ));
        }
        out
    }
}

fn seeded_subset(members: &[usize], n: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    if members.len() <= n {
        return members.to_vec();
    }
    let mut rng = seeding::stream(seed, tags);
    let mut out: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), n)
        .into_iter()
        .map(|j| members[j])
        .collect();
    out.sort_unstable();
    out
}

struct StratumSample {
    items: Vec<usize>,
    min_pairwise: f64,
}

/// Compare certified in-stratum hardness with what the embeddings show.
///
/// For each stratum a seeded sample of items gives the minimum pairwise item
/// similarity `m`. For a sampled query `q` with item `p` in that sample, every
/// other sampled in-stratum item `n` has `sim(p, n) >= m`, and the lower bound
/// is increasing in `sim(p, n)`, so `third_side_bounds(sim(q, p), m).lower`
/// is a certified floor on `sim(q, n)`.
///
/// For the out-of-stratum side, each other stratum is anchored on its sampled
/// item `f` farthest from `q`. Items `n` there satisfy
/// `|q - n| >= |q - f| - max_diam`, giving a certified ceiling whenever
/// `|q - f|` exceeds that stratum's sampled diameter (and 1 otherwise).
pub fn cluster_guarantee_report(
    items: &EmbeddingSet,
    m: &ClusterModel,
    s: &StratificationPlan,
    query_embeddings: &EmbeddingSet,
    cfg: &GuaranteeConfig,
) -> Result<GuaranteeReport> {
    items.require_normalized("item embeddings")?;
    query_embeddings.require_normalized("query embeddings")?;
    let n = s.len();
    if items.count() != n || query_embeddings.count() != n || m.assignments.len() != n {
        return Err(Error::Shape(format!(
            "misaligned inputs: plan covers {n} pairs, items {}, queries {}, assignments {}",
            items.count(),
            query_embeddings.count(),
            m.assignments.len()
        )));
    }
    if items.dim() != query_embeddings.dim() {
        return Err(Error::Shape("query and item embeddings differ in dim".into()));
    }
    if cfg.items_per_stratum < 2 || cfg.queries_per_stratum == 0 {
        return Err(Error::Parameter(
            "items_per_stratum must be >= 2 and queries_per_stratum >= 1".into(),
        ));
    }

    let mut warnings = Vec::new();
    let samples: Vec<Option<StratumSample>> = s
        .strata()
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let sample = seeded_subset(members, cfg.items_per_stratum, cfg.seed, &[domain::GUARANTEE_SAMPLE, 0, c as u64]);
            if sample.len() < 2 {
                warnings.push(format!("stratum {c} has fewer than 2 sampled items; skipped"));
                return None;
            }
            let mut min_pairwise = f64::INFINITY;
            for (a, &i) in sample.iter().enumerate() {
                for &j in &sample[a + 1..] {
                    min_pairwise = min_pairwise.min(dot(items.row(i), items.row(j)));
                }
            }
            Some(StratumSample {
                items: sample,
                min_pairwise: min_pairwise.clamp(-1.0, 1.0),
            })
        })
        .collect();

    let chord = |sim: f64| (2.0 - 2.0 * sim.clamp(-1.0, 1.0)).max(0.0).sqrt();

    let mut strata = Vec::new();
    let mut rows = Vec::new();
    for (c, sample) in samples.iter().enumerate() {
        let Some(sample) = sample else { continue };
        let queries = seeded_subset(&sample.items, cfg.queries_per_stratum, cfg.seed, &[domain::GUARANTEE_SAMPLE, 1, c as u64]);
        strata.push(StratumSummary {
            stratum: c,
            sampled_items: sample.items.len(),
            min_pairwise_item_sim: sample.min_pairwise,
            sampled_queries: queries.len(),
        });
        for &p in &queries {
            let q = query_embeddings.row(p);
            let sim_qp = dot(q, items.row(p)).clamp(-1.0, 1.0);
            let certified_in_lower = third_side_bounds(sim_qp, sample.min_pairwise)?.lower;
            let measured_in_min = sample
                .items
                .iter()
                .filter(|&&j| j != p)
                .map(|&j| dot(q, items.row(j)))
                .fold(f64::INFINITY, f64::min);

            let mut certified_out_upper: Option<f64> = None;
            let mut measured_out_max: Option<f64> = None;
            for (other, other_sample) in samples.iter().enumerate() {
                let Some(other_sample) = other_sample else { continue };
                if other == c {
                    continue;
                }
                let sims: Vec<f64> = other_sample.items.iter().map(|&j| dot(q, items.row(j))).collect();
                let anchor_sim = sims.iter().copied().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
                let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let bound = if chord(anchor_sim) >= chord(other_sample.min_pairwise) {
                    third_side_bounds(anchor_sim, other_sample.min_pairwise)?.upper
                } else {
                    1.0
                };
                certified_out_upper = Some(certified_out_upper.map_or(bound, |b: f64| b.max(bound)));
                measured_out_max = Some(measured_out_max.map_or(max_sim, |b: f64| b.max(max_sim)));
            }
            rows.push(GuaranteeRow {
                stratum: c,
                pair_index: p,
                sim_query_item: sim_qp,
                certified_in_lower,
                measured_in_min,
                certified_out_upper,
                measured_out_max,
            });
        }
    }
    Ok(GuaranteeReport {
        config: *cfg,
        strata,
        rows,
        warnings,
        out_anchor: "per other stratum, the sampled item least similar to the query".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_when_query_equals_positive() {
        for s in [-1.0, -0.37, 0.0, 0.1, 0.5, 0.999] {
            let b = third_side_bounds(1.0, s).unwrap();
            assert_eq!((b.lower, b.upper), (s, s));
            let b = third_side_bounds(s, 1.0).unwrap();
            assert_eq!((b.lower, b.upper), (s, s));
        }
    }

    #[test]
    fn antipodal_positive_pins_the_negative() {
        // q = -p and n = p  =>  sim(q, n) = -1.
        let b = third_side_bounds(-1.0, 1.0).unwrap();
        assert_eq!((b.lower, b.upper), (-1.0, -1.0));
    }

    #[test]
    fn orthogonal_inputs_give_full_range_lower() {
        let b = third_side_bounds(0.0, 0.0).unwrap();
        assert_eq!(b.lower, -1.0);
        assert_eq!(b.upper, 1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(third_side_bounds(1.1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(third_side_bounds(0.0, f64::NAN), Err(Error::Domain(_))));
        assert!(third_side_bounds(1.0 + 1e-10, 0.0).is_ok());
    }
}

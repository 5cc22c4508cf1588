//! Splitting a pair dataset into per-cluster strata, and cluster density
//! statistics.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{self, dot, sha256_tagged, EmbeddingSet, PairDataset, Sidecar};
use crate::error::{Error, Result};
use crate::seeding::{self, domain};
use crate::sphere_kmeans::ClusterModel;

/// Points sampled per cluster (and overall) for density statistics.
pub const DEFAULT_STATS_SAMPLE_SIZE: usize = 3000;

/// Which side of each pair was embedded to drive the clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Item,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Query => "query",
            Side::Item => "item",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Side::Query),
            "item" => Ok(Side::Item),
            other => Err(Error::Parameter(format!("side must be query or item, got {other:?}"))),
        }
    }
}

/// A partition of pair indices `0..N` into `k` nonempty strata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratificationPlan {
    k: usize,
    strata: Vec<Vec<usize>>,
    side: Side,
    source_model_id: String,
}

impl StratificationPlan {
    /// Validate and wrap explicit strata. Every index in `0..N` (N = total
    /// size) must appear exactly once and no stratum may be empty.
    pub fn new(strata: Vec<Vec<usize>>, side: Side, source_model_id: impl Into<String>) -> Result<Self> {
        let source_model_id = source_model_id.into();
        if source_model_id.contains(['\n', '\r']) {
            return Err(Error::Parameter("source_model_id must be a single line".into()));
        }
        if strata.is_empty() {
            return Err(Error::Integrity("a plan needs at least one stratum".into()));
        }
        let n: usize = strata.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for (s, members) in strata.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Integrity(format!("stratum {s} is empty")));
            }
            for &i in members {
                if i >= n || seen[i] {
                    return Err(Error::Integrity(format!(
                        "stratum {s} lists index {i}, which is out of range or repeated"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Self {
            k: strata.len(),
            strata,
            side,
            source_model_id,
        })
    }

    /// The whole dataset as one stratum; the shuffled control arm.
    pub fn unstratified(n: usize) -> Result<Self> {
        Self::new(vec![(0..n).collect()], Side::Item, "unstratified")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn strata(&self) -> &[Vec<usize>] {
        &self.strata
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn source_model_id(&self) -> &str {
        &self.source_model_id
    }

    pub fn len(&self) -> usize {
        self.strata.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stratum index of every pair, indexed by pair.
    pub fn stratum_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (s, members) in self.strata.iter().enumerate() {
            for &i in members {
                out[i] = s;
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.strata.iter().map(Vec::len).collect()
    }

    /// `pair_index<TAB>stratum` lines in pair order.
    pub fn assignments_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.stratum_of().into_iter().enumerate() {
            out.push_str(&format!("{i}\t{s}\n"));
        }
        out
    }

    pub fn meta_text(&self) -> String {
        format!(
            "k={}\ncount={}\nside={}\nsource_model_id={}\n",
            self.k,
            self.len(),
            self.side,
            self.source_model_id
        )
    }

    /// Checksum over the persisted representation; batch manifests record it
    /// to tie themselves to the plan they were built from.
    pub fn digest(&self) -> String {
        let mut bytes = self.meta_text().into_bytes();
        bytes.extend_from_slice(self.assignments_text().as_bytes());
        sha256_tagged(&bytes)
    }

    pub fn file_contents(&self, path: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        vec![
            (path.to_path_buf(), self.assignments_text().into_bytes()),
            (corpus_io::meta_path(path), self.meta_text().into_bytes()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        corpus_io::write_all_atomic(&self.file_contents(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = corpus_io::meta_path(path);
        let meta = Sidecar::read(&meta_path)?;
        let k: usize = meta.parsed("k")?;
        let count: usize = meta.parsed("count")?;
        let side: Side = meta
            .require("side")?
            .parse()
            .map_err(|e: Error| Error::format(&meta_path, e.to_string()))?;
        let source_model_id = meta.require("source_model_id")?.to_string();

        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut strata = vec![Vec::new(); k];
        let mut expected = 0usize;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let (i, s) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, line_no, "expected pair_index<TAB>stratum"))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad pair index {i:?}")))?;
            let s: usize = s
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad stratum {s:?}")))?;
            if i != expected {
                return Err(Error::parse(path, line_no, format!("expected pair index {expected}, found {i}")));
            }
            if s >= k {
                return Err(Error::parse(path, line_no, format!("stratum {s} out of range for k={k}")));
            }
            strata[s].push(i);
            expected += 1;
        }
        if expected != count {
            return Err(Error::Shape(format!(
                "{} lists {expected} pairs, metadata declares {count}",
                path.display()
            )));
        }
        Self::new(strata, side, source_model_id)
    }
}

/// Pair `i` goes to stratum `m.assignments[i]`; strata keep dataset order.
pub fn split(
    d: &PairDataset,
    m: &ClusterModel,
    side: Side,
    source_model_id: &str,
) -> Result<StratificationPlan> {
    if m.assignments.len() != d.count() {
        return Err(Error::Shape(format!(
            "cluster model has {} assignments, dataset has {} pairs",
            m.assignments.len(),
            d.count()
        )));
    }
    let mut strata = vec![Vec::new(); m.k];
    for (i, &a) in m.assignments.iter().enumerate() {
        if a >= m.k {
            return Err(Error::Integrity(format!("assignment {a} of pair {i} out of range for k={}", m.k)));
        }
        strata[a].push(i);
    }
    StratificationPlan::new(strata, side, source_model_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub cluster: usize,
    pub size: usize,
    /// Points actually used for the similarity estimate.
    pub sampled: usize,
    /// Mean cosine over unordered distinct pairs of the sample; `None` for a
    /// singleton cluster.
    pub mean_pairwise_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStatsReport {
    pub per_cluster: Vec<ClusterStat>,
    pub overall_size: usize,
    pub overall_sampled: usize,
    pub overall_mean_pairwise_cosine: Option<f64>,
    pub sample_size: usize,
    pub seed: u64,
}

impl ClusterStatsReport {
    /// One row per cluster plus an `overall` row, tab-separated, preceded by
    /// `#` comment lines carrying the parameters.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = format!(
            "# sample_size={}\n# seed={}\ncluster\tsize\tsampled\tsimilarity\n",
            self.sample_size, self.seed
        );
        for c in &self.per_cluster {
            out.push_str(&format!(
                "{:03}\t{}\t{}\t{}\n",
                c.cluster,
                c.size,
                c.sampled,
                fmt(c.mean_pairwise_cosine)
            ));
        }
        out.push_str(&format!(
            "overall\t{}\t{}\t{}\n",
            self.overall_size,
            self.overall_sampled,
            fmt(self.overall_mean_pairwise_cosine)
        ));
        out
    }
}

/// Mean of `x_i . x_j` over unordered pairs `i < j` of the given rows.
///
/// Uses `sum_{i != j} x_i . x_j = |sum x|^2 - sum |x_i|^2`, so it is linear in
/// the number of rows.
pub fn mean_pairwise_cosine(e: &EmbeddingSet, rows: &[usize]) -> Option<f64> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let d = e.dim();
    let mut sum = vec![0.0f64; d];
    let mut self_dots = 0.0;
    for &i in rows {
        let row = e.row(i);
        self_dots += dot(row, row);
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    let total: f64 = sum.iter().map(|v| v * v).sum();
    let pairs = (n * (n - 1)) as f64;
    Some(((total - self_dots) / pairs).clamp(-1.0, 1.0))
}

fn sample_rows(members: &[usize], sample_size: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    if members.len() <= sample_size {
        return members.to_vec();
    }
    let mut rng = seeding::stream(seed, tags);
    let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), sample_size)
        .into_iter()
        .map(|j| members[j])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-cluster and overall density: draw `min(sample_size, size)` points
/// without replacement and average cosine similarity over all distinct
/// unordered pairs of the sample.
pub fn cluster_stats(
    e: &EmbeddingSet,
    m: &ClusterModel,
    sample_size: usize,
    seed: u64,
) -> Result<ClusterStatsReport> {
    e.require_normalized("embedding set")?;
    if sample_size < 2 {
        return Err(Error::Parameter(format!("sample_size must be at least 2, got {sample_size}")));
    }
    if m.assignments.len() != e.count() {
        return Err(Error::Shape(format!(
            "cluster model has {} assignments, embedding set has {} rows",
            m.assignments.len(),
            e.count()
        )));
    }
    let per_cluster = m
        .members()
        .into_iter()
        .enumerate()
        .map(|(c, members)| {
            let sample = sample_rows(&members, sample_size, seed, &[domain::STATS_SAMPLE, c as u64]);
            ClusterStat {
                cluster: c,
                size: members.len(),
                sampled: sample.len(),
                mean_pairwise_cosine: mean_pairwise_cosine(e, &sample),
            }
        })
        .collect();
    let all: Vec<usize> = (0..e.count()).collect();
    let overall = sample_rows(&all, sample_size, seed, &[domain::STATS_SAMPLE, u64::MAX]);
    Ok(ClusterStatsReport {
        per_cluster,
        overall_size: e.count(),
        overall_sampled: overall.len(),
        overall_mean_pairwise_cosine: mean_pairwise_cosine(e, &overall),
        sample_size,
        seed,
    })
}

//! Spherical k-means over unit-norm embeddings.
//!
//! Similarity is the dot product (cosine for unit vectors); centroids are the
//! normalized means of their members. Initialization is k-means++ with the
//! cosine distance `1 - dot`, which on the unit sphere is half the squared
//! chordal distance, so sampling proportional to it is the usual D^2 rule.
//!
//! Empty clusters are reseeded to the point with the lowest similarity to its
//! own centroid, which keeps every cluster populated and never lowers the
//! objective.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{self, dot, l2_norm, EmbeddingSet, Sidecar, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};
use crate::seeding::{self, domain};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 25;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Rows per rayon task in the assignment step.
const ASSIGN_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

/// A fitted clustering: unit-norm centroids and one assignment per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: EmbeddingSet,
    pub assignments: Vec<usize>,
    /// Mean similarity of each row to its assigned centroid, per iteration.
    pub objective_history: Vec<f64>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn final_objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Member row indices of each cluster, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    pub fn centroids_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, ".centroids.f32")
    }

    pub fn assignments_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, ".assignments")
    }

    pub fn meta_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, ".meta")
    }

    pub fn meta_text(&self) -> String {
        let history: Vec<String> = self.objective_history.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "k={}\ncount={}\ndim={}\nseed={}\nmax_iters={}\ntol={:?}\niterations={}\nfinal_objective={:?}\nobjective_history={}\n",
            self.k,
            self.assignments.len(),
            self.centroids.dim(),
            self.seed,
            self.max_iters,
            self.tol,
            self.iterations,
            self.final_objective(),
            history.join(",")
        )
    }

    pub fn assignments_text(&self) -> String {
        let mut out = String::with_capacity(self.assignments.len() * 3);
        for a in &self.assignments {
            out.push_str(&a.to_string());
            out.push('\n');
        }
        out
    }

    /// All files making up a persisted model under `prefix`.
    pub fn file_contents(&self, prefix: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = self.centroids.file_contents(&Self::centroids_path(prefix));
        files.push((Self::assignments_path(prefix), self.assignments_text().into_bytes()));
        files.push((Self::meta_path(prefix), self.meta_text().into_bytes()));
        files
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        corpus_io::write_all_atomic(&self.file_contents(prefix))
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(prefix);
        let meta = Sidecar::read(&meta_path)?;
        let k: usize = meta.parsed("k")?;
        let count: usize = meta.parsed("count")?;
        let seed: u64 = meta.parsed("seed")?;
        let max_iters: usize = meta.parsed("max_iters")?;
        let tol: f64 = meta.parsed("tol")?;
        let iterations: usize = meta.parsed("iterations")?;
        let history_raw = meta.require("objective_history")?;
        let objective_history = if history_raw.is_empty() {
            Vec::new()
        } else {
            history_raw
                .split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::format(&meta_path, format!("bad objective_history entry {v:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };

        let centroids = corpus_io::load_embeddings(&Self::centroids_path(prefix), None)?;
        if centroids.count() != k {
            return Err(Error::Shape(format!(
                "centroid file holds {} rows, model declares k={k}",
                centroids.count()
            )));
        }
        let centroids = if centroids.is_normalized() {
            centroids
        } else {
            let n = centroids.count();
            let d = centroids.dim();
            EmbeddingSet::new_normalized(n, d, centroids.as_slice().to_vec())?
        };

        let apath = Self::assignments_path(prefix);
        let text = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
        let mut assignments = Vec::with_capacity(count);
        for (idx, line) in text.lines().enumerate() {
            let a: usize = line
                .trim()
                .parse()
                .map_err(|_| Error::parse(&apath, idx + 1, format!("not a cluster index: {line:?}")))?;
            if a >= k {
                return Err(Error::parse(&apath, idx + 1, format!("cluster {a} out of range for k={k}")));
            }
            assignments.push(a);
        }
        if assignments.len() != count {
            return Err(Error::Shape(format!(
                "{} holds {} assignments, metadata declares {count}",
                apath.display(),
                assignments.len()
            )));
        }
        Ok(Self {
            k,
            centroids,
            assignments,
            objective_history,
            seed,
            max_iters,
            tol,
            iterations,
        })
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_k(e: &EmbeddingSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > e.count() {
        return Err(Error::Parameter(format!(
            "k={k} exceeds the number of points ({})",
            e.count()
        )));
    }
    Ok(())
}

/// Choose `k` distinct rows of `e` by greedy k-means++ under cosine distance.
///
/// The first row is uniform. Each further step draws `2 + floor(ln k)`
/// candidates with probability proportional to `1 - max_sim` to the rows
/// already chosen and keeps the candidate that leaves the smallest total
/// distance. If every remaining row coincides with a chosen one, the draw
/// falls back to uniform over the unchosen rows so the result still has `k`
/// distinct indices.
pub fn init_centroids(e: &EmbeddingSet, k: usize, seed: u64) -> Result<EmbeddingSet> {
    e.require_normalized("embedding set")?;
    check_k(e, k)?;
    let chosen = init_indices(e, k, seed);
    e.select(&chosen)
}

fn distances_to(e: &EmbeddingSet, c: &[f32], current: &[f64]) -> Vec<f64> {
    current
        .iter()
        .enumerate()
        .map(|(i, &d)| d.min((1.0 - dot(e.row(i), c)).max(0.0)))
        .collect()
}

fn weighted_draw(rng: &mut seeding::StreamRng, dist: &[f64], taken: &[bool]) -> usize {
    let total: f64 = dist.iter().zip(taken).filter(|(_, &t)| !t).map(|(d, _)| d).sum();
    if total > 0.0 {
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for i in (0..dist.len()).filter(|&i| !taken[i] && dist[i] > 0.0) {
            acc += dist[i];
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        pick.expect("positive total implies a positive-weight candidate")
    } else {
        let free: Vec<usize> = (0..dist.len()).filter(|&i| !taken[i]).collect();
        free[rng.random_range(0..free.len())]
    }
}

pub(crate) fn init_indices(e: &EmbeddingSet, k: usize, seed: u64) -> Vec<usize> {
    let n = e.count();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut rng = seeding::stream(seed, &[domain::KMEANS_INIT]);
    let mut taken = vec![false; n];

    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    taken[first] = true;
    let mut dist = distances_to(e, e.row(first), &vec![f64::INFINITY; n]);
    while chosen.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weighted_draw(&mut rng, &dist, &taken);
            let d = distances_to(e, e.row(cand), &dist);
            let potential: f64 = d.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, d));
            }
        }
        let (_, next, d) = best.expect("at least one trial");
        chosen.push(next);
        taken[next] = true;
        dist = d;
    }
    chosen
}

fn centroids_to_f64(c: &EmbeddingSet) -> Vec<f64> {
    c.as_slice().iter().map(|&v| f64::from(v)).collect()
}

#[inline]
fn dot_mixed(row: &[f32], centroid: &[f64]) -> f64 {
    row.iter().zip(centroid).map(|(&x, &c)| f64::from(x) * c).sum()
}

/// Argmax assignment with per-row similarity. Rows are processed in
/// parallel; each row's result depends only on that row, and the output keeps
/// row order, so the result is identical to a sequential pass.
fn assign_scored(e: &EmbeddingSet, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let d = e.dim();
    let scored: Vec<(usize, f64)> = e
        .as_slice()
        .par_chunks(d)
        .with_min_len(ASSIGN_CHUNK)
        .map(|row| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for c in 0..k {
                let s = dot_mixed(row, &centroids[c * d..(c + 1) * d]);
                if s > best_sim {
                    best = c;
                    best_sim = s;
                }
            }
            (best, best_sim)
        })
        .collect();
    scored.into_iter().unzip()
}

/// Assign each row to the centroid with the largest dot product; ties go to
/// the lowest cluster index.
pub fn assign(e: &EmbeddingSet, centroids: &EmbeddingSet) -> Result<Vec<usize>> {
    e.require_normalized("embedding set")?;
    if centroids.dim() != e.dim() {
        return Err(Error::Shape(format!(
            "centroids have dim {}, embeddings have dim {}",
            centroids.dim(),
            e.dim()
        )));
    }
    if centroids.count() == 0 {
        return Err(Error::Parameter("no centroids".into()));
    }
    centroids.check_unit_norm(UNIT_NORM_TOLERANCE)?;
    Ok(assign_scored(e, &centroids_to_f64(centroids), centroids.count()).0)
}

fn check_assignments(e: &EmbeddingSet, assignments: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if assignments.len() != e.count() {
        return Err(Error::Shape(format!(
            "{} assignments for {} rows",
            assignments.len(),
            e.count()
        )));
    }
    if let Some((i, &a)) = assignments.iter().enumerate().find(|(_, &a)| a >= k) {
        return Err(Error::Shape(format!("assignment {a} of row {i} out of range for k={k}")));
    }
    Ok(())
}

/// Normalized member means in `f64`, with farthest-point reseeding of empty
/// clusters.
fn update_f64(e: &EmbeddingSet, assignments: &[usize], k: usize) -> Result<Vec<f64>> {
    let d = e.dim();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (row, &a) in e.rows().zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let sum = &mut sums[c * d..(c + 1) * d];
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::DegenerateCluster { cluster: c });
        }
        sum.iter_mut().for_each(|v| *v /= norm);
    }

    let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        let sims: Vec<f64> = e
            .rows()
            .zip(assignments)
            .map(|(row, &a)| dot_mixed(row, &sums[a * d..(a + 1) * d]))
            .collect();
        let mut picked = vec![false; e.count()];
        for c in empties {
            let far = farthest(&sims, &picked, |_| true).ok_or(Error::DegenerateCluster { cluster: c })?;
            picked[far] = true;
            set_centroid_to_row(&mut sums, d, c, e.row(far));
        }
    }
    Ok(sums)
}

fn farthest(sims: &[f64], picked: &[bool], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..sims.len() {
        if picked[i] || !eligible(i) {
            continue;
        }
        if best.is_none_or(|b| sims[i] < sims[b]) {
            best = Some(i);
        }
    }
    best
}

fn set_centroid_to_row(centroids: &mut [f64], d: usize, c: usize, row: &[f32]) {
    let norm = l2_norm(row);
    for (dst, &v) in centroids[c * d..(c + 1) * d].iter_mut().zip(row) {
        *dst = f64::from(v) / norm;
    }
}

fn to_unit_f32(centroids: &[f64], k: usize, d: usize) -> Result<EmbeddingSet> {
    let data = centroids.iter().map(|&v| v as f32).collect();
    EmbeddingSet::new_normalized(k, d, data)
}

/// Recompute centroids as normalized member means. An empty cluster takes the
/// point least similar to its own updated centroid.
pub fn update_centroids(e: &EmbeddingSet, assignments: &[usize], k: usize) -> Result<EmbeddingSet> {
    check_assignments(e, assignments, k)?;
    let c = update_f64(e, assignments, k)?;
    to_unit_f32(&c, k, e.dim())
}

/// Make every cluster nonempty. Empty clusters are reseeded at the currently
/// worst-served point of a cluster with spare members and rows are reassigned;
/// this only adds options to the argmax, so no row's similarity drops. If
/// duplicate points make that loop stall, the reseeded point is placed in the
/// empty cluster directly (its similarity there is 1, the maximum).
fn ensure_nonempty(
    e: &EmbeddingSet,
    centroids: &mut [f64],
    k: usize,
    mut assignments: Vec<usize>,
    mut sims: Vec<f64>,
) -> (Vec<usize>, Vec<f64>) {
    let d = e.dim();
    for round in 0..=k {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if empties.is_empty() {
            break;
        }
        let mut picked = vec![false; e.count()];
        for &c in &empties {
            let Some(far) = farthest(&sims, &picked, |i| counts[assignments[i]] > 1) else {
                break;
            };
            picked[far] = true;
            set_centroid_to_row(centroids, d, c, e.row(far));
            if round == k {
                counts[assignments[far]] -= 1;
                counts[c] += 1;
                assignments[far] = c;
                sims[far] = dot_mixed(e.row(far), &centroids[c * d..(c + 1) * d]);
            }
        }
        if round < k {
            (assignments, sims) = assign_scored(e, centroids, k);
        }
    }
    (assignments, sims)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Alternate assignment and centroid updates until the mean similarity gains
/// less than `tol` or `max_iters` assignment passes have run.
///
/// The returned centroids are the ones the final assignments were computed
/// against, rounded to `f32`; assignments are recomputed against the rounded
/// values so that they are exactly the argmax of the persisted centroids.
pub fn fit(e: &EmbeddingSet, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<ClusterModel> {
    e.require_normalized("embedding set")?;
    check_k(e, k)?;
    if max_iters == 0 {
        return Err(Error::Parameter("max_iters must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Parameter(format!("tol must be non-negative, got {tol}")));
    }
    let d = e.dim();
    let mut centroids = centroids_to_f64(&e.select(&init_indices(e, k, seed))?);
    let mut history = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iters {
        let (a, s) = assign_scored(e, &centroids, k);
        let (a, s) = ensure_nonempty(e, &mut centroids, k, a, s);
        let objective = mean(&s);
        let gain = history.last().map(|prev| objective - prev);
        history.push(objective);
        iterations = iter + 1;
        let converged = gain.is_some_and(|g| g < tol);
        if converged || iter + 1 == max_iters {
            break;
        }
        centroids = update_f64(e, &a, k)?;
    }

    let rounded = to_unit_f32(&centroids, k, d)?;
    let mut final_centroids = centroids_to_f64(&rounded);
    let (a, s) = assign_scored(e, &final_centroids, k);
    let (assignments, _) = ensure_nonempty(e, &mut final_centroids, k, a, s);
    let centroids = to_unit_f32(&final_centroids, k, d)?;

    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        objective_history: history,
        seed,
        max_iters,
        tol,
        iterations,
    })
}

/// [`fit`] with a [`KMeansConfig`].
pub fn fit_with(e: &EmbeddingSet, cfg: &KMeansConfig) -> Result<ClusterModel> {
    fit(e, cfg.k, cfg.max_iters, cfg.tol, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::normalize_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize_rows(&EmbeddingSet::new(n, d, data).unwrap()).unwrap()
    }

    fn unit(rows: &[&[f32]]) -> EmbeddingSet {
        normalize_rows(&EmbeddingSet::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn init_with_k_equal_n_returns_every_point() {
        let e = unit(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let mut idx = init_indices(&e, 3, 11);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn init_k1_is_a_data_row() {
        let e = random_unit(20, 4, 1);
        let c = init_centroids(&e, 1, 5).unwrap();
        assert!(e.rows().any(|r| r == c.row(0)));
    }

    #[test]
    fn init_with_duplicates_still_distinct_indices() {
        let e = unit(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let mut idx = init_indices(&e, 3, 0);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn init_rejects_bad_k() {
        let e = random_unit(3, 2, 0);
        assert!(matches!(init_centroids(&e, 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(init_centroids(&e, 4, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let e = random_unit(100, 8, 3);
        assert_eq!(init_centroids(&e, 5, 9).unwrap(), init_centroids(&e, 5, 9).unwrap());
    }

    #[test]
    fn assign_exact_match_and_tie_break() {
        let c = unit(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let e = unit(&[&[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        assert_eq!(assign(&e, &c).unwrap(), vec![2, 0]);
    }

    #[test]
    fn assign_dim_mismatch() {
        let c = unit(&[&[1.0, 0.0]]);
        let e = unit(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(assign(&e, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn update_symmetric_pair() {
        let e = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = update_centroids(&e, &[0, 0], 1).unwrap();
        assert!((c.row(0)[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!((c.row(0)[1] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn update_singleton_is_the_member() {
        let e = unit(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let c = update_centroids(&e, &[0, 1], 2).unwrap();
        assert_eq!(c.row(0), e.row(0));
        assert_eq!(c.row(1), e.row(1));
    }

    #[test]
    fn update_reseeds_empty_cluster_at_farthest_point() {
        let e = unit(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]]);
        let c = update_centroids(&e, &[0, 0, 0], 2).unwrap();
        assert_eq!(c.row(1), e.row(2));
    }

    #[test]
    fn update_degenerate_mean() {
        let e = unit(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!(matches!(
            update_centroids(&e, &[0, 0], 1),
            Err(Error::DegenerateCluster { cluster: 0 })
        ));
    }

    #[test]
    fn fit_k_equals_n_gives_unit_objective() {
        let e = random_unit(7, 5, 4);
        let m = fit(&e, 7, 25, 1e-5, 1).unwrap();
        assert!((m.final_objective() - 1.0).abs() < 1e-6);
        let mut a = m.assignments.clone();
        a.sort();
        assert_eq!(a, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fit_keeps_clusters_nonempty_with_duplicates() {
        let e = unit(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let m = fit(&e, 3, 10, 0.0, 2).unwrap();
        assert!(m.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn fit_requires_normalized_input() {
        let e = EmbeddingSet::from_rows(&[[1.0f32, 0.0]]).unwrap();
        assert!(matches!(fit(&e, 1, 5, 0.0, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn model_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("model");
        let e = random_unit(60, 6, 8);
        let m = fit(&e, 4, 25, 1e-5, 3).unwrap();
        m.save(&prefix).unwrap();
        let back = ClusterModel::load(&prefix).unwrap();
        assert_eq!(back, m);
    }
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use strata::batch_planner::{Batch, BatchManifest};
use strata::contrastive_loss::ScoreMatrix;
use strata::corpus_io::EmbeddingSet;
use strata::stratifier::{Side, StratificationPlan};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Random unit rows, normalized in f32 and flagged as normalized.
pub fn random_unit_set(rng: &mut impl Rng, n: usize, dim: usize) -> EmbeddingSet {
    let data: Vec<f32> = (0..n).flat_map(|_| unit_vector(rng, dim)).map(|x| x as f32).collect();
    let raw = EmbeddingSet::new(n, dim, data).unwrap();
    strata::corpus_io::normalize_rows(&raw).unwrap()
}

pub fn random_scores(rng: &mut impl Rng, b: usize, lo: f64, hi: f64) -> ScoreMatrix {
    let data = (0..b * b).map(|_| rng.random_range(lo..=hi)).collect();
    ScoreMatrix::new(b, data).unwrap()
}

/// Mean InfoNCE over rows written out term by term.
pub fn reference_mean_loss(s: &ScoreMatrix) -> f64 {
    let b = s.size();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| s.get(i, j)).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / b as f64
}

/// Relabel a partition so labels appear in first-occurrence order.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Sum over clusters of `|sum of members|`, i.e. `N` times the spherical
/// k-means objective at the optimal centroids for the partition.
pub fn partition_score(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &l) in points.iter().zip(labels) {
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.iter().map(|s| dot64(s, s).sqrt()).sum()
}

/// Best partition into exactly `k` nonempty groups by enumerating every
/// restricted-growth labelling.
pub fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
    fn rec(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut (Vec<usize>, f64)) {
        let n = points.len();
        let i = labels.len();
        if i == n {
            if used == k {
                let score = partition_score(points, labels, k);
                if score > best.1 {
                    *best = (labels.clone(), score);
                }
            }
            return;
        }
        if k - used > n - i {
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels.push(l);
            rec(points, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    rec(points, k, &mut Vec::with_capacity(points.len()), 0, &mut best);
    best
}

/// Random partition of `0..n` into exactly `k` nonempty strata.
pub fn random_plan(rng: &mut impl Rng, n: usize, k: usize) -> StratificationPlan {
    assert!(k >= 1 && k <= n);
    let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let mut strata = vec![Vec::new(); k];
    for (i, l) in labels.into_iter().enumerate() {
        strata[l].push(i);
    }
    StratificationPlan::new(strata, Side::Item, "test").unwrap()
}

/// Named ways of corrupting a valid manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ForeignIndex,
    DuplicateIndex,
    TruncateBatch,
    IndexOutOfRange,
    RelabelStratum,
    DropBatch,
    SwapIds,
}

pub const ALL_FAULTS: [Fault; 7] = [
    Fault::ForeignIndex,
    Fault::DuplicateIndex,
    Fault::TruncateBatch,
    Fault::IndexOutOfRange,
    Fault::RelabelStratum,
    Fault::DropBatch,
    Fault::SwapIds,
];

/// Apply `fault` to a copy of `m`. Returns `None` when the manifest does not
/// have the shape the fault needs.
pub fn inject(m: &BatchManifest, s: &StratificationPlan, fault: Fault, rng: &mut impl Rng) -> Option<BatchManifest> {
    let mut out = m.clone();
    let nb = out.batches.len();
    if nb == 0 {
        return None;
    }
    let pick = rng.random_range(0..nb);
    let stratum_of = s.stratum_of();
    match fault {
        Fault::ForeignIndex => {
            let b = &out.batches[pick];
            let foreign: Vec<usize> = (0..s.len()).filter(|&i| stratum_of[i] != b.stratum).collect();
            if foreign.is_empty() {
                return None;
            }
            let slot = rng.random_range(0..b.pair_indices.len());
            let v = foreign[rng.random_range(0..foreign.len())];
            out.batches[pick].pair_indices[slot] = v;
        }
        Fault::DuplicateIndex => {
            let b = &mut out.batches[pick];
            let (a, c) = (0, b.pair_indices.len() - 1);
            if a == c {
                return None;
            }
            b.pair_indices[c] = b.pair_indices[a];
        }
        Fault::TruncateBatch => {
            out.batches[pick].pair_indices.pop();
        }
        Fault::IndexOutOfRange => {
            out.batches[pick].pair_indices[0] = s.len() + rng.random_range(0..10);
        }
        Fault::RelabelStratum => {
            let b = &mut out.batches[pick];
            if s.k() < 2 {
                b.stratum = s.k();
            } else {
                b.stratum = (b.stratum + 1 + rng.random_range(0..s.k() - 1)) % s.k();
            }
        }
        Fault::DropBatch => {
            out.batches.remove(pick);
            for (i, b) in out.batches.iter_mut().enumerate() {
                b.batch_id = i;
            }
        }
        Fault::SwapIds => {
            if nb < 2 {
                return None;
            }
            let other = (pick + 1) % nb;
            let (x, y) = (out.batches[pick].batch_id, out.batches[other].batch_id);
            out.batches[pick].batch_id = y;
            out.batches[other].batch_id = x;
        }
    }
    Some(out)
}

pub fn batch(batch_id: usize, epoch: usize, stratum: usize, pair_indices: Vec<usize>) -> Batch {
    Batch {
        batch_id,
        epoch,
        stratum,
        pair_indices,
    }
}

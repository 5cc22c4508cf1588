mod common;

use std::collections::HashMap;

use proptest::prelude::*;

use common::*;
use strata::batch_planner::{plan, validate, BatchManifest, BatchPlanConfig, RemainderPolicy};
use strata::stratifier::{Side, StratificationPlan};

fn config(batch_size: usize, epochs: usize, seed: u64, remainder_policy: RemainderPolicy) -> BatchPlanConfig {
    BatchPlanConfig {
        batch_size,
        epochs,
        seed,
        remainder_policy,
    }
}

/// Checks the manifest contract directly, without the library validator.
fn check_contract(m: &BatchManifest, s: &StratificationPlan, cfg: &BatchPlanConfig) -> Result<(), String> {
    let stratum_of = s.stratum_of();
    let mut total: HashMap<usize, usize> = HashMap::new();
    for epoch in 0..cfg.epochs {
        let mut seen = vec![false; s.len()];
        let mut per_stratum = vec![0usize; s.k()];
        let mut short = vec![0usize; s.k()];
        for b in m.batches.iter().filter(|b| b.epoch == epoch) {
            for &i in &b.pair_indices {
                if stratum_of[i] != b.stratum {
                    return Err(format!("batch {} mixes strata", b.batch_id));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(format!("index {i} repeats in epoch {epoch}"));
                }
                *total.entry(i).or_default() += 1;
            }
            per_stratum[b.stratum] += 1;
            match cfg.remainder_policy {
                RemainderPolicy::DropLast if b.pair_indices.len() != cfg.batch_size => {
                    return Err(format!("batch {} has {} indices", b.batch_id, b.pair_indices.len()));
                }
                RemainderPolicy::KeepShort if b.pair_indices.len() < cfg.batch_size => short[b.stratum] += 1,
                _ => {}
            }
        }
        for (c, &size) in s.sizes().iter().enumerate() {
            let expected = match cfg.remainder_policy {
                RemainderPolicy::DropLast => size / cfg.batch_size,
                RemainderPolicy::KeepShort => size.div_ceil(cfg.batch_size),
            };
            if per_stratum[c] != expected || short[c] > 1 {
                return Err(format!("stratum {c} has {} batches in epoch {epoch}, expected {expected}", per_stratum[c]));
            }
        }
        if cfg.remainder_policy == RemainderPolicy::KeepShort && seen.iter().any(|&x| !x) {
            return Err(format!("epoch {epoch} misses an index"));
        }
    }
    if total.values().any(|&n| n > cfg.epochs) {
        return Err("an index appears more than `epochs` times".into());
    }
    for (pos, b) in m.batches.iter().enumerate() {
        if b.batch_id != pos {
            return Err(format!("batch at position {pos} has id {}", b.batch_id));
        }
    }
    Ok(())
}

#[test]
fn same_inputs_give_byte_identical_manifests() {
    let mut r = rng(41);
    let s = random_plan(&mut r, 1000, 6);
    let cfg = config(32, 3, 17, RemainderPolicy::DropLast);
    let a = plan(&s, &cfg).unwrap().to_text();
    let b = plan(&s, &cfg).unwrap().to_text();
    assert_eq!(a, b);
    assert_ne!(a, plan(&s, &config(32, 3, 18, RemainderPolicy::DropLast)).unwrap().to_text());
}

#[test]
fn manifest_survives_disk_and_still_validates() {
    let mut r = rng(42);
    let s = random_plan(&mut r, 300, 4);
    let m = plan(&s, &config(16, 2, 3, RemainderPolicy::KeepShort)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    let back = BatchManifest::load(&path).unwrap();
    assert_eq!(back, m);
    assert!(validate(&back, &s).unwrap().is_valid());
}

#[test]
fn adding_a_stratum_leaves_other_shuffles_alone() {
    let base = StratificationPlan::new(vec![(0..40).collect(), (40..80).collect()], Side::Item, "a").unwrap();
    let grown = StratificationPlan::new(
        vec![(0..40).collect(), (40..80).collect(), (80..120).collect()],
        Side::Item,
        "b",
    )
    .unwrap();
    let cfg = config(8, 1, 5, RemainderPolicy::DropLast);
    let contents = |m: &BatchManifest, stratum: usize| {
        let mut v: Vec<Vec<usize>> = m.batches.iter().filter(|b| b.stratum == stratum).map(|b| b.pair_indices.clone()).collect();
        v.sort();
        v
    };
    let (a, b) = (plan(&base, &cfg).unwrap(), plan(&grown, &cfg).unwrap());
    assert_eq!(contents(&a, 0), contents(&b, 0));
    assert_eq!(contents(&a, 1), contents(&b, 1));
}

#[test]
fn consecutive_stratum_repeats_occur_at_chance_rate() {
    // Batch counts 5, 3, 2: the chance that two adjacent batches share a
    // stratum under a uniform shuffle is sum n(n-1) / (T(T-1)).
    let s = StratificationPlan::new(
        vec![(0..40).collect(), (40..64).collect(), (64..80).collect()],
        Side::Item,
        "interleave",
    )
    .unwrap();
    let counts = [5.0f64, 3.0, 2.0];
    let t: f64 = counts.iter().sum();
    let expected = counts.iter().map(|n| n * (n - 1.0)).sum::<f64>() / (t * (t - 1.0));

    let rates: Vec<f64> = (0..1000u64)
        .map(|seed| {
            let m = plan(&s, &config(8, 1, seed, RemainderPolicy::DropLast)).unwrap();
            let repeats = m.batches.windows(2).filter(|w| w[0].stratum == w[1].stratum).count();
            repeats as f64 / (m.batches.len() - 1) as f64
        })
        .collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!((mean - expected).abs() <= 3.0 * se, "mean {mean}, expected {expected}, se {se}");
}

#[test]
fn every_injected_fault_is_detected() {
    let mut r = rng(43);
    for case in 0..50 {
        let s = random_plan(&mut r, 200 + case * 7, 1 + case % 5);
        let policy = if case % 2 == 0 { RemainderPolicy::DropLast } else { RemainderPolicy::KeepShort };
        let m = plan(&s, &config(3 + case % 11, 1 + case % 2, case as u64, policy)).unwrap();
        for fault in ALL_FAULTS {
            if let Some(bad) = inject(&m, &s, fault, &mut r) {
                assert!(!validate(&bad, &s).unwrap().is_valid(), "case {case}: {fault:?} undetected");
            }
        }
    }
}

#[test]
fn hand_built_manifest_with_wrong_lengths_is_flagged() {
    let s = StratificationPlan::new(vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]], Side::Item, "h").unwrap();
    let mut m = plan(&s, &config(2, 1, 0, RemainderPolicy::DropLast)).unwrap();
    m.batches = vec![batch(0, 0, 0, vec![0, 1, 2]), batch(1, 0, 1, vec![4, 5])];
    let report = validate(&m, &s).unwrap();
    assert!(!report.is_valid());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn plans_honour_the_contract(
        n in 1usize..600,
        k in 1usize..9,
        batch_size in 2usize..64,
        epochs in 1usize..4,
        seed in any::<u64>(),
        keep_short in any::<bool>(),
    ) {
        prop_assume!(k <= n);
        let mut r = rng(seed ^ 0x5eed);
        let s = random_plan(&mut r, n, k);
        let policy = if keep_short { RemainderPolicy::KeepShort } else { RemainderPolicy::DropLast };
        let cfg = config(batch_size, epochs, seed, policy);
        let m = plan(&s, &cfg).unwrap();
        prop_assert_eq!(check_contract(&m, &s, &cfg), Ok(()));
        prop_assert!(validate(&m, &s).unwrap().is_valid());
        let small = s.sizes().iter().filter(|&&size| size < batch_size).count();
        if policy == RemainderPolicy::DropLast {
            prop_assert_eq!(m.warnings.len(), small);
        }
    }
}

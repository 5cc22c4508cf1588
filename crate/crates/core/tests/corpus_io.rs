mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use strata::corpus_io::{self, load_embeddings, load_pairs, normalize_rows, EmbeddingSet, PairDataset, PairRecord};

#[test]
fn large_random_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.f32");
    let mut rng = rng(11);
    let data: Vec<f32> = (0..1000 * 128).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let e = EmbeddingSet::new(1000, 128, data.clone()).unwrap();
    e.save(&path).unwrap();

    let loaded = load_embeddings(&path, Some(128)).unwrap();
    assert_eq!(loaded.count(), 1000);
    let original_bits: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
    let loaded_bits: Vec<u32> = loaded.as_slice().iter().map(|x| x.to_bits()).collect();
    assert_eq!(original_bits, loaded_bits);

    let bytes = std::fs::read(&path).unwrap();
    let meta = std::fs::read(corpus_io::meta_path(&path)).unwrap();
    let again = dir.path().join("again.f32");
    loaded.save(&again).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
    assert_eq!(meta, std::fs::read(corpus_io::meta_path(&again)).unwrap());
}

#[test]
fn fifty_random_rows_normalize_to_unit_norm() {
    let mut rng = rng(12);
    let data: Vec<f32> = (0..50 * 17).map(|_| rng.random_range(-10.0f32..10.0)).collect();
    let n = normalize_rows(&EmbeddingSet::new(50, 17, data).unwrap()).unwrap();
    for row in n.rows() {
        assert!((dot32(row, row).sqrt() - 1.0).abs() <= 1e-6);
    }
    assert!(n.is_normalized());
}

#[test]
fn normalized_flag_survives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unit.f32");
    let mut rng = rng(13);
    let e = random_unit_set(&mut rng, 20, 5);
    e.save(&path).unwrap();
    let loaded = load_embeddings(&path, None).unwrap();
    assert!(loaded.is_normalized());
    assert_eq!(loaded, e);
}

#[test]
fn pair_file_examples() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.tsv");
    std::fs::write(&good, "a\tq1\ti1\nb\tq2\ti2\nc\tq3\ti3\n").unwrap();
    let d = load_pairs(&good).unwrap();
    assert_eq!(d.count(), 3);
    assert_eq!(d.pairs()[1].pair_id, "b");

    let dup = dir.path().join("dup.tsv");
    std::fs::write(&dup, "a\tq1\ti1\na\tq2\ti2\n").unwrap();
    match load_pairs(&dup) {
        Err(strata::Error::Uniqueness { line, first_line, .. }) => assert_eq!((line, first_line), (2, 1)),
        other => panic!("expected uniqueness error, got {other:?}"),
    }

    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(load_pairs(&empty).unwrap().count(), 0);
}

proptest! {
    #[test]
    fn normalization_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 6), 1..20)) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let e = EmbeddingSet::from_rows(&rows).unwrap();
        let once = normalize_rows(&e).unwrap();
        let twice = normalize_rows(&once).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn pair_tsv_round_trips(ids in prop::collection::btree_set("[a-zA-Z0-9_.:-]{1,12}", 0..30)) {
        let pairs: Vec<PairRecord> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| PairRecord { pair_id: id.clone(), query_ref: format!("q{i}"), item_ref: format!("doc {i}") })
            .collect();
        let d = PairDataset::new(pairs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        d.save(&path).unwrap();
        let back = load_pairs(&path).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(std::fs::read_to_string(&path).unwrap(), d.to_tsv());
    }

    #[test]
    fn embedding_bytes_round_trip(rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 3), 1..10)) {
        let e = EmbeddingSet::from_rows(&rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.f32");
        e.save(&path).unwrap();
        let back = load_embeddings(&path, Some(3)).unwrap();
        prop_assert_eq!(back.to_bytes(), e.to_bytes());
    }
}

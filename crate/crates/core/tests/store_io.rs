use std::fs;

use wordlearn::decodertrain::{train_decoders, DecoderConfig};
use wordlearn::embedpack::{generate_synthetic, EmbeddingPack, Split, SyntheticConfig};
use wordlearn::evalsuite::{eval_recognition, filter_selectivity};
use wordlearn::lexicon::{load_store, save_store, Dims, Lexicon, CONCEPT_DIR, INDEX_FILE};
use wordlearn::trainer::{train_vocabulary, TrainConfig, TrainSet};
use wordlearn::Error;

fn pack() -> EmbeddingPack {
    generate_synthetic(&SyntheticConfig {
        dim: 24,
        categories: SyntheticConfig::counted_categories(&[("c", 3), ("s", 3)]),
        dims_per_category: 8,
        noise_sigma: 0.05,
        variation_sigma: 0.1,
        train_count: 90,
        test_nc_count: 0,
        test_v_count: 18,
        holdout_pairs: vec![],
        unknown_vocab: vec![],
        seed: 4,
    })
    .unwrap()
}

fn trained(pack: &EmbeddingPack) -> Lexicon {
    let set = TrainSet::new(pack, Split::Train, None);
    let mut lex = Lexicon::new(Dims::with_embedding(pack.dim), 9);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    train_vocabulary(&mut lex, &set, &set.labels(), &cfg).unwrap();
    let dcfg = DecoderConfig {
        rounds: 5,
        epochs: 1,
        batch_size: 16,
        ..DecoderConfig::default()
    };
    train_decoders(&mut lex, &set, &["c_0".to_string(), "s_1".to_string()], &dcfg).unwrap();
    lex
}

#[test]
fn store_round_trip_preserves_entries_and_metrics() {
    let pack = pack();
    let lex = trained(&pack);
    let dir = tempfile::tempdir().unwrap();
    save_store(&lex, dir.path()).unwrap();
    let back = load_store(dir.path()).unwrap();
    assert_eq!(back, lex);
    assert_eq!(back.hash(), lex.hash());
    assert_eq!(back.entry_hashes(), lex.entry_hashes());
    for split in [Split::Train, Split::TestV] {
        assert_eq!(
            eval_recognition(&back, &pack, split, None).unwrap(),
            eval_recognition(&lex, &pack, split, None).unwrap()
        );
    }
    assert_eq!(filter_selectivity(&back, &pack).unwrap(), filter_selectivity(&lex, &pack).unwrap());
}

#[test]
fn saving_twice_is_byte_identical_and_prunes_stale_files() {
    let pack = pack();
    let mut lex = trained(&pack);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_store(&lex, a.path()).unwrap();
    save_store(&lex, b.path()).unwrap();
    let listing = |d: &std::path::Path| {
        let mut v: Vec<_> = fs::read_dir(d.join(CONCEPT_DIR))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(listing(a.path()), listing(b.path()));
    assert_eq!(fs::read(a.path().join(INDEX_FILE)).unwrap(), fs::read(b.path().join(INDEX_FILE)).unwrap());

    lex.entries.remove("s_2");
    save_store(&lex, a.path()).unwrap();
    assert_eq!(listing(a.path()).len(), lex.len());
    assert_eq!(load_store(a.path()).unwrap(), lex);
}

#[test]
fn damaged_stores_are_format_errors() {
    let pack = pack();
    let lex = trained(&pack);

    let dir = tempfile::tempdir().unwrap();
    save_store(&lex, dir.path()).unwrap();
    let victim = fs::read_dir(dir.path().join(CONCEPT_DIR)).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&victim).unwrap();
    let err = load_store(dir.path()).unwrap_err();
    assert!(matches!(err, Error::MissingConcept { .. }), "{err:?}");
    assert!(err.is_format());

    let dir = tempfile::tempdir().unwrap();
    save_store(&lex, dir.path()).unwrap();
    let victim = fs::read_dir(dir.path().join(CONCEPT_DIR)).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert!(matches!(load_store(dir.path()).unwrap_err(), Error::Checksum(_)));

    let dir = tempfile::tempdir().unwrap();
    save_store(&lex, dir.path()).unwrap();
    let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
    fs::write(dir.path().join(INDEX_FILE), index.replacen("\"version\": 1", "\"version\": 7", 1)).unwrap();
    let err = load_store(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { ref field, .. } if field == "version"), "{err:?}");

    let empty = tempfile::tempdir().unwrap();
    assert!(load_store(empty.path()).unwrap_err().is_format());
}

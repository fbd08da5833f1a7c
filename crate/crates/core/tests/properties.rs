use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wordlearn::decodertrain::{edit_embedding, reconstruct_embedding};
use wordlearn::embedpack::{
    generate_synthetic, Category, CategoryMap, EmbeddingPack, Split, SyntheticConfig,
};
use wordlearn::evalsuite::{distance_table, eval_recognition, ScoreTable};
use wordlearn::lexicon::{encode, DecoderNet, Dims, Lexicon};
use wordlearn::numerics::Vec32;
use wordlearn::trainer::{assemble_batches, comparative_loss, train_concept, TrainConfig, TrainSet};

fn synth(seed: u64, noise: f64, holdout: bool) -> EmbeddingPack {
    generate_synthetic(&SyntheticConfig {
        dim: 24,
        categories: SyntheticConfig::counted_categories(&[("c", 3), ("s", 3)]),
        dims_per_category: 8,
        noise_sigma: noise,
        variation_sigma: 0.1,
        train_count: 60,
        test_nc_count: if holdout { 12 } else { 0 },
        test_v_count: 12,
        holdout_pairs: if holdout {
            vec![("c_0".into(), "s_1".into()), ("c_2".into(), "s_2".into())]
        } else {
            vec![]
        },
        unknown_vocab: vec![],
        seed,
    })
    .unwrap()
}

fn small_dims() -> Dims {
    Dims {
        embedding: 24,
        hidden: 8,
        latent: 4,
        decoder_hidden: vec![6, 6, 8],
    }
}

/// Lexicon with random filters and prototypes for every pack word.
fn random_lexicon(pack: &EmbeddingPack, seed: u64, with_decoders: bool) -> Lexicon {
    let dims = small_dims();
    let mut lex = Lexicon::new(dims.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &pack.category_map.categories {
        for w in &c.words {
            let e = lex.add_concept(w, &c.name).unwrap();
            e.net.filter_raw.mapv_inplace(|_| rng.random_range(-3.0..3.0));
            e.sample_count = 1;
            e.rep = Some(Vec32::new((0..dims.latent).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
            if with_decoders {
                e.decoder = Some(DecoderNet::init(&dims, &mut rng));
            }
        }
    }
    lex
}

prop_compose! {
    fn arb_map()(sizes in prop::collection::vec(1usize..5, 1..4)) -> CategoryMap {
        let categories = sizes
            .iter()
            .enumerate()
            .map(|(i, n)| Category { name: format!("k{i}"), words: (0..*n).map(|j| format!("k{i}w{j}")).collect() })
            .collect();
        CategoryMap::new(categories, BTreeSet::new())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn non_compatibility_is_within_category_symmetric_irreflexive(map in arb_map()) {
        let vocab = map.vocabulary();
        for a in &vocab {
            prop_assert!(!map.non_compatible(a, a));
            for b in &vocab {
                prop_assert_eq!(map.non_compatible(a, b), map.non_compatible(b, a));
                let same = map.category_of(a) == map.category_of(b);
                prop_assert_eq!(map.non_compatible(a, b), same && a != b);
            }
        }
    }

    #[test]
    fn holdout_pairs_never_in_train(seed in 0u64..500) {
        let pack = synth(seed, 0.05, true);
        for (a, b) in &pack.holdout_pairs {
            for r in &pack.records {
                if r.has(a) && r.has(b) {
                    prop_assert_eq!(r.split, Split::TestNc);
                }
            }
            prop_assert!(pack.records.iter().any(|r| r.split == Split::TestNc && r.has(a) && r.has(b)));
        }
    }

    #[test]
    fn zero_noise_rows_match_truth_on_each_category(seed in 0u64..500) {
        let pack = synth(seed, 0.0, false);
        let truth = pack.synthetic_truth.as_ref().unwrap();
        for r in pack.records.iter().filter(|r| r.split == Split::Train) {
            let row = pack.row(r);
            for l in &r.labels {
                let cat = pack.category_map.category_of(l).unwrap();
                for (k, &d) in truth.category_dims[cat].iter().enumerate() {
                    prop_assert_eq!(row[d], truth.signatures[l][k]);
                }
            }
        }
    }

    #[test]
    fn comparative_loss_is_non_negative(seed in 0u64..10_000, word in 0usize..3) {
        let pack = synth(seed % 50, 0.05, false);
        let set = TrainSet::new(&pack, Split::Train, None);
        let lex = random_lexicon(&pack, seed, false);
        let label = format!("c_{word}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = assemble_batches(&set, &label, 8, &mut rng).unwrap();
        let parts = comparative_loss(lex.get(&label).unwrap(), &pair, &pack).unwrap();
        prop_assert!(parts.loss >= 0.0);
        prop_assert!(parts.loss_s >= 0.0 && parts.loss_d >= 0.0);
        let expected = parts.loss_s.powi(2) + (1.0 - parts.loss_d).powi(2);
        prop_assert!((parts.loss - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn all_attributes_never_beats_a_category(seed in 0u64..10_000) {
        let pack = synth(seed % 50, 0.05, false);
        let lex = random_lexicon(&pack, seed, false);
        let before = lex.hash();
        for split in [Split::Train, Split::TestV] {
            let rep = eval_recognition(&lex, &pack, split, None).unwrap();
            for acc in rep.categories.values() {
                prop_assert!(rep.all.accuracy <= acc.accuracy);
            }
        }
        // evaluation leaves the lexicon alone
        prop_assert_eq!(lex.hash(), before);
    }

    #[test]
    fn ranking_survives_positive_rescaling(
        values in prop::collection::vec(0f64..10.0, 12),
        scale in 1e-3f64..1e3,
    ) {
        let labels: Vec<String> = (0..4).map(|i| format!("w{i}")).collect();
        let a = ScoreTable { labels: labels.clone(), values: Array2::from_shape_vec((3, 4), values).unwrap(), lower_is_better: true };
        let b = ScoreTable { labels, values: a.values.mapv(|v| v * scale), lower_is_better: true };
        for i in 0..3 {
            let ra: Vec<String> = a.ranking(i).into_iter().map(|x| x.0).collect();
            let rb: Vec<String> = b.ranking(i).into_iter().map(|x| x.0).collect();
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn edit_with_same_word_is_reconstruction(seed in 0u64..10_000) {
        let pack = synth(seed % 50, 0.05, false);
        let lex = random_lexicon(&pack, seed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in ["c_0", "s_2"] {
            let e = Vec32::new((0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let entry = lex.get(w).unwrap();
            let a = edit_embedding(&e, entry, entry).unwrap();
            let b = reconstruct_embedding(&e, entry).unwrap();
            let bits = |v: &Vec32| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn encode_is_pure(seed in 0u64..10_000) {
        let pack = synth(seed % 50, 0.05, false);
        let lex = random_lexicon(&pack, seed, false);
        let e = Vec32::new(pack.rows.row(0).to_vec()).unwrap();
        let entry = lex.get("s_1").unwrap();
        let before = entry.hash();
        prop_assert_eq!(encode(entry, &e).unwrap(), encode(entry, &e).unwrap());
        prop_assert_eq!(entry.hash(), before);
    }
}

#[test]
fn training_one_word_touches_only_that_entry() {
    let pack = synth(7, 0.05, false);
    let set = TrainSet::new(&pack, Split::Train, None);
    let mut lex = Lexicon::new(small_dims(), 3);
    for c in &pack.category_map.categories {
        for w in &c.words {
            lex.add_concept(w, &c.name).unwrap();
        }
    }
    let cfg = TrainConfig {
        batch_size: 16,
        max_rounds: 20,
        ..TrainConfig::default()
    };
    for target in ["c_1", "s_0"] {
        let before = lex.entry_hashes();
        train_concept(&mut lex, &set, target, &cfg).unwrap();
        let after = lex.entry_hashes();
        for (label, h) in &before {
            assert_eq!(h == &after[label], label != target, "{label}");
        }
    }
    // distance table only sees trained concepts
    let t = distance_table(&lex, pack.rows.view()).unwrap();
    assert_eq!(t.labels, vec!["c_1".to_string(), "s_0".to_string()]);
}

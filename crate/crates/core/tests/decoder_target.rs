use wordlearn::decodertrain::{decode_rep, train_decoders, DecoderConfig};
use wordlearn::embedpack::{generate_synthetic, Split, SyntheticConfig};
use wordlearn::lexicon::{Dims, Lexicon};
use wordlearn::trainer::{train_vocabulary, TrainConfig, TrainSet};

/// With filters pinned to the true category dimensions on zero-noise data,
/// the best decoder output for `p` is its signature on `p`'s dimensions and
/// zero elsewhere.
#[test]
fn decoder_learns_signature_with_saturated_filters() {
    let pack = generate_synthetic(&SyntheticConfig {
        dim: 28,
        categories: SyntheticConfig::counted_categories(&[("c", 3), ("s", 3)]),
        dims_per_category: 8,
        noise_sigma: 0.0,
        variation_sigma: 0.1,
        train_count: 120,
        test_nc_count: 0,
        test_v_count: 6,
        holdout_pairs: vec![],
        unknown_vocab: vec![],
        seed: 11,
    })
    .unwrap();
    let truth = pack.synthetic_truth.clone().unwrap();
    let set = TrainSet::new(&pack, Split::Train, None);
    let labels = set.labels();
    let mut lex = Lexicon::new(Dims::with_embedding(pack.dim), 5);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    train_vocabulary(&mut lex, &set, &labels, &cfg).unwrap();
    for e in lex.entries.values_mut() {
        let own = &truth.category_dims[&e.category];
        e.net.filter_raw.indexed_iter_mut().for_each(|(i, v)| *v = if own.contains(&i) { 30.0 } else { -30.0 });
    }

    let dcfg = DecoderConfig {
        epochs: 30,
        batch_size: 32,
        ..DecoderConfig::default()
    };
    train_decoders(&mut lex, &set, &labels, &dcfg).unwrap();

    for e in lex.entries.values() {
        let out = decode_rep(e).unwrap();
        let own = &truth.category_dims[&e.category];
        let sig = &truth.signatures[&e.label];
        for (i, &v) in out.as_slice().iter().enumerate() {
            let target = own.iter().position(|&d| d == i).map_or(0.0, |k| sig[k]);
            assert!((v - target).abs() <= 0.05, "{} dim {i}: {v} vs {target}", e.label);
        }
    }
}

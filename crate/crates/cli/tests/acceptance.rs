//! Acceptance suite: one PASS/FAIL line per criterion. Always exits 0; the
//! lines are the result.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{array, Array1, Array2, Axis};
use rand::Rng;

use wordlearn::decodertrain::{decoder_loss_and_grad_f64, decoder_loss_f64, train_decoders, DecoderConfig};
use wordlearn::embedpack::{
    generate_synthetic, read_pack, write_pack, Category, CategoryMap, EmbeddingPack, Provenance, SampleRecord,
    Split, SyntheticConfig, VocabSide, ROWS_FILE,
};
use wordlearn::evalsuite::{
    continual_protocol, eval_recognition, eval_rng, train_holdout, BaselineKind, CheckRow, ContinualConfig,
    THRESHOLDS,
};
use wordlearn::lexicon::{load_store, save_store, ConceptNet, DecoderNet, Dims, Lexicon, CONCEPT_DIR};
use wordlearn::numerics::{finite_diff_check, flatten_params, load_params, Linear};
use wordlearn::trainer::{
    comparative_loss, comparative_loss_and_grad_f64, train_vocabulary, ComparisonBatchPair, TrainConfig, TrainSet,
};
use wordlearn_cli::{check_rows, RunConfig};

const SEED: u64 = 0;
// central-difference step; at 1e-5 cancellation dominates on the smallest full-size gradients
const FD_STEP: f64 = 1e-4;

fn run_config() -> RunConfig {
    RunConfig::parse(&format!("schema = 1\nseed = {SEED}\n")).unwrap()
}

fn row(rows: &[CheckRow], n: u8) -> &CheckRow {
    rows.iter().find(|r| r.criterion == n).expect("row present")
}

struct Trained {
    pack: EmbeddingPack,
    lex: Lexicon,
    train_secs: f64,
}

/// Train concepts on the fit share, then decoders, single-threaded.
fn pipeline(pack: EmbeddingPack, seed: u64) -> Trained {
    let start = Instant::now();
    let cfg = run_config();
    let (fit, _) = train_holdout(&pack, cfg.holdout_every().unwrap());
    let mut lex = Lexicon::new(Dims::with_embedding(pack.dim), seed);
    {
        let set = TrainSet::from_records(&pack, fit);
        let labels = set.labels();
        let tc = TrainConfig {
            seed,
            threads: 1,
            ..TrainConfig::default()
        };
        train_vocabulary(&mut lex, &set, &labels, &tc).unwrap();
        let dc = DecoderConfig {
            seed,
            threads: 1,
            ..DecoderConfig::default()
        };
        train_decoders(&mut lex, &set, &labels, &dc).unwrap();
    }
    Trained {
        pack,
        lex,
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn criterion_1() -> CheckRow {
    let start = Instant::now();
    let t = &THRESHOLDS;
    let mut rng = eval_rng(SEED, "acceptance-grad");
    let pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let dims = Dims::with_embedding(pack.dim);

    // comparative loss at full size, random filter, real rows
    let mut scratch = Lexicon::new(dims.clone(), 1);
    let entry = scratch.add_concept("red", "color").unwrap();
    let mut net: ConceptNet<f64> = entry.net.cast();
    net.filter_raw.mapv_inplace(|_| rng.random_range(-2.0..2.0));
    let set = TrainSet::new(&pack, Split::Train, None);
    let rows = |label: &str, n: usize| -> Array2<f64> {
        let idx: Vec<usize> = set.indices_of(label).iter().take(n).map(|&i| set.record(i).row_index).collect();
        pack.rows.select(Axis(0), &idx).mapv(f64::from)
    };
    let sim = rows("red", 32);
    let diff = rows("blue", 32);
    let (_, analytic) = comparative_loss_and_grad_f64(&net, sim.view(), diff.view()).unwrap();
    let params = flatten_params(&mut net);
    let coords: Vec<usize> = (0..t.grad_coords + 20).map(|_| rng.random_range(0..params.len())).collect();
    let mut probe = net.clone();
    let comp = finite_diff_check(
        |p| {
            load_params(&mut probe, p);
            comparative_loss_and_grad_f64(&probe, sim.view(), diff.view()).unwrap().0
        },
        &params,
        &analytic,
        &coords,
        FD_STEP,
    );

    // decoder loss at full size with a fixed dropout pattern
    let mut dnet: DecoderNet<f64> = DecoderNet::<f32>::init(&dims, &mut eval_rng(SEED, "acceptance-dec")).cast();
    let rep: Array1<f64> = (0..dims.latent).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kq = rows("green", 16).mapv(|v| v * 0.5);
    let kp = rows("green", 16).mapv(|v| v * 0.4);
    let target = rows("green", 16);
    let (_, danalytic) =
        decoder_loss_and_grad_f64(&dnet, rep.view(), kq.view(), kp.view(), target.view(), Some(3)).unwrap();
    let dparams = flatten_params(&mut dnet);
    let dcoords: Vec<usize> = (0..t.grad_coords + 20).map(|_| rng.random_range(0..dparams.len())).collect();
    let mut dprobe = dnet.clone();
    let dec = finite_diff_check(
        |p| {
            load_params(&mut dprobe, p);
            decoder_loss_f64(&dprobe, rep.view(), kq.view(), kp.view(), target.view(), Some(3)).unwrap()
        },
        &dparams,
        &danalytic,
        &dcoords,
        FD_STEP,
    );
    let secs = start.elapsed().as_secs_f64();
    CheckRow::new(
        1,
        "gradient fidelity",
        format!(
            "comparative {comp:.2e}, decoder {dec:.2e} over {} coords each (need ≤ {:e}); {secs:.1}s (need ≤ {}s)",
            coords.len(),
            t.grad_rel_err,
            t.grad_secs
        ),
        comp <= t.grad_rel_err && dec <= t.grad_rel_err && secs <= t.grad_secs,
    )
}

fn criterion_4() -> CheckRow {
    let t = &THRESHOLDS;
    let mut drops = Vec::new();
    let mut wins = 0;
    let mut isolated = true;
    let mut detail = Vec::new();
    for seed in 0..t.continual_seeds as u64 {
        let pack = generate_synthetic(&SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut config = ContinualConfig {
            baselines: vec![BaselineKind::Linear],
            ..ContinualConfig::default()
        };
        config.train.seed = seed;
        config.baseline.seed = seed;
        let report = continual_protocol(&pack, &config).unwrap();
        let ours = report.method("comparative").unwrap();
        let linear = report.method("linear").unwrap();
        let ours_full = ours.round2_unknown_only_full.all.accuracy;
        let lin_full = linear.round2_full_full.all.accuracy;
        isolated &= report.known_entries_unchanged;
        drops.push(ours.known_drop());
        wins += (ours_full >= lin_full) as usize;
        detail.push(format!("s{seed}: drop {:.3}, ours {ours_full:.3} vs linear {lin_full:.3}", ours.known_drop()));
    }
    let max_drop = drops.iter().cloned().fold(f64::MIN, f64::max);
    CheckRow::new(
        4,
        "continual isolation and ordering",
        format!(
            "known entries unchanged {isolated}; max known drop {max_drop:.3} (need ≤ {}); ours ≥ retrained linear on {wins}/{} seeds (need ≥ {}); {}",
            t.continual_max_drop,
            t.continual_seeds,
            t.continual_min_wins,
            detail.join("; ")
        ),
        isolated && max_drop <= t.continual_max_drop && wins >= t.continual_min_wins,
    )
}

fn wordlearn(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_wordlearn"))
        .current_dir(dir)
        .env("WORDLEARN_OUT_DIR", dir.join("runs"))
        .args(args)
        .output()
        .expect("spawn wordlearn")
        .status
        .code()
        .unwrap_or(-1)
}

fn criterion_7(main: &Trained) -> CheckRow {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut notes = Vec::new();
    let mut ok = true;

    // pack round trip
    write_pack(&main.pack, &d.join("pk")).unwrap();
    let back = read_pack(&d.join("pk")).unwrap();
    let same_pack = back.rows.iter().map(|v| v.to_bits()).eq(main.pack.rows.iter().map(|v| v.to_bits()))
        && back.records == main.pack.records
        && back.category_map == main.pack.category_map;
    ok &= same_pack;
    notes.push(format!("pack round trip {same_pack}"));

    // store round trip
    save_store(&main.lex, &d.join("st")).unwrap();
    let same_store = load_store(&d.join("st")).unwrap() == main.lex;
    ok &= same_store;
    notes.push(format!("store round trip {same_store}"));

    // second run with the same seed
    let again = pipeline(main.pack.clone(), SEED);
    let reports_equal = Split::ALL.iter().all(|&s| {
        eval_recognition(&again.lex, &again.pack, s, None).unwrap()
            == eval_recognition(&main.lex, &main.pack, s, None).unwrap()
    });
    let same_lex = again.lex.hash() == main.lex.hash();
    ok &= reports_equal && same_lex;
    notes.push(format!("rerun reports identical {reports_equal}, lexicon hash identical {same_lex}"));

    // error codes through the CLI
    let mut codes = Vec::new();
    let mut expect = |what: &str, got: i32, want: i32| {
        ok &= got == want;
        codes.push(format!("{what} {got}/{want}"));
    };
    let rows = fs::read(d.join("pk").join(ROWS_FILE)).unwrap();
    fs::create_dir_all(d.join("trunc")).unwrap();
    write_pack(&main.pack, &d.join("trunc")).unwrap();
    fs::write(d.join("trunc").join(ROWS_FILE), &rows[..rows.len() - 4]).unwrap();
    expect("truncated pack", wordlearn(d, &["train", "--seed", "0", "--pack", "trunc", "--store", "x"]), 3);

    let victim = fs::read_dir(d.join("st").join(CONCEPT_DIR)).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(victim).unwrap();
    expect("missing concept", wordlearn(d, &["eval", "recognize", "--pack", "pk", "--store", "st"]), 3);

    fs::write(d.join("bad.conf"), "schema = 2\n").unwrap();
    expect("bad schema", wordlearn(d, &["train", "--config", "bad.conf"]), 2);
    expect("missing seed", wordlearn(d, &["train", "--pack", "pk", "--store", "y"]), 2);

    save_store(&main.lex, &d.join("st2")).unwrap();
    let failing = check_rows(&main.lex, &main.pack, &run_config()).unwrap().iter().any(|r| !r.pass);
    expect(
        "check",
        wordlearn(d, &["check", "--seed", "0", "--pack", "pk", "--store", "st2"]),
        if failing { 4 } else { 0 },
    );
    notes.push(format!("exit codes (got/want) {}", codes.join(", ")));
    CheckRow::new(7, "format and determinism", notes.join("; "), ok)
}

fn criterion_8() -> CheckRow {
    let t = &THRESHOLDS;
    let dims = Dims {
        embedding: 2,
        hidden: 2,
        latent: 2,
        decoder_hidden: vec![2, 2, 2],
    };
    let mut lex = Lexicon::new(dims, 0);
    let entry = lex.add_concept("w", "k").unwrap();
    // identity encoder and a fully open filter
    let eye = || Linear::from_parts(array![[1.0f32, 0.0], [0.0, 1.0]], Array1::zeros(2)).unwrap();
    entry.net.enc1 = eye();
    entry.net.enc2 = eye();
    entry.net.filter_raw.fill(40.0);
    let entry = entry.clone();

    let pack_of = |rows: Vec<[f32; 2]>| {
        let n = rows.len();
        EmbeddingPack {
            dim: 2,
            rows: Array2::from_shape_vec((n, 2), rows.concat()).unwrap(),
            records: (0..n)
                .map(|i| SampleRecord {
                    id: format!("r{i}"),
                    labels: ["w".to_string()].into_iter().collect(),
                    split: Split::Train,
                    vocab_side: VocabSide::Known,
                    row_index: i,
                })
                .collect(),
            category_map: CategoryMap::new(
                vec![Category {
                    name: "k".into(),
                    words: vec!["w".into()],
                }],
                Default::default(),
            ),
            provenance: Provenance::Synthetic,
            holdout_pairs: vec![],
            synthetic_truth: None,
            encoder_normalized: None,
        }
    };
    let pair = ComparisonBatchPair {
        target_label: "w".into(),
        sim: vec![0, 1],
        diff: vec![2, 3],
        pairing: vec![None, None],
    };
    // (sim rows, diff rows, hand value of loss_s² + (1 − loss_d)²)
    let cases: [([[f32; 2]; 4], f64); 3] = [
        // centroid (2,1); loss_s = 1; loss_d = (6.5 + 2) / 2 = 4.25
        ([[1.0, 0.0], [3.0, 2.0], [4.0, 4.0], [0.0, 1.0]], 1.0 + 3.25f64.powi(2)),
        // identical sims; diffs at MSE exactly 1
        ([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0], [0.0, 0.0]], 0.0),
        // centroid (0,0); loss_s = 0.25; loss_d = 0
        ([[0.5, -0.5], [-0.5, 0.5], [0.0, 0.0], [0.0, 0.0]], 0.0625 + 1.0),
    ];
    let mut worst = 0f64;
    for (rows, want) in cases {
        let got = comparative_loss(&entry, &pair, &pack_of(rows.to_vec())).unwrap().loss;
        worst = worst.max((got - want).abs());
    }
    CheckRow::new(
        8,
        "loss formula",
        format!("max |loss − hand value| {worst:.2e} over 3 cases (need ≤ {:e})", t.loss_formula_tol),
        worst <= t.loss_formula_tol,
    )
}

fn main() {
    let started = Instant::now();
    let t = &THRESHOLDS;
    println!("acceptance thresholds v{}", t.version);
    let mut rows = vec![criterion_1()];

    let main_run = pipeline(generate_synthetic(&SyntheticConfig::default()).unwrap(), SEED);
    let eval_start = Instant::now();
    let noisy = check_rows(&main_run.lex, &main_run.pack, &run_config()).unwrap();
    let wall = main_run.train_secs + eval_start.elapsed().as_secs_f64();
    let r2 = row(&noisy, 2);
    rows.push(CheckRow::new(
        2,
        "oracle recognition",
        format!("{}; train+eval {wall:.1}s on one core (need ≤ {}s)", r2.measured, t.pipeline_secs),
        r2.pass && wall <= t.pipeline_secs,
    ));

    let zero_run = pipeline(
        generate_synthetic(&SyntheticConfig {
            noise_sigma: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap(),
        SEED,
    );
    let clean = check_rows(&zero_run.lex, &zero_run.pack, &run_config()).unwrap();
    let r3 = row(&clean, 3);
    rows.push(CheckRow::new(3, "filter selectivity (zero noise)", r3.measured.clone(), r3.pass));

    rows.push(criterion_4());

    let r5 = row(&noisy, 5);
    rows.push(CheckRow::new(5, "composition multiple choice (noise 0.05)", r5.measured.clone(), r5.pass));

    let (z6, n6) = (row(&clean, 6), row(&noisy, 6));
    rows.push(CheckRow::new(
        6,
        "edit quality",
        format!("zero noise: {}; noise 0.05: {}", z6.measured, n6.measured),
        z6.pass && n6.pass,
    ));

    rows.push(criterion_7(&main_run));
    rows.push(criterion_8());

    rows.sort_by_key(|r| r.criterion);
    for r in &rows {
        println!("{}", r.line());
    }
    let passed = rows.iter().filter(|r| r.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass ({:.0}s)",
        rows.len(),
        started.elapsed().as_secs_f64()
    );
}

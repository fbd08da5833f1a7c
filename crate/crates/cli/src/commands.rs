use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use wordlearn::decodertrain::train_decoders;
use wordlearn::embedpack::{generate_synthetic, read_pack, summarize, write_pack, EmbeddingPack, Split};
use wordlearn::evalsuite::{
    composition_edit_eval, composition_mc, continual_protocol, eval_baseline, eval_recognition_records,
    eval_rng, filter_selectivity, train_baseline, train_holdout, with_fresh_decoders, BaselineKind, CheckRow,
    ContinualConfig, EvalReport, THRESHOLDS,
};
use wordlearn::lexicon::{Dims, Lexicon};
use wordlearn::trainer::{refine_concept, train_vocabulary, TrainSet};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::store::{self, StoreLock};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "wordlearn", version, about = "Comparative word acquisition over embeddings")]
pub struct Cli {
    /// Flat `key = value` config file (first line `schema = 1`)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. `--set epochs=3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root seed (required by commands that generate, train or sample)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Embedding pack directory
    #[arg(long, global = true)]
    pub pack: Option<PathBuf>,

    /// Concept store directory
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,

    /// Report directory (the WORDLEARN_OUT_DIR variable takes precedence)
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic embedding pack and its summary
    GenData {
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train concepts on the pack's train split
    Train,
    /// Train decoders for every trained concept
    TrainDecoders,
    /// Refine trained concepts with the train split of another pack
    Refine {
        #[arg(long)]
        new_pack: Option<PathBuf>,
    },
    /// Write evaluation reports
    Eval {
        #[arg(value_enum)]
        which: EvalKind,
    },
    /// Apply the acceptance thresholds to a trained store
    Check,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Recognize,
    Continual,
    Compose,
    Edit,
    Baselines,
}

impl Cli {
    /// File values first, then `--set`, then dedicated flags.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::parse(&format!("schema = {SCHEMA_VERSION}\n"))?,
        };
        cfg.apply_overrides(&self.overrides)?;
        let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
        set("seed", self.seed.map(|s| s.to_string()))?;
        set("pack", self.pack.as_ref().map(|p| p.display().to_string()))?;
        set("store", self.store.as_ref().map(|p| p.display().to_string()))?;
        set("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()))?;
        match &self.command {
            Command::GenData { dim } => set("dim", dim.map(|d| d.to_string()))?,
            Command::Refine { new_pack } => set("new_pack", new_pack.as_ref().map(|p| p.display().to_string()))?,
            _ => {}
        }
        Ok(cfg)
    }
}

/// Timestamped directory under the output root; never reuses an existing one.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let root = cfg.out_dir();
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = root.join(format!("{stamp}-{command}"));
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        fs::create_dir_all(&path)?;
        fs::write(path.join("config.txt"), cfg.canonical())?;
        Ok(Self { path })
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        fs::write(self.path.join(name), contents)?;
        Ok(())
    }
}

fn load_pack(cfg: &RunConfig, key: &str) -> Result<EmbeddingPack, CliError> {
    let path = cfg.path(key)?;
    if !path.is_dir() {
        return Err(CliError::Config(format!("{key} {} is not a directory", path.display())));
    }
    Ok(read_pack(&path)?)
}

fn store_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.path("store")
}

/// Train records used for fitting (the held-out share is reserved for
/// recognition checks).
fn fit_set<'a>(pack: &'a EmbeddingPack, cfg: &RunConfig) -> Result<TrainSet<'a>, CliError> {
    let (fit, _) = train_holdout(pack, cfg.holdout_every()?);
    Ok(TrainSet::from_records(pack, fit))
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|s| serde_json::to_string(&s).expect("stats serialize") + "\n")
        .collect()
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&cfg),
        Command::Train => train(&cfg),
        Command::TrainDecoders => decoders(&cfg),
        Command::Refine { .. } => refine(&cfg),
        Command::Eval { which } => eval(&cfg, *which),
        Command::Check => check(&cfg),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let synth = cfg.synthetic()?;
    let dir = cfg.path("pack")?;
    let pack = generate_synthetic(&synth)?;
    fs::create_dir_all(&dir)?;
    write_pack(&pack, &dir)?;
    let summary = summarize(&pack);
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let config = cfg.train()?;
    let pack = load_pack(cfg, "pack")?;
    let store_dir = store_path(cfg)?;
    let lock = StoreLock::acquire(&store_dir)?;
    let mut lex = store::open_or_new(&store_dir, || Lexicon::new(Dims::with_embedding(pack.dim), config.seed))?;
    let set = fit_set(&pack, cfg)?;
    let labels = cfg.labels().unwrap_or_else(|| set.labels());
    let run = RunDir::create(cfg, "train")?;
    let start = Instant::now();
    let stats = train_vocabulary(&mut lex, &set, &labels, &config)?;
    store::save(&lex, &store_dir, &lock)?;
    run.write("train_log.jsonl", &jsonl(stats.values().flatten()))?;
    let converged = stats.values().filter_map(|s| s.last()).filter(|s| s.converged).count();
    println!(
        "trained {} concepts ({converged} converged in the last epoch) in {:.1}s; log in {}",
        stats.len(),
        start.elapsed().as_secs_f64(),
        run.path.display()
    );
    Ok(())
}

fn decoders(cfg: &RunConfig) -> Result<(), CliError> {
    let config = cfg.decoder()?;
    let pack = load_pack(cfg, "pack")?;
    let store_dir = store_path(cfg)?;
    let lock = StoreLock::acquire(&store_dir)?;
    let mut lex = store::open(&store_dir)?;
    let set = fit_set(&pack, cfg)?;
    let labels = cfg.labels().unwrap_or_else(|| {
        lex.entries.values().filter(|e| e.is_trained()).map(|e| e.label.clone()).collect()
    });
    let run = RunDir::create(cfg, "train-decoders")?;
    let stats = train_decoders(&mut lex, &set, &labels, &config)?;
    store::save(&lex, &store_dir, &lock)?;
    run.write("train_log.jsonl", &jsonl(stats.values().flatten()))?;
    println!("trained {} decoders; log in {}", stats.len(), run.path.display());
    Ok(())
}

fn refine(cfg: &RunConfig) -> Result<(), CliError> {
    let config = cfg.train()?;
    let pack = load_pack(cfg, "new_pack")?;
    let store_dir = store_path(cfg)?;
    let lock = StoreLock::acquire(&store_dir)?;
    let mut lex = store::open(&store_dir)?;
    let set = TrainSet::new(&pack, Split::Train, None);
    let labels = cfg.labels().unwrap_or_else(|| {
        lex.entries.values().filter(|e| e.is_trained()).map(|e| e.label.clone()).collect()
    });
    let run = RunDir::create(cfg, "refine")?;
    let mut log = Vec::new();
    for l in &labels {
        if set.count(l) == 0 {
            log::warn!("no new samples for {l}; skipping");
            continue;
        }
        log.push(refine_concept(&mut lex, &set, l, &config)?);
    }
    if log.is_empty() {
        log::warn!("refine: the new pack holds no samples for any selected concept; store unchanged");
    } else {
        store::save(&lex, &store_dir, &lock)?;
    }
    run.write("train_log.jsonl", &jsonl(&log))?;
    println!("refined {} concepts; log in {}", log.len(), run.path.display());
    Ok(())
}

type RecognitionSet<'a> = (&'static str, Vec<&'a wordlearn::embedpack::SampleRecord>, Split);

/// Named recognition sets: the held-out train share and both test splits.
fn recognition_sets<'a>(pack: &'a EmbeddingPack, cfg: &RunConfig) -> Result<Vec<RecognitionSet<'a>>, CliError> {
    let (_, held) = train_holdout(pack, cfg.holdout_every()?);
    let split = |s: Split| pack.records.iter().filter(|r| r.split == s).collect::<Vec<_>>();
    Ok(vec![
        ("train_holdout", held, Split::Train),
        ("test_nc", split(Split::TestNc), Split::TestNc),
        ("test_v", split(Split::TestV), Split::TestV),
    ])
}

fn report_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    for (i, (set, r)) in rows.iter().enumerate() {
        for (j, line) in r.to_csv().lines().enumerate() {
            match (i, j) {
                (0, 0) => out.push_str(&format!("set,{line}\n")),
                (_, 0) => {}
                _ => out.push_str(&format!("{set},{line}\n")),
            }
        }
    }
    out
}

fn eval(cfg: &RunConfig, which: EvalKind) -> Result<(), CliError> {
    let pack = load_pack(cfg, "pack")?;
    let seed = cfg.get::<u64>("seed")?.unwrap_or(0);
    let name = match which {
        EvalKind::Recognize => "recognize",
        EvalKind::Continual => "continual",
        EvalKind::Compose => "compose",
        EvalKind::Edit => "edit",
        EvalKind::Baselines => "baselines",
    };
    let (json, csv) = match which {
        EvalKind::Recognize => {
            let lex = store::open(&store_path(cfg)?)?;
            let mut reports = Vec::new();
            for (set, records, split) in recognition_sets(&pack, cfg)? {
                reports.push((set, eval_recognition_records(&lex, &pack, &records, &[split])?));
            }
            let json = json!(reports.iter().map(|(s, r)| json!({"set": s, "report": r})).collect::<Vec<_>>());
            let refs: Vec<_> = reports.iter().map(|(s, r)| (*s, r)).collect();
            (json, report_csv(&refs))
        }
        EvalKind::Baselines => {
            let config = cfg.baseline()?;
            let set = fit_set(&pack, cfg)?;
            let mut reports = Vec::new();
            for kind in BaselineKind::ALL {
                let head = train_baseline(kind, &set, &config)?;
                for split in [Split::TestNc, Split::TestV] {
                    reports.push((split.name(), eval_baseline(&head, &pack, &[split], None)?));
                }
            }
            let json = json!(reports.iter().map(|(s, r)| json!({"set": s, "report": r})).collect::<Vec<_>>());
            let refs: Vec<_> = reports.iter().map(|(s, r)| (*s, r)).collect();
            (json, report_csv(&refs))
        }
        EvalKind::Continual => {
            let config = ContinualConfig {
                train: cfg.train()?,
                baseline: cfg.baseline()?,
                baselines: BaselineKind::ALL.to_vec(),
            };
            let report = continual_protocol(&pack, &config)?;
            let mut csv = String::from("method,round,test,category,accuracy\n");
            for m in &report.methods {
                for (round, test, r) in [
                    ("round1", "known", &m.round1_known),
                    ("round2_unknown_only", "known", &m.round2_unknown_only_known),
                    ("round2_unknown_only", "full", &m.round2_unknown_only_full),
                    ("round2_full", "known", &m.round2_full_known),
                    ("round2_full", "full", &m.round2_full_full),
                ] {
                    for (cat, acc) in &r.categories {
                        csv.push_str(&format!("{},{round},{test},{cat},{:.6}\n", m.method, acc.accuracy));
                    }
                    csv.push_str(&format!("{},{round},{test},all,{:.6}\n", m.method, r.all.accuracy));
                }
            }
            (serde_json::to_value(&report).map_err(wordlearn::Error::from)?, csv)
        }
        EvalKind::Compose => {
            let lex = store::open(&store_path(cfg)?)?;
            let missing: Vec<_> = lex
                .entries
                .values()
                .filter(|e| e.is_trained() && e.decoder.is_none())
                .map(|e| e.label.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(CliError::Config(format!(
                    "compose needs decoders; missing for: {}",
                    missing.join(", ")
                )));
            }
            let (runs, items) = cfg.mc()?;
            let pool = mc_pool(&pack);
            let mc = composition_mc(&lex, &pool, runs, items, &mut eval_rng(seed, "mc"))?;
            let control = composition_mc(
                &with_fresh_decoders(&lex, seed),
                &pool,
                runs,
                items,
                &mut eval_rng(seed, "mc"),
            )?;
            let csv = format!(
                "method,mean,std,runs,items\ntrained,{:.6},{:.6},{runs},{items}\nuntrained_control,{:.6},{:.6},{runs},{items}\n",
                mc.mean, mc.std, control.mean, control.std
            );
            (json!({"trained": mc, "untrained_control": control}), csv)
        }
        EvalKind::Edit => {
            let lex = store::open(&store_path(cfg)?)?;
            let sources = TrainSet::new(&pack, Split::Train, None);
            let targets = mc_pool(&pack);
            let r = composition_edit_eval(&lex, &sources, &targets, cfg.edit_pairs()?, &mut eval_rng(seed, "edit"))?;
            let csv = format!(
                "mean_ratio,evaluated,skipped,identity_max_abs_diff\n{:.6},{},{},{:e}\n",
                r.mean_ratio, r.evaluated, r.skipped, r.identity_max_abs_diff
            );
            (serde_json::to_value(&r).map_err(wordlearn::Error::from)?, csv)
        }
    };
    let run = RunDir::create(cfg, &format!("eval-{name}"))?;
    run.write("report.json", &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    run.write("report.csv", &csv)?;
    print!("{csv}");
    println!("reports in {}", run.path.display());
    Ok(())
}

/// Rows at the training noise level: train and the non-compositional test.
fn mc_pool(pack: &EmbeddingPack) -> TrainSet<'_> {
    TrainSet::from_records(
        pack,
        pack.records
            .iter()
            .filter(|r| matches!(r.split, Split::Train | Split::TestNc))
            .collect(),
    )
}

/// Acceptance rows measurable from a trained store: recognition tiers,
/// filter selectivity (synthetic packs), composition and editing.
pub fn check_rows(lex: &Lexicon, pack: &EmbeddingPack, cfg: &RunConfig) -> Result<Vec<CheckRow>, CliError> {
    let t = &THRESHOLDS;
    let seed = cfg.get::<u64>("seed")?.unwrap_or(0);
    let mut rows = Vec::new();

    let mut acc = Vec::new();
    for (set, records, split) in recognition_sets(pack, cfg)? {
        acc.push((set, eval_recognition_records(lex, pack, &records, &[split])?.all.accuracy));
    }
    let need = [t.recog_holdout, t.recog_nc, t.recog_v];
    let pass = acc.iter().zip(need).all(|((_, a), n)| *a >= n);
    let measured = acc
        .iter()
        .zip(need)
        .map(|((s, a), n)| format!("{s} {a:.3} (need {n})"))
        .collect::<Vec<_>>()
        .join(", ");
    rows.push(CheckRow::new(2, "recognition all-attributes top-k", measured, pass));

    if pack.synthetic_truth.is_some() {
        let sel = filter_selectivity(lex, pack)?;
        let (worst, min) = sel
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, v)| (l.as_str(), *v))
            .unwrap_or(("none", 0.0));
        rows.push(CheckRow::new(
            3,
            "filter selectivity",
            format!("min {min:.3} at {worst} (need {})", t.selectivity),
            !sel.is_empty() && min >= t.selectivity,
        ));
    }

    let missing: Vec<_> = lex
        .entries
        .values()
        .filter(|e| e.is_trained() && e.decoder.is_none())
        .map(|e| e.label.clone())
        .collect();
    if !missing.is_empty() {
        let msg = format!("decoders missing for {}", missing.join(", "));
        rows.push(CheckRow::new(5, "composition multiple choice", msg.clone(), false));
        rows.push(CheckRow::new(6, "embedding edit", msg, false));
        return Ok(rows);
    }
    let (runs, items) = cfg.mc()?;
    let pool = mc_pool(pack);
    let mc = composition_mc(lex, &pool, runs, items, &mut eval_rng(seed, "mc"))?;
    let control = composition_mc(&with_fresh_decoders(lex, seed), &pool, runs, items, &mut eval_rng(seed, "mc"))?;
    let control_ok = (control.mean - t.mc_control_center).abs() <= t.mc_control_tol;
    rows.push(CheckRow::new(
        5,
        "composition multiple choice",
        format!(
            "trained {:.3} ± {:.3} (need {}), untrained {:.3} (need {:.3} ± {})",
            mc.mean, mc.std, t.mc_min, control.mean, t.mc_control_center, t.mc_control_tol
        ),
        mc.mean >= t.mc_min && control_ok,
    ));

    let sources = TrainSet::new(pack, Split::Train, None);
    let edit = composition_edit_eval(lex, &sources, &pool, cfg.edit_pairs()?, &mut eval_rng(seed, "edit"))?;
    let noise = pack.synthetic_truth.as_ref().map_or(f64::INFINITY, |s| s.noise_sigma);
    let limit = if noise == 0.0 { t.edit_zero_noise } else { t.edit_noisy };
    rows.push(CheckRow::new(
        6,
        "embedding edit",
        format!(
            "ratio {:.3} over {} edits (need ≤ {limit}), identity diff {:e}",
            edit.mean_ratio, edit.evaluated, edit.identity_max_abs_diff
        ),
        edit.mean_ratio <= limit && edit.identity_max_abs_diff == 0.0,
    ));
    Ok(rows)
}

fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let pack = load_pack(cfg, "pack")?;
    let lex = store::open(&store_path(cfg)?)?;
    let rows = check_rows(&lex, &pack, cfg)?;
    let run = RunDir::create(cfg, "check")?;
    let json = json!({"thresholds": &THRESHOLDS, "rows": &rows});
    run.write("check.json", &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    let text: String = rows.iter().map(|r| r.line() + "\n").collect();
    run.write("check.txt", &text)?;
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::CheckFailed { failed });
    }
    Ok(())
}

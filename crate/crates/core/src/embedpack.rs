//! Embedding packs: labeled fixed-width `f32` rows plus category metadata.
//!
//! On disk a pack is a directory holding `manifest.jsonl` (a header object on
//! the first line, then one object per record) and `rows.f32`, the row-major
//! little-endian `f32` blob.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PACK_MAGIC: &str = "EPK1";
pub const PACK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ROWS_FILE: &str = "rows.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestNc,
    TestV,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestNc, Split::TestV];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestNc => "test_nc",
            Split::TestV => "test_v",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSide {
    Known,
    Unknown,
}

impl VocabSide {
    pub fn name(self) -> &'static str {
        match self {
            VocabSide::Known => "known",
            VocabSide::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub labels: BTreeSet<String>,
    pub split: Split,
    pub vocab_side: VocabSide,
    #[serde(rename = "row")]
    pub row_index: usize,
}

impl SampleRecord {
    pub fn has(&self, word: &str) -> bool {
        self.labels.contains(word)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub words: Vec<String>,
}

/// Attribute categories and the unknown-vocabulary set. Two words are
/// non-compatible exactly when they are distinct members of one category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub categories: Vec<Category>,
    pub unknown_vocab: BTreeSet<String>,
}

impl CategoryMap {
    pub fn new(categories: Vec<Category>, unknown_vocab: BTreeSet<String>) -> Self {
        Self {
            categories,
            unknown_vocab,
        }
    }

    pub fn category_of(&self, word: &str) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.words.iter().any(|w| w == word))
            .map(|c| c.name.as_str())
    }

    pub fn words_in(&self, category: &str) -> Option<&[String]> {
        self.categories
            .iter()
            .find(|c| c.name == category)
            .map(|c| c.words.as_slice())
    }

    pub fn non_compatible(&self, a: &str, b: &str) -> bool {
        a != b
            && matches!(
                (self.category_of(a), self.category_of(b)),
                (Some(x), Some(y)) if x == y
            )
    }

    /// All words in category order.
    pub fn vocabulary(&self) -> Vec<String> {
        self.categories.iter().flat_map(|c| c.words.iter().cloned()).collect()
    }

    pub fn known_vocabulary(&self) -> Vec<String> {
        self.vocabulary()
            .into_iter()
            .filter(|w| !self.unknown_vocab.contains(w))
            .collect()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    /// The record's word in `category`, if any.
    pub fn label_in<'a>(&self, record: &'a SampleRecord, category: &str) -> Option<&'a str> {
        let words = self.words_in(category)?;
        record
            .labels
            .iter()
            .find(|l| words.iter().any(|w| w == *l))
            .map(String::as_str)
    }

    pub fn side_of(&self, labels: &BTreeSet<String>) -> VocabSide {
        if labels.iter().any(|l| self.unknown_vocab.contains(l)) {
            VocabSide::Unknown
        } else {
            VocabSide::Known
        }
    }
}

/// Ground truth of a synthetic pack: which dimensions each category owns and
/// each word's signature on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub category_dims: BTreeMap<String, Vec<usize>>,
    pub signatures: BTreeMap<String, Vec<f32>>,
    pub noise_sigma: f64,
    pub variation_sigma: f64,
}

impl SyntheticTruth {
    /// Noise-free row for a label set.
    pub fn expected_row(&self, map: &CategoryMap, labels: &BTreeSet<String>, dim: usize) -> Vec<f32> {
        let mut row = vec![0f32; dim];
        for l in labels {
            let (Some(cat), Some(sig)) = (map.category_of(l), self.signatures.get(l)) else {
                continue;
            };
            for (&d, &s) in self.category_dims[cat].iter().zip(sig) {
                row[d] += s;
            }
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPack {
    pub dim: usize,
    pub rows: Array2<f32>,
    pub records: Vec<SampleRecord>,
    pub category_map: CategoryMap,
    pub provenance: Provenance,
    pub holdout_pairs: Vec<(String, String)>,
    pub synthetic_truth: Option<SyntheticTruth>,
    /// Set by exporters whose encoder L2-normalizes its output.
    pub encoder_normalized: Option<bool>,
}

impl EmbeddingPack {
    pub fn row(&self, record: &SampleRecord) -> ArrayView1<'_, f32> {
        self.rows.row(record.row_index)
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn row_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.records.iter().any(|r| r.split == split)
    }
}

/// Records of `split`, optionally restricted to one vocabulary side.
pub fn split_view(pack: &EmbeddingPack, split: Split, side: Option<VocabSide>) -> Vec<&SampleRecord> {
    pack.records
        .iter()
        .filter(|r| r.split == split && side.is_none_or(|s| r.vocab_side == s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Record id, or `row N` / `category_map` / `synthetic_truth` for
    /// pack-level rules.
    pub subject: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.subject, self.rule)
    }
}

pub fn validate_pack(pack: &EmbeddingPack) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: String, rule: String| out.push(Violation { subject, rule });
    let map = &pack.category_map;

    let mut seen_words: HashMap<&str, &str> = HashMap::new();
    for c in &map.categories {
        for w in &c.words {
            if let Some(prev) = seen_words.insert(w, &c.name) {
                push(
                    "category_map".into(),
                    format!("word {w} appears in categories {prev} and {}", c.name),
                );
            }
        }
    }
    for w in &map.unknown_vocab {
        if !seen_words.contains_key(w.as_str()) {
            push("category_map".into(), format!("unknown-vocabulary word {w} is in no category"));
        }
    }

    if pack.rows.ncols() != pack.dim {
        push("pack".into(), format!("rows have width {} but dim is {}", pack.rows.ncols(), pack.dim));
    }
    if pack.rows.nrows() != pack.records.len() {
        push(
            "pack".into(),
            format!("row_count {} != record count {}", pack.rows.nrows(), pack.records.len()),
        );
    }
    for (i, row) in pack.rows.rows().into_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            push(format!("row {i}"), format!("non-finite value in row {i} at column {j}"));
        }
    }

    let mut used = vec![false; pack.rows.nrows()];
    for r in &pack.records {
        if r.row_index >= used.len() {
            push(r.id.clone(), format!("row index {} out of range", r.row_index));
        } else if std::mem::replace(&mut used[r.row_index], true) {
            push(r.id.clone(), format!("row index {} used twice", r.row_index));
        }
        let mut per_cat: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &r.labels {
            match map.category_of(l) {
                Some(c) => *per_cat.entry(c).or_default() += 1,
                None => push(r.id.clone(), format!("label {l} not in vocabulary")),
            }
        }
        for (c, n) in per_cat {
            if n > 1 {
                push(r.id.clone(), format!("multiple labels in category {c}"));
            }
        }
        if map.side_of(&r.labels) != r.vocab_side {
            push(r.id.clone(), "vocab_side disagrees with unknown vocabulary".into());
        }
    }

    if let Some(truth) = &pack.synthetic_truth {
        let mut owner = vec![None::<&str>; pack.dim];
        for (c, dims) in &truth.category_dims {
            for &d in dims {
                match owner.get_mut(d) {
                    None => push("synthetic_truth".into(), format!("dimension {d} of {c} out of range")),
                    Some(Some(prev)) => push(
                        "synthetic_truth".into(),
                        format!("dimension {d} owned by both {prev} and {c}"),
                    ),
                    Some(slot) => *slot = Some(c),
                }
            }
        }
        for c in &map.categories {
            let Some(dims) = truth.category_dims.get(&c.name) else {
                push("synthetic_truth".into(), format!("category {} has no dimensions", c.name));
                continue;
            };
            let min_sep = 4.0 * truth.noise_sigma * (dims.len() as f64).sqrt();
            for (i, a) in c.words.iter().enumerate() {
                for b in &c.words[i + 1..] {
                    let (Some(sa), Some(sb)) = (truth.signatures.get(a), truth.signatures.get(b)) else {
                        continue;
                    };
                    let d = euclid(sa, sb);
                    if d == 0.0 || d < min_sep {
                        push(
                            "synthetic_truth".into(),
                            format!("signatures {a} and {b} separated by {d:.4} < {min_sep:.4}"),
                        );
                    }
                }
            }
        }
    }
    out
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    dim: usize,
    row_count: usize,
    categories: Vec<Category>,
    unknown_vocab: BTreeSet<String>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    holdout_pairs: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic_truth: Option<SyntheticTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_normalized: Option<bool>,
}

pub fn write_pack(pack: &EmbeddingPack, dir: &Path) -> Result<()> {
    if pack.rows.ncols() != pack.dim || pack.rows.nrows() != pack.records.len() {
        return Err(Error::format("rows", "pack rows disagree with dim or record count"));
    }
    fs::create_dir_all(dir)?;
    let header = Header {
        magic: PACK_MAGIC.into(),
        version: PACK_VERSION,
        dim: pack.dim,
        row_count: pack.rows.nrows(),
        categories: pack.category_map.categories.clone(),
        unknown_vocab: pack.category_map.unknown_vocab.clone(),
        provenance: pack.provenance,
        holdout_pairs: pack.holdout_pairs.clone(),
        synthetic_truth: pack.synthetic_truth.clone(),
        encoder_normalized: pack.encoder_normalized,
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &pack.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut blob = Vec::with_capacity(pack.rows.len() * 4);
    for v in pack.rows.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(ROWS_FILE), blob)?;
    Ok(())
}

pub fn read_pack(dir: &Path) -> Result<EmbeddingPack> {
    let manifest = fs::File::open(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::format("manifest", format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let mut lines = BufReader::new(manifest).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("header", "manifest is empty"))??;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::format("header", e.to_string()))?;
    match raw.get("magic").and_then(|m| m.as_str()) {
        Some(PACK_MAGIC) => {}
        other => {
            return Err(Error::format(
                "magic",
                format!("expected {PACK_MAGIC:?}, found {other:?}"),
            ))
        }
    }
    match raw.get("version").and_then(|m| m.as_u64()) {
        Some(v) if v == PACK_VERSION as u64 => {}
        other => {
            return Err(Error::format(
                "version",
                format!("expected {PACK_VERSION}, found {other:?}"),
            ))
        }
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::format("header", e.to_string()))?;
    if header.dim == 0 {
        return Err(Error::format("dim", "dim must be positive"));
    }

    let mut records = Vec::with_capacity(header.row_count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("record {i}"), e.to_string()))?;
        records.push(rec);
    }
    if records.len() != header.row_count {
        return Err(Error::format(
            "row_count",
            format!("manifest declares {} rows but lists {} records", header.row_count, records.len()),
        ));
    }

    let blob = fs::read(dir.join(ROWS_FILE))
        .map_err(|e| Error::format("rows", format!("{}: {e}", dir.join(ROWS_FILE).display())))?;
    let expected = header.row_count * header.dim * 4;
    if blob.len() < expected {
        return Err(Error::format(
            "rows",
            format!(
                "row data shorter than manifest row_count × dim ({} < {expected} bytes)",
                blob.len()
            ),
        ));
    }
    if blob.len() > expected {
        return Err(Error::format(
            "rows",
            format!(
                "row data longer than manifest row_count × dim ({} > {expected} bytes)",
                blob.len()
            ),
        ));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = Array2::from_shape_vec((header.row_count, header.dim), values).expect("length checked");

    Ok(EmbeddingPack {
        dim: header.dim,
        rows,
        records,
        category_map: CategoryMap::new(header.categories, header.unknown_vocab),
        provenance: header.provenance,
        holdout_pairs: header.holdout_pairs,
        synthetic_truth: header.synthetic_truth,
        encoder_normalized: header.encoder_normalized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub categories: Vec<Category>,
    pub dims_per_category: usize,
    pub noise_sigma: f64,
    pub variation_sigma: f64,
    pub train_count: usize,
    pub test_nc_count: usize,
    pub test_v_count: usize,
    pub holdout_pairs: Vec<(String, String)>,
    pub unknown_vocab: Vec<String>,
    pub seed: u64,
}

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticConfig {
    /// Eight colors, four materials and eleven shapes with nine held-out
    /// pairs and three unknown words; split sizes are a quarter of the
    /// original rendered set (5094 / 1242 / 989).
    fn default() -> Self {
        let pairs = [
            ("yellow", "cone"),
            ("green", "metal"),
            ("plastic", "cube"),
            ("purple", "teapot"),
            ("red", "metal"),
            ("glass", "torus_knot"),
            ("white", "cylinder"),
            ("aqua", "rubber"),
            ("glass", "sphere"),
        ];
        Self {
            dim: 512,
            categories: vec![
                Category {
                    name: "color".into(),
                    words: words(&["brown", "green", "blue", "aqua", "purple", "red", "white", "yellow"]),
                },
                Category {
                    name: "material".into(),
                    words: words(&["rubber", "metal", "plastic", "glass"]),
                },
                Category {
                    name: "shape".into(),
                    words: words(&[
                        "cube", "cylinder", "sphere", "cone", "torus", "gear", "sponge", "spot", "teapot",
                        "suzanne", "torus_knot",
                    ]),
                },
            ],
            dims_per_category: 24,
            noise_sigma: 0.05,
            variation_sigma: 0.15,
            train_count: 1274,
            test_nc_count: 311,
            test_v_count: 247,
            holdout_pairs: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            unknown_vocab: words(&["yellow", "glass", "torus_knot"]),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Categories with generated word names `"{name}_{i}"`.
    pub fn counted_categories(spec: &[(&str, usize)]) -> Vec<Category> {
        spec.iter()
            .map(|(name, n)| Category {
                name: name.to_string(),
                words: (0..*n).map(|i| format!("{name}_{i}")).collect(),
            })
            .collect()
    }
}

/// Every label combination taking one word per category, in category order.
pub fn all_combinations(map: &CategoryMap) -> Vec<Vec<String>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for c in &map.categories {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                c.words.iter().map(move |w| {
                    let mut next = prefix.clone();
                    next.push(w.clone());
                    next
                })
            })
            .collect();
    }
    combos
}

fn has_holdout(combo: &[String], holdout: &[(String, String)]) -> bool {
    holdout
        .iter()
        .any(|(a, b)| combo.contains(a) && combo.contains(b))
}

const SIGNATURE_ATTEMPTS: usize = 1000;

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<EmbeddingPack> {
    let n_cat = config.categories.len();
    if n_cat == 0 || config.categories.iter().any(|c| c.words.is_empty()) {
        return Err(Error::Config("every category needs at least one word".into()));
    }
    if config.dims_per_category == 0 || config.dims_per_category * n_cat > config.dim {
        return Err(Error::Config(format!(
            "{n_cat} categories × {} dims do not fit in dim {}",
            config.dims_per_category, config.dim
        )));
    }
    if !(config.noise_sigma >= 0.0 && config.variation_sigma >= 0.0) {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    let map = CategoryMap::new(
        config.categories.clone(),
        config.unknown_vocab.iter().cloned().collect(),
    );
    for w in &config.unknown_vocab {
        if map.category_of(w).is_none() {
            return Err(Error::Config(format!("unknown-vocabulary word {w} is in no category")));
        }
    }
    for (a, b) in &config.holdout_pairs {
        match (map.category_of(a), map.category_of(b)) {
            (Some(x), Some(y)) if x != y => {}
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!("holdout pair ({a}, {b}) is not cross-category")))
            }
            _ => return Err(Error::Config(format!("holdout pair ({a}, {b}) uses an unknown word"))),
        }
    }

    let combos = all_combinations(&map);
    let (train_combos, nc_combos): (Vec<_>, Vec<_>) = combos
        .into_iter()
        .partition(|c| !has_holdout(c, &config.holdout_pairs));
    for w in map.vocabulary() {
        if !train_combos.iter().any(|c| c.contains(&w)) {
            return Err(Error::Config(format!(
                "holdout pairs leave no training combination containing {w}"
            )));
        }
    }
    if nc_combos.is_empty() && config.test_nc_count > 0 {
        return Err(Error::Config("test_nc_count > 0 but no holdout pairs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut dims: Vec<usize> = (0..config.dim).collect();
    dims.shuffle(&mut rng);
    let mut category_dims = BTreeMap::new();
    for (i, c) in config.categories.iter().enumerate() {
        let mut owned = dims[i * config.dims_per_category..(i + 1) * config.dims_per_category].to_vec();
        owned.sort_unstable();
        category_dims.insert(c.name.clone(), owned);
    }

    let min_sep = 4.0 * config.noise_sigma * (config.dims_per_category as f64).sqrt();
    let mut signatures = BTreeMap::new();
    for c in &config.categories {
        let mut ok = false;
        for _ in 0..SIGNATURE_ATTEMPTS {
            let sigs: Vec<Vec<f32>> = c
                .words
                .iter()
                .map(|_| unit_gaussian(config.dims_per_category, &mut rng))
                .collect();
            let separated = (0..sigs.len()).all(|i| {
                (i + 1..sigs.len()).all(|j| {
                    let d = euclid(&sigs[i], &sigs[j]);
                    d > 0.0 && d >= min_sep
                })
            });
            if separated {
                for (w, s) in c.words.iter().zip(sigs) {
                    signatures.insert(w.clone(), s);
                }
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Config(format!(
                "could not draw separated signatures for category {} (need ≥ {min_sep:.3})",
                c.name
            )));
        }
    }
    let truth = SyntheticTruth {
        category_dims,
        signatures,
        noise_sigma: config.noise_sigma,
        variation_sigma: config.variation_sigma,
    };

    let plan = [
        (Split::Train, &train_combos, config.train_count, config.noise_sigma),
        (Split::TestNc, &nc_combos, config.test_nc_count, config.noise_sigma),
        (Split::TestV, &train_combos, config.test_v_count, config.variation_sigma),
    ];
    let total: usize = plan.iter().map(|p| p.2).sum();
    let mut rows = Array2::<f32>::zeros((total, config.dim));
    let mut records = Vec::with_capacity(total);
    for (split, pool, count, sigma) in plan {
        for (k, combo) in balanced_draw(pool, count, &mut rng).into_iter().enumerate() {
            let labels: BTreeSet<String> = combo.iter().cloned().collect();
            let idx = records.len();
            let base = truth.expected_row(&map, &labels, config.dim);
            let mut row = rows.row_mut(idx);
            for (dst, b) in row.iter_mut().zip(base) {
                let noise: f64 = if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) * sigma } else { 0.0 };
                *dst = b + noise as f32;
            }
            records.push(SampleRecord {
                id: format!("{}-{k:05}", split.name()),
                vocab_side: map.side_of(&labels),
                labels,
                split,
                row_index: idx,
            });
        }
    }

    Ok(EmbeddingPack {
        dim: config.dim,
        rows,
        records,
        category_map: map,
        provenance: Provenance::Synthetic,
        holdout_pairs: config.holdout_pairs.clone(),
        synthetic_truth: Some(truth),
        encoder_normalized: None,
    })
}

fn unit_gaussian(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Draws `count` combinations cycling through seeded shuffles of `pool`, so
/// every combination appears ⌊count/|pool|⌋ or ⌈count/|pool|⌉ times.
fn balanced_draw<'a>(pool: &'a [Vec<String>], count: usize, rng: &mut impl Rng) -> Vec<&'a Vec<String>> {
    let mut out = Vec::with_capacity(count);
    if pool.is_empty() {
        return out;
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    while out.len() < count {
        order.shuffle(rng);
        out.extend(order.iter().take(count - out.len()).map(|&i| &pool[i]));
    }
    out
}

/// Human-readable pack summary used by the CLI.
pub fn summarize(pack: &EmbeddingPack) -> String {
    let map = &pack.category_map;
    let mut s = String::new();
    let vocab = map.vocabulary();
    s.push_str(&format!("provenance: {:?}\n", pack.provenance));
    s.push_str(&format!("dim: {}\nrows: {}\n", pack.dim, pack.row_count()));
    s.push_str(&format!("vocab size: {}\n", vocab.len()));
    for c in &map.categories {
        s.push_str(&format!("  {} ({}): {}\n", c.name, c.words.len(), c.words.join(", ")));
    }
    s.push_str(&format!(
        "unknown vocab ({}): {}\n",
        map.unknown_vocab.len(),
        map.unknown_vocab.iter().cloned().collect::<Vec<_>>().join(", ")
    ));
    s.push_str("splits (total / known / unknown):\n");
    for split in Split::ALL {
        let all = split_view(pack, split, None).len();
        let known = split_view(pack, split, Some(VocabSide::Known)).len();
        s.push_str(&format!("  {}: {all} / {known} / {}\n", split.name(), all - known));
    }
    if !pack.holdout_pairs.is_empty() {
        s.push_str(&format!("holdout pairs ({}):\n", pack.holdout_pairs.len()));
        for (a, b) in &pack.holdout_pairs {
            s.push_str(&format!("  ({a}, {b})\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            dim: 32,
            categories: SyntheticConfig::counted_categories(&[("a", 3), ("b", 2)]),
            dims_per_category: 4,
            noise_sigma: 0.0,
            variation_sigma: 0.1,
            train_count: 20,
            test_nc_count: 4,
            test_v_count: 6,
            holdout_pairs: vec![("a_0".into(), "b_1".into())],
            unknown_vocab: vec!["a_2".into()],
            seed: 3,
        }
    }

    #[test]
    fn default_pack_has_table_vocabulary() {
        let pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let map = &pack.category_map;
        assert_eq!(map.vocabulary().len(), 23);
        assert_eq!(map.unknown_vocab.len(), 3);
        assert_eq!(map.known_vocabulary().len(), 20);
        assert_eq!(
            map.categories.iter().map(|c| c.words.len()).collect::<Vec<_>>(),
            vec![8, 4, 11]
        );
        assert_eq!(split_view(&pack, Split::Train, None).len(), 1274);
        assert_eq!(split_view(&pack, Split::TestNc, None).len(), 311);
        assert_eq!(split_view(&pack, Split::TestV, None).len(), 247);
        assert!(validate_pack(&pack).is_empty(), "{:?}", validate_pack(&pack));
    }

    #[test]
    fn zero_noise_rows_are_signature_sums() {
        let pack = generate_synthetic(&small_config()).unwrap();
        let truth = pack.synthetic_truth.as_ref().unwrap();
        for r in split_view(&pack, Split::Train, None) {
            let expected = truth.expected_row(&pack.category_map, &r.labels, pack.dim);
            assert_eq!(pack.row(r).to_vec(), expected);
        }
    }

    #[test]
    fn holdout_pairs_only_in_test_nc() {
        let pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let holds = |r: &SampleRecord| pack.holdout_pairs.iter().any(|(a, b)| r.has(a) && r.has(b));
        for r in &pack.records {
            match r.split {
                Split::TestNc => assert!(holds(r), "{} lacks a holdout pair", r.id),
                _ => assert!(!holds(r), "{} exhibits a holdout pair", r.id),
            }
        }
        for (a, b) in &pack.holdout_pairs {
            assert!(split_view(&pack, Split::TestNc, None)
                .iter()
                .any(|r| r.has(a) && r.has(b)));
        }
    }

    #[test]
    fn infeasible_holdout_is_a_config_error() {
        let mut cfg = small_config();
        // b_0 and b_1 both held out with a_0 would be fine, but holding out
        // a_0 against every b value leaves a_0 with no training combination.
        cfg.holdout_pairs = vec![("a_0".into(), "b_0".into()), ("a_0".into(), "b_1".into())];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        cfg.holdout_pairs = vec![("a_0".into(), "a_1".into())];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dims_must_fit() {
        let mut cfg = small_config();
        cfg.dims_per_category = 17;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn non_compatibility_is_within_category() {
        let map = generate_synthetic(&SyntheticConfig::default()).unwrap().category_map;
        let vocab = map.vocabulary();
        for a in &vocab {
            assert!(!map.non_compatible(a, a));
            for b in &vocab {
                assert_eq!(map.non_compatible(a, b), map.non_compatible(b, a));
                let same = map.category_of(a) == map.category_of(b);
                assert_eq!(map.non_compatible(a, b), same && a != b);
            }
        }
    }

    #[test]
    fn validate_flags_double_label_and_nan() {
        let mut pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let id = pack.records[0].id.clone();
        let other_color = ["brown", "green"]
            .into_iter()
            .find(|c| !pack.records[0].has(c))
            .unwrap();
        pack.records[0].labels.insert(other_color.into());
        let v = validate_pack(&pack);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].subject, id);
        assert_eq!(v[0].rule, "multiple labels in category color");

        pack.records[0].labels.remove(other_color);
        pack.rows[[3, 10]] = f32::NAN;
        let v = validate_pack(&pack);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].rule.contains("row 3"));
    }

    #[test]
    fn validate_flags_bad_side_and_unknown_label() {
        let mut pack = generate_synthetic(&small_config()).unwrap();
        pack.records[0].vocab_side = match pack.records[0].vocab_side {
            VocabSide::Known => VocabSide::Unknown,
            VocabSide::Unknown => VocabSide::Known,
        };
        pack.records[1].labels.insert("zzz".into());
        let rules: Vec<String> = validate_pack(&pack).into_iter().map(|v| v.rule).collect();
        assert!(rules.iter().any(|r| r.contains("vocab_side")));
        assert!(rules.iter().any(|r| r.contains("zzz")));
    }

    #[test]
    fn known_unknown_partition_each_split() {
        let pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for split in Split::ALL {
            let all: BTreeSet<&str> = split_view(&pack, split, None).iter().map(|r| r.id.as_str()).collect();
            let known: BTreeSet<&str> = split_view(&pack, split, Some(VocabSide::Known))
                .iter()
                .map(|r| r.id.as_str())
                .collect();
            let unknown: BTreeSet<&str> = split_view(&pack, split, Some(VocabSide::Unknown))
                .iter()
                .map(|r| r.id.as_str())
                .collect();
            assert!(known.is_disjoint(&unknown));
            assert_eq!(&known | &unknown, all);
            // Exhaustive check of the side rule itself.
            for r in split_view(&pack, split, None) {
                let touches = r.labels.iter().any(|l| pack.category_map.unknown_vocab.contains(l));
                assert_eq!(unknown.contains(r.id.as_str()), touches);
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut cfg = small_config();
        cfg.seed += 1;
        assert_ne!(a.rows, generate_synthetic(&cfg).unwrap().rows);
    }

    #[test]
    fn summary_mentions_vocab() {
        let pack = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let s = summarize(&pack);
        assert!(s.contains("vocab size: 23"));
        assert!(s.contains("unknown vocab (3)"));
    }
}

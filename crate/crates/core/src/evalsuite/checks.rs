//! Pass/fail thresholds and the measurements they apply to.

use serde::{Deserialize, Serialize};

use super::build_report;
use super::{default_k, distance_table, EvalReport, ScoreTable};
use crate::embedpack::{EmbeddingPack, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::lexicon::{DecoderNet, Lexicon};
use crate::trainer::derived_rng;

pub const THRESHOLDS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub version: u32,
    pub grad_rel_err: f64,
    pub grad_coords: usize,
    pub grad_secs: f64,
    pub recog_holdout: f64,
    pub recog_nc: f64,
    pub recog_v: f64,
    pub pipeline_secs: f64,
    pub selectivity: f64,
    pub continual_max_drop: f64,
    pub continual_seeds: usize,
    pub continual_min_wins: usize,
    pub mc_min: f64,
    pub mc_control_center: f64,
    pub mc_control_tol: f64,
    pub edit_zero_noise: f64,
    pub edit_noisy: f64,
    pub loss_formula_tol: f64,
}

pub const THRESHOLDS: Thresholds = Thresholds {
    version: THRESHOLDS_VERSION,
    grad_rel_err: 1e-4,
    grad_coords: 100,
    grad_secs: 60.0,
    recog_holdout: 0.95,
    recog_nc: 0.85,
    recog_v: 0.70,
    pipeline_secs: 600.0,
    selectivity: 3.0,
    continual_max_drop: 0.10,
    continual_seeds: 5,
    continual_min_wins: 4,
    mc_min: 0.90,
    mc_control_center: 1.0 / 3.0,
    mc_control_tol: 0.05,
    edit_zero_noise: 0.10,
    edit_noisy: 0.35,
    loss_formula_tol: 1e-6,
};

/// One pass/fail line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub criterion: u8,
    pub name: String,
    pub measured: String,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(criterion: u8, name: &str, measured: impl Into<String>, pass: bool) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            measured: measured.into(),
            pass,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {}: {} ({})",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.measured
        )
    }
}

/// Splits the train records into (fit, held out): every `every`-th train
/// record in pack order is held out. `every == 0` holds out nothing.
pub fn train_holdout(pack: &EmbeddingPack, every: usize) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    let train = pack.records.iter().filter(|r| r.split == Split::Train);
    if every == 0 {
        return (train.collect(), vec![]);
    }
    let (held, fit): (Vec<_>, Vec<_>) = train.enumerate().partition(|(i, _)| i % every == every - 1);
    (fit.into_iter().map(|x| x.1).collect(), held.into_iter().map(|x| x.1).collect())
}

/// Recognition report over an explicit record list.
pub fn eval_recognition_records(
    lexicon: &Lexicon,
    pack: &EmbeddingPack,
    records: &[&SampleRecord],
    splits: &[Split],
) -> Result<EvalReport> {
    let rows: Vec<usize> = records.iter().map(|r| r.row_index).collect();
    let x = pack.rows.select(ndarray::Axis(0), &rows);
    let table = if rows.is_empty() {
        ScoreTable {
            labels: vec![],
            values: ndarray::Array2::zeros((0, 0)),
            lower_is_better: true,
        }
    } else {
        distance_table(lexicon, x.view())?
    };
    Ok(build_report(
        "comparative",
        pack,
        records,
        &table,
        default_k(pack),
        splits,
        None,
        lexicon.hash(),
    )
    .with_config_hash(&lexicon.config_hash))
}

/// Mean filter mass on a word's own category dimensions divided by the mean
/// mass on every other dimension, per trained word.
pub fn filter_selectivity(lexicon: &Lexicon, pack: &EmbeddingPack) -> Result<Vec<(String, f64)>> {
    let truth = pack
        .synthetic_truth
        .as_ref()
        .ok_or_else(|| Error::Domain("filter selectivity needs a synthetic pack".into()))?;
    lexicon
        .entries
        .values()
        .filter(|e| e.is_trained())
        .map(|e| {
            let own = truth
                .category_dims
                .get(&e.category)
                .ok_or_else(|| Error::UnknownLabel(e.category.clone()))?;
            let mask = e.filter_mask();
            let mut is_own = vec![false; mask.len()];
            own.iter().for_each(|&i| is_own[i] = true);
            let (mut a, mut na, mut b, mut nb) = (0f64, 0usize, 0f64, 0usize);
            for (m, o) in mask.iter().zip(&is_own) {
                if *o {
                    a += *m as f64;
                    na += 1;
                } else {
                    b += *m as f64;
                    nb += 1;
                }
            }
            Ok((e.label.clone(), (a / na as f64) / (b / nb.max(1) as f64)))
        })
        .collect()
}

/// Seeded generator for an evaluation protocol.
pub fn eval_rng(seed: u64, purpose: &str) -> rand_chacha::ChaCha8Rng {
    derived_rng(seed, purpose, "", 0)
}

/// Copy of the lexicon whose decoders are replaced by freshly initialized
/// ones (the untrained control for composition).
pub fn with_fresh_decoders(lexicon: &Lexicon, seed: u64) -> Lexicon {
    let mut out = lexicon.clone();
    let dims = out.dims.clone();
    for e in out.entries.values_mut() {
        if e.decoder.is_some() {
            let mut rng = derived_rng(seed, "control-decoder", &e.label, 0);
            e.decoder = Some(DecoderNet::init(&dims, &mut rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedpack::{generate_synthetic, SyntheticConfig};

    #[test]
    fn holdout_partitions_train() {
        let pack = generate_synthetic(&SyntheticConfig {
            dim: 16,
            categories: SyntheticConfig::counted_categories(&[("c", 2), ("s", 2)]),
            dims_per_category: 4,
            noise_sigma: 0.0,
            variation_sigma: 0.1,
            train_count: 40,
            test_nc_count: 0,
            test_v_count: 4,
            holdout_pairs: vec![],
            unknown_vocab: vec![],
            seed: 1,
        })
        .unwrap();
        let (fit, held) = train_holdout(&pack, 10);
        assert_eq!(fit.len(), 36);
        assert_eq!(held.len(), 4);
        assert!(held.iter().all(|h| !fit.iter().any(|f| f.id == h.id)));
        assert_eq!(train_holdout(&pack, 0).0.len(), 40);
    }

    #[test]
    fn check_line_format() {
        let r = CheckRow::new(3, "filter selectivity", "min 1.02 < 3", false);
        assert_eq!(r.line(), "[FAIL] criterion 3: filter selectivity (min 1.02 < 3)");
    }
}

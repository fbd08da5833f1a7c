//! Evaluation protocols: top-k multi-attribute recognition, continual
//! learning rounds, composition multiple choice and edit quality, plus the
//! trainable baseline heads they are compared against.

mod baseline;
mod checks;
mod composition;
mod continual;

pub use baseline::{eval_baseline, grow_baseline, train_baseline, BaselineConfig, BaselineHead, BaselineKind};
pub use checks::{
    eval_recognition_records, eval_rng, filter_selectivity, train_holdout, with_fresh_decoders, CheckRow, Thresholds, THRESHOLDS,
    THRESHOLDS_VERSION,
};
pub use composition::{
    composition_edit_eval, composition_mc, make_mc_item, EditEvalResult, McResult, MultipleChoiceItem,
};
pub use continual::{continual_protocol, ContinualConfig, ContinualReport, MethodRounds};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedpack::{EmbeddingPack, SampleRecord, Split, VocabSide};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::numerics::Vec32;

/// Per-label scores for a batch of rows, one column per label.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    pub labels: Vec<String>,
    pub values: Array2<f64>,
    /// Distances rank ascending, confidences descending.
    pub lower_is_better: bool,
}

impl ScoreTable {
    /// Full ranking of row `i`, best first; ties go to the lexicographically
    /// smaller label.
    pub fn ranking(&self, i: usize) -> Vec<(String, f64)> {
        let row = self.values.row(i);
        let mut idx: Vec<usize> = (0..self.labels.len()).collect();
        idx.sort_by(|&a, &b| {
            let ord = row[a].total_cmp(&row[b]);
            let ord = if self.lower_is_better { ord } else { ord.reverse() };
            match ord {
                Ordering::Equal => self.labels[a].cmp(&self.labels[b]),
                o => o,
            }
        });
        idx.into_iter().map(|j| (self.labels[j].clone(), row[j])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    pub sample_id: String,
    /// `(label, distance)` over every concept, best first.
    pub ranked: Vec<(String, f64)>,
    pub top_k: usize,
}

impl RecognitionResult {
    pub fn top(&self) -> Vec<&str> {
        self.ranked.iter().take(self.top_k).map(|(l, _)| l.as_str()).collect()
    }
}

/// Mean squared distance between each row's encoding and each trained
/// concept's prototype. Concepts without a prototype are left out.
pub fn distance_table(lexicon: &Lexicon, rows: ArrayView2<f32>) -> Result<ScoreTable> {
    let trained: Vec<_> = lexicon.entries.values().filter(|e| e.is_trained()).collect();
    if trained.is_empty() {
        return Err(Error::Domain("lexicon has no trained concepts".into()));
    }
    let mut values = Array2::<f64>::zeros((rows.nrows(), trained.len()));
    for (j, entry) in trained.iter().enumerate() {
        if entry.net.dim() != rows.ncols() {
            return Err(Error::shape("recognition input", entry.net.dim(), rows.ncols()));
        }
        let rep = entry.rep()?.as_slice();
        let (enc, _) = entry.net.forward_batch(rows)?;
        for (i, r) in enc.rows().into_iter().enumerate() {
            let d: f64 = r
                .iter()
                .zip(rep)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                / rep.len() as f64;
            values[[i, j]] = d;
        }
    }
    Ok(ScoreTable {
        labels: trained.iter().map(|e| e.label.clone()).collect(),
        values,
        lower_is_better: true,
    })
}

/// Ranks every trained concept by distance to `e` in that concept's latent
/// space.
pub fn recognize_topk(lexicon: &Lexicon, e: &Vec32, k: usize) -> Result<RecognitionResult> {
    let row = e.view().insert_axis(Axis(0));
    let table = distance_table(lexicon, row)?;
    Ok(RecognitionResult {
        sample_id: String::new(),
        ranked: table.ranking(0),
        top_k: k,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn finish(&mut self) {
        self.accuracy = if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub splits: Vec<Split>,
    pub vocab_side: Option<VocabSide>,
    pub top_k: usize,
    pub total: usize,
    pub categories: BTreeMap<String, Accuracy>,
    /// Every ground-truth label of the sample is among the top k.
    pub all: Accuracy,
    pub config_hash: String,
    pub model_hash: String,
}

impl EvalReport {
    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `method,splits,side,category,hits,total,accuracy` rows, one per
    /// category plus `all`.
    pub fn to_csv(&self) -> String {
        let splits = self.splits.iter().map(|s| s.name()).collect::<Vec<_>>().join("+");
        let side = self.vocab_side.map_or("all", |s| s.name());
        let mut out = String::from("method,splits,side,category,hits,total,accuracy\n");
        for (c, a) in self.categories.iter().chain(std::iter::once((&"all".to_string(), &self.all))) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6}\n",
                self.method, splits, side, c, a.hits, a.total, a.accuracy
            ));
        }
        out
    }
}

/// Records of `splits` (in pack order), optionally restricted to one side.
pub fn select_records<'a>(pack: &'a EmbeddingPack, splits: &[Split], side: Option<VocabSide>) -> Vec<&'a SampleRecord> {
    pack.records
        .iter()
        .filter(|r| splits.contains(&r.split) && side.is_none_or(|s| r.vocab_side == s))
        .collect()
}

/// Aggregates top-k hits for `records` given their score table rows.
pub(crate) fn build_report(
    method: &str,
    pack: &EmbeddingPack,
    records: &[&SampleRecord],
    table: &ScoreTable,
    top_k: usize,
    splits: &[Split],
    side: Option<VocabSide>,
    model_hash: String,
) -> EvalReport {
    let mut categories: BTreeMap<String, Accuracy> = pack
        .category_map
        .category_names()
        .into_iter()
        .map(|c| (c, Accuracy::default()))
        .collect();
    let mut all = Accuracy::default();
    for (i, r) in records.iter().enumerate() {
        let ranking = table.ranking(i);
        let top: Vec<&str> = ranking.iter().take(top_k).map(|(l, _)| l.as_str()).collect();
        let mut every = true;
        for l in &r.labels {
            let hit = top.contains(&l.as_str());
            every &= hit;
            if let Some(c) = pack.category_map.category_of(l) {
                let acc = categories.entry(c.to_string()).or_default();
                acc.total += 1;
                acc.hits += hit as usize;
            }
        }
        all.total += 1;
        all.hits += every as usize;
    }
    categories.values_mut().for_each(Accuracy::finish);
    all.finish();
    EvalReport {
        method: method.to_string(),
        splits: splits.to_vec(),
        vocab_side: side,
        top_k,
        total: records.len(),
        categories,
        all,
        config_hash: String::new(),
        model_hash,
    }
}

/// Number of categories, used as k for top-k.
pub fn default_k(pack: &EmbeddingPack) -> usize {
    pack.category_map.categories.len()
}

/// Top-k recognition accuracy of the lexicon on the chosen records.
pub fn eval_recognition_on(
    lexicon: &Lexicon,
    pack: &EmbeddingPack,
    splits: &[Split],
    side: Option<VocabSide>,
) -> Result<EvalReport> {
    let records = select_records(pack, splits, side);
    let rows: Vec<usize> = records.iter().map(|r| r.row_index).collect();
    let x = pack.rows.select(Axis(0), &rows);
    let table = if rows.is_empty() {
        ScoreTable {
            labels: vec![],
            values: Array2::zeros((0, 0)),
            lower_is_better: true,
        }
    } else {
        distance_table(lexicon, x.view())?
    };
    Ok(build_report(
        "comparative",
        pack,
        &records,
        &table,
        default_k(pack),
        splits,
        side,
        lexicon.hash(),
    )
    .with_config_hash(&lexicon.config_hash))
}

pub fn eval_recognition(
    lexicon: &Lexicon,
    pack: &EmbeddingPack,
    split: Split,
    side: Option<VocabSide>,
) -> Result<EvalReport> {
    eval_recognition_on(lexicon, pack, &[split], side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Dims;

    fn table(values: Vec<f64>, labels: &[&str], lower: bool) -> ScoreTable {
        ScoreTable {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            values: Array2::from_shape_vec((1, labels.len()), values).unwrap(),
            lower_is_better: lower,
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = table(vec![0.5, 0.5, 0.1], &["b", "a", "c"], true);
        let r: Vec<String> = t.ranking(0).into_iter().map(|x| x.0).collect();
        assert_eq!(r, ["c", "a", "b"]);
        let t = table(vec![0.0, 0.0, 0.0], &["z", "y", "x"], false);
        let r: Vec<String> = t.ranking(0).into_iter().map(|x| x.0).collect();
        assert_eq!(r, ["x", "y", "z"]);
    }

    #[test]
    fn ranking_invariant_under_positive_rescale() {
        let t = table(vec![0.3, 0.1, 0.7, 0.2], &["a", "b", "c", "d"], true);
        let mut s = t.clone();
        s.values.mapv_inplace(|v| v * 17.5);
        let names = |t: &ScoreTable| t.ranking(0).into_iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(names(&t), names(&s));
    }

    #[test]
    fn single_concept_ranks_first() {
        let mut lex = Lexicon::new(Dims::with_embedding(8), 0);
        let e = lex.add_concept("only", "c").unwrap();
        e.rep = Some(Vec32::zeros(16));
        e.sample_count = 1;
        let r = recognize_topk(&lex, &Vec32::filled(8, 1.0), 3).unwrap();
        assert_eq!(r.top(), vec!["only"]);
        assert!(r.ranked[0].1 >= 0.0);
        assert!(recognize_topk(&lex, &Vec32::filled(7, 1.0), 3).is_err());
    }

    #[test]
    fn duplicate_concepts_tie_lexicographically() {
        let mut lex = Lexicon::new(Dims::with_embedding(8), 0);
        lex.add_concept("b", "c").unwrap();
        let mut twin = lex.get("b").unwrap().clone();
        twin.label = "a".into();
        lex.entries.insert("a".into(), twin);
        for l in ["a", "b"] {
            let e = lex.get_mut(l).unwrap();
            e.rep = Some(Vec32::filled(16, 0.2));
            e.sample_count = 1;
        }
        let r = recognize_topk(&lex, &Vec32::filled(8, 0.5), 2).unwrap();
        assert_eq!(r.ranked[0].1, r.ranked[1].1);
        assert_eq!(r.top(), vec!["a", "b"]);
    }

    #[test]
    fn report_csv_and_all_bound() {
        let pack = crate::embedpack::generate_synthetic(&crate::embedpack::SyntheticConfig {
            dim: 16,
            categories: crate::embedpack::SyntheticConfig::counted_categories(&[("c", 2), ("s", 2)]),
            dims_per_category: 4,
            noise_sigma: 0.0,
            variation_sigma: 0.1,
            train_count: 12,
            test_nc_count: 0,
            test_v_count: 0,
            holdout_pairs: vec![],
            unknown_vocab: vec![],
            seed: 1,
        })
        .unwrap();
        let records = select_records(&pack, &[Split::Train], None);
        // Perfect ranker: score 1 for the sample's own labels.
        let labels = pack.category_map.vocabulary();
        let values = Array2::from_shape_fn((records.len(), labels.len()), |(i, j)| {
            records[i].labels.contains(&labels[j]) as u8 as f64
        });
        let t = ScoreTable {
            labels,
            values,
            lower_is_better: false,
        };
        let rep = build_report("oracle", &pack, &records, &t, 2, &[Split::Train], None, String::new());
        assert_eq!(rep.all.accuracy, 1.0);
        assert!(rep.categories.values().all(|a| a.accuracy == 1.0));
        let csv = rep.to_csv();
        assert!(csv.starts_with("method,splits,side,category,hits,total,accuracy\n"));
        assert!(csv.contains("oracle,train,all,all,12,12,1.000000"));
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}

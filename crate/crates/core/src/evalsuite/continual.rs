//! Two-round continual protocol: Round 1 learns the known vocabulary from
//! known-only data; Round 2 adds the unknown words either from unknown-only
//! data or from known and unknown data together.

use serde::{Deserialize, Serialize};

use super::baseline::{eval_baseline, grow_baseline, train_baseline, BaselineConfig, BaselineKind};
use super::{eval_recognition_on, EvalReport};
use crate::embedpack::{EmbeddingPack, Split, VocabSide};
use crate::error::{Error, Result};
use crate::lexicon::{Dims, Lexicon};
use crate::trainer::{train_vocabulary, TrainConfig, TrainSet};

pub const TEST_SPLITS: [Split; 2] = [Split::TestNc, Split::TestV];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub baselines: Vec<BaselineKind>,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            baselines: BaselineKind::ALL.to_vec(),
        }
    }
}

/// Reports for one method. "known" evaluates the known-vocabulary test
/// samples, "full" every test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRounds {
    pub method: String,
    pub round1_known: EvalReport,
    pub round2_unknown_only_known: EvalReport,
    pub round2_unknown_only_full: EvalReport,
    pub round2_full_known: EvalReport,
    pub round2_full_full: EvalReport,
}

impl MethodRounds {
    /// Round 1 → Round 2 (unknown-only) change in known all-k accuracy.
    pub fn known_drop(&self) -> f64 {
        self.round1_known.all.accuracy - self.round2_unknown_only_known.all.accuracy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub methods: Vec<MethodRounds>,
    /// Round 2 left every known concept entry byte-identical.
    pub known_entries_unchanged: bool,
}

impl ContinualReport {
    pub fn method(&self, name: &str) -> Option<&MethodRounds> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn known_hashes(lex: &Lexicon, known: &[String]) -> Result<Vec<String>> {
    known.iter().map(|l| Ok(lex.get(l)?.hash())).collect()
}

pub fn continual_protocol(pack: &EmbeddingPack, config: &ContinualConfig) -> Result<ContinualReport> {
    let known_set = TrainSet::new(pack, Split::Train, Some(VocabSide::Known));
    let unknown_set = TrainSet::new(pack, Split::Train, Some(VocabSide::Unknown));
    let full_set = TrainSet::new(pack, Split::Train, None);
    if pack.category_map.unknown_vocab.is_empty() || known_set.is_empty() || unknown_set.is_empty() {
        return Err(Error::Domain("continual protocol needs known and unknown vocabulary sides".into()));
    }
    let known_words = known_set.labels();
    let new_words: Vec<String> = pack
        .category_map
        .unknown_vocab
        .iter()
        .filter(|w| unknown_set.count(w) > 0)
        .cloned()
        .collect();
    let eval_ours = |lex: &Lexicon, side| eval_recognition_on(lex, pack, &TEST_SPLITS, side);

    let mut base = Lexicon::new(Dims::with_embedding(pack.dim), config.train.seed);
    train_vocabulary(&mut base, &known_set, &known_words, &config.train)?;
    let before = known_hashes(&base, &known_words)?;
    let round1_known = eval_ours(&base, Some(VocabSide::Known))?;

    let mut lex_a = base.clone();
    train_vocabulary(&mut lex_a, &unknown_set, &new_words, &config.train)?;
    let known_entries_unchanged = known_hashes(&lex_a, &known_words)? == before;

    let mut lex_b = base;
    train_vocabulary(&mut lex_b, &full_set, &new_words, &config.train)?;

    let mut methods = vec![MethodRounds {
        method: "comparative".into(),
        round1_known,
        round2_unknown_only_known: eval_ours(&lex_a, Some(VocabSide::Known))?,
        round2_unknown_only_full: eval_ours(&lex_a, None)?,
        round2_full_known: eval_ours(&lex_b, Some(VocabSide::Known))?,
        round2_full_full: eval_ours(&lex_b, None)?,
    }];

    let all_words = full_set.labels();
    for &kind in &config.baselines {
        let r1 = train_baseline(kind, &known_set, &config.baseline)?;
        let eval = |h, side| eval_baseline(h, pack, &TEST_SPLITS, side);
        let mut a = grow_baseline(&r1, pack, &all_words, &config.baseline)?;
        a.fit(&unknown_set, &config.baseline)?;
        let mut b = grow_baseline(&r1, pack, &all_words, &config.baseline)?;
        b.fit(&full_set, &config.baseline)?;
        methods.push(MethodRounds {
            method: kind.name().into(),
            round1_known: eval(&r1, Some(VocabSide::Known))?,
            round2_unknown_only_known: eval(&a, Some(VocabSide::Known))?,
            round2_unknown_only_full: eval(&a, None)?,
            round2_full_known: eval(&b, Some(VocabSide::Known))?,
            round2_full_full: eval(&b, None)?,
        });
    }
    Ok(ContinualReport {
        methods,
        known_entries_unchanged,
    })
}

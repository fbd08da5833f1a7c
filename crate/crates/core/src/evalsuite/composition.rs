//! Composition by decoder arithmetic: picking the embedding that matches two
//! summed decoded prototypes, and editing one attribute of an embedding.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decodertrain::{decode_rep, edit_embedding};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::numerics::{mse_view, Vec32};
use crate::trainer::TrainSet;

#[derive(Clone, Debug, PartialEq)]
pub struct MultipleChoiceItem {
    pub p: String,
    pub q: String,
    /// Pack row indices of the three choices.
    pub choices: [usize; 3],
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mean: f64,
    pub std: f64,
    pub per_run: Vec<f64>,
    pub items_per_run: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Word pairs from different categories that both have a decoder and for
/// which the pool holds a row with both words, one with only `p` and one
/// with only `q`.
fn mc_pairs(lexicon: &Lexicon, pool: &TrainSet) -> Vec<(String, String)> {
    let ready: Vec<_> = lexicon
        .entries
        .values()
        .filter(|e| e.is_trained() && e.decoder.is_some())
        .collect();
    let mut out = Vec::new();
    for (i, a) in ready.iter().enumerate() {
        for b in &ready[i + 1..] {
            if a.category == b.category {
                continue;
            }
            let (p, q) = (a.label.as_str(), b.label.as_str());
            let rows_p = pool.indices_of(p);
            let both = rows_p.iter().any(|&r| pool.record(r).has(q));
            let only_p = rows_p.iter().any(|&r| !pool.record(r).has(q));
            let only_q = pool.indices_of(q).iter().any(|&r| !pool.record(r).has(p));
            if both && only_p && only_q {
                out.push((p.to_string(), q.to_string()));
            }
        }
    }
    out
}

/// One item: the correct row carries both words, each distractor carries
/// exactly one of them; positions are shuffled.
pub fn make_mc_item(pool: &TrainSet, p: &str, q: &str, rng: &mut impl Rng) -> Result<MultipleChoiceItem> {
    let pick = |rows: Vec<usize>, rng: &mut dyn rand::RngCore| -> Result<usize> {
        if rows.is_empty() {
            return Err(Error::Domain(format!("no rows to build an item for ({p}, {q})")));
        }
        Ok(pool.record(rows[rng.random_range(0..rows.len())]).row_index)
    };
    let with_p = pool.indices_of(p);
    let correct = pick(with_p.iter().copied().filter(|&r| pool.record(r).has(q)).collect(), rng)?;
    let only_p = pick(with_p.iter().copied().filter(|&r| !pool.record(r).has(q)).collect(), rng)?;
    let only_q = pick(
        pool.indices_of(q).iter().copied().filter(|&r| !pool.record(r).has(p)).collect(),
        rng,
    )?;
    let mut order = [(correct, true), (only_p, false), (only_q, false)];
    order.shuffle(rng);
    Ok(MultipleChoiceItem {
        p: p.to_string(),
        q: q.to_string(),
        choices: order.map(|c| c.0),
        correct: order.iter().position(|c| c.1).expect("one correct choice"),
    })
}

/// `runs` × `items` multiple-choice questions answered by
/// `argmin_c MSE(Dec_p(rep_p) + Dec_q(rep_q), e_c)`.
pub fn composition_mc(
    lexicon: &Lexicon,
    pool: &TrainSet,
    runs: usize,
    items: usize,
    rng: &mut impl Rng,
) -> Result<McResult> {
    if runs == 0 || items == 0 {
        return Err(Error::Config("composition_mc needs runs > 0 and items > 0".into()));
    }
    let pairs = mc_pairs(lexicon, pool);
    if pairs.is_empty() {
        return Err(Error::Domain("no word pairs with trained decoders and usable rows".into()));
    }
    let mut decoded: BTreeMap<&str, Vec32> = BTreeMap::new();
    for (p, q) in &pairs {
        for w in [p, q] {
            if !decoded.contains_key(w.as_str()) {
                decoded.insert(w, decode_rep(lexicon.get(w)?)?);
            }
        }
    }
    let rows = &pool.pack.rows;
    let mut per_run = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut hits = 0;
        for _ in 0..items {
            let (p, q) = &pairs[rng.random_range(0..pairs.len())];
            let item = make_mc_item(pool, p, q, rng)?;
            let mental = &decoded[p.as_str()].to_array() + &decoded[q.as_str()].to_array();
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, &c) in item.choices.iter().enumerate() {
                let d = mse_view(mental.view(), rows.row(c))?;
                if d < best.0 {
                    best = (d, i);
                }
            }
            hits += (best.1 == item.correct) as usize;
        }
        per_run.push(hits as f64 / items as f64);
    }
    let (mean, std) = mean_std(&per_run);
    Ok(McResult {
        mean,
        std,
        per_run,
        items_per_run: items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEvalResult {
    /// Mean of `MSE(edit, target) / MSE(e_q, target)`.
    pub mean_ratio: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// Largest `|edit(e, p, p) − reconstruct(e, p)|` seen; zero by identity.
    pub identity_max_abs_diff: f64,
}

/// Edits `n_pairs` source rows from `sources` (one attribute `q → p` within
/// its category) and compares each edit with the nearest `targets` row
/// carrying the edited label tuple.
pub fn composition_edit_eval(
    lexicon: &Lexicon,
    sources: &TrainSet,
    targets: &TrainSet,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<EditEvalResult> {
    if sources.is_empty() {
        return Err(Error::Domain("no source rows for edit evaluation".into()));
    }
    let ready = |w: &str| {
        lexicon
            .get(w)
            .map(|e| e.is_trained() && e.decoder.is_some())
            .unwrap_or(false)
    };
    let rows = &sources.pack.rows;
    let mut ratios = Vec::new();
    let mut skipped = 0;
    let mut identity = 0f64;
    for _ in 0..n_pairs {
        let rec = sources.record(rng.random_range(0..sources.len()));
        let editable: Vec<&String> = rec.labels.iter().filter(|l| ready(l)).collect();
        if editable.is_empty() {
            skipped += 1;
            continue;
        }
        let q = editable[rng.random_range(0..editable.len())].as_str();
        let entry_q = lexicon.get(q)?;
        let ps: Vec<&str> = sources
            .pack
            .category_map
            .words_in(&entry_q.category)
            .unwrap_or(&[])
            .iter()
            .map(String::as_str)
            .filter(|w| *w != q && ready(w))
            .collect();
        if ps.is_empty() {
            skipped += 1;
            continue;
        }
        let p = ps[rng.random_range(0..ps.len())];
        let entry_p = lexicon.get(p)?;
        let e_q = Vec32::new(rows.row(rec.row_index).to_vec())?;

        let recon_p = edit_embedding(&e_q, entry_p, entry_p)?;
        let recon = crate::decodertrain::reconstruct_embedding(&e_q, entry_p)?;
        for (a, b) in recon_p.as_slice().iter().zip(recon.as_slice()) {
            identity = identity.max((a - b).abs() as f64);
        }

        let key: BTreeSet<&str> = rec
            .labels
            .iter()
            .map(String::as_str)
            .filter(|l| *l != q)
            .chain(std::iter::once(p))
            .collect();
        let candidates = targets.indices_of_tuple(&key.into_iter().collect::<Vec<_>>());
        let Some(target_row) = candidates
            .iter()
            .map(|&i| targets.record(i).row_index)
            .map(|r| (mse_view(e_q.view(), rows.row(r)).unwrap_or(f64::INFINITY), r))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|x| x.1)
        else {
            skipped += 1;
            continue;
        };
        let target = rows.row(target_row);
        let edited = edit_embedding(&e_q, entry_q, entry_p)?;
        let base = mse_view(e_q.view(), target)?;
        if base == 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push(mse_view(edited.view(), target)? / base);
    }
    if ratios.is_empty() {
        return Err(Error::Domain("edit evaluation found no usable pairs".into()));
    }
    let (mean_ratio, _) = mean_std(&ratios);
    Ok(EditEvalResult {
        mean_ratio,
        evaluated: ratios.len(),
        skipped,
        identity_max_abs_diff: identity,
    })
}

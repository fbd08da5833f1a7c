//! Comparative training of one word: a similarity batch of samples carrying
//! the word and a difference batch of samples carrying a non-compatible word
//! from the same category. The loss pulls similarity representations onto
//! their centroid and pushes difference representations to unit mean
//! distance from it:
//!
//! `loss = loss_s² + (1 − loss_d)²`, with `loss_s`, `loss_d` the mean MSE of
//! the similarity and difference representations to the centroid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedpack::{EmbeddingPack, SampleRecord, Split, VocabSide};
use crate::error::{Error, Result};
use crate::lexicon::{ConceptEntry, ConceptNet, Lexicon};
use crate::numerics::{row_centroid, Adam, Real, Vec32};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub loss_threshold: f64,
    pub max_rounds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Worker threads for vocabulary-level training; results do not depend
    /// on this value.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            loss_threshold: 0.008,
            max_rounds: 200,
            epochs: 5,
            learning_rate: 1e-3,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.max_rounds > 0
            && self.epochs > 0
            && self.threads > 0
            && self.loss_threshold > 0.0
            && self.loss_threshold < 1.0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// Deterministic RNG for a (seed, purpose, label, nonce) tuple.
pub(crate) fn derived_rng(seed: u64, purpose: &str, label: &str, nonce: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(label.as_bytes());
    h.update(nonce.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize()[..32].try_into().expect("32 bytes"))
}

/// Records of a pack eligible for training, indexed by label and by full
/// label tuple for aligned pairing.
pub struct TrainSet<'a> {
    pub pack: &'a EmbeddingPack,
    records: Vec<&'a SampleRecord>,
    by_label: HashMap<&'a str, Vec<usize>>,
    by_tuple: HashMap<Vec<&'a str>, Vec<usize>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(pack: &'a EmbeddingPack, split: Split, side: Option<VocabSide>) -> Self {
        Self::from_records(
            pack,
            pack.records
                .iter()
                .filter(|r| r.split == split && side.is_none_or(|s| r.vocab_side == s))
                .collect(),
        )
    }

    pub fn from_records(pack: &'a EmbeddingPack, records: Vec<&'a SampleRecord>) -> Self {
        let mut by_label: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut by_tuple: HashMap<Vec<&str>, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            for l in &r.labels {
                by_label.entry(l.as_str()).or_default().push(i);
            }
            by_tuple
                .entry(r.labels.iter().map(String::as_str).collect())
                .or_default()
                .push(i);
        }
        Self {
            pack,
            records,
            by_label,
            by_tuple,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: &str) -> usize {
        self.by_label.get(label).map_or(0, Vec::len)
    }

    /// Labels present in this set, in pack vocabulary order.
    pub fn labels(&self) -> Vec<String> {
        self.pack
            .category_map
            .vocabulary()
            .into_iter()
            .filter(|w| self.count(w) > 0)
            .collect()
    }

    /// Set indices of records carrying `label`.
    pub fn indices_of(&self, label: &str) -> &[usize] {
        self.by_label.get(label).map_or(&[], Vec::as_slice)
    }

    /// Set indices of records whose full label set is `labels` (sorted).
    pub fn indices_of_tuple(&self, labels: &[&'a str]) -> &[usize] {
        self.by_tuple.get(labels).map_or(&[], Vec::as_slice)
    }

    pub fn record(&self, i: usize) -> &'a SampleRecord {
        self.records[i]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonBatchPair {
    pub target_label: String,
    /// Pack row indices of the similarity batch.
    pub sim: Vec<usize>,
    /// Pack row indices of the difference batch.
    pub diff: Vec<usize>,
    /// `pairing[i] == Some(i)` when `diff[i]` matches `sim[i]` on every
    /// category except the target's.
    pub pairing: Vec<Option<usize>>,
}

impl ComparisonBatchPair {
    pub fn aligned_count(&self) -> usize {
        self.pairing.iter().filter(|p| p.is_some()).count()
    }
}

/// Draws a similarity batch uniformly (with replacement) from rows carrying
/// `target`, and for each one a difference row that swaps only the target's
/// category value when such a row exists.
pub fn assemble_batches(
    set: &TrainSet,
    target: &str,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<ComparisonBatchPair> {
    let map = &set.pack.category_map;
    let category = map
        .category_of(target)
        .ok_or_else(|| Error::UnknownLabel(target.to_string()))?;
    let sim_pool = set
        .by_label
        .get(target)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::Domain(format!("label `{target}` has no samples in the training set")))?;
    let others: Vec<&str> = map
        .words_in(category)
        .unwrap_or(&[])
        .iter()
        .map(String::as_str)
        .filter(|w| *w != target)
        .collect();
    let diff_pool: Vec<usize> = {
        let mut v: Vec<usize> = others
            .iter()
            .flat_map(|w| set.by_label.get(w).into_iter().flatten().copied())
            .collect();
        v.sort_unstable();
        v
    };
    if diff_pool.is_empty() {
        return Err(Error::Domain(format!(
            "no samples with a word non-compatible with `{target}`"
        )));
    }

    let mut pair = ComparisonBatchPair {
        target_label: target.to_string(),
        sim: Vec::with_capacity(batch_size),
        diff: Vec::with_capacity(batch_size),
        pairing: Vec::with_capacity(batch_size),
    };
    let mut fallbacks = 0usize;
    let mut aligned = Vec::new();
    for i in 0..batch_size {
        let s = sim_pool[rng.random_range(0..sim_pool.len())];
        let srec = set.record(s);
        aligned.clear();
        for w in &others {
            let key: BTreeSet<&str> = srec
                .labels
                .iter()
                .map(String::as_str)
                .filter(|l| *l != target)
                .chain(std::iter::once(*w))
                .collect();
            let key: Vec<&str> = key.into_iter().collect();
            if let Some(rows) = set.by_tuple.get(&key) {
                aligned.extend_from_slice(rows);
            }
        }
        let (d, paired) = if aligned.is_empty() {
            fallbacks += 1;
            (diff_pool[rng.random_range(0..diff_pool.len())], None)
        } else {
            (aligned[rng.random_range(0..aligned.len())], Some(i))
        };
        pair.sim.push(srec.row_index);
        pair.diff.push(set.record(d).row_index);
        pair.pairing.push(paired);
    }
    if fallbacks > 0 {
        log::debug!("{target}: {fallbacks}/{batch_size} difference samples drawn without alignment");
    }
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub loss_s: f64,
    pub loss_d: f64,
    pub rep_candidate: Vec32,
}

/// Forward state of one comparative step, reused by the backward pass.
pub(crate) struct ComparativeForward<T> {
    x: Array2<T>,
    cache: crate::lexicon::EncodeCache<T>,
    reps: Array2<T>,
    centroid: Array1<T>,
    n_sim: usize,
    prior_weight: f64,
    pub loss: f64,
    pub loss_s: f64,
    pub loss_d: f64,
}

/// Forward pass of the comparative loss. With a prior `(rep, weight)` the
/// centroid becomes the running mean `(weight·rep + Σ r_u) / (weight + n)`.
pub(crate) fn comparative_forward<T: Real>(
    net: &ConceptNet<T>,
    sim: ArrayView2<T>,
    diff: ArrayView2<T>,
    prior: Option<(ArrayView1<T>, f64)>,
) -> Result<ComparativeForward<T>> {
    let (n, m) = (sim.nrows(), diff.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Domain("comparative loss needs non-empty batches".into()));
    }
    let x = concatenate(Axis(0), &[sim, diff]).map_err(|_| Error::shape("comparative batch", sim.ncols(), diff.ncols()))?;
    let (reps, cache) = net.forward_batch(x.view())?;
    let latent = reps.ncols();

    let batch_mean = row_centroid(reps.slice(ndarray::s![..n, ..]))?;
    let (centroid, prior_weight) = match prior {
        None => (batch_mean, 0.0),
        Some((rep, w)) => {
            if rep.len() != latent {
                return Err(Error::shape("prior representation", latent, rep.len()));
            }
            let total = w + n as f64;
            let c: Array1<T> = rep
                .iter()
                .zip(batch_mean.iter())
                .map(|(p, b)| T::lit((w * p.to_f64().unwrap() + n as f64 * b.to_f64().unwrap()) / total))
                .collect();
            (c, w)
        }
    };

    let mean_dist = |rows: ArrayView2<T>| -> f64 {
        let mut acc = 0f64;
        for r in rows.rows() {
            for (a, c) in r.iter().zip(centroid.iter()) {
                let d = a.to_f64().unwrap() - c.to_f64().unwrap();
                acc += d * d;
            }
        }
        acc / (rows.nrows() * latent) as f64
    };
    let loss_s = mean_dist(reps.slice(ndarray::s![..n, ..]));
    let loss_d = mean_dist(reps.slice(ndarray::s![n.., ..]));
    let loss = loss_s * loss_s + (1.0 - loss_d) * (1.0 - loss_d);
    if !(loss.is_finite() && loss_s.is_finite() && loss_d.is_finite()) {
        return Err(Error::NonFinite(format!(
            "comparative loss (loss_s={loss_s}, loss_d={loss_d})"
        )));
    }
    let _ = m;
    Ok(ComparativeForward {
        x,
        cache,
        reps,
        centroid,
        n_sim: n,
        prior_weight,
        loss,
        loss_s,
        loss_d,
    })
}

/// Accumulates `d loss / d params` into `net`'s gradient buffers.
pub(crate) fn comparative_backward<T: Real>(net: &mut ConceptNet<T>, fwd: &ComparativeForward<T>) -> Result<()> {
    let n = fwd.n_sim;
    let m = fwd.reps.nrows() - n;
    let latent = fwd.reps.ncols();
    let a_s = 2.0 * fwd.loss_s;
    let a_d = -2.0 * (1.0 - fwd.loss_d);
    let ks = T::lit(a_s * 2.0 / (n * latent) as f64);
    let kd = T::lit(a_d * 2.0 / (m * latent) as f64);

    let diffs = &fwd.reps - &fwd.centroid;
    let mut grad = diffs.clone();
    grad.slice_mut(ndarray::s![..n, ..]).mapv_inplace(|v| v * ks);
    grad.slice_mut(ndarray::s![n.., ..]).mapv_inplace(|v| v * kd);

    // Through the centroid: d loss / d c, spread over the similarity rows.
    let sum_s = diffs.slice(ndarray::s![..n, ..]).sum_axis(Axis(0));
    let sum_d = diffs.slice(ndarray::s![n.., ..]).sum_axis(Axis(0));
    let g_c = sum_s.mapv(|v| -v * ks) + sum_d.mapv(|v| -v * kd);
    let share = T::lit(1.0 / (fwd.prior_weight + n as f64));
    let g_row = g_c.mapv(|v| v * share);
    for mut row in grad.slice_mut(ndarray::s![..n, ..]).rows_mut() {
        row.zip_mut_with(&g_row, |a, &b| *a = *a + b);
    }
    net.backward_batch(fwd.x.view(), &fwd.cache, grad.view())
}

fn gather<T: Real>(pack: &EmbeddingPack, rows: &[usize]) -> Array2<T> {
    let sel = pack.rows.select(Axis(0), rows);
    sel.mapv(|v| T::lit(v as f64))
}

/// Loss components for `entry` on one batch pair (no parameter change).
pub fn comparative_loss(entry: &ConceptEntry, pair: &ComparisonBatchPair, pack: &EmbeddingPack) -> Result<LossParts> {
    if entry.net.dim() != pack.dim {
        return Err(Error::shape("comparative_loss", entry.net.dim(), pack.dim));
    }
    let sim = pack.rows.select(Axis(0), &pair.sim);
    let diff = pack.rows.select(Axis(0), &pair.diff);
    let fwd = comparative_forward(&entry.net, sim.view(), diff.view(), None)?;
    Ok(LossParts {
        loss: fwd.loss,
        loss_s: fwd.loss_s,
        loss_d: fwd.loss_d,
        rep_candidate: Vec32::from_array(fwd.centroid)?,
    })
}

/// One stats line per concept per epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub label: String,
    pub phase: String,
    pub epoch: usize,
    pub rounds: usize,
    pub loss: f64,
    pub loss_s: f64,
    pub loss_d: f64,
    pub converged: bool,
    pub unaligned_diff: usize,
    pub wall_ms: u64,
}

/// Equality ignores `wall_ms`.
impl PartialEq for TrainStats {
    fn eq(&self, o: &Self) -> bool {
        self.label == o.label
            && self.phase == o.phase
            && self.epoch == o.epoch
            && self.rounds == o.rounds
            && self.loss.to_bits() == o.loss.to_bits()
            && self.loss_s.to_bits() == o.loss_s.to_bits()
            && self.loss_d.to_bits() == o.loss_d.to_bits()
            && self.converged == o.converged
            && self.unaligned_diff == o.unaligned_diff
    }
}

impl TrainStats {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Optimizes one entry in place until the loss drops below the threshold or
/// the round budget is spent, then freezes its prototype on a fresh
/// similarity batch.
pub fn train_entry(entry: &mut ConceptEntry, set: &TrainSet, config: &TrainConfig, epoch: usize) -> Result<TrainStats> {
    config.validate()?;
    if entry.net.dim() != set.pack.dim {
        return Err(Error::shape("train_concept", entry.net.dim(), set.pack.dim));
    }
    let start = Instant::now();
    let label = entry.label.clone();
    let mut rng = derived_rng(config.seed, "train", &label, entry.trained_rounds);
    let mut opt = Adam::<f32>::new(config.learning_rate);
    let mut last = None;
    let mut rounds = 0;
    let mut unaligned = 0;
    let mut converged = false;
    while rounds < config.max_rounds {
        rounds += 1;
        let pair = assemble_batches(set, &label, config.batch_size, &mut rng)?;
        unaligned += pair.pairing.len() - pair.aligned_count();
        let sim = gather::<f32>(set.pack, &pair.sim);
        let diff = gather::<f32>(set.pack, &pair.diff);
        let fwd = comparative_forward(&entry.net, sim.view(), diff.view(), None).map_err(|e| {
            Error::NonFinite(format!("{label} round {rounds}: {e}"))
        })?;
        last = Some((fwd.loss, fwd.loss_s, fwd.loss_d));
        if fwd.loss < config.loss_threshold {
            converged = true;
            break;
        }
        comparative_backward(&mut entry.net, &fwd)?;
        opt.step(&mut entry.net)
            .map_err(|e| Error::NonFinite(format!("{label} round {rounds}: {e}")))?;
    }

    let pair = assemble_batches(set, &label, config.batch_size, &mut rng)?;
    let sim = gather::<f32>(set.pack, &pair.sim);
    let (reps, _) = entry.net.forward_batch(sim.view())?;
    entry.rep = Some(Vec32::from_array(row_centroid(reps.view())?)?);
    entry.sample_count = config.batch_size as u64;
    entry.trained_rounds += rounds as u64;

    let (loss, loss_s, loss_d) = last.expect("at least one round");
    Ok(TrainStats {
        label,
        phase: "train".into(),
        epoch,
        rounds,
        loss,
        loss_s,
        loss_d,
        converged,
        unaligned_diff: unaligned,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

fn ensure_concept(lexicon: &mut Lexicon, pack: &EmbeddingPack, label: &str) -> Result<()> {
    if !lexicon.contains(label) {
        let category = pack
            .category_map
            .category_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?
            .to_string();
        lexicon.add_concept(label, &category)?;
    }
    Ok(())
}

/// Trains `label`, adding it to the lexicon first if needed. Only that
/// entry is modified.
pub fn train_concept(lexicon: &mut Lexicon, set: &TrainSet, label: &str, config: &TrainConfig) -> Result<TrainStats> {
    ensure_concept(lexicon, set.pack, label)?;
    train_entry(lexicon.get_mut(label)?, set, config, 1)
}

/// Runs `epochs` passes over `labels` in the given order. Labels are
/// independent, so each epoch may train them on several threads; stats
/// come back in label order either way.
pub fn train_vocabulary(
    lexicon: &mut Lexicon,
    set: &TrainSet,
    labels: &[String],
    config: &TrainConfig,
) -> Result<BTreeMap<String, Vec<TrainStats>>> {
    config.validate()?;
    for l in labels {
        ensure_concept(lexicon, set.pack, l)?;
        if set.count(l) == 0 {
            return Err(Error::Domain(format!("label `{l}` has no samples in the training set")));
        }
    }
    let mut out: BTreeMap<String, Vec<TrainStats>> = BTreeMap::new();
    for epoch in 1..=config.epochs {
        let stats = for_each_entry(lexicon, labels, config.threads, |entry| {
            train_entry(entry, set, config, epoch)
        })?;
        for s in stats {
            out.entry(s.label.clone()).or_default().push(s);
        }
    }
    Ok(out)
}

/// Applies `f` to each listed entry, possibly on several threads, returning
/// results in `labels` order. Entries are moved out of the lexicon while
/// they are worked on.
pub(crate) fn for_each_entry<R, F>(lexicon: &mut Lexicon, labels: &[String], threads: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut ConceptEntry) -> Result<R> + Sync,
{
    let mut work: Vec<ConceptEntry> = labels
        .iter()
        .map(|l| lexicon.entries.remove(l).ok_or_else(|| Error::UnknownLabel(l.clone())))
        .collect::<Result<_>>()
        .inspect_err(|_| ())?;
    let results: Vec<Result<R>> = if threads <= 1 || work.len() <= 1 {
        work.iter_mut().map(&f).collect()
    } else {
        let chunk = work.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .chunks_mut(chunk)
                .map(|c| scope.spawn(|| c.iter_mut().map(&f).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    for e in work {
        lexicon.entries.insert(e.label.clone(), e);
    }
    results.into_iter().collect()
}

/// Continual refinement of an already trained concept on new samples: the
/// candidate prototype is the running mean of the stored prototype (weighted
/// by its sample count) and the new representations.
pub fn refine_concept(lexicon: &mut Lexicon, set: &TrainSet, label: &str, config: &TrainConfig) -> Result<TrainStats> {
    config.validate()?;
    let entry = lexicon.get_mut(label)?;
    if !entry.is_trained() {
        return Err(Error::NotReady {
            label: label.to_string(),
            reason: "refining requires a trained concept".into(),
        });
    }
    let start = Instant::now();
    let mut stats = TrainStats {
        label: label.to_string(),
        phase: "refine".into(),
        epoch: 1,
        rounds: 0,
        loss: f64::NAN,
        loss_s: f64::NAN,
        loss_d: f64::NAN,
        converged: false,
        unaligned_diff: 0,
        wall_ms: 0,
    };
    if set.count(label) == 0 {
        log::warn!("refine `{label}`: no new samples, prototype unchanged");
        stats.loss = 0.0;
        stats.loss_s = 0.0;
        stats.loss_d = 0.0;
        return Ok(stats);
    }
    let prior_rep = entry.rep()?.to_array();
    let prior_weight = entry.sample_count as f64;
    let mut rng = derived_rng(config.seed, "refine", label, entry.trained_rounds);
    let mut opt = Adam::<f32>::new(config.learning_rate);
    while stats.rounds < config.max_rounds {
        stats.rounds += 1;
        let pair = assemble_batches(set, label, config.batch_size, &mut rng)?;
        stats.unaligned_diff += pair.pairing.len() - pair.aligned_count();
        let sim = gather::<f32>(set.pack, &pair.sim);
        let diff = gather::<f32>(set.pack, &pair.diff);
        let fwd = comparative_forward(&entry.net, sim.view(), diff.view(), Some((prior_rep.view(), prior_weight)))?;
        stats.loss = fwd.loss;
        stats.loss_s = fwd.loss_s;
        stats.loss_d = fwd.loss_d;
        if fwd.loss < config.loss_threshold {
            stats.converged = true;
            break;
        }
        comparative_backward(&mut entry.net, &fwd)?;
        opt.step(&mut entry.net)?;
    }

    let pair = assemble_batches(set, label, config.batch_size, &mut rng)?;
    let sim = gather::<f32>(set.pack, &pair.sim);
    let (reps, _) = entry.net.forward_batch(sim.view())?;
    let batch_mean = row_centroid(reps.view())?;
    let n = pair.sim.len() as f64;
    let total = prior_weight + n;
    let rep: Array1<f32> = prior_rep
        .iter()
        .zip(batch_mean.iter())
        .map(|(&p, &b)| ((prior_weight * p as f64 + n * b as f64) / total) as f32)
        .collect();
    entry.rep = Some(Vec32::from_array(rep)?);
    entry.sample_count += pair.sim.len() as u64;
    entry.trained_rounds += stats.rounds as u64;
    stats.wall_ms = start.elapsed().as_millis() as u64;
    Ok(stats)
}

/// Shadow-precision (`f64`) loss and flat gradient for gradient checking.
pub fn comparative_loss_and_grad_f64(
    net: &ConceptNet<f64>,
    sim: ArrayView2<f64>,
    diff: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut net = net.clone();
    crate::numerics::Params::zero_grad(&mut net);
    let fwd = comparative_forward(&net, sim, diff, None)?;
    comparative_backward(&mut net, &fwd)?;
    Ok((fwd.loss, crate::numerics::flatten_grads(&mut net)))
}

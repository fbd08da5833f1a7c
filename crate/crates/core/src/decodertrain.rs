//! Per-word decoders from prototype space back to embedding space, trained
//! jointly on editing (`e_q` with `q` masked out, plus `p` decoded) and
//! reconstruction (`e_p` with `p` masked out, plus `p` decoded).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedpack::EmbeddingPack;
use crate::error::{Error, Result};
use crate::lexicon::{ConceptEntry, DecoderNet, Lexicon};
use crate::numerics::{Adam, Dropout, Mode, Real, Vec32};
use crate::trainer::{derived_rng, for_each_entry, TrainSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub batch_size: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            rounds: 100,
            epochs: 5,
            dropout: 0.2,
            learning_rate: 1e-3,
            seed: 0,
            threads: 1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.rounds > 0
            && self.epochs > 0
            && self.threads > 0
            && (0.0..1.0).contains(&self.dropout)
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decoder config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditExample {
    pub q: String,
    pub p: String,
    pub e_q: Vec32,
    pub e_p: Vec32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderStats {
    pub label: String,
    pub phase: String,
    pub epoch: usize,
    pub rounds: usize,
    pub initial_loss: f64,
    pub loss: f64,
    pub edit_loss: f64,
    pub recon_loss: f64,
    pub wall_ms: u64,
}

/// Equality ignores `wall_ms`.
impl PartialEq for DecoderStats {
    fn eq(&self, o: &Self) -> bool {
        self.label == o.label
            && self.phase == o.phase
            && self.epoch == o.epoch
            && self.rounds == o.rounds
            && self.initial_loss.to_bits() == o.initial_loss.to_bits()
            && self.loss.to_bits() == o.loss.to_bits()
            && self.edit_loss.to_bits() == o.edit_loss.to_bits()
            && self.recon_loss.to_bits() == o.recon_loss.to_bits()
    }
}

impl DecoderStats {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

fn complement_mask(entry: &ConceptEntry) -> Array1<f32> {
    entry.net.mask().mapv(|m| 1.0 - m)
}

fn require_trained(entry: &ConceptEntry) -> Result<()> {
    if entry.is_trained() {
        Ok(())
    } else {
        Err(Error::NotReady {
            label: entry.label.clone(),
            reason: "concept has not been trained".into(),
        })
    }
}

/// `Dec_p(rep_p)`, dropout off.
pub fn decode_rep(entry: &ConceptEntry) -> Result<Vec32> {
    let out = entry.decoder()?.forward(entry.rep()?.view())?;
    Vec32::from_array(out)
}

/// `e_q ⊙ (1 − σ(F_q)) + Dec_p(rep_p)`.
pub fn edit_embedding(e_q: &Vec32, entry_q: &ConceptEntry, entry_p: &ConceptEntry) -> Result<Vec32> {
    require_trained(entry_q)?;
    require_trained(entry_p)?;
    if e_q.dim() != entry_q.net.dim() {
        return Err(Error::shape("edit_embedding", entry_q.net.dim(), e_q.dim()));
    }
    let decoded = decode_rep(entry_p)?;
    if decoded.dim() != e_q.dim() {
        return Err(Error::shape("edit_embedding decoder", e_q.dim(), decoded.dim()));
    }
    let keep = complement_mask(entry_q);
    let out: Vec<f32> = e_q
        .as_slice()
        .iter()
        .zip(keep.iter())
        .zip(decoded.as_slice())
        .map(|((&e, &k), &d)| e * k + d)
        .collect();
    Vec32::new(out)
}

/// `e_p ⊙ (1 − σ(F_p)) + Dec_p(rep_p)`. Computed separately from
/// [`edit_embedding`] so the `q = p` identity is a real check.
pub fn reconstruct_embedding(e_p: &Vec32, entry_p: &ConceptEntry) -> Result<Vec32> {
    require_trained(entry_p)?;
    if e_p.dim() != entry_p.net.dim() {
        return Err(Error::shape("reconstruct_embedding", entry_p.net.dim(), e_p.dim()));
    }
    let decoded = entry_p.decoder()?.forward(entry_p.rep()?.view())?;
    let keep = complement_mask(entry_p);
    let out = &(&e_p.to_array() * &keep) + &decoded;
    Vec32::from_array(out)
}

/// Activations kept for the decoder backward pass.
pub(crate) struct DecoderCache<T> {
    inputs: Vec<Array2<T>>,
    scales: Vec<Option<Array2<T>>>,
}

/// Batched decoder forward with dropout after every hidden layer.
pub(crate) fn decoder_forward_batch<T: Real>(
    net: &DecoderNet<T>,
    x: ArrayView2<T>,
    dropout: &mut Dropout,
) -> Result<(Array2<T>, DecoderCache<T>)> {
    let mut cache = DecoderCache {
        inputs: Vec::with_capacity(net.layers.len()),
        scales: Vec::with_capacity(net.layers.len()),
    };
    let mut h = x.to_owned();
    let last = net.layers.len() - 1;
    for (i, layer) in net.layers.iter().enumerate() {
        let mut out = layer.forward_batch(h.view())?;
        cache.inputs.push(h);
        let scale = if i < last { dropout.apply(&mut out) } else { None };
        cache.scales.push(scale);
        h = out;
    }
    Ok((h, cache))
}

pub(crate) fn decoder_backward_batch<T: Real>(
    net: &mut DecoderNet<T>,
    cache: &DecoderCache<T>,
    grad_out: ArrayView2<T>,
) -> Result<()> {
    let mut g = grad_out.to_owned();
    for (i, layer) in net.layers.iter_mut().enumerate().rev() {
        if let Some(s) = &cache.scales[i] {
            g.zip_mut_with(s, |a, &b| *a = *a * b);
        }
        g = layer.backward_batch(cache.inputs[i].view(), g.view())?;
    }
    Ok(())
}

/// Loss terms of one decoder batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderLoss {
    pub loss: f64,
    pub edit: f64,
    pub recon: f64,
}

/// Joint edit + reconstruction loss for a batch. `kept_q` and `kept_p` are
/// the already masked inputs `e_q ⊙ (1 − F_q)` and `e_p ⊙ (1 − F_p)`; the
/// prototype is replicated once per row so dropout differs per pair.
/// Accumulates decoder gradients when `backward` is set.
pub(crate) fn decoder_step<T: Real>(
    net: &mut DecoderNet<T>,
    rep: ArrayView1<T>,
    kept_q: ArrayView2<T>,
    kept_p: ArrayView2<T>,
    target: ArrayView2<T>,
    dropout: &mut Dropout,
    backward: bool,
) -> Result<DecoderLoss> {
    let b = target.nrows();
    if b == 0 {
        return Err(Error::Domain("empty decoder batch".into()));
    }
    let x = rep.broadcast((b, rep.len())).expect("row broadcast").to_owned();
    let (decoded, cache) = decoder_forward_batch(net, x.view(), dropout)?;
    if decoded.dim() != target.dim() {
        return Err(Error::shape("decoder output", target.ncols(), decoded.ncols()));
    }
    let res_q = &decoded + &kept_q - target;
    let res_p = &decoded + &kept_p - target;
    let n = (b * target.ncols()) as f64;
    let sq = |a: &Array2<T>| a.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / n;
    let (edit, recon) = (sq(&res_q), sq(&res_p));
    let loss = edit + recon;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("decoder loss (edit={edit}, recon={recon})")));
    }
    if backward {
        let k = T::lit(2.0 / n);
        let grad = (res_q + res_p).mapv(|v| v * k);
        decoder_backward_batch(net, &cache, grad.view())?;
    }
    Ok(DecoderLoss { loss, edit, recon })
}

/// Frozen per-concept data the decoder objective reads.
struct FrozenView {
    category: String,
    keep: Array1<f32>,
}

fn frozen_views(lexicon: &Lexicon) -> HashMap<String, FrozenView> {
    lexicon
        .entries
        .values()
        .filter(|e| e.is_trained())
        .map(|e| {
            (
                e.label.clone(),
                FrozenView {
                    category: e.category.clone(),
                    keep: complement_mask(e),
                },
            )
        })
        .collect()
}

/// Samples `n` edit pairs for target `p`: `e_p` uniform over rows carrying
/// `p`, `q` uniform over trained words of the same category present in the
/// set, and `e_q` matched to `e_p` on every other category when possible.
pub fn sample_edit_pairs(
    set: &TrainSet,
    lexicon: &Lexicon,
    p: &str,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<EditExample>> {
    let frozen = frozen_views(lexicon);
    let pairs = sample_pair_rows(set, &frozen, p, n, rng)?;
    pairs
        .into_iter()
        .map(|(q, qi, pi)| {
            Ok(EditExample {
                q,
                p: p.to_string(),
                e_q: Vec32::new(set.pack.rows.row(qi).to_vec())?,
                e_p: Vec32::new(set.pack.rows.row(pi).to_vec())?,
            })
        })
        .collect()
}

/// `(q, row of e_q, row of e_p)` triples.
fn sample_pair_rows(
    set: &TrainSet,
    frozen: &HashMap<String, FrozenView>,
    p: &str,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(String, usize, usize)>> {
    let category = &frozen
        .get(p)
        .ok_or_else(|| Error::NotReady {
            label: p.to_string(),
            reason: "decoder training needs a trained concept".into(),
        })?
        .category;
    let p_rows = set.indices_of(p);
    let qs: Vec<&str> = set
        .pack
        .category_map
        .words_in(category)
        .unwrap_or(&[])
        .iter()
        .map(String::as_str)
        .filter(|q| *q != p && frozen.contains_key(*q) && set.count(q) > 0)
        .collect();
    if p_rows.is_empty() || qs.is_empty() {
        return Err(Error::Domain(format!("no valid edit pairs for `{p}`")));
    }
    let mut out = Vec::with_capacity(n);
    let mut fallbacks = 0;
    for _ in 0..n {
        let pi = p_rows[rng.random_range(0..p_rows.len())];
        let q = qs[rng.random_range(0..qs.len())];
        let prec = set.record(pi);
        let key: BTreeSet<&str> = prec
            .labels
            .iter()
            .map(String::as_str)
            .filter(|l| *l != p)
            .chain(std::iter::once(q))
            .collect();
        let aligned = set.indices_of_tuple(&key.into_iter().collect::<Vec<_>>());
        let qi = if aligned.is_empty() {
            fallbacks += 1;
            let pool = set.indices_of(q);
            pool[rng.random_range(0..pool.len())]
        } else {
            aligned[rng.random_range(0..aligned.len())]
        };
        out.push((q.to_string(), set.record(qi).row_index, prec.row_index));
    }
    if fallbacks > 0 {
        log::debug!("{p}: {fallbacks}/{n} edit sources drawn without alignment");
    }
    Ok(out)
}

fn build_batch(
    pack: &EmbeddingPack,
    frozen: &HashMap<String, FrozenView>,
    p: &str,
    triples: &[(String, usize, usize)],
) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let q_rows: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let p_rows: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let target = pack.rows.select(Axis(0), &p_rows);
    let mut kept_q = pack.rows.select(Axis(0), &q_rows);
    for (mut row, (q, _, _)) in kept_q.rows_mut().into_iter().zip(triples) {
        row *= &frozen[q].keep;
    }
    let kept_p = &target * &frozen[p].keep;
    (kept_q, kept_p, target)
}

fn train_decoder_entry(
    entry: &mut ConceptEntry,
    set: &TrainSet,
    frozen: &HashMap<String, FrozenView>,
    config: &DecoderConfig,
    epoch: usize,
) -> Result<DecoderStats> {
    let start = Instant::now();
    let label = entry.label.clone();
    let rep = entry.rep()?.to_array();
    let mut rng = derived_rng(config.seed, "decoder", &label, epoch as u64);
    let mut dropout = Dropout::new(config.dropout, Mode::Train, rng.random())?;
    let decoder = entry.decoder.as_mut().ok_or_else(|| Error::NotReady {
        label: label.clone(),
        reason: "no decoder".into(),
    })?;
    let mut opt = Adam::<f32>::new(config.learning_rate);
    let mut initial = None;
    let mut last = DecoderLoss {
        loss: f64::NAN,
        edit: f64::NAN,
        recon: f64::NAN,
    };
    for _ in 0..config.rounds {
        let triples = sample_pair_rows(set, frozen, &label, config.batch_size, &mut rng)?;
        let (kq, kp, target) = build_batch(set.pack, frozen, &label, &triples);
        last = decoder_step(decoder, rep.view(), kq.view(), kp.view(), target.view(), &mut dropout, true)?;
        initial.get_or_insert(last.loss);
        opt.step(decoder)?;
    }
    Ok(DecoderStats {
        label,
        phase: "decoder".into(),
        epoch,
        rounds: config.rounds,
        initial_loss: initial.unwrap_or(f64::NAN),
        loss: last.loss,
        edit_loss: last.edit,
        recon_loss: last.recon,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// One decoder training call (`rounds` optimizer steps) for `label`. The
/// decoder is created on first use; filters, encoders and prototypes are
/// never touched.
pub fn train_decoder(lexicon: &mut Lexicon, set: &TrainSet, label: &str, config: &DecoderConfig) -> Result<DecoderStats> {
    train_decoder_epoch(lexicon, set, label, config, 1)
}

fn train_decoder_epoch(
    lexicon: &mut Lexicon,
    set: &TrainSet,
    label: &str,
    config: &DecoderConfig,
    epoch: usize,
) -> Result<DecoderStats> {
    config.validate()?;
    require_trained(lexicon.get(label)?)?;
    let frozen = frozen_views(lexicon);
    let entry = lexicon.ensure_decoder(label)?;
    train_decoder_entry(entry, set, &frozen, config, epoch)
}

/// `epochs` passes of [`train_decoder`] over `labels`.
pub fn train_decoders(
    lexicon: &mut Lexicon,
    set: &TrainSet,
    labels: &[String],
    config: &DecoderConfig,
) -> Result<BTreeMap<String, Vec<DecoderStats>>> {
    config.validate()?;
    for l in labels {
        require_trained(lexicon.get(l)?)?;
        lexicon.ensure_decoder(l)?;
    }
    let frozen = frozen_views(lexicon);
    let mut out: BTreeMap<String, Vec<DecoderStats>> = BTreeMap::new();
    for epoch in 1..=config.epochs {
        let stats = for_each_entry(lexicon, labels, config.threads, |entry| {
            train_decoder_entry(entry, set, &frozen, config, epoch)
        })?;
        for s in stats {
            out.entry(s.label.clone()).or_default().push(s);
        }
    }
    Ok(out)
}

/// Shadow-precision decoder loss and flat gradient for gradient checking.
/// `dropout_seed` fixes the dropout pattern (`None` disables dropout).
pub fn decoder_loss_and_grad_f64(
    net: &DecoderNet<f64>,
    rep: ArrayView1<f64>,
    kept_q: ArrayView2<f64>,
    kept_p: ArrayView2<f64>,
    target: ArrayView2<f64>,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    let mut net = net.clone();
    crate::numerics::Params::zero_grad(&mut net);
    let mut dropout = match dropout_seed {
        Some(s) => Dropout::new(0.2, Mode::Train, s)?,
        None => Dropout::new(0.0, Mode::Infer, 0)?,
    };
    let l = decoder_step(&mut net, rep, kept_q, kept_p, target, &mut dropout, true)?;
    Ok((l.loss, crate::numerics::flatten_grads(&mut net)))
}

/// Decoder loss only, same conventions as [`decoder_loss_and_grad_f64`].
pub fn decoder_loss_f64(
    net: &DecoderNet<f64>,
    rep: ArrayView1<f64>,
    kept_q: ArrayView2<f64>,
    kept_p: ArrayView2<f64>,
    target: ArrayView2<f64>,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let mut net = net.clone();
    let mut dropout = match dropout_seed {
        Some(s) => Dropout::new(0.2, Mode::Train, s)?,
        None => Dropout::new(0.0, Mode::Infer, 0)?,
    };
    Ok(decoder_step(&mut net, rep, kept_q, kept_p, target, &mut dropout, false)?.loss)
}

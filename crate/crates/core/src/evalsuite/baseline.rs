//! Trainable comparison heads on the same embeddings: a fixed-vocabulary
//! multi-label classifier, one binary classifier per word, and a contrastive
//! projection with learned label vectors. All use two fully connected layers
//! with the same hidden width as the concept encoders.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_report, default_k, select_records, EvalReport, ScoreTable};
use crate::embedpack::{EmbeddingPack, Split, VocabSide};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Linear, Params, Real};
use crate::trainer::{derived_rng, TrainSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Linear,
    MultiAttr,
    Contrastive,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Linear, BaselineKind::MultiAttr, BaselineKind::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Linear => "linear",
            BaselineKind::MultiAttr => "multi_attr",
            BaselineKind::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub hidden: usize,
    /// Projection width of the contrastive head.
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed_dim: 16,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            temperature: 0.07,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum HeadNet<T> {
    Linear {
        l1: Linear<T>,
        l2: Linear<T>,
    },
    MultiAttr {
        heads: Vec<(Linear<T>, Linear<T>)>,
    },
    Contrastive {
        l1: Linear<T>,
        l2: Linear<T>,
        table: Array2<T>,
        grad_table: Array2<T>,
    },
}

impl<T: Real> Params<T> for HeadNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        match self {
            HeadNet::Linear { l1, l2 } => {
                l1.visit_params(f);
                l2.visit_params(f);
            }
            HeadNet::MultiAttr { heads } => {
                for (a, b) in heads {
                    a.visit_params(f);
                    b.visit_params(f);
                }
            }
            HeadNet::Contrastive {
                l1,
                l2,
                table,
                grad_table,
            } => {
                l1.visit_params(f);
                l2.visit_params(f);
                f(
                    table.as_slice_mut().expect("contiguous"),
                    grad_table.as_slice_mut().expect("contiguous"),
                );
            }
        }
    }
}

impl<T: Real> HeadNet<T> {
    #[cfg(test)]
    pub(crate) fn cast<U: Real>(&self) -> HeadNet<U> {
        match self {
            HeadNet::Linear { l1, l2 } => HeadNet::Linear {
                l1: l1.cast(),
                l2: l2.cast(),
            },
            HeadNet::MultiAttr { heads } => HeadNet::MultiAttr {
                heads: heads.iter().map(|(a, b)| (a.cast(), b.cast())).collect(),
            },
            HeadNet::Contrastive { l1, l2, table, .. } => HeadNet::Contrastive {
                l1: l1.cast(),
                l2: l2.cast(),
                table: table.mapv(|v| U::lit(v.to_f64().unwrap())),
                grad_table: Array2::zeros(table.dim()),
            },
        }
    }
}

fn unit_rows<T: Real>(a: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms: Array1<T> = a
        .rows()
        .into_iter()
        .map(|r| r.iter().fold(T::zero(), |s, &v| s + v * v).sqrt().max(T::lit(1e-12)))
        .collect();
    let mut out = a.clone();
    for (mut r, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        r.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Backward of row normalization: `g_u = (g_p − p (p·g_p)) / |u|`.
fn unit_rows_backward<T: Real>(p: &Array2<T>, norms: &Array1<T>, g_p: &Array2<T>) -> Array2<T> {
    let mut out = g_p.clone();
    for ((mut o, pr), &n) in out.rows_mut().into_iter().zip(p.rows()).zip(norms.iter()) {
        let dot = pr.iter().zip(o.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
        o.zip_mut_with(&pr, |g, &pv| *g = (*g - pv * dot) / n);
    }
    out
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Scores for every row (higher is better), one column per label.
pub(crate) fn head_scores<T: Real>(net: &HeadNet<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    Ok(match net {
        HeadNet::Linear { l1, l2 } => l2.forward_batch(l1.forward_batch(x)?.view())?,
        HeadNet::MultiAttr { heads } => {
            let mut out = Array2::zeros((x.nrows(), heads.len()));
            for (j, (a, b)) in heads.iter().enumerate() {
                let z = b.forward_batch(a.forward_batch(x)?.view())?;
                out.column_mut(j).assign(&z.column(0));
            }
            out
        }
        HeadNet::Contrastive { l1, l2, table, .. } => {
            let u = l2.forward_batch(l1.forward_batch(x)?.view())?;
            let (p, _) = unit_rows(&u);
            let (w, _) = unit_rows(table);
            p.dot(&w.t())
        }
    })
}

/// Training loss for a batch; `targets` is the 0/1 label matrix and
/// `label_cat` the category index of each label column. Accumulates
/// gradients when `backward` is set.
pub(crate) fn head_loss<T: Real>(
    net: &mut HeadNet<T>,
    x: ArrayView2<T>,
    targets: &Array2<T>,
    label_cat: &[usize],
    temperature: f64,
    backward: bool,
) -> Result<f64> {
    let (b, v) = targets.dim();
    match net {
        HeadNet::Linear { l1, l2 } => {
            let h = l1.forward_batch(x)?;
            let z = l2.forward_batch(h.view())?;
            let n = (b * v) as f64;
            let loss = z
                .iter()
                .zip(targets.iter())
                .map(|(&z, &y)| bce_with_logits(z.to_f64().unwrap(), y.to_f64().unwrap()))
                .sum::<f64>()
                / n;
            if backward {
                let k = T::lit(1.0 / n);
                let mut g = z.mapv(crate::numerics::sigmoid);
                g.zip_mut_with(targets, |a, &y| *a = (*a - y) * k);
                let gh = l2.backward_batch(h.view(), g.view())?;
                l1.backward_batch(x, gh.view())?;
            }
            Ok(loss)
        }
        HeadNet::MultiAttr { heads } => {
            let n = (b * v) as f64;
            let mut loss = 0.0;
            for (j, (a, o)) in heads.iter_mut().enumerate() {
                let h = a.forward_batch(x)?;
                let z = o.forward_batch(h.view())?;
                let y = targets.column(j);
                loss += z
                    .column(0)
                    .iter()
                    .zip(y.iter())
                    .map(|(&z, &y)| bce_with_logits(z.to_f64().unwrap(), y.to_f64().unwrap()))
                    .sum::<f64>();
                if backward {
                    let k = T::lit(1.0 / n);
                    let mut g = z.mapv(crate::numerics::sigmoid);
                    for (gi, &yi) in g.column_mut(0).iter_mut().zip(y.iter()) {
                        *gi = (*gi - yi) * k;
                    }
                    let gh = o.backward_batch(h.view(), g.view())?;
                    a.backward_batch(x, gh.view())?;
                }
            }
            Ok(loss / n)
        }
        HeadNet::Contrastive {
            l1,
            l2,
            table,
            grad_table,
        } => {
            let inv_t = 1.0 / temperature;
            let h = l1.forward_batch(x)?;
            let u = l2.forward_batch(h.view())?;
            let (p, pn) = unit_rows(&u);
            let (w, wn) = unit_rows(table);
            let s = p.dot(&w.t()).mapv(|c| c.to_f64().unwrap() * inv_t);
            let n_cat = label_cat.iter().copied().max().map_or(0, |m| m + 1);
            let mut gs = Array2::<f64>::zeros((b, v));
            let mut loss = 0.0;
            let mut terms = 0usize;
            for i in 0..b {
                for c in 0..n_cat {
                    let cols: Vec<usize> = (0..v).filter(|&j| label_cat[j] == c).collect();
                    let Some(&pos) = cols.iter().find(|&&j| targets[[i, j]] > T::zero()) else {
                        continue;
                    };
                    let m = cols.iter().map(|&j| s[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = cols.iter().map(|&j| (s[[i, j]] - m).exp()).sum();
                    loss += m + z.ln() - s[[i, pos]];
                    terms += 1;
                    for &j in &cols {
                        gs[[i, j]] = (s[[i, j]] - m).exp() / z;
                    }
                    gs[[i, pos]] -= 1.0;
                }
            }
            if terms == 0 {
                return Err(Error::Domain("contrastive batch has no positive labels".into()));
            }
            let scale = 1.0 / terms as f64;
            if backward {
                let gs = gs.mapv(|g| T::lit(g * scale * inv_t));
                let gp = gs.dot(&w);
                let gw = gs.t().dot(&p);
                let gu = unit_rows_backward(&p, &pn, &gp);
                let gt = unit_rows_backward(&w, &wn, &gw);
                grad_table.zip_mut_with(&gt, |a, &b| *a = *a + b);
                let gh = l2.backward_batch(h.view(), gu.view())?;
                l1.backward_batch(x, gh.view())?;
            }
            Ok(loss * scale)
        }
    }
}

/// A trained comparison head with its (fixed) label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHead {
    pub kind: BaselineKind,
    pub labels: Vec<String>,
    pub label_categories: Vec<String>,
    pub(crate) net: HeadNet<f32>,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

fn init_net(kind: BaselineKind, dim: usize, n_labels: usize, config: &BaselineConfig, rng: &mut impl Rng) -> HeadNet<f32> {
    match kind {
        BaselineKind::Linear => HeadNet::Linear {
            l1: Linear::init(dim, config.hidden, rng),
            l2: Linear::init(config.hidden, n_labels, rng),
        },
        BaselineKind::MultiAttr => HeadNet::MultiAttr {
            heads: (0..n_labels).map(|_| new_binary_head(dim, config, rng)).collect(),
        },
        BaselineKind::Contrastive => HeadNet::Contrastive {
            l1: Linear::init(dim, config.hidden, rng),
            l2: Linear::init(config.hidden, config.embed_dim, rng),
            table: new_label_vectors(n_labels, config.embed_dim, rng),
            grad_table: Array2::zeros((n_labels, config.embed_dim)),
        },
    }
}

fn new_binary_head(dim: usize, config: &BaselineConfig, rng: &mut impl Rng) -> (Linear<f32>, Linear<f32>) {
    (Linear::init(dim, config.hidden, rng), Linear::init(config.hidden, 1, rng))
}

fn new_label_vectors(n: usize, e: usize, rng: &mut impl Rng) -> Array2<f32> {
    Array2::from_shape_fn((n, e), |_| rng.random_range(-1.0f32..1.0))
}

impl BaselineHead {
    pub fn new(kind: BaselineKind, pack: &EmbeddingPack, labels: &[String], config: &BaselineConfig) -> Result<Self> {
        let label_categories = labels
            .iter()
            .map(|l| {
                pack.category_map
                    .category_of(l)
                    .map(str::to_string)
                    .ok_or_else(|| Error::UnknownLabel(l.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = derived_rng(config.seed, "baseline-init", kind.name(), labels.len() as u64);
        Ok(Self {
            kind,
            labels: labels.to_vec(),
            label_categories,
            net: init_net(kind, pack.dim, labels.len(), config, &mut rng),
            steps: 0,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.labels.len()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.name().as_bytes());
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0]);
        }
        let mut net = self.net.clone();
        net.visit_params(&mut |v, _| {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn label_index(&self) -> Vec<usize> {
        let cats: Vec<&String> = {
            let mut c: Vec<&String> = self.label_categories.iter().collect::<BTreeSet<_>>().into_iter().collect();
            c.sort();
            c
        };
        self.label_categories
            .iter()
            .map(|c| cats.iter().position(|x| *x == c).expect("category listed"))
            .collect()
    }

    fn check_vocab<'a>(&self, labels: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for l in labels {
            if !self.labels.contains(l) {
                return Err(Error::UnsupportedLabel(l.clone()));
            }
        }
        Ok(())
    }

    pub fn scores(&self, x: ArrayView2<f32>) -> Result<ScoreTable> {
        let s = head_scores(&self.net, x)?;
        Ok(ScoreTable {
            labels: self.labels.clone(),
            values: s.mapv(|v| v as f64),
            lower_is_better: false,
        })
    }

    /// Trains every parameter on `set` for `config.epochs` shuffled passes.
    /// Labels outside the head's vocabulary are rejected.
    pub fn fit(&mut self, set: &TrainSet, config: &BaselineConfig) -> Result<()> {
        if set.is_empty() {
            return Err(Error::Domain("baseline training set is empty".into()));
        }
        for i in 0..set.len() {
            self.check_vocab(&set.record(i).labels)?;
        }
        let label_cat = self.label_index();
        let mut rng = derived_rng(config.seed, "baseline-fit", self.kind.name(), self.steps);
        let mut opt = Adam::<f32>::new(config.learning_rate);
        let mut order: Vec<usize> = (0..set.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let rows: Vec<usize> = chunk.iter().map(|&i| set.record(i).row_index).collect();
                let x = set.pack.rows.select(Axis(0), &rows);
                let y = Array2::from_shape_fn((chunk.len(), self.labels.len()), |(i, j)| {
                    set.record(chunk[i]).has(&self.labels[j]) as u8 as f32
                });
                let loss = head_loss(&mut self.net, x.view(), &y, &label_cat, config.temperature, true)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("{} baseline loss", self.kind.name())));
                }
                opt.step(&mut self.net)?;
                self.steps += 1;
            }
        }
        Ok(())
    }
}

/// New head of `kind` over the labels present in `set`, trained on it.
pub fn train_baseline(kind: BaselineKind, set: &TrainSet, config: &BaselineConfig) -> Result<BaselineHead> {
    let mut head = BaselineHead::new(kind, set.pack, &set.labels(), config)?;
    head.fit(set, config)?;
    Ok(head)
}

/// Extends a head to `labels` (a superset of its vocabulary, pack order).
/// The linear head cannot grow its output layer, so a new head is built
/// whose first layer starts from the old one; the other kinds keep every
/// learned parameter and add fresh ones for the new labels.
pub fn grow_baseline(head: &BaselineHead, pack: &EmbeddingPack, labels: &[String], config: &BaselineConfig) -> Result<BaselineHead> {
    for l in &head.labels {
        if !labels.contains(l) {
            return Err(Error::Config(format!("grown vocabulary drops `{l}`")));
        }
    }
    let mut grown = BaselineHead::new(head.kind, pack, labels, config)?;
    grown.steps = head.steps;
    let old_index = |l: &String| head.labels.iter().position(|x| x == l);
    match (&head.net, &mut grown.net) {
        (HeadNet::Linear { l1, .. }, HeadNet::Linear { l1: g1, .. }) => *g1 = l1.clone(),
        (HeadNet::MultiAttr { heads }, HeadNet::MultiAttr { heads: gh }) => {
            for (j, l) in labels.iter().enumerate() {
                if let Some(i) = old_index(l) {
                    gh[j] = heads[i].clone();
                }
            }
        }
        (HeadNet::Contrastive { l1, l2, table, .. }, HeadNet::Contrastive { l1: g1, l2: g2, table: gt, .. }) => {
            *g1 = l1.clone();
            *g2 = l2.clone();
            for (j, l) in labels.iter().enumerate() {
                if let Some(i) = old_index(l) {
                    gt.row_mut(j).assign(&table.row(i));
                }
            }
        }
        _ => unreachable!("same kind"),
    }
    Ok(grown)
}

/// Top-k accuracy of a baseline head; samples carrying a label outside the
/// head's vocabulary are an error.
pub fn eval_baseline(head: &BaselineHead, pack: &EmbeddingPack, splits: &[Split], side: Option<VocabSide>) -> Result<EvalReport> {
    let records = select_records(pack, splits, side);
    for r in &records {
        head.check_vocab(&r.labels)?;
    }
    let rows: Vec<usize> = records.iter().map(|r| r.row_index).collect();
    let x = pack.rows.select(Axis(0), &rows);
    let table = head.scores(x.view())?;
    Ok(build_report(
        head.kind.name(),
        pack,
        &records,
        &table,
        default_k(pack),
        splits,
        side,
        head.hash(),
    ))
}

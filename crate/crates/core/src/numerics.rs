//! Dense building blocks for the per-word networks: fully connected layers
//! with hand-written backward passes, the sigmoid filter mask, prototype
//! centroids, an Adam optimizer, inverted dropout, and a central-difference
//! gradient checker.
//!
//! Everything that trains is generic over [`Real`] so the same graph can be
//! evaluated on a 64-bit shadow copy of the parameters when gradients are
//! checked. Stored parameters are `f32`.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A dense `f32` vector with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vec32(Vec<f32>);

impl Vec32 {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Domain("vector must have positive dimension".into()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {i}")));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn filled(dim: usize, value: f32) -> Self {
        Self(vec![value; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f32> {
        ArrayView1::from(&self.0[..])
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_array(&self) -> Array1<f32> {
        Array1::from(self.0.clone())
    }

    pub fn from_array(a: Array1<f32>) -> Result<Self> {
        Self::new(a.to_vec())
    }
}

impl TryFrom<Vec<f32>> for Vec32 {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Vec32::new(v)
    }
}

impl From<Vec32> for Vec<f32> {
    fn from(v: Vec32) -> Self {
        v.0
    }
}

/// Visits every trainable tensor of a model as `(values, gradients)` pairs,
/// always in the same order.
pub trait Params<T: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.iter_mut().for_each(|x| *x = T::zero()));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }
}

/// Fully connected layer `y = W x + b` with gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub grad_weight: Array2<T>,
    pub grad_bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    /// Weights uniform in ±sqrt(1/dim_in), zero bias.
    pub fn init(dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / dim_in as f64).sqrt();
        let weight = Array2::from_shape_fn((dim_out, dim_in), |_| {
            T::lit(rng.random_range(-bound..bound))
        });
        Self::from_parts(weight, Array1::zeros(dim_out)).expect("shapes agree")
    }

    pub fn from_parts(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape("linear bias", weight.nrows(), bias.len()));
        }
        let (o, i) = weight.dim();
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            grad_weight: Array2::zeros((o, i)),
            grad_bias: Array1::zeros(o),
        })
    }

    pub fn dim_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        if x.len() != self.dim_in() {
            return Err(Error::shape("linear_forward", self.dim_in(), x.len()));
        }
        Ok(self.weight.dot(&x) + &self.bias)
    }

    /// Row-batched forward: `x` is `n × dim_in`, output is `n × dim_out`.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.dim_in() {
            return Err(Error::shape("linear_forward", self.dim_in(), x.ncols()));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: ArrayView1<T>, grad_out: ArrayView1<T>) -> Result<Array1<T>> {
        let x2 = x.insert_axis(Axis(0));
        let g2 = grad_out.insert_axis(Axis(0));
        Ok(self.backward_batch(x2, g2)?.index_axis_move(Axis(0), 0))
    }

    pub fn backward_batch(&mut self, x: ArrayView2<T>, grad_out: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.dim_in() {
            return Err(Error::shape("linear_backward input", self.dim_in(), x.ncols()));
        }
        if grad_out.ncols() != self.dim_out() {
            return Err(Error::shape("linear_backward grad", self.dim_out(), grad_out.ncols()));
        }
        if grad_out.nrows() != x.nrows() {
            return Err(Error::shape("linear_backward batch", x.nrows(), grad_out.nrows()));
        }
        ndarray::linalg::general_mat_mul(T::one(), &grad_out.t(), &x, T::one(), &mut self.grad_weight);
        self.grad_bias.scaled_add(T::one(), &grad_out.sum_axis(Axis(0)));
        Ok(grad_out.dot(&self.weight))
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        let c = |v: &T| U::lit(v.to_f64().unwrap());
        Linear {
            weight: self.weight.map(c),
            bias: self.bias.map(c),
            grad_weight: self.grad_weight.map(c),
            grad_bias: self.grad_bias.map(c),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        f(
            self.weight.as_slice_mut().expect("standard layout"),
            self.grad_weight.as_slice_mut().expect("standard layout"),
        );
        f(
            self.bias.as_slice_mut().expect("contiguous"),
            self.grad_bias.as_slice_mut().expect("contiguous"),
        );
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x ⊙ sigmoid(filter_raw)`.
pub fn elementwise_mask(filter_raw: &Vec32, x: &Vec32) -> Result<Vec32> {
    if filter_raw.dim() != x.dim() {
        return Err(Error::shape("elementwise_mask", filter_raw.dim(), x.dim()));
    }
    let out = filter_raw
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(&f, &v)| v * sigmoid(f))
        .collect();
    Vec32::new(out)
}

/// Mean squared difference, accumulated in `f64`.
pub fn mse_distance(a: &Vec32, b: &Vec32) -> Result<f64> {
    mse_view(a.view(), b.view())
}

pub fn mse_view<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse_distance", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Domain("mse_distance of empty vectors".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Elementwise arithmetic mean, accumulated in `f64`.
pub fn centroid(reps: &[Vec32]) -> Result<Vec32> {
    let first = reps
        .first()
        .ok_or_else(|| Error::Domain("centroid of an empty list".into()))?;
    let dim = first.dim();
    let mut acc = vec![0f64; dim];
    for r in reps {
        if r.dim() != dim {
            return Err(Error::shape("centroid", dim, r.dim()));
        }
        for (a, &v) in acc.iter_mut().zip(r.as_slice()) {
            *a += v as f64;
        }
    }
    let n = reps.len() as f64;
    Vec32::new(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Row mean of a batch, accumulated in `f64`.
pub fn row_centroid<T: Real>(rows: ArrayView2<T>) -> Result<Array1<T>> {
    if rows.nrows() == 0 {
        return Err(Error::Domain("centroid of an empty batch".into()));
    }
    let n = rows.nrows() as f64;
    let mut acc = vec![0f64; rows.ncols()];
    for row in rows.rows() {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v.to_f64().unwrap();
        }
    }
    Ok(acc.into_iter().map(|a| T::lit(a / n)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one model. Moment buffers are laid out in
/// [`Params::visit_params`] order and sized on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self::with_config(AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        })
    }

    pub fn with_config(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and zeroes the gradients. A non-finite gradient
    /// rejects the whole step and leaves parameters and moments untouched.
    pub fn step(&mut self, model: &mut impl Params<T>) -> Result<()> {
        let mut bad = None;
        let mut idx = 0usize;
        model.visit_params(&mut |_, g| {
            if bad.is_none() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    bad = Some((idx, j));
                }
            }
            idx += 1;
        });
        if let Some((t, j)) = bad {
            return Err(Error::NonFinite(format!("gradient tensor {t} entry {j}")));
        }

        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let one = T::one();

        let (first, second) = (&mut self.first, &mut self.second);
        let mut t = 0usize;
        model.visit_params(&mut |p, g| {
            if first.len() <= t {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut first[t], &mut second[t]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter {t}");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
                g[i] = T::zero();
            }
            t += 1;
        });
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, mode: Mode, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Applies dropout in place and returns the per-element scale used, which
    /// the backward pass multiplies into the incoming gradient. `None` means
    /// identity.
    pub fn apply<T: Real>(&mut self, x: &mut Array2<T>) -> Option<Array2<T>> {
        if self.mode == Mode::Infer || self.rate == 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut self.rng;
        let scale = x.map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep });
        x.zip_mut_with(&scale, |a, &b| *a = *a * b);
        Some(scale)
    }
}

/// Largest relative disagreement between an analytic gradient and central
/// differences of `f`, over the given coordinates:
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], coords: &[usize], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst = 0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p);
        p[i] = orig - step;
        let down = f(&p);
        p[i] = orig;
        let cd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max((a - cd).abs() / denom);
    }
    worst
}

/// Flattens all parameters of a model in visit order.
pub fn flatten_params<T: Real>(model: &mut impl Params<T>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(&mut |p, _| out.extend(p.iter().map(|v| v.to_f64().unwrap())));
    out
}

pub fn flatten_grads<T: Real>(model: &mut impl Params<T>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, g| out.extend(g.iter().map(|v| v.to_f64().unwrap())));
    out
}

/// Inverse of [`flatten_params`].
pub fn load_params<T: Real>(model: &mut impl Params<T>, flat: &[f64]) {
    let mut off = 0;
    model.visit_params(&mut |p, _| {
        let n = p.len();
        for (dst, src) in p.iter_mut().zip(&flat[off..off + n]) {
            *dst = T::lit(*src);
        }
        off += n;
    });
    assert_eq!(off, flat.len(), "flat parameter vector has the wrong length");
}

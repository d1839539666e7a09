//! Dense tensors, activations, the parameter store with AMSGrad state, and a
//! central-difference gradient checker.
//!
//! Everything is computed in `f64`. Gradients are derived by hand per layer;
//! there is no tape.

use std::collections::HashMap;
use std::ops::{Index, IndexMut};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix. Vectors are stored as `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("{} values for a {rows}x{cols} tensor", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot-style uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::uniform(rows, cols, bound, rng)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Round every entry through `f32`, the precision checkpoints persist.
    pub fn quantize_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

/// `M x + b`, shape-checked.
pub fn affine(x: &[f64], m: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    if m.cols != x.len() {
        return Err(Error::dim(
            "affine",
            format!("matrix M is {}x{} but x has length {}", m.rows, m.cols, x.len()),
        ));
    }
    if m.rows != b.len() {
        return Err(Error::dim(
            "affine",
            format!("matrix M is {}x{} but b has length {}", m.rows, m.cols, b.len()),
        ));
    }
    let mut out = b.to_vec();
    matvec_acc(m, x, &mut out);
    Ok(out)
}

/// `out += M x`
#[inline]
pub fn matvec_acc(m: &Tensor, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, x.len());
    debug_assert_eq!(m.rows, out.len());
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        *o += dot(row, x);
    }
}

/// `out += Mᵀ y`
#[inline]
pub fn matvec_t_acc(m: &Tensor, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, y.len());
    debug_assert_eq!(m.cols, out.len());
    for (&yi, row) in y.iter().zip(m.data.chunks_exact(m.cols)) {
        if yi != 0.0 {
            axpy(yi, row, out);
        }
    }
}

/// `G += y xᵀ`
#[inline]
pub fn outer_acc(g: &mut Tensor, y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    let cols = g.cols;
    for (&yi, row) in y.iter().zip(g.data.chunks_exact_mut(cols)) {
        if yi != 0.0 {
            axpy(yi, x, row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Handle to one named slot of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl Index<ParamId> for [Tensor] {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self[id.0]
    }
}

impl IndexMut<ParamId> for [Tensor] {
    fn index_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            alpha: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        OptConfig {
            alpha,
            ..OptConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "decay rates must lie in [0, 1): beta1={}, beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// One AMSGrad element update without bias correction.
/// Returns the new `(theta, m, v, vhat)`.
#[inline]
pub fn amsgrad_element(theta: f64, m: f64, v: f64, vhat: f64, g: f64, cfg: &OptConfig) -> (f64, f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let vhat = vhat.max(v);
    let theta = theta - cfg.alpha * m / (vhat.sqrt() + cfg.epsilon);
    (theta, m, v, vhat)
}

/// Named parameter slots, each with value, gradient and AMSGrad moments.
///
/// Stored struct-of-arrays so a forward/backward pass can borrow all values
/// immutably and all gradients mutably at the same time (see [`ParamStore::split`]).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    vhat: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("initial value of `{name}` is not finite")));
        }
        let id = ParamId(self.values.len());
        let (r, c) = value.shape();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        self.m.push(Tensor::zeros(r, c));
        self.v.push(Tensor::zeros(r, c));
        self.vhat.push(Tensor::zeros(r, c));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Optimizer moments `(m, v, vhat)` of one slot.
    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor, &Tensor) {
        (&self.m[id.0], &self.v[id.0], &self.vhat[id.0])
    }

    /// Immutable values alongside mutable gradients.
    pub fn split(&mut self) -> (&[Tensor], &mut [Tensor]) {
        (&self.values, &mut self.grads)
    }

    /// Replace a slot's value, keeping its optimizer state.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(
                "ParamStore::set_value",
                format!(
                    "slot `{}` is {:?}, new value is {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// First slot holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.values
            .iter()
            .position(|t| !t.is_finite())
            .map(|i| self.names[i].as_str())
    }

    /// Scale the gradients of `ids` so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        clip_grad_norm(&mut self.grads, ids, max_norm)
    }

    /// One AMSGrad step on the listed slots; their gradients are zeroed afterward.
    ///
    /// All gradients are validated before anything is written, so a
    /// non-finite gradient leaves the store untouched.
    pub fn amsgrad_step(&mut self, ids: &[ParamId], cfg: &OptConfig) -> Result<()> {
        for &id in ids {
            if !self.grads[id.0].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in slot `{}`",
                    self.names[id.0]
                )));
            }
        }
        for &id in ids {
            let i = id.0;
            let g = self.grads[i].data_mut();
            let th = self.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let vh = self.vhat[i].data_mut();
            for j in 0..g.len() {
                let (t2, m2, v2, vh2) = amsgrad_element(th[j], m[j], v[j], vh[j], g[j], cfg);
                th[j] = t2;
                m[j] = m2;
                v[j] = v2;
                vh[j] = vh2;
                g[j] = 0.0;
            }
        }
        Ok(())
    }

    /// Drop optimizer state (moments back to zero).
    pub fn reset_optimizer(&mut self) {
        for t in self.m.iter_mut().chain(&mut self.v).chain(&mut self.vhat) {
            t.fill(0.0);
        }
    }
}

pub fn clip_grad_norm(grads: &mut [Tensor], ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids.iter().map(|&id| grads[id].sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for &id in ids {
            grads[id].data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Lock-free view of a [`ParamStore`] for concurrent workers.
///
/// Each element is an `AtomicU64` holding `f64` bits and accessed with relaxed
/// ordering: reads and writes of individual elements are never torn, but
/// interleavings between workers are unsynchronized (last writer wins).
pub struct SharedParams {
    template: ParamStore,
    values: Vec<Vec<AtomicU64>>,
    m: Vec<Vec<AtomicU64>>,
    v: Vec<Vec<AtomicU64>>,
    vhat: Vec<Vec<AtomicU64>>,
}

fn to_atomic(ts: &[Tensor]) -> Vec<Vec<AtomicU64>> {
    ts.iter()
        .map(|t| t.data().iter().map(|x| AtomicU64::new(x.to_bits())).collect())
        .collect()
}

fn load(a: &AtomicU64) -> f64 {
    f64::from_bits(a.load(Ordering::Relaxed))
}

fn store(a: &AtomicU64, x: f64) {
    a.store(x.to_bits(), Ordering::Relaxed)
}

impl SharedParams {
    pub fn from_store(store: &ParamStore) -> Self {
        SharedParams {
            template: store.clone(),
            values: to_atomic(&store.values),
            m: to_atomic(&store.m),
            v: to_atomic(&store.v),
            vhat: to_atomic(&store.vhat),
        }
    }

    /// A private working copy for one worker (values current, gradients zero).
    pub fn local_copy(&self) -> ParamStore {
        let mut s = self.template.clone();
        s.zero_grads();
        let ids: Vec<ParamId> = s.ids().collect();
        self.refresh(&mut s, &ids);
        s
    }

    /// Copy the current shared values of `ids` into `local`.
    pub fn refresh(&self, local: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            for (dst, src) in local.values[id.0].data_mut().iter_mut().zip(&self.values[id.0]) {
                *dst = load(src);
            }
        }
    }

    /// AMSGrad on the shared slots using `local`'s gradients, which are zeroed.
    pub fn amsgrad_step(&self, local: &mut ParamStore, ids: &[ParamId], cfg: &OptConfig) -> Result<()> {
        for &id in ids {
            if !local.grads[id.0].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in slot `{}`",
                    local.names[id.0]
                )));
            }
        }
        for &id in ids {
            let i = id.0;
            let g = local.grads[i].data_mut();
            for j in 0..g.len() {
                let (t2, m2, v2, vh2) = amsgrad_element(
                    load(&self.values[i][j]),
                    load(&self.m[i][j]),
                    load(&self.v[i][j]),
                    load(&self.vhat[i][j]),
                    g[j],
                    cfg,
                );
                store(&self.values[i][j], t2);
                store(&self.m[i][j], m2);
                store(&self.v[i][j], v2);
                store(&self.vhat[i][j], vh2);
                g[j] = 0.0;
            }
        }
        Ok(())
    }

    pub fn into_store(self) -> ParamStore {
        let mut s = self.template;
        let collect = |dst: &mut Vec<Tensor>, src: &Vec<Vec<AtomicU64>>| {
            for (t, a) in dst.iter_mut().zip(src) {
                for (x, y) in t.data_mut().iter_mut().zip(a) {
                    *x = load(y);
                }
            }
        };
        collect(&mut s.values, &self.values);
        collect(&mut s.m, &self.m);
        collect(&mut s.v, &self.v);
        collect(&mut s.vhat, &self.vhat);
        s.zero_grads();
        s
    }
}

/// Compare the analytic gradients already stored in `store` against central
/// differences of `f` for every element of every slot.
///
/// Returns `max |a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, store: &mut ParamStore, h: f64) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_slots(f, store, &ids, h)
}

/// [`grad_check`] restricted to `ids`.
pub fn grad_check_slots<F>(mut f: F, store: &mut ParamStore, ids: &[ParamId], h: f64) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    for &id in ids {
        for j in 0..store.values[id.0].len() {
            let orig = store.values[id.0].data()[j];
            store.values[id.0].data_mut()[j] = orig + h;
            let fp = f(store);
            store.values[id.0].data_mut()[j] = orig - h;
            let fm = f(store);
            store.values[id.0].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = store.grads[id.0].data()[j];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity_and_hand_case() {
        let x = [1.0, 2.0];
        assert_eq!(affine(&x, &Tensor::identity(2), &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let m = Tensor::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(affine(&[1.0, 1.0], &m, &[1.0, -1.0]).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn affine_shape_error_names_operands() {
        let err = affine(&[1.0, 2.0, 3.0], &Tensor::identity(2), &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(msg.contains("M") && msg.contains('x'), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in &s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12);
        assert!(softmax(&[]).is_err());
    }

    fn scalar_store(theta: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::vector(vec![theta])).unwrap();
        (s, id)
    }

    #[test]
    fn amsgrad_zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(0.7);
        s.amsgrad_step(&[id], &OptConfig::default()).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn amsgrad_first_step_scalar() {
        // m = 0.1, v = vhat = 0.001; step = 0.0005 * 0.1 / (sqrt(0.001) + 1e-8)
        let expected = -0.0005 * 0.1 / (0.001f64.sqrt() + 1e-8);
        assert!((expected - (-1.5811e-3)).abs() < 1e-7);
        let (mut s, id) = scalar_store(0.0);
        s.grad_mut(id).data_mut()[0] = 1.0;
        s.amsgrad_step(&[id], &OptConfig::default()).unwrap();
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.grad(id).data()[0], 0.0, "gradient must be zeroed");
    }

    #[test]
    fn amsgrad_vhat_non_decreasing() {
        let (mut s, id) = scalar_store(0.0);
        let mut last = 0.0;
        for g in [1.0, 1.0, 0.0, 0.0, 0.5] {
            s.grad_mut(id).data_mut()[0] = g;
            s.amsgrad_step(&[id], &OptConfig::default()).unwrap();
            let vh = s.moments(id).2.data()[0];
            assert!(vh >= last);
            last = vh;
        }
    }

    #[test]
    fn amsgrad_rejects_non_finite_gradient() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = s.amsgrad_step(&[id], &OptConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let (mut s, id) = scalar_store(3.0);
        s.grad_mut(id).data_mut()[0] = 6.0;
        let err = grad_check(|p| p.value(id).data()[0].powi(2), &mut s, 1e-5);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.add("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn shared_params_match_exclusive_single_worker() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::new();
        let id = a.add("w", Tensor::glorot(3, 4, &mut rng)).unwrap();
        let shared = SharedParams::from_store(&a);
        let mut local = shared.local_copy();
        let cfg = OptConfig::with_alpha(0.01);
        for step in 0..5 {
            let g: Vec<f64> = (0..12).map(|j| ((j + step) as f64).sin()).collect();
            a.grad_mut(id).data_mut().copy_from_slice(&g);
            local.grad_mut(id).data_mut().copy_from_slice(&g);
            a.amsgrad_step(&[id], &cfg).unwrap();
            shared.amsgrad_step(&mut local, &[id], &cfg).unwrap();
        }
        let b = shared.into_store();
        assert_eq!(a.value(id), b.value(id));
        assert_eq!(a.moments(id).2, b.moments(id).2);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        let id = s.add("a", Tensor::zeros(2, 1)).unwrap();
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(s.clip_grad_norm(&[id], 1.0), 5.0);
        assert!((s.grad(id).sq_norm() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..8), c in -50.0f64..50.0) {
            let a = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn amsgrad_zero_alpha_never_moves(g in prop::collection::vec(-5.0f64..5.0, 4), steps in 1usize..5) {
            let mut s = ParamStore::new();
            let init = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
            let id = s.add("p", init.clone()).unwrap();
            let cfg = OptConfig { alpha: 0.0, ..OptConfig::default() };
            for _ in 0..steps {
                s.grad_mut(id).data_mut().copy_from_slice(&g);
                s.amsgrad_step(&[id], &cfg).unwrap();
            }
            prop_assert_eq!(s.value(id), &init);
        }
    }
}

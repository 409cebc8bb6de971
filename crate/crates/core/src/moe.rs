//! The top-k linearly routed mixture-of-experts layer.
//!
//! A layer with `m` experts of width `w` on `R^d` routes an input `x` to the
//! `k` experts whose routing scores `<x, r_i> + b_i` are largest and returns
//! `sum_{j in S} g_j A_j σ(B_j^T x)`, where `g_j = 1` under
//! [`Gating::EqualHard`] and `g = softmax(scores restricted to S)` under
//! [`Gating::SoftmaxTopK`].
//!
//! Ties in the top-k selection go to the lower expert index.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_bigint::BigUint;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `σ(t) = 1`: each expert outputs the constant vector `A_j 1`.
    Constant,
    /// `σ(t) = t`.
    Linear,
    /// `σ(t) = max(0, t)`.
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Constant => 1.0,
            Activation::Linear => t,
            Activation::Relu => t.max(0.0),
        }
    }

    /// Derivative, with `σ'(0) = 0` for ReLU.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Constant => 0.0,
            Activation::Linear => 1.0,
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Constant => "constant",
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Unit-weight sum over the selected experts.
    EqualHard,
    /// Softmax over the selected experts' scores.
    SoftmaxTopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MoeConfig {
    pub m: usize,
    pub k: usize,
    pub w: usize,
    pub d: usize,
    pub activation: Activation,
    pub gating: Gating,
    pub route_bias: bool,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "all of m, k, w, d must be positive (got m={}, k={}, w={}, d={})",
                self.m,
                self.k,
                self.w,
                self.d
            )));
        }
        if self.k > self.m {
            return Err(Error::InvalidConfig(alloc::format!(
                "k = {} exceeds m = {}",
                self.k,
                self.m
            )));
        }
        Ok(())
    }

    /// Ratio of active to total experts.
    pub fn sparsity(&self) -> f64 {
        self.k as f64 / self.m as f64
    }

    /// Short label such as `16e8a`.
    pub fn label(&self) -> alloc::string::String {
        alloc::format!("{}e{}a", self.m, self.k)
    }
}

/// Validated constructor for [`MoeConfig`].
pub fn make_config(
    m: usize,
    k: usize,
    w: usize,
    d: usize,
    activation: Activation,
    gating: Gating,
    route_bias: bool,
) -> Result<MoeConfig> {
    let cfg = MoeConfig { m, k, w, d, activation, gating, route_bias };
    cfg.validate()?;
    Ok(cfg)
}

/// Total and active expert parameter counts, `2mwd` and `2kwd`, plus the
/// same counts with one weight matrix per expert (`mwd`, `kwd`). Routing
/// parameters (`md`) are not included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub n_total: u128,
    pub n_active: u128,
    pub n_total_one_matrix: u128,
    pub n_active_one_matrix: u128,
}

pub fn count_params(config: &MoeConfig) -> ParamCount {
    let wd = config.w as u128 * config.d as u128;
    let (m, k) = (config.m as u128, config.k as u128);
    ParamCount { n_total: 2 * m * wd, n_active: 2 * k * wd, n_total_one_matrix: m * wd, n_active_one_matrix: k * wd }
}

/// Number of configurations `C(m, k)` of active experts.
pub fn config_count(m: usize, k: usize) -> BigUint {
    crate::combin::binomial(m as u64, k as u64)
}

/// `log2 C(m, k)`.
pub fn config_count_log2(m: usize, k: usize) -> f64 {
    crate::combin::log2_big(&config_count(m, k))
}

/// A configuration of active experts: a sorted set of distinct indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActiveSet(Vec<usize>);

impl ActiveSet {
    /// Canonicalizes `indices` (sorts); rejects duplicates.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("active set has duplicate indices".into()));
        }
        Ok(Self(indices))
    }

    pub(crate) fn from_sorted(indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn symmetric_difference_size(&self, other: &ActiveSet) -> usize {
        crate::combin::symmetric_difference_size(&self.0, &other.0)
    }

    pub fn intersection_size(&self, other: &ActiveSet) -> usize {
        crate::combin::intersection_size(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    /// `N(0, I_d / d)`.
    GaussianIso,
    /// Uniform over the unit ball `{‖x‖ ≤ 1}`.
    UnitBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputDistribution {
    pub kind: DistributionKind,
    pub d: usize,
}

impl InputDistribution {
    pub fn gaussian(d: usize) -> Self {
        Self { kind: DistributionKind::GaussianIso, d }
    }

    pub fn ball(d: usize) -> Self {
        Self { kind: DistributionKind::UnitBall, d }
    }

    /// `E‖x‖²`: 1 for the Gaussian, `d/(d+2)` for the ball.
    pub fn second_moment(&self) -> f64 {
        match self.kind {
            DistributionKind::GaussianIso => 1.0,
            DistributionKind::UnitBall => self.d as f64 / (self.d as f64 + 2.0),
        }
    }

    /// Fills `out` (length `d`) with one sample.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d);
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        match self.kind {
            DistributionKind::GaussianIso => {
                let s = 1.0 / (self.d as f64).sqrt();
                out.iter_mut().for_each(|v| *v *= s);
            }
            DistributionKind::UnitBall => {
                let norm = dot(out, out).sqrt();
                let u: f64 = rng.random();
                let radius = u.powf(1.0 / self.d as f64);
                let s = if norm > 0.0 { radius / norm } else { 0.0 };
                out.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.sample_into(rng, &mut out);
        out
    }
}

/// Rows per independently seeded block in [`sample_inputs`].
pub const SAMPLE_BLOCK: usize = 4096;

/// `n` i.i.d. samples as the rows of an `n × d` matrix.
///
/// Row `i` comes from block `i / SAMPLE_BLOCK`, drawn from
/// `seed.fork(block)`, so any block can be regenerated in isolation.
pub fn sample_inputs(dist: &InputDistribution, n: usize, seed: SeedStream) -> Matrix {
    let mut out = Matrix::zeros(n, dist.d);
    let mut block = usize::MAX;
    let mut rng = seed.rng();
    for i in 0..n {
        if i / SAMPLE_BLOCK != block {
            block = i / SAMPLE_BLOCK;
            rng = seed.fork(block as u64).rng();
        }
        dist.sample_into(&mut rng, out.row_mut(i));
    }
    out
}

/// Parameters of an `(m, k, w, d)` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub config: MoeConfig,
    /// `m × d`, row `i` is the routing vector `r_i`.
    pub routing: Matrix,
    /// Length `m`; all zero when `route_bias` is off.
    pub bias: Vec<f64>,
    /// `A_j`, each `d × w`.
    pub a: Vec<Matrix>,
    /// `B_j`, each `d × w`.
    pub b: Vec<Matrix>,
}

/// Reusable buffers for routing and evaluation.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
    pub hidden: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Workspace {
    pub fn new(config: &MoeConfig) -> Self {
        Self {
            scores: vec![0.0; config.m],
            order: Vec::with_capacity(config.m),
            hidden: vec![0.0; config.w],
            weights: vec![0.0; config.k],
        }
    }
}

/// Ordering used by top-k: higher score first, then lower index.
#[inline]
fn rank_order(scores: &[f64], i: usize, j: usize) -> Ordering {
    match scores[j].partial_cmp(&scores[i]) {
        Some(Ordering::Equal) | None => i.cmp(&j),
        Some(o) => o,
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// increasing index order.
pub fn top_k_indices(scores: &[f64], k: usize, order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..scores.len());
    if k < scores.len() {
        order.select_nth_unstable_by(k - 1, |&i, &j| rank_order(scores, i, j));
        order.truncate(k);
    }
    order.sort_unstable();
}

impl MoeLayer {
    pub fn new(
        config: MoeConfig,
        routing: Matrix,
        bias: Vec<f64>,
        a: Vec<Matrix>,
        b: Vec<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let layer = Self { config, routing, bias, a, b };
        layer.check_shapes()?;
        Ok(layer)
    }

    /// Layer with every parameter zero.
    pub fn zeros(config: MoeConfig) -> Result<Self> {
        config.validate()?;
        let MoeConfig { m, w, d, .. } = config;
        Ok(Self {
            config,
            routing: Matrix::zeros(m, d),
            bias: vec![0.0; m],
            a: (0..m).map(|_| Matrix::zeros(d, w)).collect(),
            b: (0..m).map(|_| Matrix::zeros(d, w)).collect(),
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        let MoeConfig { m, w, d, .. } = self.config;
        let mismatch = |expected: usize, got: usize| Error::DimensionMismatch { expected, got };
        if self.routing.shape() != (m, d) {
            return Err(mismatch(m * d, self.routing.rows() * self.routing.cols()));
        }
        if self.bias.len() != m {
            return Err(mismatch(m, self.bias.len()));
        }
        if self.a.len() != m || self.b.len() != m {
            return Err(mismatch(m, self.a.len().min(self.b.len())));
        }
        for mat in self.a.iter().chain(&self.b) {
            if mat.shape() != (d, w) {
                return Err(mismatch(d * w, mat.rows() * mat.cols()));
            }
        }
        let finite = self.routing.is_finite()
            && self.bias.iter().all(|v| v.is_finite())
            && self.a.iter().chain(&self.b).all(Matrix::is_finite);
        if !finite {
            return Err(Error::NonFinite("layer parameters"));
        }
        if !self.config.route_bias && self.bias.iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidConfig("nonzero bias with route_bias disabled".into()));
        }
        Ok(())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.config)
    }

    /// Routing scores `<x, r_i> + b_i`.
    pub fn scores_into(&self, x: &[f64], scores: &mut [f64]) {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(self.routing.row(i), x) + self.bias[i];
        }
    }

    /// Routes `x`, leaving the selected indices (sorted) in `ws.order` and the
    /// scores in `ws.scores`.
    pub fn route_with(&self, x: &[f64], ws: &mut Workspace) {
        self.scores_into(x, &mut ws.scores);
        top_k_indices(&ws.scores, self.config.k, &mut ws.order);
    }

    pub fn route(&self, x: &[f64]) -> ActiveSet {
        let mut ws = self.workspace();
        self.route_with(x, &mut ws);
        ActiveSet::from_sorted(ws.order.clone())
    }

    /// Gate weights for the currently selected experts in `ws`.
    pub fn gate_weights_with(&self, ws: &mut Workspace) {
        let k = ws.order.len();
        ws.weights.resize(k, 0.0);
        match self.config.gating {
            Gating::EqualHard => ws.weights.iter_mut().for_each(|g| *g = 1.0),
            Gating::SoftmaxTopK => {
                let max = ws.order.iter().map(|&j| ws.scores[j]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (g, &j) in ws.weights.iter_mut().zip(&ws.order) {
                    *g = (ws.scores[j] - max).exp();
                    total += *g;
                }
                ws.weights.iter_mut().for_each(|g| *g /= total);
            }
        }
    }

    /// `out += weight * A_j σ(B_j^T x)`.
    pub fn add_expert_output(&self, j: usize, x: &[f64], weight: f64, hidden: &mut [f64], out: &mut [f64]) {
        let act = self.config.activation;
        let a = &self.a[j];
        match act {
            Activation::Constant => hidden.iter_mut().for_each(|h| *h = 1.0),
            _ => {
                let b = &self.b[j];
                hidden.iter_mut().for_each(|h| *h = 0.0);
                for (r, &xr) in x.iter().enumerate() {
                    if xr != 0.0 {
                        axpy(xr, b.row(r), hidden);
                    }
                }
                if act != Activation::Linear {
                    hidden.iter_mut().for_each(|h| *h = act.apply(*h));
                }
            }
        }
        for r in 0..a.rows() {
            out[r] += weight * dot(a.row(r), hidden);
        }
    }

    /// Evaluates the layer at `x` into `out`.
    pub fn forward_with(&self, x: &[f64], ws: &mut Workspace, out: &mut [f64]) {
        self.route_with(x, ws);
        self.gate_weights_with(ws);
        out.iter_mut().for_each(|v| *v = 0.0);
        for idx in 0..ws.order.len() {
            let j = ws.order[idx];
            let g = ws.weights[idx];
            self.add_expert_output(j, x, g, &mut ws.hidden, out);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.d {
            return Err(Error::DimensionMismatch { expected: self.config.d, got: x.len() });
        }
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.config.d];
        self.forward_with(x, &mut ws, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward output"));
        }
        Ok(out)
    }

    /// Row-wise [`MoeLayer::forward`].
    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.config.d && xs.rows() > 0 {
            return Err(Error::DimensionMismatch { expected: self.config.d, got: xs.cols() });
        }
        let mut ws = self.workspace();
        let mut out = Matrix::zeros(xs.rows(), self.config.d);
        for i in 0..xs.rows() {
            let (x, o) = (xs.row(i), out.row_mut(i));
            self.forward_with(x, &mut ws, o);
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("forward output"));
        }
        Ok(out)
    }

    /// `u_j = A_j 1`, the constant output of expert `j` under constant activation.
    pub fn effective_vector(&self, j: usize) -> Vec<f64> {
        let a = &self.a[j];
        (0..a.rows()).map(|r| a.row(r).iter().sum()).collect()
    }

    /// `A_j B_j^T`, the linear map of expert `j` under linear activation.
    pub fn linear_map(&self, j: usize) -> Matrix {
        self.a[j].matmul_t(&self.b[j])
    }

    /// Multiplies every `A_j` by `s` (output scaling).
    pub fn scale_outputs(&mut self, s: f64) {
        self.a.iter_mut().for_each(|a| a.scale(s));
    }

    /// Monte-Carlo estimate of `E‖f(x)‖²` from `n` samples.
    pub fn mean_sq_norm(&self, dist: &InputDistribution, n: usize, seed: SeedStream) -> crate::stats::RunningMean {
        let mut ws = self.workspace();
        let mut x = vec![0.0; self.config.d];
        let mut out = vec![0.0; self.config.d];
        let mut acc = crate::stats::RunningMean::new();
        let mut rng = seed.rng();
        for _ in 0..n {
            dist.sample_into(&mut rng, &mut x);
            self.forward_with(&x, &mut ws, &mut out);
            acc.push(dot(&out, &out));
        }
        acc
    }
}

/// Fills `dst` with i.i.d. `N(0, scale²)` entries.
pub(crate) fn fill_normal<R: Rng + ?Sized>(rng: &mut R, dst: &mut [f64], scale: f64) {
    for v in dst {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn three_router(k: usize, d: usize) -> MoeLayer {
        let cfg = make_config(3, k, 1, d, Activation::Linear, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        layer.routing.row_mut(0).copy_from_slice(&e(d, 0));
        layer.routing.row_mut(1).copy_from_slice(&e(d, 1));
        let mut neg = e(d, 0);
        neg[0] = -1.0;
        layer.routing.row_mut(2).copy_from_slice(&neg);
        layer
    }

    #[test]
    fn make_config_validates() {
        let cfg = make_config(16, 8, 16, 256, Activation::Relu, Gating::EqualHard, false).unwrap();
        assert_eq!(cfg.label(), "16e8a");
        assert!(matches!(
            make_config(4, 8, 1, 1, Activation::Relu, Gating::EqualHard, false),
            Err(Error::InvalidConfig(_))
        ));
        assert!(make_config(1, 1, 1, 1, Activation::Constant, Gating::EqualHard, false).is_ok());
        assert!(make_config(2, 1, 0, 4, Activation::Linear, Gating::EqualHard, false).is_err());
        assert!(make_config(2, 0, 1, 4, Activation::Linear, Gating::EqualHard, false).is_err());
    }

    #[test]
    fn parameter_counts() {
        let cfg = make_config(8, 2, 7, 3, Activation::Relu, Gating::EqualHard, false).unwrap();
        assert_eq!(
            count_params(&cfg),
            ParamCount { n_total: 336, n_active: 84, n_total_one_matrix: 168, n_active_one_matrix: 42 }
        );
        let teacher = make_config(16, 8, 32, 256, Activation::Relu, Gating::EqualHard, false).unwrap();
        assert_eq!(count_params(&teacher).n_active, 131_072);
        assert_eq!(count_params(&teacher).n_active_one_matrix, 65_536);
        let ds = make_config(256, 8, 1, 1, Activation::Relu, Gating::EqualHard, false).unwrap();
        assert!((ds.sparsity() * 100.0 - 3.125).abs() < 1e-12);
    }

    #[test]
    fn config_counts() {
        assert!(config_count(256, 8) >= BigUint::from(400_000_000_000_000u64));
        assert_eq!(config_count(7, 0), BigUint::from(1u32));
        assert_eq!(config_count(6, 2), BigUint::from(15u32));
        assert!((config_count_log2(6, 2) - 15f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn route_examples() {
        let layer = three_router(2, 4);
        assert_eq!(layer.route(&[2.0, 1.0, 0.0, 0.0]).indices(), [0, 1]);
        let layer1 = three_router(1, 4);
        assert_eq!(layer1.route(&[-1.0, 0.0, 0.0, 0.0]).indices(), [2]);
        // all scores tie: lowest indices win
        assert_eq!(layer.route(&[0.0; 4]).indices(), [0, 1]);
    }

    #[test]
    fn constant_activation_sums_effective_vectors() {
        let cfg = make_config(2, 2, 1, 2, Activation::Constant, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        layer.a[0] = Matrix::from_vec(2, 1, vec![1.0, 0.0]);
        layer.a[1] = Matrix::from_vec(2, 1, vec![0.0, 1.0]);
        layer.b[0] = Matrix::from_vec(2, 1, vec![5.0, -3.0]);
        for x in [[0.3, -1.0], [10.0, 2.0]] {
            assert_eq!(layer.forward(&x).unwrap(), [1.0, 1.0]);
        }
        assert_eq!(layer.effective_vector(0), [1.0, 0.0]);
    }

    #[test]
    fn linear_identity_expert() {
        let cfg = make_config(1, 1, 3, 3, Activation::Linear, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        layer.a[0] = Matrix::identity(3);
        layer.b[0] = Matrix::identity(3);
        assert_eq!(layer.forward(&[1.0, -2.0, 0.5]).unwrap(), [1.0, -2.0, 0.5]);
    }

    #[test]
    fn relu_split_expert_matches_linear() {
        let d = 5;
        let half = 2;
        let mut rng = SeedStream::new(11).rng();
        let mut a = Matrix::zeros(d, half);
        let mut b = Matrix::zeros(d, half);
        fill_normal(&mut rng, a.as_mut_slice(), 1.0);
        fill_normal(&mut rng, b.as_mut_slice(), 1.0);
        let split = |m: &Matrix, sign_second: f64| {
            Matrix::from_fn(d, 2 * half, |r, c| if c < half { m[(r, c)] } else { sign_second * m[(r, c - half)] })
        };
        let cfg = make_config(1, 1, 2 * half, d, Activation::Relu, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        layer.a[0] = split(&a, -1.0);
        layer.b[0] = split(&b, -1.0);
        let m = a.matmul_t(&b);
        let dist = InputDistribution::gaussian(d);
        for _ in 0..1000 {
            let x = dist.sample(&mut rng);
            let want = m.mul_vec(&x);
            let got = layer.forward(&x).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn softmax_equals_hard_when_k_is_one() {
        let mut rng = SeedStream::new(5).rng();
        let cfg = make_config(4, 1, 3, 6, Activation::Relu, Gating::EqualHard, false).unwrap();
        let mut hard = MoeLayer::zeros(cfg).unwrap();
        fill_normal(&mut rng, hard.routing.as_mut_slice(), 1.0);
        for j in 0..4 {
            fill_normal(&mut rng, hard.a[j].as_mut_slice(), 1.0);
            fill_normal(&mut rng, hard.b[j].as_mut_slice(), 1.0);
        }
        let mut soft = hard.clone();
        soft.config.gating = Gating::SoftmaxTopK;
        let xs = sample_inputs(&InputDistribution::gaussian(6), 200, SeedStream::new(9));
        assert_eq!(hard.forward_batch(&xs).unwrap(), soft.forward_batch(&xs).unwrap());
    }

    #[test]
    fn forward_batch_matches_rows() {
        let mut rng = SeedStream::new(21).rng();
        let cfg = make_config(5, 2, 3, 4, Activation::Relu, Gating::SoftmaxTopK, true).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        fill_normal(&mut rng, layer.routing.as_mut_slice(), 1.0);
        fill_normal(&mut rng, &mut layer.bias, 0.3);
        for j in 0..5 {
            fill_normal(&mut rng, layer.a[j].as_mut_slice(), 1.0);
            fill_normal(&mut rng, layer.b[j].as_mut_slice(), 1.0);
        }
        let xs = sample_inputs(&InputDistribution::ball(4), 64, SeedStream::new(2));
        let batch = layer.forward_batch(&xs).unwrap();
        for i in 0..xs.rows() {
            assert_eq!(batch.row(i), layer.forward(xs.row(i)).unwrap().as_slice());
        }
        assert_eq!(layer.forward_batch(&Matrix::zeros(0, 4)).unwrap().rows(), 0);
        assert!(layer.forward_batch(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sampling_contracts() {
        let ball = InputDistribution::ball(7);
        let xs = sample_inputs(&ball, 5000, SeedStream::new(1));
        assert!((0..xs.rows()).all(|i| dot(xs.row(i), xs.row(i)) <= 1.0));
        assert_eq!(xs, sample_inputs(&ball, 5000, SeedStream::new(1)));
        assert_ne!(xs, sample_inputs(&ball, 5000, SeedStream::new(2)));
    }

    #[test]
    fn gaussian_second_moment_is_one() {
        let dist = InputDistribution::gaussian(256);
        let n = 200_000;
        let xs = sample_inputs(&dist, n, SeedStream::new(4));
        let mut acc = crate::stats::RunningMean::new();
        for i in 0..n {
            acc.push(dot(xs.row(i), xs.row(i)));
        }
        assert!((acc.mean() - 1.0).abs() <= 3.0 * acc.std_err(), "{} ± {}", acc.mean(), acc.std_err());
    }

    proptest! {
        #[test]
        fn routing_is_scale_invariant(seed in 0u64..10_000, lambda in 1e-3f64..1e3) {
            let mut rng = SeedStream::new(seed).rng();
            let cfg = make_config(7, 3, 1, 5, Activation::Linear, Gating::EqualHard, false).unwrap();
            let mut layer = MoeLayer::zeros(cfg).unwrap();
            fill_normal(&mut rng, layer.routing.as_mut_slice(), 1.0);
            let x = InputDistribution::gaussian(5).sample(&mut rng);
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            prop_assert_eq!(layer.route(&x), layer.route(&scaled));
        }

        #[test]
        fn route_returns_valid_active_set(seed in 0u64..10_000, k in 1usize..6) {
            let mut rng = SeedStream::new(seed).rng();
            let cfg = make_config(6, k, 1, 3, Activation::Linear, Gating::EqualHard, false).unwrap();
            let mut layer = MoeLayer::zeros(cfg).unwrap();
            fill_normal(&mut rng, layer.routing.as_mut_slice(), 1.0);
            let x = InputDistribution::gaussian(3).sample(&mut rng);
            let s = layer.route(&x);
            prop_assert_eq!(s.len(), k);
            prop_assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
            let scores = layer.routing.mul_vec(&x);
            let min_in = s.indices().iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            let max_out = (0..6).filter(|i| !s.contains(*i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_in >= max_out);
        }
    }
}

//! Teacher–student training with hand-derived gradients.
//!
//! The loss is the batch mean of `‖f(x) − y‖²`. With `δ = 2(f(x) − y)/n`,
//! expert `j` selected with gate `g_j`, pre-activation `h = B_jᵀx` and
//! `a = σ(h)`:
//!
//! * `∂A_j += g_j δ aᵀ`
//! * `∂B_j += x (g_j A_jᵀ δ ⊙ σ'(h))ᵀ`
//! * softmax gating only: with `∂g_j = δ·A_j a`, the score gradient is
//!   `∂s_j = g_j (∂g_j − Σ_l g_l ∂g_l)`, giving `∂r_j += ∂s_j x` and
//!   `∂b_j += ∂s_j`.
//!
//! The top-k selection is treated as locally constant. Under equal-weight
//! hard gating the routing parameters get exactly zero gradient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_sq, Matrix};
use crate::moe::{fill_normal, Activation, Gating, InputDistribution, MoeConfig, MoeLayer, Workspace};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr(t) = lr0 · ½(1 + cos(π t / T))`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_samples: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// `F32` rounds every parameter to single precision after each update.
    pub precision: Precision,
    /// Steps between evaluations (the last step is always evaluated).
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Student expert init scale; `None` means `1/√max(w, d)`.
    pub init_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Learning-rate grid of the desk-scale sweep (SGD with momentum 0.9).
pub const DESK_LRS: [f64; 4] = [3.0, 10.0, 30.0, 100.0];

/// Learning-rate grid of the full-scale sweep.
pub const FULL_LRS: [f64; 2] = [0.01, 0.001];

impl TrainConfig {
    /// 2M samples, batch 512, momentum 0.9.
    pub fn desk() -> Self {
        Self {
            batch_size: 512,
            total_samples: 2_000_000,
            lr0: 10.0,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            seed: 0,
            precision: Precision::F64,
            eval_every: 50,
            eval_samples: 4096,
            init_scale: None,
        }
    }

    /// 26M samples, batch 2048, lr 0.01.
    pub fn full() -> Self {
        Self { total_samples: 26_000_000, batch_size: 2048, lr0: 0.01, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(s.into()));
        if self.batch_size == 0 || self.total_samples == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return bad("batch_size, total_samples, eval_every and eval_samples must be positive");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("init_scale must be finite and nonnegative");
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.total_samples.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine => self.lr0 * 0.5 * (1.0 + libm::cos(PI * step as f64 / self.steps() as f64)),
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

pub fn default_init_scale(config: &MoeConfig) -> f64 {
    1.0 / (config.w.max(config.d) as f64).sqrt()
}

/// Routing entries `N(0, 1)`, `A_j, B_j` entries `N(0, init_scale²)`, zero bias.
pub fn init_student(config: MoeConfig, init_scale: Option<f64>, seed: u64) -> Result<MoeLayer> {
    let scale = init_scale.unwrap_or_else(|| default_init_scale(&config));
    let mut layer = MoeLayer::zeros(config)?;
    let s = SeedStream::new(seed);
    fill_normal(&mut s.fork_str("routing").rng(), layer.routing.as_mut_slice(), 1.0);
    for j in 0..config.m {
        let e = s.fork_str("experts").fork(j as u64);
        let mut rng = e.rng();
        fill_normal(&mut rng, layer.a[j].as_mut_slice(), scale);
        fill_normal(&mut rng, layer.b[j].as_mut_slice(), scale);
    }
    Ok(layer)
}

/// Random teacher: routing and `B_j` entries `N(0, 1)`, `A_j` entries scaled
/// so that `E‖f(x)‖² ≈ 1` under the isotropic Gaussian (`N(0, 2/(kwd))` for
/// ReLU, `N(0, 1/(kwd))` otherwise).
pub fn random_teacher(config: MoeConfig, seed: u64) -> Result<MoeLayer> {
    let mut layer = MoeLayer::zeros(config)?;
    let MoeConfig { k, w, d, .. } = config;
    let var = match config.activation {
        Activation::Relu => 2.0,
        _ => 1.0,
    } / (k * w * d) as f64;
    let s = SeedStream::new(seed);
    fill_normal(&mut s.fork_str("routing").rng(), layer.routing.as_mut_slice(), 1.0);
    for j in 0..config.m {
        let mut rng = s.fork_str("experts").fork(j as u64).rng();
        fill_normal(&mut rng, layer.a[j].as_mut_slice(), var.sqrt());
        fill_normal(&mut rng, layer.b[j].as_mut_slice(), 1.0);
    }
    Ok(layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TeacherSpec {
    /// [`random_teacher`].
    Random { config: MoeConfig, seed: u64 },
    /// A theorem construction (equal-weight hard gating).
    Construction { activation: Activation, m: usize, k: usize, w: usize, d: usize, seed: u64 },
}

pub fn build_teacher(spec: &TeacherSpec) -> Result<MoeLayer> {
    match *spec {
        TeacherSpec::Random { config, seed } => random_teacher(config, seed),
        TeacherSpec::Construction { activation, m, k, w, d, seed } => {
            let mut opts = crate::constructions::AssembleOptions::new(d);
            opts.n_mc = 10_000;
            opts.n_pairs = 1_000;
            Ok(crate::constructions::assemble_theorem_moe(activation, m, k, w, d, seed, &opts)?.0)
        }
    }
}

// ---------------------------------------------------------------------------
// Gradients

/// Gradient with the same shapes as the layer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub routing: Matrix,
    pub bias: Vec<f64>,
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(layer: &MoeLayer) -> Self {
        let MoeConfig { m, w, d, .. } = layer.config;
        Self {
            routing: Matrix::zeros(m, d),
            bias: vec![0.0; m],
            a: (0..m).map(|_| Matrix::zeros(d, w)).collect(),
            b: (0..m).map(|_| Matrix::zeros(d, w)).collect(),
        }
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        core::iter::once(self.routing.as_slice())
            .chain(core::iter::once(self.bias.as_slice()))
            .chain(self.a.iter().map(Matrix::as_slice))
            .chain(self.b.iter().map(Matrix::as_slice))
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        core::iter::once(self.routing.as_mut_slice())
            .chain(core::iter::once(self.bias.as_mut_slice()))
            .chain(self.a.iter_mut().map(Matrix::as_mut_slice))
            .chain(self.b.iter_mut().map(Matrix::as_mut_slice))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            axpy(1.0, src, dst);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.slices().map(norm_sq).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flat_map(|s| s.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn routing_max_abs(&self) -> f64 {
        self.routing.as_slice().iter().chain(&self.bias).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn get(&self, c: ParamCoord) -> f64 {
        match c {
            ParamCoord::Routing { i, c } => self.routing[(i, c)],
            ParamCoord::Bias { i } => self.bias[i],
            ParamCoord::A { j, r, c } => self.a[j][(r, c)],
            ParamCoord::B { j, r, c } => self.b[j][(r, c)],
        }
    }
}

/// One trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "group")]
pub enum ParamCoord {
    Routing { i: usize, c: usize },
    Bias { i: usize },
    A { j: usize, r: usize, c: usize },
    B { j: usize, r: usize, c: usize },
}

impl ParamCoord {
    /// Every trainable coordinate of `layer` (bias only when enabled).
    pub fn all(layer: &MoeLayer) -> Vec<ParamCoord> {
        let MoeConfig { m, w, d, route_bias, .. } = layer.config;
        let mut out = Vec::with_capacity(m * d * (1 + 2 * w) + m);
        for i in 0..m {
            for c in 0..d {
                out.push(ParamCoord::Routing { i, c });
            }
        }
        if route_bias {
            out.extend((0..m).map(|i| ParamCoord::Bias { i }));
        }
        for j in 0..m {
            for r in 0..d {
                for c in 0..w {
                    out.push(ParamCoord::A { j, r, c });
                }
            }
        }
        for j in 0..m {
            for r in 0..d {
                for c in 0..w {
                    out.push(ParamCoord::B { j, r, c });
                }
            }
        }
        out
    }

    pub fn get(self, layer: &MoeLayer) -> f64 {
        match self {
            ParamCoord::Routing { i, c } => layer.routing[(i, c)],
            ParamCoord::Bias { i } => layer.bias[i],
            ParamCoord::A { j, r, c } => layer.a[j][(r, c)],
            ParamCoord::B { j, r, c } => layer.b[j][(r, c)],
        }
    }

    pub fn set(self, layer: &mut MoeLayer, v: f64) {
        match self {
            ParamCoord::Routing { i, c } => layer.routing[(i, c)] = v,
            ParamCoord::Bias { i } => layer.bias[i] = v,
            ParamCoord::A { j, r, c } => layer.a[j][(r, c)] = v,
            ParamCoord::B { j, r, c } => layer.b[j][(r, c)] = v,
        }
    }
}

/// Scratch space for one sample's forward and backward pass.
#[derive(Debug, Clone)]
pub struct GradBuffers {
    ws: Workspace,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    outs: Vec<Vec<f64>>,
    f: Vec<f64>,
    delta: Vec<f64>,
    da: Vec<f64>,
    dg: Vec<f64>,
}

impl GradBuffers {
    pub fn new(config: &MoeConfig) -> Self {
        let MoeConfig { k, w, d, .. } = *config;
        Self {
            ws: Workspace::new(config),
            pre: vec![vec![0.0; w]; k],
            act: vec![vec![0.0; w]; k],
            outs: vec![vec![0.0; d]; k],
            f: vec![0.0; d],
            delta: vec![0.0; d],
            da: vec![0.0; w],
            dg: vec![0.0; k],
        }
    }
}

/// Adds one sample's contribution (loss scaled by `inv_n`) to `grads` and
/// returns its squared error `‖f(x) − y‖²`.
pub fn accumulate_sample(
    layer: &MoeLayer,
    x: &[f64],
    y: &[f64],
    inv_n: f64,
    buf: &mut GradBuffers,
    grads: &mut Gradients,
) -> f64 {
    let act_fn = layer.config.activation;
    let softmax = layer.config.gating == Gating::SoftmaxTopK;
    layer.route_with(x, &mut buf.ws);
    layer.gate_weights_with(&mut buf.ws);
    buf.f.iter_mut().for_each(|v| *v = 0.0);
    for (idx, &j) in buf.ws.order.iter().enumerate() {
        let (pre, act, out) = (&mut buf.pre[idx], &mut buf.act[idx], &mut buf.outs[idx]);
        if act_fn == Activation::Constant {
            act.iter_mut().for_each(|v| *v = 1.0);
        } else {
            pre.iter_mut().for_each(|v| *v = 0.0);
            let b = &layer.b[j];
            for (r, &xr) in x.iter().enumerate() {
                axpy(xr, b.row(r), pre);
            }
            for (a, &h) in act.iter_mut().zip(pre.iter()) {
                *a = act_fn.apply(h);
            }
        }
        let a_mat = &layer.a[j];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(a_mat.row(r), act);
        }
        axpy(buf.ws.weights[idx], out, &mut buf.f);
    }
    let mut loss = 0.0;
    for ((dl, &fv), &yv) in buf.delta.iter_mut().zip(&buf.f).zip(y) {
        let e = fv - yv;
        loss += e * e;
        *dl = 2.0 * e * inv_n;
    }
    let k = buf.ws.order.len();
    let mut gbar = 0.0;
    if softmax {
        for idx in 0..k {
            buf.dg[idx] = dot(&buf.delta, &buf.outs[idx]);
            gbar += buf.ws.weights[idx] * buf.dg[idx];
        }
    }
    for idx in 0..k {
        let j = buf.ws.order[idx];
        let g = buf.ws.weights[idx];
        let act = &buf.act[idx];
        let (da_mat, a_mat) = (&mut grads.a[j], &layer.a[j]);
        buf.da.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dr) in buf.delta.iter().enumerate() {
            let gd = g * dr;
            if gd != 0.0 {
                axpy(gd, act, da_mat.row_mut(r));
                axpy(gd, a_mat.row(r), &mut buf.da);
            }
        }
        if act_fn != Activation::Constant {
            for (dh, &h) in buf.da.iter_mut().zip(&buf.pre[idx]) {
                *dh *= act_fn.derivative(h);
            }
            let db = &mut grads.b[j];
            for (r, &xr) in x.iter().enumerate() {
                axpy(xr, &buf.da, db.row_mut(r));
            }
        }
        if softmax {
            let ds = g * (buf.dg[idx] - gbar);
            axpy(ds, x, grads.routing.row_mut(j));
            if layer.config.route_bias {
                grads.bias[j] += ds;
            }
        }
    }
    loss
}

/// Sum of squared errors over `rows` and the gradient of the loss
/// normalized by `n_total`.
pub fn shard_loss_and_grads(
    layer: &MoeLayer,
    xs: &Matrix,
    ys: &Matrix,
    rows: Range<usize>,
    n_total: usize,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(layer);
    let mut buf = GradBuffers::new(&layer.config);
    let inv_n = 1.0 / n_total as f64;
    let mut total = 0.0;
    for i in rows {
        total += accumulate_sample(layer, xs.row(i), ys.row(i), inv_n, &mut buf, &mut grads);
    }
    (total, grads)
}

/// Errors unless `xs` and `ys` are nonempty `n × d` matrices.
pub fn check_batch(layer: &MoeLayer, xs: &Matrix, ys: &Matrix) -> Result<()> {
    let d = layer.config.d;
    if xs.rows() != ys.rows() {
        return Err(Error::DimensionMismatch { expected: xs.rows(), got: ys.rows() });
    }
    if xs.rows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    for mat in [xs, ys] {
        if mat.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: mat.cols() });
        }
    }
    Ok(())
}

/// Mean squared error over the batch and its gradient.
pub fn loss_and_grads(layer: &MoeLayer, xs: &Matrix, ys: &Matrix) -> Result<(f64, Gradients)> {
    Serial.loss_and_grads(layer, xs, ys)
}

/// Strategy for evaluating a batch gradient.
pub trait GradEngine {
    fn loss_and_grads(&self, layer: &MoeLayer, xs: &Matrix, ys: &Matrix) -> Result<(f64, Gradients)>;
}

/// Single pass over the batch in row order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl GradEngine for Serial {
    fn loss_and_grads(&self, layer: &MoeLayer, xs: &Matrix, ys: &Matrix) -> Result<(f64, Gradients)> {
        check_batch(layer, xs, ys)?;
        let (sum, grads) = shard_loss_and_grads(layer, xs, ys, 0..xs.rows(), xs.rows());
        let loss = sum / xs.rows() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((loss, grads))
    }
}

/// Splits `0..n` into `parts` contiguous ranges of near-equal size.
pub fn shard_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    (0..parts).map(|p| (p * n / parts)..((p + 1) * n / parts)).collect()
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub h: f64,
    pub tol: f64,
    pub n_checked: usize,
    /// Coordinates whose perturbation crosses a ReLU kink or flips the selection.
    pub excluded: Vec<ParamCoord>,
    pub max_rel_err: f64,
    pub worst: Option<FdEntry>,
    pub score_gap: f64,
    pub required_gap: f64,
    pub pass: bool,
}

fn sample_loss(layer: &MoeLayer, x: &[f64], y: &[f64], ws: &mut Workspace, out: &mut [f64]) -> f64 {
    layer.forward_with(x, ws, out);
    out.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Gap between the k-th and (k+1)-th largest routing scores (infinite when `k = m`).
pub fn score_gap(layer: &MoeLayer, x: &[f64]) -> f64 {
    let mut scores = vec![0.0; layer.config.m];
    layer.scores_into(x, &mut scores);
    let k = layer.config.k;
    if k >= scores.len() {
        return f64::INFINITY;
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    scores[k - 1] - scores[k]
}

/// Compares analytic and central-difference gradients of `‖f(x) − y‖²`.
///
/// Checks every coordinate, or a random subset of `max_coords` of them.
/// Fails with [`Error::RoutingBoundary`] unless the score gap exceeds
/// `10 h max_i ‖r_i‖`.
pub fn finite_diff_check(
    layer: &MoeLayer,
    x: &[f64],
    y: &[f64],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    let d = layer.config.d;
    if x.len() != d || y.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len().min(y.len()) });
    }
    let max_r = (0..layer.config.m).map(|i| norm_sq(layer.routing.row(i)).sqrt()).fold(0.0, f64::max);
    let required = 10.0 * h * max_r;
    let gap = score_gap(layer, x);
    if !(gap > required) {
        return Err(Error::RoutingBoundary { gap, required });
    }
    let xs = Matrix::from_vec(1, d, x.to_vec());
    let ys = Matrix::from_vec(1, d, y.to_vec());
    let (_, grads) = loss_and_grads(layer, &xs, &ys)?;
    let mut coords = ParamCoord::all(layer);
    if coords.len() > max_coords {
        let mut rng = SeedStream::new(seed).rng();
        for i in 0..max_coords {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let mut ws = layer.workspace();
    layer.route_with(x, &mut ws);
    let selected = ws.order.clone();
    let pre: Vec<Vec<f64>> = selected.iter().map(|&j| layer.b[j].tmul_vec(x)).collect();
    let mut out = vec![0.0; d];
    let mut probe = layer.clone();
    let mut report = FdReport {
        h,
        tol,
        n_checked: 0,
        excluded: Vec::new(),
        max_rel_err: 0.0,
        worst: None,
        score_gap: gap,
        required_gap: required,
        pass: true,
    };
    for coord in coords {
        if layer.config.activation == Activation::Relu {
            if let ParamCoord::B { j, r, c } = coord {
                if let Some(pos) = selected.iter().position(|&s| s == j) {
                    if pre[pos][c].abs() <= 2.0 * h * x[r].abs() {
                        report.excluded.push(coord);
                        continue;
                    }
                }
            }
        }
        let v0 = coord.get(layer);
        coord.set(&mut probe, v0 + h);
        let lp = sample_loss(&probe, x, y, &mut ws, &mut out);
        let moved_up = ws.order != selected;
        coord.set(&mut probe, v0 - h);
        let lm = sample_loss(&probe, x, y, &mut ws, &mut out);
        let moved_down = ws.order != selected;
        coord.set(&mut probe, v0);
        if moved_up || moved_down {
            report.excluded.push(coord);
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.get(coord);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.n_checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(FdEntry { coord, analytic, numeric, rel_err });
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Infinite when the run diverged.
    pub final_eval_loss: f64,
    /// Mean of `‖f_teacher(x)‖²` over the evaluation set.
    pub teacher_norm_sq: f64,
    pub diverged: bool,
    pub diverged_step: Option<usize>,
    pub steps: usize,
    pub samples_seen: usize,
}

impl TrainLog {
    /// `final_eval_loss / teacher_norm_sq`.
    pub fn normalized_final_loss(&self) -> f64 {
        self.final_eval_loss / self.teacher_norm_sq
    }
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub xs: Matrix,
    pub ys: Matrix,
    pub teacher_norm_sq: f64,
}

impl EvalSet {
    pub fn new(teacher: &MoeLayer, dist: &InputDistribution, n: usize, seed: SeedStream) -> Result<Self> {
        let xs = crate::moe::sample_inputs(dist, n, seed);
        let ys = teacher.forward_batch(&xs)?;
        let teacher_norm_sq = (0..n).map(|i| norm_sq(ys.row(i))).sum::<f64>() / n as f64;
        Ok(Self { xs, ys, teacher_norm_sq })
    }

    pub fn loss(&self, student: &MoeLayer) -> f64 {
        let mut ws = student.workspace();
        let mut out = vec![0.0; student.config.d];
        let n = self.xs.rows();
        (0..n).map(|i| sample_loss(student, self.xs.row(i), self.ys.row(i), &mut ws, &mut out)).sum::<f64>()
            / n as f64
    }
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

fn apply_update(student: &mut MoeLayer, step: &Gradients, lr: f64, precision: Precision) {
    let bias = student.config.route_bias;
    let routing = student.config.gating == Gating::SoftmaxTopK;
    if routing {
        axpy(-lr, step.routing.as_slice(), student.routing.as_mut_slice());
        if bias {
            axpy(-lr, &step.bias, &mut student.bias);
        }
    }
    for (p, g) in student.a.iter_mut().zip(&step.a) {
        axpy(-lr, g.as_slice(), p.as_mut_slice());
    }
    if student.config.activation != Activation::Constant {
        for (p, g) in student.b.iter_mut().zip(&step.b) {
            axpy(-lr, g.as_slice(), p.as_mut_slice());
        }
    }
    if precision == Precision::F32 {
        round_f32(student.routing.as_mut_slice());
        round_f32(&mut student.bias);
        student.a.iter_mut().chain(student.b.iter_mut()).for_each(|m| round_f32(m.as_mut_slice()));
    }
}

/// Trains `student` on fresh teacher-labeled batches with the serial engine.
pub fn train(
    teacher: &MoeLayer,
    student: MoeLayer,
    dist: &InputDistribution,
    tc: &TrainConfig,
) -> Result<(MoeLayer, TrainLog)> {
    train_with(teacher, student, dist, tc, &Serial)
}

/// Batch `step` of the training stream: inputs and teacher labels.
pub fn training_batch(
    teacher: &MoeLayer,
    dist: &InputDistribution,
    tc: &TrainConfig,
    step: usize,
) -> Result<(Matrix, Matrix)> {
    let start = step * tc.batch_size;
    let n = tc.batch_size.min(tc.total_samples - start);
    let xs = crate::moe::sample_inputs(dist, n, SeedStream::new(tc.seed).fork_str("train").fork(step as u64));
    let ys = teacher.forward_batch(&xs)?;
    Ok((xs, ys))
}

/// SGD on fresh samples each step. The data stream and evaluation set
/// depend only on `tc.seed`, so runs with different learning rates see the
/// same inputs. A non-finite loss or parameter stops the run and marks the
/// log as diverged.
pub fn train_with<E: GradEngine + ?Sized>(
    teacher: &MoeLayer,
    mut student: MoeLayer,
    dist: &InputDistribution,
    tc: &TrainConfig,
    engine: &E,
) -> Result<(MoeLayer, TrainLog)> {
    tc.validate()?;
    let d = teacher.config.d;
    if student.config.d != d || dist.d != d {
        return Err(Error::DimensionMismatch { expected: d, got: student.config.d });
    }
    let eval = EvalSet::new(teacher, dist, tc.eval_samples, SeedStream::new(tc.seed).fork_str("eval"))?;
    let steps = tc.steps();
    let mut log = TrainLog {
        records: Vec::new(),
        final_eval_loss: f64::INFINITY,
        teacher_norm_sq: eval.teacher_norm_sq,
        diverged: false,
        diverged_step: None,
        steps: 0,
        samples_seen: 0,
    };
    let mut velocity = if tc.momentum > 0.0 { Some(Gradients::zeros_like(&student)) } else { None };
    for step in 0..steps {
        let (xs, ys) = training_batch(teacher, dist, tc, step)?;
        let lr = tc.lr_at(step);
        let (loss, grads) = match engine.loss_and_grads(&student, &xs, &ys) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                log.diverged = true;
                log.diverged_step = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let update = match velocity.as_mut() {
            Some(v) => {
                for (dst, src) in v.slices_mut().zip(grads.slices()) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a = tc.momentum * *a + b);
                }
                &*v
            }
            None => &grads,
        };
        apply_update(&mut student, update, lr, tc.precision);
        log.steps = step + 1;
        log.samples_seen += xs.rows();
        let last = step + 1 == steps;
        if step % tc.eval_every == 0 || last {
            let eval_loss = eval.loss(&student);
            log.records.push(TrainRecord { step, lr, train_loss: loss, eval_loss });
            if !eval_loss.is_finite() {
                log.diverged = true;
                log.diverged_step = Some(step);
                break;
            }
            if last {
                log.final_eval_loss = eval_loss;
            }
        }
    }
    Ok((student, log))
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub student: MoeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub student: MoeConfig,
    /// Learning rate with the lowest final loss.
    pub lr: f64,
    pub final_eval_loss: f64,
    pub normalized_loss: f64,
    /// `(lr0, normalized final loss)` for each rate tried.
    pub tried: Vec<(f64, f64)>,
    /// Every rate diverged.
    pub diverged: bool,
}

/// Seed for the student of sweep cell `index`.
pub fn cell_seed(tc: &TrainConfig, index: usize) -> u64 {
    SeedStream::new(tc.seed).fork_str("student").fork(index as u64).key()
}

/// One sweep cell: trains a fresh student at each rate and keeps the best.
pub fn run_cell<E: GradEngine + ?Sized>(
    cell: &SweepCell,
    index: usize,
    teacher: &MoeLayer,
    dist: &InputDistribution,
    tc: &TrainConfig,
    lrs: &[f64],
    engine: &E,
) -> Result<SweepRow> {
    if lrs.is_empty() {
        return Err(Error::InvalidConfig("empty learning-rate grid".into()));
    }
    let mut row = SweepRow {
        label: cell.label.clone(),
        student: cell.student,
        lr: lrs[0],
        final_eval_loss: f64::INFINITY,
        normalized_loss: f64::INFINITY,
        tried: Vec::new(),
        diverged: true,
    };
    for &lr in lrs {
        let student = init_student(cell.student, tc.init_scale, cell_seed(tc, index))?;
        let run_tc = TrainConfig { lr0: lr, ..tc.clone() };
        let (_, log) = train_with(teacher, student, dist, &run_tc, engine)?;
        let norm = log.normalized_final_loss();
        row.tried.push((lr, norm));
        if !log.diverged {
            row.diverged = false;
        }
        if norm < row.normalized_loss {
            row.lr = lr;
            row.final_eval_loss = log.final_eval_loss;
            row.normalized_loss = norm;
        }
    }
    Ok(row)
}

/// Runs every cell in order.
pub fn run_granularity_sweep(
    cells: &[SweepCell],
    teacher: &MoeLayer,
    dist: &InputDistribution,
    tc: &TrainConfig,
    lrs: &[f64],
) -> Result<Vec<SweepRow>> {
    cells.iter().enumerate().map(|(i, c)| run_cell(c, i, teacher, dist, tc, lrs, &Serial)).collect()
}

/// Students at fixed active neurons `k'w' = active` and fixed total neurons
/// `m'w' = total`, for each granularity `k'` dividing both.
pub fn granularity_cells(
    granularities: &[usize],
    active: usize,
    total: usize,
    d: usize,
    activation: Activation,
    gating: Gating,
    route_bias: bool,
) -> Result<Vec<SweepCell>> {
    granularities
        .iter()
        .map(|&k| {
            if k == 0 || active % k != 0 || total % (active / k) != 0 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "granularity {k} does not divide active {active} / total {total}"
                )));
            }
            let w = active / k;
            let m = total / w;
            let student = crate::moe::make_config(m, k, w, d, activation, gating, route_bias)?;
            Ok(SweepCell { label: student.label(), student })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::make_config;

    fn small(act: Activation, gating: Gating, bias: bool) -> MoeConfig {
        make_config(4, 2, 3, 8, act, gating, bias).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let tc = TrainConfig { total_samples: 1000, batch_size: 10, ..TrainConfig::desk() };
        assert_eq!(tc.steps(), 100);
        assert_eq!(tc.lr_at(0), tc.lr0);
        assert!((tc.lr_at(50) - 0.5 * tc.lr0).abs() < 1e-15);
        assert!(tc.lr_at(99) > 0.0 && tc.lr_at(99) < 1e-3 * tc.lr0);
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let cfg = small(Activation::Relu, Gating::SoftmaxTopK, true);
        let a = init_student(cfg, None, 3).unwrap();
        assert_eq!(a, init_student(cfg, None, 3).unwrap());
        assert_ne!(a, init_student(cfg, None, 4).unwrap());
        assert!(a.bias.iter().all(|&b| b == 0.0));
        let z = init_student(cfg, Some(0.0), 3).unwrap();
        let x = [0.3; 8];
        assert!(z.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        // f(x) = a b x, loss (abx − y)²: ∂a = 2(abx − y) b x, ∂b = 2(abx − y) a x.
        let cfg = make_config(1, 1, 1, 1, Activation::Linear, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        let (a, b, x, y) = (1.5, -0.7, 0.9, 0.2);
        layer.a[0][(0, 0)] = a;
        layer.b[0][(0, 0)] = b;
        layer.routing[(0, 0)] = 1.0;
        let (loss, g) =
            loss_and_grads(&layer, &Matrix::from_vec(1, 1, vec![x]), &Matrix::from_vec(1, 1, vec![y])).unwrap();
        let e = a * b * x - y;
        assert!((loss - e * e).abs() < 1e-15);
        assert!((g.a[0][(0, 0)] - 2.0 * e * b * x).abs() < 1e-15);
        assert!((g.b[0][(0, 0)] - 2.0 * e * a * x).abs() < 1e-15);
        assert_eq!(g.routing[(0, 0)], 0.0);
    }

    #[test]
    fn teacher_copy_has_zero_loss_and_gradient() {
        for gating in [Gating::EqualHard, Gating::SoftmaxTopK] {
            let cfg = small(Activation::Relu, gating, false);
            let t = random_teacher(cfg, 1).unwrap();
            let xs = crate::moe::sample_inputs(&InputDistribution::gaussian(8), 64, SeedStream::new(2));
            let ys = t.forward_batch(&xs).unwrap();
            let (loss, g) = loss_and_grads(&t, &xs, &ys).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn relu_fd_example_passes() {
        let cfg = small(Activation::Relu, Gating::SoftmaxTopK, true);
        let mut layer = init_student(cfg, Some(0.5), 11).unwrap();
        layer.bias = vec![0.1, -0.2, 0.05, 0.3];
        let dist = InputDistribution::gaussian(8);
        let mut rng = SeedStream::new(5).rng();
        let x = dist.sample(&mut rng);
        let y = dist.sample(&mut rng);
        let r = finite_diff_check(&layer, &x, &y, 1e-6, 1e-4, usize::MAX, 0).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.n_checked > 100);
    }

    #[test]
    fn kink_coordinate_is_excluded() {
        let cfg = small(Activation::Relu, Gating::EqualHard, false);
        let mut layer = init_student(cfg, Some(0.5), 12).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.1 + 0.05 * i as f64).collect();
        let j = layer.route(&x).indices()[0];
        // Make column 0 of B_j orthogonal to x.
        let col: Vec<f64> = (0..8).map(|r| layer.b[j][(r, 0)]).collect();
        let proj = dot(&col, &x) / dot(&x, &x);
        for r in 0..8 {
            layer.b[j][(r, 0)] -= proj * x[r];
        }
        let y = vec![0.5; 8];
        let r = finite_diff_check(&layer, &x, &y, 1e-6, 1e-4, usize::MAX, 0).unwrap();
        assert!(r.excluded.iter().any(|c| matches!(c, ParamCoord::B { j: jj, c: 0, .. } if *jj == j)));
        assert!(r.pass);
    }

    #[test]
    fn boundary_input_is_rejected() {
        let cfg = small(Activation::Linear, Gating::EqualHard, false);
        let mut layer = init_student(cfg, None, 1).unwrap();
        let x = vec![0.2; 8];
        let row: Vec<f64> = layer.routing.row(0).to_vec();
        for i in 1..4 {
            layer.routing.row_mut(i).copy_from_slice(&row);
        }
        assert_eq!(score_gap(&layer, &x), 0.0);
        let r = finite_diff_check(&layer, &x, &x, 1e-6, 1e-4, usize::MAX, 0);
        assert!(matches!(r, Err(Error::RoutingBoundary { .. })));
    }

    #[test]
    fn constant_activation_has_no_b_gradient() {
        let cfg = small(Activation::Constant, Gating::SoftmaxTopK, false);
        let layer = init_student(cfg, None, 2).unwrap();
        let xs = crate::moe::sample_inputs(&InputDistribution::gaussian(8), 32, SeedStream::new(1));
        let ys = crate::moe::sample_inputs(&InputDistribution::gaussian(8), 32, SeedStream::new(2));
        let (_, g) = loss_and_grads(&layer, &xs, &ys).unwrap();
        assert!(g.b.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
        assert!(g.routing_max_abs() > 0.0);
    }

    #[test]
    fn shards_sum_to_serial() {
        let cfg = small(Activation::Relu, Gating::SoftmaxTopK, true);
        let layer = init_student(cfg, Some(0.4), 7).unwrap();
        let xs = crate::moe::sample_inputs(&InputDistribution::gaussian(8), 101, SeedStream::new(3));
        let ys = crate::moe::sample_inputs(&InputDistribution::gaussian(8), 101, SeedStream::new(4));
        let (serial_loss, serial) = loss_and_grads(&layer, &xs, &ys).unwrap();
        let mut total = 0.0;
        let mut g = Gradients::zeros_like(&layer);
        for r in shard_ranges(101, 4) {
            let (s, part) = shard_loss_and_grads(&layer, &xs, &ys, r, 101);
            total += s;
            g.add_assign(&part);
        }
        assert!((total / 101.0 - serial_loss).abs() <= 1e-12 * serial_loss);
        let mut diff = g.clone();
        for (d, s) in diff.slices_mut().zip(serial.slices()) {
            axpy(-1.0, s, d);
        }
        assert!(diff.max_abs() <= 1e-12 * serial.max_abs());
    }

    #[test]
    fn copy_of_teacher_stays_at_zero() {
        let cfg = small(Activation::Relu, Gating::EqualHard, false);
        let t = random_teacher(cfg, 3).unwrap();
        let tc = TrainConfig { total_samples: 2000, batch_size: 100, eval_samples: 500, eval_every: 5, ..Default::default() };
        let (s, log) = train(&t, t.clone(), &InputDistribution::gaussian(8), &tc).unwrap();
        assert_eq!(s, t);
        assert!(log.records.iter().all(|r| r.eval_loss == 0.0));
        let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*steps.last().unwrap(), 19);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let t = random_teacher(make_config(4, 2, 4, 8, Activation::Relu, Gating::EqualHard, false).unwrap(), 1)
            .unwrap();
        let cfg = make_config(4, 2, 5, 8, Activation::Relu, Gating::SoftmaxTopK, false).unwrap();
        let tc = TrainConfig {
            total_samples: 40_000,
            batch_size: 200,
            lr0: 0.5,
            eval_samples: 2000,
            eval_every: 20,
            ..Default::default()
        };
        let dist = InputDistribution::gaussian(8);
        let run = || train(&t, init_student(cfg, None, 5).unwrap(), &dist, &tc).unwrap();
        let (s1, l1) = run();
        let (s2, l2) = run();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert!(!l1.diverged);
        assert!(l1.final_eval_loss < 0.8 * l1.records[0].eval_loss);
    }

    #[test]
    fn huge_rate_flags_divergence() {
        let t = random_teacher(small(Activation::Linear, Gating::EqualHard, false), 1).unwrap();
        let cfg = small(Activation::Linear, Gating::SoftmaxTopK, false);
        let tc = TrainConfig { total_samples: 100_000, batch_size: 100, lr0: 1e6, eval_samples: 100, ..Default::default() };
        let (_, log) = train(&t, init_student(cfg, Some(1.0), 1).unwrap(), &InputDistribution::gaussian(8), &tc).unwrap();
        assert!(log.diverged);
        assert!(log.final_eval_loss.is_infinite());
        assert!(log.steps < tc.steps());
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let t = random_teacher(small(Activation::Relu, Gating::EqualHard, false), 1).unwrap();
        let rows =
            run_granularity_sweep(&[], &t, &InputDistribution::gaussian(8), &TrainConfig::default(), &[0.01]).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn granularity_cells_fix_active_and_total() {
        let cells = granularity_cells(&[1, 2, 4, 8], 80, 160, 64, Activation::Relu, Gating::SoftmaxTopK, false)
            .unwrap();
        let shapes: Vec<(usize, usize, usize)> = cells.iter().map(|c| (c.student.m, c.student.k, c.student.w)).collect();
        assert_eq!(shapes, [(2, 1, 80), (4, 2, 40), (8, 4, 20), (16, 8, 10)]);
        assert!(granularity_cells(&[3], 80, 160, 64, Activation::Relu, Gating::SoftmaxTopK, false).is_err());
    }

    #[test]
    fn random_teacher_has_unit_scale() {
        for act in [Activation::Relu, Activation::Linear, Activation::Constant] {
            let cfg = make_config(16, 8, 8, 64, act, Gating::EqualHard, false).unwrap();
            let t = random_teacher(cfg, 9).unwrap();
            let e = t.mean_sq_norm(&InputDistribution::gaussian(64), 4000, SeedStream::new(1)).mean();
            assert!(e > 0.5 && e < 2.0, "{act:?}: {e}");
        }
    }
}

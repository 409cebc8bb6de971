//! Random constructions of routing vectors and experts.
//!
//! * [`gaussian_routing`]: i.i.d. standard normal routing vectors.
//! * [`constant_experts`]: vectors `u_j ~ N(0, I_d / (2dk))`, whose k-sums are
//!   bounded and pairwise separated.
//! * [`linear_experts`]: `M_i = A_i B_i^T / √(2kwd)` with Gaussian factors.
//! * [`relu_experts`]: sparse diagonal `M_i = √(d/kw) Σ_j e_{p_ij} e_{p_ij}^T`
//!   realized as width-`w` ReLU experts via `[A, −A]`, `[B, −B]`.
//!
//! [`assemble_theorem_moe`] combines routing and experts into a layer and a
//! [`ConstructionReport`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::ToPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combin::{binomial, random_subset, Subsets};
use crate::error::{Error, Result};
use crate::lemmas::{check_routing_balance, norm_upper_check, region_census, LemmaReport};
use crate::linalg::{dist_sq, norm_sq, Matrix};
use crate::moe::{fill_normal, make_config, Activation, Gating, InputDistribution, MoeLayer};
use crate::rng::SeedStream;

/// Cap on exhaustively enumerated regions (boundedness) or pairs (separation).
pub const EXHAUSTIVE_CAP: u64 = 1_000_000;

/// Default constant in the recommended-regime warnings.
pub const DEFAULT_REGIME_C: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionKind {
    Routing,
    ConstantExperts,
    LinearExperts,
    ReluExperts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
}

/// One verified inequality `statistic ≤ threshold` or `statistic ≥ threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructionParams {
    pub m: usize,
    pub k: usize,
    pub w: usize,
    pub d: usize,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub kind: ConstructionKind,
    pub seed: u64,
    pub params: ConstructionParams,
    pub checks: Vec<Check>,
    pub overall_pass: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Regions and pairs actually tested, and whether enumeration was exhaustive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<Coverage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lemma_reports: Vec<LemmaReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub regions_tested: u64,
    pub regions_total: f64,
    pub pairs_tested: u64,
    pub pairs_total: f64,
    pub exhaustive: bool,
}

impl ConstructionReport {
    pub fn new(kind: ConstructionKind, seed: u64, params: ConstructionParams) -> Self {
        Self {
            kind,
            seed,
            params,
            checks: Vec::new(),
            overall_pass: true,
            warnings: Vec::new(),
            coverage: None,
            lemma_reports: Vec::new(),
        }
    }

    pub fn push_check(&mut self, name: &str, statistic: f64, relation: Relation, threshold: f64) -> bool {
        let pass = statistic.is_finite()
            && match relation {
                Relation::AtMost => statistic <= threshold,
                Relation::AtLeast => statistic >= threshold,
            };
        self.checks.push(Check { name: name.to_string(), statistic, relation, threshold, pass });
        self.overall_pass &= pass;
        pass
    }

    /// Adds a lemma report as a pass/fail check on its own verdict.
    pub fn push_lemma(&mut self, report: LemmaReport) {
        let pass = report.pass;
        self.checks.push(Check {
            name: report.lemma_id.clone(),
            statistic: if pass { 1.0 } else { 0.0 },
            relation: Relation::AtLeast,
            threshold: 1.0,
            pass,
        });
        self.overall_pass &= pass;
        self.lemma_reports.push(report);
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn merge(&mut self, other: ConstructionReport) {
        self.overall_pass &= other.overall_pass;
        self.checks.extend(other.checks);
        self.warnings.extend(other.warnings);
        self.lemma_reports.extend(other.lemma_reports);
        if self.coverage.is_none() {
            self.coverage = other.coverage;
        }
    }
}

/// `m × d` matrix of i.i.d. standard normal routing vectors.
pub fn gaussian_routing(m: usize, d: usize, seed: SeedStream) -> Matrix {
    let mut r = Matrix::zeros(m, d);
    fill_normal(&mut seed.rng(), r.as_mut_slice(), 1.0);
    r
}

/// `m` vectors drawn i.i.d. from `N(0, I_d / (2dk))`.
pub fn constant_experts(m: usize, k: usize, d: usize, seed: SeedStream) -> Vec<Vec<f64>> {
    let scale = 1.0 / ((2 * d * k) as f64).sqrt();
    let mut rng = seed.rng();
    (0..m)
        .map(|_| {
            let mut u = vec![0.0; d];
            fill_normal(&mut rng, &mut u, scale);
            u
        })
        .collect()
}

/// `u_S = Σ_{j ∈ S} u_j`.
pub fn subset_vector(u: &[Vec<f64>], set: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; u[0].len()];
    for &j in set {
        acc.iter_mut().zip(&u[j]).for_each(|(a, b)| *a += b);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    Exhaustive,
    Sampled { n_pairs: usize, seed: u64 },
}

/// Checks `‖u_S‖² ≤ 1` and `‖u_S − u_{S'}‖² ≥ |S Δ S'| / (4k)`.
///
/// The separation statistic is the worst ratio
/// `‖u_S − u_{S'}‖² / (|S Δ S'| / (4k))` over tested pairs with `S ≠ S'`,
/// so it passes at ratio ≥ 1. Exhaustive mode requires `C(m,k)` regions and
/// `C(C(m,k), 2)` pairs to be at most [`EXHAUSTIVE_CAP`]; sampled mode draws
/// `n_pairs` uniform regions and pairs.
pub fn verify_constant_experts(u: &[Vec<f64>], k: usize, mode: VerifyMode) -> Result<ConstructionReport> {
    let m = u.len();
    if m == 0 || k == 0 || k > m {
        return Err(Error::InvalidConfig("need 1 <= k <= m constant experts".into()));
    }
    let d = u[0].len();
    let c = binomial(m as u64, k as u64);
    let c_f = c.to_f64().unwrap_or(f64::INFINITY);
    let pairs_total = c_f * (c_f - 1.0) / 2.0;
    let params = ConstructionParams { m, k, w: 1, d, epsilon: None };
    let seed = match mode {
        VerifyMode::Exhaustive => 0,
        VerifyMode::Sampled { seed, .. } => seed,
    };
    let mut report = ConstructionReport::new(ConstructionKind::ConstantExperts, seed, params);
    let floor = |sd: usize| sd as f64 / (4.0 * k as f64);
    let mut max_norm: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    let mut worst_gap = f64::INFINITY;
    let (regions_tested, pairs_tested, exhaustive);
    match mode {
        VerifyMode::Exhaustive => {
            if c_f > EXHAUSTIVE_CAP as f64 || pairs_total > EXHAUSTIVE_CAP as f64 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "exhaustive verification needs at most {EXHAUSTIVE_CAP} pairs; C({m},{k}) gives {pairs_total:.3e}"
                )));
            }
            let sets: Vec<Vec<usize>> = Subsets::new(m, k).collect();
            let sums: Vec<Vec<f64>> = sets.iter().map(|s| subset_vector(u, s)).collect();
            for s in &sums {
                max_norm = max_norm.max(norm_sq(s));
            }
            for a in 0..sets.len() {
                for b in (a + 1)..sets.len() {
                    let sd = crate::combin::symmetric_difference_size(&sets[a], &sets[b]);
                    let dsq = dist_sq(&sums[a], &sums[b]);
                    worst_ratio = worst_ratio.min(dsq / floor(sd));
                    worst_gap = worst_gap.min(dsq - floor(sd));
                }
            }
            regions_tested = sets.len() as u64;
            pairs_tested = (sets.len() * sets.len().saturating_sub(1) / 2) as u64;
            exhaustive = true;
        }
        VerifyMode::Sampled { n_pairs, seed } => {
            let mut rng = SeedStream::new(seed).rng();
            let mut tested = 0u64;
            for _ in 0..n_pairs {
                let s = random_subset(&mut rng, m, k);
                let s2 = random_subset(&mut rng, m, k);
                let (us, us2) = (subset_vector(u, &s), subset_vector(u, &s2));
                max_norm = max_norm.max(norm_sq(&us)).max(norm_sq(&us2));
                let sd = crate::combin::symmetric_difference_size(&s, &s2);
                if sd > 0 {
                    let dsq = dist_sq(&us, &us2);
                    worst_ratio = worst_ratio.min(dsq / floor(sd));
                    worst_gap = worst_gap.min(dsq - floor(sd));
                    tested += 1;
                }
            }
            regions_tested = 2 * n_pairs as u64;
            pairs_tested = tested;
            exhaustive = false;
        }
    }
    report.push_check("boundedness", max_norm, Relation::AtMost, 1.0);
    if pairs_tested == 0 {
        // A single region: separation holds vacuously.
        report.push_check("separation", 1.0, Relation::AtLeast, 1.0);
    } else {
        report.push_check("separation", worst_ratio, Relation::AtLeast, 1.0);
        report.push_check("separation_margin", worst_gap, Relation::AtLeast, 0.0);
    }
    report.coverage = Some(Coverage {
        regions_tested,
        regions_total: c_f,
        pairs_tested,
        pairs_total,
        exhaustive,
    });
    Ok(report)
}

/// Gaussian factors of `M_i = scale · A_i B_i^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearExperts {
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    /// Multiplier applied to `A_i B_i^T`; `1/√(2kwd)` for the random construction.
    pub scale: f64,
}

impl LinearExperts {
    /// Fixture hook: experts from explicit factors.
    pub fn from_factors(a: Vec<Matrix>, b: Vec<Matrix>, scale: f64) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::InvalidConfig("factor lists must be nonempty and of equal length".into()));
        }
        let shape = a[0].shape();
        if a.iter().chain(&b).any(|m| m.shape() != shape) {
            return Err(Error::InvalidConfig("all factors must share one shape".into()));
        }
        Ok(Self { a, b, scale })
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.a[0].rows()
    }

    pub fn w(&self) -> usize {
        self.a[0].cols()
    }

    /// Dense `M_i`.
    pub fn matrix(&self, i: usize) -> Matrix {
        self.a[i].matmul_t(&self.b[i]).scaled(self.scale)
    }

    pub fn matrices(&self) -> Vec<Matrix> {
        (0..self.m()).map(|i| self.matrix(i)).collect()
    }

    /// Layer factors with the scale folded into `A`.
    pub fn layer_factors(&self) -> (Vec<Matrix>, Vec<Matrix>) {
        (self.a.iter().map(|a| a.scaled(self.scale)).collect(), self.b.clone())
    }
}

/// `M_i = A_i B_i^T / √(2kwd)` with standard normal `d × w` factors.
pub fn linear_experts(m: usize, k: usize, w: usize, d: usize, seed: SeedStream) -> LinearExperts {
    let mut rng = seed.rng();
    let draw = |rng: &mut crate::rng::StreamRng| {
        let mut x = Matrix::zeros(d, w);
        fill_normal(rng, x.as_mut_slice(), 1.0);
        x
    };
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for _ in 0..m {
        a.push(draw(&mut rng));
        b.push(draw(&mut rng));
    }
    LinearExperts { a, b, scale: 1.0 / ((2 * k * w * d) as f64).sqrt() }
}

/// Sparse diagonal experts `M_i = scale · Σ_j e_{p_ij} e_{p_ij}^T`.
///
/// Repeated indices within one expert accumulate, so a diagonal entry is
/// `scale × multiplicity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluExperts {
    pub d: usize,
    pub k: usize,
    /// Expert width; each expert carries `⌊w/2⌋` sampled indices.
    pub w: usize,
    pub indices: Vec<Vec<usize>>,
    /// `√(d / (kw))` for the random construction.
    pub scale: f64,
}

impl ReluExperts {
    /// Fixture hook: experts from explicit index lists, with the standard scale.
    pub fn from_indices(d: usize, k: usize, w: usize, indices: Vec<Vec<usize>>) -> Result<Self> {
        if indices.iter().flatten().any(|&p| p >= d) {
            return Err(Error::InvalidConfig("index out of range".into()));
        }
        if indices.iter().any(|ix| ix.len() > w / 2) {
            return Err(Error::InvalidConfig("an expert has more than w/2 indices".into()));
        }
        if k == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidConfig("d, k, w must be positive".into()));
        }
        Ok(Self { d, k, w, indices, scale: (d as f64 / (k * w) as f64).sqrt() })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    /// `(index, multiplicity)` pairs of expert `i`, sorted by index.
    pub fn multiplicities(&self, i: usize) -> Vec<(usize, usize)> {
        let mut ix = self.indices[i].clone();
        ix.sort_unstable();
        let mut out: Vec<(usize, usize)> = Vec::new();
        for p in ix {
            match out.last_mut() {
                Some((q, c)) if *q == p => *c += 1,
                _ => out.push((p, 1)),
            }
        }
        out
    }

    pub fn diagonal(&self, i: usize) -> Vec<f64> {
        self.subset_diagonal(&[i])
    }

    /// Diagonal of `Σ_{i ∈ set} M_i`.
    pub fn subset_diagonal(&self, set: &[usize]) -> Vec<f64> {
        let mut diag = vec![0.0; self.d];
        for &i in set {
            for &p in &self.indices[i] {
                diag[p] += self.scale;
            }
        }
        diag
    }

    pub fn matrix(&self, i: usize) -> Matrix {
        Matrix::diag(&self.diagonal(i))
    }

    pub fn matrices(&self) -> Vec<Matrix> {
        (0..self.m()).map(|i| self.matrix(i)).collect()
    }

    /// ReLU factors `A = [A', −A']`, `B = [B', −B']` with column `j` of `A'`
    /// equal to `scale · e_p` and of `B'` to `e_p`, so that
    /// `A σ(B^T x) = A' B'^T x = M_i x`. A zero column pads odd widths.
    pub fn factors(&self, i: usize) -> (Matrix, Matrix) {
        let half = self.w / 2;
        let mut a = Matrix::zeros(self.d, self.w);
        let mut b = Matrix::zeros(self.d, self.w);
        for (j, &p) in self.indices[i].iter().enumerate() {
            a[(p, j)] = self.scale;
            b[(p, j)] = 1.0;
            a[(p, half + j)] = -self.scale;
            b[(p, half + j)] = -1.0;
        }
        (a, b)
    }
}

/// `⌊w/2⌋` indices per expert drawn uniformly (with replacement) from `[d]`.
pub fn relu_experts(m: usize, k: usize, w: usize, d: usize, seed: SeedStream) -> ReluExperts {
    let mut rng = seed.rng();
    let half = w / 2;
    let indices = (0..m).map(|_| (0..half).map(|_| rng.random_range(0..d)).collect()).collect();
    ReluExperts { d, k, w, indices, scale: (d as f64 / (k * w) as f64).sqrt() }
}

/// Options for [`assemble_theorem_moe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleOptions {
    pub dist: InputDistribution,
    /// Samples for the region census and the norm check.
    pub n_mc: usize,
    /// Constant in the recommended-regime warnings.
    pub regime_c: f64,
    /// Sampled pairs when exhaustive verification is over the cap.
    pub n_pairs: usize,
}

impl AssembleOptions {
    pub fn new(d: usize) -> Self {
        Self { dist: InputDistribution::gaussian(d), n_mc: 100_000, regime_c: DEFAULT_REGIME_C, n_pairs: 100_000 }
    }
}

fn regime_warnings(activation: Activation, m: usize, k: usize, w: usize, d: usize, c: f64) -> Vec<String> {
    let lm = (m as f64).ln();
    let (kf, wf, df) = (k as f64, w as f64, d as f64);
    let mut out = Vec::new();
    let mut want = |ok: bool, what: String| {
        if !ok {
            out.push(what);
        }
    };
    match activation {
        Activation::Constant => {
            want(df >= c * kf * lm, alloc::format!("d = {d} below C k ln m = {:.1}", c * kf * lm));
        }
        Activation::Linear => {
            want(wf >= c * lm, alloc::format!("w = {w} below C ln m = {:.1}", c * lm));
            want(df >= c * kf * lm * lm, alloc::format!("d = {d} below C k (ln m)^2 = {:.1}", c * kf * lm * lm));
        }
        Activation::Relu => {
            want(kf * wf <= 0.99 * df, alloc::format!("kw = {} exceeds 0.99 d = {:.1}", k * w, 0.99 * df));
            want(wf >= c * lm, alloc::format!("w = {w} below C ln m = {:.1}", c * lm));
        }
    }
    out
}

/// Builds the construction for `activation` with Gaussian routing and
/// equal-weight hard gating, and verifies what applies: boundedness and
/// separation plus routing balance for constant experts, the norm bound for
/// linear and ReLU experts, and the structural properties of the sparse
/// ReLU experts. Regime hypotheses that fail are recorded as warnings.
pub fn assemble_theorem_moe(
    activation: Activation,
    m: usize,
    k: usize,
    w: usize,
    d: usize,
    seed: u64,
    opts: &AssembleOptions,
) -> Result<(MoeLayer, ConstructionReport)> {
    let config = make_config(m, k, w, d, activation, Gating::EqualHard, false)?;
    let stream = SeedStream::new(seed);
    let routing = gaussian_routing(m, d, stream.fork_str("routing"));
    let experts_seed = stream.fork_str("experts");
    let params = ConstructionParams { m, k, w, d, epsilon: None };
    let mut layer = MoeLayer::zeros(config)?;
    layer.routing = routing;
    let mut report;
    match activation {
        Activation::Constant => {
            let u = constant_experts(m, k, d, experts_seed);
            for (j, uj) in u.iter().enumerate() {
                for (r, v) in uj.iter().enumerate() {
                    layer.a[j][(r, 0)] = *v;
                }
            }
            let c = binomial(m as u64, k as u64).to_f64().unwrap_or(f64::INFINITY);
            let mode = if c * (c - 1.0) / 2.0 <= EXHAUSTIVE_CAP as f64 {
                VerifyMode::Exhaustive
            } else {
                VerifyMode::Sampled { n_pairs: opts.n_pairs, seed: stream.fork_str("pairs").key() }
            };
            report = verify_constant_experts(&u, k, mode)?;
            report.params = params;
            report.kind = ConstructionKind::ConstantExperts;
            let census = region_census(&layer, &opts.dist, opts.n_mc, stream.fork_str("census").key());
            report.push_lemma(check_routing_balance(&census, stream.fork_str("census").key()));
        }
        Activation::Linear => {
            let ex = linear_experts(m, k, w, d, experts_seed);
            let (a, b) = ex.layer_factors();
            layer.a = a;
            layer.b = b;
            report = ConstructionReport::new(ConstructionKind::LinearExperts, seed, params);
            report.push_lemma(norm_upper_check(&layer, &opts.dist, opts.n_mc, stream.fork_str("norm").key()));
        }
        Activation::Relu => {
            let ex = relu_experts(m, k, w, d, experts_seed);
            for j in 0..m {
                let (a, b) = ex.factors(j);
                layer.a[j] = a;
                layer.b[j] = b;
            }
            report = ConstructionReport::new(ConstructionKind::ReluExperts, seed, params);
            let max_rank = (0..m).map(|j| ex.multiplicities(j).len()).max().unwrap_or(0);
            report.push_check("max_expert_rank", max_rank as f64, Relation::AtMost, (w / 2) as f64);
            let min_entry = (0..m).flat_map(|j| ex.diagonal(j)).fold(f64::INFINITY, f64::min);
            report.push_check("min_diagonal_entry", min_entry, Relation::AtLeast, 0.0);
            report.push_lemma(norm_upper_check(&layer, &opts.dist, opts.n_mc, stream.fork_str("norm").key()));
        }
    }
    report.seed = seed;
    report.warnings = regime_warnings(activation, m, k, w, d, opts.regime_c);
    Ok((layer, report))
}

/// Fraction of `n_draws` draws of standard normal `d × w` pairs `A, B` with
/// `‖A B^T‖_F² ∈ [0.8, 1.2] d² w`.
pub fn outer_product_concentration(d: usize, w: usize, n_draws: usize, seed: SeedStream) -> f64 {
    let mut rng = seed.rng();
    let mut a = Matrix::zeros(d, w);
    let mut b = Matrix::zeros(d, w);
    let target = (d * d * w) as f64;
    let mut inside = 0usize;
    for _ in 0..n_draws {
        fill_normal(&mut rng, a.as_mut_slice(), 1.0);
        fill_normal(&mut rng, b.as_mut_slice(), 1.0);
        let f = a.matmul_t(&b).frobenius_sq();
        if (0.8 * target..=1.2 * target).contains(&f) {
            inside += 1;
        }
    }
    inside as f64 / n_draws.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RunningMean;

    #[test]
    fn routing_is_reproducible_and_centered() {
        let a = gaussian_routing(1000, 1000, SeedStream::new(3));
        assert_eq!(a, gaussian_routing(1000, 1000, SeedStream::new(3)));
        let mut acc = RunningMean::new();
        a.as_slice().iter().for_each(|&v| acc.push(v));
        assert!(acc.mean().abs() <= 4.0 * acc.std_err());
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(a.row(i), a.row(j));
            }
        }
    }

    #[test]
    fn subset_sum_has_half_unit_norm() {
        let (m, k, d) = (6, 2, 64);
        let mut acc = RunningMean::new();
        for s in 0..400 {
            let u = constant_experts(m, k, d, SeedStream::new(s));
            acc.push(norm_sq(&subset_vector(&u, &[1, 4])));
        }
        assert!((acc.mean() - 0.5).abs() <= 3.0 * acc.std_err());
    }

    #[test]
    fn difference_variance_scales_with_symmetric_difference() {
        // ‖u_S − u_S'‖² has mean |S Δ S'| / (2k).
        let (m, k, d) = (6, 3, 32);
        let mut acc = RunningMean::new();
        for s in 0..400 {
            let u = constant_experts(m, k, d, SeedStream::new(s));
            acc.push(dist_sq(&subset_vector(&u, &[0, 1, 2]), &subset_vector(&u, &[0, 3, 4])));
        }
        assert!((acc.mean() - 4.0 / 6.0).abs() <= 3.0 * acc.std_err());
    }

    #[test]
    fn packing_passes_for_most_seeds() {
        let passed = (0..10)
            .filter(|&s| {
                let u = constant_experts(8, 2, 128, SeedStream::new(s));
                verify_constant_experts(&u, 2, VerifyMode::Exhaustive).unwrap().overall_pass
            })
            .count();
        assert!(passed >= 9, "{passed}");
    }

    #[test]
    fn packing_edge_cases() {
        let u = constant_experts(3, 3, 16, SeedStream::new(1));
        let r = verify_constant_experts(&u, 3, VerifyMode::Exhaustive).unwrap();
        assert_eq!(r.coverage.unwrap().pairs_tested, 0);
        assert!(r.check("separation").unwrap().pass);

        let big: Vec<Vec<f64>> = constant_experts(8, 2, 128, SeedStream::new(2))
            .into_iter()
            .map(|v| v.into_iter().map(|x| 10.0 * x).collect())
            .collect();
        let r = verify_constant_experts(&big, 2, VerifyMode::Exhaustive).unwrap();
        assert!(!r.check("boundedness").unwrap().pass);
        assert!(!r.overall_pass);

        let many = constant_experts(100, 5, 4, SeedStream::new(3));
        assert!(verify_constant_experts(&many, 5, VerifyMode::Exhaustive).is_err());
        let sampled = verify_constant_experts(&many, 5, VerifyMode::Sampled { n_pairs: 100, seed: 1 }).unwrap();
        assert!(!sampled.coverage.unwrap().exhaustive);
    }

    #[test]
    fn linear_experts_have_rank_at_most_w() {
        let ex = linear_experts(3, 2, 4, 12, SeedStream::new(5));
        for i in 0..3 {
            let s = crate::spectral::svd(&ex.matrix(i)).unwrap();
            assert_eq!(s.numerical_rank(1e-10), 4);
        }
    }

    #[test]
    fn identity_factor_fixture() {
        let d = 5;
        let s: f64 = 0.3;
        let eye = Matrix::identity(d).scaled(s.sqrt());
        let ex = LinearExperts::from_factors(vec![eye.clone()], vec![eye], 1.0).unwrap();
        let mut diff = ex.matrix(0);
        diff.sub_assign(&Matrix::identity(d).scaled(s));
        assert!(diff.frobenius_sq() < 1e-28);
    }

    #[test]
    fn normalized_linear_cost_is_bounded() {
        // Average over construction seeds of E‖Σ_S M_i x‖² over the routed
        // region must not exceed E‖x‖² = 1.
        let (m, k, w, d) = (6, 2, 8, 64);
        let mut acc = RunningMean::new();
        for seed in 0..5 {
            let (layer, _) = assemble_theorem_moe(
                Activation::Linear,
                m,
                k,
                w,
                d,
                seed,
                &AssembleOptions { n_mc: 2000, ..AssembleOptions::new(d) },
            )
            .unwrap();
            let r = layer.mean_sq_norm(&InputDistribution::gaussian(d), 20_000, SeedStream::new(100 + seed));
            acc = acc.merge(&r);
        }
        assert!(acc.mean() <= 1.0 + 3.0 * acc.std_err(), "{}", acc.mean());
    }

    #[test]
    fn relu_index_fixture() {
        let ex = ReluExperts::from_indices(10, 1, 4, vec![vec![3, 7]]).unwrap();
        let m = ex.matrix(0);
        let s = ex.scale;
        assert_eq!(m[(3, 3)], s);
        assert_eq!(m[(7, 7)], s);
        assert_eq!(crate::spectral::svd(&m).unwrap().numerical_rank(1e-12), 2);
        let dup = ReluExperts::from_indices(10, 1, 4, vec![vec![2, 2]]).unwrap();
        assert_eq!(dup.diagonal(0)[2], 2.0 * dup.scale);
        assert_eq!(dup.multiplicities(0), [(2, 2)]);
    }

    #[test]
    fn relu_factors_reproduce_diagonal_map() {
        for w in [6, 7] {
            let ex = relu_experts(4, 2, w, 9, SeedStream::new(w as u64));
            let cfg = make_config(4, 2, w, 9, Activation::Relu, Gating::EqualHard, false).unwrap();
            let mut layer = MoeLayer::zeros(cfg).unwrap();
            let mut rng = SeedStream::new(1).rng();
            fill_normal(&mut rng, layer.routing.as_mut_slice(), 1.0);
            for j in 0..4 {
                let (a, b) = ex.factors(j);
                layer.a[j] = a;
                layer.b[j] = b;
            }
            let dist = InputDistribution::gaussian(9);
            for _ in 0..200 {
                let x = dist.sample(&mut rng);
                let s = layer.route(&x);
                let diag = ex.subset_diagonal(s.indices());
                let want: Vec<f64> = diag.iter().zip(&x).map(|(a, b)| a * b).collect();
                let got = layer.forward(&x).unwrap();
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
                assert!(diag.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn relu_rank_at_most_half_width() {
        let ex = relu_experts(20, 2, 9, 50, SeedStream::new(8));
        for i in 0..20 {
            assert!(ex.multiplicities(i).len() <= 4);
            assert_eq!(ex.indices[i].len(), 4);
        }
    }

    #[test]
    fn assemble_constant_reports_packing_and_balance() {
        let (layer, report) =
            assemble_theorem_moe(Activation::Constant, 8, 2, 1, 256, 4, &AssembleOptions::new(256)).unwrap();
        assert!(report.check("boundedness").is_some());
        assert!(report.check("separation").is_some());
        assert!(report.check("routing-balance").is_some());
        assert_eq!(layer.config.gating, Gating::EqualHard);
        assert!(report.warnings.is_empty());
        assert_eq!(layer.effective_vector(3).len(), 256);
    }

    #[test]
    fn assemble_linear_meets_norm_bound() {
        let (_, report) =
            assemble_theorem_moe(Activation::Linear, 6, 2, 8, 128, 1, &AssembleOptions::new(128)).unwrap();
        assert!(report.check("norm-upper").unwrap().pass);
        // w = 8 is below the recommended C ln m.
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn assemble_relu_warns_outside_regime() {
        let opts = AssembleOptions { n_mc: 5000, ..AssembleOptions::new(16) };
        let (layer, report) = assemble_theorem_moe(Activation::Relu, 4, 2, 16, 16, 1, &opts).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("0.99")));
        assert_eq!(layer.config.m, 4);
        assert!(report.check("max_expert_rank").unwrap().pass);
    }

    #[test]
    fn outer_products_concentrate() {
        let frac = outer_product_concentration(64, 64, 200, SeedStream::new(9));
        assert!(frac >= 0.95, "{frac}");
    }

    #[test]
    fn relu_sparse_cost_is_bounded() {
        let (m, k, w, d) = (8, 2, 8, 64);
        let mut acc = RunningMean::new();
        for seed in 0..5 {
            let opts = AssembleOptions { n_mc: 1000, ..AssembleOptions::new(d) };
            let (layer, _) = assemble_theorem_moe(Activation::Relu, m, k, w, d, seed, &opts).unwrap();
            acc = acc.merge(&layer.mean_sq_norm(&InputDistribution::gaussian(d), 20_000, SeedStream::new(seed)));
        }
        assert!(acc.mean() <= 1.0 + 3.0 * acc.std_err());
    }
}

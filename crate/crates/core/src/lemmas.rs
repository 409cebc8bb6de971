//! Monte-Carlo verifiers.
//!
//! Each verifier turns one quantitative inequality into a numeric check and
//! returns a [`LemmaReport`]. Proportions get Wilson intervals and means get
//! normal-approximation standard errors; comparisons allow 3 standard errors
//! of slack on the favorable side. All verifiers are deterministic functions
//! of their parameters and seed.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::combin::{binomial, binomial_f64, random_subset};
use crate::constructions::ReluExperts;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::moe::{
    top_k_indices, ActiveSet, DistributionKind, InputDistribution, MoeLayer, SAMPLE_BLOCK,
};
use crate::rng::SeedStream;
use crate::spectral::{conditioned_covariance, project_out_columns, random_orthonormal, svd, sym_eig};
use crate::stats::{normal_cdf, Proportion, RunningMean};

/// Standard errors of slack allowed on the favorable side of a comparison.
pub const SLACK_SE: f64 = 3.0;

/// Outcome of one verifier run. Maps are ordered so JSON output is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma_id: String,
    pub params: BTreeMap<String, f64>,
    pub stats: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub pass: bool,
    pub seed: u64,
    pub n: u64,
    /// Filled in by callers that own a clock.
    pub runtime_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl LemmaReport {
    pub fn new(lemma_id: &str, seed: u64, n: u64) -> Self {
        Self {
            lemma_id: lemma_id.to_string(),
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            pass: false,
            seed,
            n,
            runtime_ms: None,
            notes: Vec::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: f64) -> &mut Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn stat(&mut self, key: &str, value: f64) -> &mut Self {
        self.stats.insert(key.to_string(), value);
        self
    }

    pub fn threshold(&mut self, key: &str, value: f64) -> &mut Self {
        self.thresholds.insert(key.to_string(), value);
        self
    }

    pub fn note(&mut self, text: impl Into<String>) -> &mut Self {
        self.notes.push(text.into());
        self
    }

    pub fn get_stat(&self, key: &str) -> Option<f64> {
        self.stats.get(key).copied()
    }
}

// ---------------------------------------------------------------------------
// Region census

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub set: ActiveSet,
    pub hits: u64,
    pub measure: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// Monte-Carlo estimate of the routing-region measures `μ(U_S)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCensus {
    pub m: usize,
    pub k: usize,
    pub n_samples: u64,
    /// Observed regions in increasing `ActiveSet` order.
    pub regions: Vec<RegionRecord>,
    pub n_regions_observed: usize,
    /// Regions whose lower Wilson bound is at least `balance_threshold`.
    pub balance_count: usize,
    /// `1 / (2 C(m, k))`.
    pub balance_threshold: f64,
}

impl RegionCensus {
    pub fn measure(&self, set: &ActiveSet) -> f64 {
        self.regions
            .binary_search_by(|r| r.set.cmp(set))
            .map_or(0.0, |i| self.regions[i].measure)
    }

    pub fn total_hits(&self) -> u64 {
        self.regions.iter().map(|r| r.hits).sum()
    }
}

/// Raw region tallies; merge block tallies in any order to get the same census.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CensusCounts {
    pub m: usize,
    pub k: usize,
    pub n: u64,
    pub counts: BTreeMap<Vec<usize>, u64>,
}

impl CensusCounts {
    pub fn new(m: usize, k: usize) -> Self {
        Self { m, k, n: 0, counts: BTreeMap::new() }
    }

    #[inline]
    pub fn add(&mut self, set: &[usize]) {
        self.n += 1;
        match self.counts.get_mut(set) {
            Some(c) => *c += 1,
            None => {
                self.counts.insert(set.to_vec(), 1);
            }
        }
    }

    pub fn merge(&mut self, other: &CensusCounts) {
        self.n += other.n;
        for (set, c) in &other.counts {
            *self.counts.entry(set.clone()).or_insert(0) += c;
        }
    }

    pub fn finish(&self) -> RegionCensus {
        let c = binomial_f64(self.m as u64, self.k as u64);
        let balance_threshold = 1.0 / (2.0 * c);
        let regions: Vec<RegionRecord> = self
            .counts
            .iter()
            .map(|(set, &hits)| {
                let p = Proportion::new(hits, self.n);
                let (lo, hi) = p.wilson();
                RegionRecord {
                    set: ActiveSet::from_sorted(set.clone()),
                    hits,
                    measure: p.estimate(),
                    wilson_lo: lo,
                    wilson_hi: hi,
                }
            })
            .collect();
        let balance_count = regions.iter().filter(|r| r.wilson_lo >= balance_threshold).count();
        RegionCensus {
            m: self.m,
            k: self.k,
            n_samples: self.n,
            n_regions_observed: regions.len(),
            regions,
            balance_count,
            balance_threshold,
        }
    }
}

/// Number of independently seeded blocks used for `n_samples` draws.
pub fn census_block_count(n_samples: usize) -> usize {
    n_samples.div_ceil(SAMPLE_BLOCK)
}

/// Tallies block `block` of a census: rows `block * SAMPLE_BLOCK ..` drawn
/// from `SeedStream::new(seed).fork(block)`, the same rows
/// [`crate::moe::sample_inputs`] would produce.
pub fn census_block(
    layer: &MoeLayer,
    dist: &InputDistribution,
    n_samples: usize,
    seed: u64,
    block: usize,
) -> CensusCounts {
    let cfg = &layer.config;
    let mut counts = CensusCounts::new(cfg.m, cfg.k);
    let start = block * SAMPLE_BLOCK;
    let end = n_samples.min(start + SAMPLE_BLOCK);
    let mut rng = SeedStream::new(seed).fork(block as u64).rng();
    let mut x = vec![0.0; cfg.d];
    let mut scores = vec![0.0; cfg.m];
    let mut order = Vec::with_capacity(cfg.m);
    for _ in start..end {
        dist.sample_into(&mut rng, &mut x);
        layer.scores_into(&x, &mut scores);
        top_k_indices(&scores, cfg.k, &mut order);
        counts.add(&order);
    }
    counts
}

/// Routes `n_samples` draws from `dist` through `layer` and tallies regions.
pub fn region_census(layer: &MoeLayer, dist: &InputDistribution, n_samples: usize, seed: u64) -> RegionCensus {
    let mut total = CensusCounts::new(layer.config.m, layer.config.k);
    for b in 0..census_block_count(n_samples) {
        total.merge(&census_block(layer, dist, n_samples, seed, b));
    }
    total.finish()
}

/// Balance check: at least `⌈C(m,k)/9⌉` regions have measure at least
/// `1/(2 C(m,k))`, judged by per-region lower Wilson bounds.
pub fn check_routing_balance(census: &RegionCensus, seed: u64) -> LemmaReport {
    let c = binomial(census.m as u64, census.k as u64);
    let required: BigUint = (&c + 8u32) / 9u32;
    let mut r = LemmaReport::new("routing-balance", seed, census.n_samples);
    r.param("m", census.m as f64).param("k", census.k as f64);
    r.stat("balance_count", census.balance_count as f64)
        .stat("regions_observed", census.n_regions_observed as f64)
        .stat("max_measure", census.regions.iter().map(|x| x.measure).fold(0.0, f64::max))
        .stat("config_count", c.to_f64().unwrap_or(f64::INFINITY));
    r.threshold("min_balance_count", required.to_f64().unwrap_or(f64::INFINITY))
        .threshold("region_measure", census.balance_threshold);
    r.pass = BigUint::from(census.balance_count) >= required;
    r
}

// ---------------------------------------------------------------------------
// Scalar probability checks

/// `f(δ) = P[X_i > X_j for all i ≤ k < j]` where the first `k` of `m`
/// independent normals have mean `δ` and the rest mean 0. Checked against
/// `exp(δ k √(2 ln m)) / C(m, k)`.
pub fn order_stat_probability(m: usize, k: usize, delta: f64, n_trials: usize, seed: u64) -> Result<LemmaReport> {
    let c = binomial_f64(m as u64, k as u64);
    if k == 0 || k > m || m > 30 || c > 1e4 {
        return Err(Error::InvalidConfig(alloc::format!(
            "order statistic check needs 1 <= k <= m <= 30 and C(m,k) <= 1e4 (m={m}, k={k})"
        )));
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut hits = 0u64;
    for _ in 0..n_trials {
        let mut min_top = f64::INFINITY;
        let mut max_rest = f64::NEG_INFINITY;
        for i in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            if i < k {
                min_top = min_top.min(z + delta);
            } else {
                max_rest = max_rest.max(z);
            }
        }
        if min_top > max_rest {
            hits += 1;
        }
    }
    let p = Proportion::new(hits, n_trials as u64);
    let bound = (delta * k as f64 * (2.0 * (m as f64).ln()).sqrt()).exp() / c;
    let mut r = LemmaReport::new("order-statistics", seed, n_trials as u64);
    r.param("m", m as f64).param("k", k as f64).param("delta", delta);
    let (lo, hi) = p.wilson();
    r.stat("estimate", p.estimate()).stat("std_err", p.std_err()).stat("wilson_lo", lo).stat("wilson_hi", hi);
    if delta == 0.0 {
        r.stat("exact", 1.0 / c);
    }
    r.threshold("bound", bound);
    r.pass = p.estimate() - SLACK_SE * p.std_err() <= bound;
    Ok(r)
}

/// Lower and upper tails of a χ²_d variable against `e^{-x}`:
/// `P[Z ≤ d - 2√(dx)]` and `P[Z ≥ d + 2√(dx) + 2x]`.
pub fn chi2_tail_check(d: usize, x: f64, n_trials: usize, seed: u64) -> LemmaReport {
    let df = d as f64;
    let lower_cut = df - 2.0 * (df * x).sqrt();
    let upper_cut = df + 2.0 * (df * x).sqrt() + 2.0 * x;
    let mut rng = SeedStream::new(seed).rng();
    let (mut lo_hits, mut hi_hits) = (0u64, 0u64);
    for _ in 0..n_trials {
        let mut z = 0.0;
        for _ in 0..d {
            let g: f64 = StandardNormal.sample(&mut rng);
            z += g * g;
        }
        if z <= lower_cut {
            lo_hits += 1;
        }
        if z >= upper_cut {
            hi_hits += 1;
        }
    }
    let n = n_trials as u64;
    let (lo, hi) = (Proportion::new(lo_hits, n), Proportion::new(hi_hits, n));
    let bound = (-x).exp();
    let mut r = LemmaReport::new("chi2-tail", seed, n);
    r.param("d", df).param("x", x);
    r.stat("lower_tail", lo.estimate())
        .stat("lower_tail_std_err", lo.std_err())
        .stat("upper_tail", hi.estimate())
        .stat("upper_tail_std_err", hi.std_err());
    r.threshold("bound", bound).threshold("lower_cut", lower_cut).threshold("upper_cut", upper_cut);
    r.pass = lo.estimate() <= bound + SLACK_SE * lo.std_err() && hi.estimate() <= bound + SLACK_SE * hi.std_err();
    r
}

/// Probability that `x - p` lies in a tube constraining the first
/// `n_constrained` coordinates.
///
/// For [`DistributionKind::GaussianIso`] the tube is measured under the
/// standard normal `N(0, I_d)` with half-width `t` and compared to
/// `(t √(2/π))^n`. For [`DistributionKind::UnitBall`] the half-width is
/// `t/√d` and the bound is `2^{-d+1} + (8t)^n`.
pub fn tube_volume_estimate(
    dist: &InputDistribution,
    p: &[f64],
    t: f64,
    n_constrained: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LemmaReport> {
    let d = dist.d;
    if p.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }
    if n_constrained > d || !(t > 0.0) {
        return Err(Error::InvalidConfig("tube needs t > 0 and n_constrained <= d".into()));
    }
    let nc = n_constrained as i32;
    let mut rng = SeedStream::new(seed).rng();
    let mut hits = 0u64;
    let mut r = LemmaReport::new("tube-volume", seed, n_samples as u64);
    let bound = match dist.kind {
        DistributionKind::GaussianIso => {
            let mut x = vec![0.0; n_constrained];
            for _ in 0..n_samples {
                for v in x.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                if x.iter().zip(p).all(|(xi, pi)| (xi - pi).abs() <= t) {
                    hits += 1;
                }
            }
            let exact: f64 = p[..n_constrained].iter().map(|&pi| normal_cdf(pi + t) - normal_cdf(pi - t)).product();
            r.stat("exact", exact);
            (t * (2.0 / core::f64::consts::PI).sqrt()).powi(nc)
        }
        DistributionKind::UnitBall => {
            let half = t / (d as f64).sqrt();
            let mut x = vec![0.0; d];
            for _ in 0..n_samples {
                dist.sample_into(&mut rng, &mut x);
                if x[..n_constrained].iter().zip(p).all(|(xi, pi)| (xi - pi).abs() <= half) {
                    hits += 1;
                }
            }
            2f64.powi(1 - d as i32) + (8.0 * t).powi(nc)
        }
    };
    let est = Proportion::new(hits, n_samples as u64);
    r.param("d", d as f64).param("t", t).param("n_constrained", n_constrained as f64);
    r.param("center_norm", dot(p, p).sqrt());
    r.stat("estimate", est.estimate()).stat("std_err", est.std_err());
    r.threshold("bound", bound);
    r.pass = est.estimate() <= bound + SLACK_SE * est.std_err();
    Ok(r)
}

/// Checks `λ_{d-κ+1}(Σ_U) ≥ 1/(30000 d)` with
/// `κ = ⌈κ_constant (1 + ln(1/μ̂(U)))⌉`, capped at `d`.
pub fn covariance_rank_check<F>(
    dist: &InputDistribution,
    indicator: F,
    kappa_constant: f64,
    n_samples: usize,
    seed: u64,
) -> Result<LemmaReport>
where
    F: Fn(&[f64]) -> bool,
{
    if n_samples < 1000 {
        return Err(Error::InvalidConfig("covariance check needs at least 1000 samples".into()));
    }
    let d = dist.d;
    let est = conditioned_covariance(dist, indicator, n_samples, SeedStream::new(seed))?;
    let spec = est.spectrum()?;
    let mu = est.acceptance_rate;
    let kappa_raw = (kappa_constant * (1.0 + (1.0 / mu).ln())).ceil();
    let kappa = (kappa_raw.max(1.0) as usize).min(d);
    let lambda = spec.value(d - kappa + 1);
    let floor = 1.0 / (30000.0 * d as f64);
    let mut r = LemmaReport::new("covariance-rank", seed, n_samples as u64);
    r.param("d", d as f64).param("kappa_constant", kappa_constant);
    r.stat("mu_hat", mu)
        .stat("n_accepted", est.n_accepted as f64)
        .stat("kappa", kappa as f64)
        .stat("kappa_uncapped", kappa_raw)
        .stat("lambda", lambda)
        .stat("lambda_min", spec.value(d))
        .stat("lambda_max", spec.value(1));
    r.threshold("floor", floor);
    if kappa_raw >= d as f64 {
        r.note("kappa reached d: only the top eigenvalue is constrained");
    }
    r.pass = lambda >= floor;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Low-rank separation of linear experts

fn subset_sum(experts: &[Matrix], set: &[usize]) -> Matrix {
    let (r, c) = experts[0].shape();
    let mut acc = Matrix::zeros(r, c);
    for &i in set {
        acc.add_assign(&experts[i]);
    }
    acc
}

/// `svd_tail(Σ_S M_i − Σ_{S'} M_i, κ)` for each given pair, reduced to the
/// minimum and compared with `threshold`.
pub fn linear_separation_pairs(
    experts: &[Matrix],
    pairs: &[(ActiveSet, ActiveSet)],
    kappa: usize,
    threshold: f64,
    seed: u64,
) -> Result<LemmaReport> {
    if experts.is_empty() {
        return Err(Error::InvalidConfig("no experts".into()));
    }
    let mut acc = RunningMean::new();
    let mut min_tail = f64::INFINITY;
    for (s, s2) in pairs {
        let mut diff = subset_sum(experts, s.indices());
        diff.sub_assign(&subset_sum(experts, s2.indices()));
        let tail = svd(&diff)?.tail_sq(kappa);
        acc.push(tail);
        min_tail = min_tail.min(tail);
    }
    let mut r = LemmaReport::new("linear-separation", seed, pairs.len() as u64);
    r.param("m", experts.len() as f64).param("d", experts[0].rows() as f64).param("kappa", kappa as f64);
    r.stat("min_tail", min_tail).stat("mean_tail", acc.mean());
    r.threshold("min_tail", threshold);
    r.pass = !pairs.is_empty() && min_tail >= threshold;
    Ok(r)
}

/// Samples `n_pairs` pairs `S, S'` with `|S ∩ S'| ≤ (1 − ε) k` and checks
/// that every difference `Σ_S M_i − Σ_{S'} M_i` keeps squared Frobenius mass
/// at least `c d ε` outside its top `κ` singular directions.
///
/// The experts are taken as given; with the random construction they carry
/// the `1/√(2kwd)` normalization.
#[allow(clippy::too_many_arguments)]
pub fn linear_separation_check(
    experts: &[Matrix],
    k: usize,
    epsilon: f64,
    kappa: usize,
    n_pairs: usize,
    c: f64,
    seed: u64,
) -> Result<LemmaReport> {
    let m = experts.len();
    if m == 0 || k == 0 || k > m || !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidConfig("separation check needs 1 <= k <= m and 0 < eps <= 1".into()));
    }
    let max_overlap = ((1.0 - epsilon) * k as f64 + 1e-9).floor() as usize;
    if 2 * k - max_overlap.min(k) > m {
        return Err(Error::InvalidConfig(alloc::format!(
            "no pair of {k}-subsets of [{m}] overlaps in at most {max_overlap} indices"
        )));
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut tries = 0usize;
    while pairs.len() < n_pairs {
        tries += 1;
        if tries > 1000 * n_pairs.max(1) {
            return Err(Error::InvalidConfig("could not sample admissible pairs".into()));
        }
        let s = random_subset(&mut rng, m, k);
        let s2 = random_subset(&mut rng, m, k);
        if crate::combin::intersection_size(&s, &s2) <= max_overlap && s != s2 {
            pairs.push((ActiveSet::from_sorted(s), ActiveSet::from_sorted(s2)));
        }
    }
    let d = experts[0].rows() as f64;
    let mut r = linear_separation_pairs(experts, &pairs, kappa, c * d * epsilon, seed)?;
    r.param("k", k as f64).param("epsilon", epsilon).param("c", c).param("max_overlap", max_overlap as f64);
    Ok(r)
}

/// Ratio `E_{μ|U} ‖(A₁ − A₂) x‖² / ((1/d) svd_tail(A₁ − A₂, κ))`.
///
/// The multiplicative constant relating the two sides is not pinned down,
/// so this reports the empirical ratio instead of asserting a value; the
/// check passes whenever the ratio is positive and finite.
pub fn linear_approximation_ratio<F>(
    a1: &Matrix,
    a2: &Matrix,
    dist: &InputDistribution,
    indicator: F,
    kappa: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LemmaReport>
where
    F: Fn(&[f64]) -> bool,
{
    let mut diff = a1.clone();
    diff.sub_assign(a2);
    let d = dist.d;
    let tail = svd(&diff)?.tail_sq(kappa);
    let mut rng = SeedStream::new(seed).rng();
    let mut x = vec![0.0; d];
    let mut acc = RunningMean::new();
    for _ in 0..n_samples {
        dist.sample_into(&mut rng, &mut x);
        if indicator(&x) {
            let y = diff.mul_vec(&x);
            acc.push(dot(&y, &y));
        }
    }
    if acc.count() < 2 {
        return Err(Error::LowMass { accepted: acc.count() as usize, drawn: n_samples });
    }
    let ratio = acc.mean() / (tail / d as f64);
    let mut r = LemmaReport::new("linear-approximation-ratio", seed, n_samples as u64);
    r.param("d", d as f64).param("kappa", kappa as f64);
    r.stat("conditioned_error", acc.mean())
        .stat("conditioned_error_std_err", acc.std_err())
        .stat("tail", tail)
        .stat("ratio", ratio)
        .stat("mu_hat", acc.count() as f64 / n_samples as f64);
    r.pass = ratio.is_finite() && ratio > 0.0;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Sparse ReLU incoherence

/// Expert matrices for [`relu_incoherence_check`].
#[derive(Debug, Clone, Copy)]
pub enum IncoherenceExperts<'a> {
    /// Sparse-diagonal experts; uses the exact diagonal reduction and
    /// cross-checks it against the dense path.
    Diagonal(&'a ReluExperts),
    /// Arbitrary dense `d × d` experts.
    Dense(&'a [Matrix]),
}

/// Settings for [`relu_incoherence_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceOptions {
    /// Tuple length `R`.
    pub r: usize,
    pub n_tuples: usize,
    /// Random projections tried per tuple.
    pub n_projections: usize,
    /// Pass threshold is `c d` on the stacked tail.
    pub c: f64,
}

impl Default for IncoherenceOptions {
    fn default() -> Self {
        Self { r: 8, n_tuples: 4, n_projections: 2, c: 0.1 }
    }
}

/// Target union size for a hyperedge.
pub fn union_target(k: usize) -> usize {
    750 * k
}

/// Greedily draws `r` k-subsets of `[m]` to grow their union: each new set
/// takes uncovered experts first (in random order) and fills up with covered
/// ones. Returns the sets and the union size.
pub fn greedy_union_tuple<R: Rng + ?Sized>(rng: &mut R, m: usize, k: usize, r: usize) -> (Vec<Vec<usize>>, usize) {
    let target = union_target(k);
    let mut covered = vec![false; m];
    let mut n_cov = 0;
    let mut sets = Vec::with_capacity(r);
    for _ in 0..r {
        let mut fresh: Vec<usize> = (0..m).filter(|&i| !covered[i]).collect();
        let mut old: Vec<usize> = (0..m).filter(|&i| covered[i]).collect();
        fresh.shuffle(rng);
        old.shuffle(rng);
        let mut s: Vec<usize> = fresh.into_iter().chain(old).take(k).collect();
        s.sort_unstable();
        for &i in &s {
            if !covered[i] {
                covered[i] = true;
                n_cov += 1;
            }
        }
        sets.push(s);
        if n_cov >= target {
            // Remaining slots repeat the first set, as in a padded tuple.
            while sets.len() < r {
                sets.push(sets[0].clone());
            }
            break;
        }
    }
    (sets, n_cov)
}

/// Stacked-tail statistic for sparse ReLU experts.
///
/// For each sampled tuple `(S_1, …, S_R)` with large union, let
/// `D_j = Σ_{l ∈ S_j} M_l`, `κ = ⌈kw/10000⌉` and `p = kw`. The statistic is
/// `Σ_{i > κ + p} λ_i(Σ_j D_j^T D_j)`, which lower-bounds
/// `Σ_j Σ_{i > κ} σ_i²(D_j Π^⊥)` for every projection `Π` of rank `p`. For
/// diagonal experts it is computed exactly from the diagonal, cross-checked
/// against the dense eigen path, and compared with the counting bound
/// `s² (unique indices − p − κ)`. Sampled random projections check the
/// stacking inequality directly.
pub fn relu_incoherence_check(
    experts: IncoherenceExperts<'_>,
    k: usize,
    w: usize,
    opts: &IncoherenceOptions,
    seed: u64,
) -> Result<LemmaReport> {
    let (m, d) = match experts {
        IncoherenceExperts::Diagonal(e) => (e.m(), e.d),
        IncoherenceExperts::Dense(ms) => (ms.len(), ms.first().map_or(0, Matrix::rows)),
    };
    if m == 0 || k == 0 || k > m || opts.r == 0 {
        return Err(Error::InvalidConfig("incoherence check needs experts, 1 <= k <= m and R >= 1".into()));
    }
    let p = k * w;
    let kappa = (k * w).div_ceil(10_000);
    let target = union_target(k);
    let reachable = m.min(opts.r * k);
    let stream = SeedStream::new(seed);
    let mut rng = stream.fork_str("tuples").rng();
    let mut prng = stream.fork_str("projections").rng();
    let mut min_stat = f64::INFINITY;
    let mut min_union = usize::MAX;
    let mut worst_cross = 0.0f64;
    let mut worst_stacking = f64::INFINITY;
    let mut count_ok = true;
    let mut min_unique = usize::MAX;
    let dense_of = |set: &[usize]| -> Matrix {
        match experts {
            IncoherenceExperts::Diagonal(e) => Matrix::diag(&e.subset_diagonal(set)),
            IncoherenceExperts::Dense(ms) => subset_sum(ms, set),
        }
    };
    for _ in 0..opts.n_tuples {
        let (sets, union) = greedy_union_tuple(&mut rng, m, k, opts.r);
        min_union = min_union.min(union);
        let blocks: Vec<Matrix> = sets.iter().map(|s| dense_of(s)).collect();
        let mut gram = Matrix::zeros(d, d);
        for b in &blocks {
            gram.add_assign(&b.gram());
        }
        let general = sym_eig(&gram)?.tail_sum(kappa + p);
        let stat = match experts {
            IncoherenceExperts::Diagonal(e) => {
                let mut eig = vec![0.0; d];
                for s in &sets {
                    for (acc, v) in eig.iter_mut().zip(e.subset_diagonal(s)) {
                        *acc += v * v;
                    }
                }
                let unique = eig.iter().filter(|v| **v > 0.0).count();
                min_unique = min_unique.min(unique);
                eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let diag_stat: f64 = eig.iter().skip(kappa + p).sum();
                let count_bound = e.scale * e.scale * unique.saturating_sub(p + kappa) as f64;
                if diag_stat < count_bound * (1.0 - 1e-12) {
                    count_ok = false;
                }
                worst_cross = worst_cross.max((general - diag_stat).abs() / diag_stat.abs().max(1.0));
                diag_stat
            }
            IncoherenceExperts::Dense(_) => general,
        };
        if p < d {
            for _ in 0..opts.n_projections {
                let q = random_orthonormal(&mut prng, d, p);
                let mut direct = 0.0;
                for b in &blocks {
                    direct += svd(&project_out_columns(b, &q))?.tail_sq(kappa);
                }
                worst_stacking = worst_stacking.min(direct - stat);
            }
        }
        min_stat = min_stat.min(stat);
    }
    let threshold = opts.c * d as f64;
    let mut r = LemmaReport::new("relu-incoherence", seed, opts.n_tuples as u64);
    r.param("m", m as f64)
        .param("k", k as f64)
        .param("w", w as f64)
        .param("d", d as f64)
        .param("R", opts.r as f64)
        .param("R_proof", 1e6)
        .param("c", opts.c);
    r.stat("min_stacked_tail", min_stat)
        .stat("min_union", min_union as f64)
        .stat("kappa", kappa as f64)
        .stat("projection_rank", p as f64);
    if worst_stacking.is_finite() {
        r.stat("min_direct_minus_stacked", worst_stacking);
    }
    r.threshold("stacked_tail", threshold).threshold("union", target as f64);
    if reachable < target {
        r.note(alloc::format!(
            "union target {target} unreachable (at most {reachable}); largest achievable union used"
        ));
    }
    let mut pass = min_stat >= threshold;
    if let IncoherenceExperts::Diagonal(_) = experts {
        r.stat("min_unique_indices", min_unique as f64).stat("max_cross_path_rel_diff", worst_cross);
        pass &= worst_cross <= 1e-8 && count_ok;
        if !count_ok {
            r.note("diagonal tail fell below the counting bound");
        }
    }
    if worst_stacking.is_finite() {
        let tol = 1e-9 * min_stat.abs().max(1.0);
        pass &= worst_stacking >= -tol;
    }
    r.pass = pass;
    Ok(r)
}

/// Unique elements `X_n` among `n` uniform draws from `[d]`: compares the
/// mean with `d (1 − (1 − 1/d)^n)` and `P[X_n ≤ min(n,d)/12]` with
/// `exp(−min(n,d)/18)`.
pub fn unique_count_tail(n: usize, d: usize, n_trials: usize, seed: u64) -> Result<LemmaReport> {
    if d == 0 {
        return Err(Error::InvalidConfig("d must be positive".into()));
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut stamp = vec![u32::MAX; d];
    let cut = n.min(d) as f64 / 12.0;
    let mut acc = RunningMean::new();
    let mut tail_hits = 0u64;
    for trial in 0..n_trials {
        let tag = trial as u32;
        let mut unique = 0usize;
        for _ in 0..n {
            let i = rng.random_range(0..d);
            if stamp[i] != tag {
                stamp[i] = tag;
                unique += 1;
            }
        }
        acc.push(unique as f64);
        if unique as f64 <= cut {
            tail_hits += 1;
        }
    }
    let expected = expected_unique(n, d);
    let tail = Proportion::new(tail_hits, n_trials as u64);
    let bound = (-(n.min(d) as f64) / 18.0).exp();
    let mut r = LemmaReport::new("unique-count", seed, n_trials as u64);
    r.param("n", n as f64).param("d", d as f64);
    r.stat("mean_unique", acc.mean())
        .stat("mean_std_err", acc.std_err())
        .stat("expected_unique", expected)
        .stat("tail", tail.estimate())
        .stat("tail_std_err", tail.std_err());
    r.threshold("tail_bound", bound).threshold("tail_cut", cut);
    let mean_ok = (acc.mean() - expected).abs() <= SLACK_SE * acc.std_err() + 1e-9 * expected.max(1.0);
    r.pass = mean_ok && tail.estimate() <= bound + SLACK_SE * tail.std_err();
    Ok(r)
}

/// `d (1 − (1 − 1/d)^n)`.
pub fn expected_unique(n: usize, d: usize) -> f64 {
    let d = d as f64;
    // ln1p/expm1 keep precision for large d.
    -d * libm::expm1(n as f64 * libm::log1p(-1.0 / d))
}

/// Monte-Carlo check of `E‖f(x)‖² ≤ 1`.
pub fn norm_upper_check(layer: &MoeLayer, dist: &InputDistribution, n_samples: usize, seed: u64) -> LemmaReport {
    let acc = layer.mean_sq_norm(dist, n_samples, SeedStream::new(seed));
    let mut r = LemmaReport::new("norm-upper", seed, n_samples as u64);
    let c = &layer.config;
    r.param("m", c.m as f64).param("k", c.k as f64).param("w", c.w as f64).param("d", c.d as f64);
    r.stat("mean_sq_norm", acc.mean()).stat("std_err", acc.std_err());
    r.threshold("bound", 1.0);
    r.pass = acc.mean() <= 1.0 + SLACK_SE * acc.std_err();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{make_config, Activation, Gating};

    fn fixed_router(rows: &[&[f64]], k: usize) -> MoeLayer {
        let d = rows[0].len();
        let cfg = make_config(rows.len(), k, 1, d, Activation::Linear, Gating::EqualHard, false).unwrap();
        let mut layer = MoeLayer::zeros(cfg).unwrap();
        for (i, r) in rows.iter().enumerate() {
            layer.routing.row_mut(i).copy_from_slice(r);
        }
        layer
    }

    #[test]
    fn census_of_opposite_vectors_is_half_half() {
        let layer = fixed_router(&[&[1.0, 0.0], &[-1.0, 0.0]], 1);
        let n = 100_000;
        let census = region_census(&layer, &InputDistribution::gaussian(2), n, 1);
        assert_eq!(census.total_hits(), n as u64);
        assert_eq!(census.n_regions_observed, 2);
        for r in &census.regions {
            assert!((r.measure - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        }
    }

    #[test]
    fn census_of_three_coplanar_vectors_is_thirds() {
        let s = 3f64.sqrt() / 2.0;
        let layer = fixed_router(&[&[1.0, 0.0, 0.0], &[-0.5, s, 0.0], &[-0.5, -s, 0.0]], 1);
        let n = 90_000;
        let census = region_census(&layer, &InputDistribution::ball(3), n, 2);
        let total: f64 = census.regions.iter().map(|r| r.measure).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for r in &census.regions {
            let se = (2.0 / 9.0 / n as f64).sqrt();
            assert!((r.measure - 1.0 / 3.0).abs() < 3.0 * se, "{}", r.measure);
        }
    }

    #[test]
    fn census_blocks_merge_in_any_order() {
        let layer = fixed_router(&[&[1.0, 0.2], &[-0.3, 1.0], &[0.1, -1.0], &[-1.0, -0.4]], 2);
        let dist = InputDistribution::gaussian(2);
        let n = 3 * SAMPLE_BLOCK + 17;
        let serial = region_census(&layer, &dist, n, 5);
        let mut rev = CensusCounts::new(4, 2);
        for b in (0..census_block_count(n)).rev() {
            rev.merge(&census_block(&layer, &dist, n, 5, b));
        }
        assert_eq!(serial, rev.finish());
    }

    #[test]
    fn balance_fails_with_all_mass_in_one_region() {
        let mut counts = CensusCounts::new(8, 2);
        for _ in 0..10_000 {
            counts.add(&[0, 1]);
        }
        let census = counts.finish();
        assert_eq!(census.balance_count, 1);
        let report = check_routing_balance(&census, 0);
        assert!(!report.pass);
        assert_eq!(report.thresholds["min_balance_count"], 4.0);
    }

    #[test]
    fn order_stats_at_zero_match_symmetry() {
        for (m, k) in [(6, 2), (4, 1), (5, 3)] {
            let r = order_stat_probability(m, k, 0.0, 200_000, 3).unwrap();
            let exact = 1.0 / binomial_f64(m as u64, k as u64);
            assert!((r.stats["estimate"] - exact).abs() <= 3.0 * r.stats["std_err"], "{m} {k}");
            assert!(r.pass);
        }
        assert!(order_stat_probability(40, 2, 0.0, 10, 0).is_err());
    }

    #[test]
    fn order_stats_two_experts_closed_form() {
        // X1 - X2 ~ N(δ, 2): f(δ) = Φ(δ/√2).
        let delta = 0.7;
        let r = order_stat_probability(2, 1, delta, 400_000, 4).unwrap();
        let exact = normal_cdf(delta / 2f64.sqrt());
        assert!((r.stats["estimate"] - exact).abs() <= 3.0 * r.stats["std_err"]);
    }

    #[test]
    fn chi2_tail_cases() {
        let r = chi2_tail_check(100, 1.0, 100_000, 1);
        assert!(r.pass);
        assert!(r.stats["lower_tail"] < (-1f64).exp());
        let z = chi2_tail_check(10, 0.0, 1000, 1);
        assert_eq!(z.thresholds["bound"], 1.0);
        assert!(z.pass);
        assert!(chi2_tail_check(1, 5.0, 200_000, 2).pass);
    }

    #[test]
    fn gaussian_tube_matches_erf() {
        let dist = InputDistribution::gaussian(4);
        let r = tube_volume_estimate(&dist, &[0.0; 4], 0.1, 1, 400_000, 7).unwrap();
        let exact = libm::erf(0.1 / 2f64.sqrt());
        assert!((r.stats["exact"] - exact).abs() < 1e-14);
        assert!((r.stats["estimate"] - exact).abs() <= 3.0 * r.stats["std_err"]);
        assert!(exact <= r.thresholds["bound"]);
        assert!(r.pass);
        let none = tube_volume_estimate(&dist, &[0.0; 4], 0.1, 0, 100, 7).unwrap();
        assert_eq!(none.stats["estimate"], 1.0);
        assert!(none.pass);
    }

    #[test]
    fn ball_tube_is_bounded() {
        let r = tube_volume_estimate(&InputDistribution::ball(64), &[0.0; 64], 0.05, 2, 50_000, 8).unwrap();
        assert!(r.pass);
        assert!((r.thresholds["bound"] - (2f64.powi(-63) + 0.16)).abs() < 1e-15);
    }

    #[test]
    fn covariance_rank_cases() {
        let d = 16;
        let full = covariance_rank_check(&InputDistribution::gaussian(d), |_| true, 10.0, 50_000, 1).unwrap();
        assert!(full.pass);
        assert!((full.stats["lambda_min"] - 1.0 / d as f64).abs() < 0.1 / d as f64);
        let slab = covariance_rank_check(&InputDistribution::gaussian(d), |x| x[0].abs() <= 1e-3, 10.0, 2000, 1);
        match slab {
            Err(Error::LowMass { .. }) => {}
            Ok(r) => assert_eq!(r.stats["kappa"], d as f64),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn duplicated_experts_fail_separation() {
        let e = Matrix::identity(4);
        let other = Matrix::diag(&[1.0, 2.0, 0.0, 0.0]);
        let experts = [e.clone(), e, other];
        let pair = (ActiveSet::new(vec![0, 2]).unwrap(), ActiveSet::new(vec![1, 2]).unwrap());
        let r = linear_separation_pairs(&experts, &[pair], 0, 1e-6, 0).unwrap();
        assert_eq!(r.stats["min_tail"], 0.0);
        assert!(!r.pass);
    }

    #[test]
    fn unique_count_edges() {
        let one = unique_count_tail(1, 50, 100, 1).unwrap();
        assert_eq!(one.stats["mean_unique"], 1.0);
        assert!(one.pass);
        let single = unique_count_tail(30, 1, 100, 1).unwrap();
        assert_eq!(single.stats["mean_unique"], 1.0);
        assert!(single.pass);
        assert!((expected_unique(100, 100) - 63.396_765_872_677_65).abs() < 1e-9);
    }

    #[test]
    fn diagonal_indicator_rank() {
        // d = 10, k = 1, two experts with two indices each covering 4 indices.
        let experts = ReluExperts::from_indices(10, 1, 4, vec![vec![1, 3], vec![5, 7]]).unwrap();
        let opts = IncoherenceOptions { r: 2, n_tuples: 1, n_projections: 0, c: 0.0 };
        let r = relu_incoherence_check(IncoherenceExperts::Diagonal(&experts), 1, 1, &opts, 0).unwrap();
        assert_eq!(r.stats["min_unique_indices"], 4.0);
        assert!(r.notes.iter().any(|n| n.contains("unreachable")));
        assert!(r.stats["max_cross_path_rel_diff"] <= 1e-12);
    }
}

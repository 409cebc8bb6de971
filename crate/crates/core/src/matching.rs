//! Fractional matchings over expert-configuration graphs and the
//! constant-activation error certificate.
//!
//! Vertices are configurations `S` carrying capacity `μ̂(U_S ∩ V_i)`; edges
//! join configurations that differ enough. A fractional matching assigns
//! weights `ξ_e ≥ 0` with per-vertex load at most the capacity. Any such
//! matching turns into a lower bound on `E‖f − f'‖²`: on each cell the two
//! errors of an edge satisfy `err(S,i) + err(S',i) ≥ ½‖u_S − u_{S'}‖²`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::combin::{binomial, binomial_f64, log2_big, log2_binomial_lgamma, symmetric_difference_size};
use crate::error::{Error, Result};
use crate::lemmas::LemmaReport;
use crate::linalg::dist_sq;
use crate::moe::{ActiveSet, Activation, Gating, InputDistribution, MoeLayer};
use crate::rng::SeedStream;
use crate::stats::RunningMean;

/// Loads within this of the capacity count as saturated.
pub const SATURATION_TOL: f64 = 1e-12;

/// Largest edge count accepted by [`exact_fractional_matching`].
pub const EXACT_LP_MAX_EDGES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum OverlapRule {
    /// Edge `{S, S'}` iff `|S Δ S'| ≥ threshold`.
    Pairwise { threshold: usize },
    /// Hyperedge on up to `r` configurations whose union has at least
    /// `union_threshold` experts.
    Hypergraph { r: usize, union_threshold: usize },
}

impl OverlapRule {
    /// `|S Δ S'| ≥ ⌈c' k⌉` (at least 1).
    pub fn pairwise(c_prime: f64, k: usize) -> Self {
        OverlapRule::Pairwise { threshold: ((c_prime * k as f64).ceil() as usize).max(1) }
    }

    /// Union of at least `750k` experts over `r` configurations.
    pub fn hypergraph(r: usize, k: usize) -> Self {
        OverlapRule::Hypergraph { r, union_threshold: crate::lemmas::union_target(k) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub set: ActiveSet,
    pub capacity: f64,
}

/// A candidate vertex: its joint mass `μ̂(U_S ∩ V_i)` and region mass `μ̂(U_S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub set: ActiveSet,
    pub joint_mass: f64,
    pub region_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigGraph {
    pub m: usize,
    pub k: usize,
    /// Sorted by configuration.
    pub vertices: Vec<Vertex>,
    /// Vertex index lists, each sorted; in lexicographic order.
    pub edges: Vec<Vec<usize>>,
    pub rule: OverlapRule,
    /// Threshold actually applied (the union target may be lowered to what
    /// is reachable).
    pub effective_threshold: usize,
    pub degraded: bool,
}

impl ConfigGraph {
    /// Graph from explicit vertices (sorted here) and the rule; no vertex filter.
    pub fn from_vertices(m: usize, k: usize, mut vertices: Vec<Vertex>, rule: OverlapRule) -> Result<Self> {
        if vertices.iter().any(|v| !(v.capacity >= 0.0) || !v.capacity.is_finite()) {
            return Err(Error::InvalidConfig("capacities must be finite and nonnegative".into()));
        }
        vertices.sort_by(|a, b| a.set.cmp(&b.set));
        let mut g = Self { m, k, vertices, edges: Vec::new(), rule, effective_threshold: 0, degraded: false };
        match rule {
            OverlapRule::Pairwise { threshold } => {
                g.effective_threshold = threshold;
                let n = g.vertices.len();
                for a in 0..n {
                    for b in (a + 1)..n {
                        if g.vertices[a].set.symmetric_difference_size(&g.vertices[b].set) >= threshold {
                            g.edges.push(vec![a, b]);
                        }
                    }
                }
            }
            OverlapRule::Hypergraph { r, union_threshold } => {
                let mut all = vec![false; m];
                g.vertices.iter().flat_map(|v| v.set.indices()).for_each(|&i| all[i] = true);
                let reachable = all.iter().filter(|b| **b).count().min(r * k);
                g.effective_threshold = union_threshold.min(reachable);
                g.degraded = g.effective_threshold < union_threshold;
                let active: Vec<usize> = (0..g.vertices.len()).collect();
                let mut seen: Vec<Vec<usize>> = Vec::new();
                for &seed_v in &active {
                    if let Some(e) = g.grow_hyperedge(seed_v, &active) {
                        if !seen.contains(&e) {
                            seen.push(e);
                        }
                    }
                }
                seen.sort();
                g.edges = seen;
            }
        }
        Ok(g)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Whether the vertex indices in `edge` satisfy the overlap rule.
    pub fn is_edge(&self, edge: &[usize]) -> bool {
        match self.rule {
            OverlapRule::Pairwise { threshold } => {
                edge.len() == 2
                    && self.vertices[edge[0]].set.symmetric_difference_size(&self.vertices[edge[1]].set) >= threshold
            }
            OverlapRule::Hypergraph { r, .. } => {
                !edge.is_empty() && edge.len() <= r && self.union_size(edge) >= self.effective_threshold
            }
        }
    }

    fn union_size(&self, members: &[usize]) -> usize {
        let mut seen = vec![false; self.m];
        let mut n = 0;
        for &v in members {
            for &i in self.vertices[v].set.indices() {
                if !seen[i] {
                    seen[i] = true;
                    n += 1;
                }
            }
        }
        n
    }

    /// Greedy max-coverage growth from `start` using vertices in `pool`:
    /// repeatedly adds the vertex covering the most new experts (lowest index
    /// on ties) until the union reaches the threshold or `r` members.
    fn grow_hyperedge(&self, start: usize, pool: &[usize]) -> Option<Vec<usize>> {
        let OverlapRule::Hypergraph { r, .. } = self.rule else { return None };
        let mut covered = vec![false; self.m];
        let mut members = vec![start];
        let mut n_cov = 0;
        for &i in self.vertices[start].set.indices() {
            covered[i] = true;
            n_cov += 1;
        }
        while n_cov < self.effective_threshold && members.len() < r {
            let mut best = None;
            let mut best_gain = 0;
            for &v in pool {
                if members.contains(&v) {
                    continue;
                }
                let gain = self.vertices[v].set.indices().iter().filter(|&&i| !covered[i]).count();
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(v);
                }
            }
            let v = best?;
            for &i in self.vertices[v].set.indices() {
                if !covered[i] {
                    covered[i] = true;
                    n_cov += 1;
                }
            }
            members.push(v);
        }
        if n_cov >= self.effective_threshold {
            members.sort_unstable();
            Some(members)
        } else {
            None
        }
    }

    /// `max_v |{u ≠ v : no edge contains both u and v}|` (pairwise graphs).
    pub fn max_non_neighbors(&self) -> usize {
        let n = self.vertices.len();
        let mut deg = vec![0usize; n];
        for e in &self.edges {
            for &v in e {
                deg[v] += 1;
            }
        }
        deg.iter().map(|d| n - 1 - d.min(&(n - 1))).max().unwrap_or(0)
    }
}

/// Builds the graph for one region `V_i` from candidates, keeping
/// configurations with `μ̂(U_S) ≤ 20 / C(m, k)` and positive joint mass.
pub fn build_config_graph(m: usize, k: usize, candidates: &[Candidate], rule: OverlapRule) -> Result<ConfigGraph> {
    let cap = 20.0 / binomial_f64(m as u64, k as u64);
    let vertices: Vec<Vertex> = candidates
        .iter()
        .filter(|c| c.region_mass <= cap && c.joint_mass > 0.0)
        .map(|c| Vertex { set: c.set.clone(), capacity: c.joint_mass })
        .collect();
    if vertices.is_empty() {
        return Err(Error::EmptyCertificate);
    }
    ConfigGraph::from_vertices(m, k, vertices, rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSolution {
    /// Edges carrying weight (vertex index lists).
    pub edges: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub loads: Vec<f64>,
    pub saturated: Vec<bool>,
    pub total: f64,
}

impl MatchingSolution {
    fn empty(n: usize) -> Self {
        Self { edges: Vec::new(), weights: Vec::new(), loads: vec![0.0; n], saturated: vec![false; n], total: 0.0 }
    }

    pub fn unsaturated_count(&self) -> usize {
        self.saturated.iter().filter(|s| !**s).count()
    }

    fn refresh(&mut self, graph: &ConfigGraph) {
        self.loads = vec![0.0; graph.n_vertices()];
        for (e, &xi) in self.edges.iter().zip(&self.weights) {
            for &v in e {
                self.loads[v] += xi;
            }
        }
        self.saturated = graph
            .vertices
            .iter()
            .zip(&self.loads)
            .map(|(v, &l)| v.capacity - l <= SATURATION_TOL)
            .collect();
        self.total = self.weights.iter().sum();
    }

    /// Whether any edge of `graph` has all endpoints unsaturated.
    pub fn improvable_edge(&self, graph: &ConfigGraph) -> Option<usize> {
        graph.edges.iter().position(|e| e.iter().all(|&v| !self.saturated[v]))
    }

    /// Whether loads respect capacities (within the saturation tolerance).
    pub fn is_feasible(&self, graph: &ConfigGraph) -> bool {
        self.weights.iter().all(|&x| x >= 0.0)
            && graph.vertices.iter().zip(&self.loads).all(|(v, &l)| l <= v.capacity + SATURATION_TOL)
    }
}

/// Greedy maximal fractional matching: edges in lexicographic order, each
/// receiving the smallest residual capacity among its endpoints, repeated
/// until no edge changes. Hypergraphs are then augmented with hyperedges
/// grown greedily among the still-unsaturated vertices.
pub fn greedy_fractional_matching(graph: &ConfigGraph) -> MatchingSolution {
    let n = graph.n_vertices();
    let mut residual: Vec<f64> = graph.vertices.iter().map(|v| v.capacity).collect();
    let mut weights: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let assign = |edge: &[usize], residual: &mut Vec<f64>, weights: &mut BTreeMap<Vec<usize>, f64>| -> bool {
        let (arg, xi) = edge
            .iter()
            .map(|&v| (v, residual[v]))
            .fold((usize::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        if !(xi > SATURATION_TOL) {
            return false;
        }
        for &v in edge {
            residual[v] -= xi;
        }
        residual[arg] = 0.0;
        *weights.entry(edge.to_vec()).or_insert(0.0) += xi;
        true
    };
    loop {
        let mut changed = false;
        for e in &graph.edges {
            changed |= assign(e, &mut residual, &mut weights);
        }
        if !changed {
            break;
        }
    }
    if let OverlapRule::Hypergraph { .. } = graph.rule {
        loop {
            let pool: Vec<usize> = (0..n).filter(|&v| residual[v] > SATURATION_TOL).collect();
            let found = pool.iter().find_map(|&s| graph.grow_hyperedge(s, &pool));
            match found {
                Some(e) => {
                    assign(&e, &mut residual, &mut weights);
                }
                None => break,
            }
        }
    }
    let mut sol = MatchingSolution::empty(n);
    for (e, xi) in weights {
        sol.edges.push(e);
        sol.weights.push(xi);
    }
    sol.refresh(graph);
    sol
}

/// Optimal fractional matching by dense simplex (Bland's rule), for graphs
/// with at most [`EXACT_LP_MAX_EDGES`] edges.
pub fn exact_fractional_matching(graph: &ConfigGraph) -> Result<MatchingSolution> {
    let ne = graph.edges.len();
    let nv = graph.n_vertices();
    if ne > EXACT_LP_MAX_EDGES {
        return Err(Error::InvalidConfig(alloc::format!(
            "exact LP limited to {EXACT_LP_MAX_EDGES} edges (got {ne})"
        )));
    }
    // Tableau rows: one per vertex constraint, then the objective row.
    // Columns: edge variables, slacks, right-hand side.
    let cols = ne + nv + 1;
    let mut t = vec![0.0; (nv + 1) * cols];
    for (j, e) in graph.edges.iter().enumerate() {
        for &v in e {
            t[v * cols + j] += 1.0;
        }
        t[nv * cols + j] = -1.0;
    }
    for v in 0..nv {
        t[v * cols + ne + v] = 1.0;
        t[v * cols + cols - 1] = graph.vertices[v].capacity;
    }
    let mut basis: Vec<usize> = (ne..ne + nv).collect();
    let eps = 1e-12;
    for _ in 0..100_000 {
        let Some(enter) = (0..ne + nv).find(|&j| t[nv * cols + j] < -eps) else { break };
        let mut leave = None;
        let mut best = f64::INFINITY;
        for r in 0..nv {
            let a = t[r * cols + enter];
            if a > eps {
                let ratio = t[r * cols + cols - 1] / a;
                let better = match leave {
                    None => true,
                    Some(l) => ratio < best - eps || (ratio <= best + eps && basis[r] < basis[l]),
                };
                if better {
                    best = ratio;
                    leave = Some(r);
                }
            }
        }
        let Some(lr) = leave else {
            return Err(Error::InvalidConfig("unbounded matching LP".into()));
        };
        let piv = t[lr * cols + enter];
        for c in 0..cols {
            t[lr * cols + c] /= piv;
        }
        for r in 0..=nv {
            if r == lr {
                continue;
            }
            let f = t[r * cols + enter];
            if f != 0.0 {
                for c in 0..cols {
                    t[r * cols + c] -= f * t[lr * cols + c];
                }
            }
        }
        basis[lr] = enter;
    }
    let mut sol = MatchingSolution::empty(nv);
    for (r, &b) in basis.iter().enumerate() {
        if b < ne {
            let xi = t[r * cols + cols - 1].max(0.0);
            if xi > 0.0 {
                sol.edges.push(graph.edges[b].clone());
                sol.weights.push(xi);
            }
        }
    }
    let mut order: Vec<usize> = (0..sol.edges.len()).collect();
    order.sort_by(|&a, &b| sol.edges[a].cmp(&sol.edges[b]));
    sol.edges = order.iter().map(|&i| sol.edges[i].clone()).collect();
    sol.weights = order.iter().map(|&i| sol.weights[i]).collect();
    sol.refresh(graph);
    Ok(sol)
}

// ---------------------------------------------------------------------------
// Certificate

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateOptions {
    /// Edge rule `|S Δ S'| ≥ ⌈c' k⌉`.
    pub c_prime: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self { c_prime: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBreakdown {
    /// The region `V_i` of the approximating layer, labeled by its configuration.
    pub region: ActiveSet,
    pub mass: f64,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub matched_total: f64,
    pub unsaturated: usize,
    pub bound: f64,
    pub floor_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub regions_f: usize,
    pub regions_f_prime: usize,
    pub cells: usize,
    pub vertices: usize,
    pub edges: usize,
    pub vertex_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub mc_error: f64,
    pub mc_stderr: f64,
    /// `Σ_i Σ_e ξ_e ½ ‖u_S − u_{S'}‖²` with the actual expert vectors.
    pub bound: f64,
    /// Same matching weighted by `½ |S Δ S'| / (4k)`.
    pub floor_bound: f64,
    /// `Σ_cells μ̂(U_S ∩ V_i) · err(S, i)`, equal to `mc_error` up to rounding.
    pub cell_error: f64,
    pub per_region_breakdown: Vec<RegionBreakdown>,
    pub graph_stats: GraphStats,
    pub seed: u64,
    pub n_samples: u64,
    pub c_prime: f64,
    /// `mc_error + 3 mc_stderr ≥ bound`.
    pub sound: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    hits: u64,
    err_sum: f64,
}

fn check_constant_layer(layer: &MoeLayer, what: &str) -> Result<()> {
    if layer.config.activation != Activation::Constant || layer.config.gating != Gating::EqualHard {
        return Err(Error::InvalidConfig(alloc::format!(
            "{what} must use constant activation with equal-weight hard gating"
        )));
    }
    Ok(())
}

/// Lower-bounds `E‖f − f'‖²` for two constant-activation layers.
///
/// One Monte-Carlo pass routes every sample through both layers, giving the
/// joint masses `μ̂(U_S ∩ V_i)` and the error estimate from the same draws.
/// For each region `V_i` of `f'` the configuration graph is matched
/// greedily and every edge `{S, S'}` contributes `ξ_e ½ ‖u_S − u_{S'}‖²`.
pub fn error_lower_bound_constant(
    f: &MoeLayer,
    f_prime: &MoeLayer,
    dist: &InputDistribution,
    n_samples: usize,
    seed: u64,
    opts: &CertificateOptions,
) -> Result<Certificate> {
    check_constant_layer(f, "f")?;
    check_constant_layer(f_prime, "f'")?;
    let d = f.config.d;
    if f_prime.config.d != d || dist.d != d {
        return Err(Error::DimensionMismatch { expected: d, got: f_prime.config.d });
    }
    let (m, k) = (f.config.m, f.config.k);
    let mut cells: BTreeMap<Vec<usize>, BTreeMap<Vec<usize>, Cell>> = BTreeMap::new();
    let mut ws = f.workspace();
    let mut ws2 = f_prime.workspace();
    let mut x = vec![0.0; d];
    let (mut y, mut y2) = (vec![0.0; d], vec![0.0; d]);
    let mut acc = RunningMean::new();
    let mut rng = SeedStream::new(seed).rng();
    for _ in 0..n_samples {
        dist.sample_into(&mut rng, &mut x);
        f.forward_with(&x, &mut ws, &mut y);
        f_prime.forward_with(&x, &mut ws2, &mut y2);
        let err = dist_sq(&y, &y2);
        acc.push(err);
        let row = match cells.get_mut(ws2.order.as_slice()) {
            Some(r) => r,
            None => cells.entry(ws2.order.clone()).or_default(),
        };
        let cell = match row.get_mut(ws.order.as_slice()) {
            Some(c) => c,
            None => row.entry(ws.order.clone()).or_default(),
        };
        cell.hits += 1;
        cell.err_sum += err;
    }
    let n = n_samples as f64;
    let mut region_mass: BTreeMap<&[usize], f64> = BTreeMap::new();
    for row in cells.values() {
        for (s, c) in row {
            *region_mass.entry(s.as_slice()).or_insert(0.0) += c.hits as f64 / n;
        }
    }
    let u: Vec<Vec<f64>> = (0..m).map(|j| f.effective_vector(j)).collect();
    let u_of = |set: &ActiveSet| crate::constructions::subset_vector(&u, set.indices());
    let rule = OverlapRule::pairwise(opts.c_prime, k);
    let mut breakdown = Vec::new();
    let mut stats = GraphStats {
        regions_f: region_mass.len(),
        regions_f_prime: cells.len(),
        cells: cells.values().map(BTreeMap::len).sum(),
        vertices: 0,
        edges: 0,
        vertex_mass: 0.0,
    };
    let mut cell_error = 0.0;
    let (mut bound, mut floor_bound) = (0.0, 0.0);
    for (region, row) in &cells {
        let candidates: Vec<Candidate> = row
            .iter()
            .map(|(s, c)| Candidate {
                set: ActiveSet::from_sorted(s.clone()),
                joint_mass: c.hits as f64 / n,
                region_mass: region_mass[s.as_slice()],
            })
            .collect();
        for c in row.values() {
            cell_error += c.err_sum / n;
        }
        let graph = match build_config_graph(m, k, &candidates, rule) {
            Ok(g) => g,
            Err(Error::EmptyCertificate) => continue,
            Err(e) => return Err(e),
        };
        let sol = greedy_fractional_matching(&graph);
        let vectors: Vec<Vec<f64>> = graph.vertices.iter().map(|v| u_of(&v.set)).collect();
        let (mut b, mut fb) = (0.0, 0.0);
        for (e, &xi) in sol.edges.iter().zip(&sol.weights) {
            let (p, q) = (e[0], e[1]);
            b += xi * 0.5 * dist_sq(&vectors[p], &vectors[q]);
            let sd = symmetric_difference_size(graph.vertices[p].set.indices(), graph.vertices[q].set.indices());
            fb += xi * 0.5 * sd as f64 / (4.0 * k as f64);
        }
        stats.vertices += graph.n_vertices();
        stats.edges += graph.edges.len();
        stats.vertex_mass += graph.vertices.iter().map(|v| v.capacity).sum::<f64>();
        breakdown.push(RegionBreakdown {
            region: ActiveSet::from_sorted(region.clone()),
            mass: row.values().map(|c| c.hits as f64).sum::<f64>() / n,
            n_vertices: graph.n_vertices(),
            n_edges: graph.edges.len(),
            matched_total: sol.total,
            unsaturated: sol.unsaturated_count(),
            bound: b,
            floor_bound: fb,
        });
        bound += b;
        floor_bound += fb;
    }
    if breakdown.is_empty() {
        return Err(Error::EmptyCertificate);
    }
    Ok(Certificate {
        mc_error: acc.mean(),
        mc_stderr: acc.std_err(),
        bound,
        floor_bound,
        cell_error,
        per_region_breakdown: breakdown,
        graph_stats: stats,
        seed,
        n_samples: n_samples as u64,
        c_prime: opts.c_prime,
        sound: acc.mean() + crate::lemmas::SLACK_SE * acc.std_err() >= bound,
    })
}

// ---------------------------------------------------------------------------
// Counting

/// Exact comparison of configuration counts for `(m, k)` and `(m', k')`:
///
/// * `small`: `C(m', k') < c · C(m, k)^{0.99}` (compared in log2);
/// * `packing`: `1000 · C(m', k') · C(m, ⌊c'k⌋) · C(k, ⌊c'k⌋) ≤ C(m, k)`.
///
/// The report passes when the implication `small ⇒ packing` holds on the
/// instance and the big-integer and log-gamma routes to `log2 C(m, k)` agree.
pub fn entropy_gap_check(m: u64, k: u64, m_prime: u64, k_prime: u64, c: f64, c_prime: f64) -> LemmaReport {
    let big = binomial(m, k);
    let small_side = binomial(m_prime, k_prime);
    let j = (c_prime * k as f64).floor() as u64;
    let denom = binomial(m, j) * binomial(k, j);
    let lhs: BigUint = small_side.clone() * 1000u32 * &denom;
    let packing = lhs <= big;
    let log_big = log2_big(&big);
    let log_small = log2_big(&small_side);
    let small = log_small < c.log2() + 0.99 * log_big;
    let lg = log2_binomial_lgamma(m, k);
    let route_gap = (lg - log_big).abs() / log_big.abs().max(1.0);
    let mut r = LemmaReport::new("entropy-gap", 0, 1);
    r.param("m", m as f64)
        .param("k", k as f64)
        .param("m_prime", m_prime as f64)
        .param("k_prime", k_prime as f64)
        .param("c", c)
        .param("c_prime", c_prime);
    r.stat("log2_configs", log_big)
        .stat("log2_configs_prime", log_small)
        .stat("log2_denominator", log2_big(&denom))
        .stat("floor_c_prime_k", j as f64)
        .stat("configs_prime_small", if small { 1.0 } else { 0.0 })
        .stat("packing_holds", if packing { 1.0 } else { 0.0 })
        .stat("lgamma_relative_gap", route_gap)
        .stat("configs", big.to_f64().unwrap_or(f64::INFINITY));
    r.threshold("lgamma_relative_gap", 1e-6);
    r.note(alloc::format!("C(m,k) = {big}"));
    r.note(alloc::format!("C(m',k') = {small_side}"));
    r.pass = (!small || packing) && route_gap <= 1e-6;
    r
}

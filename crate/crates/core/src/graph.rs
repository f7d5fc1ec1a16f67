//! Communication topology: weighted digraph, root set, per-edge delays and
//! the matrices derived from them (`L`, `L̄`, `D_in`, `D̄`, `D̄_jω(κ)`).
//!
//! Edge weights follow the row convention `a[i][j]` = weight of the edge
//! `j → i` (agent `i` listens to agent `j`). Node indices are zero-based in
//! the API and one-based in the JSON format.

use crate::exec::Execution;
use crate::numerics::{self, CMat, Mat, NumericsError, Vector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("edge weight a[{i}][{j}] = {w} must be finite and nonnegative")]
    InvalidWeight { i: usize, j: usize, w: f64 },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("node {node} out of range for N = {n}")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: usize, to: usize },
    #[error("root set is empty")]
    EmptyRootSet,
    #[error("normalized matrix invariant violated: {0}")]
    DbarInvariant(String),
    #[error("nonzero delay on the diagonal (node {0})")]
    DiagonalDelay(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("graph JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Weighted directed graph without self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDigraph {
    a: Mat,
}

impl WeightedDigraph {
    pub fn new(a: Mat) -> Result<Self, GraphError> {
        if !a.is_square() {
            return Err(GraphError::Dimension(format!("adjacency must be square, got {:?}", a.shape())));
        }
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let w = a[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::InvalidWeight { i, j, w });
                }
                if i == j && w != 0.0 {
                    return Err(GraphError::SelfLoop(i));
                }
            }
        }
        Ok(Self { a })
    }

    pub fn empty(n: usize) -> Self {
        Self { a: Mat::zeros(n, n) }
    }

    /// Build from `(from, to, weight)` triples (zero-based).
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let mut a = Mat::zeros(n, n);
        for &(from, to, w) in edges {
            for node in [from, to] {
                if node >= n {
                    return Err(GraphError::NodeOutOfRange { node, n });
                }
            }
            if a[(to, from)] != 0.0 {
                return Err(GraphError::DuplicateEdge { from, to });
            }
            a[(to, from)] = w;
        }
        Self::new(a)
    }

    pub fn node_count(&self) -> usize {
        self.a.nrows()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.a
    }

    /// Weight of the edge `j → i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.node_count()).filter(move |&j| self.a[(i, j)] > 0.0)
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.a.row(i).sum()
    }

    /// Edges as `(from, to)` pairs in row-major order of the sink.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.a[(i, j)] > 0.0 {
                    out.push((j, i));
                }
            }
        }
        out
    }
}

/// Agents that measure their own output against the reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RootSet(BTreeSet<usize>);

impl RootSet {
    pub fn new(n: usize, roots: impl IntoIterator<Item = usize>) -> Result<Self, GraphError> {
        let set: BTreeSet<usize> = roots.into_iter().collect();
        if let Some(&node) = set.iter().find(|&&r| r >= n) {
            return Err(GraphError::NodeOutOfRange { node, n });
        }
        Ok(Self(set))
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Indicator vector ι.
    pub fn indicator(&self, n: usize) -> Vector {
        Vector::from_fn(n, |i, _| if self.contains(i) { 1.0 } else { 0.0 })
    }
}

/// Integer communication delays `κ[i][j]` (samples) on the channel `j → i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelayMatrix {
    n: usize,
    kappa: Vec<usize>,
}

impl DelayMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, kappa: vec![0; n * n] }
    }

    pub fn uniform(g: &WeightedDigraph, delay: usize) -> Self {
        let mut d = Self::zeros(g.node_count());
        for (from, to) in g.edges() {
            d.set(to, from, delay);
        }
        d
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.kappa[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        self.kappa[i * self.n + j] = k;
    }

    pub fn max_delay(&self) -> usize {
        self.kappa.iter().copied().max().unwrap_or(0)
    }

    /// Zero diagonal required; delays on non-edges are dropped with a warning.
    pub fn validated_for(mut self, g: &WeightedDigraph) -> Result<Self, GraphError> {
        if self.n != g.node_count() {
            return Err(GraphError::Dimension(format!(
                "delay matrix is {0}x{0}, graph has {1} nodes",
                self.n,
                g.node_count()
            )));
        }
        for i in 0..self.n {
            if self.get(i, i) != 0 {
                return Err(GraphError::DiagonalDelay(i));
            }
            for j in 0..self.n {
                if self.get(i, j) != 0 && g.weight(i, j) == 0.0 {
                    log::warn!("ignoring delay {} on non-edge {} -> {}", self.get(i, j), j + 1, i + 1);
                    self.set(i, j, 0);
                }
            }
        }
        Ok(self)
    }
}

/// `L`, `L̄`, the in-degrees and `D̄` for one graph and root set.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkMatrices {
    pub l: Mat,
    pub lbar: Mat,
    pub din: Vector,
    pub dbar: Mat,
}

/// Laplacian: `ℓ_ii = Σ_k a_ik`, `ℓ_ij = −a_ij`.
pub fn laplacian(g: &WeightedDigraph) -> Mat {
    let n = g.node_count();
    let mut l = -g.adjacency().clone();
    for i in 0..n {
        // diagonal as the sum of the off-diagonal entries of the same row, so the row sum is exactly 0
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| l[(i, j)]).sum();
        l[(i, i)] = -off;
    }
    l
}

/// `L̄ = L + diag(ι)`.
pub fn expanded_laplacian(l: &Mat, roots: &RootSet) -> Result<Mat, GraphError> {
    if roots.is_empty() {
        return Err(GraphError::EmptyRootSet);
    }
    Ok(add_root_indicator(l, roots))
}

fn add_root_indicator(l: &Mat, roots: &RootSet) -> Mat {
    let mut lbar = l.clone();
    for r in roots.iter().filter(|&r| r < l.nrows()) {
        lbar[(r, r)] += 1.0;
    }
    lbar
}

/// `D̄ = I − (2I + D_in)⁻¹ L̄`. Fails if an entry is negative or a row sum exceeds one.
pub fn dbar(lbar: &Mat, din: &Vector) -> Result<Mat, GraphError> {
    let n = lbar.nrows();
    if !lbar.is_square() || din.len() != n {
        return Err(GraphError::Dimension(format!("Lbar {:?} with {} in-degrees", lbar.shape(), din.len())));
    }
    let mut d = Mat::identity(n, n);
    for i in 0..n {
        let s = 2.0 + din[i];
        for j in 0..n {
            d[(i, j)] -= lbar[(i, j)] / s;
        }
    }
    for i in 0..n {
        let row = d.row(i);
        if let Some(j) = (0..n).find(|&j| row[j] < -1e-15) {
            return Err(GraphError::DbarInvariant(format!("entry ({i}, {j}) = {}", row[j])));
        }
        let sum: f64 = row.sum();
        if sum > 1.0 + 1e-12 {
            return Err(GraphError::DbarInvariant(format!("row {i} sums to {sum}")));
        }
    }
    Ok(d)
}

/// Every node reachable along edges from some root.
pub fn check_rooted(g: &WeightedDigraph, roots: &RootSet) -> bool {
    let n = g.node_count();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = roots.iter().filter(|&r| r < n).collect();
    for &r in &queue {
        seen[r] = true;
    }
    while let Some(j) = queue.pop_front() {
        for (i, s) in seen.iter_mut().enumerate() {
            if !*s && g.weight(i, j) > 0.0 {
                *s = true;
                queue.push_back(i);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// For rooted graphs, every eigenvalue of `L̄` has positive real part.
/// Returns whether the spectrum lies in the open right half-plane.
pub fn verify_remark1(lbar: &Mat, rooted: bool) -> Result<bool, GraphError> {
    let min_re = numerics::eigenvalues(lbar)?.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let holds = min_re > 0.0;
    if rooted && !holds {
        log::warn!("rooted graph but Lbar has an eigenvalue with real part {min_re}");
    }
    Ok(holds)
}

/// `D̄_jω(κ)`: entry `(i, j)` is `d̄_ij e^{−jωκ_ij}`.
pub fn dbar_jomega(dbar: &Mat, kappa: &DelayMatrix, omega: f64) -> CMat {
    let n = dbar.nrows();
    CMat::from_fn(n, n, |i, j| {
        let d = dbar[(i, j)];
        let k = kappa.get(i, j);
        if k == 0 || d == 0.0 {
            Complex64::new(d, 0.0)
        } else {
            Complex64::from_polar(d, -omega * k as f64)
        }
    })
}

/// Max absolute row sum of `D̄`, an upper bound on its eigenvalue moduli.
pub fn beta_bound(dbar: &Mat) -> f64 {
    (0..dbar.nrows()).map(|i| dbar.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `points` uniformly spaced values covering `[−π, π]` (both ends included).
pub fn omega_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|k| -PI + 2.0 * PI * k as f64 / (points - 1) as f64).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub holds: bool,
    pub beta: f64,
    pub max_modulus: f64,
    pub worst_omega: f64,
}

/// Spectral radius of `D̄_jω(κ)` over a frequency grid against the
/// row-sum bound β; rooted graphs must additionally stay inside the unit disc.
pub fn lemma2_check(
    dbar: &Mat,
    kappa: &DelayMatrix,
    omegas: &[f64],
    rooted: bool,
    exec: Execution,
) -> Result<Lemma2Report, GraphError> {
    let beta = beta_bound(dbar);
    let radii = exec.map(omegas, |&w| numerics::spectral_radius_complex(&dbar_jomega(dbar, kappa, w)));
    let mut max_modulus = 0.0;
    let mut worst_omega = omegas.first().copied().unwrap_or(0.0);
    for (rho, &w) in radii.into_iter().zip(omegas) {
        let rho = rho?;
        if rho > max_modulus {
            max_modulus = rho;
            worst_omega = w;
        }
    }
    let holds = max_modulus <= beta + 1e-9 && (!rooted || max_modulus < 1.0);
    Ok(Lemma2Report { holds, beta, max_modulus, worst_omega })
}

/// Graph, roots, delays and derived matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub graph: WeightedDigraph,
    pub roots: RootSet,
    pub delays: DelayMatrix,
    pub matrices: NetworkMatrices,
}

impl NetworkSpec {
    /// An empty root set is accepted here (the network is then simply not
    /// rooted); consumers check [`NetworkSpec::is_rooted`].
    pub fn new(graph: WeightedDigraph, roots: RootSet, delays: DelayMatrix) -> Result<Self, GraphError> {
        let n = graph.node_count();
        let delays = delays.validated_for(&graph)?;
        let l = laplacian(&graph);
        let lbar = add_root_indicator(&l, &roots);
        let din = Vector::from_fn(n, |i, _| graph.in_degree(i));
        let dbar = dbar(&lbar, &din)?;
        Ok(Self { graph, roots, delays, matrices: NetworkMatrices { l, lbar, din, dbar } })
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn is_rooted(&self) -> bool {
        !self.roots.is_empty() && check_rooted(&self.graph, &self.roots)
    }

    /// Same graph and roots, different delays.
    pub fn with_delays(&self, delays: DelayMatrix) -> Result<Self, GraphError> {
        Self::new(self.graph.clone(), self.roots.clone(), delays)
    }

    /// Same graph and delays, different roots.
    pub fn with_roots(&self, roots: RootSet) -> Result<Self, GraphError> {
        Self::new(self.graph.clone(), roots, self.delays.clone())
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(s)?;
        doc.into_spec()
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string_pretty(&GraphDoc::from_spec(self))?)
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    from: usize,
    to: usize,
    #[serde(default = "default_weight")]
    weight: f64,
    #[serde(default)]
    delay: usize,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    #[serde(rename = "N")]
    n: usize,
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    roots: Vec<usize>,
}

impl GraphDoc {
    fn into_spec(self) -> Result<NetworkSpec, GraphError> {
        let n = self.n;
        let one_based = |node: usize| -> Result<usize, GraphError> {
            if node == 0 || node > n {
                Err(GraphError::NodeOutOfRange { node, n })
            } else {
                Ok(node - 1)
            }
        };
        let mut edges = Vec::with_capacity(self.edges.len());
        let mut delays = DelayMatrix::zeros(n);
        for e in &self.edges {
            let (from, to) = (one_based(e.from)?, one_based(e.to)?);
            if from == to {
                return Err(GraphError::SelfLoop(from));
            }
            edges.push((from, to, e.weight));
            delays.set(to, from, e.delay);
        }
        let graph = WeightedDigraph::from_edges(n, &edges)?;
        let roots = RootSet::new(n, self.roots.iter().map(|&r| one_based(r)).collect::<Result<Vec<_>, _>>()?)?;
        NetworkSpec::new(graph, roots, delays)
    }

    fn from_spec(spec: &NetworkSpec) -> Self {
        let edges = spec
            .graph
            .edges()
            .into_iter()
            .map(|(from, to)| EdgeDoc {
                from: from + 1,
                to: to + 1,
                weight: spec.graph.weight(to, from),
                delay: spec.delays.get(to, from),
            })
            .collect();
        GraphDoc { n: spec.node_count(), edges, roots: spec.roots.iter().map(|r| r + 1).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain2() -> WeightedDigraph {
        WeightedDigraph::from_edges(2, &[(0, 1, 1.0)]).unwrap()
    }

    fn roots(n: usize, r: &[usize]) -> RootSet {
        RootSet::new(n, r.iter().copied()).unwrap()
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(laplacian(&chain2()), Mat::from_row_slice(2, 2, &[0., 0., -1., 1.]));
        let g = fixtures::chain3_network().graph;
        assert_eq!(laplacian(&g), Mat::from_row_slice(3, 3, &[0., 0., 0., -1., 1., 0., 0., -1., 1.]));
        assert_eq!(laplacian(&WeightedDigraph::empty(3)), Mat::zeros(3, 3));
    }

    #[test]
    fn expanded_laplacian_examples() {
        let l = laplacian(&chain2());
        assert_eq!(expanded_laplacian(&l, &roots(2, &[0])).unwrap(), Mat::from_row_slice(2, 2, &[1., 0., -1., 1.]));
        let l3 = laplacian(&fixtures::chain3_network().graph);
        assert_eq!(
            expanded_laplacian(&l3, &roots(3, &[0])).unwrap(),
            Mat::from_row_slice(3, 3, &[1., 0., 0., -1., 1., 0., 0., -1., 1.])
        );
        assert_eq!(expanded_laplacian(&Mat::zeros(3, 3), &roots(3, &[0, 1, 2])).unwrap(), Mat::identity(3, 3));
        assert!(matches!(expanded_laplacian(&l, &roots(2, &[])), Err(GraphError::EmptyRootSet)));
    }

    #[test]
    fn dbar_examples() {
        let lbar = Mat::from_row_slice(2, 2, &[1., 0., -1., 1.]);
        let d = dbar(&lbar, &Vector::from_vec(vec![0., 1.])).unwrap();
        let want = Mat::from_row_slice(2, 2, &[0.5, 0., 1. / 3., 2. / 3.]);
        assert!((d - want).amax() < 1e-15);

        let d = dbar(&Mat::from_element(1, 1, 1.0), &Vector::zeros(1)).unwrap();
        assert_eq!(d[(0, 0)], 0.5);

        let net = fixtures::chain3_network();
        #[rustfmt::skip]
        let want = Mat::from_row_slice(3, 3, &[0.5, 0., 0., 1. / 3., 2. / 3., 0., 0., 1. / 3., 2. / 3.]);
        assert!((&net.matrices.dbar - want).amax() < 1e-15);
    }

    #[test]
    fn rooted_examples() {
        let net = fixtures::chain3_network();
        assert!(check_rooted(&net.graph, &net.roots));
        assert!(!check_rooted(&WeightedDigraph::empty(2), &roots(2, &[0])));
        assert!(check_rooted(&WeightedDigraph::empty(4), &roots(4, &[0, 1, 2, 3])));
        // edge direction matters
        assert!(!check_rooted(&chain2(), &roots(2, &[1])));
    }

    #[test]
    fn remark1_examples() {
        assert!(verify_remark1(&Mat::from_row_slice(2, 2, &[1., 0., -1., 1.]), true).unwrap());
        assert!(verify_remark1(&Mat::from_element(1, 1, 1.0), true).unwrap());
        // unrooted: L̄ = L has a zero eigenvalue
        assert!(!verify_remark1(&laplacian(&chain2()), false).unwrap());
    }

    #[test]
    fn dbar_jomega_examples() {
        let d = Mat::from_row_slice(2, 2, &[0.5, 0., 1. / 3., 2. / 3.]);
        let mut kappa = DelayMatrix::zeros(2);
        kappa.set(1, 0, 1);
        assert_eq!(dbar_jomega(&d, &kappa, 0.0), numerics::to_complex(&d));
        assert_eq!(dbar_jomega(&d, &DelayMatrix::zeros(2), 1.234), numerics::to_complex(&d));
        let m = dbar_jomega(&d, &kappa, PI);
        assert!((m[(1, 0)] - Complex64::new(-1. / 3., 0.)).norm() < 1e-15);
        assert_eq!(m[(0, 0)], Complex64::new(0.5, 0.0));
        assert_eq!(m[(1, 1)], Complex64::new(2. / 3., 0.0));
    }

    #[test]
    fn lemma2_chain_with_delays() {
        let d = Mat::from_row_slice(2, 2, &[0.5, 0., 1. / 3., 2. / 3.]);
        for k in 0..=10 {
            let mut kappa = DelayMatrix::zeros(2);
            kappa.set(1, 0, k);
            let r = lemma2_check(&d, &kappa, &omega_grid(128), true, Execution::default()).unwrap();
            assert!(r.holds && r.max_modulus < 1.0);
        }
        let r = lemma2_check(&d, &DelayMatrix::zeros(2), &omega_grid(16), true, Execution::Sequential).unwrap();
        assert!((r.max_modulus - numerics::spectral_radius(&d).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lemma2_example_ring() {
        let net = fixtures::ring10_network();
        let r = lemma2_check(&net.matrices.dbar, &net.delays, &omega_grid(256), true, Execution::default()).unwrap();
        assert!(r.holds && r.max_modulus < 1.0);
    }

    #[test]
    fn json_format() {
        let s = r#"{"N": 3, "edges": [{"from": 1, "to": 2}, {"from": 2, "to": 3, "weight": 2.5, "delay": 4}], "roots": [1]}"#;
        let net = NetworkSpec::from_json(s).unwrap();
        assert_eq!(net.graph.weight(1, 0), 1.0);
        assert_eq!(net.graph.weight(2, 1), 2.5);
        assert_eq!(net.delays.get(2, 1), 4);
        assert!(net.is_rooted());
        let back = NetworkSpec::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);

        assert!(NetworkSpec::from_json(r#"{"N": 2, "edges": [{"from": 0, "to": 1}], "roots": [1]}"#).is_err());
        assert!(NetworkSpec::from_json(r#"{"N": 2, "edges": [{"from": 1, "to": 1}], "roots": [1]}"#).is_err());
        assert!(NetworkSpec::from_json(
            r#"{"N": 2, "edges": [{"from": 1, "to": 2}, {"from": 1, "to": 2}], "roots": [1]}"#
        )
        .is_err());
        let unrooted = NetworkSpec::from_json(r#"{"N": 2, "edges": [{"from": 1, "to": 2}], "roots": []}"#).unwrap();
        assert!(!unrooted.is_rooted());
    }

    #[test]
    fn non_edge_delays_dropped() {
        let mut kappa = DelayMatrix::zeros(2);
        kappa.set(0, 1, 3);
        let net = NetworkSpec::new(chain2(), roots(2, &[0]), kappa).unwrap();
        assert_eq!(net.delays.get(0, 1), 0);
        let mut diag = DelayMatrix::zeros(2);
        diag.set(1, 1, 1);
        assert!(NetworkSpec::new(chain2(), roots(2, &[0]), diag).is_err());
    }

    /// Reachability by boolean transitive closure (Warshall).
    fn rooted_oracle(adj: &[Vec<bool>], roots: &[usize]) -> bool {
        let n = adj.len();
        // reach[j][i]: path j -> ... -> i; adj[i][j] means edge j -> i
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
            for j in 0..n {
                if adj[i][j] {
                    reach[j][i] = true;
                }
            }
        }
        for k in 0..n {
            for s in 0..n {
                for t in 0..n {
                    if reach[s][k] && reach[k][t] {
                        reach[s][t] = true;
                    }
                }
            }
        }
        (0..n).all(|t| roots.iter().any(|&r| reach[r][t]))
    }

    fn check_against_oracle(adj: &[Vec<bool>], root_list: &[usize]) {
        let n = adj.len();
        let edges: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| adj[i][j]).map(move |j| (j, i, 1.0)))
            .collect();
        let g = WeightedDigraph::from_edges(n, &edges).unwrap();
        let rs = RootSet::new(n, root_list.iter().copied()).unwrap();
        assert_eq!(check_rooted(&g, &rs), rooted_oracle(adj, root_list), "adj {adj:?} roots {root_list:?}");
    }

    #[test]
    fn rooted_agrees_with_closure_oracle() {
        let mut cases = 0;
        // every graph and every nonempty root set for N <= 3
        for n in 1..=3usize {
            let slots: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
            for mask in 0u32..(1 << slots.len()) {
                let mut adj = vec![vec![false; n]; n];
                for (b, &(i, j)) in slots.iter().enumerate() {
                    adj[i][j] = mask & (1 << b) != 0;
                }
                for rmask in 1u32..(1 << n) {
                    let rl: Vec<usize> = (0..n).filter(|&i| rmask & (1 << i) != 0).collect();
                    check_against_oracle(&adj, &rl);
                    cases += 1;
                }
            }
        }
        // random {0,1} graphs for N = 4..6
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3000 {
            let n = rng.random_range(4..=6);
            let density = rng.random_range(0.05..0.6);
            let adj: Vec<Vec<bool>> =
                (0..n).map(|i| (0..n).map(|j| i != j && rng.random_bool(density)).collect()).collect();
            let k = rng.random_range(1..=2);
            let rl: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            check_against_oracle(&adj, &rl);
            cases += 1;
        }
        assert!(cases > 3000);
    }

    #[test]
    fn random_graph_dbar_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let net = fixtures::random_rooted_network(&mut rng, 12, 20);
            let d = &net.matrices.dbar;
            let l = &net.matrices.l;
            let scale = 1.0 + l.amax();
            for i in 0..net.node_count() {
                assert!(l.row(i).sum().abs() <= 1e-15 * scale);
                assert!(d.row(i).iter().all(|&v| v >= 0.0));
                let sum = d.row(i).sum();
                let want = if net.roots.contains(i) { 1.0 - 1.0 / (2.0 + net.matrices.din[i]) } else { 1.0 };
                assert!((sum - want).abs() <= 1e-12);
            }
            assert!(verify_remark1(&net.matrices.lbar, true).unwrap());
        }
    }

    #[test]
    fn random_graph_lemma2_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = omega_grid(128);
        for _ in 0..60 {
            let net = fixtures::random_rooted_network(&mut rng, 8, 20);
            let r = lemma2_check(&net.matrices.dbar, &net.delays, &grid, true, Execution::default()).unwrap();
            assert!(r.holds, "{r:?}");
        }
    }
}

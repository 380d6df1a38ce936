//! Communication graphs and Metropolis-Hastings mixing matrices.
//!
//! Random d-regular graphs come from a stub-pairing (configuration model)
//! generator that rejects self-loops, parallel edges and disconnected
//! outcomes. Mixing matrices are stored dense; each column additionally keeps
//! its non-zero entries so that gossip aggregation only touches neighbours.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{stream, StreamPurpose};

/// Tolerance used for symmetry and stochasticity checks.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-12;

/// Default bound on generation attempts before giving up.
pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("no simple {d}-regular graph on {n} nodes exists: {reason}")]
    Infeasible { n: usize, d: usize, reason: &'static str },
    #[error("failed to generate a connected {d}-regular graph on {n} nodes after {attempts} attempts")]
    GenerationFailed { n: usize, d: usize, attempts: usize },
    #[error("invalid edge ({0}, {1})")]
    InvalidEdge(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("mixing matrix is invalid: {0}")]
    InvalidMixing(String),
    #[error("eigensolver did not converge")]
    EigenFailure,
    #[error("edge list line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Undirected, connected simple graph over nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology from an undirected edge list, validating every invariant.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = HashSet::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(TopologyError::InvalidEdge(a, b));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(TopologyError::DuplicateEdge(key.0, key.1));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let topology = Topology { n, neighbors };
        if !topology.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(topology)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `Some(d)` when every node has degree `d`.
    pub fn regular_degree(&self) -> Option<usize> {
        let d = self.neighbors.first()?.len();
        self.neighbors.iter().all(|l| l.len() == d).then_some(d)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut visited = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !visited[v] {
                    visited[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == self.n
    }

    /// Serializes to the edge-list text format: `n d`, then one `i j` per line.
    ///
    /// `d` is the maximum degree, which equals the common degree for regular graphs.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.max_degree());
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list text format produced by [`Topology::to_edge_list`].
    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line_no, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            message: "missing `n d` header".into(),
        })?;
        let (n, d) = parse_pair(header, line_no)?;
        let mut edges = Vec::new();
        for (line_no, line) in lines {
            edges.push(parse_pair(line, line_no)?);
        }
        let topology = Topology::from_edges(n, &edges)?;
        if topology.max_degree() != d {
            return Err(TopologyError::Parse {
                line: 1,
                message: format!("header degree {d} but maximum degree is {}", topology.max_degree()),
            });
        }
        Ok(topology)
    }
}

fn parse_pair(line: &str, line_no: usize) -> Result<(usize, usize), TopologyError> {
    let mut parts = line.split_whitespace();
    let mut next = || -> Result<usize, TopologyError> {
        parts
            .next()
            .ok_or_else(|| TopologyError::Parse { line: line_no, message: "expected two integers".into() })?
            .parse()
            .map_err(|e| TopologyError::Parse { line: line_no, message: format!("{e}") })
    };
    let pair = (next()?, next()?);
    if parts.next().is_some() {
        return Err(TopologyError::Parse { line: line_no, message: "trailing tokens".into() });
    }
    Ok(pair)
}

/// Generates a connected simple `d`-regular graph with the default attempt bound.
pub fn generate_regular(n: usize, d: usize, seed: u64) -> Result<Topology, TopologyError> {
    generate_regular_with_attempts(n, d, seed, DEFAULT_MAX_ATTEMPTS)
}

pub fn generate_regular_with_attempts(
    n: usize,
    d: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Topology, TopologyError> {
    if d == 0 {
        return Err(TopologyError::Infeasible { n, d, reason: "degree must be positive" });
    }
    if d >= n {
        return Err(TopologyError::Infeasible { n, d, reason: "degree must be smaller than n" });
    }
    if (n * d) % 2 == 1 {
        return Err(TopologyError::Infeasible { n, d, reason: "n * d must be even" });
    }
    let mut rng = stream(seed, 0, 0, StreamPurpose::Topology);
    for _ in 0..max_attempts {
        let Some(edges) = try_pairing(n, d, &mut rng) else {
            continue;
        };
        match Topology::from_edges(n, &edges) {
            Ok(topology) => return Ok(topology),
            Err(TopologyError::Disconnected) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(TopologyError::GenerationFailed { n, d, attempts: max_attempts })
}

/// One pairing attempt. Valid stub pairs are kept; conflicting stubs are
/// shuffled and re-paired until none remain or no valid pair is possible.
fn try_pairing<R: rand::Rng>(n: usize, d: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    let mut edges: HashSet<(usize, usize)> = HashSet::with_capacity(n * d / 2);
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
    while !stubs.is_empty() {
        let mut leftover: BTreeMap<usize, usize> = BTreeMap::new();
        stubs.shuffle(rng);
        for pair in stubs.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a != b && !edges.contains(&(a, b)) {
                edges.insert((a, b));
            } else {
                *leftover.entry(a).or_default() += 1;
                *leftover.entry(b).or_default() += 1;
            }
        }
        if !leftover.is_empty() && !has_valid_pair(&edges, &leftover) {
            return None;
        }
        stubs = leftover
            .iter()
            .flat_map(|(&v, &count)| std::iter::repeat_n(v, count))
            .collect();
    }
    let mut out: Vec<_> = edges.into_iter().collect();
    out.sort_unstable();
    Some(out)
}

fn has_valid_pair(edges: &HashSet<(usize, usize)>, leftover: &BTreeMap<usize, usize>) -> bool {
    let nodes: Vec<usize> = leftover.keys().copied().collect();
    nodes
        .iter()
        .enumerate()
        .any(|(i, &a)| nodes[..i].iter().any(|&b| !edges.contains(&(b.min(a), b.max(a)))))
}

/// Symmetric doubly-stochastic weight matrix over a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
    /// For each column `i`, the `(j, W[j][i])` pairs with non-zero weight, `j` ascending.
    columns: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Wraps a dense row-major matrix after checking symmetry, range and
    /// double stochasticity.
    pub fn from_dense(n: usize, weights: Vec<f64>) -> Result<Self, TopologyError> {
        if weights.len() != n * n {
            return Err(TopologyError::InvalidMixing(format!(
                "expected {} entries, got {}",
                n * n,
                weights.len()
            )));
        }
        let matrix = Self::from_dense_unchecked(n, weights);
        matrix.validate()?;
        Ok(matrix)
    }

    fn from_dense_unchecked(n: usize, weights: Vec<f64>) -> Self {
        let columns = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let w = weights[j * n + i];
                        (w != 0.0).then_some((j, w))
                    })
                    .collect()
            })
            .collect();
        MixingMatrix { n, weights, columns }
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self::from_dense_unchecked(n, weights)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Non-zero entries of column `i` as `(j, W[j][i])`.
    pub fn column_support(&self, i: usize) -> &[(usize, f64)] {
        &self.columns[i]
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let n = self.n;
        for i in 0..n {
            let mut row_sum = 0.0;
            let mut col_sum = 0.0;
            for j in 0..n {
                let w = self.get(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(TopologyError::InvalidMixing(format!("W[{i}][{j}] = {w} outside [0, 1]")));
                }
                if (w - self.get(j, i)).abs() > STOCHASTIC_TOLERANCE {
                    return Err(TopologyError::InvalidMixing(format!("W[{i}][{j}] != W[{j}][{i}]")));
                }
                row_sum += w;
                col_sum += self.get(j, i);
            }
            if (row_sum - 1.0).abs() > STOCHASTIC_TOLERANCE || (col_sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(TopologyError::InvalidMixing(format!(
                    "row/column {i} sums to {row_sum}/{col_sum}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that off-diagonal weight only sits on edges of `topology`.
    pub fn support_matches(&self, topology: &Topology) -> bool {
        (0..self.n).all(|i| {
            (0..self.n).all(|j| i == j || self.get(i, j) == 0.0 || topology.has_edge(i, j))
        })
    }

    /// `W · v` for a scalar per node.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(values).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.weights)
    }
}

/// Metropolis-Hastings weights: `1 / (max(deg i, deg j) + 1)` on edges, the
/// remainder on the diagonal.
pub fn metropolis_weights(topology: &Topology) -> MixingMatrix {
    let n = topology.n();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for &j in topology.neighbors(i) {
            weights[i * n + j] = 1.0 / (topology.degree(i).max(topology.degree(j)) + 1) as f64;
        }
    }
    for i in 0..n {
        let off: f64 = topology.neighbors(i).iter().map(|&j| weights[i * n + j]).sum();
        weights[i * n + i] = 1.0 - off;
    }
    MixingMatrix::from_dense_unchecked(n, weights)
}

/// Second-largest eigenvalue modulus of a mixing matrix.
pub fn second_eigenvalue_modulus(w: &MixingMatrix) -> Result<f64, TopologyError> {
    if w.n() < 2 {
        return Ok(0.0);
    }
    let eigen = w
        .to_dmatrix()
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or(TopologyError::EigenFailure)?;
    let mut moduli: Vec<f64> = eigen.eigenvalues.iter().map(|v| v.abs()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    Ok(moduli[1].clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cycle(n: usize) -> Topology {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Topology::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn forced_small_regular_graphs() {
        for seed in 0..20 {
            let tri = generate_regular(3, 2, seed).unwrap();
            assert_eq!(tri.edges(), vec![(0, 1), (0, 2), (1, 2)]);
            let sq = generate_regular(4, 2, seed).unwrap();
            assert_eq!(sq.edge_count(), 4);
            assert!((0..4).all(|v| sq.degree(v) == 2));
        }
    }

    #[test]
    fn large_regular_graph_is_connected_and_regular() {
        let g = generate_regular(256, 6, 1).unwrap();
        assert_eq!(g.regular_degree(), Some(6));
        assert_eq!(g.edge_count(), 768);
        assert!(g.is_connected());
    }

    #[test]
    fn infeasible_parameters() {
        assert!(matches!(generate_regular(5, 3, 0), Err(TopologyError::Infeasible { .. })));
        assert!(matches!(generate_regular(4, 4, 0), Err(TopologyError::Infeasible { .. })));
        assert!(matches!(generate_regular(4, 0, 0), Err(TopologyError::Infeasible { .. })));
    }

    #[test]
    fn exhausted_attempts_report_failure() {
        // 2-regular graphs on 6 nodes are a 6-cycle or two triangles; zero attempts always fails.
        assert_eq!(
            generate_regular_with_attempts(6, 2, 0, 0),
            Err(TopologyError::GenerationFailed { n: 6, d: 2, attempts: 0 })
        );
    }

    #[test]
    fn from_edges_rejects_bad_input() {
        assert_eq!(Topology::from_edges(3, &[(0, 0)]), Err(TopologyError::InvalidEdge(0, 0)));
        assert_eq!(Topology::from_edges(3, &[(0, 1), (1, 0), (1, 2)]), Err(TopologyError::DuplicateEdge(0, 1)));
        assert_eq!(Topology::from_edges(4, &[(0, 1), (2, 3)]), Err(TopologyError::Disconnected));
    }

    #[test]
    fn two_node_weights() {
        let g = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let w = metropolis_weights(&g);
        assert_eq!(w.row(0), &[0.5, 0.5]);
        assert_eq!(w.row(1), &[0.5, 0.5]);
        assert_eq!(second_eigenvalue_modulus(&w).unwrap(), 0.0);
    }

    #[test]
    fn cycle_weights_are_one_third() {
        let w = metropolis_weights(&cycle(4));
        for i in 0..4 {
            assert_abs_diff_eq!(w.get(i, i), 1.0 / 3.0, epsilon = 1e-15);
            assert_abs_diff_eq!(w.get(i, (i + 1) % 4), 1.0 / 3.0, epsilon = 1e-15);
            assert_eq!(w.get(i, (i + 2) % 4), 0.0);
        }
        assert_abs_diff_eq!(second_eigenvalue_modulus(&w).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn star_weights() {
        let g = Topology::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let w = metropolis_weights(&g);
        assert_abs_diff_eq!(w.get(0, 0), 0.25, epsilon = 1e-15);
        for leaf in 1..4 {
            assert_abs_diff_eq!(w.get(0, leaf), 0.25, epsilon = 1e-15);
            assert_abs_diff_eq!(w.get(leaf, leaf), 0.75, epsilon = 1e-15);
        }
        w.validate().unwrap();
    }

    #[test]
    fn identity_has_unit_second_eigenvalue() {
        assert_abs_diff_eq!(second_eigenvalue_modulus(&MixingMatrix::identity(5)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn from_dense_rejects_non_stochastic() {
        assert!(MixingMatrix::from_dense(2, vec![0.6, 0.5, 0.5, 0.5]).is_err());
        assert!(MixingMatrix::from_dense(2, vec![0.7, 0.3, 0.2, 0.8]).is_err());
        assert!(MixingMatrix::from_dense(2, vec![0.5, 0.5, 0.5, 0.5]).is_ok());
    }

    #[test]
    fn edge_list_roundtrip_and_errors() {
        let g = generate_regular(10, 3, 4).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("10 3\n"));
        assert_eq!(Topology::from_edge_list(&text).unwrap(), g);
        assert!(matches!(Topology::from_edge_list(""), Err(TopologyError::Parse { line: 1, .. })));
        assert!(matches!(
            Topology::from_edge_list("3 2\n0 1\n1 x\n"),
            Err(TopologyError::Parse { line: 3, .. })
        ));
        assert!(Topology::from_edge_list("3 1\n0 1\n1 2\n0 2\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn generated_mixing_invariants(n_half in 4usize..40, d in 2usize..7, seed in any::<u64>(), v in prop::collection::vec(-10.0f64..10.0, 80)) {
            let n = 2 * n_half;
            let g = generate_regular(n, d, seed).unwrap();
            prop_assert_eq!(g.regular_degree(), Some(d));
            prop_assert_eq!(generate_regular(n, d, seed).unwrap(), g.clone());
            let w = metropolis_weights(&g);
            prop_assert!(w.validate().is_ok());
            prop_assert!(w.support_matches(&g));
            let ones = w.apply(&vec![1.0; n]);
            prop_assert!(ones.iter().all(|x| (x - 1.0).abs() <= 1e-12));
            let v = &v[..n];
            let mean_before = v.iter().sum::<f64>() / n as f64;
            let mean_after = w.apply(v).iter().sum::<f64>() / n as f64;
            prop_assert!((mean_before - mean_after).abs() <= 1e-12);
            prop_assert!(second_eigenvalue_modulus(&w).unwrap() < 1.0);
        }
    }
}

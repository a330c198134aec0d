//! Multi-spectrum enhancement via masked channel-graph attention.
//!
//! Each of the `d` latent channels of `z_v` is treated as a node carrying
//! an `n`-vector feature per batch element. A fixed random adjacency
//! (self-loops forced, every off-diagonal edge kept independently with
//! probability one half, sampled once and frozen) restricts multi-head
//! attention to first-order neighbors. Per head `k`: project features with
//! `W^k`, score edges by scaled dot product, normalize over each node's
//! neighborhood, aggregate, then average the heads.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError};
use crate::util::rng_from_seed;

#[derive(Debug, Error)]
pub enum MsekError {
    #[error("channel graph needs at least one node")]
    EmptyGraph,
    #[error("input has {z_channels} channels but the graph has {graph_nodes} nodes")]
    NodeCount { z_channels: usize, graph_nodes: usize },
    #[error("head {index} has shape {shape:?}, expected [{n}, {n}]")]
    HeadShape { index: usize, shape: Vec<usize>, n: usize },
    #[error("at least one attention head is required")]
    NoHeads,
    #[error("adjacency rows malformed: {reason}")]
    BadAdjacency { reason: String },
    #[error("input must be 3-D (batch, time, channels), got {shape:?}")]
    BadInput { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A fixed directed graph over the `d` latent channels.
#[derive(Debug, Clone)]
pub struct ChannelGraph {
    d: usize,
    adjacency: Arc<Vec<bool>>, // row-major d x d
}

impl ChannelGraph {
    /// Starts from the complete graph, drops each off-diagonal edge
    /// independently with probability one half (seeded), and forces the
    /// diagonal back on. Sampled once; callers are expected to keep the
    /// result for the model's lifetime.
    pub fn build(d: usize, seed: u64) -> Result<Self, MsekError> {
        if d == 0 {
            return Err(MsekError::EmptyGraph);
        }
        let mut rng = rng_from_seed(seed);
        let mut adjacency = vec![false; d * d];
        for i in 0..d {
            for j in 0..d {
                adjacency[i * d + j] = i == j || rng.random::<bool>();
            }
        }
        Ok(Self { d, adjacency: Arc::new(adjacency) })
    }

    #[must_use]
    pub fn node_count(&self) -> usize {
        self.d
    }

    #[must_use]
    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.d + j]
    }

    /// Fraction of off-diagonal entries that are edges.
    #[must_use]
    pub fn off_diagonal_density(&self) -> f64 {
        if self.d < 2 {
            return 0.0;
        }
        let kept = (0..self.d)
            .flat_map(|i| (0..self.d).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.is_edge(i, j))
            .count();
        kept as f64 / (self.d * (self.d - 1)) as f64
    }

    /// Adjacency serialized one row per string of '0'/'1' characters.
    #[must_use]
    pub fn to_row_strings(&self) -> Vec<String> {
        self.adjacency
            .chunks(self.d)
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    /// Rebuilds a graph from [`Self::to_row_strings`] output, validating
    /// squareness, the character set, and the self-loop invariant.
    pub fn from_row_strings(rows: &[String]) -> Result<Self, MsekError> {
        let d = rows.len();
        if d == 0 {
            return Err(MsekError::EmptyGraph);
        }
        let mut adjacency = Vec::with_capacity(d * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(MsekError::BadAdjacency {
                    reason: format!("row {i} has length {}, expected {d}", row.len()),
                });
            }
            for (j, ch) in row.chars().enumerate() {
                let bit = match ch {
                    '0' => false,
                    '1' => true,
                    other => {
                        return Err(MsekError::BadAdjacency {
                            reason: format!("row {i} contains {other:?}"),
                        })
                    }
                };
                if i == j && !bit {
                    return Err(MsekError::BadAdjacency {
                        reason: format!("node {i} is missing its self-loop"),
                    });
                }
                adjacency.push(bit);
            }
        }
        Ok(Self { d, adjacency: Arc::new(adjacency) })
    }

    fn mask(&self) -> Arc<Vec<bool>> {
        Arc::clone(&self.adjacency)
    }
}

/// Trainable per-head projection matrices, each `n x n`.
pub struct MsekParams {
    pub heads: Vec<Tensor>,
}

impl MsekParams {
    /// Initializes `k` heads with entries uniform in `[-1/sqrt(n), 1/sqrt(n)]`.
    pub fn init(g: &mut Graph, k: usize, n: usize, seed: u64) -> Result<Self, MsekError> {
        if k == 0 {
            return Err(MsekError::NoHeads);
        }
        let bound = 1.0 / (n as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        let mut heads = Vec::with_capacity(k);
        for _ in 0..k {
            let data: Vec<f64> =
                (0..n * n).map(|_| rng.random_range(-bound..=bound)).collect();
            heads.push(g.leaf(data, &[n, n], true)?);
        }
        Ok(Self { heads })
    }
}

/// Edge scores for one head: `e_ij = (W h_i) . (W h_j) / sqrt(n)` per batch
/// element, where `h` is `(b, d, n)` channel-major node features.
pub fn edge_coeffs(g: &mut Graph, h: Tensor, w: Tensor) -> Result<Tensor, MsekError> {
    let hw = project(g, h, w)?;
    scores(g, hw)
}

fn project(g: &mut Graph, h: Tensor, w: Tensor) -> Result<Tensor, MsekError> {
    let n = *g.shape(h).last().unwrap_or(&0);
    let ws = g.shape(w).to_vec();
    if ws != [n, n] {
        return Err(MsekError::HeadShape { index: 0, shape: ws, n });
    }
    // Row i of the result is (W h_i)^T = h_i^T W^T.
    let wt = g.transpose_last2(w)?;
    Ok(g.matmul(h, wt)?)
}

fn scores(g: &mut Graph, hw: Tensor) -> Result<Tensor, MsekError> {
    let n = *g.shape(hw).last().unwrap_or(&0);
    let hw_t = g.transpose_last2(hw)?;
    let e = g.batched_matmul(hw, hw_t)?;
    Ok(g.scale(e, 1.0 / (n as f64).sqrt()))
}

/// Normalizes edge scores over each node's neighborhood: softmax along the
/// last dim restricted to the adjacency row, exact zeros elsewhere.
pub fn neighbor_softmax(
    g: &mut Graph,
    e: Tensor,
    graph: &ChannelGraph,
) -> Result<Tensor, MsekError> {
    Ok(g.masked_softmax_lastdim(e, graph.mask(), graph.node_count())?)
}

/// Runs the full enhancement: per head, score edges, normalize over
/// neighborhoods, aggregate projected neighbor features; average the heads;
/// reassemble to the input's `(b, n, d)` layout.
pub fn msek_forward(
    g: &mut Graph,
    z_v: Tensor,
    graph: &ChannelGraph,
    params: &MsekParams,
) -> Result<Tensor, MsekError> {
    let zs = g.shape(z_v).to_vec();
    if zs.len() != 3 {
        return Err(MsekError::BadInput { shape: zs });
    }
    let (n, d) = (zs[1], zs[2]);
    if d != graph.node_count() {
        return Err(MsekError::NodeCount { z_channels: d, graph_nodes: graph.node_count() });
    }
    if params.heads.is_empty() {
        return Err(MsekError::NoHeads);
    }
    for (index, &w) in params.heads.iter().enumerate() {
        let ws = g.shape(w).to_vec();
        if ws != [n, n] {
            return Err(MsekError::HeadShape { index, shape: ws, n });
        }
    }

    let h = g.transpose_last2(z_v)?; // (b, d, n), channel-major
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for &w in &params.heads {
        let hw = project(g, h, w)?;
        let e = scores(g, hw)?;
        let alpha = neighbor_softmax(g, e, graph)?;
        head_outputs.push(g.batched_matmul(alpha, hw)?); // (b, d, n)
    }
    // Pairwise-tree sum then one scale: for a power-of-two head count with
    // identical heads this collapses bit-exactly onto the single-head value.
    let mut layer = head_outputs;
    while layer.len() > 1 {
        let mut next = Vec::with_capacity(layer.len().div_ceil(2));
        for pair in layer.chunks(2) {
            next.push(if pair.len() == 2 { g.add(pair[0], pair[1])? } else { pair[0] });
        }
        layer = next;
    }
    let avg = g.scale(layer[0], 1.0 / params.heads.len() as f64);
    Ok(g.transpose_last2(avg)?) // back to (b, n, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn leaf(g: &mut Graph, data: &[f64], shape: &[usize]) -> Tensor {
        g.leaf(data.to_vec(), shape, true).unwrap()
    }

    fn full_graph(d: usize) -> ChannelGraph {
        let rows: Vec<String> = (0..d).map(|_| "1".repeat(d)).collect();
        ChannelGraph::from_row_strings(&rows).unwrap()
    }

    fn identity(n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        w
    }

    #[test]
    fn build_graph_forces_self_loops_and_rejects_zero() {
        assert!(matches!(ChannelGraph::build(0, 0), Err(MsekError::EmptyGraph)));
        let g1 = ChannelGraph::build(1, 99).unwrap();
        assert!(g1.is_edge(0, 0));
        for seed in 0..5 {
            let g = ChannelGraph::build(9, seed).unwrap();
            for i in 0..9 {
                assert!(g.is_edge(i, i), "seed {seed}, node {i}");
            }
        }
    }

    #[test]
    fn build_graph_is_seed_deterministic() {
        let a = ChannelGraph::build(16, 5).unwrap();
        let b = ChannelGraph::build(16, 5).unwrap();
        let c = ChannelGraph::build(16, 6).unwrap();
        assert_eq!(a.to_row_strings(), b.to_row_strings());
        assert_ne!(a.to_row_strings(), c.to_row_strings());
    }

    #[test]
    fn build_graph_keeps_about_half_the_off_diagonal() {
        let g = ChannelGraph::build(64, 7).unwrap();
        let density = g.off_diagonal_density();
        assert!((0.45..=0.55).contains(&density), "density {density}");
    }

    #[test]
    fn row_string_round_trip_and_validation() {
        let g = ChannelGraph::build(12, 3).unwrap();
        let rows = g.to_row_strings();
        let back = ChannelGraph::from_row_strings(&rows).unwrap();
        assert_eq!(back.to_row_strings(), rows);
        // Missing self-loop, bad char, ragged row.
        let bad = vec!["01".to_string(), "11".to_string()];
        assert!(matches!(
            ChannelGraph::from_row_strings(&bad),
            Err(MsekError::BadAdjacency { .. })
        ));
        let bad = vec!["1x".to_string(), "11".to_string()];
        assert!(matches!(
            ChannelGraph::from_row_strings(&bad),
            Err(MsekError::BadAdjacency { .. })
        ));
        let bad = vec!["111".to_string(), "11".to_string()];
        assert!(matches!(
            ChannelGraph::from_row_strings(&bad),
            Err(MsekError::BadAdjacency { .. })
        ));
    }

    #[test]
    fn edge_coeffs_match_hand_values() {
        // n=2, W=I, h_0=[1,2], h_1=[3,4]: e_01 = (1*3 + 2*4)/sqrt(2).
        let mut g = Graph::new();
        let h = leaf(&mut g, &[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let w = leaf(&mut g, &identity(2), &[2, 2]);
        let e = edge_coeffs(&mut g, h, w).unwrap();
        assert_eq!(g.shape(e), &[1, 2, 2]);
        let s = 2f64.sqrt();
        let expect = [5.0 / s, 11.0 / s, 11.0 / s, 25.0 / s];
        for (a, b) in g.data(e).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((g.data(e)[1] - 7.7782).abs() < 1e-4);
    }

    #[test]
    fn edge_coeffs_annihilate_under_zero_weights_and_normalize_units() {
        let mut g = Graph::new();
        let h = leaf(&mut g, &[1.0, 0.0, 1.0, 0.0], &[1, 2, 2]);
        let zero = leaf(&mut g, &[0.0; 4], &[2, 2]);
        let e = edge_coeffs(&mut g, h, zero).unwrap();
        assert!(g.data(e).iter().all(|v| *v == 0.0));
        // W = I with unit-vector features: every score is 1/sqrt(n).
        let eye = leaf(&mut g, &identity(2), &[2, 2]);
        let e = edge_coeffs(&mut g, h, eye).unwrap();
        for v in g.data(e) {
            assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_softmax_hand_cases() {
        let mut g = Graph::new();
        // Self-loop-only node: weight 1 on itself.
        let lonely = ChannelGraph::from_row_strings(&["10".into(), "11".into()]).unwrap();
        let e = leaf(&mut g, &[3.0, 9.0, -1.0, 2.0], &[1, 2, 2]);
        let a = neighbor_softmax(&mut g, e, &lonely).unwrap();
        let data = g.data(a);
        assert_eq!(data[0], 1.0);
        assert_eq!(data[1], 0.0); // outside the neighborhood: exact zero
        // Row 1 over two neighbors with scores [-1, 2].
        let z = (-1f64 - 2.0).exp();
        assert!((data[2] - z / (z + 1.0)).abs() < 1e-12);
        assert!((data[3] - 1.0 / (z + 1.0)).abs() < 1e-12);

        // Equal coefficients over four neighbors -> 0.25 each.
        let full = full_graph(4);
        let e = leaf(&mut g, &[2.0; 16], &[1, 4, 4]);
        let a = neighbor_softmax(&mut g, e, &full).unwrap();
        assert!(g.data(a).iter().all(|v| (v - 0.25).abs() < 1e-12));

        // The documented two-neighbor example [1, 2] -> [0.2689, 0.7311].
        let pair = full_graph(2);
        let e = leaf(&mut g, &[1.0, 2.0, 0.0, 0.0], &[1, 2, 2]);
        let a = neighbor_softmax(&mut g, e, &pair).unwrap();
        assert!((g.data(a)[0] - 0.2689).abs() < 1e-4);
        assert!((g.data(a)[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn neighbor_softmax_rows_are_distributions_on_their_support() {
        let mut g = Graph::new();
        let graph = ChannelGraph::build(6, 17).unwrap();
        let mut rng = crate::util::rng_from_seed(18);
        let data: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.random_range(-4.0..4.0)).collect();
        let e = leaf(&mut g, &data, &[2, 6, 6]);
        let a = neighbor_softmax(&mut g, e, &graph).unwrap();
        for (flat, row) in g.data(a).chunks(6).enumerate() {
            let i = flat % 6;
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (j, v) in row.iter().enumerate() {
                if !graph.is_edge(i, j) {
                    assert_eq!(*v, 0.0, "({i},{j}) outside the neighborhood");
                }
            }
        }
    }

    #[test]
    fn single_node_identity_head_is_a_no_op() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[0.3, -1.2, 4.0], &[1, 3, 1]);
        let graph = full_graph(1);
        let params = MsekParams { heads: vec![leaf(&mut g, &identity(3), &[3, 3])] };
        let out = msek_forward(&mut g, z, &graph, &params).unwrap();
        assert_eq!(g.data(out), g.data(z));
    }

    #[test]
    fn zero_heads_annihilate() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[0.5, -0.25, 1.5, 2.0, 0.0, -1.0], &[1, 3, 2]);
        let graph = ChannelGraph::build(2, 4).unwrap();
        let zero = leaf(&mut g, &[0.0; 9], &[3, 3]);
        let params = MsekParams { heads: vec![zero, zero] };
        let out = msek_forward(&mut g, z, &graph, &params).unwrap();
        assert!(g.data(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_node_forward_matches_a_direct_equation_oracle() {
        // b=1, n=2, d=2, fully connected, K=1: evaluate the projection,
        // scaled dot-product scores, neighborhood softmax, and aggregation
        // directly on scalars and compare.
        let mut g = Graph::new();
        let zdata = [0.4, -0.7, 1.3, 0.2]; // (1, n=2, d=2): tokens [0.4,-0.7], [1.3,0.2]
        let wdata = [0.9, -0.3, 0.5, 1.1];
        let z = leaf(&mut g, &zdata, &[1, 2, 2]);
        let w = leaf(&mut g, &wdata, &[2, 2]);
        let graph = full_graph(2);
        let params = MsekParams { heads: vec![w] };
        let out = msek_forward(&mut g, z, &graph, &params).unwrap();

        // Channel-major features: h_i[t] = z[t][i].
        let h = [[zdata[0], zdata[2]], [zdata[1], zdata[3]]];
        let wmat = [[wdata[0], wdata[1]], [wdata[2], wdata[3]]];
        let proj = |v: [f64; 2]| {
            [
                wmat[0][0] * v[0] + wmat[0][1] * v[1],
                wmat[1][0] * v[0] + wmat[1][1] * v[1],
            ]
        };
        let hw = [proj(h[0]), proj(h[1])];
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let sqrt_n = 2f64.sqrt();
        let mut expected = [[0.0; 2]; 2]; // hat_h[i]
        for i in 0..2 {
            let e0 = dot(hw[i], hw[0]) / sqrt_n;
            let e1 = dot(hw[i], hw[1]) / sqrt_n;
            let m = e0.max(e1);
            let (x0, x1) = ((e0 - m).exp(), (e1 - m).exp());
            let (a0, a1) = (x0 / (x0 + x1), x1 / (x0 + x1));
            for t in 0..2 {
                expected[i][t] = a0 * hw[0][t] + a1 * hw[1][t];
            }
        }
        // Output layout is (1, n, d): out[t][i] = hat_h[i][t].
        let data = g.data(out);
        for t in 0..2 {
            for i in 0..2 {
                let got = data[t * 2 + i];
                assert!(
                    (got - expected[i][t]).abs() < 1e-12,
                    "t={t} i={i}: {got} vs {}",
                    expected[i][t]
                );
            }
        }
    }

    #[test]
    fn batch_elements_do_not_mix() {
        let mut g = Graph::new();
        let graph = ChannelGraph::build(3, 8).unwrap();
        let mut rng = crate::util::rng_from_seed(9);
        let mut data: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = MsekParams::init(&mut g, 2, 4, 10).unwrap();
        let z = leaf(&mut g, &data, &[2, 4, 3]);
        let out1 = msek_forward(&mut g, z, &graph, &params).unwrap();
        let batch1_before: Vec<f64> = g.data(out1)[12..].to_vec();
        // Perturb only batch element 0 and rerun.
        for v in &mut data[..12] {
            *v += 0.37;
        }
        let z2 = leaf(&mut g, &data, &[2, 4, 3]);
        let out2 = msek_forward(&mut g, z2, &graph, &params).unwrap();
        assert_ne!(&g.data(out2)[..12], &g.data(out1)[..12]);
        assert_eq!(&g.data(out2)[12..], &batch1_before[..], "batch 1 must be untouched");
    }

    #[test]
    fn equal_heads_collapse_onto_the_single_head_output() {
        let mut g = Graph::new();
        let graph = ChannelGraph::build(3, 12).unwrap();
        let mut rng = crate::util::rng_from_seed(13);
        let wdata: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zdata: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = leaf(&mut g, &zdata, &[2, 4, 3]);
        for k in [2usize, 4, 8] {
            let heads: Vec<Tensor> =
                (0..k).map(|_| leaf(&mut g, &wdata, &[4, 4])).collect();
            let single = MsekParams { heads: heads[..1].to_vec() };
            let multi = MsekParams { heads };
            let a = msek_forward(&mut g, z, &graph, &single).unwrap();
            let b = msek_forward(&mut g, z, &graph, &multi).unwrap();
            assert_eq!(g.data(a), g.data(b), "K={k}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let graph = ChannelGraph::build(3, 20).unwrap();
        let f = move |g: &mut Graph, inputs: &[Tensor]| {
            let params = MsekParams { heads: vec![inputs[1], inputs[2]] };
            let out = msek_forward(g, inputs[0], &graph, &params).map_err(|e| match e {
                MsekError::Tensor(t) => t,
                other => panic!("unexpected: {other}"),
            })?;
            Ok(g.mean(out))
        };
        let mut rng = crate::util::rng_from_seed(21);
        let z: Vec<f64> = (0..2 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            &f,
            &[(z, vec![2, 2, 3]), (w1, vec![2, 2]), (w2, vec![2, 2])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative gradient error {err}");
    }

    #[test]
    fn shape_errors_name_the_offenders() {
        let mut g = Graph::new();
        let z = leaf(&mut g, &[0.0; 12], &[1, 4, 3]);
        let graph = ChannelGraph::build(5, 0).unwrap();
        let params = MsekParams::init(&mut g, 1, 4, 0).unwrap();
        match msek_forward(&mut g, z, &graph, &params) {
            Err(MsekError::NodeCount { z_channels: 3, graph_nodes: 5 }) => {}
            other => panic!("expected NodeCount, got {:?}", other.map(|_| ())),
        }
        let graph = ChannelGraph::build(3, 0).unwrap();
        let bad = MsekParams { heads: vec![leaf(&mut g, &[0.0; 9], &[3, 3])] };
        match msek_forward(&mut g, z, &graph, &bad) {
            Err(MsekError::HeadShape { index: 0, n: 4, .. }) => {}
            other => panic!("expected HeadShape, got {:?}", other.map(|_| ())),
        }
        let none = MsekParams { heads: vec![] };
        assert!(matches!(msek_forward(&mut g, z, &graph, &none), Err(MsekError::NoHeads)));
    }
}

//! Kinematic-chain graph and graph-convolution building blocks.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{contract_err, Result};

/// Joint graph of an `n`-joint serial arm.
///
/// `adjacency[i·n + j] = 1` means node `j` sends a message to node `i`.
/// Edges: self-loops, both directions between consecutive joints, and an
/// edge from the last joint (the one carrying the end-effector) into every
/// node.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotGraph {
    n: usize,
    adjacency: Vec<f64>,
    normalized: Arc<[f64]>,
}

impl RobotGraph {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return contract_err("a robot graph needs at least one node");
        }
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            adjacency[i * n + i] = 1.0;
            adjacency[i * n + n - 1] = 1.0;
            if i + 1 < n {
                adjacency[i * n + i + 1] = 1.0;
                adjacency[(i + 1) * n + i] = 1.0;
            }
        }
        let normalized = normalize(&adjacency, n).into();
        Ok(Self {
            n,
            adjacency,
            normalized,
        })
    }

    /// Arbitrary 0/1 adjacency (row-major, `a[i·n + j] = 1` for an edge
    /// `j → i`). Every node needs at least one incoming and one outgoing edge.
    pub fn from_adjacency(n: usize, adjacency: Vec<f64>) -> Result<Self> {
        if n < 1 || adjacency.len() != n * n {
            return contract_err(format!("{} adjacency entries for {n} nodes", adjacency.len()));
        }
        if adjacency.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract_err("adjacency entries must be 0 or 1");
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| adjacency[i * n + j]).sum();
            let col: f64 = (0..n).map(|j| adjacency[j * n + i]).sum();
            if row == 0.0 || col == 0.0 {
                return contract_err(format!("node {i} is isolated"));
            }
        }
        let normalized = normalize(&adjacency, n).into();
        Ok(Self {
            n,
            adjacency,
            normalized,
        })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// `D_r^{-1/2} A D_c^{-1/2}` with row-sum and column-sum degrees.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn normalized_shared(&self) -> Arc<[f64]> {
        Arc::clone(&self.normalized)
    }

    /// Both matrices as aligned decimal text.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let n = self.n;
        let _ = writeln!(out, "nodes: {n}");
        let _ = writeln!(out, "adjacency A (row i receives from column j):");
        for i in 0..n {
            let row: Vec<String> = (0..n)
                .map(|j| format!("{:>2}", self.adjacency[i * n + j] as u8))
                .collect();
            let _ = writeln!(out, "  {}", row.join(" "));
        }
        let _ = writeln!(out, "normalized propagation matrix:");
        for i in 0..n {
            let row: Vec<String> = (0..n)
                .map(|j| format!("{:>8.5}", self.normalized[i * n + j]))
                .collect();
            let _ = writeln!(out, "  {}", row.join(" "));
        }
        out
    }
}

fn normalize(a: &[f64], n: usize) -> Vec<f64> {
    let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j]).sum()).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if a[i * n + j] != 0.0 {
                out[i * n + j] = a[i * n + j] / (row[i] * col[j]).sqrt();
            }
        }
    }
    out
}

/// One graph convolution over a stacked batch of node matrices:
/// `act(Â · V · W + b)` where `v` is `(B·n) × d_in`.
pub fn gcn_layer(
    tape: &mut Tape,
    v: Var,
    graph: &RobotGraph,
    weight: Var,
    bias: Var,
    act: Activation,
) -> Result<Var> {
    let mixed = tape.propagate(v, graph.normalized_shared(), graph.nodes())?;
    let lin = tape.matmul(mixed, weight)?;
    let out = tape.add_bias(lin, bias)?;
    Ok(tape.activation(out, act))
}

/// Mean over the nodes of each graph in the batch: `(B·n) × h` → `B × h`.
pub fn mean_pool(tape: &mut Tape, v: Var, graph: &RobotGraph) -> Result<Var> {
    tape.node_mean(v, graph.nodes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn ones_at(g: &RobotGraph, row: usize) -> Vec<usize> {
        let n = g.nodes();
        (0..n).filter(|&j| g.adjacency()[row * n + j] == 1.0).collect()
    }

    #[test]
    fn two_nodes_are_complete() {
        let g = RobotGraph::new(2).unwrap();
        assert_eq!(g.adjacency(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(g.normalized().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn six_node_edge_rules() {
        let g = RobotGraph::new(6).unwrap();
        assert_eq!(ones_at(&g, 0), vec![0, 1, 5]);
        assert_eq!(ones_at(&g, 3), vec![2, 3, 4, 5]);
        assert_eq!(ones_at(&g, 5), vec![4, 5]);
        for i in 0..6 {
            assert_eq!(g.adjacency()[i * 6 + i], 1.0);
            assert_eq!(g.adjacency()[i * 6 + 5], 1.0);
        }
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(matches!(RobotGraph::new(0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn single_node_identity_layer() {
        let g = RobotGraph::new(1).unwrap();
        assert_eq!(g.normalized(), &[1.0]);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[1, 3], vec![0.2, -1.0, 4.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.constant(Tensor::new(&[3, 3], eye).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let out = gcn_layer(&mut tape, v, &g, w, b, Activation::Identity).unwrap();
        assert_eq!(tape.value(out).data(), &[0.2, -1.0, 4.0]);
    }

    #[test]
    fn mean_pool_of_two_rows() {
        let g = RobotGraph::new(2).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let p = mean_pool(&mut tape, v, &g).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn dump_lists_both_matrices() {
        let text = RobotGraph::new(3).unwrap().dump();
        assert!(text.contains("nodes: 3"));
        assert!(text.contains(" 1  1  1"));
        assert!(text.contains("0.40825"));
    }
}

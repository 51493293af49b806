//! Exact k-nearest-neighbour graph construction.
//!
//! The graph is built from scratch from the current node embeddings: a full
//! `n×n` squared-distance matrix by direct subtraction, then a bounded top-k
//! selection per row. Self-loops are excluded and ties go to the lower node
//! index, so the output is a total function of the input bits.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, ThreadMode};

/// Recorded in profile metadata so reports state what was timed.
pub const KNN_ALGORITHM: &str =
    "exact brute force: n*n squared euclidean distances (direct subtraction), bounded insertion top-k per row";

const INDEX_BYTES: usize = std::mem::size_of::<u32>();
const VALUE_BYTES: usize = std::mem::size_of::<f32>();

/// `n×k` neighbour indices, row `i` listing the neighbours of node `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    n: usize,
    k: usize,
    data: Vec<u32>,
}

impl IndexMatrix {
    /// Checked constructor: every entry in range, no self-loops, no duplicates within a row.
    pub fn from_rows(n: usize, k: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::Shape {
                op: "index_matrix",
                left: vec![n, k],
                right: vec![data.len()],
            });
        }
        let m = IndexMatrix { n, k, data };
        for i in 0..n {
            let row = m.row(i);
            for (j, &v) in row.iter().enumerate() {
                if v as usize >= n {
                    return Err(Error::Index {
                        row: i,
                        col: j,
                        value: v as usize,
                        len: n,
                    });
                }
                if v as usize == i {
                    return Err(Error::config(format!("self-loop in neighbour row {i}")));
                }
                if row[..j].contains(&v) {
                    return Err(Error::config(format!("duplicate neighbour {v} in row {i}")));
                }
            }
        }
        Ok(m)
    }

    pub(crate) fn from_rows_unchecked(n: usize, k: usize, data: Vec<u32>) -> Self {
        debug_assert_eq!(data.len(), n * k);
        IndexMatrix { n, k, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * INDEX_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    neighbors: IndexMatrix,
    source_dim: usize,
}

impl KnnGraph {
    pub fn new(neighbors: IndexMatrix, source_dim: usize) -> Result<Self> {
        if neighbors.k >= neighbors.n {
            return Err(Error::KTooLarge {
                k: neighbors.k,
                n: neighbors.n,
            });
        }
        if neighbors.k == 0 {
            return Err(Error::KTooSmall);
        }
        Ok(KnnGraph { neighbors, source_dim })
    }

    pub fn neighbors(&self) -> &IndexMatrix {
        &self.neighbors
    }

    pub fn k(&self) -> usize {
        self.neighbors.k
    }

    pub fn n(&self) -> usize {
        self.neighbors.n
    }

    /// Width of the embedding space the graph was built in.
    pub fn source_dim(&self) -> usize {
        self.source_dim
    }
}

/// Shared handle so static layers can reuse a graph without copying it.
pub type SharedGraph = Arc<KnnGraph>;

fn check_points(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "knn",
            left: x.shape().to_vec(),
            right: vec![],
        });
    }
    let (n, c) = (x.dim(0), x.dim(1));
    if n < 2 {
        return Err(Error::TooFewPoints);
    }
    Ok((n, c))
}

/// `out[i][j] = Σ_d (x[i][d] − x[j][d])²`, accumulated over `d` in ascending order.
pub fn pairwise_sq_distances(x: &Tensor) -> Result<Tensor> {
    pairwise_sq_distances_with(x, ThreadMode::Single)
}

pub fn pairwise_sq_distances_with(x: &Tensor, mode: ThreadMode) -> Result<Tensor> {
    let (n, _) = check_points(x)?;
    // Column-major copy so the inner loop runs over contiguous `j`.
    let cols = x.transpose()?;
    let mut out = vec![0.0f32; n * n];
    let fill = |(i, row): (usize, &mut [f32])| distance_row(x.row(i), cols.data(), n, row);
    match mode {
        ThreadMode::Single => out.chunks_mut(n).enumerate().for_each(fill),
        ThreadMode::Parallel => out.par_chunks_mut(n).enumerate().for_each(fill),
    }
    Tensor::new(vec![n, n], out)
}

fn distance_row(point: &[f32], cols: &[f32], n: usize, out: &mut [f32]) {
    out.fill(0.0);
    for (d, &xi) in point.iter().enumerate() {
        let col = &cols[d * n..(d + 1) * n];
        for (acc, &xj) in out.iter_mut().zip(col) {
            let diff = xj - xi;
            *acc += diff * diff;
        }
    }
}

/// Builds the directed kNN graph over the rows of `x`.
pub fn knn_graph(x: &Tensor, k: usize) -> Result<KnnGraph> {
    knn_graph_with(x, k, ThreadMode::Single)
}

pub fn knn_graph_with(x: &Tensor, k: usize, mode: ThreadMode) -> Result<KnnGraph> {
    let (n, c) = check_points(x)?;
    if k < 1 {
        return Err(Error::KTooSmall);
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let dist = pairwise_sq_distances_with(x, mode)?;
    let mut idx = vec![0u32; n * k];
    let select = |(i, out): (usize, &mut [u32])| select_row(dist.row(i), i, out);
    match mode {
        ThreadMode::Single => idx.chunks_mut(k).enumerate().for_each(select),
        ThreadMode::Parallel => idx.par_chunks_mut(k).enumerate().for_each(select),
    }
    Ok(KnnGraph {
        neighbors: IndexMatrix::from_rows_unchecked(n, k, idx),
        source_dim: c,
    })
}

/// Keeps the `k` smallest `(distance, index)` pairs of one row, skipping `center`.
///
/// The buffer stays sorted; a candidate enters only if it beats the current
/// k-th entry. Candidates arrive in ascending index order, so an equal distance
/// never displaces an earlier index.
fn select_row(dists: &[f32], center: usize, out: &mut [u32]) {
    let k = out.len();
    let mut best: Vec<(f32, u32)> = Vec::with_capacity(k + 1);
    for (j, &d) in dists.iter().enumerate() {
        if j == center {
            continue;
        }
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, j as u32));
        best.truncate(k);
    }
    for (o, &(_, j)) in out.iter_mut().zip(&best) {
        *o = j;
    }
}

/// Bytes of the k-dependent kNN outputs: the index matrix plus the gathered
/// `n×k×c` neighbour tensor. The `n×n` distance workspace is not included.
pub fn knn_bytes(n: usize, k: usize, c: usize) -> usize {
    n * k * INDEX_BYTES + n * k * c * VALUE_BYTES
}

/// k-independent distance-matrix workspace.
pub fn knn_workspace_bytes(n: usize) -> usize {
    n * n * VALUE_BYTES
}

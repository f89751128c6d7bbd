//! Similarity graphs (ε-threshold and KNN) and their normalized operators.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::fusion::SimilarityMatrix;

pub const DEFAULT_EPSILON: f64 = 0.85;
pub const TRAIN_KNN_K: usize = 10;
pub const INFERENCE_KNN_K: usize = 16;
const MIN_KNN_WEIGHT: f64 = 1e-9;

/// Undirected weighted graph with strictly sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphBuildConfig {
    pub epsilon: f64,
    pub k: usize,
    pub weighted: bool,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            k: TRAIN_KNN_K,
            weighted: true,
        }
    }
}

impl SimilarityGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); n],
        }
    }

    /// Builds from undirected edges; duplicate pairs keep the last weight.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!("edge ({i},{j}) out of range for n={n}")));
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop on node {i}")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidParameter(format!("edge ({i},{j}) has weight {w}")));
            }
            maps[i].insert(j, w);
            maps[j].insert(i, w);
        }
        Ok(Self {
            adjacency: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        })
    }

    /// Unit-weight graph from unordered pairs.
    pub fn from_unweighted(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(n, edges.iter().map(|&(i, j)| (i, j, 1.0)))
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn weighted_degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|pos| self.adjacency[i][pos].1)
    }

    /// Each undirected edge once, `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, adj)| {
            adj.iter()
                .filter(move |&&(j, _)| j > i)
                .map(move |&(j, w)| (i, j, w))
        })
    }

    /// Subgraph induced by `nodes`; node `k` of the result is `nodes[k]`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> SimilarityGraph {
        let mut local = vec![usize::MAX; self.n()];
        for (k, &v) in nodes.iter().enumerate() {
            local[v] = k;
        }
        let adjacency = nodes
            .iter()
            .map(|&v| {
                let mut adj: Vec<(usize, f64)> = self.adjacency[v]
                    .iter()
                    .filter(|&&(u, _)| local[u] != usize::MAX)
                    .map(|&(u, w)| (local[u], w))
                    .collect();
                adj.sort_by_key(|&(u, _)| u);
                adj
            })
            .collect();
        SimilarityGraph { adjacency }
    }

    /// Same graph under the relabeling `old -> perm[old]`.
    pub fn permuted(&self, perm: &[usize]) -> SimilarityGraph {
        let edges: Vec<_> = self.edges().map(|(i, j, w)| (perm[i], perm[j], w)).collect();
        SimilarityGraph::from_edges(self.n(), edges).expect("permutation preserves validity")
    }

    /// Edge-list text: header `n m`, then one `i j weight` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {}\n", self.n(), self.edge_count());
        for (i, j, w) in self.edges() {
            out.push_str(&format!("{i} {j} {w}\n"));
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty edge list".into()))?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>, what: &str| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad {what} in edge list")))
        };
        let n = parse_usize(parts.next(), "node count")?;
        let m = parse_usize(parts.next(), "edge count")?;
        let mut edges = Vec::with_capacity(m);
        for line in lines {
            let mut p = line.split_whitespace();
            let i = parse_usize(p.next(), "source")?;
            let j = parse_usize(p.next(), "target")?;
            let w: f64 = p
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad weight in `{line}`")))?;
            edges.push((i, j, w));
        }
        if edges.len() != m {
            return Err(Error::Parse(format!("header declares {m} edges, found {}", edges.len())));
        }
        Self::from_edges(n, edges)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edge_list(&text)
    }
}

/// Edge `(i, j)` whenever `S[i][j] >= epsilon`, weighted by the similarity.
pub fn build_epsilon_graph(s: &SimilarityMatrix, epsilon: f64) -> Result<SimilarityGraph> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} not in (0, 1]")));
    }
    let n = s.n();
    let adjacency = (0..n)
        .into_par_iter()
        .map(|i| {
            s.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v >= epsilon)
                .map(|(j, &v)| (j, v))
                .collect()
        })
        .collect();
    Ok(SimilarityGraph { adjacency })
}

/// Each node links to its `k` most cosine-similar nodes (ties toward the lower
/// index); the result is the symmetrized union.
pub fn build_knn_graph(m: &EmbeddingMatrix, k: usize) -> Result<SimilarityGraph> {
    let n = m.len();
    if k < 1 || k >= n {
        return Err(Error::InvalidParameter(format!("k={k} out of range for n={n}")));
    }
    let d = m.dim();
    let mut unit = vec![0f64; n * d];
    for (i, row) in m.rows().enumerate() {
        let nr = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if nr == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        for (o, &x) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = x as f64 / nr;
        }
    }
    let chosen: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ui = &unit[i * d..(i + 1) * d];
            let mut cands: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let uj = &unit[j * d..(j + 1) * d];
                    (j, ui.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cands.truncate(k);
            cands
        })
        .collect();
    let edges = chosen.into_iter().enumerate().flat_map(|(i, c)| {
        c.into_iter()
            .map(move |(j, s)| (i, j, s.clamp(MIN_KNN_WEIGHT, 1.0)))
    });
    SimilarityGraph::from_edges(n, edges)
}

/// Compressed sparse row matrix in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|&(j, _)| j);
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.indptr[i]..self.indptr[i + 1];
        match self.indices[span.clone()].binary_search(&j) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        out
    }

    /// `self · x` for a row-major `n_cols x c` dense matrix.
    pub fn mul_dense(&self, x: &[f64], c: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols * c, "dense operand shape");
        let mut out = vec![0.0; self.n_rows * c];
        out.par_chunks_mut(c.max(1))
            .enumerate()
            .for_each(|(i, orow)| {
                for (j, v) in self.row(i) {
                    for (o, &xv) in orow.iter_mut().zip(&x[j * c..(j + 1) * c]) {
                        *o += v * xv;
                    }
                }
            });
        out
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with unit edge weights.
pub fn normalized_adjacency(g: &SimilarityGraph) -> CsrMatrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt())
        .collect();
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = g
                .neighbors(i)
                .iter()
                .map(|&(j, _)| (j, inv_sqrt[i] * inv_sqrt[j]))
                .collect();
            row.push((i, inv_sqrt[i] * inv_sqrt[i]));
            row
        })
        .collect();
    CsrMatrix::from_rows(n, rows)
}

/// `D^{-1/2} W D^{-1/2}` with similarity weights and no self-loops.
pub fn lgc_smoothing_operator(g: &SimilarityGraph) -> CsrMatrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = g.weighted_degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let rows = (0..n)
        .map(|i| {
            g.neighbors(i)
                .iter()
                .map(|&(j, w)| (j, inv_sqrt[i] * w * inv_sqrt[j]))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(n, rows)
}

//! Node centralities over the unit-weight skeleton of a similarity graph.

use std::collections::VecDeque;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

pub const PAGERANK_DAMPING: f64 = 0.85;
pub const POWER_TOL: f64 = 1e-9;
const PAGERANK_MAX_ITER: usize = 200;
const EIGENVECTOR_MAX_ITER: usize = 10_000;
const BRANDES_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralityMeasure {
    Degree,
    Betweenness,
    Closeness,
    Pagerank,
    Eigenvector,
    StructuralHoles,
    Mci,
}

impl CentralityMeasure {
    /// Measures combined by MCI.
    pub const MCI_COMPONENTS: [CentralityMeasure; 6] = [
        CentralityMeasure::Degree,
        CentralityMeasure::Pagerank,
        CentralityMeasure::Betweenness,
        CentralityMeasure::Closeness,
        CentralityMeasure::Eigenvector,
        CentralityMeasure::StructuralHoles,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CentralityMeasure::Degree => "degree",
            CentralityMeasure::Betweenness => "betweenness",
            CentralityMeasure::Closeness => "closeness",
            CentralityMeasure::Pagerank => "pagerank",
            CentralityMeasure::Eigenvector => "eigenvector",
            CentralityMeasure::StructuralHoles => "structural_holes",
            CentralityMeasure::Mci => "mci",
        }
    }
}

impl FromStr for CentralityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "degree" => CentralityMeasure::Degree,
            "betweenness" => CentralityMeasure::Betweenness,
            "closeness" => CentralityMeasure::Closeness,
            "pagerank" => CentralityMeasure::Pagerank,
            "eigenvector" => CentralityMeasure::Eigenvector,
            "structural_holes" => CentralityMeasure::StructuralHoles,
            "mci" => CentralityMeasure::Mci,
            other => return Err(Error::Parse(format!("unknown centrality measure `{other}`"))),
        })
    }
}

impl std::fmt::Display for CentralityMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralityScores {
    pub measure: CentralityMeasure,
    pub scores: Vec<f64>,
    pub higher_is_better: bool,
}

impl CentralityScores {
    fn new(measure: CentralityMeasure, scores: Vec<f64>) -> Self {
        debug_assert!(scores.iter().all(|s| s.is_finite()));
        Self {
            measure,
            scores,
            higher_is_better: true,
        }
    }

    /// Node indices from most to least central; ties keep the lower index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (self.scores[a], self.scores[b]);
            let ord = if self.higher_is_better { sb.total_cmp(&sa) } else { sa.total_cmp(&sb) };
            ord.then(a.cmp(&b))
        });
        order
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.measure);
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i} {s}\n"));
        }
        out
    }
}

/// Brandes accumulation over breadth-first shortest-path DAGs; each
/// unordered pair counted once.
pub fn betweenness_centrality(g: &SimilarityGraph) -> CentralityScores {
    let n = g.n();
    let sources: Vec<usize> = (0..n).collect();
    let partials: Vec<Vec<f64>> = sources
        .par_chunks(BRANDES_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n];
            let mut sigma = vec![0.0f64; n];
            let mut dist = vec![usize::MAX; n];
            let mut delta = vec![0.0f64; n];
            let mut stack = Vec::with_capacity(n);
            let mut queue = VecDeque::with_capacity(n);
            for &s in chunk {
                sigma.fill(0.0);
                dist.fill(usize::MAX);
                delta.fill(0.0);
                stack.clear();
                sigma[s] = 1.0;
                dist[s] = 0;
                queue.push_back(s);
                while let Some(v) = queue.pop_front() {
                    stack.push(v);
                    for &(w, _) in g.neighbors(v) {
                        if dist[w] == usize::MAX {
                            dist[w] = dist[v] + 1;
                            queue.push_back(w);
                        }
                        if dist[w] == dist[v] + 1 {
                            sigma[w] += sigma[v];
                        }
                    }
                }
                while let Some(w) = stack.pop() {
                    for &(v, _) in g.neighbors(w) {
                        if dist[v] != usize::MAX && dist[v] + 1 == dist[w] {
                            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
                        }
                    }
                    if w != s {
                        acc[w] += delta[w];
                    }
                }
            }
            acc
        })
        .collect();
    let mut scores = vec![0.0; n];
    for p in &partials {
        for (s, v) in scores.iter_mut().zip(p) {
            *s += v;
        }
    }
    for s in &mut scores {
        *s /= 2.0;
    }
    CentralityScores::new(CentralityMeasure::Betweenness, scores)
}

/// Power iteration with uniform teleport; isolated-node mass is spread uniformly.
pub fn pagerank_centrality(
    g: &SimilarityGraph,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CentralityScores> {
    let n = g.n();
    if n == 0 {
        return Ok(CentralityScores::new(CentralityMeasure::Pagerank, Vec::new()));
    }
    let nf = n as f64;
    let mut x = vec![1.0 / nf; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&i| g.degree(i) == 0).map(|i| x[i]).sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        let next: Vec<f64> = (0..n)
            .map(|i| {
                base + damping
                    * g.neighbors(i)
                        .iter()
                        .map(|&(j, _)| x[j] / g.degree(j) as f64)
                        .sum::<f64>()
            })
            .collect();
        residual = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if residual < tol {
            let total: f64 = x.iter().sum();
            for v in &mut x {
                *v /= total;
            }
            return Ok(CentralityScores::new(CentralityMeasure::Pagerank, x));
        }
    }
    Err(Error::NonConvergence {
        what: "pagerank",
        iterations: max_iter,
        residual,
    })
}

fn degree_centrality(g: &SimilarityGraph) -> Vec<f64> {
    (0..g.n()).map(|i| g.degree(i) as f64).collect()
}

fn harmonic_closeness(g: &SimilarityGraph) -> Vec<f64> {
    let n = g.n();
    (0..n)
        .into_par_iter()
        .map(|s| {
            let mut dist = vec![usize::MAX; n];
            dist[s] = 0;
            let mut queue = VecDeque::from([s]);
            let mut total = 0.0;
            while let Some(v) = queue.pop_front() {
                for &(w, _) in g.neighbors(v) {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        total += 1.0 / dist[w] as f64;
                        queue.push_back(w);
                    }
                }
            }
            total
        })
        .collect()
}

/// Dominant eigenvector of the unit adjacency, found by power iteration on
/// `A + I` (same eigenvectors, no oscillation on bipartite graphs).
fn eigenvector_centrality(g: &SimilarityGraph, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = g.n();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next: Vec<f64> = (0..n)
            .map(|i| x[i] + g.neighbors(i).iter().map(|&(j, _)| x[j]).sum::<f64>())
            .collect();
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut next {
            *v /= norm;
        }
        residual = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = next;
        if residual < tol {
            return Ok(x.into_iter().map(|v| v.max(0.0)).collect());
        }
    }
    Err(Error::NonConvergence {
        what: "eigenvector centrality",
        iterations: max_iter,
        residual,
    })
}

/// Inverse Burt constraint; isolated nodes score 0.
fn structural_holes(g: &SimilarityGraph) -> Vec<f64> {
    let n = g.n();
    (0..n)
        .map(|i| {
            let nbrs = g.neighbors(i);
            if nbrs.is_empty() {
                return 0.0;
            }
            let p_i = 1.0 / nbrs.len() as f64;
            let constraint: f64 = nbrs
                .iter()
                .map(|&(j, _)| {
                    let indirect: f64 = nbrs
                        .iter()
                        .filter(|&&(q, _)| q != j)
                        .filter(|&&(q, _)| g.weight(q, j).is_some())
                        .map(|&(q, _)| p_i / g.degree(q) as f64)
                        .sum();
                    (p_i + indirect).powi(2)
                })
                .sum();
            1.0 / constraint
        })
        .collect()
}

/// Degree, closeness, eigenvector, or structural holes.
pub fn compute_centrality(g: &SimilarityGraph, measure: CentralityMeasure) -> Result<CentralityScores> {
    let scores = match measure {
        CentralityMeasure::Degree => degree_centrality(g),
        CentralityMeasure::Closeness => harmonic_closeness(g),
        CentralityMeasure::Eigenvector => eigenvector_centrality(g, POWER_TOL, EIGENVECTOR_MAX_ITER)?,
        CentralityMeasure::StructuralHoles => structural_holes(g),
        CentralityMeasure::Betweenness => return Ok(betweenness_centrality(g)),
        CentralityMeasure::Pagerank => {
            return pagerank_centrality(g, PAGERANK_DAMPING, POWER_TOL, PAGERANK_MAX_ITER)
        }
        CentralityMeasure::Mci => {
            let parts = CentralityMeasure::MCI_COMPONENTS
                .iter()
                .map(|&m| compute_centrality(g, m))
                .collect::<Result<Vec<_>>>()?;
            return mci_scores(&parts);
        }
    };
    Ok(CentralityScores::new(measure, scores))
}

/// Descending ranks starting at 1; tied scores share their average rank.
fn average_ranks(s: &CentralityScores) -> Vec<f64> {
    let n = s.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ord = s.scores[b].total_cmp(&s.scores[a]);
        if s.higher_is_better { ord } else { ord.reverse() }
    });
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && s.scores[order[end]] == s.scores[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &v in &order[start..end] {
            ranks[v] = avg;
        }
        start = end;
    }
    ranks
}

/// Negative mean rank across measures.
pub fn mci_scores(per_measure: &[CentralityScores]) -> Result<CentralityScores> {
    let first = per_measure
        .first()
        .ok_or_else(|| Error::InvalidParameter("mci needs at least one measure".into()))?;
    let n = first.scores.len();
    if per_measure.iter().any(|s| s.scores.len() != n) {
        return Err(Error::InvalidParameter("centrality inputs cover different node sets".into()));
    }
    let mut total = vec![0.0; n];
    for s in per_measure {
        for (t, r) in total.iter_mut().zip(average_ranks(s)) {
            *t += r;
        }
    }
    let k = per_measure.len() as f64;
    Ok(CentralityScores::new(
        CentralityMeasure::Mci,
        total.into_iter().map(|t| -t / k).collect(),
    ))
}

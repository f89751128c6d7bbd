//! Leiden community detection with weighted modularity.
//!
//! Each pass runs fast local moving, refines every community into
//! well-connected sub-communities (randomized merges restricted to
//! well-connected candidates), then aggregates on the refined partition while
//! keeping the unrefined partition as the starting point of the next level.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Merge-selection temperature of the refinement phase, in edge-weight units.
const REFINE_THETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: Vec<usize>,
    n_communities: usize,
    pub modularity: f64,
}

impl Partition {
    /// Relabels communities to `0..k` in order of first appearance.
    pub fn from_assignment(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment: Vec<usize> = raw
            .iter()
            .map(|&c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            n_communities: map.len(),
            modularity: f64::NAN,
        }
    }

    pub fn singletons(n: usize) -> Self {
        Self::from_assignment(&(0..n).collect::<Vec<_>>())
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn n_communities(&self) -> usize {
        self.n_communities
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Member lists, each sorted ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_communities];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (v, c) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{v} {c}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut p = line.split_whitespace();
            let (Some(v), Some(c)) = (
                p.next().and_then(|s| s.parse::<usize>().ok()),
                p.next().and_then(|s| s.parse::<usize>().ok()),
            ) else {
                return Err(Error::Parse(format!("bad partition line `{line}`")));
            };
            pairs.push((v, c));
        }
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(i, &(v, _))| i != v) {
            return Err(Error::Parse("partition must list nodes 0..n exactly once".into()));
        }
        let raw: Vec<usize> = pairs.into_iter().map(|(_, c)| c).collect();
        Ok(Self::from_assignment(&raw))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeidenConfig {
    pub resolution: f64,
    pub seed: u64,
    pub max_passes: usize,
    pub min_modularity_gain: f64,
}

impl Default for LeidenConfig {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            seed: 0,
            max_passes: 10,
            min_modularity_gain: 1e-9,
        }
    }
}

/// Weighted modularity; zero for edgeless graphs.
pub fn modularity(g: &SimilarityGraph, assignment: &[usize], resolution: f64) -> f64 {
    let two_m: f64 = (0..g.n()).map(|i| g.weighted_degree(i)).sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let k = assignment.iter().copied().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; k];
    let mut total = vec![0.0; k];
    for i in 0..g.n() {
        total[assignment[i]] += g.weighted_degree(i);
        for &(j, w) in g.neighbors(i) {
            if assignment[j] == assignment[i] {
                // each internal edge seen from both ends
                internal[assignment[i]] += w;
            }
        }
    }
    internal
        .iter()
        .zip(&total)
        .map(|(&e2, &kc)| e2 / two_m - resolution * (kc / two_m).powi(2))
        .sum()
}

/// Level graph used during aggregation.
struct LevelGraph {
    adj: Vec<Vec<(usize, f64)>>,
    node_weight: Vec<f64>,
}

impl LevelGraph {
    fn from_graph(g: &SimilarityGraph) -> Self {
        Self {
            adj: (0..g.n()).map(|i| g.neighbors(i).to_vec()).collect(),
            node_weight: (0..g.n()).map(|i| g.weighted_degree(i)).collect(),
        }
    }

    fn n(&self) -> usize {
        self.adj.len()
    }

    fn aggregate(&self, groups: &[usize], n_groups: usize) -> LevelGraph {
        let mut node_weight = vec![0.0; n_groups];
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![Default::default(); n_groups];
        for v in 0..self.n() {
            let gv = groups[v];
            node_weight[gv] += self.node_weight[v];
            for &(u, w) in &self.adj[v] {
                let gu = groups[u];
                if gu != gv {
                    *rows[gv].entry(gu).or_insert(0.0) += w;
                }
            }
        }
        LevelGraph {
            adj: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
            node_weight,
        }
    }
}

struct Ctx {
    resolution: f64,
    two_m: f64,
}

impl Ctx {
    fn gain(&self, w_to: f64, k_v: f64, k_comm: f64) -> f64 {
        w_to - self.resolution * k_v * k_comm / self.two_m
    }
}

/// Edge weight from one node to each neighboring community, in first-seen order.
struct NeighborWeights {
    weight: Vec<f64>,
    mark: Vec<bool>,
    seen: Vec<usize>,
}

impl NeighborWeights {
    fn new(n: usize) -> Self {
        Self {
            weight: vec![0.0; n],
            mark: vec![false; n],
            seen: Vec::new(),
        }
    }

    fn collect(&mut self, adj: &[(usize, f64)], comm: &[usize], keep: impl Fn(usize) -> bool) {
        for &c in &self.seen {
            self.weight[c] = 0.0;
            self.mark[c] = false;
        }
        self.seen.clear();
        for &(u, w) in adj {
            if !keep(u) {
                continue;
            }
            let c = comm[u];
            if !self.mark[c] {
                self.mark[c] = true;
                self.seen.push(c);
            }
            self.weight[c] += w;
        }
    }
}

fn local_move(g: &LevelGraph, comm: &mut [usize], ctx: &Ctx, rng: &mut ChaCha8Rng) -> bool {
    let n = g.n();
    let mut comm_weight = vec![0.0; n];
    let mut comm_size = vec![0usize; n];
    for v in 0..n {
        comm_weight[comm[v]] += g.node_weight[v];
        comm_size[comm[v]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| comm_size[c] == 0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut nw = NeighborWeights::new(n);
    let mut moved = false;

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let current = comm[v];
        let k_v = g.node_weight[v];
        nw.collect(&g.adj[v], comm, |_| true);

        comm_weight[current] -= k_v;
        comm_size[current] -= 1;

        let mut best = current;
        let mut best_gain = ctx.gain(nw.weight[current], k_v, comm_weight[current]);
        for &c in &nw.seen {
            if c == current {
                continue;
            }
            let gain = ctx.gain(nw.weight[c], k_v, comm_weight[c]);
            if gain > best_gain {
                best_gain = gain;
                best = c;
            }
        }
        // an empty community scores exactly 0
        if best_gain < 0.0 && comm_size[current] > 0 {
            if let Some(&e) = empty.last() {
                best = e;
            }
        }
        if comm_size[current] == 0 && best != current {
            empty.push(current);
        }
        if comm_size[best] == 0 && best != current {
            if let Some(pos) = empty.iter().position(|&c| c == best) {
                empty.swap_remove(pos);
            }
        }
        comm[v] = best;
        comm_weight[best] += k_v;
        comm_size[best] += 1;

        if best != current {
            moved = true;
            for &(u, _) in &g.adj[v] {
                if !queued[u] && comm[u] != best {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    moved
}

/// Splits each community of `comm` into well-connected refined sub-communities.
fn refine(g: &LevelGraph, comm: &[usize], ctx: &Ctx, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let mut refined: Vec<usize> = (0..n).collect();
    let mut r_weight = g.node_weight.clone();
    let mut r_size = vec![1usize; n];
    // weight from each refined community to the rest of its parent community
    let mut r_external = vec![0.0; n];
    let mut parent_weight = vec![0.0; n];
    for v in 0..n {
        parent_weight[comm[v]] += g.node_weight[v];
        r_external[v] = g.adj[v]
            .iter()
            .filter(|&&(u, _)| comm[u] == comm[v])
            .map(|&(_, w)| w)
            .sum();
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut nw = NeighborWeights::new(n);
    let mut candidates: Vec<(usize, f64)> = Vec::new();

    for v in order {
        if r_size[refined[v]] != 1 {
            continue;
        }
        let c = comm[v];
        let k_v = g.node_weight[v];
        let k_c = parent_weight[c];
        if r_external[refined[v]] < ctx.resolution * k_v * (k_c - k_v) / ctx.two_m {
            continue;
        }
        nw.collect(&g.adj[v], &refined, |u| comm[u] == c);

        candidates.clear();
        let own = refined[v];
        candidates.push((own, 0.0));
        for &r in &nw.seen {
            if r == own {
                continue;
            }
            let well_connected =
                r_external[r] >= ctx.resolution * r_weight[r] * (k_c - r_weight[r]) / ctx.two_m;
            if !well_connected {
                continue;
            }
            let gain = ctx.gain(nw.weight[r], k_v, r_weight[r]);
            if gain >= 0.0 {
                candidates.push((r, gain));
            }
        }
        if candidates.len() == 1 {
            continue;
        }
        let max_gain = candidates.iter().map(|c| c.1).fold(f64::MIN, f64::max);
        let probs: Vec<f64> = candidates
            .iter()
            .map(|&(_, gain)| ((gain - max_gain) / REFINE_THETA).exp())
            .collect();
        let total: f64 = probs.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut target = candidates[candidates.len() - 1].0;
        for (&(r, _), &p) in candidates.iter().zip(&probs) {
            if pick < p {
                target = r;
                break;
            }
            pick -= p;
        }
        if target == own {
            continue;
        }
        let w_vt = nw.weight[target];
        r_external[target] = r_external[target] + r_external[own] - 2.0 * w_vt;
        r_weight[target] += k_v;
        r_size[target] += 1;
        r_size[own] = 0;
        r_weight[own] = 0.0;
        refined[v] = target;
    }
    refined
}

fn relabel(raw: &[usize]) -> (Vec<usize>, usize) {
    let p = Partition::from_assignment(raw);
    let k = p.n_communities();
    (p.assignment, k)
}

/// Splits every community into its connected components (never lowers modularity).
fn split_disconnected(g: &SimilarityGraph, assignment: &[usize]) -> Vec<usize> {
    let n = g.n();
    let mut out = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        out[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &(u, _) in g.neighbors(v) {
                if out[u] == usize::MAX && assignment[u] == assignment[start] {
                    out[u] = next;
                    queue.push_back(u);
                }
            }
        }
        next += 1;
    }
    out
}

/// Leiden plus the flat-partition modularity recorded after every pass.
pub fn leiden_with_trace(g: &SimilarityGraph, config: &LeidenConfig) -> Result<(Partition, Vec<f64>)> {
    if !(config.resolution > 0.0) {
        return Err(Error::InvalidParameter("resolution must be positive".into()));
    }
    if config.max_passes == 0 {
        return Err(Error::InvalidParameter("max_passes must be at least 1".into()));
    }
    let n = g.n();
    let two_m: f64 = (0..n).map(|i| g.weighted_degree(i)).sum();
    if two_m == 0.0 {
        let mut p = Partition::singletons(n);
        p.modularity = 0.0;
        return Ok((p, Vec::new()));
    }
    let ctx = Ctx {
        resolution: config.resolution,
        two_m,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // flat[v] = aggregate node holding original node v
    let mut flat: Vec<usize> = (0..n).collect();
    let mut level = LevelGraph::from_graph(g);
    let mut comm: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut previous = modularity(g, &(0..n).collect::<Vec<_>>(), config.resolution);
    let mut best_flat: Vec<usize> = (0..n).collect();

    for _ in 0..config.max_passes {
        let moved = local_move(&level, &mut comm, &ctx, &mut rng);
        let (comm_dense, n_comm) = relabel(&comm);
        let flat_assignment: Vec<usize> = flat.iter().map(|&a| comm_dense[a]).collect();
        let q = modularity(g, &flat_assignment, config.resolution);
        debug_assert!(q >= previous - 1e-12, "modularity decreased: {previous} -> {q}");
        trace.push(q);
        best_flat = flat_assignment;
        let gain = q - previous;
        previous = q;
        if !moved || n_comm == level.n() || gain < config.min_modularity_gain {
            break;
        }

        let refined = refine(&level, &comm_dense, &ctx, &mut rng);
        let (refined_dense, n_refined) = relabel(&refined);
        let mut next_comm = vec![0; n_refined];
        for v in 0..level.n() {
            next_comm[refined_dense[v]] = comm_dense[v];
        }
        level = level.aggregate(&refined_dense, n_refined);
        for f in flat.iter_mut() {
            *f = refined_dense[*f];
        }
        comm = next_comm;
    }

    let split = split_disconnected(g, &best_flat);
    let mut partition = Partition::from_assignment(&split);
    partition.modularity = modularity(g, partition.assignment(), config.resolution);
    Ok((partition, trace))
}

pub fn leiden(g: &SimilarityGraph, config: &LeidenConfig) -> Result<Partition> {
    leiden_with_trace(g, config).map(|(p, _)| p)
}

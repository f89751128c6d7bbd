//! Choosing which samples to label: per-community quotas, centrality ranking
//! inside each community, and the stratified train/validation split.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centrality::{compute_centrality, CentralityMeasure};
use crate::community::Partition;
use crate::dataset::LabelValue;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

pub const DEFAULT_BUDGETS: [usize; 5] = [30, 60, 90, 120, 210];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Random,
    Betweenness,
    Pagerank,
    Mci,
}

impl SelectionMethod {
    pub const ALL: [SelectionMethod; 4] = [
        SelectionMethod::Random,
        SelectionMethod::Betweenness,
        SelectionMethod::Pagerank,
        SelectionMethod::Mci,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Betweenness => "betweenness",
            SelectionMethod::Pagerank => "pagerank",
            SelectionMethod::Mci => "mci",
        }
    }

    fn measure(self) -> Option<CentralityMeasure> {
        match self {
            SelectionMethod::Random => None,
            SelectionMethod::Betweenness => Some(CentralityMeasure::Betweenness),
            SelectionMethod::Pagerank => Some(CentralityMeasure::Pagerank),
            SelectionMethod::Mci => Some(CentralityMeasure::Mci),
        }
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown selection method `{s}`")))
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralityScope {
    #[default]
    CommunitySubgraph,
    Global,
}

impl FromStr for CentralityScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "community_subgraph" => Ok(CentralityScope::CommunitySubgraph),
            "global" => Ok(CentralityScope::Global),
            other => Err(Error::Parse(format!("unknown centrality scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub budget: usize,
    pub method: SelectionMethod,
    pub seed: u64,
    pub scope: CentralityScope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedSample {
    pub node: usize,
    pub id: String,
    pub cluster: usize,
    /// 1 = most central within its cluster.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub samples: Vec<SelectedSample>,
    pub allocation: Vec<usize>,
    pub method: SelectionMethod,
    pub seed: u64,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn nodes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.node).collect()
    }

    /// CSV with header `id,cluster,rank`, in selection order.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "cluster", "rank"]).unwrap();
        for s in &self.samples {
            w.write_record([s.id.as_str(), &s.cluster.to_string(), &s.rank.to_string()])
                .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One row of an exported selection file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub id: String,
    pub cluster: usize,
    pub rank: usize,
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<Vec<SelectionRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Largest-remainder apportionment of `budget` proportional to `sizes`.
/// Remainder ties go to the larger cluster, then the lower cluster id.
pub fn allocate_budget(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if budget > total {
        return Err(Error::Budget {
            budget,
            available: total,
        });
    }
    if budget == 0 {
        return Ok(vec![0; sizes.len()]);
    }
    // exact integer quotas: budget * size / total
    let mut counts: Vec<usize> = sizes.iter().map(|&s| budget * s / total).collect();
    let remainders: Vec<usize> = sizes.iter().map(|&s| budget * s % total).collect();
    let left = budget - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .cmp(&remainders[a])
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    for &c in order.iter().take(left) {
        counts[c] += 1;
    }
    debug_assert!(counts.iter().zip(sizes).all(|(c, s)| c <= s));
    Ok(counts)
}

/// Members of each community from most to least central, with their scores.
/// Ties keep the lower node index first.
pub fn community_rankings(
    g: &SimilarityGraph,
    p: &Partition,
    method: SelectionMethod,
    scope: CentralityScope,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let measure = method
        .measure()
        .ok_or_else(|| Error::InvalidParameter("random selection has no centrality ranking".into()))?;
    if p.len() != g.n() {
        return Err(Error::Dimension(format!("graph has {} nodes, partition {}", g.n(), p.len())));
    }
    rank_communities(g, p, measure, scope)
}

fn rank_communities(
    g: &SimilarityGraph,
    p: &Partition,
    measure: CentralityMeasure,
    scope: CentralityScope,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let global = match scope {
        CentralityScope::Global => Some(compute_centrality(g, measure)?),
        CentralityScope::CommunitySubgraph => None,
    };
    p.members()
        .iter()
        .map(|nodes| match &global {
            Some(scores) => {
                let mut order = nodes.clone();
                order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
                Ok(order.into_iter().map(|v| (v, scores.scores[v])).collect())
            }
            None => {
                let local = compute_centrality(&g.induced_subgraph(nodes), measure)?;
                Ok(local.ranking().into_iter().map(|k| (nodes[k], local.scores[k])).collect())
            }
        })
        .collect()
}

/// Picks the samples to label from the graph of the unlabeled training pool.
///
/// `ids[v]` names graph node `v`. Random selection samples the whole pool;
/// every other method fills per-community quotas with the most central nodes.
pub fn select_representatives(
    g: &SimilarityGraph,
    p: &Partition,
    ids: &[String],
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    let n = g.n();
    if p.len() != n || ids.len() != n {
        return Err(Error::Dimension(format!(
            "graph has {n} nodes, partition {}, ids {}",
            p.len(),
            ids.len()
        )));
    }
    if config.budget < 2 {
        return Err(Error::InvalidParameter("budget must be at least 2".into()));
    }
    if config.budget > n {
        return Err(Error::Budget {
            budget: config.budget,
            available: n,
        });
    }
    let members = p.members();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();

    let Some(measure) = config.method.measure() else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let drawn = rand::seq::index::sample(&mut rng, n, config.budget).into_vec();
        let mut allocation = vec![0; members.len()];
        let mut samples: Vec<SelectedSample> = drawn
            .into_iter()
            .map(|v| {
                let cluster = p.community_of(v);
                allocation[cluster] += 1;
                SelectedSample {
                    node: v,
                    id: ids[v].clone(),
                    cluster,
                    rank: allocation[cluster],
                }
            })
            .collect();
        samples.sort_by_key(|s| (s.cluster, s.rank));
        return Ok(SelectionResult {
            samples,
            allocation,
            method: config.method,
            seed: config.seed,
        });
    };

    let allocation = allocate_budget(&sizes, config.budget)?;
    let ranked = rank_communities(g, p, measure, config.scope)?;
    let mut samples = Vec::with_capacity(config.budget);
    for (cluster, (order, &count)) in ranked.iter().zip(&allocation).enumerate() {
        for (r, &(v, _)) in order.iter().take(count).enumerate() {
            samples.push(SelectedSample {
                node: v,
                id: ids[v].clone(),
                cluster,
                rank: r + 1,
            });
        }
    }
    Ok(SelectionResult {
        samples,
        allocation,
        method: config.method,
        seed: config.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainValSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    /// Classes with no selected sample (allowed, but worth reporting).
    pub missing_classes: Vec<LabelValue>,
}

/// Stratified halving per class; odd counts give the extra sample to the
/// training side. When every class holds at most one sample, the last class's
/// sample moves to validation so that both sides are non-empty.
pub fn split_train_val(selected: &[(String, LabelValue)], seed: u64) -> Result<TrainValSplit> {
    if selected.len() < 2 {
        return Err(Error::InsufficientLabels(format!(
            "need at least 2 labeled samples, got {}",
            selected.len()
        )));
    }
    if let Some((id, _)) = selected.iter().find(|(_, l)| !l.is_known()) {
        return Err(Error::InsufficientLabels(format!("sample `{id}` has no known label")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut missing_classes = Vec::new();
    let mut last_singleton: Option<String> = None;
    for class in [LabelValue::Relevant, LabelValue::Irrelevant] {
        let mut ids: Vec<String> = selected
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id.clone())
            .collect();
        if ids.is_empty() {
            missing_classes.push(class);
            continue;
        }
        ids.shuffle(&mut rng);
        let n_train = ids.len().div_ceil(2);
        if ids.len() == 1 {
            last_singleton = Some(ids[0].clone());
        }
        validation.extend(ids.split_off(n_train));
        train.extend(ids);
    }
    if validation.is_empty() {
        let moved = last_singleton.expect("two samples with empty validation means singleton classes");
        train.retain(|id| *id != moved);
        validation.push(moved);
    }
    Ok(TrainValSplit {
        train,
        validation,
        missing_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centrality::betweenness_centrality;
    use proptest::prelude::*;

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_budget(&[50, 30, 20], 10).unwrap(), vec![5, 3, 2]);
        assert_eq!(allocate_budget(&[3, 3], 4).unwrap(), vec![2, 2]);
        assert_eq!(allocate_budget(&[10, 5, 1], 2).unwrap(), vec![1, 1, 0]);
        assert!(matches!(allocate_budget(&[1, 1], 3), Err(Error::Budget { .. })));
        // equal remainders: larger cluster first
        assert_eq!(allocate_budget(&[1, 3, 2, 2], 4).unwrap(), vec![0, 2, 1, 1]);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    /// Two 4-node communities: a star (0 center) and a path 4-5-6-7, joined 3-4.
    fn two_communities() -> (SimilarityGraph, Partition) {
        let g = SimilarityGraph::from_unweighted(
            8,
            &[(0, 1), (0, 2), (0, 3), (4, 5), (5, 6), (6, 7), (3, 4)],
        )
        .unwrap();
        (g, Partition::from_assignment(&[0, 0, 0, 0, 1, 1, 1, 1]))
    }

    #[test]
    fn betweenness_picks_subgraph_maxima() {
        let (g, p) = two_communities();
        let cfg = SelectionConfig {
            budget: 2,
            method: SelectionMethod::Betweenness,
            seed: 1,
            scope: CentralityScope::CommunitySubgraph,
        };
        let r = select_representatives(&g, &p, &ids(8), &cfg).unwrap();
        assert_eq!(r.allocation, vec![1, 1]);
        // star center scores 3; path interior nodes 5 and 6 tie at 2 -> lower index
        let star = betweenness_centrality(&g.induced_subgraph(&[0, 1, 2, 3])).scores;
        let path = betweenness_centrality(&g.induced_subgraph(&[4, 5, 6, 7])).scores;
        assert_eq!(star, vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(path, vec![0.0, 2.0, 2.0, 0.0]);
        assert_eq!(r.nodes(), vec![0, 5]);
        assert_eq!(r.samples[1].rank, 1);
    }

    #[test]
    fn global_scope_differs_on_bridge() {
        let (g, p) = two_communities();
        let cfg = SelectionConfig {
            budget: 2,
            method: SelectionMethod::Betweenness,
            seed: 1,
            scope: CentralityScope::Global,
        };
        let r = select_representatives(&g, &p, &ids(8), &cfg).unwrap();
        // globally, bridge endpoints 3 and 4 dominate their communities
        assert_eq!(r.nodes(), vec![3, 4]);
    }

    #[test]
    fn random_full_budget_and_determinism() {
        let (g, p) = two_communities();
        let cfg = SelectionConfig {
            budget: 8,
            method: SelectionMethod::Random,
            seed: 9,
            scope: CentralityScope::default(),
        };
        let r = select_representatives(&g, &p, &ids(8), &cfg).unwrap();
        let mut nodes = r.nodes();
        nodes.sort();
        assert_eq!(nodes, (0..8).collect::<Vec<_>>());
        for method in SelectionMethod::ALL {
            let cfg = SelectionConfig { budget: 3, method, ..cfg };
            assert_eq!(
                select_representatives(&g, &p, &ids(8), &cfg).unwrap(),
                select_representatives(&g, &p, &ids(8), &cfg).unwrap()
            );
        }
    }

    #[test]
    fn infeasible_budget() {
        let (g, p) = two_communities();
        let cfg = SelectionConfig {
            budget: 9,
            method: SelectionMethod::Pagerank,
            seed: 0,
            scope: CentralityScope::default(),
        };
        assert!(matches!(
            select_representatives(&g, &p, &ids(8), &cfg),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn selection_csv_round_trip() {
        let (g, p) = two_communities();
        let cfg = SelectionConfig {
            budget: 4,
            method: SelectionMethod::Mci,
            seed: 0,
            scope: CentralityScope::default(),
        };
        let r = select_representatives(&g, &p, &ids(8), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.csv");
        r.write(&path).unwrap();
        let rows = read_selection(&path).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, s) in rows.iter().zip(&r.samples) {
            assert_eq!((row.id.as_str(), row.cluster, row.rank), (s.id.as_str(), s.cluster, s.rank));
        }
    }

    fn labeled(rel: usize, irr: usize) -> Vec<(String, LabelValue)> {
        (0..rel)
            .map(|i| (format!("r{i}"), LabelValue::Relevant))
            .chain((0..irr).map(|i| (format!("i{i}"), LabelValue::Irrelevant)))
            .collect()
    }

    fn count(ids: &[String], prefix: char) -> usize {
        ids.iter().filter(|s| s.starts_with(prefix)).count()
    }

    #[test]
    fn split_examples() {
        let s = split_train_val(&labeled(40, 20), 0).unwrap();
        assert_eq!((count(&s.train, 'r'), count(&s.train, 'i')), (20, 10));
        assert_eq!((count(&s.validation, 'r'), count(&s.validation, 'i')), (20, 10));

        let s = split_train_val(&labeled(1, 1), 0).unwrap();
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.validation.len(), 1);
        assert_ne!(s.train[0].chars().next(), s.validation[0].chars().next());

        let s = split_train_val(&labeled(3, 2), 0).unwrap();
        assert_eq!((count(&s.train, 'r'), count(&s.train, 'i')), (2, 1));
        assert_eq!((count(&s.validation, 'r'), count(&s.validation, 'i')), (1, 1));
    }

    #[test]
    fn split_errors_and_missing_class() {
        assert!(split_train_val(&labeled(1, 0), 0).is_err());
        let s = split_train_val(&labeled(4, 0), 0).unwrap();
        assert_eq!(s.missing_classes, vec![LabelValue::Irrelevant]);
        let mut bad = labeled(2, 2);
        bad[0].1 = LabelValue::Unknown;
        assert!(split_train_val(&bad, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn allocation_sums_and_caps(sizes in proptest::collection::vec(1usize..60, 1..12), frac in 0.0f64..1.0) {
            let total: usize = sizes.iter().sum();
            let budget = ((total as f64) * frac) as usize;
            let counts = allocate_budget(&sizes, budget).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), budget);
            for (c, s) in counts.iter().zip(&sizes) {
                prop_assert!(c <= s);
            }
        }
    }

    proptest! {
        #[test]
        fn split_is_balanced(rel in 0usize..30, irr in 0usize..30, seed in any::<u64>()) {
            prop_assume!(rel + irr >= 2);
            let s = split_train_val(&labeled(rel, irr), seed).unwrap();
            prop_assert!(!s.train.is_empty() && !s.validation.is_empty());
            for p in ['r', 'i'] {
                let (a, b) = (count(&s.train, p), count(&s.validation, p));
                prop_assert!(a.abs_diff(b) <= 1);
                let total = if p == 'r' { rel } else { irr };
                if total >= 2 {
                    prop_assert!(a >= 1 && b >= 1);
                }
            }
        }

        #[test]
        fn selection_respects_quotas(seed in 0u64..200, budget in 2usize..16) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let edges: Vec<(usize, usize)> = (0..30)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .filter(|(a, b)| a != b)
                .collect();
            let g = SimilarityGraph::from_unweighted(n, &edges).unwrap();
            let p = crate::community::leiden(&g, &Default::default()).unwrap();
            for method in SelectionMethod::ALL {
                let cfg = SelectionConfig { budget, method, seed, scope: CentralityScope::default() };
                let r = select_representatives(&g, &p, &ids(n), &cfg).unwrap();
                let mut nodes = r.nodes();
                nodes.sort();
                nodes.dedup();
                prop_assert_eq!(nodes.len(), budget);
                if method != SelectionMethod::Random {
                    let mut per = vec![0; p.n_communities()];
                    for s in &r.samples {
                        per[s.cluster] += 1;
                    }
                    prop_assert_eq!(per, r.allocation.clone());
                }
            }
        }
    }
}

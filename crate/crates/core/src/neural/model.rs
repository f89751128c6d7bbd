//! Model descriptors, parameters, forward and backward passes, and the loss.
//!
//! Every model is a fixed feature transform followed by an MLP head:
//! the identity for `mlpc`, `Â·X` for `ngcn_lin`, and `[X | mean_N(X)]` for
//! `nsage_lin`, whose first weight matrix stacks `W_self` over `W_neigh`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{Matrix, Scalar};
use crate::dataset::LabelValue;
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, CsrMatrix, SimilarityGraph};

pub const N_CLASSES: usize = 2;
pub const MLPC_HIDDEN: [usize; 3] = [128, 128, 64];
pub const GRAPH_HIDDEN: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlpc,
    NgcnLin,
    NsageLin,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mlpc, ModelKind::NgcnLin, ModelKind::NsageLin];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlpc => "mlpc",
            ModelKind::NgcnLin => "ngcn_lin",
            ModelKind::NsageLin => "nsage_lin",
        }
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, ModelKind::Mlpc)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ModelKind::Mlpc => 0,
            ModelKind::NgcnLin => 1,
            ModelKind::NsageLin => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown model kind `{s}`")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl ModelSpec {
    /// Default widths: three hidden layers for `mlpc`, one wide graph layer otherwise.
    pub fn new(kind: ModelKind, input_dim: usize) -> Self {
        let hidden = match kind {
            ModelKind::Mlpc => MLPC_HIDDEN.to_vec(),
            ModelKind::NgcnLin | ModelKind::NsageLin => vec![GRAPH_HIDDEN],
        };
        Self {
            kind,
            input_dim,
            hidden,
            n_classes: N_CLASSES,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.n_classes == 0 {
            return Err(Error::InvalidParameter(format!(
                "model dims must be positive: input {}, hidden {:?}, classes {}",
                self.input_dim, self.hidden, self.n_classes
            )));
        }
        if self.kind.uses_graph() && self.hidden.len() != 1 {
            return Err(Error::InvalidParameter(format!(
                "{} has exactly one graph layer, got hidden {:?}",
                self.kind, self.hidden
            )));
        }
        Ok(())
    }

    /// Width of the transformed features entering the first affine layer.
    pub fn head_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::NsageLin => 2 * self.input_dim,
            _ => self.input_dim,
        }
    }

    /// `(fan_in, fan_out)` for each affine layer in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.head_input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.n_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `fan_in x fan_out`.
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer {
                    w: Matrix::zeros(i, o),
                    b: vec![T::zero(); o],
                })
                .collect(),
        }
    }

    /// Uniform in `±1/√fan_in`; the stacked SAGE blocks each use the
    /// per-block fan-in. Draw order: layer by layer, weights then bias.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let fan_in = if l == 0 && spec.kind == ModelKind::NsageLin {
                spec.input_dim
            } else {
                layer.w.rows()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in layer.w.data_mut().iter_mut().chain(layer.b.iter_mut()) {
                *v = T::cast_from(rng.random_range(-bound..=bound));
            }
        }
        params
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.cast(),
                    b: l.b.iter().map(|&v| U::cast_from(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.len()).sum()
    }

    /// Tensors in declaration order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.data(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.data_mut(), l.b.as_mut_slice()])
            .collect()
    }

    fn check(&self, input_cols: usize) -> Result<()> {
        let mut cols = input_cols;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w.rows() != cols || layer.b.len() != layer.w.cols() {
                return Err(Error::Dimension(format!(
                    "layer {l} expects {} inputs (bias {}), got {cols}",
                    layer.w.rows(),
                    layer.b.len()
                )));
            }
            cols = layer.w.cols();
        }
        Ok(())
    }
}

/// Affine layers with rectifiers between them; the last layer yields logits.
pub fn mlp_forward<T: Scalar>(x: &Matrix<T>, params: &Params<T>) -> Result<Matrix<T>> {
    params.check(x.cols())?;
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        h = h.matmul(&layer.w)?;
        h.add_row_vector(&layer.b);
        if l + 1 < params.layers.len() {
            h.relu_in_place();
        }
    }
    Ok(h)
}

/// Layer inputs kept for the backward pass: `acts[l]` feeds layer `l`.
pub(crate) struct ForwardCache<T> {
    acts: Vec<Matrix<T>>,
}

pub(crate) fn forward_cached<T: Scalar>(x: Matrix<T>, params: &Params<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
    params.check(x.cols())?;
    let mut acts = vec![x];
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = acts[l].matmul(&layer.w)?;
        z.add_row_vector(&layer.b);
        if l == last {
            return Ok((z, ForwardCache { acts }));
        }
        z.relu_in_place();
        acts.push(z);
    }
    unreachable!("params have at least one layer")
}

/// Parameter gradients given `d loss / d logits`.
pub(crate) fn backward<T: Scalar>(params: &Params<T>, cache: &ForwardCache<T>, dlogits: Matrix<T>) -> Result<Params<T>> {
    let mut grads: Vec<Layer<T>> = Vec::with_capacity(params.layers.len());
    let mut dz = dlogits;
    for l in (0..params.layers.len()).rev() {
        let input = &cache.acts[l];
        let dw = input.matmul_tn(&dz)?;
        let db = dz.column_sums();
        if l > 0 {
            let mut da = dz.matmul_nt(&params.layers[l].w)?;
            for (g, &a) in da.data_mut().iter_mut().zip(input.data()) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            dz = da;
        }
        grads.push(Layer { w: dw, b: db });
    }
    grads.reverse();
    Ok(Params { layers: grads })
}

/// Row-wise mean of neighbour features; isolated nodes get a zero row.
pub fn neighbor_mean(g: &SimilarityGraph, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    if g.n() != x.rows() {
        return Err(Error::Dimension(format!("graph has {} nodes, features {} rows", g.n(), x.rows())));
    }
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..g.n() {
        let nb = g.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let mut acc = vec![0.0; d];
        for &(j, _) in nb {
            for (a, &v) in acc.iter_mut().zip(x.row(j)) {
                *a += v;
            }
        }
        let inv = 1.0 / nb.len() as f64;
        for (j, a) in acc.into_iter().enumerate() {
            out.set(i, j, a * inv);
        }
    }
    Ok(out)
}

pub fn propagate_features(a: &CsrMatrix, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    if a.n_cols() != x.rows() {
        return Err(Error::Dimension(format!("operator has {} columns, features {} rows", a.n_cols(), x.rows())));
    }
    Matrix::from_vec(a.n_rows(), x.cols(), a.mul_dense(x.data(), x.cols()))
}

/// The fixed input transform of each model kind.
pub fn transform_features(kind: ModelKind, graph: Option<&SimilarityGraph>, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    let need_graph = || {
        graph.ok_or_else(|| Error::InvalidParameter(format!("{kind} requires a graph")))
    };
    match kind {
        ModelKind::Mlpc => Ok(x.clone()),
        ModelKind::NgcnLin => propagate_features(&normalized_adjacency(need_graph()?), x),
        ModelKind::NsageLin => x.hconcat(&neighbor_mean(need_graph()?, x)?),
    }
}

/// One GCN layer (`relu(Â·X·W1 + b1)`) followed by the classifier head.
pub fn gcn_forward<T: Scalar>(a_hat: &CsrMatrix, x: &Matrix<f64>, params: &Params<T>) -> Result<Matrix<T>> {
    mlp_forward(&propagate_features(a_hat, x)?.cast(), params)
}

/// One mean-aggregation SAGE layer followed by the classifier head.
pub fn sage_forward<T: Scalar>(g: &SimilarityGraph, x: &Matrix<f64>, params: &Params<T>) -> Result<Matrix<T>> {
    mlp_forward(&x.hconcat(&neighbor_mean(g, x)?)?.cast(), params)
}

/// Mean softmax cross-entropy over masked nodes with a known label, and its
/// gradient with respect to the logits (zero outside the mask).
pub fn cross_entropy_masked<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[LabelValue],
    mask: &[bool],
) -> Result<(f64, Matrix<T>)> {
    let n = logits.rows();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "{n} logit rows, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let active: Vec<(usize, usize)> = (0..n)
        .filter(|&i| mask[i])
        .filter_map(|i| labels[i].class_index().map(|c| (i, c)))
        .collect();
    if active.is_empty() {
        return Err(Error::EmptyMask("training mask has no labeled node"));
    }
    let scale = 1.0 / active.len() as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for (i, c) in active {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += (lse - row[c]) * scale;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == c { 1.0 } else { 0.0 };
            grad.set(i, j, T::cast_from((p - target) * scale));
        }
    }
    Ok((loss, grad))
}

/// Row argmax over `[relevant, irrelevant]`; exact ties go to irrelevant.
pub fn argmax_labels<T: Scalar>(logits: &Matrix<T>) -> Vec<LabelValue> {
    (0..logits.rows())
        .map(|i| {
            if logits.get(i, 0) > logits.get(i, 1) {
                LabelValue::Relevant
            } else {
                LabelValue::Irrelevant
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn identity_params(d: usize) -> Params<f64> {
        let mut w = Matrix::zeros(d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        Params {
            layers: vec![Layer { w, b: vec![0.0; d] }],
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = ModelSpec::new(ModelKind::Mlpc, 4).with_hidden(vec![3, 3]);
        let x = Matrix::from_rows(&vec![vec![1.0, -2.0, 3.0, 0.5]; 3]).unwrap();
        let logits = mlp_forward(&x, &Params::<f64>::zeros(&spec)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_inputs() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(mlp_forward(&x, &identity_params(2)).unwrap(), x);
    }

    #[test]
    fn forward_matches_hand_rolled_oracle() {
        let spec = ModelSpec::new(ModelKind::Mlpc, 4).with_hidden(vec![3]);
        let params = Params::<f64>::init(&spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let logits = mlp_forward(&Matrix::from_rows(&xs).unwrap(), &params).unwrap();
        let (l0, l1) = (&params.layers[0], &params.layers[1]);
        for (i, x) in xs.iter().enumerate() {
            let h: Vec<f64> = (0..3)
                .map(|j| (l0.b[j] + (0..4).map(|k| x[k] * l0.w.get(k, j)).sum::<f64>()).max(0.0))
                .collect();
            for c in 0..2 {
                let expect = l1.b[c] + (0..3).map(|j| h[j] * l1.w.get(j, c)).sum::<f64>();
                assert!((logits.get(i, c) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gcn_pair_preactivation() {
        let g = SimilarityGraph::from_unweighted(2, &[(0, 1)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let ax = propagate_features(&normalized_adjacency(&g), &x).unwrap();
        assert!((ax.get(0, 0) - 2.0).abs() < 1e-12 && (ax.get(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gcn_isolated_node_is_local() {
        let spec = ModelSpec::new(ModelKind::NgcnLin, 2).with_hidden(vec![4]);
        let params = Params::<f64>::init(&spec, 0);
        let g = SimilarityGraph::from_unweighted(3, &[(0, 1)]).unwrap();
        let a = normalized_adjacency(&g);
        let x1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let x2 = Matrix::from_rows(&[vec![-4.0, 2.0], vec![9.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let (y1, y2) = (gcn_forward(&a, &x1, &params).unwrap(), gcn_forward(&a, &x2, &params).unwrap());
        assert_eq!(y1.row(2), y2.row(2));
        let solo = mlp_forward(&Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), &params).unwrap();
        assert_eq!(y1.row(2), solo.row(0));
    }

    #[test]
    fn twin_nodes_share_logits() {
        // 0 and 1 both connect to 2 and 3 only, with equal features
        let g = SimilarityGraph::from_unweighted(4, &[(0, 2), (0, 3), (1, 2), (1, 3)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, -1.0]]).unwrap();
        for kind in [ModelKind::NgcnLin, ModelKind::NsageLin] {
            let spec = ModelSpec::new(kind, 2).with_hidden(vec![5]);
            let params = Params::<f64>::init(&spec, 3);
            let y = match kind {
                ModelKind::NgcnLin => gcn_forward(&normalized_adjacency(&g), &x, &params).unwrap(),
                _ => sage_forward(&g, &x, &params).unwrap(),
            };
            assert_eq!(y.row(0), y.row(1));
        }
    }

    #[test]
    fn sage_aggregate_rules() {
        let path = SimilarityGraph::from_unweighted(4, &[(0, 1), (1, 2)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![5.0]]).unwrap();
        let agg = neighbor_mean(&path, &x).unwrap();
        assert_eq!(agg.data(), &[2.0, 2.0, 2.0, 0.0]);

        // isolated node 3: hidden = relu(x·W_self + b1)
        let spec = ModelSpec::new(ModelKind::NsageLin, 1).with_hidden(vec![3]);
        let params = Params::<f64>::init(&spec, 5);
        let t = transform_features(ModelKind::NsageLin, Some(&path), &x).unwrap();
        assert_eq!(t.row(3), &[5.0, 0.0]);
        let logits = sage_forward(&path, &x, &params).unwrap();
        let l0 = &params.layers[0];
        let h: Vec<f64> = (0..3).map(|j| (5.0 * l0.w.get(0, j) + l0.b[j]).max(0.0)).collect();
        let l1 = &params.layers[1];
        for c in 0..2 {
            let expect = l1.b[c] + (0..3).map(|j| h[j] * l1.w.get(j, c)).sum::<f64>();
            assert!((logits.get(3, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let labels = [LabelValue::Relevant, LabelValue::Irrelevant, LabelValue::Unknown];
        let uniform = Matrix::<f64>::zeros(3, 2);
        let (loss, grad) = cross_entropy_masked(&uniform, &labels, &[true, true, true]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(grad.row(2).iter().all(|&g| g == 0.0));

        let confident = Matrix::from_rows(&[vec![20.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_masked(&confident, &labels, &[true, false, false]).unwrap();
        assert!(loss < 1e-8);

        let odd = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let (loss, grad) = cross_entropy_masked(&odd, &labels, &[false, true, false]).unwrap();
        let single = (2.0f64.exp() + 0.5f64.exp()).ln() - 0.5;
        assert!((loss - single).abs() < 1e-12);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));

        assert!(matches!(
            cross_entropy_masked(&odd, &labels, &[false, false, true]),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn argmax_ties_to_irrelevant() {
        let logits = Matrix::from_rows(&[vec![2.0, -1.0], vec![0.5, 0.5], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(
            argmax_labels(&logits),
            vec![LabelValue::Relevant, LabelValue::Irrelevant, LabelValue::Irrelevant]
        );
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(ModelKind::NgcnLin, 3).with_hidden(vec![2, 2]).validate().is_err());
        assert!(ModelSpec::new(ModelKind::Mlpc, 0).validate().is_err());
        assert_eq!(ModelSpec::new(ModelKind::Mlpc, 8).hidden, vec![128, 128, 64]);
        assert_eq!(ModelSpec::new(ModelKind::NsageLin, 8).layer_shapes(), vec![(16, 4096), (4096, 2)]);
        assert!(matches!(
            mlp_forward(&Matrix::<f64>::zeros(2, 5), &Params::zeros(&ModelSpec::new(ModelKind::Mlpc, 4))),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn graph_models_are_permutation_equivariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 7;
            let edges: Vec<(usize, usize)> = (0..10)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .filter(|(a, b)| a != b)
                .collect();
            let g = SimilarityGraph::from_unweighted(n, &edges).unwrap();
            let x = Matrix::from_rows(
                &(0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>(),
            ).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            // node i of the original graph becomes node perm[i]
            let pg = g.permuted(&perm);
            let mut inv = vec![0; n];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let px = x.select_rows(&inv);
            for kind in [ModelKind::NgcnLin, ModelKind::NsageLin] {
                let spec = ModelSpec::new(kind, 3).with_hidden(vec![4]);
                let params = Params::<f64>::init(&spec, seed);
                let run = |g: &SimilarityGraph, x: &Matrix<f64>| match kind {
                    ModelKind::NgcnLin => gcn_forward(&normalized_adjacency(g), x, &params).unwrap(),
                    _ => sage_forward(g, x, &params).unwrap(),
                };
                let (a, b) = (run(&g, &x), run(&pg, &px));
                for i in 0..n {
                    for c in 0..2 {
                        prop_assert!((a.get(i, c) - b.get(perm[i], c)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

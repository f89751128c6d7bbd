//! Finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::Matrix;
use super::model::{backward, cross_entropy_masked, forward_cached, transform_features, ModelKind, ModelSpec, Params};
use crate::dataset::LabelValue;
use crate::error::Result;
use crate::graph::SimilarityGraph;

pub const FD_STEP: f64 = 1e-5;

/// Pre-activations closer to zero than this make the instance unusable,
/// since a central difference could straddle the rectifier kink.
const KINK_MARGIN: f64 = 1e-3;

/// Denominator floor. Central differences at this step carry about 3e-11 of
/// roundoff, so smaller gradients are judged on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-4;

struct Instance {
    x: Matrix<f64>,
    labels: Vec<LabelValue>,
    mask: Vec<bool>,
    params: Params<f64>,
}

fn loss(inst: &Instance, params: &Params<f64>) -> Result<f64> {
    let (logits, _) = forward_cached(inst.x.clone(), params)?;
    Ok(cross_entropy_masked(&logits, &inst.labels, &inst.mask)?.0)
}

fn min_abs_preactivation(x: &Matrix<f64>, params: &Params<f64>) -> Result<f64> {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    for layer in &params.layers[..params.layers.len() - 1] {
        h = h.matmul(&layer.w)?;
        h.add_row_vector(&layer.b);
        min = h.data().iter().fold(min, |m, v| m.min(v.abs()));
        h.relu_in_place();
    }
    Ok(min)
}

fn random_instance(kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = 8;
    let d = 4;
    let spec = ModelSpec::new(kind, d).with_hidden(match kind {
        ModelKind::Mlpc => vec![5, 4, 3],
        _ => vec![6],
    });
    // node 7 stays isolated
    let edges: Vec<(usize, usize)> = (0..10)
        .map(|_| (rng.random_range(0..7), rng.random_range(0..7)))
        .filter(|(a, b)| a != b)
        .collect();
    let g = SimilarityGraph::from_unweighted(n, &edges)?;
    let raw: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = transform_features(kind, Some(&g), &Matrix::from_vec(n, d, raw)?)?;
    let labels = (0..n)
        .map(|i| match i % 3 {
            0 => LabelValue::Relevant,
            1 => LabelValue::Irrelevant,
            _ => LabelValue::from_class_index(rng.random_range(0..2)),
        })
        .collect();
    let mask = (0..n).map(|i| i != 5).collect();
    // Unit-scale weights keep gradients well above the finite-difference
    // noise floor (about 1e-11 here); fan-in scaling shrinks them to ~1e-7.
    let mut params = Params::zeros(&spec);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    Ok(Instance { x, labels, mask, params })
}

/// Largest relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)` between
/// analytic and central-difference gradients over all parameters of a random
/// small instance.
pub fn gradient_check(kind: ModelKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = loop {
        let inst = random_instance(kind, &mut rng)?;
        if min_abs_preactivation(&inst.x, &inst.params)? > KINK_MARGIN {
            break inst;
        }
    };
    let (logits, cache) = forward_cached(inst.x.clone(), &inst.params)?;
    let (_, dlogits) = cross_entropy_masked(&logits, &inst.labels, &inst.mask)?;
    let analytic = backward(&inst.params, &cache, dlogits)?;
    let analytic: Vec<f64> = analytic.tensors().concat();

    let mut probe = inst.params.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    for t in 0..probe.tensors().len() {
        let len = probe.tensors()[t].len();
        for i in 0..len {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + FD_STEP;
            let up = loss(&inst, &probe)?;
            probe.tensors_mut()[t][i] = orig - FD_STEP;
            let down = loss(&inst, &probe)?;
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[flat];
            flat += 1;
            let scale = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

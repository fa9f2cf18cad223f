#![allow(dead_code)]

use gemmed::kernel::gram_from_points;
use gemmed::{DualState, GramMatrix, KernelSpec, Label, LatentTerms};
use rand::Rng;

/// A small random problem: RBF Gram matrix, GEM-like terms and strictly
/// feasible duals.
pub struct Instance {
    pub g: GramMatrix,
    pub terms: LatentTerms,
    pub dual: DualState,
    pub gamma_hat: [f64; 2],
}

pub fn random_instance<R: Rng>(rng: &mut R, n: usize, c1: f64) -> Instance {
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let g = gram_from_points(&KernelSpec::rbf(rng.random_range(0.2..2.0)), &refs).unwrap();
    let mut labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Label::Pos } else { Label::Neg }).collect();
    labels[0] = Label::Neg;
    if n > 1 {
        labels[1] = Label::Pos;
    }
    let entropy = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let coverage = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let terms = LatentTerms::new(labels, entropy, coverage, [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]).unwrap();
    let dual = DualState {
        lambda: (0..n).map(|_| rng.random_range(0.05..c1 - 0.05)).collect(),
        mu: [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)],
        kappa: [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)],
    };
    Instance {
        g,
        terms,
        dual,
        gamma_hat: [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)],
    }
}

/// `|a - b| <= max(rel |b|, abs)`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= (rel * b.abs()).max(abs)
}

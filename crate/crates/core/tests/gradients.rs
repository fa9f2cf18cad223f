mod common;

use common::{random_instance, Instance};
use gemmed::posterior::exact_posterior;
use gemmed::rng;
use gemmed::trainer::{dual_gradients, dual_objective};
use gemmed::{DualState, PosteriorForm, PriorConfig};

const H: f64 = 1e-5;

fn objective(inst: &Instance, dual: &DualState, prior: &PriorConfig, form: &PosteriorForm) -> f64 {
    dual_objective(&inst.g, dual, prior, form, &inst.terms, &inst.gamma_hat).unwrap()
}

fn central<F: Fn(&mut DualState, f64)>(inst: &Instance, prior: &PriorConfig, form: &PosteriorForm, bump: F) -> f64 {
    let mut up = inst.dual.clone();
    bump(&mut up, H);
    let mut down = inst.dual.clone();
    bump(&mut down, -H);
    (objective(inst, &up, prior, form) - objective(inst, &down, prior, form)) / (2.0 * H)
}

/// Largest coordinate gap between the analytic gradient and central differences.
fn gradient_gap(inst: &Instance, prior: &PriorConfig, form: &PosteriorForm) -> f64 {
    let ex = exact_posterior(&inst.g, &inst.dual, prior, form, &inst.terms).unwrap();
    let grad = dual_gradients(&ex.expectations, &inst.dual, prior, form, &inst.terms, &inst.gamma_hat).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..inst.dual.lambda.len() {
        let fd = central(inst, prior, form, |d, h| d.lambda[i] += h);
        worst = worst.max((fd - grad.lambda[i]).abs());
    }
    for z in 0..2 {
        let fd = central(inst, prior, form, |d, h| d.mu[z] += h);
        worst = worst.max((fd - grad.mu[z]).abs());
        let fd = central(inst, prior, form, |d, h| d.kappa[z] += h);
        worst = worst.max((fd - grad.kappa[z]).abs());
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let prior = PriorConfig::default();
    let mut rng = rng::from_seed(11);
    for n in 1..=6 {
        for _ in 0..3 {
            let inst = random_instance(&mut rng, n, 1.0);
            let gap = gradient_gap(&inst, &prior, &PosteriorForm::default());
            assert!(gap < 1e-4, "n = {n}: gap {gap}");
        }
    }
}

#[test]
fn margin_offset_gradient_matches_finite_differences() {
    let form = PosteriorForm {
        margin_offset: true,
        ..PosteriorForm::default()
    };
    let prior = PriorConfig { c: 3.0, a_eta: -0.4 };
    let mut rng = rng::from_seed(12);
    for n in [2, 4, 6] {
        let inst = random_instance(&mut rng, n, 2.5);
        let gap = gradient_gap(&inst, &prior, &form);
        assert!(gap < 1e-4, "n = {n}: gap {gap}");
    }
}

#[test]
fn gradient_vanishes_nowhere_special_at_the_box_edge() {
    // λ close to the clip ceiling still has a finite, accurate gradient
    let prior = PriorConfig { c: 1.2, a_eta: 0.0 };
    let mut rng = rng::from_seed(13);
    let mut inst = random_instance(&mut rng, 4, 1.0);
    inst.dual.lambda = vec![0.99, 0.01, 0.5, 0.98];
    let gap = gradient_gap(&inst, &prior, &PosteriorForm::default());
    assert!(gap < 1e-4, "gap {gap}");
}

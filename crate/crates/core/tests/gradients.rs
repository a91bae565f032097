//! Finite-difference checks of the full prediction and combined objectives
//! on a tiny double-precision model.

mod common;

use clasp_core::composer::TrainMode;
use common::{check, fixture, objective};

const REL_TOL: f64 = 1e-3;

fn assert_matches(mode: TrainMode, total: bool) {
    let (checked, worst, at) = check(mode, total);
    assert!(checked > 20, "only {checked} entries compared");
    assert!(worst <= REL_TOL, "{mode} total={total}: worst relative error {worst:e} at {at}");
}

#[test]
fn prediction_objective_matches_finite_differences() {
    assert_matches(TrainMode::NoComposability, false);
}

#[test]
fn combined_objective_matches_finite_differences() {
    assert_matches(TrainMode::Clasp, true);
}

#[test]
fn supervised_objective_matches_finite_differences() {
    assert_matches(TrainMode::Supervised, false);
}

#[test]
fn combined_objective_reaches_composition_parameters() {
    let f = fixture(TrainMode::Clasp);
    let (g, loss) = objective(&f, true);
    let grads = g.backward(loss).unwrap();
    let comp: Vec<_> = f.p.params.ids().filter(|&id| f.p.params.name(id).starts_with("comp")).collect();
    assert!(!comp.is_empty());
    for id in comp {
        let gt = grads.param(id).expect("composition parameter has a gradient");
        assert!(gt.data().iter().any(|v| *v != 0.0), "{}", f.p.params.name(id));
    }
    // the prediction objective alone never touches them
    let (g, loss) = objective(&f, false);
    let grads = g.backward(loss).unwrap();
    assert!(f.p.params.ids().filter(|&id| f.p.params.name(id).starts_with("comp")).all(|id| grads.param(id).is_none()));
}

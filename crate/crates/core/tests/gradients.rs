//! Granular finite-difference gradient checks. The acceptance suite runs the
//! same routines under one timed criterion; these split them per component so
//! a regression points at the culprit.

mod common;

#[test]
fn every_isp_stage_passes_finite_difference_checks() {
    common::grads::check_every_isp_stage();
}

#[test]
fn named_full_pipelines_pass_finite_difference_checks() {
    common::grads::check_named_pipelines();
}

#[test]
fn every_proxy_layer_type_passes_finite_difference_checks() {
    common::grads::check_every_proxy_layer();
}

#[test]
fn full_objective_gradient_passes_finite_difference_checks() {
    common::grads::check_full_objective();
}

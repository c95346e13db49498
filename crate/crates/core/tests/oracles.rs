//! Closed-form and loop oracles for the loss operators, the style operators,
//! and the model forward pass.

mod common;

use common::oracles;

#[test]
fn softmax_matches_scalar_formula() {
    oracles::softmax_matches_scalar_formula();
}

#[test]
fn kl_matches_loop_sum() {
    oracles::kl_matches_loop_sum();
}

#[test]
fn ensemble_is_loop_mean() {
    oracles::ensemble_is_loop_mean();
}

#[test]
fn xded_matches_hand_computation() {
    oracles::xded_matches_hand_computation();
}

#[test]
fn total_loss_is_composition_of_oracles() {
    oracles::total_loss_is_composition_of_oracles();
}

#[test]
fn unistyle_output_statistics() {
    oracles::unistyle_output_statistics();
}

#[test]
fn unistyle_fixed_points_and_affine_invariance() {
    oracles::unistyle_fixed_points_and_affine_invariance();
}

#[test]
fn mixstyle_swap_carries_partner_statistics() {
    oracles::mixstyle_swap_carries_partner_statistics();
}

#[test]
fn teacher_path_receives_no_gradient() {
    oracles::teacher_path_receives_no_gradient();
}

#[test]
fn explicit_teacher_block_changes_no_gradient() {
    oracles::explicit_teacher_block_changes_no_gradient();
}

#[test]
fn identical_groups_give_exact_zero_loss_and_gradient() {
    oracles::identical_groups_give_exact_zero_loss_and_gradient();
}

#[test]
fn detached_parameter_gets_no_gradient_through_the_model() {
    oracles::detached_parameter_gets_no_gradient_through_the_model();
}

#[test]
fn forward_matches_straight_line_reference() {
    oracles::forward_matches_straight_line_reference();
}

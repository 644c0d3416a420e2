//! Analytic gradients against central finite differences.

mod common;

use common::GradCase;
use segt::nn::Mode;

fn assert_matches(case: GradCase, per_tensor: usize) {
    let report = case.check(per_tensor, 7);
    assert!(report.passed(), "{}: worst relative error {:.3e} at {}", report.name, report.worst_rel, report.worst_at);
}

#[test]
fn cfp_block_summed() {
    assert_matches(common::cfp_block(false), 12);
}

#[test]
fn cfp_block_split() {
    assert_matches(common::cfp_block(true), 12);
}

#[test]
fn cfp_refine() {
    assert_matches(common::cfp_refine(), 8);
}

#[test]
fn edge_extractor() {
    assert_matches(common::eem(), 8);
}

#[test]
fn separator() {
    assert_matches(common::separator(), 32);
}

#[test]
fn edge_guide_train() {
    assert_matches(common::edge_guide(Mode::Train), 8);
}

#[test]
fn edge_guide_eval() {
    assert_matches(common::edge_guide(Mode::Eval), 8);
}

#[test]
fn channel_attention() {
    assert_matches(common::cam(), 16);
}

#[test]
fn shuffle_attention() {
    assert_matches(common::sam(2), 16);
    assert_matches(common::sam(4), 16);
}

#[test]
fn seg_level() {
    assert_matches(common::seg_level(), 8);
}

#[test]
fn cascade_fusion() {
    assert_matches(common::cfm_step(), 16);
    assert_matches(common::cfm_cascade(true), 8);
    assert_matches(common::cfm_cascade(false), 8);
}

#[test]
fn losses() {
    for case in [common::weighted_bce(), common::weighted_iou(), common::structure(), common::edge_bce(), common::total()] {
        assert_matches(case, 32);
    }
}

#[test]
fn toy_encoder() {
    assert_matches(common::encoder(), 4);
}

#[test]
fn tiny_model_end_to_end() {
    assert_matches(common::full_model(), 2);
}

#[test]
fn a_wrong_gradient_is_caught() {
    let report = common::separator().check_scaled(8, 7, 1.001);
    assert!(!report.passed(), "a 0.1% gradient error went unnoticed");
}

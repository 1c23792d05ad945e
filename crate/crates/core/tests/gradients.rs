mod common;

use asr_core::losses::Reduction;
use common::*;

fn check_all(name: &str, f: impl Fn(u64) -> f64) {
    for seed in 0..GRAD_CONFIGS {
        let err = f(seed);
        assert!(err < FD_TOL, "{name} config {seed}: relative error {err:e}");
    }
}

#[test]
fn contrastive_matches_finite_differences() {
    check_all("contrastive", |s| loss_grad_errors(LossUnderTest::Contrastive, s).0);
}

#[test]
fn triplet_matches_finite_differences() {
    check_all("triplet", |s| loss_grad_errors(LossUnderTest::Triplet, s).0);
}

#[test]
fn margin_embeddings_and_beta_match_finite_differences() {
    for red in [Reduction::Sum, Reduction::Mean] {
        check_all("margin embeddings", |s| loss_grad_errors(LossUnderTest::Margin(red), s).0);
        check_all("margin beta", |s| loss_grad_errors(LossUnderTest::Margin(red), s).1.unwrap());
    }
}

#[test]
fn encoder_backprop_matches_finite_differences() {
    check_all("encoder", encoder_grad_error);
}

#[test]
fn reinforce_matches_finite_differences() {
    check_all("reinforce", reinforce_grad_error);
}

#[test]
fn ppo_surrogate_matches_finite_differences() {
    check_all("ppo", ppo_grad_error);
}


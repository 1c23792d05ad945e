mod common;

use asr_core::rng;
use asr_core::samplers::{
    init_distribution, sample_negative, Action, InitKind, InitialDistributionSpec,
    SamplingDistribution,
};
use common::*;
use proptest::prelude::*;

const DRAWS: usize = 100_000;

#[test]
fn selection_frequencies_match_layouts() {
    for (i, layout) in sampler_layouts().iter().enumerate() {
        let tv = layout_tv(layout, DRAWS, 100 + i as u64);
        assert!(tv < 0.02, "{}: total variation {tv}", layout.name);
    }
}

#[test]
fn uniform_weights_over_single_occupancy_is_uniform() {
    // one candidate per bin: binned sampling with uniform weights reduces to
    // uniform choice among candidates
    let distances = [0.1, 0.5, 0.9, 1.3, 1.7];
    let emb = anchor_layout(&distances);
    let cands: Vec<usize> = (1..=5).collect();
    let dist = SamplingDistribution::uniform(10).unwrap();
    let mut rng = rng::seeded(3);
    let mut counts = [0usize; 5];
    for _ in 0..DRAWS {
        counts[sample_negative(&dist, 0, &cands, emb.view(), &mut rng).unwrap() - 1] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / DRAWS as f64).collect();
    assert!(total_variation(&freq, &[0.2; 5]) < 0.02);
}

#[test]
fn every_preset_is_on_the_simplex() {
    for kind in InitKind::ALL {
        let d = init_distribution(&InitialDistributionSpec::preset(kind, 16, 7), 10).unwrap();
        assert!(d.is_on_simplex(1e-12), "{kind}");
        assert!(d.weights().iter().all(|&w| w > 0.0), "{kind}");
    }
}

proptest! {
    #[test]
    fn actions_stay_on_simplex(codes in proptest::collection::vec(0usize..21, 1..200)) {
        let mut d = SamplingDistribution::uniform(10).unwrap();
        for c in codes {
            d = d.apply_action(Action::decode(c, 10).unwrap(), 2.0).unwrap();
            prop_assert!(d.is_on_simplex(1e-9));
            prop_assert!(d.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn action_codes_round_trip(code in 0usize..41) {
        let a = Action::decode(code, 20).unwrap();
        prop_assert_eq!(a.encode(), code);
    }

    #[test]
    fn sampled_negative_is_a_candidate(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = rng::seeded(seed);
        let emb = unit_rows(n + 1, 4, &mut rng);
        let cands: Vec<usize> = (1..=n).collect();
        let d = init_distribution(&InitialDistributionSpec::preset(InitKind::Random, 4, seed), 10).unwrap();
        let c = sample_negative(&d, 0, &cands, emb.view(), &mut rng).unwrap();
        prop_assert!(cands.contains(&c));
    }
}

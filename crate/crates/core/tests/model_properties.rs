mod common;

const CONFIGS: u64 = 20;

#[test]
fn channel_permutation_equivariance() {
    for seed in 0..CONFIGS {
        let err = common::permutation_equivariance_error(seed);
        assert!(err <= 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn identical_channels_collapse_to_mono() {
    for seed in 0..CONFIGS {
        let err = common::identical_channel_collapse_error(seed);
        assert!(err <= 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn parameter_count_is_independent_of_channels() {
    for seed in 0..CONFIGS {
        let (one, eight) = common::parameter_counts(seed);
        assert_eq!(one, eight, "seed {seed}");
    }
}

#[test]
fn bypassed_tac_equals_independent_channels() {
    for seed in 0..CONFIGS {
        let err = common::tac_bypass_error(seed);
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn outputs_sum_to_the_input() {
    for seed in 0..CONFIGS {
        let err = common::consistency_error(seed, 4096);
        assert!(err <= 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn inference_and_trainable_paths_agree() {
    let mut r = common::rng(7);
    let params = mcmixit::model::ModelParams::init(common::random_config(&mut r), 7).unwrap();
    let x = common::random_signal(&mut r, 3, 150);
    let a = mcmixit::model::forward(&params, &x).unwrap();
    let b = common::trainable_forward(&params, &x);
    for m in 0..a.len() {
        for c in 0..3 {
            assert!(common::max_abs_diff(a.channel(m, c), b.channel(m, c)) <= 1e-12);
        }
    }
}

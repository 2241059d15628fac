mod common;

use mcmixit::model::ModelConfig;

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for op in common::OPS {
        let err = common::op_gradient_error(op, 10);
        if !(err <= TOLERANCE) {
            failures.push(format!("{op}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn network_and_assignment_loss_match_central_differences() {
    let config = ModelConfig {
        num_superblocks: 2,
        blocks_per_superblock: 2,
        kernel_width: 3,
        window: 8,
        hop: 4,
        bottleneck_dim: 6,
        conv_channels: 8,
        tac_dim: 4,
        num_outputs: 3,
        encoder_bases: 8,
    };
    for seed in 0..3 {
        let err = common::end_to_end_gradient_error(config, seed, 4);
        assert!(err <= 1e-3, "seed {seed}: {err:e}");
    }
}

//! Joint training against single-head runs on the same data: sharing the trunk
//! may cost each head a little, but not more than 20% of its own loss.

use chunkexec::actionspace::{ActionChunk, NormStats};
use chunkexec::dataset::{generate, GenerateConfig};
use chunkexec::policy::{train, LossBreakdown, Observation, TrainConfig};

const SLACK: f64 = 1.2;

fn run(
    cfg: &TrainConfig,
    train_pairs: &[(Observation, ActionChunk)],
    held_out: &[(Observation, ActionChunk)],
    stats: &NormStats,
) -> LossBreakdown {
    let (net, _) = train(train_pairs, stats, cfg).unwrap();
    net.loss_many(held_out, stats, cfg.lambda).unwrap()
}

#[test]
fn joint_heads_stay_within_single_head_baselines() {
    let data = |seed| {
        generate(&GenerateConfig {
            num_demos: 180,
            seed,
            ..Default::default()
        })
        .unwrap()
    };
    let ds = data(11);
    let pairs = ds.training_pairs(8).unwrap();
    let held_out = data(12).training_pairs(8).unwrap();

    let base = TrainConfig {
        iterations: 700,
        batch_size: 32,
        seed: 5,
        ..Default::default()
    };
    let joint = run(&base, &pairs, &held_out, &ds.stats);
    let ce_only = run(
        &TrainConfig {
            lambda: 0.0,
            ..base.clone()
        },
        &pairs,
        &held_out,
        &ds.stats,
    );
    let l1_only = run(
        &TrainConfig {
            ce_weight: 0.0,
            ..base.clone()
        },
        &pairs,
        &held_out,
        &ds.stats,
    );
    eprintln!(
        "ce joint {:.4} alone {:.4}; l1 joint {:.4} alone {:.4}",
        joint.ce, ce_only.ce, joint.l1, l1_only.l1
    );
    assert!(joint.ce <= SLACK * ce_only.ce);
    assert!(joint.l1 <= SLACK * l1_only.l1);
}

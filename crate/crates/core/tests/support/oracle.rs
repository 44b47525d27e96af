//! Scalar transcription of the adaptive-horizon pseudocode, 1-indexed as
//! written there, plus the case generator shared by the property tests.

use chunkexec::actionspace::{Action, ActionChunk, NormStats, ACTION_DIM};
use chunkexec::ensemble::{adahorizon_step, AdaHorizonParams, DualChunk, EnsemblerState};
use proptest::prelude::*;

pub struct OracleOut {
    pub horizon: usize,
    pub replan_ctr: u32,
    pub max_replan_ctr: u32,
}

#[allow(clippy::too_many_arguments)]
pub fn oracle(
    ac: &[[f64; ACTION_DIM]],
    ad: &[[f64; ACTION_DIM]],
    min_actions: usize,
    replan_threshold: f64,
    threshold: f64,
    max_replan_count: u32,
    next_task_thresh: u32,
    mut replan_ctr: u32,
    mut max_replan_ctr: u32,
) -> OracleOut {
    let t_len = ac.len();
    let mut mad = vec![0.0; t_len + 1];
    for t in 1..=t_len {
        let mut s = 0.0;
        for d in 0..ACTION_DIM {
            s += (ac[t - 1][d] - ad[t - 1][d]).abs();
        }
        mad[t] = s / ACTION_DIM as f64;
    }
    let mut exists = false;
    for t in 1..=min_actions {
        if mad[t] > replan_threshold {
            exists = true;
        }
    }
    if exists && min_actions > 1 {
        replan_ctr += 1;
    }
    if replan_ctr > max_replan_ctr {
        max_replan_ctr = replan_ctr;
    }
    if max_replan_ctr >= max_replan_count && replan_ctr >= next_task_thresh {
        return OracleOut {
            horizon: t_len,
            replan_ctr,
            max_replan_ctr,
        };
    }
    let mut horizon = min_actions;
    let mut t = min_actions + 1;
    while t <= t_len {
        if !(mad[t] < threshold) {
            break;
        }
        horizon = t;
        t += 1;
    }
    OracleOut {
        horizon,
        replan_ctr,
        max_replan_ctr,
    }
}

pub type Case = (Vec<(f64, usize)>, usize, f64, f64, u32, u32, u32, u32);

/// Per-step disagreement levels on a dyadic grid, so every value and its
/// normalized image are exact and ties with the thresholds occur often. Kept
/// below 1/7 so the scaled entry stays inside the unclamped range.
fn level() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.0),
        (0u32..=9).prop_map(|i| i as f64 / 64.0),
        (0u32..=146_800).prop_map(|i| i as f64 / (1u32 << 20) as f64),
    ]
}

/// Thresholds that coincide with achievable MAD values, plus generic ones.
fn threshold() -> impl Strategy<Value = f64> {
    prop_oneof![
        (1u32..=9).prop_map(|i| (i as f64 / 64.0 * ACTION_DIM as f64) / ACTION_DIM as f64),
        0.001..0.15f64,
    ]
}

pub fn case() -> impl Strategy<Value = Case> {
    (1usize..=10).prop_flat_map(|k| {
        (
            prop::collection::vec((level(), 0usize..ACTION_DIM), k),
            1..=k,
            threshold(),
            threshold(),
            0u32..6,
            0u32..6,
            0u32..6,
            0u32..6,
        )
    })
}

/// Runs the implementation and the oracle on one case.
pub fn check_case(case: Case) -> Result<(), TestCaseError> {
    let (
        steps,
        min_actions,
        replan_threshold,
        threshold,
        max_replan_count,
        next_task_thresh,
        ctr,
        max_ctr,
    ) = case;
    // continuous head at the origin; the discrete head moves one dimension
    // by 7x the level
    let cont: Vec<[f64; ACTION_DIM]> = steps.iter().map(|_| [0.0; ACTION_DIM]).collect();
    let disc: Vec<[f64; ACTION_DIM]> = steps
        .iter()
        .map(|&(m, d)| {
            let mut a = [0.0; ACTION_DIM];
            a[d] = m * ACTION_DIM as f64;
            a
        })
        .collect();
    let to_chunk = |v: &[[f64; ACTION_DIM]]| {
        ActionChunk::new(v.iter().map(|a| Action::from_array(*a)).collect()).unwrap()
    };
    let chunk = DualChunk::new(to_chunk(&cont), to_chunk(&disc), vec![1.0; steps.len()]).unwrap();
    let params = AdaHorizonParams {
        min_actions,
        threshold,
        replan_threshold,
        max_replan_count,
        next_task_thresh,
        reset_on_full_horizon: false,
    };
    let mut state = EnsemblerState::with_counters(ctr, max_ctr);
    let out = adahorizon_step(&chunk, &params, &mut state, &NormStats::unit()).unwrap();
    let want = oracle(
        &cont,
        &disc,
        min_actions,
        replan_threshold,
        threshold,
        max_replan_count,
        next_task_thresh,
        ctr,
        max_ctr,
    );
    prop_assert_eq!(out.horizon, want.horizon);
    prop_assert_eq!(out.actions.len(), want.horizon);
    prop_assert_eq!(state.replan_ctr, want.replan_ctr);
    prop_assert_eq!(state.max_replan_ctr, want.max_replan_ctr);
    prop_assert!(out.horizon >= min_actions && out.horizon <= steps.len());
    for (a, d) in out.actions.iter().zip(&disc) {
        prop_assert_eq!(a.to_array(), *d);
    }
    Ok(())
}

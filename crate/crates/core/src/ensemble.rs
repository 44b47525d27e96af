//! Chunk ensemblers: decide which of a dual-head prediction's actions get
//! executed before the next inference.
//!
//! [`adahorizon_step`] truncates the discrete chunk where the two heads start
//! to disagree. The remaining operations are simplified baselines sharing the
//! same [`Ensembler`] interface so the episode runner can swap them freely.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::actionspace::{normalize, Action, ActionChunk, NormStats, ACTION_DIM};
use crate::error::{Error, Result};

/// Continuous and discrete predictions for the same `K` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DualChunk {
    /// Continuous head output in raw action units.
    pub cont: ActionChunk,
    /// Discrete head output after dequantization.
    pub disc: ActionChunk,
    /// Per-step mean over dimensions of the max softmax probability.
    pub disc_conf: Vec<f64>,
}

impl DualChunk {
    pub fn new(cont: ActionChunk, disc: ActionChunk, disc_conf: Vec<f64>) -> Result<Self> {
        if cont.len() != disc.len() || disc_conf.len() != cont.len() {
            return Err(Error::InvalidParam(format!(
                "dual chunk lengths differ: cont {}, disc {}, conf {}",
                cont.len(),
                disc.len(),
                disc_conf.len()
            )));
        }
        if disc_conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParam(
                "discrete confidence outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            cont,
            disc,
            disc_conf,
        })
    }

    /// Both heads set to `chunk`, full confidence.
    pub fn agreeing(chunk: ActionChunk) -> Self {
        let k = chunk.len();
        Self {
            cont: chunk.clone(),
            disc: chunk,
            disc_conf: vec![1.0; k],
        }
    }

    pub fn len(&self) -> usize {
        self.cont.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cont.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaHorizonParams {
    /// Steps always executed from each chunk.
    pub min_actions: usize,
    /// Steps past `min_actions` run while their MAD stays below this.
    pub threshold: f64,
    /// MAD above this inside the first `min_actions` steps counts a replan.
    pub replan_threshold: f64,
    pub max_replan_count: u32,
    pub next_task_thresh: u32,
    /// Zero `replan_ctr` whenever a full chunk executes. Off by default.
    pub reset_on_full_horizon: bool,
}

impl Default for AdaHorizonParams {
    fn default() -> Self {
        Self {
            min_actions: 4,
            threshold: 0.06,
            replan_threshold: 0.12,
            max_replan_count: 5,
            next_task_thresh: 3,
            reset_on_full_horizon: false,
        }
    }
}

impl AdaHorizonParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_actions == 0 {
            return Err(Error::InvalidParam("min_actions must be at least 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidParam("threshold must be positive".into()));
        }
        if !(self.replan_threshold > 0.0) {
            return Err(Error::InvalidParam(
                "replan_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-episode ensembler memory.
#[derive(Clone, Debug, Default)]
pub struct EnsemblerState {
    pub replan_ctr: u32,
    pub max_replan_ctr: u32,
    /// Control ticks executed so far.
    clock: u64,
    history: VecDeque<(u64, DualChunk)>,
}

impl EnsemblerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_counters(replan_ctr: u32, max_replan_ctr: u32) -> Self {
        Self {
            replan_ctr,
            max_replan_ctr,
            ..Self::default()
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn advance(&mut self, ticks: usize) {
        self.clock += ticks as u64;
    }

    /// Stores `chunk` as emitted now and drops chunks that no longer overlap
    /// the current tick.
    fn record(&mut self, chunk: &DualChunk) {
        let now = self.clock;
        self.history.retain(|(t0, c)| now - t0 < c.len() as u64);
        self.history.push_back((now, chunk.clone()));
    }

    /// Continuous predictions for the current tick with their ages, oldest
    /// first; the current chunk (age 0) comes last.
    fn overlapping(&self) -> impl Iterator<Item = (u64, &Action)> + '_ {
        let now = self.clock;
        self.history.iter().filter_map(move |(t0, c)| {
            let age = now - t0;
            c.cont.get(age as usize).map(|a| (age, a))
        })
    }
}

/// Mean absolute head disagreement per step, in normalized action units.
pub fn mad_per_step(chunk: &DualChunk, stats: &NormStats) -> Vec<f64> {
    chunk
        .cont
        .actions()
        .iter()
        .zip(chunk.disc.actions())
        .map(|(c, d)| {
            let (c, d) = (normalize(c, stats), normalize(d, stats));
            c.iter().zip(&d).map(|(x, y)| (x - y).abs()).sum::<f64>() / ACTION_DIM as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaHorizonOutput {
    /// Discrete-head prefix to execute.
    pub actions: Vec<Action>,
    pub mad: Vec<f64>,
    pub horizon: usize,
    /// The replan counters forced a full chunk.
    pub escaped: bool,
}

/// Adaptive-horizon selection over one dual chunk.
///
/// Counts a replan event when any of the first `min_actions` steps disagrees
/// by more than `replan_threshold`. Once the counters pass both limits the
/// whole discrete chunk runs. Otherwise execution covers `min_actions` steps
/// and continues while the per-step MAD stays below `threshold`.
pub fn adahorizon_step(
    chunk: &DualChunk,
    params: &AdaHorizonParams,
    state: &mut EnsemblerState,
    stats: &NormStats,
) -> Result<AdaHorizonOutput> {
    let k = chunk.len();
    if k < params.min_actions {
        return Err(Error::ChunkTooShort {
            len: k,
            min_actions: params.min_actions,
        });
    }
    let mad = mad_per_step(chunk, stats);

    let head = &mad[..params.min_actions];
    if params.min_actions > 1 && head.iter().any(|&m| m > params.replan_threshold) {
        state.replan_ctr += 1;
    }
    state.max_replan_ctr = state.max_replan_ctr.max(state.replan_ctr);

    let escaped = state.max_replan_ctr >= params.max_replan_count
        && state.replan_ctr >= params.next_task_thresh;
    let horizon = if escaped {
        k
    } else {
        params.min_actions
            + mad[params.min_actions..]
                .iter()
                .take_while(|&&m| m < params.threshold)
                .count()
    };
    if params.reset_on_full_horizon && horizon == k {
        state.replan_ctr = 0;
    }

    Ok(AdaHorizonOutput {
        actions: chunk.disc.prefix(horizon),
        mad,
        horizon,
        escaped,
    })
}

/// Exponentially weighted average of every stored continuous prediction for
/// the current tick; weight `exp(-decay * age)`.
pub fn temporal_ensemble_step(chunk: &DualChunk, state: &mut EnsemblerState, decay: f64) -> Action {
    state.record(chunk);
    let mut acc = [0.0; ACTION_DIM];
    let mut total = 0.0;
    for (age, a) in state.overlapping() {
        let w = (-decay * age as f64).exp();
        total += w;
        for (s, v) in acc.iter_mut().zip(a.to_array()) {
            *s += w * v;
        }
    }
    Action::from_array(acc.map(|s| s / total))
}

/// Picks the discrete chunk when its mean confidence reaches `theta`, else
/// the continuous chunk.
pub fn confidence_fusion_step(chunk: &DualChunk, theta: f64) -> ActionChunk {
    let mean = chunk.disc_conf.iter().sum::<f64>() / chunk.disc_conf.len() as f64;
    if mean >= theta {
        chunk.disc.clone()
    } else {
        chunk.cont.clone()
    }
}

fn cosine(a: &[f64; ACTION_DIM], b: &[f64; ACTION_DIM]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Averages stored continuous predictions for the current tick, weighting
/// each by its clipped cosine similarity to the newest prediction.
pub fn similarity_ensemble_step(chunk: &DualChunk, state: &mut EnsemblerState) -> Action {
    state.record(chunk);
    let current = chunk.cont[0].to_array();
    let mut acc = current;
    let mut total = 1.0;
    for (age, a) in state.overlapping() {
        if age == 0 {
            continue;
        }
        let v = a.to_array();
        let w = cosine(&v, &current).max(0.0);
        total += w;
        for (s, x) in acc.iter_mut().zip(v) {
            *s += w * x;
        }
    }
    Action::from_array(acc.map(|s| s / total))
}

/// Whole chunk from one head.
pub fn fixed_horizon_step(chunk: &DualChunk, use_discrete: bool) -> ActionChunk {
    if use_discrete {
        chunk.disc.clone()
    } else {
        chunk.cont.clone()
    }
}

/// Ensembler choice as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Ensembler {
    AdaHorizon(AdaHorizonParams),
    TemporalEnsemble { decay: f64 },
    ConfidenceFusion { theta: f64 },
    Similarity,
    FixedHorizon { use_discrete: bool },
}

/// What one ensembler call decided.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub actions: Vec<Action>,
    /// Steps the ensembler committed to; equals `actions.len()`.
    pub horizon: usize,
    /// Head disagreement of the chunk, logged for every method.
    pub mad: Vec<f64>,
}

impl Ensembler {
    /// Temporal-ensembling decay used by the baseline.
    pub const DEFAULT_TEMPORAL_DECAY: f64 = 0.01;
    /// Confidence threshold of the fusion baseline.
    pub const DEFAULT_CONFIDENCE_THETA: f64 = 0.8;

    /// The six compared methods, in table order.
    pub fn benchmark_suite(params: &AdaHorizonParams) -> Vec<Ensembler> {
        vec![
            Ensembler::TemporalEnsemble {
                decay: Self::DEFAULT_TEMPORAL_DECAY,
            },
            Ensembler::ConfidenceFusion {
                theta: Self::DEFAULT_CONFIDENCE_THETA,
            },
            Ensembler::Similarity,
            Ensembler::FixedHorizon {
                use_discrete: false,
            },
            Ensembler::FixedHorizon { use_discrete: true },
            Ensembler::AdaHorizon(params.clone()),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ensembler::AdaHorizon(_) => "adahorizon",
            Ensembler::TemporalEnsemble { .. } => "temporal",
            Ensembler::ConfidenceFusion { .. } => "confidence_fusion",
            Ensembler::Similarity => "similarity",
            Ensembler::FixedHorizon { use_discrete: true } => "fixed_disc",
            Ensembler::FixedHorizon {
                use_discrete: false,
            } => "fixed_cont",
        }
    }

    /// Parses a method name, taking tunables from `params` and the defaults.
    pub fn from_name(name: &str, params: &AdaHorizonParams) -> Option<Ensembler> {
        Some(match name {
            "adahorizon" => Ensembler::AdaHorizon(params.clone()),
            "temporal" => Ensembler::TemporalEnsemble {
                decay: Self::DEFAULT_TEMPORAL_DECAY,
            },
            "confidence_fusion" => Ensembler::ConfidenceFusion {
                theta: Self::DEFAULT_CONFIDENCE_THETA,
            },
            "similarity" => Ensembler::Similarity,
            "fixed_disc" => Ensembler::FixedHorizon { use_discrete: true },
            "fixed_cont" => Ensembler::FixedHorizon {
                use_discrete: false,
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Ensembler::AdaHorizon(p) => p.validate(),
            Ensembler::TemporalEnsemble { decay } if !(*decay >= 0.0) => Err(Error::InvalidParam(
                "temporal decay must be non-negative".into(),
            )),
            Ensembler::ConfidenceFusion { theta } if !(0.0..=1.0).contains(theta) => Err(
                Error::InvalidParam("confidence theta must lie in [0, 1]".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Runs the ensembler on a fresh chunk and advances the state's clock by
    /// the number of actions handed back.
    pub fn select(
        &self,
        chunk: &DualChunk,
        state: &mut EnsemblerState,
        stats: &NormStats,
    ) -> Result<Selection> {
        let (actions, mad) = match self {
            Ensembler::AdaHorizon(params) => {
                let out = adahorizon_step(chunk, params, state, stats)?;
                (out.actions, out.mad)
            }
            Ensembler::TemporalEnsemble { decay } => (
                vec![temporal_ensemble_step(chunk, state, *decay)],
                mad_per_step(chunk, stats),
            ),
            Ensembler::ConfidenceFusion { theta } => (
                confidence_fusion_step(chunk, *theta).into_actions(),
                mad_per_step(chunk, stats),
            ),
            Ensembler::Similarity => (
                vec![similarity_ensemble_step(chunk, state)],
                mad_per_step(chunk, stats),
            ),
            Ensembler::FixedHorizon { use_discrete } => (
                fixed_horizon_step(chunk, *use_discrete).into_actions(),
                mad_per_step(chunk, stats),
            ),
        };
        state.advance(actions.len());
        Ok(Selection {
            horizon: actions.len(),
            actions,
            mad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk_of(values: &[[f64; ACTION_DIM]]) -> ActionChunk {
        ActionChunk::new(values.iter().map(|v| Action::from_array(*v)).collect()).unwrap()
    }

    /// Continuous head offset from the discrete head on every dimension so
    /// the per-step MAD equals `mad` under unit stats.
    fn chunk_with_mad(mad: &[f64]) -> DualChunk {
        let disc: Vec<[f64; 7]> = (0..mad.len())
            .map(|t| [-0.5 + 0.01 * t as f64; 7])
            .collect();
        let cont: Vec<[f64; 7]> = disc
            .iter()
            .zip(mad)
            .map(|(d, m)| d.map(|v| v + m))
            .collect();
        DualChunk::new(chunk_of(&cont), chunk_of(&disc), vec![1.0; mad.len()]).unwrap()
    }

    #[test]
    fn mad_zero_for_identical_heads() {
        let c = chunk_of(&[[0.1, -0.2, 0.3, 0.0, 0.1, 0.2, 1.0]; 8]);
        let dual = DualChunk::agreeing(c);
        assert_eq!(mad_per_step(&dual, &NormStats::unit()), vec![0.0; 8]);
    }

    #[test]
    fn mad_single_dimension_offset() {
        let cont = chunk_of(&[[0.1, 0., 0., 0., 0., 0., 0.]]);
        let disc = chunk_of(&[[0.0; 7]]);
        let dual = DualChunk::new(cont, disc, vec![1.0]).unwrap();
        let mad = mad_per_step(&dual, &NormStats::unit());
        assert!((mad[0] - 0.1 / 7.0).abs() < 1e-15);
        assert!((mad[0] - 0.0142857).abs() < 1e-7);
    }

    #[test]
    fn mad_uses_normalized_units() {
        let stats = NormStats::new(
            [-0.02, -0.02, -0.02, 0., 0., -0.1, 0.],
            [0.02, 0.02, 0.02, 0., 0., 0.1, 1.],
        )
        .unwrap();
        let cont = chunk_of(&[[0.01, 0., 0., 5.0, 0., 0., 0.]]);
        let disc = chunk_of(&[[0.0; 7]]);
        let dual = DualChunk::new(cont, disc, vec![1.0]).unwrap();
        // dx differs by half the range; the degenerate rx dimension is ignored
        assert!((mad_per_step(&dual, &stats)[0] - 0.5 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_disagreement_runs_full_chunk() {
        let dual = chunk_with_mad(&[0.0; 8]);
        let mut state = EnsemblerState::new();
        let params = AdaHorizonParams {
            threshold: 0.1,
            ..Default::default()
        };
        let out = adahorizon_step(&dual, &params, &mut state, &NormStats::unit()).unwrap();
        assert_eq!(out.horizon, 8);
        assert_eq!(out.actions, dual.disc.actions());
        assert_eq!((state.replan_ctr, state.max_replan_ctr), (0, 0));
    }

    #[test]
    fn horizon_breaks_at_first_disagreeing_step() {
        let dual = chunk_with_mad(&[0., 0., 0., 0., 0.05, 0.2, 0.01, 0.]);
        let mut state = EnsemblerState::new();
        let params = AdaHorizonParams {
            threshold: 0.1,
            ..Default::default()
        };
        let out = adahorizon_step(&dual, &params, &mut state, &NormStats::unit()).unwrap();
        assert_eq!(out.horizon, 5);
        assert_eq!(out.actions, dual.disc.prefix(5));
        assert!(!out.escaped);
    }

    #[test]
    fn escape_hatch_returns_full_discrete_chunk() {
        let dual = chunk_with_mad(&[0.5; 8]);
        let mut state = EnsemblerState::with_counters(3, 5);
        let params = AdaHorizonParams::default();
        let out = adahorizon_step(&dual, &params, &mut state, &NormStats::unit()).unwrap();
        assert!(out.escaped);
        assert_eq!(out.horizon, 8);
        assert_eq!(out.actions, dual.disc.actions());
        assert_eq!(out.mad.len(), 8);
        assert_eq!(state.replan_ctr, 4);
    }

    #[test]
    fn replan_counter_and_escape_sequence() {
        let params = AdaHorizonParams::default();
        let dual = chunk_with_mad(&[0.5; 8]);
        let mut state = EnsemblerState::new();
        let mut horizons = Vec::new();
        for _ in 0..6 {
            horizons.push(
                adahorizon_step(&dual, &params, &mut state, &NormStats::unit())
                    .unwrap()
                    .horizon,
            );
        }
        // counts 1..=4 stay short, the fifth event reaches max_replan_count
        assert_eq!(horizons, vec![4, 4, 4, 4, 8, 8]);
        assert_eq!(state.replan_ctr, 6);
        assert_eq!(state.max_replan_ctr, 6);
    }

    #[test]
    fn reset_mode_clears_replan_counter_on_full_chunk() {
        let params = AdaHorizonParams {
            reset_on_full_horizon: true,
            ..Default::default()
        };
        let mut state = EnsemblerState::with_counters(2, 4);
        adahorizon_step(
            &chunk_with_mad(&[0.0; 8]),
            &params,
            &mut state,
            &NormStats::unit(),
        )
        .unwrap();
        assert_eq!((state.replan_ctr, state.max_replan_ctr), (0, 4));
    }

    #[test]
    fn single_step_min_never_counts_replans() {
        let params = AdaHorizonParams {
            min_actions: 1,
            ..Default::default()
        };
        let mut state = EnsemblerState::new();
        let out = adahorizon_step(
            &chunk_with_mad(&[0.9; 8]),
            &params,
            &mut state,
            &NormStats::unit(),
        )
        .unwrap();
        assert_eq!(out.horizon, 1);
        assert_eq!(state.replan_ctr, 0);
    }

    #[test]
    fn short_chunk_rejected() {
        let dual = chunk_with_mad(&[0.0; 3]);
        let err = adahorizon_step(
            &dual,
            &AdaHorizonParams::default(),
            &mut EnsemblerState::new(),
            &NormStats::unit(),
        );
        assert!(matches!(
            err,
            Err(Error::ChunkTooShort {
                len: 3,
                min_actions: 4
            })
        ));
        assert!(err
            .unwrap_err()
            .to_string()
            .contains("chunk shorter than min horizon"));
    }

    #[test]
    fn temporal_ensemble_cases() {
        let a = chunk_of(&[
            [1.0, 2.0, 0., 0., 0., 0., 1.0],
            [3.0, 4.0, 0., 0., 0., 0., 0.0],
        ]);
        let b = chunk_of(&[
            [5.0, -2.0, 0., 0., 0., 0., 1.0],
            [7.0, 0.0, 0., 0., 0., 0., 1.0],
        ]);
        let mut state = EnsemblerState::new();
        let first = temporal_ensemble_step(&DualChunk::agreeing(a.clone()), &mut state, 0.0);
        assert_eq!(first, a[0]);
        state.advance(1);
        let second = temporal_ensemble_step(&DualChunk::agreeing(b.clone()), &mut state, 0.0);
        for d in 0..ACTION_DIM {
            let mean = (a[1].to_array()[d] + b[0].to_array()[d]) / 2.0;
            assert!((second.to_array()[d] - mean).abs() <= 1e-12);
        }

        let mut state = EnsemblerState::new();
        temporal_ensemble_step(&DualChunk::agreeing(a.clone()), &mut state, 0.01);
        state.advance(1);
        let out = temporal_ensemble_step(&DualChunk::agreeing(b.clone()), &mut state, 0.01);
        let (w_new, w_old) = (1.0, (-0.01f64).exp());
        for d in 0..ACTION_DIM {
            let direct =
                (w_new * b[0].to_array()[d] + w_old * a[1].to_array()[d]) / (w_new + w_old);
            assert!((out.to_array()[d] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn history_is_bounded_by_chunk_length() {
        let c = chunk_of(&[[0.1; 7]; 8]);
        let mut state = EnsemblerState::new();
        for _ in 0..50 {
            temporal_ensemble_step(&DualChunk::agreeing(c.clone()), &mut state, 0.01);
            state.advance(1);
            assert!(state.history_len() <= 8);
        }
    }

    #[test]
    fn confidence_fusion_picks_one_head() {
        let cont = chunk_of(&[[0.1; 7]; 8]);
        let disc = chunk_of(&[[0.2; 7]; 8]);
        let sure = DualChunk::new(cont.clone(), disc.clone(), vec![1.0; 8]).unwrap();
        let unsure = DualChunk::new(cont.clone(), disc.clone(), vec![0.5; 8]).unwrap();
        assert_eq!(
            confidence_fusion_step(&sure, Ensembler::DEFAULT_CONFIDENCE_THETA),
            disc
        );
        assert_eq!(confidence_fusion_step(&unsure, 0.8), cont);
    }

    #[test]
    fn similarity_weights() {
        let x = [1.0, 0., 0., 0., 0., 0., 0.];
        let y = [0., 1.0, 0., 0., 0., 0., 0.];
        let mut state = EnsemblerState::new();
        let cur = chunk_of(&[x, x]);
        assert_eq!(
            similarity_ensemble_step(&DualChunk::agreeing(cur.clone()), &mut state),
            cur[0]
        );

        // identical earlier prediction: plain average
        let mut state = EnsemblerState::new();
        similarity_ensemble_step(
            &DualChunk::agreeing(chunk_of(&[x, [3.0, 0., 0., 0., 0., 0., 0.]])),
            &mut state,
        );
        state.advance(1);
        let out = similarity_ensemble_step(&DualChunk::agreeing(chunk_of(&[x, x])), &mut state);
        assert!((out.dx - 2.0).abs() < 1e-12);

        // orthogonal earlier prediction: ignored
        let mut state = EnsemblerState::new();
        similarity_ensemble_step(&DualChunk::agreeing(chunk_of(&[y, y])), &mut state);
        state.advance(1);
        let out = similarity_ensemble_step(&DualChunk::agreeing(chunk_of(&[x, x])), &mut state);
        assert_eq!(out.to_array(), x);

        // zero vector contributes nothing
        let mut state = EnsemblerState::new();
        similarity_ensemble_step(&DualChunk::agreeing(chunk_of(&[y, [0.0; 7]])), &mut state);
        state.advance(1);
        let out = similarity_ensemble_step(&DualChunk::agreeing(chunk_of(&[x, x])), &mut state);
        assert_eq!(out.to_array(), x);
    }

    #[test]
    fn fixed_horizon_heads() {
        let cont = chunk_of(&[[0.1; 7]; 8]);
        let disc = chunk_of(&[[0.2; 7]; 8]);
        let dual = DualChunk::new(cont.clone(), disc.clone(), vec![0.3; 8]).unwrap();
        assert_eq!(fixed_horizon_step(&dual, true), disc);
        assert_eq!(fixed_horizon_step(&dual, false), cont);
        let same = DualChunk::agreeing(cont.clone());
        assert_eq!(
            fixed_horizon_step(&same, true),
            fixed_horizon_step(&same, false)
        );
    }

    #[test]
    fn infinite_threshold_matches_fixed_discrete() {
        let dual = chunk_with_mad(&[0.01, 0.02, 0.0, 0.05, 0.3, 0.9, 0.1, 0.2]);
        let params = AdaHorizonParams {
            threshold: f64::INFINITY,
            ..Default::default()
        };
        let stats = NormStats::unit();
        let ada = Ensembler::AdaHorizon(params)
            .select(&dual, &mut EnsemblerState::new(), &stats)
            .unwrap();
        let fixed = Ensembler::FixedHorizon { use_discrete: true }
            .select(&dual, &mut EnsemblerState::new(), &stats)
            .unwrap();
        assert_eq!(ada.actions, fixed.actions);
    }

    #[test]
    fn names_round_trip() {
        let params = AdaHorizonParams::default();
        let suite = Ensembler::benchmark_suite(&params);
        assert_eq!(suite.len(), 6);
        for e in suite {
            assert_eq!(Ensembler::from_name(e.name(), &params), Some(e));
        }
        assert!(Ensembler::from_name("act", &params).is_none());
    }

    #[test]
    fn dual_chunk_validation() {
        let a = chunk_of(&[[0.0; 7]; 2]);
        let b = chunk_of(&[[0.0; 7]; 3]);
        assert!(DualChunk::new(a.clone(), b, vec![1.0; 2]).is_err());
        assert!(DualChunk::new(a.clone(), a.clone(), vec![1.5; 2]).is_err());
        assert!(DualChunk::new(a.clone(), a, vec![0.5; 2]).is_ok());
    }
}

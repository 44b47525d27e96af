//! End-effector delta actions, dataset normalization and the uniform bin
//! tokenizer shared by the policy heads, the ensemblers and the simulator.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Action dimensionality: `[dx, dy, dz, rx, ry, rz, grip]`.
pub const ACTION_DIM: usize = 7;
/// Token vocabulary per action dimension.
pub const NUM_BINS: usize = 256;
/// Default number of steps predicted per inference.
pub const DEFAULT_CHUNK_LEN: usize = 8;
/// Predicted grip values at or above this close the gripper.
pub const GRIP_THRESHOLD: f64 = 0.5;

const LOWER_PERCENTILE: f64 = 0.01;
const UPPER_PERCENTILE: f64 = 0.99;
const NORM_STATS_FORMAT: &str = "chunkexec-normstats/v1";

/// One relative end-effector command.
///
/// Translation in meters, rotation as Euler-angle increments in radians and
/// an absolute gripper command (0 open, 1 closed).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; ACTION_DIM]", into = "[f64; ACTION_DIM]")]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub grip: f64,
}

impl Action {
    pub const fn zero() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            dz: 0.0,
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
            grip: 0.0,
        }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [
            self.dx, self.dy, self.dz, self.rx, self.ry, self.rz, self.grip,
        ]
    }

    pub fn from_array(v: [f64; ACTION_DIM]) -> Self {
        let [dx, dy, dz, rx, ry, rz, grip] = v;
        Self {
            dx,
            dy,
            dz,
            rx,
            ry,
            rz,
            grip,
        }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn rotation(&self) -> [f64; 3] {
        [self.rx, self.ry, self.rz]
    }

    /// Gripper command as executed on hardware.
    pub fn grip_closed(&self) -> bool {
        self.grip >= GRIP_THRESHOLD
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; ACTION_DIM]> for Action {
    fn from(v: [f64; ACTION_DIM]) -> Self {
        Self::from_array(v)
    }
}

impl From<Action> for [f64; ACTION_DIM] {
    fn from(a: Action) -> Self {
        a.to_array()
    }
}

/// `K` consecutive actions predicted by one inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionChunk {
    actions: Vec<Action>,
}

impl ActionChunk {
    pub fn new(actions: Vec<Action>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidParam(
                "action chunk must hold at least one step".into(),
            ));
        }
        Ok(Self { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn into_actions(self) -> Vec<Action> {
        self.actions
    }

    pub fn get(&self, t: usize) -> Option<&Action> {
        self.actions.get(t)
    }

    /// First `len` actions, cloned.
    pub fn prefix(&self, len: usize) -> Vec<Action> {
        self.actions[..len.min(self.actions.len())].to_vec()
    }
}

impl std::ops::Index<usize> for ActionChunk {
    type Output = Action;

    fn index(&self, t: usize) -> &Action {
        &self.actions[t]
    }
}

/// `K x D` grid of bin indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub tokens: Vec<[u16; ACTION_DIM]>,
    pub bins: usize,
}

impl TokenChunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-dimension bounds mapping raw actions onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lo: [f64; ACTION_DIM],
    pub hi: [f64; ACTION_DIM],
}

impl NormStats {
    /// Builds stats from explicit bounds; requires `lo <= hi` per dimension.
    pub fn new(lo: [f64; ACTION_DIM], hi: [f64; ACTION_DIM]) -> Result<Self> {
        for d in 0..ACTION_DIM {
            if !(lo[d].is_finite() && hi[d].is_finite()) || lo[d] > hi[d] {
                return Err(Error::InvalidParam(format!(
                    "norm stats dimension {d}: lo {} > hi {}",
                    lo[d], hi[d]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Identity stats: every dimension already lives on `[-1, 1]`.
    pub fn unit() -> Self {
        Self {
            lo: [-1.0; ACTION_DIM],
            hi: [1.0; ACTION_DIM],
        }
    }

    pub fn is_degenerate(&self, d: usize) -> bool {
        self.lo[d] == self.hi[d]
    }

    pub fn degenerate_dims(&self) -> [bool; ACTION_DIM] {
        std::array::from_fn(|d| self.is_degenerate(d))
    }

    /// Writes the stats as JSON with 17 significant digits per value.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })
    }

    pub fn to_text(&self) -> String {
        fn row(v: &[f64]) -> String {
            let mut s = String::from("[");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                let _ = write!(s, "{x:.16e}");
            }
            s.push(']');
            s
        }
        let degenerate: Vec<String> = self
            .degenerate_dims()
            .iter()
            .map(|b| b.to_string())
            .collect();
        format!(
            "{{\n  \"format\": \"{NORM_STATS_FORMAT}\",\n  \"lo\": {},\n  \"hi\": {},\n  \"degenerate\": [{}]\n}}\n",
            row(&self.lo),
            row(&self.hi),
            degenerate.join(", ")
        )
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        #[derive(Deserialize)]
        struct Raw {
            format: String,
            lo: [f64; ACTION_DIM],
            hi: [f64; ACTION_DIM],
            #[allow(dead_code)]
            degenerate: Option<[bool; ACTION_DIM]>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if raw.format != NORM_STATS_FORMAT {
            return Err(format!("unsupported norm stats format {:?}", raw.format));
        }
        NormStats::new(raw.lo, raw.hi).map_err(|e| e.to_string())
    }
}

/// Linear-interpolated percentile of an ascending slice, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let below = pos.floor() as usize;
    let above = pos.ceil() as usize;
    let frac = pos - below as f64;
    sorted[below] + (sorted[above] - sorted[below]) * frac
}

/// 1st/99th percentile bounds of every action dimension.
pub fn compute_norm_stats(actions: &[Action]) -> Result<NormStats> {
    if actions.is_empty() {
        return Err(Error::NoActions);
    }
    let mut lo = [0.0; ACTION_DIM];
    let mut hi = [0.0; ACTION_DIM];
    let mut column = Vec::with_capacity(actions.len());
    for d in 0..ACTION_DIM {
        column.clear();
        column.extend(actions.iter().map(|a| a.to_array()[d]));
        column.sort_by(f64::total_cmp);
        lo[d] = percentile_sorted(&column, LOWER_PERCENTILE);
        hi[d] = percentile_sorted(&column, UPPER_PERCENTILE);
        // interpolation can leave a last-ulp inversion on constant columns
        if hi[d] < lo[d] {
            hi[d] = lo[d];
        }
    }
    NormStats::new(lo, hi)
}

/// Maps each dimension onto `[-1, 1]`, clamping out-of-range values.
/// Degenerate dimensions map to 0.
pub fn normalize(a: &Action, stats: &NormStats) -> [f64; ACTION_DIM] {
    normalize_array(&a.to_array(), stats)
}

pub fn normalize_array(v: &[f64; ACTION_DIM], stats: &NormStats) -> [f64; ACTION_DIM] {
    std::array::from_fn(|d| {
        let (lo, hi) = (stats.lo[d], stats.hi[d]);
        if hi == lo {
            0.0
        } else {
            (2.0 * (v[d] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
        }
    })
}

/// Inverse of [`normalize`] on `[-1, 1]`; degenerate dimensions return `lo`.
pub fn denormalize(x: &[f64; ACTION_DIM], stats: &NormStats) -> Action {
    Action::from_array(std::array::from_fn(|d| {
        let (lo, hi) = (stats.lo[d], stats.hi[d]);
        if hi == lo {
            lo
        } else {
            lo + (x[d] + 1.0) * 0.5 * (hi - lo)
        }
    }))
}

/// Uniform-bin tokenizer over `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantizer {
    bins: usize,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self { bins: NUM_BINS }
    }
}

impl Quantizer {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 || bins > u16::MAX as usize + 1 {
            return Err(Error::InvalidParam(format!(
                "bin count {bins} outside [2, 65536]"
            )));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.bins as f64
    }

    pub fn quantize_value(&self, x: f64) -> u16 {
        let b = ((x + 1.0) * 0.5 * self.bins as f64).floor();
        // `as` saturates and maps NaN to 0
        (b as i64).clamp(0, self.bins as i64 - 1) as u16
    }

    /// Bin center of `token` in normalized units.
    pub fn dequantize_value(&self, token: usize) -> Result<f64> {
        if token >= self.bins {
            return Err(Error::TokenOutOfRange {
                token,
                bins: self.bins,
            });
        }
        Ok(-1.0 + (token as f64 + 0.5) * self.bin_width())
    }

    pub fn quantize(&self, x: &[f64; ACTION_DIM]) -> [u16; ACTION_DIM] {
        std::array::from_fn(|d| self.quantize_value(x[d]))
    }

    pub fn dequantize_normalized(&self, tokens: &[u16; ACTION_DIM]) -> Result<[f64; ACTION_DIM]> {
        let mut out = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            out[d] = self.dequantize_value(tokens[d] as usize)?;
        }
        Ok(out)
    }

    /// Tokens back to a raw action through `stats`.
    pub fn dequantize(&self, tokens: &[u16; ACTION_DIM], stats: &NormStats) -> Result<Action> {
        Ok(denormalize(&self.dequantize_normalized(tokens)?, stats))
    }

    /// Normalizes and tokenizes a whole chunk.
    pub fn tokenize_chunk(&self, chunk: &ActionChunk, stats: &NormStats) -> TokenChunk {
        TokenChunk {
            tokens: chunk
                .actions()
                .iter()
                .map(|a| self.quantize(&normalize(a, stats)))
                .collect(),
            bins: self.bins,
        }
    }

    pub fn detokenize_chunk(&self, tokens: &TokenChunk, stats: &NormStats) -> Result<ActionChunk> {
        let actions = tokens
            .tokens
            .iter()
            .map(|t| self.dequantize(t, stats))
            .collect::<Result<Vec<_>>>()?;
        ActionChunk::new(actions)
    }
}

/// [`Quantizer::quantize`] with the default 256 bins.
pub fn quantize(x: &[f64; ACTION_DIM]) -> [u16; ACTION_DIM] {
    Quantizer::default().quantize(x)
}

/// [`Quantizer::dequantize`] with the default 256 bins.
pub fn dequantize(tokens: &[u16; ACTION_DIM], stats: &NormStats) -> Result<Action> {
    Quantizer::default().dequantize(tokens, stats)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sorted_percentile_oracle(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = p * (v.len() as f64 - 1.0);
        let i = rank as usize;
        if i + 1 >= v.len() {
            return v[v.len() - 1];
        }
        v[i] * (1.0 - (rank - i as f64)) + v[i + 1] * (rank - i as f64)
    }

    #[test]
    fn norm_stats_uniform_dx() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actions: Vec<Action> = (0..1000)
            .map(|_| Action {
                dx: rng.random_range(-0.02..0.02),
                ..Action::zero()
            })
            .collect();
        let stats = compute_norm_stats(&actions).unwrap();
        let dx: Vec<f64> = actions.iter().map(|a| a.dx).collect();
        assert!((stats.lo[0] - sorted_percentile_oracle(&dx, 0.01)).abs() < 1e-15);
        assert!((stats.hi[0] - sorted_percentile_oracle(&dx, 0.99)).abs() < 1e-15);
        assert!((stats.lo[0] + 0.0196).abs() < 1e-3, "lo {}", stats.lo[0]);
        assert!((stats.hi[0] - 0.0196).abs() < 1e-3, "hi {}", stats.hi[0]);
        assert!(stats.is_degenerate(1));
    }

    #[test]
    fn norm_stats_constant_and_single() {
        let a = Action {
            dx: 0.1,
            dy: -0.2,
            dz: 0.3,
            rx: 0.0,
            ry: 0.5,
            rz: 0.0,
            grip: 1.0,
        };
        for n in [1, 5] {
            let stats = compute_norm_stats(&vec![a; n]).unwrap();
            assert_eq!(stats.lo, a.to_array());
            assert_eq!(stats.hi, a.to_array());
            assert!(stats.degenerate_dims().iter().all(|&d| d));
            assert_eq!(normalize(&a, &stats), [0.0; ACTION_DIM]);
        }
        assert!(matches!(compute_norm_stats(&[]), Err(Error::NoActions)));
    }

    #[test]
    fn normalize_boundaries() {
        let stats = NormStats::new([-2.0; 7], [4.0; 7]).unwrap();
        let lo = Action::from_array([-2.0; 7]);
        assert_eq!(normalize(&lo, &stats), [-1.0; 7]);
        let mid = Action::from_array([1.0; 7]);
        assert_eq!(normalize(&mid, &stats), [0.0; 7]);
        let far = Action::from_array([100.0; 7]);
        assert_eq!(normalize(&far, &stats), [1.0; 7]);
        let unit = NormStats::unit();
        assert_eq!(normalize(&Action::from_array([0.25; 7]), &unit), [0.25; 7]);
    }

    #[test]
    fn quantize_endpoints_and_centers() {
        let q = Quantizer::default();
        assert_eq!(q.quantize_value(-1.0), 0);
        assert_eq!(q.quantize_value(1.0), 255);
        assert_eq!(q.quantize_value(0.0), 128);
        assert_eq!(q.quantize_value(f64::NAN), 0);
        assert_eq!(q.dequantize_value(0).unwrap(), -0.99609375);
        assert_eq!(q.dequantize_value(128).unwrap(), 0.00390625);
        assert!(matches!(
            q.dequantize_value(256),
            Err(Error::TokenOutOfRange { .. })
        ));
        let stats = NormStats::unit();
        assert!(dequantize(&[256, 0, 0, 0, 0, 0, 0], &stats).is_err());
        assert_eq!(dequantize(&[128; 7], &stats).unwrap().dx, 0.00390625);
    }

    #[test]
    fn exhaustive_bin_round_trip() {
        let q = Quantizer::default();
        for b in 0..NUM_BINS {
            assert_eq!(q.quantize_value(q.dequantize_value(b).unwrap()) as usize, b);
        }
    }

    #[test]
    fn norm_stats_text_round_trip() {
        let stats = NormStats::new(
            [-0.0213, -1.0 / 3.0, 0.0, 0.0, -0.1, -0.08, 0.0],
            [0.02, 1.0 / 7.0, 0.0, 0.0, 0.1, 0.08, 1.0],
        )
        .unwrap();
        let text = stats.to_text();
        assert!(text.contains("-3.3333333333333331e-1"));
        assert_eq!(NormStats::from_text(&text).unwrap(), stats);
        assert!(NormStats::from_text(&text.replace("v1", "v9")).is_err());
    }

    proptest! {
        #[test]
        fn quantizer_round_trip_error(x in prop::array::uniform7(-1.0f64..=1.0)) {
            let q = Quantizer::default();
            let back = q.dequantize_normalized(&q.quantize(&x)).unwrap();
            for d in 0..ACTION_DIM {
                prop_assert!((back[d] - x[d]).abs() <= 2.0 / 256.0);
                if x[d] < 1.0 {
                    prop_assert!((back[d] - x[d]).abs() <= 1.0 / 256.0);
                }
            }
        }

        #[test]
        fn quantizer_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let q = Quantizer::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q.quantize_value(lo) <= q.quantize_value(hi));
        }

        #[test]
        fn denormalize_inverts_normalize(
            lo in prop::array::uniform7(-5.0f64..0.0),
            span in prop::array::uniform7(0.01f64..5.0),
            x in prop::array::uniform7(-1.0f64..=1.0),
        ) {
            let hi: [f64; 7] = std::array::from_fn(|d| lo[d] + span[d]);
            let stats = NormStats::new(lo, hi).unwrap();
            let back = normalize(&denormalize(&x, &stats), &stats);
            for d in 0..ACTION_DIM {
                prop_assert!((back[d] - x[d]).abs() <= 1e-12);
            }
        }

        #[test]
        fn norm_stats_match_sort_oracle(values in prop::collection::vec(-10.0f64..10.0, 1..10_000)) {
            let actions: Vec<Action> = values
                .iter()
                .map(|&v| Action { rz: v, grip: -v, ..Action::zero() })
                .collect();
            let stats = compute_norm_stats(&actions).unwrap();
            let neg: Vec<f64> = values.iter().map(|v| -v).collect();
            prop_assert!((stats.lo[5] - sorted_percentile_oracle(&values, 0.01)).abs() <= 1e-12);
            prop_assert!((stats.hi[5] - sorted_percentile_oracle(&values, 0.99)).abs() <= 1e-12);
            prop_assert!((stats.lo[6] - sorted_percentile_oracle(&neg, 0.01)).abs() <= 1e-12);
            prop_assert!((stats.hi[6] - sorted_percentile_oracle(&neg, 0.99)).abs() <= 1e-12);
        }
    }
}

//! Analytic gradients of a reduced network against central finite
//! differences.

use chunkexec::actionspace::{Action, ActionChunk, NormStats};
use chunkexec::policy::{NetShape, Observation, PolicyNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms; the central
/// difference itself carries roughly `eps * |L| / h` of rounding noise.
const ABS_FLOOR: f64 = 1e-5;

fn sample(rng: &mut ChaCha8Rng, k: usize) -> (Observation, ActionChunk) {
    let mut v = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let obs = Observation {
        ee_pos: [v(0.1, 0.3), v(-0.2, 0.2), v(0.0, 0.2)],
        ee_euler: [0.0, 0.0, v(-0.5, 0.5)],
        grip_state: if v(0.0, 1.0) > 0.5 { 1.0 } else { 0.0 },
        object_pos: [v(0.1, 0.3), v(-0.1, 0.1), 0.02],
        goal_pos: [v(0.1, 0.3), v(-0.2, 0.2), 0.0],
        instruction_id: (v(0.0, 9.0) as usize).min(8),
    };
    let actions = (0..k)
        .map(|_| {
            let mut a: [f64; 7] = std::array::from_fn(|_| v(-0.03, 0.03));
            a[6] = if v(0.0, 1.0) > 0.5 { 1.0 } else { 0.0 };
            Action::from_array(a)
        })
        .collect();
    (obs, ActionChunk::new(actions).unwrap())
}

/// Probes 100 parameters spread over every tensor; returns the worst
/// relative error, or a description of the first probe over the bound.
pub fn gradient_check() -> Result<f64, String> {
    let shape = NetShape {
        num_instructions: 9,
        hidden: vec![32, 32],
        chunk_len: 2,
        bins: 8,
    };
    let stats = NormStats::new([-0.03; 7], [0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 1.0]).unwrap();
    let mut net = PolicyNet::new(shape, stats.clone(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batch: Vec<_> = (0..3).map(|_| sample(&mut rng, 2)).collect();
    let lambda = 1.0;

    let (_, grads) = net.loss_and_grad(&batch, &stats, lambda).unwrap();
    let analytic = grads.flat();
    assert_eq!(analytic.len(), net.num_params());

    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    let mut worst: f64 = 0.0;
    for probe in 0..100 {
        // cycle through every layer tensor so each one gets probed
        let slice = probe % sizes.len();
        let idx = rng.random_range(0..sizes[slice]);
        let flat_idx = sizes[..slice].iter().sum::<usize>() + idx;

        let original = net.param_slices()[slice][idx];
        net.param_slices_mut()[slice][idx] = original + H;
        let up = net.loss_many(&batch, &stats, lambda).unwrap().total;
        net.param_slices_mut()[slice][idx] = original - H;
        let down = net.loss_many(&batch, &stats, lambda).unwrap().total;
        net.param_slices_mut()[slice][idx] = original;

        let numeric = (up - down) / (2.0 * H);
        let a = analytic[flat_idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        worst = worst.max(rel);
        if rel > MAX_REL_ERR {
            return Err(format!(
                "probe {probe} (tensor {slice}, index {idx}): analytic {a:e}, numeric {numeric:e}"
            ));
        }
    }
    Ok(worst)
}

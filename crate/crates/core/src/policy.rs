//! Dual-head MLP policy.
//!
//! A tanh trunk feeds two linear heads: a continuous head regressing the
//! normalized `K x D` chunk and a discrete head emitting one softmax over
//! `bins` tokens per `(step, dimension)`. Both are trained jointly with
//! `CE + lambda * L1`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actionspace::{
    denormalize, normalize, ActionChunk, NormStats, Quantizer, ACTION_DIM, DEFAULT_CHUNK_LEN,
    NUM_BINS,
};
use crate::ensemble::DualChunk;
use crate::error::{Error, Result};

/// Scripted task templates: 3 object classes x 3 placements.
pub const NUM_INSTRUCTIONS: usize = 9;
/// Observation features before the instruction one-hot.
pub const STATE_FEATURES: usize = 25;
/// Positions are fed to the network in units of 25 cm.
const POSITION_SCALE: f64 = 4.0;
/// Object and goal offsets from the gripper, once in units of 10 cm and once
/// in units of 1 cm clipped at 3 cm. The fine copy resolves the expert's 5 mm
/// move grid close to a target.
const COARSE_OFFSET_SCALE: f64 = 10.0;
const FINE_OFFSET_SCALE: f64 = 100.0;
const FINE_OFFSET_CLIP: f64 = 3.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CXPOLICY";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "chunkexec-policy/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ee_pos: [f64; 3],
    pub ee_euler: [f64; 3],
    pub grip_state: f64,
    pub object_pos: [f64; 3],
    pub goal_pos: [f64; 3],
    pub instruction_id: usize,
}

impl Observation {
    /// Flat network input: scaled state followed by the instruction one-hot.
    pub fn features(&self, num_instructions: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(STATE_FEATURES + num_instructions);
        f.extend(self.ee_pos.iter().map(|v| v * POSITION_SCALE));
        f.extend_from_slice(&self.ee_euler);
        f.push(self.grip_state);
        f.extend(self.object_pos.iter().map(|v| v * POSITION_SCALE));
        f.extend(self.goal_pos.iter().map(|v| v * POSITION_SCALE));
        for target in [self.object_pos, self.goal_pos] {
            let off: [f64; 3] = std::array::from_fn(|i| target[i] - self.ee_pos[i]);
            f.extend(off.iter().map(|v| v * COARSE_OFFSET_SCALE));
            f.extend(
                off.iter()
                    .map(|v| (v * FINE_OFFSET_SCALE).clamp(-FINE_OFFSET_CLIP, FINE_OFFSET_CLIP)),
            );
        }
        f.extend((0..num_instructions).map(|i| if i == self.instruction_id { 1.0 } else { 0.0 }));
        f
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub num_instructions: usize,
    pub hidden: Vec<usize>,
    pub chunk_len: usize,
    pub bins: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            num_instructions: NUM_INSTRUCTIONS,
            hidden: vec![256, 256],
            chunk_len: DEFAULT_CHUNK_LEN,
            bins: NUM_BINS,
        }
    }
}

impl NetShape {
    pub fn input_dim(&self) -> usize {
        STATE_FEATURES + self.num_instructions
    }

    /// `K * D`: number of predicted scalars per head.
    pub fn outputs(&self) -> usize {
        self.chunk_len * ACTION_DIM
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParam(format!("bad network shape {self:?}")));
        }
        Quantizer::new(self.bins).map(|_| ())
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-limit..limit));
        Self {
            w,
            b: Array1::zeros(outputs),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Loss terms averaged over samples and `(step, dimension)` entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    shape: NetShape,
    trunk: Vec<Dense>,
    cont_head: Dense,
    disc_head: Dense,
    stats: NormStats,
    quantizer: Quantizer,
}

/// Gradient with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<Dense>,
    pub cont_head: Dense,
    pub disc_head: Dense,
}

impl Gradients {
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.cont_head, &self.disc_head])
    }

    /// All entries flattened in [`PolicyNet::param_slices`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Training targets for a batch: normalized chunk values and their tokens.
struct Targets {
    values: Array2<f64>,
    tokens: Vec<u16>,
}

struct Activations {
    /// Input followed by every post-tanh hidden layer.
    layers: Vec<Array2<f64>>,
    cont: Array2<f64>,
    /// Softmax probabilities, `B x (K * D * bins)`.
    probs: Array2<f64>,
}

impl PolicyNet {
    pub fn new(shape: NetShape, stats: NormStats, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(shape.hidden.len());
        let mut width = shape.input_dim();
        for &h in &shape.hidden {
            trunk.push(Dense::glorot(width, h, &mut rng));
            width = h;
        }
        let cont_head = Dense::glorot(width, shape.outputs(), &mut rng);
        let disc_head = Dense::glorot(width, shape.outputs() * shape.bins, &mut rng);
        let quantizer = Quantizer::new(shape.bins)?;
        Ok(Self {
            shape,
            trunk,
            cont_head,
            disc_head,
            stats,
            quantizer,
        })
    }

    /// Network with every weight and bias zero.
    pub fn zeros(shape: NetShape, stats: NormStats) -> Result<Self> {
        let mut net = Self::new(shape, stats, 0)?;
        for s in net.param_slices_mut() {
            s.fill(0.0);
        }
        Ok(net)
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn quantizer(&self) -> Quantizer {
        self.quantizer
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.cont_head, &self.disc_head])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain([&mut self.cont_head, &mut self.disc_head])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::len).sum()
    }

    /// Weight then bias of every layer, trunk first, discrete head last.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.w.as_slice().expect("standard layout"),
                    l.b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn feature_matrix<'a>(&self, obs: impl IntoIterator<Item = &'a Observation>) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = obs
            .into_iter()
            .map(|o| o.features(self.shape.num_instructions))
            .collect();
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((n, self.shape.input_dim()), flat).expect("feature width")
    }

    fn targets<'a>(
        &self,
        chunks: impl IntoIterator<Item = &'a ActionChunk>,
        stats: &NormStats,
    ) -> Result<Targets> {
        let k = self.shape.chunk_len;
        let mut values = Vec::new();
        let mut rows = 0;
        for chunk in chunks {
            if chunk.len() != k {
                return Err(Error::InvalidParam(format!(
                    "target chunk has {} steps, network predicts {k}",
                    chunk.len()
                )));
            }
            for a in chunk.actions() {
                values.extend(normalize(a, stats));
            }
            rows += 1;
        }
        let tokens = values
            .iter()
            .map(|&v| self.quantizer.quantize_value(v))
            .collect();
        let values =
            Array2::from_shape_vec((rows, self.shape.outputs()), values).expect("target width");
        Ok(Targets { values, tokens })
    }

    fn forward_batch(&self, x: Array2<f64>) -> Activations {
        let mut layers = Vec::with_capacity(self.trunk.len() + 1);
        layers.push(x);
        for layer in &self.trunk {
            let mut h = layer.apply(&layers.last().expect("input").view());
            h.mapv_inplace(f64::tanh);
            layers.push(h);
        }
        let top = layers.last().expect("trunk output").view();
        let cont = self.cont_head.apply(&top);
        let mut probs = self.disc_head.apply(&top);
        let bins = self.shape.bins;
        for mut row in probs.rows_mut() {
            for group in row
                .as_slice_mut()
                .expect("row-major")
                .chunks_exact_mut(bins)
            {
                let max = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in group.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                group.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Activations {
            layers,
            cont,
            probs,
        }
    }

    /// Softmax probabilities per `(step, dimension)`, each row `bins` long.
    pub fn token_probabilities(&self, obs: &Observation) -> Array2<f64> {
        let act = self.forward_batch(self.feature_matrix([obs]));
        act.probs
            .into_shape_with_order((self.shape.outputs(), self.shape.bins))
            .expect("probability grid")
    }

    /// Both heads for one observation.
    pub fn forward(&self, obs: &Observation) -> DualChunk {
        self.forward_many(std::slice::from_ref(obs))
            .pop()
            .expect("one chunk")
    }

    pub fn forward_many(&self, obs: &[Observation]) -> Vec<DualChunk> {
        let act = self.forward_batch(self.feature_matrix(obs));
        let (k, bins) = (self.shape.chunk_len, self.shape.bins);
        let mut out = Vec::with_capacity(obs.len());
        for (cont_row, prob_row) in act.cont.rows().into_iter().zip(act.probs.rows()) {
            let mut cont = Vec::with_capacity(k);
            let mut disc = Vec::with_capacity(k);
            let mut conf = Vec::with_capacity(k);
            let probs = prob_row.as_slice().expect("row-major");
            for t in 0..k {
                let x: [f64; ACTION_DIM] = std::array::from_fn(|d| cont_row[t * ACTION_DIM + d]);
                cont.push(denormalize(&x, &self.stats));
                let mut tokens = [0u16; ACTION_DIM];
                let mut conf_sum = 0.0;
                for d in 0..ACTION_DIM {
                    let group = &probs[(t * ACTION_DIM + d) * bins..][..bins];
                    let (best, p) =
                        group
                            .iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
                            );
                    tokens[d] = best as u16;
                    conf_sum += p;
                }
                disc.push(
                    self.quantizer
                        .dequantize(&tokens, &self.stats)
                        .expect("argmax within bins"),
                );
                conf.push((conf_sum / ACTION_DIM as f64).clamp(0.0, 1.0));
            }
            let chunk = DualChunk::new(
                ActionChunk::new(cont).expect("non-empty"),
                ActionChunk::new(disc).expect("non-empty"),
                conf,
            )
            .expect("heads share K");
            out.push(chunk);
        }
        out
    }

    fn batch_loss(&self, act: &Activations, targets: &Targets, lambda: f64) -> LossBreakdown {
        let bins = self.shape.bins;
        let n = targets.tokens.len() as f64;
        let probs = act.probs.as_slice().expect("row-major");
        let ce: f64 = targets
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| -probs[i * bins + tok as usize].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        let l1 = (&act.cont - &targets.values).mapv(f64::abs).sum() / n;
        LossBreakdown {
            total: ce + lambda * l1,
            ce,
            l1,
        }
    }

    /// Mean loss over a set of samples against `stats`-normalized targets.
    pub fn loss_many(
        &self,
        samples: &[(Observation, ActionChunk)],
        stats: &NormStats,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        const EVAL_BATCH: usize = 256;
        let mut acc = LossBreakdown::default();
        for batch in samples.chunks(EVAL_BATCH) {
            let act = self.forward_batch(self.feature_matrix(batch.iter().map(|(o, _)| o)));
            let targets = self.targets(batch.iter().map(|(_, c)| c), stats)?;
            let l = self.batch_loss(&act, &targets, lambda);
            let w = batch.len() as f64 / samples.len() as f64;
            acc.total += w * l.total;
            acc.ce += w * l.ce;
            acc.l1 += w * l.l1;
        }
        Ok(acc)
    }

    pub fn loss(
        &self,
        obs: &Observation,
        gt: &ActionChunk,
        stats: &NormStats,
        lambda: f64,
    ) -> Result<LossBreakdown> {
        self.loss_many(&[(obs.clone(), gt.clone())], stats, lambda)
    }

    fn backward(
        &self,
        act: &Activations,
        targets: &Targets,
        ce_weight: f64,
        lambda: f64,
    ) -> Gradients {
        let bins = self.shape.bins;
        let n = targets.tokens.len() as f64;

        let mut d_logits = act.probs.clone();
        {
            let g = d_logits.as_slice_mut().expect("row-major");
            for (i, &tok) in targets.tokens.iter().enumerate() {
                g[i * bins + tok as usize] -= 1.0;
            }
            g.iter_mut().for_each(|v| *v *= ce_weight / n);
        }
        let d_cont = (&act.cont - &targets.values).mapv(|r| lambda * sign(r) / n);

        let top = act.layers.last().expect("trunk output");
        let head_grad = |d: &Array2<f64>| Dense {
            w: d.t().dot(top),
            b: d.sum_axis(Axis(0)),
        };
        let disc_head = head_grad(&d_logits);
        let cont_head = head_grad(&d_cont);

        let mut d_h = d_logits.dot(&self.disc_head.w) + d_cont.dot(&self.cont_head.w);
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for (l, layer) in self.trunk.iter().enumerate().rev() {
            let h = &act.layers[l + 1];
            let d_z = &d_h * &h.mapv(|v| 1.0 - v * v);
            let below = &act.layers[l];
            trunk.push(Dense {
                w: d_z.t().dot(below),
                b: d_z.sum_axis(Axis(0)),
            });
            if l > 0 {
                d_h = d_z.dot(&layer.w);
            }
        }
        trunk.reverse();
        Gradients {
            trunk,
            cont_head,
            disc_head,
        }
    }

    /// Loss and its gradient with respect to every parameter over a batch.
    pub fn loss_and_grad(
        &self,
        samples: &[(Observation, ActionChunk)],
        stats: &NormStats,
        lambda: f64,
    ) -> Result<(LossBreakdown, Gradients)> {
        self.weighted_loss_and_grad(samples, stats, 1.0, lambda)
    }

    fn weighted_loss_and_grad(
        &self,
        samples: &[(Observation, ActionChunk)],
        stats: &NormStats,
        ce_weight: f64,
        lambda: f64,
    ) -> Result<(LossBreakdown, Gradients)> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let act = self.forward_batch(self.feature_matrix(samples.iter().map(|(o, _)| o)));
        let targets = self.targets(samples.iter().map(|(_, c)| c), stats)?;
        let loss = self.batch_loss(&act, &targets, lambda);
        Ok((loss, self.backward(&act, &targets, ce_weight, lambda)))
    }

    pub fn grad(
        &self,
        obs: &Observation,
        gt: &ActionChunk,
        stats: &NormStats,
        lambda: f64,
    ) -> Result<Gradients> {
        Ok(self
            .loss_and_grad(&[(obs.clone(), gt.clone())], stats, lambda)?
            .1)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the L1 term.
    pub lambda: f64,
    /// Weight of the cross-entropy term in the training gradient. 0 trains the
    /// continuous head alone. Reported losses are unaffected.
    pub ce_weight: f64,
    pub learning_rate: f64,
    /// Cosine schedule ends at `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub chunk_len: usize,
    pub bins: usize,
    pub num_instructions: usize,
    /// Record the minibatch loss every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shape = NetShape::default();
        Self {
            lambda: 1.0,
            ce_weight: 1.0,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            batch_size: 64,
            iterations: 9000,
            seed: 0,
            hidden: shape.hidden,
            chunk_len: shape.chunk_len,
            bins: shape.bins,
            num_instructions: shape.num_instructions,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> NetShape {
        NetShape {
            num_instructions: self.num_instructions,
            hidden: self.hidden.clone(),
            chunk_len: self.chunk_len,
            bins: self.bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.ce_weight >= 0.0) {
            return Err(Error::InvalidParam(
                "lambda and ce_weight must be non-negative".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidParam(
                "learning_rate, batch_size and log_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidParam(
                "final_lr_fraction must lie in [0, 1]".into(),
            ));
        }
        self.shape().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of the freshly initialised network on the evaluation subset.
    pub initial: LossBreakdown,
    /// Loss of the returned network on the same subset.
    pub final_loss: LossBreakdown,
    pub curve: Vec<LossRecord>,
}

/// Adam moments for every parameter slice.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &PolicyNet) -> Self {
        let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut PolicyNet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let grad_slices = grads.layers().flat_map(|l| {
            [
                l.w.as_slice().expect("standard layout"),
                l.b.as_slice().expect("standard layout"),
            ]
        });
        for (((p, g), m), v) in net
            .param_slices_mut()
            .into_iter()
            .zip(grad_slices)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Optimiser identifier stored in checkpoints.
pub const OPTIMIZER: &str = "adam(beta1=0.9,beta2=0.999,eps=1e-8),cosine-lr";

const EVAL_SUBSET: usize = 2048;

/// Minibatch Adam on `CE + lambda * L1`; deterministic for a given seed.
pub fn train(
    dataset: &[(Observation, ActionChunk)],
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<(PolicyNet, TrainReport)> {
    train_with_progress(dataset, stats, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &[(Observation, ActionChunk)],
    stats: &NormStats,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<(PolicyNet, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let mut net = PolicyNet::new(cfg.shape(), stats.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let eval: Vec<_> = order
        .iter()
        .take(EVAL_SUBSET)
        .map(|&i| dataset[i].clone())
        .collect();
    let initial = net.loss_many(&eval, stats, cfg.lambda)?;

    let mut adam = Adam::new(&net);
    let mut curve = Vec::new();
    let mut cursor = dataset.len();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for it in 0..cfg.iterations {
        batch.clear();
        while batch.len() < cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = net.weighted_loss_and_grad(&batch, stats, cfg.ce_weight, cfg.lambda)?;
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr =
            cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        adam.update(&mut net, &grads, lr);
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let rec = LossRecord {
                iteration: it,
                total: loss.total,
                ce: loss.ce,
                l1: loss.l1,
            };
            on_log(&rec);
            curve.push(rec);
        }
    }
    let final_loss = net.loss_many(&eval, stats, cfg.lambda)?;
    Ok((
        net,
        TrainReport {
            initial,
            final_loss,
            curve,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    shape: NetShape,
    action_dim: usize,
    layers: Vec<LayerHeader>,
    norm_stats: NormStats,
    optimizer: String,
    train_config: Option<TrainConfig>,
}

/// Everything stored in a checkpoint file besides the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub optimizer: String,
    pub train_config: Option<TrainConfig>,
}

impl PolicyNet {
    fn layer_names(&self) -> Vec<String> {
        (0..self.trunk.len())
            .map(|i| format!("trunk.{i}"))
            .chain(["cont_head".to_string(), "disc_head".to_string()])
            .collect()
    }

    /// Binary checkpoint: magic, version, JSON header length and header,
    /// then every weight and bias as little-endian `f64`.
    pub fn save(&self, path: &Path, train_config: Option<&TrainConfig>) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            shape: self.shape.clone(),
            action_dim: ACTION_DIM,
            layers: self
                .layer_names()
                .into_iter()
                .zip(self.layers())
                .map(|(name, l)| LayerHeader {
                    name,
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                })
                .collect(),
            norm_stats: self.stats.clone(),
            optimizer: OPTIMIZER.into(),
            train_config: train_config.cloned(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for slice in self.param_slices() {
            for v in slice {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bad = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a policy checkpoint".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format != CHECKPOINT_FORMAT || header.action_dim != ACTION_DIM {
            return Err(bad(format!(
                "unsupported checkpoint format {}",
                header.format
            )));
        }
        let mut net = PolicyNet::zeros(header.shape.clone(), header.norm_stats.clone())?;
        let expected: Vec<(usize, usize)> = net.layers().map(|l| l.w.dim()).collect();
        let found: Vec<(usize, usize)> = header.layers.iter().map(|l| (l.rows, l.cols)).collect();
        if expected != found {
            return Err(bad(format!(
                "layer shapes {found:?} do not match {expected:?}"
            )));
        }
        let mut buf = [0u8; 8];
        for slice in net.param_slices_mut() {
            for v in slice.iter_mut() {
                input
                    .read_exact(&mut buf)
                    .map_err(|_| bad("truncated weights".into()))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if input.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes after weights".into()));
        }
        let meta = CheckpointMeta {
            optimizer: header.optimizer,
            train_config: header.train_config,
        };
        Ok((net, meta))
    }
}

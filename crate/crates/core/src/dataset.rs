//! Demonstration storage and synthetic dataset generation.
//!
//! A dataset directory holds three files: `manifest.json`, `norm_stats.json`
//! and `demos.jsonl` with one demonstration per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actionspace::{compute_norm_stats, Action, ActionChunk, NormStats};
use crate::error::{Error, Result};
use crate::policy::Observation;
use crate::sim::{
    expert_rollout, is_success, observe, reset, step_with_noise, ExpertParams, PerturbSpec,
    ScriptedExpert, SimConfig, TaskSpec, WorldState,
};

pub const DATASET_FORMAT: &str = "chunkexec-dataset/v1";
pub const EXPERT_VERSION: &str = "scripted-pick-place/v1";
pub const DEFAULT_NUM_DEMOS: usize = 1200;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORM_STATS_FILE: &str = "norm_stats.json";
pub const DEMOS_FILE: &str = "demos.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMetadata {
    pub seed: u64,
    pub task: TaskSpec,
    pub expert_version: String,
    /// Unrecorded steps before the first frame.
    #[serde(default)]
    pub lead_in: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instruction: String,
    pub instruction_id: usize,
    pub frames: Vec<(Observation, Action)>,
    pub metadata: DemoMetadata,
}

impl Demonstration {
    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.frames.iter().map(|(_, a)| a)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.frames.is_empty() {
            return Err("no frames".into());
        }
        let task = TaskSpec::from_instruction(self.instruction_id).map_err(|e| e.to_string())?;
        if task.instruction() != self.instruction {
            return Err(format!(
                "instruction text does not match template {}",
                self.instruction_id
            ));
        }
        for (t, (obs, a)) in self.frames.iter().enumerate() {
            if !a.is_finite() {
                return Err(format!("non-finite action at frame {t}"));
            }
            if a.grip != 0.0 && a.grip != 1.0 {
                return Err(format!("grip {} at frame {t} is not binary", a.grip));
            }
            if obs.instruction_id != self.instruction_id {
                return Err(format!(
                    "observation at frame {t} carries another instruction"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub count: usize,
    pub per_task_counts: Vec<usize>,
    pub norm_stats: String,
    pub demos: String,
    pub seed: u64,
    pub expert_version: String,
}

/// How tasks are drawn for generated demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    /// Round-robin over all templates, so counts differ by at most one.
    Uniform,
    /// Independent draws with these relative weights per instruction id.
    Weighted(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub num_demos: usize,
    pub task_mix: TaskMix,
    pub seed: u64,
    /// Std of Gaussian noise on executed translations while recording. The
    /// stored labels stay the expert's clean commands, so the data covers
    /// states slightly off the nominal path.
    pub execution_noise: f64,
    /// Share of demonstrations that start from a perturbed mid-task state
    /// instead of a fresh reset.
    pub perturbed_start_fraction: f64,
    pub sim: SimConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            num_demos: DEFAULT_NUM_DEMOS,
            task_mix: TaskMix::Uniform,
            seed: 0,
            execution_noise: 0.0,
            perturbed_start_fraction: 0.0,
            sim: SimConfig {
                log_pwm: false,
                ..SimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stats: NormStats,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn all_actions(&self) -> Vec<Action> {
        self.demos
            .iter()
            .flat_map(|d| d.actions().copied())
            .collect()
    }

    /// Training pairs from every demonstration.
    pub fn training_pairs(&self, chunk_len: usize) -> Result<Vec<(Observation, ActionChunk)>> {
        let mut out = Vec::new();
        for d in &self.demos {
            out.extend(chunkify(d, chunk_len)?);
        }
        Ok(out)
    }
}

/// Unrecorded lead-in for a perturbed start: the expert runs for a random
/// number of ticks, then a short burst of random commands knocks the scene
/// off the nominal path.
fn perturb_start(state: &mut WorldState, task: &TaskSpec, rng: &mut ChaCha8Rng, sim: &SimConfig) {
    let (nominal, _) = expert_rollout(state, task, sim);
    let mut expert = ScriptedExpert::new(ExpertParams::default());
    for _ in 0..rng.random_range(0..nominal.len().max(1)) {
        let a = expert.act(state, task);
        *state = step_with_noise(state, &a, sim, [0.0; 3]);
    }
    for _ in 0..rng.random_range(1..=3) {
        let mut grip = state.grip;
        if rng.random_bool(0.3) {
            grip = 1.0 - grip;
        }
        let a = Action {
            dx: rng.random_range(-0.02..=0.02),
            dy: rng.random_range(-0.02..=0.02),
            dz: rng.random_range(-0.02..=0.02),
            rx: 0.0,
            ry: 0.0,
            rz: rng.random_range(-0.08..=0.08),
            grip,
        };
        *state = step_with_noise(state, &a, sim, [0.0; 3]);
    }
}

/// Records one expert demonstration; `seed` fixes the scene, the optional
/// perturbed start and the execution noise.
pub fn record_demo(
    task: &TaskSpec,
    seed: u64,
    execution_noise: f64,
    perturbed_start: bool,
    sim: &SimConfig,
) -> Result<Demonstration> {
    let mut state = reset(task, &PerturbSpec::None, seed, sim);
    if perturbed_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let fresh = state.clone();
        perturb_start(&mut state, task, &mut rng, sim);
        if is_success(&state, task, sim) {
            state = fresh;
        }
    }
    let lead_in = state.step;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let noise =
        Normal::new(0.0, execution_noise).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut frames = Vec::new();
    while state.step < sim.episode_cap && !is_success(&state, task, sim) {
        let mut expert = ScriptedExpert::resume(ExpertParams::default(), &state, task);
        let a = expert.act(&state, task);
        frames.push((observe(&state, task), a));
        let n = if execution_noise > 0.0 {
            std::array::from_fn(|_| noise.sample(&mut rng))
        } else {
            [0.0; 3]
        };
        state = step_with_noise(&state, &a, sim, n);
    }
    if !is_success(&state, task, sim) {
        return Err(Error::InvalidParam(format!(
            "expert failed task {} with seed {seed}; lower execution noise",
            task.instruction_id
        )));
    }
    Ok(Demonstration {
        instruction: task.instruction(),
        instruction_id: task.instruction_id,
        frames,
        metadata: DemoMetadata {
            seed,
            task: *task,
            expert_version: EXPERT_VERSION.into(),
            lead_in,
        },
    })
}

fn sample_tasks(cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TaskSpec>> {
    let all = TaskSpec::all();
    match &cfg.task_mix {
        TaskMix::Uniform => Ok((0..cfg.num_demos).map(|i| all[i % all.len()]).collect()),
        TaskMix::Weighted(w) => {
            if w.len() != all.len()
                || w.iter().any(|x| !(*x >= 0.0))
                || w.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::InvalidParam(
                    "task weights need 9 non-negative entries".into(),
                ));
            }
            let dist = rand::distr::weighted::WeightedIndex::new(w)
                .map_err(|e| Error::InvalidParam(e.to_string()))?;
            Ok((0..cfg.num_demos).map(|_| all[dist.sample(rng)]).collect())
        }
    }
}

/// Generates demonstrations in memory; parallel over demos, result order
/// fixed by index.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.num_demos == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.sim.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tasks = sample_tasks(cfg, &mut rng)?;
    if !(0.0..=1.0).contains(&cfg.perturbed_start_fraction) {
        return Err(Error::InvalidParam(
            "perturbed_start_fraction must lie in [0, 1]".into(),
        ));
    }
    let seeds: Vec<(u64, bool)> = (0..cfg.num_demos)
        .map(|_| (rng.random(), rng.random_bool(cfg.perturbed_start_fraction)))
        .collect();
    let demos = tasks
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(t, &(s, p))| record_demo(t, s, cfg.execution_noise, p, &cfg.sim))
        .collect::<Result<Vec<_>>>()?;

    let mut per_task_counts = vec![0; TaskSpec::all().len()];
    for d in &demos {
        per_task_counts[d.instruction_id] += 1;
    }
    let actions: Vec<Action> = demos.iter().flat_map(|d| d.actions().copied()).collect();
    let stats = compute_norm_stats(&actions)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        count: demos.len(),
        per_task_counts,
        norm_stats: NORM_STATS_FILE.into(),
        demos: DEMOS_FILE.into(),
        seed: cfg.seed,
        expert_version: EXPERT_VERSION.into(),
    };
    Ok(Dataset {
        manifest,
        stats,
        demos,
    })
}

/// Generates and stores a dataset under `dir`.
pub fn generate_dataset(cfg: &GenerateConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    save(&ds, dir)?;
    Ok(ds)
}

/// One training pair per frame; targets past the end repeat the final action.
pub fn chunkify(demo: &Demonstration, chunk_len: usize) -> Result<Vec<(Observation, ActionChunk)>> {
    if chunk_len == 0 {
        return Err(Error::InvalidParam(
            "chunk length must be at least 1".into(),
        ));
    }
    let actions: Vec<Action> = demo.actions().copied().collect();
    let last = *actions.last().ok_or(Error::NoActions)?;
    demo.frames
        .iter()
        .enumerate()
        .map(|(t, (obs, _))| {
            let chunk = (t..t + chunk_len)
                .map(|i| actions.get(i).copied().unwrap_or(last))
                .collect();
            Ok((obs.clone(), ActionChunk::new(chunk)?))
        })
        .collect()
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ds.stats.save(&dir.join(&ds.manifest.norm_stats))?;
    let mut w = BufWriter::new(File::create(dir.join(&ds.manifest.demos))?);
    for d in &ds.demos {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(format_err(
            &manifest_path,
            format!("unsupported format {:?}", manifest.format),
        ));
    }
    let stats = NormStats::load(&dir.join(&manifest.norm_stats))?;

    let mut demos = Vec::with_capacity(manifest.count);
    let reader = BufReader::new(File::open(dir.join(&manifest.demos))?);
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration =
            serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
                index,
                message: e.to_string(),
            })?;
        demo.validate()
            .map_err(|message| Error::CorruptRecord { index, message })?;
        demos.push(demo);
    }

    if demos.len() != manifest.count {
        return Err(Error::ManifestInconsistent(format!(
            "manifest lists {} demonstrations, found {}",
            manifest.count,
            demos.len()
        )));
    }
    let mut counts = vec![0; manifest.per_task_counts.len().max(TaskSpec::all().len())];
    for d in &demos {
        counts[d.instruction_id] += 1;
    }
    if counts != manifest.per_task_counts {
        return Err(Error::ManifestInconsistent(
            "per-task counts differ from stored records".into(),
        ));
    }
    Ok(Dataset {
        manifest,
        stats,
        demos,
    })
}

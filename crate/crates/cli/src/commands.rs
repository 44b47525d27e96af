use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use chunkexec::dataset::{self, DatasetManifest, GenerateConfig};
use chunkexec::ensemble::{AdaHorizonParams, DualChunk, Ensembler, EnsemblerState};
use chunkexec::kinematics::{
    angles_to_pwm, fk, ik, ik_with_restarts, IkConfig, IkTarget, JointAngles, ServoCalib,
    NUM_JOINTS,
};
use chunkexec::policy::{train_with_progress, Observation, PolicyNet, TrainReport, OPTIMIZER};
use chunkexec::sim::{
    observe, reset, run_episode, EpisodeResult, EpisodeSpec, PerturbSpec, SimConfig, TaskSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::results::{ResultRow, ResultsTable};
use crate::HarnessError;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
pub const EPISODES_LOG: &str = "episodes.log";
pub const CONFIG_ECHO: &str = "config.echo";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub force: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            jobs: 0,
            force: false,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| HarnessError::Runtime(e.into()))
    }
}

fn prepare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(), HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    fs::write(opts.out.join(CONFIG_ECHO), cfg.to_toml()).context("writing config echo")?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_gen_data(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<DatasetManifest, HarnessError> {
    prepare(cfg, opts)?;
    let gen = GenerateConfig {
        num_demos: cfg.dataset.num_demos,
        task_mix: cfg.dataset.task_mix.clone(),
        seed: cfg.seed,
        execution_noise: cfg.dataset.execution_noise,
        perturbed_start_fraction: cfg.dataset.perturbed_start_fraction,
        sim: SimConfig {
            log_pwm: false,
            ..cfg.sim.clone()
        },
    };
    let dir = opts.resolve(&cfg.paths.dataset);
    let ds = opts
        .pool()?
        .install(|| dataset::generate_dataset(&gen, &dir))
        .context("generating dataset")?;
    Ok(ds.manifest)
}

fn load_dataset(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<dataset::Dataset, HarnessError> {
    let dir = opts.resolve(&cfg.paths.dataset);
    Ok(dataset::load(&dir).with_context(|| format!("loading dataset {}", dir.display()))?)
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainReport, HarnessError> {
    prepare(cfg, opts)?;
    let ckpt = opts.resolve(&cfg.paths.checkpoint);
    if ckpt.exists() && !opts.force {
        return Err(HarnessError::Config(format!(
            "checkpoint {} exists; pass --force to overwrite",
            ckpt.display()
        )));
    }
    let ds = load_dataset(cfg, opts)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let pairs = ds
        .training_pairs(tcfg.chunk_len)
        .context("chunking demonstrations")?;

    let loss_path = opts.out.join(LOSS_CSV);
    let mut loss_file = std::io::BufWriter::new(
        fs::File::create(&loss_path)
            .with_context(|| format!("creating {}", loss_path.display()))?,
    );
    writeln!(loss_file, "iteration,total,ce,l1").context("writing loss log")?;
    let mut write_err = None;
    let (net, report) = train_with_progress(&pairs, &ds.stats, &tcfg, |r| {
        if let Err(e) = writeln!(
            loss_file,
            "{},{:.17e},{:.17e},{:.17e}",
            r.iteration, r.total, r.ce, r.l1
        ) {
            write_err.get_or_insert(e);
        }
    })
    .context("training")?;
    if let Some(e) = write_err {
        return Err(HarnessError::Runtime(
            anyhow::Error::new(e).context("writing loss log"),
        ));
    }
    loss_file.flush().context("writing loss log")?;
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).context("creating checkpoint directory")?;
    }
    net.save(&ckpt, Some(&tcfg)).context("saving checkpoint")?;
    Ok(report)
}

fn load_policy(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PolicyNet, HarnessError> {
    let ckpt = opts.resolve(&cfg.paths.checkpoint);
    if !ckpt.exists() {
        return Err(HarnessError::Config(format!(
            "checkpoint {} not found; run train first",
            ckpt.display()
        )));
    }
    let (net, _) = PolicyNet::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(net)
}

/// Seed of episode `index` in every cell; shared across methods and
/// conditions so comparisons are paired.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (0x5EED_0000_0000 + index as u64)
}

/// Task of episode `index`: templates in rotation.
pub fn episode_task(index: usize) -> TaskSpec {
    TaskSpec::from_instruction(index % 9).expect("index reduced modulo the template count")
}

#[derive(Serialize)]
struct LogLine<'a> {
    condition: &'a str,
    #[serde(flatten)]
    episode: &'a EpisodeResult,
}

/// Runs every `(condition, method, episode)` job on the pool and returns
/// results grouped per cell in input order.
fn run_grid(
    net: &PolicyNet,
    conditions: &[String],
    methods: &[Ensembler],
    episodes: usize,
    sim: &SimConfig,
    master_seed: u64,
    opts: &RunOptions,
) -> Result<Vec<Vec<Vec<EpisodeResult>>>, HarnessError> {
    let perturbs: Vec<PerturbSpec> = conditions
        .iter()
        .map(|c| {
            PerturbSpec::from_condition(c)
                .ok_or_else(|| HarnessError::Config(format!("unknown condition {c:?}")))
        })
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..conditions.len())
        .flat_map(|c| (0..methods.len()).flat_map(move |m| (0..episodes).map(move |i| (c, m, i))))
        .collect();
    let results = opts.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(c, m, i)| {
                let spec = EpisodeSpec {
                    task: episode_task(i),
                    perturb: perturbs[c].clone(),
                    seed: episode_seed(master_seed, i),
                };
                run_episode(net, &methods[m], &spec, sim)
            })
            .collect::<chunkexec::Result<Vec<_>>>()
    });
    let mut results = results.context("running episodes")?.into_iter();

    let mut log = std::io::BufWriter::new(
        fs::File::create(opts.out.join(EPISODES_LOG)).context("creating episode log")?,
    );
    let mut grid = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let mut per_method = Vec::with_capacity(methods.len());
        for _ in methods {
            let cell: Vec<EpisodeResult> = results.by_ref().take(episodes).collect();
            for ep in &cell {
                serde_json::to_writer(
                    &mut log,
                    &LogLine {
                        condition: cond,
                        episode: ep,
                    },
                )
                .context("writing episode log")?;
                log.write_all(b"\n").context("writing episode log")?;
            }
            per_method.push(cell);
        }
        grid.push(per_method);
    }
    log.flush().context("writing episode log")?;
    Ok(grid)
}

fn write_table(table: &ResultsTable, title: &str, opts: &RunOptions) -> Result<(), HarnessError> {
    write_file(&opts.out.join(RESULTS_CSV), &table.to_csv())?;
    write_file(&opts.out.join(RESULTS_MD), &table.to_markdown(title))
}

/// Success-rate grid over perturbation conditions and ensemblers.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultsTable, HarnessError> {
    prepare(cfg, opts)?;
    let net = load_policy(cfg, opts)?;
    let methods: Vec<Ensembler> = cfg
        .eval
        .methods
        .iter()
        .map(|m| cfg.ensemble.ensembler(m))
        .collect::<Result<_, _>>()?;
    let grid = run_grid(
        &net,
        &cfg.eval.conditions,
        &methods,
        cfg.eval.episodes,
        &cfg.sim,
        cfg.seed,
        opts,
    )?;
    let mut table = ResultsTable::default();
    for (cond, per_method) in cfg.eval.conditions.iter().zip(&grid) {
        for (m, cell) in methods.iter().zip(per_method) {
            table.rows.push(ResultRow::aggregate(
                cond,
                m.name(),
                cell,
                cfg.eval.forward_ms,
            ));
        }
    }
    write_table(&table, "Success rate by condition", opts)?;
    Ok(table)
}

/// Label of the aggregated row in the ensembler comparison.
pub const BENCH_SUITE: &str = "noisy_suite";

/// Six-way ensembler comparison over the noisy suite; one row per method.
pub fn cmd_bench_ensemblers(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<ResultsTable, HarnessError> {
    prepare(cfg, opts)?;
    let net = load_policy(cfg, opts)?;
    let methods = cfg.ensemble.suite();
    let sim = SimConfig {
        action_noise: cfg.bench.action_noise,
        ..cfg.sim.clone()
    };
    let grid = run_grid(
        &net,
        &cfg.bench.conditions,
        &methods,
        cfg.bench.episodes,
        &sim,
        cfg.seed,
        opts,
    )?;
    let mut table = ResultsTable::default();
    for (mi, m) in methods.iter().enumerate() {
        let all: Vec<EpisodeResult> = grid
            .iter()
            .flat_map(|per_method| per_method[mi].iter().cloned())
            .collect();
        table.rows.push(ResultRow::aggregate(
            BENCH_SUITE,
            m.name(),
            &all,
            cfg.eval.forward_ms,
        ));
    }
    write_table(&table, "Comparison of action ensemblers", opts)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub samples: usize,
    pub median_ms: f64,
    pub p99_ms: f64,
}

impl TimingStats {
    fn from_ns(mut ns: Vec<u64>) -> Self {
        ns.sort_unstable();
        let pick = |q: f64| ns[((ns.len() - 1) as f64 * q).round() as usize] as f64 * 1e-6;
        Self {
            samples: ns.len(),
            median_ms: pick(0.5),
            p99_ms: pick(0.99),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodLatency {
    pub method: String,
    pub timing: TimingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub chunk_len: usize,
    pub forward: TimingStats,
    pub ensemblers: Vec<MethodLatency>,
    /// Adaptive ensembler forced to its shortest horizon.
    pub min_horizon: usize,
    pub min_horizon_actions_per_s: f64,
    /// Adaptive ensembler forced to the whole chunk.
    pub max_horizon: usize,
    pub max_horizon_actions_per_s: f64,
    pub span_ratio: f64,
}

impl LatencyReport {
    pub fn adahorizon(&self) -> &TimingStats {
        &self
            .ensemblers
            .iter()
            .find(|m| m.method == "adahorizon")
            .expect("always measured")
            .timing
    }

    fn to_markdown(&self) -> String {
        let mut out = String::from(
            "# Latency\n\n| Stage | Samples | Median (ms) | p99 (ms) |\n|---|---:|---:|---:|\n",
        );
        let mut row = |name: &str, t: &TimingStats| {
            out.push_str(&format!(
                "| {name} | {} | {:.4} | {:.4} |\n",
                t.samples, t.median_ms, t.p99_ms
            ));
        };
        row("policy forward", &self.forward);
        for m in &self.ensemblers {
            row(&m.method, &m.timing);
        }
        out.push_str(&format!(
            "\nEffective rate: {:.1} actions/s at horizon {}, {:.1} actions/s at horizon {} (x{:.3}).\n",
            self.min_horizon_actions_per_s, self.min_horizon, self.max_horizon_actions_per_s, self.max_horizon, self.span_ratio
        ));
        out
    }
}

fn sample_observations(count: usize, seed: u64, sim: &SimConfig) -> Vec<Observation> {
    (0..count)
        .map(|i| {
            let task = episode_task(i);
            observe(
                &reset(&task, &PerturbSpec::None, episode_seed(seed, i), sim),
                &task,
            )
        })
        .collect()
}

fn time_ensembler(
    e: &Ensembler,
    chunks: &[DualChunk],
    net: &PolicyNet,
    warmup: usize,
    iterations: usize,
) -> Result<TimingStats, HarnessError> {
    let mut ns = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let chunk = &chunks[i % chunks.len()];
        let mut state = EnsemblerState::new();
        let t0 = Instant::now();
        let sel = e
            .select(chunk, &mut state, net.stats())
            .context("ensembler")?;
        let dt = t0.elapsed().as_nanos() as u64;
        std::hint::black_box(sel);
        if i >= warmup {
            ns.push(dt);
        }
    }
    Ok(TimingStats::from_ns(ns))
}

/// Forward-pass and per-chunk ensembler timings; monotonic clock, warm-up
/// discarded, median and p99 reported.
pub fn cmd_bench_latency(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<LatencyReport, HarnessError> {
    prepare(cfg, opts)?;
    let net = load_policy(cfg, opts)?;
    let k = net.shape().chunk_len;
    if cfg.latency.chunk_len != k {
        return Err(HarnessError::Config(format!(
            "latency.chunk_len {} does not match the checkpoint's chunk length {k}",
            cfg.latency.chunk_len
        )));
    }
    let lat = &cfg.latency;
    let obs = sample_observations(64, cfg.seed, &cfg.sim);

    let mut ns = Vec::with_capacity(lat.forward_iterations);
    for i in 0..lat.warmup + lat.forward_iterations {
        let t0 = Instant::now();
        let chunk = net.forward(&obs[i % obs.len()]);
        let dt = t0.elapsed().as_nanos() as u64;
        std::hint::black_box(chunk);
        if i >= lat.warmup {
            ns.push(dt);
        }
    }
    let forward = TimingStats::from_ns(ns);
    let chunks = net.forward_many(&obs);

    let mut ensemblers = Vec::new();
    for e in cfg.ensemble.suite() {
        let timing = time_ensembler(&e, &chunks, &net, lat.warmup, lat.iterations)?;
        ensemblers.push(MethodLatency {
            method: e.name().into(),
            timing,
        });
    }

    let base = &cfg.ensemble.adahorizon;
    let always_min = AdaHorizonParams {
        threshold: f64::MIN_POSITIVE,
        replan_threshold: f64::INFINITY,
        ..base.clone()
    };
    let always_max = AdaHorizonParams {
        threshold: f64::INFINITY,
        ..base.clone()
    };
    let t_min = time_ensembler(
        &Ensembler::AdaHorizon(always_min.clone()),
        &chunks,
        &net,
        lat.warmup,
        lat.iterations,
    )?;
    let t_max = time_ensembler(
        &Ensembler::AdaHorizon(always_max),
        &chunks,
        &net,
        lat.warmup,
        lat.iterations,
    )?;
    let rate = |h: usize, t: &TimingStats| h as f64 / ((forward.median_ms + t.median_ms) * 1e-3);
    let min_rate = rate(always_min.min_actions, &t_min);
    let max_rate = rate(k, &t_max);

    let report = LatencyReport {
        chunk_len: k,
        forward,
        ensemblers,
        min_horizon: always_min.min_actions,
        min_horizon_actions_per_s: min_rate,
        max_horizon: k,
        max_horizon_actions_per_s: max_rate,
        span_ratio: max_rate / min_rate,
    };
    write_file(
        &opts.out.join("latency.json"),
        &(serde_json::to_string_pretty(&report).context("serializing")? + "\n"),
    )?;
    write_file(&opts.out.join("latency.md"), &report.to_markdown())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IkReport {
    pub targets: usize,
    pub converged: usize,
    pub worst_position_error_mm: f64,
    pub mean_position_error_mm: f64,
    pub wrist_reach_mm: f64,
    pub tip_reach_mm: f64,
    /// Ticks at 0, pi/2 and pi with zero servo offsets.
    pub pwm_ticks: [u16; 3],
    pub unreachable_probe_mm: [f64; 3],
    pub unreachable_probe: String,
}

/// FK/IK round trips on random reachable targets plus reach and PWM checks.
pub fn cmd_ik_check(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<IkReport, HarnessError> {
    prepare(cfg, opts)?;
    let chain = &cfg.kinematics.chain;
    let ikc = IkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let qs: Vec<JointAngles> = (0..cfg.kinematics.targets)
        .map(|_| {
            JointAngles(std::array::from_fn(|j| {
                let [lo, hi] = chain.joints[j].limits;
                rng.random_range(lo..=hi)
            }))
        })
        .collect();
    let home = JointAngles([0.0, 0.5, 1.0, 0.0, 0.8, 0.0]);
    let errors = opts.pool()?.install(|| {
        qs.par_iter()
            .enumerate()
            .map(|(i, q)| {
                let target = fk(chain, q).position_mm;
                let sol = ik_with_restarts(
                    chain,
                    &IkTarget::Position(target),
                    &home,
                    &ikc,
                    cfg.kinematics.restarts,
                    cfg.seed ^ i as u64,
                )?;
                Ok((
                    (fk(chain, &sol.q).position_mm - target).norm(),
                    sol.converged,
                ))
            })
            .collect::<chunkexec::Result<Vec<_>>>()
    });
    let errors = errors.context("ik round trips")?;

    let zero = JointAngles([0.0; NUM_JOINTS]);
    let calib = ServoCalib::default();
    let ticks = |a: f64| angles_to_pwm(&JointAngles([a; NUM_JOINTS]), &calib)[0];
    let probe = nalgebra::Vector3::from(cfg.kinematics.unreachable_probe_mm);
    let unreachable_probe = match ik(chain, &IkTarget::Position(probe), &home, &ikc) {
        Err(e) => e.to_string(),
        Ok(sol) if !sol.converged => {
            format!("not converged, {:.1} mm residual", sol.position_error_mm)
        }
        Ok(sol) => format!("reached, {:.3} mm residual", sol.position_error_mm),
    };
    let report = IkReport {
        targets: errors.len(),
        converged: errors.iter().filter(|e| e.1).count(),
        worst_position_error_mm: errors.iter().map(|e| e.0).fold(0.0, f64::max),
        mean_position_error_mm: errors.iter().map(|e| e.0).sum::<f64>() / errors.len() as f64,
        wrist_reach_mm: chain.wrist_position(&zero).norm(),
        tip_reach_mm: fk(chain, &zero).position_mm.norm(),
        pwm_ticks: [
            ticks(0.0),
            ticks(std::f64::consts::FRAC_PI_2),
            ticks(std::f64::consts::PI),
        ],
        unreachable_probe_mm: cfg.kinematics.unreachable_probe_mm,
        unreachable_probe,
    };
    let json = serde_json::to_string_pretty(&report).context("serializing")? + "\n";
    write_file(&opts.out.join("ik_report.json"), &json)?;
    Ok(report)
}

/// Checkpoint optimizer string, surfaced by `train` output.
pub fn optimizer_name() -> &'static str {
    OPTIMIZER
}

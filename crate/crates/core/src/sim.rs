//! Kinematic tabletop pick-and-place world.
//!
//! The arm base sits at the origin on the back edge of a 0.5 m x 1.0 m board,
//! x forward, z up, metres throughout. There is no contact physics: grasping
//! is radius based, a held object follows the gripper and a released object
//! stays where it was let go.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actionspace::{Action, ActionChunk, NormStats, GRIP_THRESHOLD};
use crate::ensemble::{DualChunk, Ensembler, EnsemblerState};
use crate::error::{Error, Result};
use crate::kinematics::{
    angles_to_pwm, ik, IkConfig, IkTarget, JointAngles, KinematicChain, MAX_EE_SPEED_MPS,
    NUM_JOINTS,
};
use crate::policy::{Observation, PolicyNet};

/// Axis-aligned workspace box for the gripper tip.
pub const WORKSPACE_MIN: [f64; 3] = [0.05, -0.32, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [0.35, 0.32, 0.20];
/// Tip positions are also kept inside this sphere around the base.
pub const WORKSPACE_RADIUS: f64 = 0.44;

/// Training spawn region for the task object, `[min, max]` in x and y.
pub const SPAWN_X: [f64; 2] = [0.16, 0.22];
pub const SPAWN_Y: [f64; 2] = [-0.05, 0.05];
const HOME: [f64; 3] = [0.20, 0.0, 0.15];
const HOME_JITTER: f64 = 0.02;
const HOME_YAW_JITTER: f64 = 0.1;
const DISTRACTOR_X: [f64; 2] = [0.12, 0.27];
const DISTRACTOR_Y: [f64; 2] = [-0.10, 0.10];
const DISTRACTOR_SEPARATION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Block,
    Ball,
    Rock,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Block, ObjectClass::Ball, ObjectClass::Rock];

    /// Height of the object's grasp point when resting on the board.
    pub fn rest_height(self) -> f64 {
        match self {
            ObjectClass::Block => 0.020,
            ObjectClass::Ball => 0.025,
            ObjectClass::Rock => 0.015,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Block => "block",
            ObjectClass::Ball => "ball",
            ObjectClass::Rock => "rock",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Away,
    Left,
    Right,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Away, Placement::Left, Placement::Right];

    /// Goal position on the board (x, y).
    pub fn goal_xy(self) -> [f64; 2] {
        match self {
            Placement::Away => [0.29, 0.0],
            Placement::Left => [0.18, 0.15],
            Placement::Right => [0.18, -0.15],
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Placement::Away => "away from the robot",
            Placement::Left => "to the left",
            Placement::Right => "to the right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub instruction_id: usize,
    pub object_id: usize,
    pub placement: Placement,
    pub object_class: ObjectClass,
}

impl TaskSpec {
    pub fn new(object_class: ObjectClass, placement: Placement) -> Self {
        let c = ObjectClass::ALL
            .iter()
            .position(|&x| x == object_class)
            .expect("known class");
        let p = Placement::ALL
            .iter()
            .position(|&x| x == placement)
            .expect("known placement");
        Self {
            instruction_id: c * Placement::ALL.len() + p,
            object_id: 0,
            placement,
            object_class,
        }
    }

    pub fn from_instruction(id: usize) -> Result<Self> {
        if id >= ObjectClass::ALL.len() * Placement::ALL.len() {
            return Err(Error::InvalidParam(format!(
                "instruction id {id} out of range"
            )));
        }
        Ok(Self::new(ObjectClass::ALL[id / 3], Placement::ALL[id % 3]))
    }

    /// The nine trained templates in instruction-id order.
    pub fn all() -> Vec<TaskSpec> {
        (0..9)
            .map(|i| Self::from_instruction(i).expect("in range"))
            .collect()
    }

    pub fn instruction(&self) -> String {
        format!(
            "pick up the {} and place it {}",
            self.object_class.name(),
            self.placement.phrase()
        )
    }
}

/// Evaluation condition applied at reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbSpec {
    None,
    /// Extra graspable objects scattered around the task object.
    StaticDistractors {
        count: usize,
    },
    /// One object sliding back and forth across the spawn region.
    DynamicDistractor {
        amplitude: f64,
        period_steps: u32,
    },
    /// The task goal moved to a placement never demonstrated.
    OodTask {
        goal_xy: [f64; 2],
    },
    /// Spawn region and goals translated together.
    OodEnv {
        shift: [f64; 3],
    },
}

impl PerturbSpec {
    pub fn static_distractors() -> Self {
        PerturbSpec::StaticDistractors { count: 3 }
    }

    pub fn dynamic_distractor() -> Self {
        PerturbSpec::DynamicDistractor {
            amplitude: 0.08,
            period_steps: 40,
        }
    }

    pub fn ood_task() -> Self {
        PerturbSpec::OodTask {
            goal_xy: [0.27, 0.11],
        }
    }

    pub fn ood_env() -> Self {
        PerturbSpec::OodEnv {
            shift: [-0.06, 0.1375, 0.0],
        }
    }

    /// Default parameters for a condition name as used in configs and tables.
    pub fn from_condition(name: &str) -> Option<Self> {
        Some(match name {
            "original" | "none" => PerturbSpec::None,
            "static_distractors" => Self::static_distractors(),
            "dynamic_distractor" => Self::dynamic_distractor(),
            "ood_task" => Self::ood_task(),
            "ood_env" => Self::ood_env(),
            _ => return None,
        })
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            PerturbSpec::None => "none",
            PerturbSpec::StaticDistractors { .. } => "static_distractors",
            PerturbSpec::DynamicDistractor { .. } => "dynamic_distractor",
            PerturbSpec::OodTask { .. } => "ood_task",
            PerturbSpec::OodEnv { .. } => "ood_env",
        }
    }

    fn spawn_shift(&self) -> [f64; 3] {
        match self {
            PerturbSpec::OodEnv { shift } => *shift,
            _ => [0.0; 3],
        }
    }

    /// Task-object spawn region `(x range, y range)` under this condition.
    pub fn spawn_region(&self) -> ([f64; 2], [f64; 2]) {
        let s = self.spawn_shift();
        (
            [SPAWN_X[0] + s[0], SPAWN_X[1] + s[0]],
            [SPAWN_Y[0] + s[1], SPAWN_Y[1] + s[1]],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Control period in seconds.
    pub dt: f64,
    pub episode_cap: u32,
    pub grasp_radius: f64,
    pub goal_radius: f64,
    /// Standard deviation of Gaussian noise added to every executed
    /// translation, metres per axis.
    pub action_noise: f64,
    /// Solve IK every tick and log 12-bit servo commands.
    pub log_pwm: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_cap: 200,
            grasp_radius: 0.02,
            goal_radius: 0.02,
            action_noise: 0.0,
            log_pwm: true,
        }
    }
}

impl SimConfig {
    /// Largest translation executed in one tick.
    pub fn max_step(&self) -> f64 {
        MAX_EE_SPEED_MPS * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.episode_cap == 0 {
            return Err(Error::InvalidParam(
                "dt and episode_cap must be positive".into(),
            ));
        }
        if !(self.grasp_radius > 0.0 && self.goal_radius > 0.0 && self.action_noise >= 0.0) {
            return Err(Error::InvalidParam(
                "radii must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Back-and-forth straight-line motion of a dynamic distractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPath {
    pub center: [f64; 3],
    pub direction: [f64; 3],
    pub amplitude: f64,
    pub period_steps: u32,
    pub phase: f64,
}

impl ObjectPath {
    pub fn position(&self, step: u32) -> [f64; 3] {
        let angle =
            self.phase + 2.0 * std::f64::consts::PI * step as f64 / self.period_steps as f64;
        let offset = self.amplitude * angle.sin();
        std::array::from_fn(|i| self.center[i] + offset * self.direction[i])
    }

    /// Upper bound on the distance covered in one tick.
    pub fn max_step(&self) -> f64 {
        self.amplitude * 2.0 * std::f64::consts::PI / self.period_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: usize,
    pub class: ObjectClass,
    pub pos: [f64; 3],
    pub held: bool,
    pub path: Option<ObjectPath>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ee_pos: [f64; 3],
    pub ee_euler: [f64; 3],
    pub grip: f64,
    pub objects: Vec<SimObject>,
    /// Goal region per instruction id.
    pub goals: Vec<GoalRegion>,
    pub step: u32,
}

impl WorldState {
    pub fn held_object(&self) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.held)
    }

    pub fn goal_for(&self, task: &TaskSpec) -> GoalRegion {
        self.goals[task.instruction_id]
    }

    pub fn task_object(&self, task: &TaskSpec) -> &SimObject {
        &self.objects[task.object_id]
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (Vector3::from(*a) - Vector3::from(*b)).norm()
}

/// Clamps a tip position into the workspace box and reach sphere.
pub fn clamp_to_workspace(p: [f64; 3]) -> [f64; 3] {
    let mut v = Vector3::from(std::array::from_fn(|i| {
        p[i].clamp(WORKSPACE_MIN[i], WORKSPACE_MAX[i])
    }));
    let n = v.norm();
    if n > WORKSPACE_RADIUS {
        v *= WORKSPACE_RADIUS / n;
    }
    v.into()
}

/// Initial world for `task` under `perturb`; fully determined by `seed`.
pub fn reset(task: &TaskSpec, perturb: &PerturbSpec, seed: u64, cfg: &SimConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = perturb.spawn_shift();
    let (sx, sy) = perturb.spawn_region();

    let goals = TaskSpec::all()
        .iter()
        .map(|t| {
            let [x, y] = t.placement.goal_xy();
            GoalRegion {
                center: [
                    x + shift[0],
                    y + shift[1],
                    t.object_class.rest_height() + shift[2],
                ],
                radius: cfg.goal_radius,
            }
        })
        .collect::<Vec<_>>();
    let mut goals = goals;
    if let PerturbSpec::OodTask { goal_xy } = perturb {
        goals[task.instruction_id].center[0] = goal_xy[0];
        goals[task.instruction_id].center[1] = goal_xy[1];
    }

    let mut jitter = |r: f64| rng.random_range(-r..=r);
    let ee_pos = [
        HOME[0] + jitter(HOME_JITTER),
        HOME[1] + jitter(HOME_JITTER),
        HOME[2] + jitter(HOME_JITTER),
    ];
    let ee_euler = [0.0, 0.0, jitter(HOME_YAW_JITTER)];

    let task_pos = [
        rng.random_range(sx[0]..=sx[1]),
        rng.random_range(sy[0]..=sy[1]),
        task.object_class.rest_height() + shift[2],
    ];
    let mut objects = vec![SimObject {
        id: 0,
        class: task.object_class,
        pos: task_pos,
        held: false,
        path: None,
    }];

    match perturb {
        PerturbSpec::StaticDistractors { count } => {
            let mut attempts = 0;
            while objects.len() < 1 + count && attempts < 10_000 {
                attempts += 1;
                let class = ObjectClass::ALL[rng.random_range(0..3)];
                let pos = [
                    rng.random_range(DISTRACTOR_X[0]..=DISTRACTOR_X[1]),
                    rng.random_range(DISTRACTOR_Y[0]..=DISTRACTOR_Y[1]),
                    class.rest_height(),
                ];
                if objects
                    .iter()
                    .all(|o| dist(&o.pos, &pos) >= DISTRACTOR_SEPARATION)
                {
                    objects.push(SimObject {
                        id: objects.len(),
                        class,
                        pos,
                        held: false,
                        path: None,
                    });
                }
            }
        }
        PerturbSpec::DynamicDistractor {
            amplitude,
            period_steps,
        } => {
            let class = ObjectClass::Block;
            let path = ObjectPath {
                center: [
                    (sx[0] + sx[1]) / 2.0 + 0.03,
                    (sy[0] + sy[1]) / 2.0,
                    class.rest_height(),
                ],
                direction: [0.0, 1.0, 0.0],
                amplitude: *amplitude,
                period_steps: (*period_steps).max(1),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            objects.push(SimObject {
                id: 1,
                class,
                pos: path.position(0),
                held: false,
                path: Some(path),
            });
        }
        _ => {}
    }

    WorldState {
        ee_pos,
        ee_euler,
        grip: 0.0,
        objects,
        goals,
        step: 0,
    }
}

/// Advances the world by one tick under action `a`.
pub fn step(state: &WorldState, a: &Action, cfg: &SimConfig) -> WorldState {
    step_with_noise(state, a, cfg, [0.0; 3])
}

/// [`step`] with an additive disturbance on the commanded translation.
pub fn step_with_noise(
    state: &WorldState,
    a: &Action,
    cfg: &SimConfig,
    noise: [f64; 3],
) -> WorldState {
    let mut next = state.clone();
    let mut delta = Vector3::from(a.translation()) + Vector3::from(noise);
    let n = delta.norm();
    if n > cfg.max_step() {
        delta *= cfg.max_step() / n;
    }
    next.ee_pos = clamp_to_workspace((Vector3::from(state.ee_pos) + delta).into());
    for (e, r) in next.ee_euler.iter_mut().zip(a.rotation()) {
        *e += r;
    }

    let grip = if a.grip_closed() { 1.0 } else { 0.0 };
    if state.grip < 0.5 && grip > 0.5 && next.held_object().is_none() {
        let ee = next.ee_pos;
        let nearest = next
            .objects
            .iter_mut()
            .map(|o| (dist(&o.pos, &ee), o))
            .filter(|(d, _)| *d <= cfg.grasp_radius)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, obj)) = nearest {
            obj.held = true;
        }
    } else if state.grip > 0.5 && grip < 0.5 {
        for o in next.objects.iter_mut() {
            o.held = false;
        }
    }
    next.grip = grip;
    next.step += 1;

    for o in next.objects.iter_mut() {
        if o.held {
            o.pos = next.ee_pos;
            o.path = None;
        } else if let Some(path) = &o.path {
            o.pos = path.position(next.step);
        }
    }
    next
}

/// Task object released inside its goal region within the episode cap.
pub fn is_success(state: &WorldState, task: &TaskSpec, cfg: &SimConfig) -> bool {
    let obj = state.task_object(task);
    let goal = state.goal_for(task);
    !obj.held && dist(&obj.pos, &goal.center) <= goal.radius && state.step <= cfg.episode_cap
}

pub fn observe(state: &WorldState, task: &TaskSpec) -> Observation {
    Observation {
        ee_pos: state.ee_pos,
        ee_euler: state.ee_euler,
        grip_state: state.grip,
        object_pos: state.task_object(task).pos,
        goal_pos: state.goal_for(task).center,
        instruction_id: task.instruction_id,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPhase {
    ApproachAbove,
    Descend,
    CloseGrip,
    Transport,
    OpenGrip,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertParams {
    /// Per-axis translation limit per tick (m).
    pub step: f64,
    /// Yaw change limit per tick (rad).
    pub yaw_step: f64,
    /// Travel height for approach and transport (m).
    pub hover_height: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self {
            step: 0.02,
            yaw_step: 0.08,
            hover_height: 0.10,
        }
    }
}

/// Five-phase pick-and-place controller built from straight-line primitives.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    params: ExpertParams,
    phase: ExpertPhase,
}

// Slack for reaching a waypoint and for counting as lined up for descent; noisy
// execution never lands exactly.
const ARRIVAL_TOL: f64 = 0.006;
const ARRIVAL_TOL_YAW: f64 = 0.03;
const ALIGN_TOL: f64 = 0.012;
// Moves are whole multiples of 1/MOVE_LEVELS of the per-tick limit, so each
// action dimension takes one of 2 * MOVE_LEVELS + 1 values.
const MOVE_LEVELS: f64 = 4.0;
// Allowed height over a target per metre of horizontal offset.
const FUNNEL_SLOPE: f64 = 1.0;

impl ScriptedExpert {
    pub fn new(params: ExpertParams) -> Self {
        Self {
            params,
            phase: ExpertPhase::ApproachAbove,
        }
    }

    /// Expert picking up from an arbitrary world, with the phase read off
    /// the state. Acting from here matches an expert that ran from reset.
    pub fn resume(params: ExpertParams, state: &WorldState, task: &TaskSpec) -> Self {
        let obj = state.task_object(task);
        let goal = state.goal_for(task);
        let phase = if obj.held {
            ExpertPhase::Transport
        } else if dist(&obj.pos, &goal.center) <= goal.radius {
            ExpertPhase::Done
        } else {
            ExpertPhase::ApproachAbove
        };
        Self { params, phase }
    }

    pub fn phase(&self) -> ExpertPhase {
        self.phase
    }

    /// Per-axis clamped move towards `target` plus yaw alignment, snapped to
    /// the move grid; `None` once already there.
    fn move_towards(
        &self,
        state: &WorldState,
        target: [f64; 3],
        yaw: f64,
        grip: f64,
    ) -> Option<Action> {
        let s = self.params.step;
        let d: [f64; 3] = std::array::from_fn(|i| (target[i] - state.ee_pos[i]).clamp(-s, s));
        let dyaw = (yaw - state.ee_euler[2]).clamp(-self.params.yaw_step, self.params.yaw_step);
        let arrived = d.iter().all(|v| v.abs() <= ARRIVAL_TOL) && dyaw.abs() <= ARRIVAL_TOL_YAW;
        let snap = |v: f64, limit: f64| {
            let g = limit / MOVE_LEVELS;
            (v / g).round() * g
        };
        (!arrived).then(|| Action {
            dx: snap(d[0], s),
            dy: snap(d[1], s),
            dz: snap(d[2], s),
            rx: 0.0,
            ry: 0.0,
            rz: snap(dyaw, self.params.yaw_step),
            grip,
        })
    }

    /// Waypoint over `target` whose height above it shrinks with the
    /// horizontal distance, capped at hover height. Returns it with that
    /// distance.
    fn funnel(&self, state: &WorldState, target: [f64; 3]) -> ([f64; 3], f64) {
        let xy = (target[0] - state.ee_pos[0]).hypot(target[1] - state.ee_pos[1]);
        let rise = (FUNNEL_SLOPE * xy).min((self.params.hover_height - target[2]).max(0.0));
        ([target[0], target[1], target[2] + rise], xy)
    }

    pub fn act(&mut self, state: &WorldState, task: &TaskSpec) -> Action {
        let obj = state.task_object(task).pos;
        let goal = state.goal_for(task).center;
        loop {
            match self.phase {
                ExpertPhase::ApproachAbove | ExpertPhase::Descend => {
                    let yaw = obj[1].atan2(obj[0]);
                    let (target, xy) = self.funnel(state, obj);
                    if xy <= ALIGN_TOL {
                        self.phase = ExpertPhase::Descend;
                    }
                    match self.move_towards(state, target, yaw, 0.0) {
                        Some(a) => return a,
                        // a grasp needs an open-to-closed transition
                        None if state.grip >= GRIP_THRESHOLD => return Action::zero(),
                        None => self.phase = ExpertPhase::CloseGrip,
                    }
                }
                ExpertPhase::CloseGrip => {
                    self.phase = ExpertPhase::Transport;
                    return Action {
                        grip: 1.0,
                        ..Action::zero()
                    };
                }
                ExpertPhase::Transport => {
                    let yaw = goal[1].atan2(goal[0]);
                    let (target, _) = self.funnel(state, goal);
                    match self.move_towards(state, target, yaw, 1.0) {
                        Some(a) => return a,
                        None => self.phase = ExpertPhase::OpenGrip,
                    }
                }
                ExpertPhase::OpenGrip => {
                    self.phase = ExpertPhase::Done;
                    return Action::zero();
                }
                ExpertPhase::Done => return Action::zero(),
            }
        }
    }
}

/// Noise-free expert rollout from `state`; stops on success or at the cap.
pub fn expert_rollout(
    state: &WorldState,
    task: &TaskSpec,
    cfg: &SimConfig,
) -> (Vec<(Observation, Action)>, WorldState) {
    let mut expert = ScriptedExpert::new(ExpertParams::default());
    let mut s = state.clone();
    let mut frames = Vec::new();
    while s.step < cfg.episode_cap && !is_success(&s, task, cfg) {
        let a = expert.act(&s, task);
        frames.push((observe(&s, task), a));
        s = step(&s, &a, cfg);
    }
    (frames, s)
}

/// Source of dual-head chunks for the episode runner.
pub trait ChunkPolicy: Sync {
    fn predict(&self, obs: &Observation) -> DualChunk;
    fn norm_stats(&self) -> &NormStats;
}

impl ChunkPolicy for PolicyNet {
    fn predict(&self, obs: &Observation) -> DualChunk {
        self.forward(obs)
    }

    fn norm_stats(&self) -> &NormStats {
        self.stats()
    }
}

/// Plans each chunk by running the scripted expert ahead on a copy of the
/// world; both heads carry the same actions.
pub struct ExpertPolicy {
    pub chunk_len: usize,
    pub cfg: SimConfig,
    stats: NormStats,
    world: std::sync::Mutex<Option<(WorldState, TaskSpec)>>,
}

impl ExpertPolicy {
    pub fn new(chunk_len: usize, cfg: SimConfig, stats: NormStats) -> Self {
        Self {
            chunk_len,
            cfg,
            stats,
            world: std::sync::Mutex::new(None),
        }
    }

    /// World the next prediction plans from; set by the runner each tick.
    pub fn set_world(&self, state: &WorldState, task: &TaskSpec) {
        *self.world.lock().expect("unpoisoned") = Some((state.clone(), *task));
    }
}

impl ChunkPolicy for ExpertPolicy {
    fn predict(&self, _obs: &Observation) -> DualChunk {
        let guard = self.world.lock().expect("unpoisoned");
        let (state, task) = guard.as_ref().expect("world set before predict");
        let mut expert = ScriptedExpert::resume(ExpertParams::default(), state, task);
        let mut s = state.clone();
        let mut actions = Vec::with_capacity(self.chunk_len);
        for _ in 0..self.chunk_len {
            let a = expert.act(&s, task);
            s = step(&s, &a, &self.cfg);
            actions.push(a);
        }
        DualChunk::agreeing(ActionChunk::new(actions).expect("chunk_len >= 1"))
    }

    fn norm_stats(&self) -> &NormStats {
        &self.stats
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub task: TaskSpec,
    pub perturb: PerturbSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkLog {
    pub horizon: usize,
    pub mean_mad: f64,
    pub mad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub instruction_id: usize,
    pub task: String,
    pub perturb: String,
    pub ensembler: String,
    pub success: bool,
    pub steps: u32,
    pub chunks: Vec<ChunkLog>,
    /// Wall-clock policy time per inference, nanoseconds.
    pub inference_ns: Vec<u64>,
    /// Wall-clock ensembler time per inference, nanoseconds.
    pub ensemble_ns: Vec<u64>,
    /// Servo ticks per executed tick.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pwm: Vec<[u16; NUM_JOINTS]>,
}

impl EpisodeResult {
    pub fn inferences(&self) -> usize {
        self.chunks.len()
    }

    pub fn mean_horizon(&self) -> f64 {
        if self.chunks.is_empty() {
            return 0.0;
        }
        self.chunks.iter().map(|c| c.horizon as f64).sum::<f64>() / self.chunks.len() as f64
    }

    /// Same episode with wall-clock fields cleared, for determinism checks.
    pub fn without_timings(&self) -> Self {
        Self {
            inference_ns: Vec::new(),
            ensemble_ns: Vec::new(),
            ..self.clone()
        }
    }
}

/// Tracks joint angles through IK to emit servo commands for each tick.
struct PwmLogger {
    chain: KinematicChain,
    cfg: IkConfig,
    q: JointAngles,
}

impl PwmLogger {
    fn new() -> Self {
        Self {
            chain: KinematicChain::default(),
            cfg: IkConfig {
                max_iterations: 50,
                position_tolerance_mm: 0.5,
                ..IkConfig::default()
            },
            q: JointAngles([0.0, 0.6, 1.2, 0.0, 1.0, 0.0]),
        }
    }

    fn ticks(&mut self, ee_pos: [f64; 3]) -> [u16; NUM_JOINTS] {
        let target = IkTarget::Position(Vector3::from(ee_pos) * 1e3);
        if let Ok(sol) = ik(&self.chain, &target, &self.q, &self.cfg) {
            self.q = sol.q;
        }
        angles_to_pwm(&self.q, &self.chain.calib)
    }
}

/// Closed-loop episode: observe, predict, ensemble, execute the selected
/// actions one per tick, repeat until success or the step cap.
pub fn run_episode(
    policy: &dyn ChunkPolicy,
    ensembler: &Ensembler,
    spec: &EpisodeSpec,
    cfg: &SimConfig,
) -> Result<EpisodeResult> {
    run_episode_with(policy, ensembler, spec, cfg, |_, _| {})
}

/// [`run_episode`] calling `before_predict` with the world ahead of each
/// inference.
pub fn run_episode_with(
    policy: &dyn ChunkPolicy,
    ensembler: &Ensembler,
    spec: &EpisodeSpec,
    cfg: &SimConfig,
    mut before_predict: impl FnMut(&WorldState, &TaskSpec),
) -> Result<EpisodeResult> {
    ensembler.validate()?;
    let task = &spec.task;
    let mut state = reset(task, &spec.perturb, spec.seed, cfg);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.action_noise.max(0.0)).expect("finite std");
    let mut ens_state = EnsemblerState::new();
    let mut pwm_logger = cfg.log_pwm.then(PwmLogger::new);

    let mut result = EpisodeResult {
        seed: spec.seed,
        instruction_id: task.instruction_id,
        task: task.instruction(),
        perturb: spec.perturb.mode_name().into(),
        ensembler: ensembler.name().into(),
        success: false,
        steps: 0,
        chunks: Vec::new(),
        inference_ns: Vec::new(),
        ensemble_ns: Vec::new(),
        pwm: Vec::new(),
    };

    'episode: while state.step < cfg.episode_cap {
        before_predict(&state, task);
        let obs = observe(&state, task);
        let t0 = Instant::now();
        let chunk = policy.predict(&obs);
        let t1 = Instant::now();
        let selection = ensembler.select(&chunk, &mut ens_state, policy.norm_stats())?;
        let t2 = Instant::now();
        result.inference_ns.push((t1 - t0).as_nanos() as u64);
        result.ensemble_ns.push((t2 - t1).as_nanos() as u64);
        let mean_mad = selection.mad.iter().sum::<f64>() / selection.mad.len().max(1) as f64;
        result.chunks.push(ChunkLog {
            horizon: selection.horizon,
            mean_mad,
            mad: selection.mad,
        });

        for a in &selection.actions {
            let n = if cfg.action_noise > 0.0 {
                std::array::from_fn(|_| noise.sample(&mut noise_rng))
            } else {
                [0.0; 3]
            };
            state = step_with_noise(&state, a, cfg, n);
            if let Some(logger) = pwm_logger.as_mut() {
                result.pwm.push(logger.ticks(state.ee_pos));
            }
            if is_success(&state, task, cfg) {
                result.success = true;
                break 'episode;
            }
            if state.step >= cfg.episode_cap {
                break 'episode;
            }
        }
    }
    result.steps = state.step;
    Ok(result)
}

//! Kinematics of the 6-DOF desk arm (roll, pitch, pitch, roll, pitch, roll)
//! and the servo command mapping used to drive it.
//!
//! Lengths are millimetres, angles radians. Joint frames compose as
//! `rotation(q_i) * translation(offset_i)` from the base outwards; roll joints
//! turn about the local z axis (along the link at the calibration pose) and
//! pitch joints about the local y axis. At `q = 0` the arm points straight up.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 6;
/// Top end-effector speed of the physical arm.
pub const MAX_EE_SPEED_MPS: f64 = 0.7;

const WRIST_JOINT: usize = 4;
const REACH_TOLERANCE_MM: f64 = 1.0;
pub const WRIST_REACH_MM: f64 = 382.0;
pub const TIP_REACH_MM: f64 = 460.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointAxis {
    Roll,
    Pitch,
}

impl JointAxis {
    fn unit(self) -> Vector3<f64> {
        match self {
            JointAxis::Roll => Vector3::z(),
            JointAxis::Pitch => Vector3::y(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub axis: JointAxis,
    /// Fixed translation from this joint to the next, in the joint frame.
    pub offset_mm: [f64; 3],
    /// `[min, max]` in radians.
    pub limits: [f64; 2],
}

/// Pulse-width servo calibration; one entry per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoCalib {
    pub min_pulse_us: f64,
    pub max_pulse_us: f64,
    /// Servo travel covered by the pulse range.
    pub travel_rad: f64,
    pub frame_us: f64,
    pub resolution: u32,
    /// Added to the joint angle to get the servo angle.
    pub zero_offsets_rad: [f64; NUM_JOINTS],
}

impl Default for ServoCalib {
    fn default() -> Self {
        Self {
            min_pulse_us: 500.0,
            max_pulse_us: 2500.0,
            travel_rad: PI,
            frame_us: 20_000.0,
            resolution: 4096,
            zero_offsets_rad: [0.0; NUM_JOINTS],
        }
    }
}

impl ServoCalib {
    /// Calibration with every joint zero at mid-travel.
    pub fn centered() -> Self {
        Self {
            zero_offsets_rad: [PI / 2.0; NUM_JOINTS],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_pulse_us
            && self.min_pulse_us < self.max_pulse_us
            && self.max_pulse_us <= self.frame_us)
        {
            return Err(Error::InvalidParam(
                "servo pulse range must lie inside the PWM frame".into(),
            ));
        }
        if self.resolution != 1 << 12 {
            return Err(Error::InvalidParam(format!(
                "PWM resolution {} is not 12-bit",
                self.resolution
            )));
        }
        if !(self.travel_rad > 0.0) {
            return Err(Error::InvalidParam("servo travel must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub joints: Vec<JointSpec>,
    pub gripper_offset_mm: [f64; 3],
    #[serde(default)]
    pub calib: ServoCalib,
}

impl Default for KinematicChain {
    fn default() -> Self {
        let roll = [-PI, PI];
        let pitch = [-PI / 2.0, PI / 2.0];
        let joint = |axis, z, limits| JointSpec {
            axis,
            offset_mm: [0.0, 0.0, z],
            limits,
        };
        Self {
            joints: vec![
                joint(JointAxis::Roll, 107.0, roll),
                joint(JointAxis::Pitch, 130.0, pitch),
                joint(JointAxis::Pitch, 130.0, pitch),
                joint(JointAxis::Roll, 15.0, roll),
                joint(JointAxis::Pitch, 0.0, pitch),
                joint(JointAxis::Roll, 0.0, roll),
            ],
            gripper_offset_mm: [0.0, 0.0, 78.0],
            calib: ServoCalib::centered(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAngles(pub [f64; NUM_JOINTS]);

impl JointAngles {
    pub fn zeros() -> Self {
        Self([0.0; NUM_JOINTS])
    }
}

/// Gripper-tip pose in the base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position_mm: Vector3<f64>,
    pub rotation: Rotation3<f64>,
}

const AXIS_PATTERN: [JointAxis; NUM_JOINTS] = [
    JointAxis::Roll,
    JointAxis::Pitch,
    JointAxis::Pitch,
    JointAxis::Roll,
    JointAxis::Pitch,
    JointAxis::Roll,
];

impl KinematicChain {
    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != NUM_JOINTS {
            return Err(Error::InvalidParam(format!(
                "expected 6 joints, got {}",
                self.joints.len()
            )));
        }
        for (i, (j, want)) in self.joints.iter().zip(AXIS_PATTERN).enumerate() {
            if j.axis != want {
                return Err(Error::InvalidParam(format!(
                    "joint {} must be {want:?}, found {:?}",
                    i + 1,
                    j.axis
                )));
            }
            if !(j.limits[0] <= 0.0 && 0.0 <= j.limits[1]) {
                return Err(Error::InvalidParam(format!(
                    "joint {} limits must bracket 0",
                    i + 1
                )));
            }
        }
        let zero = JointAngles::zeros();
        let wrist = self.wrist_position(&zero).norm();
        let tip = fk(self, &zero).position_mm.norm();
        if (wrist - WRIST_REACH_MM).abs() > REACH_TOLERANCE_MM {
            return Err(Error::InvalidParam(format!(
                "wrist reach {wrist:.1} mm, expected 382 mm"
            )));
        }
        if (tip - TIP_REACH_MM).abs() > REACH_TOLERANCE_MM {
            return Err(Error::InvalidParam(format!(
                "tip reach {tip:.1} mm, expected 460 mm"
            )));
        }
        self.calib.validate()
    }

    /// Longest possible base-to-tip distance.
    pub fn reach_mm(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| Vector3::from(j.offset_mm).norm())
            .sum::<f64>()
            + Vector3::from(self.gripper_offset_mm).norm()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64; NUM_JOINTS]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits[0], j.limits[1]);
        }
    }

    pub fn within_limits(&self, q: &JointAngles) -> bool {
        q.0.iter()
            .zip(&self.joints)
            .all(|(v, j)| (j.limits[0]..=j.limits[1]).contains(v))
    }

    /// Frame origin and orientation after each joint, base first.
    fn frames(&self, q: &JointAngles) -> Vec<(Vector3<f64>, Rotation3<f64>)> {
        let mut p = Vector3::zeros();
        let mut r = Rotation3::identity();
        let mut out = Vec::with_capacity(NUM_JOINTS + 1);
        out.push((p, r));
        for (j, angle) in self.joints.iter().zip(q.0) {
            r *= Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(j.axis.unit()), angle);
            p += r * Vector3::from(j.offset_mm);
            out.push((p, r));
        }
        out
    }

    /// Wrist centre: origin of the first wrist pitch joint.
    pub fn wrist_position(&self, q: &JointAngles) -> Vector3<f64> {
        self.frames(q)[WRIST_JOINT].0
    }
}

/// Tip pose for joint angles `q`.
pub fn fk(chain: &KinematicChain, q: &JointAngles) -> Pose {
    let (p, r) = *chain.frames(q).last().expect("chain has joints");
    Pose {
        position_mm: p + r * Vector3::from(chain.gripper_offset_mm),
        rotation: r,
    }
}

/// What the inverse solver matches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IkTarget {
    Position(Vector3<f64>),
    Pose(Pose),
}

impl IkTarget {
    fn position(&self) -> Vector3<f64> {
        match self {
            IkTarget::Position(p) => *p,
            IkTarget::Pose(p) => p.position_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkConfig {
    pub max_iterations: usize,
    pub damping: f64,
    pub position_tolerance_mm: f64,
    pub orientation_tolerance_rad: f64,
    /// Largest joint update per iteration.
    pub max_step_rad: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            damping: 0.01,
            position_tolerance_mm: 0.05,
            orientation_tolerance_rad: 1e-3,
            max_step_rad: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: JointAngles,
    pub converged: bool,
    pub iterations: usize,
    pub position_error_mm: f64,
    pub orientation_error_rad: f64,
}

fn rotation_error(target: &Rotation3<f64>, current: &Rotation3<f64>) -> Vector3<f64> {
    (target * current.inverse()).scaled_axis()
}

/// Task-space error in metres and radians; position rows only for
/// position targets.
fn task_error(chain: &KinematicChain, q: &JointAngles, target: &IkTarget) -> (Vec<f64>, f64, f64) {
    let pose = fk(chain, q);
    let dp = (target.position() - pose.position_mm) * 1e-3;
    match target {
        IkTarget::Position(_) => (dp.iter().copied().collect(), dp.norm() * 1e3, 0.0),
        IkTarget::Pose(t) => {
            let dr = rotation_error(&t.rotation, &pose.rotation);
            let e = Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z);
            (e.iter().copied().collect(), dp.norm() * 1e3, dr.norm())
        }
    }
}

/// Central-difference Jacobian of the tip pose (metres, radians).
fn numerical_jacobian(
    chain: &KinematicChain,
    q: &JointAngles,
    rows: usize,
) -> nalgebra::DMatrix<f64> {
    const H: f64 = 1e-6;
    let mut jac = nalgebra::DMatrix::zeros(rows, NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let (mut qp, mut qm) = (*q, *q);
        qp.0[j] += H;
        qm.0[j] -= H;
        let (fp, fm) = (fk(chain, &qp), fk(chain, &qm));
        let dp = (fp.position_mm - fm.position_mm) * (1e-3 / (2.0 * H));
        for r in 0..3 {
            jac[(r, j)] = dp[r];
        }
        if rows == 6 {
            let dr = (fp.rotation * fm.rotation.inverse()).scaled_axis() / (2.0 * H);
            for r in 0..3 {
                jac[(3 + r, j)] = dr[r];
            }
        }
    }
    jac
}

/// Damped least-squares inverse kinematics from the initial guess `q0`.
///
/// Returns the best iterate; `converged` is false when the iteration cap was
/// hit first. Targets further from the base than the chain's reach fail.
pub fn ik(
    chain: &KinematicChain,
    target: &IkTarget,
    q0: &JointAngles,
    cfg: &IkConfig,
) -> Result<IkSolution> {
    let distance = target.position().norm();
    let reach = chain.reach_mm();
    if distance > reach + 1e-9 {
        return Err(Error::Unreachable {
            distance_mm: distance,
            reach_mm: reach,
        });
    }
    let rows = match target {
        IkTarget::Position(_) => 3,
        IkTarget::Pose(_) => 6,
    };
    let mut q = *q0;
    chain.clamp_to_limits(&mut q.0);
    let mut best: Option<IkSolution> = None;
    for iteration in 0..=cfg.max_iterations {
        let (err, pos_err, rot_err) = task_error(chain, &q, target);
        let converged =
            pos_err <= cfg.position_tolerance_mm && rot_err <= cfg.orientation_tolerance_rad;
        let score = |s: &IkSolution| s.position_error_mm + 1e3 * s.orientation_error_rad;
        let current = IkSolution {
            q,
            converged,
            iterations: iteration,
            position_error_mm: pos_err,
            orientation_error_rad: rot_err,
        };
        if best.as_ref().is_none_or(|b| score(&current) < score(b)) || converged {
            best = Some(current);
        }
        if converged || iteration == cfg.max_iterations {
            break;
        }

        let jac = numerical_jacobian(chain, &q, rows);
        let e = nalgebra::DVector::from_vec(err);
        let damped = &jac * jac.transpose()
            + nalgebra::DMatrix::identity(rows, rows) * (cfg.damping * cfg.damping);
        let Some(y) = damped.lu().solve(&e) else {
            break;
        };
        let dq = jac.transpose() * y;
        let scale = (cfg.max_step_rad / dq.amax()).min(1.0);
        for j in 0..NUM_JOINTS {
            q.0[j] += dq[j] * scale;
        }
        chain.clamp_to_limits(&mut q.0);
    }
    Ok(best.expect("at least one iterate"))
}

/// [`ik`] retried from deterministic pseudo-random starts until it converges.
pub fn ik_with_restarts(
    chain: &KinematicChain,
    target: &IkTarget,
    q0: &JointAngles,
    cfg: &IkConfig,
    restarts: usize,
    seed: u64,
) -> Result<IkSolution> {
    use rand::{Rng, SeedableRng};
    let mut best = ik(chain, target, q0, cfg)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..restarts {
        if best.converged {
            break;
        }
        let start = JointAngles(std::array::from_fn(|j| {
            let [lo, hi] = chain.joints[j].limits;
            rng.random_range(lo..=hi)
        }));
        let sol = ik(chain, target, &start, cfg)?;
        if sol.converged || sol.position_error_mm < best.position_error_mm {
            best = sol;
        }
    }
    Ok(best)
}

/// 12-bit PWM tick per joint.
pub fn angles_to_pwm(q: &JointAngles, calib: &ServoCalib) -> [u16; NUM_JOINTS] {
    std::array::from_fn(|j| {
        let servo = (q.0[j] + calib.zero_offsets_rad[j]).clamp(0.0, calib.travel_rad);
        let pulse = calib.min_pulse_us
            + servo / calib.travel_rad * (calib.max_pulse_us - calib.min_pulse_us);
        let tick = (pulse / calib.frame_us * calib.resolution as f64).round();
        tick.clamp(0.0, (calib.resolution - 1) as f64) as u16
    })
}

/// Fastest tip speed (m/s) between consecutive waypoints spaced `dt` apart.
pub fn ee_speed_check(chain: &KinematicChain, trajectory: &[JointAngles], dt: f64) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidParam(
            "speed check needs at least two waypoints".into(),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParam("dt must be positive".into()));
    }
    let positions: Vec<Vector3<f64>> = trajectory
        .iter()
        .map(|q| fk(chain, q).position_mm)
        .collect();
    Ok(positions
        .windows(2)
        .map(|w| (w[1] - w[0]).norm() * 1e-3 / dt)
        .fold(0.0, f64::max))
}

/// Rotation matrix as row-major nested arrays, for logs and reports.
pub fn rotation_rows(r: &Rotation3<f64>) -> [[f64; 3]; 3] {
    let m: &Matrix3<f64> = r.matrix();
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_q(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointAngles {
        JointAngles(std::array::from_fn(|j| {
            let [lo, hi] = chain.joints[j].limits;
            rng.random_range(lo..=hi)
        }))
    }

    #[test]
    fn default_chain_is_valid() {
        let chain = KinematicChain::default();
        chain.validate().unwrap();
        let zero = JointAngles::zeros();
        assert!((chain.wrist_position(&zero).norm() - 382.0).abs() <= 1.0);
        assert!((fk(&chain, &zero).position_mm.norm() - 460.0).abs() <= 1.0);
        assert!((chain.reach_mm() - 460.0).abs() < 1e-9);
    }

    #[test]
    fn validate_rejects_wrong_axes_and_reach() {
        let mut chain = KinematicChain::default();
        chain.joints[1].axis = JointAxis::Roll;
        assert!(chain.validate().is_err());
        let mut chain = KinematicChain::default();
        chain.joints[2].offset_mm[2] = 140.0;
        assert!(chain.validate().is_err());
    }

    #[test]
    fn base_roll_preserves_cylinder_coordinates() {
        let chain = KinematicChain::default();
        let mut q = JointAngles([0.0, 0.4, -0.7, 0.2, 0.5, 0.1]);
        let w0 = chain.wrist_position(&q);
        for a in [-2.5, -1.0, 0.3, 1.7, 3.0] {
            q.0[0] = a;
            let w = chain.wrist_position(&q);
            assert!((w.xy().norm() - w0.xy().norm()).abs() < 1e-9);
            assert!((w.z - w0.z).abs() < 1e-9);
        }
    }

    #[test]
    fn wrist_to_tip_distance_is_constant() {
        let chain = KinematicChain::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = random_q(&chain, &mut rng);
            let d = (fk(&chain, &q).position_mm - chain.wrist_position(&q)).norm();
            assert!((d - 78.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ik_round_trip_random_poses() {
        let chain = KinematicChain::default();
        let cfg = IkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q0 = JointAngles([0.0, 0.3, 0.6, 0.0, 0.5, 0.0]);
        for i in 0..50 {
            let target = fk(&chain, &random_q(&chain, &mut rng));
            let sol = ik_with_restarts(&chain, &IkTarget::Pose(target), &q0, &cfg, 16, i).unwrap();
            assert!(sol.position_error_mm <= 1.0, "target {i}: {sol:?}");
            assert!(sol.orientation_error_rad <= 0.01, "target {i}: {sol:?}");
        }
    }

    #[test]
    fn ik_reaches_extended_pose() {
        let chain = KinematicChain::default();
        let target = IkTarget::Position(Vector3::new(0.0, 0.0, 460.0));
        let sol = ik(
            &chain,
            &target,
            &JointAngles([0.2, 0.3, 0.3, 0.0, 0.2, 0.0]),
            &IkConfig::default(),
        )
        .unwrap();
        assert!(sol.position_error_mm <= 1.0, "{sol:?}");
        assert!(sol.q.0[1].abs() < 0.1 && sol.q.0[2].abs() < 0.1 && sol.q.0[4].abs() < 0.1);
    }

    #[test]
    fn ik_rejects_unreachable_target() {
        let chain = KinematicChain::default();
        let target = IkTarget::Position(Vector3::new(500.0, 0.0, 0.0));
        let err = ik(&chain, &target, &JointAngles::zeros(), &IkConfig::default()).unwrap_err();
        assert!(err.to_string().starts_with("unreachable"));
    }

    #[test]
    fn pwm_reference_ticks() {
        let calib = ServoCalib::default();
        let ticks = |a: f64| angles_to_pwm(&JointAngles([a; 6]), &calib)[0];
        assert_eq!(ticks(0.0), 102);
        assert_eq!(ticks(PI / 2.0), 307);
        assert_eq!(ticks(PI), 512);
        let mut last = 0;
        for i in 0..=1000 {
            let t = ticks(PI * i as f64 / 1000.0);
            assert!(t >= last);
            last = t;
        }
        // centred calibration puts joint zero at mid-travel
        assert_eq!(
            angles_to_pwm(&JointAngles::zeros(), &ServoCalib::centered()),
            [307; 6]
        );
    }

    #[test]
    fn speed_check() {
        let chain = KinematicChain::default();
        let q = JointAngles([0.1, 0.2, 0.3, 0.0, 0.1, 0.0]);
        assert_eq!(ee_speed_check(&chain, &[q, q, q], 0.1).unwrap(), 0.0);
        assert!(ee_speed_check(&chain, &[q], 0.1).is_err());
        // rotate the base so the tip sweeps a 70 mm chord
        let r = fk(&chain, &q).position_mm.xy().norm();
        let angle = 2.0 * (35.0 / r).asin();
        let mut q2 = q;
        q2.0[0] += angle;
        let v = ee_speed_check(&chain, &[q, q2], 0.1).unwrap();
        assert!((v - 0.7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn fk_matches_homogeneous_product() {
        let chain = KinematicChain::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = random_q(&chain, &mut rng);
            let mut t = nalgebra::Matrix4::<f64>::identity();
            for (j, a) in chain.joints.iter().zip(q.0) {
                let (s, c) = a.sin_cos();
                let rot = match j.axis {
                    JointAxis::Roll => nalgebra::Matrix4::new(
                        c, -s, 0., 0., s, c, 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.,
                    ),
                    JointAxis::Pitch => nalgebra::Matrix4::new(
                        c, 0., s, 0., 0., 1., 0., 0., -s, 0., c, 0., 0., 0., 0., 1.,
                    ),
                };
                let [x, y, z] = j.offset_mm;
                let tr = nalgebra::Matrix4::new(
                    1., 0., 0., x, 0., 1., 0., y, 0., 0., 1., z, 0., 0., 0., 1.,
                );
                t = t * rot * tr;
            }
            let [x, y, z] = chain.gripper_offset_mm;
            let tip = t * nalgebra::Vector4::new(x, y, z, 1.0);
            let pose = fk(&chain, &q);
            assert!((pose.position_mm - tip.xyz()).norm() < 1e-9);
        }
    }
}

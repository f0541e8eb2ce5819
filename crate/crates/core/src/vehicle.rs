//! Single-track kinematics at the rear axle.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Pose2D};

/// Position residual above which an inverse-kinematics fit is flagged.
pub const IK_RESIDUAL_LIMIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub length: f64,
    pub width: f64,
    pub rear_overhang: f64,
    pub max_steer: f64,
    pub max_speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            length: 4.5,
            width: 1.9,
            rear_overhang: 1.0,
            max_steer: 0.6,
            max_speed: 1.5,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("length", self.length),
            ("width", self.width),
            ("max_steer", self.max_steer),
            ("max_speed", self.max_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.rear_overhang >= 0.0 && self.rear_overhang < self.length) {
            return Err(format!(
                "rear_overhang must lie in [0, length), got {}",
                self.rear_overhang
            ));
        }
        if self.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(format!("max_steer must be below pi/2, got {}", self.max_steer));
        }
        Ok(())
    }

    /// Distance from the rear axle to the footprint center along the heading.
    pub fn center_offset(&self) -> f64 {
        0.5 * self.length - self.rear_overhang
    }
}

/// Steering angle (rad) and signed speed (m/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: f64,
    pub v: f64,
}

impl Action {
    pub const ZERO: Action = Action { delta: 0.0, v: 0.0 };

    pub fn new(delta: f64, v: f64) -> Self {
        Self { delta, v }
    }

    pub fn clamped(self, params: &VehicleParams) -> Self {
        let clamp = |x: f64, m: f64| if x.is_nan() { 0.0 } else { x.clamp(-m, m) };
        Self {
            delta: clamp(self.delta, params.max_steer),
            v: clamp(self.v, params.max_speed),
        }
    }

    /// Action scaled into `[-1, 1]^2` by the vehicle bounds.
    pub fn normalized(self, params: &VehicleParams) -> [f64; 2] {
        [self.delta / params.max_steer, self.v / params.max_speed]
    }

    pub fn from_normalized(n: [f64; 2], params: &VehicleParams) -> Self {
        Self::new(n[0] * params.max_steer, n[1] * params.max_speed).clamped(params)
    }
}

/// One explicit Euler step of the bicycle model. The action is clamped first.
pub fn kinematic_step(pose: &Pose2D, action: Action, dt: f64, params: &VehicleParams) -> Pose2D {
    let a = action.clamped(params);
    let (s, c) = pose.psi.sin_cos();
    Pose2D {
        x: pose.x + a.v * c * dt,
        y: pose.y + a.v * s * dt,
        psi: wrap_angle(pose.psi + a.v / params.wheelbase * a.delta.tan() * dt),
    }
}

/// `n` consecutive steps of `dt / n`; returns the pose after each substep.
pub fn substep_rollout(
    pose: &Pose2D,
    action: Action,
    dt: f64,
    n: usize,
    params: &VehicleParams,
) -> Vec<Pose2D> {
    let n = n.max(1);
    let h = dt / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cur = *pose;
    for _ in 0..n {
        cur = kinematic_step(&cur, action, h, params);
        out.push(cur);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkResult {
    pub action: Action,
    /// Position error of re-simulating `action` from the first pose.
    pub residual: f64,
    pub residual_too_large: bool,
}

/// Recovers the action that moves `from` to `to` in one step of length `dt`.
///
/// Speed is the displacement length over `dt`, signed by its projection on
/// the initial heading; steering follows from the heading change.
pub fn inverse_kinematics(from: &Pose2D, to: &Pose2D, dt: f64, params: &VehicleParams) -> IkResult {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    let dist = dx.hypot(dy);
    let (s, c) = from.psi.sin_cos();
    let along = dx * c + dy * s;
    let action = if dist == 0.0 {
        Action::ZERO
    } else {
        let v = if along < 0.0 { -dist / dt } else { dist / dt };
        let dpsi = wrap_angle(to.psi - from.psi);
        let delta = (params.wheelbase * dpsi / (v * dt)).atan();
        Action::new(delta.clamp(-params.max_steer, params.max_steer), v)
    };
    let sim = kinematic_step(from, action, dt, params);
    let residual = (sim.x - to.x).hypot(sim.y - to.y);
    IkResult {
        action,
        residual,
        residual_too_large: residual > IK_RESIDUAL_LIMIT,
    }
}

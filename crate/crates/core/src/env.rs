//! The parking task as an episodic MDP.
//!
//! A [`ParkingEnv`] owns one vehicle in a static [`ParkingScene`]. Each step
//! integrates the bicycle model over a handful of substeps, classifies the
//! outcome, and scores it with the dense/sparse reward described by
//! [`RewardParams`]. The full mutable state, including the sampling RNG, can
//! be captured with [`ParkingEnv::snapshot`] and restored bit-exactly.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    build_esdf, footprint_unchecked, overlap_score, ray_cast_segments, wrap_angle, EsdfGrid,
    GeometryError, OccupancyGrid, Point, Polygon, Pose2D,
};
use crate::vehicle::{substep_rollout, Action, VehicleParams};

/// Number of ray-cast clearances in the observation.
pub const NUM_RAYS: usize = 36;
/// Observation layout: relative slot pose (4), last action (2), rays, IoU, step fraction.
pub const OBS_DIM: usize = 4 + 2 + NUM_RAYS + 2;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("slot index {index} out of range ({count} slots)")]
    InvalidSlot { index: usize, count: usize },
    #[error("no collision-free start pose found after {0} attempts")]
    SceneInfeasible(usize),
    #[error("lifecycle: {0}")]
    Lifecycle(&'static str),
    #[error("snapshot belongs to a different scene")]
    SnapshotMismatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub polygon: Polygon,
    /// Heading of a correctly parked vehicle; points out of the slot toward the aisle.
    pub heading: f64,
}

impl Slot {
    pub fn center(&self) -> Point {
        self.polygon.centroid()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedPolygon {
    pub name: String,
    pub polygon: Polygon,
}

/// Static scene: walls, obstacles, slots and the derived grids.
#[derive(Clone, Debug)]
pub struct ParkingScene {
    pub name: String,
    pub boundary: Polygon,
    pub obstacles: Vec<NamedPolygon>,
    pub slots: Vec<Slot>,
    pub occupancy: OccupancyGrid,
    pub esdf: EsdfGrid,
    segments: Vec<(Point, Point)>,
    fingerprint: u64,
}

/// Safety distance of the normalized distance field, meters.
pub const SAFETY_DISTANCE: f64 = 1.0;

impl ParkingScene {
    pub fn new(
        name: impl Into<String>,
        boundary: Polygon,
        obstacles: Vec<NamedPolygon>,
        slots: Vec<Slot>,
        resolution: f64,
    ) -> Result<Self, EnvError> {
        if slots.is_empty() {
            return Err(EnvError::InvalidScene("scene has no parking slots".into()));
        }
        for slot in &slots {
            if let Some(ob) = obstacles.iter().find(|o| o.polygon.overlaps(&slot.polygon)) {
                return Err(EnvError::InvalidScene(format!(
                    "slot '{}' intersects obstacle '{}'",
                    slot.name, ob.name
                )));
            }
            let inside = slot.polygon.intersection_area(&boundary);
            if inside < slot.polygon.area() * (1.0 - 1e-9) {
                return Err(EnvError::InvalidScene(format!(
                    "slot '{}' leaves the boundary",
                    slot.name
                )));
            }
        }
        let (lo, hi) = boundary.bounding_box();
        let mut occupancy = OccupancyGrid::covering(lo, hi, SAFETY_DISTANCE, resolution)?;
        occupancy.rasterize_outside(&boundary);
        for o in &obstacles {
            occupancy.rasterize_polygon(&o.polygon);
        }
        let esdf = build_esdf(&occupancy, SAFETY_DISTANCE)?;
        let mut segments: Vec<(Point, Point)> = boundary.edges().collect();
        for o in &obstacles {
            segments.extend(o.polygon.edges());
        }

        let mut h = DefaultHasher::new();
        let mut feed = |poly: &Polygon| {
            for p in poly.vertices() {
                p.x.to_bits().hash(&mut h);
                p.y.to_bits().hash(&mut h);
            }
        };
        feed(&boundary);
        for o in &obstacles {
            feed(&o.polygon);
        }
        for s in &slots {
            feed(&s.polygon);
        }
        let mut h2 = DefaultHasher::new();
        h.finish().hash(&mut h2);
        resolution.to_bits().hash(&mut h2);
        for s in &slots {
            s.heading.to_bits().hash(&mut h2);
        }

        Ok(Self {
            name: name.into(),
            boundary,
            obstacles,
            slots,
            occupancy,
            esdf,
            segments,
            fingerprint: h2.finish(),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Distance to the first wall or obstacle edge along a ray.
    pub fn ray_cast(&self, origin: Point, angle: f64, max_range: f64) -> f64 {
        ray_cast_segments(&self.segments, origin, angle, max_range)
    }

    /// True when `poly` overlaps an obstacle or pokes out of the boundary.
    pub fn collides(&self, poly: &Polygon) -> bool {
        if self.obstacles.iter().any(|o| o.polygon.overlaps(poly)) {
            return true;
        }
        let inside = poly.intersection_area(&self.boundary);
        inside < poly.area() - 1e-9
    }

    pub fn slot(&self, index: usize) -> Result<&Slot, EnvError> {
        self.slots.get(index).ok_or(EnvError::InvalidSlot {
            index,
            count: self.slots.len(),
        })
    }
}

/// Reward constants; defaults reproduce the reference parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub c_success: f64,
    pub c_outbound: f64,
    pub c_collision: f64,
    pub c_stuck: f64,
    pub c_outtime: f64,
    pub w_union: f64,
    pub w_time: f64,
    pub w_soft: f64,
    pub w_reward: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            c_success: 50.0,
            c_outbound: 10.0,
            c_collision: 50.0,
            c_stuck: 0.3,
            c_outtime: 3.0,
            w_union: 10.0,
            w_time: 3.0,
            w_soft: 0.3,
            w_reward: 0.1,
        }
    }
}

/// Episode and simulation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub substeps: usize,
    pub t_tol: u32,
    pub arrival_iou: f64,
    pub arrival_heading_deg: f64,
    pub oob_distance: f64,
    pub stuck_displacement: f64,
    pub boundary_samples_per_edge: usize,
    pub ray_max_range: f64,
    pub init_radius: f64,
    pub init_half_angle_deg: f64,
    pub max_reset_attempts: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            substeps: 10,
            t_tol: 120,
            arrival_iou: 0.9,
            arrival_heading_deg: 75.0,
            oob_distance: 15.0,
            stuck_displacement: 0.01,
            boundary_samples_per_edge: 20,
            ray_max_range: 10.0,
            init_radius: 9.0,
            init_half_angle_deg: 90.0,
            max_reset_attempts: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rl,
    Human,
    RlCorr,
    HumanCorr,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Rl => 0,
            Mode::Human => 1,
            Mode::RlCorr => 2,
            Mode::HumanCorr => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Mode::Rl,
            1 => Mode::Human,
            2 => Mode::RlCorr,
            3 => Mode::HumanCorr,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rl => "rl",
            Mode::Human => "human",
            Mode::RlCorr => "rl_corr",
            Mode::HumanCorr => "human_corr",
        }
    }

    pub fn is_human(self) -> bool {
        matches!(self, Mode::Human | Mode::HumanCorr)
    }

    pub fn is_correction(self) -> bool {
        matches!(self, Mode::RlCorr | Mode::HumanCorr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationStatus {
    Arrived,
    Collision,
    Timeout,
    Oob,
}

impl TerminationStatus {
    pub const ALL: [TerminationStatus; 4] = [
        TerminationStatus::Arrived,
        TerminationStatus::Collision,
        TerminationStatus::Timeout,
        TerminationStatus::Oob,
    ];

    pub fn code(self) -> u8 {
        match self {
            TerminationStatus::Arrived => 1,
            TerminationStatus::Collision => 2,
            TerminationStatus::Timeout => 3,
            TerminationStatus::Oob => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => TerminationStatus::Arrived,
            2 => TerminationStatus::Collision,
            3 => TerminationStatus::Timeout,
            4 => TerminationStatus::Oob,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationStatus::Arrived => "arrived",
            TerminationStatus::Collision => "collision",
            TerminationStatus::Timeout => "timeout",
            TerminationStatus::Oob => "oob",
        }
    }

    pub fn is_failure(self) -> bool {
        self != TerminationStatus::Arrived
    }
}

/// Unscaled reward terms of one step; the step reward is `w_reward * total()`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub success: f64,
    pub union: f64,
    pub collision: f64,
    pub soft: f64,
    pub outbound: f64,
    pub stuck: f64,
    pub time: f64,
    pub outtime: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.success
            + self.union
            + self.collision
            + self.soft
            + self.outbound
            + self.stuck
            + self.time
            + self.outtime
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.success,
            self.union,
            self.collision,
            self.soft,
            self.outbound,
            self.stuck,
            self.time,
            self.outtime,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            success: a[0],
            union: a[1],
            collision: a[2],
            soft: a[3],
            outbound: a[4],
            stuck: a[5],
            time: a[6],
            outtime: a[7],
        }
    }
}

/// Privileged observation vector, every component in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn bit_eq(&self, o: &Observation) -> bool {
        self.0.len() == o.0.len() && self.0.iter().zip(&o.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub next_obs: Observation,
    pub mode: Mode,
    pub status: Option<TerminationStatus>,
    pub breakdown: RewardBreakdown,
}

impl Transition {
    pub fn bit_eq(&self, o: &Transition) -> bool {
        self.obs.bit_eq(&o.obs)
            && self.next_obs.bit_eq(&o.next_obs)
            && self.action.delta.to_bits() == o.action.delta.to_bits()
            && self.action.v.to_bits() == o.action.v.to_bits()
            && self.reward.to_bits() == o.reward.to_bits()
            && self.done == o.done
            && self.mode == o.mode
            && self.status == o.status
            && self
                .breakdown
                .as_array()
                .iter()
                .zip(o.breakdown.as_array())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Mutable per-episode state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: Pose2D,
    pub step_index: u32,
    pub sim_time: f64,
    /// Running maximum of the overlap score, seeded with the start pose.
    pub best_iou: f64,
    pub iou: f64,
    pub last_displacement: f64,
    pub last_action: Action,
    pub target_slot: usize,
    pub status: Option<TerminationStatus>,
}

#[derive(Clone, Debug)]
pub struct EnvSnapshot {
    scene_fingerprint: u64,
    pub state: EnvState,
    pub obs: Observation,
    rng: ChaCha8Rng,
}

pub fn heading_error(pose: &Pose2D, slot: &Slot) -> f64 {
    wrap_angle(pose.psi - slot.heading).abs()
}

/// Footprint center of a rear-axle pose.
pub fn vehicle_center(pose: &Pose2D, vehicle: &VehicleParams) -> Point {
    pose.position() + pose.heading() * vehicle.center_offset()
}

pub fn check_arrival(iou: f64, heading_err: f64, cfg: &EnvConfig) -> bool {
    iou > cfg.arrival_iou && heading_err < cfg.arrival_heading_deg.to_radians()
}

pub fn check_oob(pose: &Pose2D, slot: &Slot, vehicle: &VehicleParams, cfg: &EnvConfig) -> bool {
    vehicle_center(pose, vehicle).distance(slot.center()) > cfg.oob_distance
}

/// Points spread evenly along each footprint edge.
pub fn boundary_samples(poly: &Polygon, per_edge: usize) -> Vec<Point> {
    let per_edge = per_edge.max(1);
    let mut out = Vec::with_capacity(poly.vertices().len() * per_edge);
    for (a, b) in poly.edges() {
        for k in 0..per_edge {
            out.push(a + (b - a) * (k as f64 / per_edge as f64));
        }
    }
    out
}

pub struct ParkingEnv {
    scene: Arc<ParkingScene>,
    vehicle: VehicleParams,
    config: EnvConfig,
    reward: RewardParams,
    state: Option<EnvState>,
    obs: Observation,
    rng: ChaCha8Rng,
}

impl ParkingEnv {
    pub fn new(
        scene: Arc<ParkingScene>,
        vehicle: VehicleParams,
        config: EnvConfig,
        reward: RewardParams,
    ) -> Self {
        Self {
            scene,
            vehicle,
            config,
            reward,
            state: None,
            obs: Observation(vec![0.0; OBS_DIM]),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn scene(&self) -> &Arc<ParkingScene> {
        &self.scene
    }

    pub fn vehicle(&self) -> &VehicleParams {
        &self.vehicle
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reward_params(&self) -> &RewardParams {
        &self.reward
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn is_terminated(&self) -> bool {
        self.state.as_ref().is_some_and(|s| s.status.is_some())
    }

    pub fn footprint(&self, pose: &Pose2D) -> Polygon {
        footprint_unchecked(
            pose,
            self.vehicle.length,
            self.vehicle.width,
            self.vehicle.rear_overhang,
        )
    }

    /// Samples a start pose in the sector in front of the slot.
    pub fn reset(&mut self, slot_index: usize, seed: u64) -> Result<Observation, EnvError> {
        let slot = self.scene.slot(slot_index)?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = slot.center();
        let half = self.config.init_half_angle_deg.to_radians();
        for _ in 0..self.config.max_reset_attempts {
            let r = self.config.init_radius * rng.random::<f64>().sqrt();
            let phi = slot.heading + rng.random_range(-half..=half);
            let psi = rng.random_range(-PI..=PI);
            let c = center + Point::from_angle(phi) * r;
            let pose = Pose2D::new(
                c.x - psi.cos() * self.vehicle.center_offset(),
                c.y - psi.sin() * self.vehicle.center_offset(),
                psi,
            );
            let fp = self.footprint(&pose);
            if self.scene.collides(&fp) {
                continue;
            }
            let iou = overlap_score(&fp, &slot.polygon)?;
            if check_arrival(iou, heading_error(&pose, &slot), &self.config) {
                continue;
            }
            self.rng = rng;
            return self.start_at(slot_index, pose, iou);
        }
        Err(EnvError::SceneInfeasible(self.config.max_reset_attempts))
    }

    /// Starts an episode at a caller-chosen pose.
    pub fn reset_to_pose(&mut self, slot_index: usize, pose: Pose2D, seed: u64) -> Result<Observation, EnvError> {
        let slot = self.scene.slot(slot_index)?;
        let iou = overlap_score(&self.footprint(&pose), &slot.polygon)?;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.start_at(slot_index, pose, iou)
    }

    fn start_at(&mut self, slot_index: usize, pose: Pose2D, iou: f64) -> Result<Observation, EnvError> {
        let state = EnvState {
            pose,
            step_index: 0,
            sim_time: 0.0,
            best_iou: iou,
            iou,
            last_displacement: 0.0,
            last_action: Action::ZERO,
            target_slot: slot_index,
            status: None,
        };
        self.obs = self.build_observation(&state);
        self.state = Some(state);
        Ok(self.obs.clone())
    }

    pub fn build_observation(&self, state: &EnvState) -> Observation {
        let slot = &self.scene.slots[state.target_slot];
        let pose = &state.pose;
        let center = vehicle_center(pose, &self.vehicle);
        let rel = (slot.center() - center).rotate(-pose.psi);
        let scale = self.config.oob_distance;
        let dtheta = wrap_angle(slot.heading - pose.psi);
        let mut v = Vec::with_capacity(OBS_DIM);
        v.push((rel.x / scale).clamp(-1.0, 1.0));
        v.push((rel.y / scale).clamp(-1.0, 1.0));
        v.push(dtheta.sin());
        v.push(dtheta.cos());
        let la = state.last_action.normalized(&self.vehicle);
        v.push(la[0].clamp(-1.0, 1.0));
        v.push(la[1].clamp(-1.0, 1.0));
        let range = self.config.ray_max_range;
        for k in 0..NUM_RAYS {
            let angle = pose.psi + 2.0 * PI * k as f64 / NUM_RAYS as f64;
            v.push(self.scene.ray_cast(center, angle, range) / range);
        }
        v.push(state.iou.clamp(0.0, 1.0));
        v.push((state.step_index as f64 / self.config.t_tol as f64).min(1.0));
        Observation(v)
    }

    /// Advances one step. Termination precedence is
    /// collision > arrived > oob > timeout.
    pub fn step(&mut self, action: Action, mode: Mode) -> Result<Transition, EnvError> {
        let prev = self.state.clone().ok_or(EnvError::Lifecycle("step before reset"))?;
        if prev.status.is_some() {
            return Err(EnvError::Lifecycle("step after termination"));
        }
        let action = action.clamped(&self.vehicle);
        let slot = &self.scene.slots[prev.target_slot];
        let subs = substep_rollout(&prev.pose, action, self.config.dt, self.config.substeps, &self.vehicle);
        let pose = *subs.last().expect("at least one substep");
        let fp = self.footprint(&pose);
        let collided = subs.iter().any(|p| self.scene.collides(&self.footprint(p)));
        let iou = overlap_score(&fp, &slot.polygon)?;
        let step_index = prev.step_index + 1;
        let status = if collided {
            Some(TerminationStatus::Collision)
        } else if check_arrival(iou, heading_error(&pose, slot), &self.config) {
            Some(TerminationStatus::Arrived)
        } else if check_oob(&pose, slot, &self.vehicle, &self.config) {
            Some(TerminationStatus::Oob)
        } else if step_index > self.config.t_tol {
            Some(TerminationStatus::Timeout)
        } else {
            None
        };
        let next = EnvState {
            pose,
            step_index,
            sim_time: prev.sim_time + self.config.dt,
            best_iou: prev.best_iou.max(iou),
            iou,
            last_displacement: (pose.x - prev.pose.x).hypot(pose.y - prev.pose.y),
            last_action: action,
            target_slot: prev.target_slot,
            status,
        };
        let (reward, breakdown) = self.compute_reward(&prev, &action, &subs, &next);
        let next_obs = self.build_observation(&next);
        let obs = std::mem::replace(&mut self.obs, next_obs.clone());
        self.state = Some(next);
        Ok(Transition {
            obs,
            action,
            reward,
            done: status.is_some(),
            next_obs,
            mode,
            status,
            breakdown,
        })
    }

    /// Scores the move `prev -> new` through `substates`.
    pub fn compute_reward(
        &self,
        prev: &EnvState,
        _action: &Action,
        substates: &[Pose2D],
        new: &EnvState,
    ) -> (f64, RewardBreakdown) {
        let rp = &self.reward;
        let slot = &self.scene.slots[new.target_slot];
        let mut b = RewardBreakdown::default();
        let heading_ok = heading_error(&new.pose, slot) < self.config.arrival_heading_deg.to_radians();
        if heading_ok {
            b.union = rp.w_union * (new.iou - prev.best_iou);
        }
        let mut min_esdf = f64::INFINITY;
        for s in substates {
            let fp = self.footprint(s);
            for p in boundary_samples(&fp, self.config.boundary_samples_per_edge) {
                min_esdf = min_esdf.min(self.scene.esdf.query(p));
            }
        }
        if min_esdf.is_finite() {
            b.soft = rp.w_soft * (min_esdf - 1.0);
        }
        match new.status {
            Some(TerminationStatus::Arrived) => b.success = rp.c_success,
            Some(TerminationStatus::Collision) => b.collision = -rp.c_collision,
            Some(TerminationStatus::Oob) => b.outbound = -rp.c_outbound,
            Some(TerminationStatus::Timeout) => b.outtime = -rp.c_outtime,
            None => {}
        }
        if new.last_displacement < self.config.stuck_displacement {
            b.stuck = -rp.c_stuck;
        }
        let horizon = 10.0 * self.config.t_tol as f64;
        b.time = -rp.w_time * (new.step_index as f64 / horizon).tanh();
        (rp.w_reward * b.total(), b)
    }

    pub fn snapshot(&self) -> Result<EnvSnapshot, EnvError> {
        let state = self.state.clone().ok_or(EnvError::Lifecycle("snapshot before reset"))?;
        Ok(EnvSnapshot {
            scene_fingerprint: self.scene.fingerprint(),
            state,
            obs: self.obs.clone(),
            rng: self.rng.clone(),
        })
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) -> Result<(), EnvError> {
        if snap.scene_fingerprint != self.scene.fingerprint() {
            return Err(EnvError::SnapshotMismatch);
        }
        self.state = Some(snap.state.clone());
        self.obs = snap.obs.clone();
        self.rng = snap.rng.clone();
        Ok(())
    }

    /// Random source owned by the episode (captured by snapshots).
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl EnvSnapshot {
    pub fn scene_fingerprint(&self) -> u64 {
        self.scene_fingerprint
    }

    /// Full bitwise equality including the RNG stream position.
    pub fn bit_eq(&self, o: &EnvSnapshot) -> bool {
        let (a, b) = (&self.state, &o.state);
        self.scene_fingerprint == o.scene_fingerprint
            && a.pose.bit_eq(&b.pose)
            && a.step_index == b.step_index
            && a.sim_time.to_bits() == b.sim_time.to_bits()
            && a.best_iou.to_bits() == b.best_iou.to_bits()
            && a.iou.to_bits() == b.iou.to_bits()
            && a.last_displacement.to_bits() == b.last_displacement.to_bits()
            && a.last_action.delta.to_bits() == b.last_action.delta.to_bits()
            && a.last_action.v.to_bits() == b.last_action.v.to_bits()
            && a.target_slot == b.target_slot
            && a.status == b.status
            && self.obs.bit_eq(&o.obs)
            && self.rng == o.rng
    }
}

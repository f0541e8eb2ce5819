//! Scripted stand-in for the human operator.
//!
//! After every rollback the corrector plans a two-phase maneuver from the
//! restored pose: a weighted A* search over short constant-command motion
//! primitives brings the rear axle onto the slot's approach axis (within
//! the lateral and heading tolerances), then a feedback law reverses along
//! the axis into the slot. Candidate motions are checked with the same
//! collision, arrival and out-of-bounds predicates as the environment, so a
//! validated plan replays exactly. When no plan fits the step budget the
//! corrector asks for the attempt to be discarded.

use std::cmp::Ordering;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use parkcil_core::env::{
    check_arrival, check_oob, heading_error, vehicle_center, ParkingEnv, Slot,
};
use parkcil_core::geometry::{overlap_score, wrap_angle, Pose2D};
use parkcil_core::scheduler::{Intervenor, OperatorEvent, Phase, StepContext};
use parkcil_core::vehicle::{substep_rollout, Action};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    /// Steps per search primitive.
    pub primitive_steps: usize,
    /// Steering levels as fractions of the steering bound.
    pub steer_levels: Vec<f64>,
    pub lateral_tol_m: f64,
    pub heading_tol_rad: f64,
    /// Search cost of a direction change, in steps.
    pub gear_change_cost: f64,
    pub heuristic_weight: f64,
    pub max_expansions: usize,
    pub cell_m: f64,
    pub heading_bins: usize,
    /// Lateral gain of the reverse-in law, 1/s.
    pub k_lateral: f64,
    /// Heading gain of the reverse-in law, 1/s.
    pub k_heading: f64,
    /// Hand the rest of the attempt to the policy once aligned.
    pub release_on_alignment: bool,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            primitive_steps: 4,
            steer_levels: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            lateral_tol_m: 0.3,
            heading_tol_rad: 10f64.to_radians(),
            gear_change_cost: 4.0,
            heuristic_weight: 2.0,
            max_expansions: 6000,
            cell_m: 0.3,
            heading_bins: 72,
            k_lateral: 1.0,
            k_heading: 2.0,
            release_on_alignment: false,
        }
    }
}

/// Rear-axle coordinates in the slot frame: `s` along the outward heading,
/// `e` to its left, `phi` heading relative to the slot heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisCoords {
    pub s: f64,
    pub e: f64,
    pub phi: f64,
}

pub fn axis_coords(pose: &Pose2D, slot: &Slot) -> AxisCoords {
    let c = slot.center();
    let (sin, cos) = slot.heading.sin_cos();
    let (dx, dy) = (pose.x - c.x, pose.y - c.y);
    AxisCoords {
        s: dx * cos + dy * sin,
        e: -dx * sin + dy * cos,
        phi: wrap_angle(pose.psi - slot.heading),
    }
}

/// Reverse-in feedback: steer so that the lateral offset and the heading
/// error decay together while backing along the slot axis. Always within
/// the vehicle bounds.
pub fn reverse_in_action(pose: &Pose2D, slot: &Slot, env: &ParkingEnv, cfg: &CorrectorConfig) -> Action {
    let veh = env.vehicle();
    let a = axis_coords(pose, slot);
    let speed = veh.max_speed;
    let phi_d = (cfg.k_lateral * a.e / speed).clamp(-0.5, 0.5).asin();
    let tan_delta = cfg.k_heading * veh.wheelbase * (a.phi - phi_d) / speed;
    Action::new(tan_delta.atan(), -speed).clamped(veh)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub actions: Vec<Action>,
    /// Number of leading actions before the vehicle is on the approach axis.
    pub aligned_at: usize,
    pub expansions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Outcome {
    Free(Pose2D),
    Arrived,
    Blocked,
}

/// One-step model of the environment's termination checks.
struct Sim<'a> {
    env: &'a ParkingEnv,
    slot: &'a Slot,
    /// Check every substep (as the environment does) instead of only the end pose.
    exact: bool,
    near: f64,
}

impl<'a> Sim<'a> {
    fn new(env: &'a ParkingEnv, slot: &'a Slot, exact: bool) -> Self {
        let veh = env.vehicle();
        let (lo, hi) = slot.polygon.bounding_box();
        let near = 0.5 * (hi.x - lo.x).hypot(hi.y - lo.y) + 0.5 * veh.length.hypot(veh.width);
        Self { env, slot, exact, near }
    }

    fn step(&self, pose: &Pose2D, action: Action) -> Outcome {
        let env = self.env;
        let cfg = env.config();
        let veh = env.vehicle();
        let subs = substep_rollout(pose, action.clamped(veh), cfg.dt, cfg.substeps, veh);
        let last = *subs.last().expect("at least one substep");
        let scene = env.scene();
        let hit = if self.exact {
            subs.iter().any(|p| scene.collides(&env.footprint(p)))
        } else {
            scene.collides(&env.footprint(&last)) || scene.collides(&env.footprint(&subs[subs.len() / 2]))
        };
        if hit {
            return Outcome::Blocked;
        }
        if vehicle_center(&last, veh).distance(self.slot.center()) < self.near {
            let iou = overlap_score(&env.footprint(&last), &self.slot.polygon).unwrap_or(0.0);
            if check_arrival(iou, heading_error(&last, self.slot), cfg) {
                return Outcome::Arrived;
            }
        }
        if check_oob(&last, self.slot, veh, cfg) {
            return Outcome::Blocked;
        }
        Outcome::Free(last)
    }

    /// Reverse-in rollout; the action list when it arrives within `budget` steps.
    fn reverse_in(&self, start: &Pose2D, budget: usize, cfg: &CorrectorConfig) -> Option<Vec<Action>> {
        let mut pose = *start;
        let mut out = Vec::new();
        while out.len() < budget {
            let a = reverse_in_action(&pose, self.slot, self.env, cfg);
            out.push(a);
            match self.step(&pose, a) {
                Outcome::Arrived => return Some(out),
                Outcome::Blocked => return None,
                Outcome::Free(p) => pose = p,
            }
        }
        None
    }

    /// Replays `actions` and reports whether the last one arrives.
    fn validate(&self, start: &Pose2D, actions: &[Action]) -> bool {
        let mut pose = *start;
        for (i, a) in actions.iter().enumerate() {
            match self.step(&pose, *a) {
                Outcome::Arrived => return i + 1 == actions.len(),
                Outcome::Blocked => return false,
                Outcome::Free(p) => pose = p,
            }
        }
        false
    }
}

struct Node {
    pose: Pose2D,
    steps: usize,
    g: f64,
    gear: i8,
    parent: usize,
    action: Action,
    len: usize,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    order: usize,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on f, FIFO on ties.
        o.f.total_cmp(&self.f).then_with(|| o.order.cmp(&self.order))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl CorrectorConfig {
    fn aligned(&self, a: &AxisCoords, entrance: f64) -> bool {
        a.e.abs() <= self.lateral_tol_m && a.phi.abs() <= self.heading_tol_rad && a.s >= entrance - 1.0
    }
}

/// Plans a maneuver that parks within `budget` steps from the current
/// environment state.
pub fn plan(env: &ParkingEnv, budget: usize, cfg: &CorrectorConfig) -> Option<Plan> {
    let state = env.state()?;
    if state.status.is_some() {
        return None;
    }
    let slot = &env.scene().slots[state.target_slot];
    let fast = search(env, slot, &state.pose, budget, cfg, false)?;
    let exact = Sim::new(env, slot, true);
    if exact.validate(&state.pose, &fast.actions) {
        return Some(fast);
    }
    // The coarse check missed a graze; search again with full checks.
    let plan = search(env, slot, &state.pose, budget, cfg, true)?;
    exact.validate(&state.pose, &plan.actions).then_some(plan)
}

fn search(
    env: &ParkingEnv,
    slot: &Slot,
    start: &Pose2D,
    budget: usize,
    cfg: &CorrectorConfig,
    exact: bool,
) -> Option<Plan> {
    let sim = Sim::new(env, slot, exact);
    let veh = env.vehicle();
    let step_len = veh.max_speed * env.config().dt;
    let turn_radius = veh.wheelbase / veh.max_steer.tan();
    let entrance = slot
        .polygon
        .vertices()
        .iter()
        .map(|p| (p.x - slot.center().x) * slot.heading.cos() + (p.y - slot.center().y) * slot.heading.sin())
        .fold(f64::NEG_INFINITY, f64::max);
    let target_s = entrance + 1.0;
    let heuristic = |p: &Pose2D| {
        let a = axis_coords(p, slot);
        ((a.s - target_s).hypot(a.e) + 0.5 * turn_radius * a.phi.abs()) / step_len
    };
    let bin = |p: &Pose2D, gear: i8| {
        let h = (wrap_angle(p.psi) + std::f64::consts::PI) / std::f64::consts::TAU * cfg.heading_bins as f64;
        (
            (p.x / cfg.cell_m).floor() as i64,
            (p.y / cfg.cell_m).floor() as i64,
            (h.floor() as i64).rem_euclid(cfg.heading_bins as i64),
            gear,
        )
    };
    let finish = |nodes: &[Node], at: usize, tail: Vec<Action>, expansions: usize| {
        let mut actions = Vec::new();
        let mut i = at;
        while i != 0 {
            actions.extend(std::iter::repeat_n(nodes[i].action, nodes[i].len));
            i = nodes[i].parent;
        }
        actions.reverse();
        let aligned_at = actions.len();
        actions.extend(tail);
        Plan {
            actions,
            aligned_at,
            expansions,
        }
    };

    let mut nodes = vec![Node {
        pose: *start,
        steps: 0,
        g: 0.0,
        gear: 0,
        parent: 0,
        action: Action::ZERO,
        len: 0,
    }];
    let mut open = BinaryHeap::new();
    let mut best: HashMap<(i64, i64, i64, i8), f64> = HashMap::new();
    let mut order = 0;
    open.push(Open {
        f: 0.0,
        order,
        node: 0,
    });
    let mut expansions = 0;
    while let Some(Open { node: idx, .. }) = open.pop() {
        let (pose, steps, g, gear) = {
            let n = &nodes[idx];
            (n.pose, n.steps, n.g, n.gear)
        };
        if cfg.aligned(&axis_coords(&pose, slot), entrance) {
            if let Some(tail) = sim.reverse_in(&pose, budget - steps, cfg) {
                return Some(finish(&nodes, idx, tail, expansions));
            }
        }
        expansions += 1;
        if expansions > cfg.max_expansions {
            return None;
        }
        for &dir in &[1i8, -1] {
            for &level in &cfg.steer_levels {
                let action = Action::new(level * veh.max_steer, dir as f64 * veh.max_speed);
                let mut p = pose;
                let mut len = 0;
                let mut arrived = false;
                let mut blocked = false;
                while len < cfg.primitive_steps && steps + len < budget {
                    len += 1;
                    match sim.step(&p, action) {
                        Outcome::Free(q) => p = q,
                        Outcome::Arrived => {
                            arrived = true;
                            break;
                        }
                        Outcome::Blocked => {
                            blocked = true;
                            break;
                        }
                    }
                }
                if blocked || len == 0 {
                    continue;
                }
                let switch = if gear != 0 && gear != dir { cfg.gear_change_cost } else { 0.0 };
                nodes.push(Node {
                    pose: p,
                    steps: steps + len,
                    g: g + len as f64 + switch,
                    gear: dir,
                    parent: idx,
                    action,
                    len,
                });
                let child = nodes.len() - 1;
                if arrived {
                    let mut plan = finish(&nodes, child, Vec::new(), expansions);
                    plan.aligned_at = plan.actions.len();
                    return Some(plan);
                }
                if steps + len >= budget {
                    continue;
                }
                let cg = nodes[child].g;
                match best.entry(bin(&p, dir)) {
                    Entry::Occupied(e) if *e.get() <= cg => continue,
                    Entry::Occupied(mut e) => {
                        e.insert(cg);
                    }
                    Entry::Vacant(e) => {
                        e.insert(cg);
                    }
                }
                order += 1;
                open.push(Open {
                    f: cg + cfg.heuristic_weight * heuristic(&p),
                    order,
                    node: child,
                });
            }
        }
    }
    None
}

/// Step budget of a correction attempt starting at the current state.
pub fn correction_budget(env: &ParkingEnv, correction_t_tol: u32) -> usize {
    let k = env.state().map_or(0, |s| s.step_index);
    let env_left = (env.config().t_tol + 1).saturating_sub(k);
    env_left.min(correction_t_tol) as usize
}

/// Intervenor that corrects every failure with a planned maneuver.
#[derive(Clone, Debug)]
pub struct ScriptedCorrector {
    pub config: CorrectorConfig,
    correction_t_tol: u32,
    plan: VecDeque<Action>,
    executed: usize,
    aligned_at: usize,
    infeasible: bool,
    /// Plans made and plans that failed, over the corrector's lifetime.
    pub planned: u64,
    pub infeasible_count: u64,
}

impl ScriptedCorrector {
    pub fn new(config: CorrectorConfig, correction_t_tol: u32) -> Self {
        Self {
            config,
            correction_t_tol,
            plan: VecDeque::new(),
            executed: 0,
            aligned_at: 0,
            infeasible: false,
            planned: 0,
            infeasible_count: 0,
        }
    }
}

impl Intervenor for ScriptedCorrector {
    fn poll_events(&mut self, ctx: &StepContext<'_>) -> Vec<OperatorEvent> {
        if ctx.phase != Phase::Correcting {
            return Vec::new();
        }
        if self.infeasible {
            return vec![OperatorEvent::Discard];
        }
        if self.config.release_on_alignment
            && self.executed == self.aligned_at
            && ctx.mode == parkcil_core::env::Mode::HumanCorr
        {
            return vec![OperatorEvent::ReleaseToRl];
        }
        Vec::new()
    }

    fn human_action(&mut self, ctx: &StepContext<'_>) -> Action {
        self.executed += 1;
        if let Some(a) = self.plan.pop_front() {
            return a;
        }
        let st = ctx.env.state().expect("correction runs on a live episode");
        let slot = &ctx.env.scene().slots[st.target_slot];
        reverse_in_action(&st.pose, slot, ctx.env, &self.config)
    }

    fn on_rollback(&mut self, ctx: &StepContext<'_>) {
        self.planned += 1;
        self.executed = 0;
        let budget = correction_budget(ctx.env, self.correction_t_tol);
        match plan(ctx.env, budget, &self.config) {
            Some(p) => {
                self.aligned_at = p.aligned_at;
                self.plan = p.actions.into();
                self.infeasible = false;
            }
            None => {
                self.plan.clear();
                self.infeasible = true;
                self.infeasible_count += 1;
            }
        }
    }

    /// A deterministic replan would repeat the rejected attempt.
    fn decide(&mut self, _ctx: &StepContext<'_>) -> OperatorEvent {
        OperatorEvent::Discard
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;
    use parkcil_core::env::{EnvConfig, Mode, RewardParams, TerminationStatus};
    use parkcil_core::geometry::Point;

    fn open_env() -> ParkingEnv {
        let s = Scenario::builtin("open-lot").unwrap();
        ParkingEnv::new(s.scene, s.vehicle, EnvConfig::default(), RewardParams::default())
    }

    /// Rear-axle pose with the given slot-frame coordinates.
    fn pose_at(env: &ParkingEnv, slot: usize, s: f64, e: f64, phi: f64) -> Pose2D {
        let sl = &env.scene().slots[slot];
        let c = sl.center();
        let u = Point::from_angle(sl.heading);
        let n = Point::from_angle(sl.heading + std::f64::consts::FRAC_PI_2);
        let p = c + u * s + n * e;
        Pose2D::new(p.x, p.y, sl.heading + phi)
    }

    fn execute(env: &mut ParkingEnv, actions: &[Action]) -> TerminationStatus {
        for a in actions {
            let t = env.step(*a, Mode::HumanCorr).unwrap();
            if let Some(s) = t.status {
                return s;
            }
        }
        panic!("plan ended without termination");
    }

    #[test]
    fn aligned_start_reverses_straight() {
        let mut env = open_env();
        let pose = pose_at(&env, 2, 4.0, 0.0, 0.0);
        env.reset_to_pose(2, pose, 0).unwrap();
        let p = plan(&env, 121, &CorrectorConfig::default()).unwrap();
        assert_eq!(p.aligned_at, 0);
        for a in &p.actions {
            assert!(a.delta.abs() < 1e-9 && a.v < 0.0, "{a:?}");
        }
        assert_eq!(execute(&mut env, &p.actions), TerminationStatus::Arrived);
    }

    #[test]
    fn canonical_offset_arrives_within_budget() {
        let mut env = open_env();
        for (e, phi) in [(2.0, 30f64), (-2.0, -30.0), (2.0, -30.0), (-2.0, 30.0)] {
            let pose = pose_at(&env, 2, 5.0, e, phi.to_radians());
            env.reset_to_pose(2, pose, 0).unwrap();
            let p = plan(&env, 121, &CorrectorConfig::default()).unwrap_or_else(|| panic!("no plan for {e} {phi}"));
            assert!(p.actions.len() <= 120, "{}", p.actions.len());
            assert_eq!(execute(&mut env, &p.actions), TerminationStatus::Arrived);
        }
    }

    #[test]
    fn random_starts_mostly_park_and_stay_in_bounds() {
        let mut env = open_env();
        let veh = *env.vehicle();
        let cfg = CorrectorConfig::default();
        let mut ok = 0;
        let n = 40;
        for seed in 0..n {
            env.reset((seed % 5) as usize, seed).unwrap();
            if let Some(p) = plan(&env, 121, &cfg) {
                for a in &p.actions {
                    assert!(a.delta.abs() <= veh.max_steer && a.v.abs() <= veh.max_speed);
                }
                assert_eq!(execute(&mut env, &p.actions), TerminationStatus::Arrived, "seed {seed}");
                ok += 1;
            }
        }
        assert!(ok >= n * 9 / 10, "{ok}/{n}");
    }

    #[test]
    fn feedback_law_respects_steering_bound() {
        let env = open_env();
        let slot = &env.scene().slots[0];
        let cfg = CorrectorConfig::default();
        for i in 0..200 {
            let t = i as f64 * 0.37;
            let pose = Pose2D::new(10.0 * t.sin(), 8.0 * (1.3 * t).cos(), 3.0 * (0.7 * t).sin());
            let a = reverse_in_action(&pose, slot, &env, &cfg);
            assert!(a.delta.abs() <= env.vehicle().max_steer && a.v < 0.0);
        }
    }

    #[test]
    fn empty_budget_is_infeasible() {
        let mut env = open_env();
        env.reset(0, 1).unwrap();
        assert!(plan(&env, 0, &CorrectorConfig::default()).is_none());
    }
}

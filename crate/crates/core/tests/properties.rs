//! Property tests across geometry, kinematics, the environment and the
//! replay notebook.

use std::f64::consts::PI;
use std::sync::Arc;

use parkcil_core::env::{EnvConfig, Mode, NamedPolygon, ParkingEnv, ParkingScene, RewardParams, Slot, Transition};
use parkcil_core::geometry::{footprint, overlap_score, wrap_angle, Point, Polygon, Pose2D};
use parkcil_core::replay::{NormalKind, Notebook, ReplayConfig};
use parkcil_core::vehicle::{inverse_kinematics, kinematic_step, substep_rollout, Action, VehicleParams};
use proptest::prelude::*;

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    Polygon::rectangle(Point::new(x0, y0), Point::new(x1, y1)).unwrap()
}

fn scene() -> Arc<ParkingScene> {
    let slot = |name: &str, x: f64| Slot {
        name: name.into(),
        polygon: rect(x - 1.4, -6.0, x + 1.4, -0.5),
        heading: PI / 2.0,
    };
    Arc::new(
        ParkingScene::new(
            "props",
            rect(-15.0, -6.0, 15.0, 10.0),
            vec![NamedPolygon {
                name: "car".into(),
                polygon: rect(2.0, -5.7, 3.9, -1.1),
            }],
            vec![slot("a", -2.8), slot("b", 0.0)],
            0.1,
        )
        .unwrap(),
    )
}

fn env() -> ParkingEnv {
    ParkingEnv::new(scene(), VehicleParams::default(), EnvConfig::default(), RewardParams::default())
}

fn pose() -> impl Strategy<Value = Pose2D> {
    (-30.0..30.0f64, -30.0..30.0f64, -PI..PI).prop_map(|(x, y, psi)| Pose2D::new(x, y, psi))
}

fn action() -> impl Strategy<Value = Action> {
    (-0.6..=0.6f64, -1.5..=1.5f64).prop_map(|(d, v)| Action::new(d, v))
}

proptest! {
    #[test]
    fn wrapped_angles_stay_in_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!((((a - w) / (2.0 * PI)).round() * 2.0 * PI - (a - w)).abs() < 1e-9);
    }

    #[test]
    fn axis_aligned_intersection_matches_interval_product(
        a in (-5.0..5.0f64, -5.0..5.0f64, 0.1..4.0f64, 0.1..4.0f64),
        b in (-5.0..5.0f64, -5.0..5.0f64, 0.1..4.0f64, 0.1..4.0f64),
    ) {
        let pa = rect(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let pb = rect(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let ix = ((a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0)).max(0.0);
        let iy = ((a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1)).max(0.0);
        prop_assert!((pa.intersection_area(&pb) - ix * iy).abs() < 1e-9);
        prop_assert!((pb.intersection_area(&pa) - ix * iy).abs() < 1e-9);
    }

    #[test]
    fn overlap_score_is_symmetric_and_bounded(p in pose(), q in pose()) {
        let v = VehicleParams::default();
        let a = footprint(&p, v.length, v.width, v.rear_overhang).unwrap();
        let b = footprint(&Pose2D::new(p.x + q.x / 10.0, p.y + q.y / 10.0, q.psi), v.length, v.width, v.rear_overhang).unwrap();
        let s = overlap_score(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - overlap_score(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((overlap_score(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((a.area() - v.length * v.width).abs() < 1e-9);
    }

    #[test]
    fn inverse_kinematics_recovers_the_action(p in pose(), a in action()) {
        prop_assume!(a.v.abs() >= 0.01);
        let v = VehicleParams::default();
        let next = kinematic_step(&p, a, 0.1, &v);
        let ik = inverse_kinematics(&p, &next, 0.1, &v);
        prop_assert!((ik.action.delta - a.delta).abs() <= 1e-3);
        prop_assert!((ik.action.v - a.v).abs() <= 1e-6);
        prop_assert!(!ik.residual_too_large);
    }

    #[test]
    fn rollout_is_repeated_euler_steps(p in pose(), a in action(), n in 1usize..20) {
        let v = VehicleParams::default();
        let subs = substep_rollout(&p, a, 0.1, n, &v);
        prop_assert_eq!(subs.len(), n);
        let mut cur = p;
        for s in &subs {
            cur = kinematic_step(&cur, a, 0.1 / n as f64, &v);
            prop_assert!(cur.bit_eq(s));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distance_field_is_normalized(x in -17.0..17.0f64, y in -8.0..12.0f64) {
        let s = scene();
        let d = s.esdf.query(Point::new(x, y));
        prop_assert!((0.0..=1.0).contains(&d));
        if (2.2..3.7).contains(&x) && (-5.5..-1.3).contains(&y) {
            prop_assert!(d < 0.15, "inside the parked car: {}", d);
        }
    }

    #[test]
    fn snapshot_restore_replays_bitwise(
        seed in any::<u64>(),
        slot in 0usize..2,
        warm in prop::collection::vec(action(), 0..15),
        tail in prop::collection::vec(action(), 1..30),
    ) {
        let mut e = env();
        e.reset(slot, seed).unwrap();
        for a in warm {
            if e.is_terminated() { break; }
            e.step(a, Mode::Rl).unwrap();
        }
        prop_assume!(!e.is_terminated());
        let snap = e.snapshot().unwrap();
        let mut first = Vec::new();
        for a in &tail {
            if e.is_terminated() { break; }
            first.push(e.step(*a, Mode::Rl).unwrap());
        }
        e.restore(&snap).unwrap();
        prop_assert!(e.snapshot().unwrap().bit_eq(&snap));
        for (a, t) in tail.iter().zip(&first) {
            let again = e.step(*a, Mode::Rl).unwrap();
            prop_assert!(again.bit_eq(t));
        }
    }

    #[test]
    fn resets_are_seeded(seed in any::<u64>(), slot in 0usize..2) {
        let (mut a, mut b) = (env(), env());
        let oa = a.reset(slot, seed).unwrap();
        let ob = b.reset(slot, seed).unwrap();
        prop_assert!(oa.bit_eq(&ob));
        let st = a.state().unwrap();
        prop_assert_eq!(st.step_index, 0);
        prop_assert!(st.status.is_none());
    }

    #[test]
    fn notebook_bytes_round_trip(
        seed in any::<u64>(),
        n_rl in 0usize..20,
        n_human in 0usize..10,
        regions in prop::collection::vec((1usize..6, 0usize..4, 0usize..4), 0..4),
    ) {
        let mut e = env();
        e.reset(0, seed).unwrap();
        let mut gen = |mode: Mode| -> Transition {
            if e.is_terminated() {
                e.reset(0, seed.wrapping_add(1)).unwrap();
            }
            e.step(Action::new(0.1, -0.5), mode).unwrap()
        };
        let mut nb = Notebook::new(ReplayConfig::default());
        for _ in 0..n_rl {
            let t = gen(Mode::Rl);
            nb.push_normal(t, NormalKind::Rl).unwrap();
        }
        for _ in 0..n_human {
            let t = gen(Mode::Human);
            nb.push_normal(t, NormalKind::Human).unwrap();
        }
        for (i, (f, fr, fh)) in regions.into_iter().enumerate() {
            let fail = (0..f).map(|_| gen(Mode::Rl)).collect();
            let fix_rl: Vec<_> = (0..fr).map(|_| gen(Mode::RlCorr)).collect();
            let mut fix_human: Vec<_> = (0..fh).map(|_| gen(Mode::HumanCorr)).collect();
            if fix_rl.is_empty() && fix_human.is_empty() {
                fix_human.push(gen(Mode::HumanCorr));
            }
            nb.commit_region(i as u64, fail, fix_human, fix_rl).unwrap();
        }
        let back = Notebook::from_bytes(&nb.to_bytes()).unwrap();
        prop_assert_eq!(back.rl().len(), nb.rl().len());
        prop_assert_eq!(back.human().len(), nb.human().len());
        prop_assert_eq!(back.regions().len(), nb.regions().len());
        prop_assert!(back.rl().iter().zip(nb.rl()).all(|(a, b)| a.bit_eq(b)));
        prop_assert!(back.human().iter().zip(nb.human()).all(|(a, b)| a.bit_eq(b)));
        for (a, b) in back.regions().iter().zip(nb.regions()) {
            prop_assert_eq!(a.episode, b.episode);
            prop_assert!(a.fail_rl.iter().zip(&b.fail_rl).all(|(x, y)| x.bit_eq(y)));
            prop_assert!(a.fix_human.iter().zip(&b.fix_human).all(|(x, y)| x.bit_eq(y)));
            prop_assert!(a.fix_rl.iter().zip(&b.fix_rl).all(|(x, y)| x.bit_eq(y)));
        }
        prop_assert_eq!(back.p_normal(), nb.p_normal());
    }
}

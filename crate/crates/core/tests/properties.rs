use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racelab::controllers::{BaseController, FtgConfig, MapGridSpec, MapLookupTable, PurePursuitConfig};
use racelab::env::{update_safety_filter, FilterEvent, SafetyFilterState};
use racelab::experiment::ExperimentConfig;
use racelab::nn::Mlp;
use racelab::plant::{integrate, lateral_tire_force, speed_tracking_accel, step, steer_toward, ControlInput, TirePreset, VehicleParams, VehicleState, GRAVITY};
use racelab::sac::{ReplayBuffer, SacConfig, SacLearner, Transition};
use racelab::track::{bundled, shapes, wrap_angle, FrenetPose, Track};

fn c_like() -> &'static Track {
    static T: OnceLock<Track> = OnceLock::new();
    T.get_or_init(bundled::c_like)
}

fn y_like() -> &'static Track {
    static T: OnceLock<Track> = OnceLock::new();
    T.get_or_init(bundled::y_like)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn frenet_round_trip(which in 0..2usize, u in 0.0..1.0f64, side in -0.95..0.95f64, mu in -1.5..1.5f64) {
        let track = [c_like(), y_like()][which];
        let s = u * track.total_length();
        let (wl, wr) = track.widths_at(s);
        let n = if side >= 0.0 { side * wl } else { side * wr };
        let (x, y, psi) = track.frenet_to_global(FrenetPose::new(s, n, mu));
        let back = track.global_to_frenet(x, y, psi, None).unwrap();
        let (x2, y2, psi2) = track.frenet_to_global(back);
        prop_assert!((x2 - x).hypot(y2 - y) < 1e-3);
        prop_assert!(wrap_angle(psi2 - psi).abs() < 1e-3);
    }

    #[test]
    fn progress_is_antisymmetric(a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let t = c_like();
        let (a, b) = (a * t.total_length(), b * t.total_length());
        prop_assert_eq!(t.progress_delta(a, b), -t.progress_delta(b, a));
    }

    #[test]
    fn rays_grow_with_max_range(u in 0.0..1.0f64, n in -0.5..0.5f64, mu in -0.8..0.8f64, r1 in 0.5..8.0f64, extra in 0.0..8.0f64) {
        let t = y_like();
        let (x, y, h) = t.frenet_to_global(FrenetPose::new(u * t.total_length(), n, mu));
        let short = t.cast_rays(x, y, h, 4.7, 27, r1);
        let long = t.cast_rays(x, y, h, 4.7, 27, r1 + extra);
        prop_assert!(short.iter().zip(&long).all(|(s, l)| l >= s));
        prop_assert!(short.iter().all(|&s| s <= r1));
    }

    #[test]
    fn tire_force_is_odd_and_bounded(alpha in -1.5..1.5f64, turbo in any::<bool>()) {
        let p = VehicleParams::with_preset(if turbo { TirePreset::Turbo } else { TirePreset::Tpu });
        for c in [p.pacejka_front, p.pacejka_rear] {
            let f = lateral_tire_force(&c, p.mu_friction, alpha);
            prop_assert_eq!(f, -lateral_tire_force(&c, p.mu_friction, -alpha));
            prop_assert!(f.abs() <= p.mu_friction * c.f_z * c.d + 1e-12);
        }
    }

    #[test]
    fn actuators_stay_in_range(delta_cmd in -2.0..2.0f64, v_cmd in -5.0..30.0f64, v0 in 0.5..8.0f64) {
        let p = VehicleParams::default();
        let track = shapes::circle(6.0, 300, 1.5);
        let mut x = VehicleState::at(0.0, v0);
        for _ in 0..200 {
            match step(&x, ControlInput::new(delta_cmd, v_cmd), &p, &track, 1.0 / 400.0) {
                Ok(next) => x = next,
                Err(_) => break,
            }
            prop_assert!(x.delta.abs() <= p.delta_max + 1e-12);
            prop_assert!(x.v_x <= p.v_max + 1e-9);
        }
    }

    #[test]
    fn mirrored_states_mirror_on_a_straight(n in -0.5..0.5f64, mu in -0.3..0.3f64, v_y in -0.3..0.3f64, r in -1.0..1.0f64, delta in -0.3..0.3f64, cmd in -0.4..0.4f64) {
        let p = VehicleParams::default();
        let dt = 1.0 / 400.0;
        let advance = |x: &VehicleState, cmd: f64| {
            let d = steer_toward(x.delta, cmd, &p, dt);
            let a = speed_tracking_accel(3.0, x.v_x, &p);
            integrate(&VehicleState { delta: d, ..*x }, a, d, &p, |_| 0.0, dt).unwrap()
        };
        let mut a = VehicleState { s: 1.0, n, mu, v_x: 3.0, v_y, r, delta };
        let mut b = VehicleState { s: 1.0, n: -n, mu: -mu, v_x: 3.0, v_y: -v_y, r: -r, delta: -delta };
        for _ in 0..200 {
            a = advance(&a, cmd);
            b = advance(&b, -cmd);
            prop_assert_eq!((a.s, a.v_x), (b.s, b.v_x));
            prop_assert_eq!((a.n, a.mu, a.v_y, a.r, a.delta), (-b.n, -b.mu, -b.v_y, -b.r, -b.delta));
        }
    }

    #[test]
    fn controllers_respect_command_ranges(which in 0..2usize, u in 0.0..1.0f64, n in -0.6..0.6f64, mu in -0.6..0.6f64, v in 0.0..9.0f64) {
        let t = [c_like(), y_like()][which];
        let state = VehicleState { s: u * t.total_length(), n, mu, v_x: v, ..Default::default() };
        for c in controllers() {
            let cmd = c.command(&state, t);
            prop_assert!(cmd.delta_cmd.abs() <= 0.42 + 1e-12);
            prop_assert!((0.0..=10.0).contains(&cmd.v_cmd));
            prop_assert_eq!(cmd, c.command(&state, t));
        }
    }

    #[test]
    fn safety_filter_stays_in_range(events in proptest::collection::vec(any::<bool>(), 0..200)) {
        let mut sf = SafetyFilterState::default();
        for clean in events {
            let before = sf.psi_filter;
            sf = update_safety_filter(sf, if clean { FilterEvent::LapCompleted } else { FilterEvent::BoundaryViolation });
            prop_assert!((FRAC_PI_6..=FRAC_PI_2).contains(&sf.psi_filter));
            prop_assert!((sf.psi_filter - before).abs() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn hdra_edits_only_the_terminating_episode(lens in proptest::collection::vec(1..25usize, 1..12), steps in 1..15usize) {
        let mut buf = ReplayBuffer::new(10_000, 1, 1);
        let mut edited_total = 0;
        for (ep, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let terminal = i + 1 == len && ep % 2 == 0;
                buf.push(Transition { obs: vec![0.0], action: vec![0.0], reward: if terminal { 0.0 } else { 1.0 },
                    next_obs: vec![0.0], terminal, episode_id: ep as u64 });
            }
            if ep % 2 == 0 {
                let edited = buf.apply_hdra(buf.pushed() - 1, steps, 10.0);
                prop_assert_eq!(edited, steps.min(len));
                edited_total += edited;
            }
        }
        let changed = buf.rewards_in_order().iter().filter(|&&r| r != 1.0).count();
        prop_assert_eq!(changed, edited_total);
        let mut start = 0;
        for (ep, &len) in lens.iter().enumerate() {
            let rewards: Vec<f64> = (start..start + len).map(|i| buf.reward(i as u64).unwrap()).collect();
            if ep % 2 == 1 {
                prop_assert!(rewards.iter().all(|&r| r == 1.0));
            }
            start += len;
        }
    }
}

fn controllers() -> &'static [BaseController] {
    static C: OnceLock<Vec<BaseController>> = OnceLock::new();
    C.get_or_init(|| {
        let p = VehicleParams::default();
        vec![
            BaseController::PurePursuit(PurePursuitConfig::default()),
            BaseController::Map(Box::new(MapLookupTable::build(&p, &MapGridSpec::default())), PurePursuitConfig::default()),
            BaseController::FollowTheGap(FtgConfig::default()),
        ]
    })
}

#[test]
fn velocity_profile_respects_both_limits() {
    let p = VehicleParams::default();
    for t in [c_like(), y_like()] {
        let mu = 0.8 * p.mu_friction;
        let v = t.generate_velocity_profile(mu, GRAVITY, p.a_long_max, p.v_max);
        let n = v.len();
        for i in 0..n {
            let k = t.curvature()[i].abs();
            assert!(v[i] * v[i] * k <= mu * GRAVITY * (1.0 + 1e-9), "lateral limit at {i}");
            assert!(v[i] <= p.v_max + 1e-12);
            let j = (i + 1) % n;
            let dv2 = (v[j] * v[j] - v[i] * v[i]).abs();
            assert!(dv2 <= 2.0 * p.a_long_max * t.segment_lengths()[i] * (1.0 + 1e-9), "longitudinal limit at {i}");
        }
    }
}

#[test]
fn coasting_decays_monotonically() {
    let p = VehicleParams::default();
    let track = shapes::stadium(200.0, 5.0, 0.1, 2.0);
    let mut x = VehicleState::at(1.0, 5.0);
    for _ in 0..4000 {
        let next = step(&x, ControlInput::new(0.0, 0.0), &p, &track, 1.0 / 400.0).unwrap();
        assert!(next.v_x <= x.v_x);
        x = next;
    }
    assert!(x.v_x < 0.05, "still at {}", x.v_x);
}

#[test]
fn observations_are_mostly_normalized() {
    let cfg = ExperimentConfig::default();
    let mut env = cfg.build_env(cfg.load_track().unwrap(), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut obs = env.reset(3);
    let (mut inside, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        inside += obs.iter().filter(|x| x.abs() <= 1.5).count();
        total += obs.len();
        let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = env.step(env.action_box().denormalize(a));
        obs = if r.terminal { env.run_recovery().0 } else { r.observation };
    }
    let share = inside as f64 / total as f64;
    assert!(share >= 0.99, "{share}");
}

#[test]
fn actor_parameter_count() {
    let net = Mlp::zeros(&[129, 256, 256, 4]);
    let expected = (129 * 256 + 256) + (256 * 256 + 256) + 2 * (256 * 2 + 2);
    assert_eq!(net.param_count(), expected);
}

#[test]
fn updates_are_deterministic() {
    let fill = || {
        let mut buf = ReplayBuffer::new(500, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..300 {
            let v = |rng: &mut ChaCha8Rng, d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            buf.push(Transition { obs: v(&mut rng, 5), action: v(&mut rng, 2), reward: rng.random_range(-1.0..1.0),
                next_obs: v(&mut rng, 5), terminal: i % 50 == 49, episode_id: i / 50 });
        }
        buf
    };
    let run = || {
        let buf = fill();
        let cfg = SacConfig { hidden: vec![16, 16], batch_size: 16, ..Default::default() };
        let mut l = SacLearner::new(cfg, 5, 2, 21).unwrap();
        (0..30).map(|_| {
            l.update(&buf).unwrap();
            l.checksum()
        }).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_minutes_follow_env_steps() {
    let mut cfg = ExperimentConfig::default();
    cfg.sac.hidden_size = 8;
    cfg.sac.batch_size = 8;
    cfg.budget_steps = 450;
    let out = racelab::experiment::train(&cfg).unwrap();
    assert_eq!(out.report.sim_minutes, 450.0 / 10.0 / 60.0);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MetaAction, Scenario};

pub const LANE_WIDTH: f64 = 4.0;
/// Duration of a lateral nudge and its lateral displacement.
const NUDGE_TIME: f64 = 2.0;
const NUDGE_SHIFT: f64 = 1.0;
const CRUISE_ACCEL: f64 = 1.0;
const BRAKE_DECEL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Ego {
    pub pos: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marking {
    Solid,
    Dashed,
}

/// A lane as a centerline polyline plus width and boundary markings.
/// "Left" is +y when walking the polyline in +x.
#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub points: Vec<[f64; 2]>,
    pub width: f64,
    pub left: Marking,
    pub right: Marking,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObstacleKind {
    Vehicle,
    Pedestrian,
    Cone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub kind: ObstacleKind,
}

/// Scripted ego motion, anchored at the moment the decision was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub action: MetaAction,
    pub accel: f64,
    pub target_speed: f64,
    pub lateral_shift: f64,
    pub start_pos: [f64; 2],
    pub start_speed: f64,
    /// Seconds since `start_pos`.
    pub elapsed: f64,
}

/// World coordinates: x forward along the road, y to the left, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scenario: Scenario,
    pub ego: Ego,
    pub lanes: Vec<Lane>,
    pub obstacles: Vec<Obstacle>,
    pub rng_seed: u64,
    pub speed_limit: f64,
    /// Longitudinal acceleration over the last 1.5 s, for the history text.
    pub past_accel: f64,
    pub time: f64,
    pub plan: Plan,
}

fn r1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn three_lane_road() -> Vec<Lane> {
    let line = |y: f64| vec![[-60.0, y], [160.0, y]];
    vec![
        Lane {
            points: line(-LANE_WIDTH),
            width: LANE_WIDTH,
            left: Marking::Dashed,
            right: Marking::Solid,
        },
        Lane {
            points: line(0.0),
            width: LANE_WIDTH,
            left: Marking::Dashed,
            right: Marking::Dashed,
        },
        Lane {
            points: line(LANE_WIDTH),
            width: LANE_WIDTH,
            left: Marking::Solid,
            right: Marking::Dashed,
        },
    ]
}

fn vehicle(x: f64, y: f64, vx: f64, vy: f64) -> Obstacle {
    Obstacle {
        pos: [x, y],
        vel: [vx, vy],
        kind: ObstacleKind::Vehicle,
    }
}

/// Builds a scene for `scenario`. Every random draw comes from `seed`, so the
/// result is a pure function of its arguments.
pub fn generate_scene(seed: u64, scenario: Scenario) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles = Vec::new();
    let mut speed_limit = rng.gen_range(5..=7) as f64;
    let v0;
    match scenario {
        Scenario::Straight => {
            v0 = if rng.gen_bool(0.5) {
                r1(rng.gen_range(2.0..=speed_limit - 1.5))
            } else {
                r1(rng.gen_range(speed_limit - 0.5..=speed_limit))
            };
            if rng.gen_bool(0.5) {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                obstacles.push(Obstacle {
                    pos: [r1(rng.gen_range(5.0..25.0)), side * r1(rng.gen_range(7.5..9.0))],
                    vel: [dir * r1(rng.gen_range(0.5..1.5)), 0.0],
                    kind: ObstacleKind::Pedestrian,
                });
            }
        }
        Scenario::SlowLead => {
            v0 = r1(rng.gen_range(3.0..=6.0));
            let (stop_gap, slow_gap) = gap_thresholds(v0);
            let (gap, speed) = match rng.gen_range(0..3) {
                0 => (rng.gen_range(6.0..=stop_gap - 1.5), 0.0),
                1 => (
                    rng.gen_range(stop_gap + 1.5..=slow_gap - 1.5),
                    v0 * rng.gen_range(0.3..0.6),
                ),
                _ => (
                    rng.gen_range(slow_gap + 1.5..=27.0),
                    v0 * rng.gen_range(0.9..1.0),
                ),
            };
            obstacles.push(vehicle(r1(gap), 0.0, r1(speed), 0.0));
        }
        Scenario::CutIn => {
            v0 = r1(rng.gen_range(3.0..=6.0));
            let (_, slow_gap) = gap_thresholds(v0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let d = if rng.gen_bool(0.5) {
                rng.gen_range(6.0..=slow_gap - 1.5)
            } else {
                rng.gen_range(slow_gap + 1.5..=27.0)
            };
            let lat = side * r1(rng.gen_range(2.5..=3.5));
            obstacles.push(vehicle(r1(d), lat, r1(v0 * rng.gen_range(0.7..0.9)), -side * 0.8));
        }
        Scenario::WorkzoneTaper => {
            v0 = r1(rng.gen_range(2.0..=6.0));
            speed_limit = speed_limit.min(6.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start = r1(rng.gen_range(8.0..=14.0));
            for i in 0..6 {
                obstacles.push(Obstacle {
                    pos: [start + 2.0 * i as f64, side * r1(2.0 - 0.3 * i as f64)],
                    vel: [0.0, 0.0],
                    kind: ObstacleKind::Cone,
                });
            }
        }
    }
    let past_accel = r1(rng.gen_range(-0.4..=0.4)) + 0.0;
    let mut scene = Scene {
        scenario,
        ego: Ego {
            pos: [0.0, 0.0],
            heading: 0.0,
            speed: v0,
            accel: 0.0,
        },
        lanes: three_lane_road(),
        obstacles,
        rng_seed: seed,
        speed_limit,
        past_accel,
        time: 0.0,
        plan: Plan {
            action: MetaAction::MaintainKeepLane,
            accel: 0.0,
            target_speed: v0,
            lateral_shift: 0.0,
            start_pos: [0.0, 0.0],
            start_speed: v0,
            elapsed: 0.0,
        },
    };
    scene.plan = plan_for(&scene, decide(&scene));
    scene.ego = ego_at(&scene.plan, 0.0);
    scene
}

/// Gap below which the ego stops, and below which it slows down.
fn gap_thresholds(v: f64) -> (f64, f64) {
    (v + 6.0, 2.0 * v + 10.0)
}

/// The scripted driving policy: which meta-action the current scene calls for.
pub fn decide(scene: &Scene) -> MetaAction {
    let v = scene.ego.speed;
    let ex = scene.ego.pos[0];
    let ey = scene.ego.pos[1];
    let (stop_gap, slow_gap) = gap_thresholds(v);
    let ahead = |k: ObstacleKind, max_lat: f64| {
        scene
            .obstacles
            .iter()
            .filter(|o| o.kind == k && o.pos[0] > ex && (o.pos[1] - ey).abs() < max_lat)
            .map(|o| o.pos[0] - ex)
            .fold(f64::INFINITY, f64::min)
    };
    match scene.scenario {
        Scenario::Straight => {
            if v < scene.speed_limit - 1.0 {
                MetaAction::AccelerateKeepLane
            } else {
                MetaAction::MaintainKeepLane
            }
        }
        Scenario::SlowLead => {
            let gap = ahead(ObstacleKind::Vehicle, 1.0);
            if gap < stop_gap {
                MetaAction::Stop
            } else if gap < slow_gap {
                MetaAction::DecelerateKeepLane
            } else {
                MetaAction::MaintainKeepLane
            }
        }
        Scenario::CutIn => {
            if ahead(ObstacleKind::Vehicle, LANE_WIDTH) < slow_gap {
                MetaAction::DecelerateKeepLane
            } else {
                MetaAction::MaintainKeepLane
            }
        }
        Scenario::WorkzoneTaper => {
            let lat: f64 = scene
                .obstacles
                .iter()
                .filter(|o| o.kind == ObstacleKind::Cone)
                .map(|o| o.pos[1] - ey)
                .sum();
            if lat < 0.0 {
                MetaAction::MaintainNudgeLeft
            } else {
                MetaAction::MaintainNudgeRight
            }
        }
    }
}

fn plan_for(scene: &Scene, action: MetaAction) -> Plan {
    let v0 = scene.ego.speed;
    let (accel, target, shift) = match action {
        MetaAction::MaintainKeepLane => (0.0, v0, 0.0),
        MetaAction::AccelerateKeepLane => (CRUISE_ACCEL, scene.speed_limit.max(v0), 0.0),
        MetaAction::DecelerateKeepLane => (-BRAKE_DECEL, 0.0, 0.0),
        MetaAction::Stop => {
            let gap = scene
                .obstacles
                .iter()
                .filter(|o| o.pos[0] > scene.ego.pos[0])
                .map(|o| o.pos[0] - scene.ego.pos[0])
                .fold(f64::INFINITY, f64::min);
            let room = (gap - 5.0).max(1.0);
            (-(v0 * v0 / (2.0 * room)).max(BRAKE_DECEL), 0.0, 0.0)
        }
        MetaAction::MaintainNudgeLeft => (0.0, v0, NUDGE_SHIFT),
        MetaAction::MaintainNudgeRight => (0.0, v0, -NUDGE_SHIFT),
    };
    Plan {
        action,
        accel,
        target_speed: target,
        lateral_shift: shift,
        start_pos: scene.ego.pos,
        start_speed: v0,
        elapsed: 0.0,
    }
}

fn smoothstep(u: f64) -> (f64, f64) {
    let u = u.clamp(0.0, 1.0);
    (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u))
}

/// Ego state `tau` seconds after the plan started.
fn ego_at(plan: &Plan, tau: f64) -> Ego {
    let (v0, a, vt) = (plan.start_speed, plan.accel, plan.target_speed);
    let (x, v, acc) = if a == 0.0 {
        (v0 * tau, v0, 0.0)
    } else {
        let tc = ((vt - v0) / a).max(0.0);
        if tau < tc {
            (v0 * tau + 0.5 * a * tau * tau, v0 + a * tau, a)
        } else {
            (v0 * tc + 0.5 * a * tc * tc + vt * (tau - tc), vt, 0.0)
        }
    };
    let (s, ds) = smoothstep(tau / NUDGE_TIME);
    let y = plan.lateral_shift * s;
    let vy = plan.lateral_shift * ds / NUDGE_TIME;
    Ego {
        pos: [plan.start_pos[0] + x, plan.start_pos[1] + y],
        heading: if v == 0.0 && vy == 0.0 { 0.0 } else { vy.atan2(v) },
        speed: v,
        accel: acc,
    }
}

/// States at `dt, 2·dt, …, steps·dt` after `scene`. The ego follows the
/// scene's plan; obstacles move at constant velocity.
pub fn roll_forward(scene: &Scene, dt: f64, steps: usize) -> Vec<Scene> {
    assert!(dt > 0.0, "dt must be positive");
    (1..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let mut s = scene.clone();
            s.plan.elapsed = scene.plan.elapsed + t;
            s.ego = ego_at(&s.plan, s.plan.elapsed);
            s.time = scene.time + t;
            for o in &mut s.obstacles {
                o.pos = [o.pos[0] + o.vel[0] * t, o.pos[1] + o.vel[1] * t];
            }
            s
        })
        .collect()
}

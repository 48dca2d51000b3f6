use super::scene::{ObstacleKind, Scene};
use super::{MetaAction, Scenario};

const DECISION_LEAD: &str = "the ego should ";

/// One decimal, never "-0.0".
fn num(x: f64) -> String {
    format!("{:.1}", (x * 10.0).round() / 10.0 + 0.0)
}

fn side(dy: f64) -> &'static str {
    if dy < 0.0 {
        "right"
    } else {
        "left"
    }
}

/// Navigation command, speed limit, current motion and the last 1.5 s of
/// longitudinal history, all in the tokenizer's grammar.
pub fn ego_state_text(scene: &Scene) -> String {
    let v = scene.ego.speed;
    let a = scene.past_accel;
    let hist: Vec<String> = [0.5, 1.0, 1.5]
        .iter()
        .map(|&t| num(-(v * t - 0.5 * a * t * t)))
        .collect();
    format!(
        "command: move forward. speed limit: {}. velocity: {}. acceleration: {}. history: {}.",
        scene.speed_limit as i64,
        num(v),
        num(a),
        hist.join(", ")
    )
}

fn attention(kind: &str, dx: f64, dy: f64) -> String {
    format!(
        "i should pay more attention to a {kind}, located {} meters ahead of ego vehicle and {} meters to the {}.",
        num(dx),
        num(dy.abs()),
        side(dy)
    )
}

/// Templated reasoning for a scene whose plan produced `outcome`.
/// The decision sentence is always last and is the only one starting with
/// "the ego should".
pub fn render_cot(scene: &Scene, outcome: MetaAction) -> (String, MetaAction) {
    let v = scene.ego.speed;
    let mut parts = vec![
        "the ego vehicle is driving in the middle lane of a three lane road.".to_string(),
        format!(
            "the speed limit is {} meters per second and the ego is moving at {} meters per second.",
            scene.speed_limit as i64,
            num(v)
        ),
    ];
    let [ex, ey] = scene.ego.pos;
    let first = |k: ObstacleKind| scene.obstacles.iter().find(|o| o.kind == k);
    match scene.scenario {
        Scenario::Straight => {
            if let Some(p) = first(ObstacleKind::Pedestrian) {
                parts.push(attention("pedestrian", p.pos[0] - ex, p.pos[1] - ey));
                parts.push("it is walking on the sidewalk and does not block the lane.".into());
            } else {
                parts.push(
                    "the road ahead is clear. there are no vehicles or pedestrians that would require braking."
                        .into(),
                );
            }
            parts.push(match outcome {
                MetaAction::AccelerateKeepLane => "the ego is slower than the speed limit allows.".into(),
                _ => "the ego is close to the speed limit.".into(),
            });
        }
        Scenario::SlowLead => {
            if let Some(o) = first(ObstacleKind::Vehicle) {
                parts.push(attention("vehicle", o.pos[0] - ex, o.pos[1] - ey));
                let state = if o.vel[0] == 0.0 {
                    "stationary"
                } else if o.vel[0] < 0.7 * v {
                    "moving slowly"
                } else {
                    "moving steadily"
                };
                parts.push(format!(
                    "it is driving forward in the same direction, and its motion state is {state}."
                ));
            }
            parts.push(match outcome {
                MetaAction::Stop => "the gap is too short, so i need to come to a stop behind it.".into(),
                MetaAction::DecelerateKeepLane => "the gap is closing, so i need to slow down.".into(),
                _ => "the gap is large enough to keep the current speed.".into(),
            });
        }
        Scenario::CutIn => {
            if let Some(o) = first(ObstacleKind::Vehicle) {
                parts.push(attention("vehicle", o.pos[0] - ex, o.pos[1] - ey));
                parts.push("it is changing lanes and cutting into the ego lane.".into());
            }
            parts.push(match outcome {
                MetaAction::DecelerateKeepLane => "it is close, so i need to slow down.".into(),
                _ => "it is far enough ahead to keep the current speed.".into(),
            });
        }
        Scenario::WorkzoneTaper => {
            let cones: Vec<_> = scene
                .obstacles
                .iter()
                .filter(|o| o.kind == ObstacleKind::Cone)
                .collect();
            let start = cones.iter().map(|o| o.pos[0] - ex).fold(f64::INFINITY, f64::min);
            let lat: f64 = cones.iter().map(|o| o.pos[1] - ey).sum();
            let away = if lat < 0.0 { "left" } else { "right" };
            parts.push(format!(
                "there is a work zone with traffic cones on the {} side of the ego lane, starting {} meters ahead.",
                side(lat),
                num(start)
            ));
            parts.push(format!(
                "the cones narrow the lane, so i need to drive slightly to the {away}."
            ));
        }
    }
    parts.push(format!(
        "based on the understanding of the driving scene and the navigation information, {DECISION_LEAD}{}.",
        outcome.clause()
    ));
    (parts.join(" "), outcome)
}

/// Finds the last "the ego should …" clause. `None` means the clause is
/// missing or does not name one of the six meta-actions.
pub fn extract_meta_action(text: &str) -> Option<MetaAction> {
    let at = text.rfind(DECISION_LEAD)?;
    let rest = &text[at + DECISION_LEAD.len()..];
    let clause = rest.split('.').next().unwrap_or("").trim();
    MetaAction::ALL.into_iter().find(|m| m.clause() == clause)
}

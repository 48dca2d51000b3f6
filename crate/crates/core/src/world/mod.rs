//! Deterministic top-down driving world: scenes, kinematics, rasters,
//! templated reasoning text and the persisted dataset.

mod cot;
mod dataset;
mod raster;
mod scene;

pub use cot::{ego_state_text, extract_meta_action, render_cot};
pub use dataset::{
    build_dataset, make_sample, read_samples, write_samples, Dataset, Sample, SplitRatio,
};
pub use raster::{rasterize, Raster, ANCHOR_FROM_BOTTOM};
pub use scene::{
    decide, generate_scene, roll_forward, Ego, Lane, Marking, Obstacle, ObstacleKind, Plan, Scene,
    LANE_WIDTH,
};

use serde::{Deserialize, Serialize};

/// Cell classes of a raster.
pub const EMPTY: u8 = 0;
pub const LANE: u8 = 1;
pub const EGO: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const PEDESTRIAN: u8 = 4;
pub const CONE: u8 = 5;
pub const N_CLASSES: usize = 6;

/// Waypoint spacing and count of the predicted trajectory.
pub const WAYPOINT_DT: f64 = 0.5;
pub const N_WAYPOINTS: usize = 8;
/// Horizons of the two future frames, in seconds.
pub const FUTURE_HORIZONS: [f64; 2] = [0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Straight,
    SlowLead,
    CutIn,
    WorkzoneTaper,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Straight,
        Scenario::SlowLead,
        Scenario::CutIn,
        Scenario::WorkzoneTaper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Straight => "straight",
            Scenario::SlowLead => "slow_lead",
            Scenario::CutIn => "cut_in",
            Scenario::WorkzoneTaper => "workzone_taper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaAction {
    MaintainKeepLane,
    DecelerateKeepLane,
    AccelerateKeepLane,
    MaintainNudgeLeft,
    MaintainNudgeRight,
    Stop,
}

impl MetaAction {
    pub const ALL: [MetaAction; 6] = [
        MetaAction::MaintainKeepLane,
        MetaAction::DecelerateKeepLane,
        MetaAction::AccelerateKeepLane,
        MetaAction::MaintainNudgeLeft,
        MetaAction::MaintainNudgeRight,
        MetaAction::Stop,
    ];

    /// The words following "the ego should" in a reasoning text.
    pub fn clause(self) -> &'static str {
        match self {
            MetaAction::MaintainKeepLane => "maintain speed and keep lane",
            MetaAction::DecelerateKeepLane => "decelerate and keep lane",
            MetaAction::AccelerateKeepLane => "accelerate and keep lane",
            MetaAction::MaintainNudgeLeft => "maintain speed and nudge left",
            MetaAction::MaintainNudgeRight => "maintain speed and nudge right",
            MetaAction::Stop => "stop",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaAction::MaintainKeepLane => "maintain_keep_lane",
            MetaAction::DecelerateKeepLane => "decelerate_keep_lane",
            MetaAction::AccelerateKeepLane => "accelerate_keep_lane",
            MetaAction::MaintainNudgeLeft => "maintain_nudge_left",
            MetaAction::MaintainNudgeRight => "maintain_nudge_right",
            MetaAction::Stop => "stop",
        }
    }
}

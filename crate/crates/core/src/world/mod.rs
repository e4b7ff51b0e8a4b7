//! Synthetic scenes with closed-form ground truth.
//!
//! Driving scenes come in four archetypes (straight, left turn, right turn,
//! stop at a line). Every sample is a pure function of its seed. The raster
//! encodes everything the trajectory depends on: channel 0 carries the ego
//! speed bar, the stop line and distractor obstacles; channel 1 carries the
//! lane centreline, whose curvature fixes the turn rate.

mod dataset;
mod parking;
mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Codec, TokenId, Trajectory, Vocabulary, Waypoint, WAYPOINT_DT};
use crate::model::SceneRaster;
use crate::training::TrainExample;

pub use dataset::{
    emit_dataset, read_dataset, split_seeds, DatasetKind, DatasetManifest, DatasetRecord, Split, WorldError,
    GENERATOR_VERSION,
};
pub use parking::{
    generate_parking, spot_center, ParkingCommand, ParkingSample, ENTRANCE_DEPTH, SPOT_COLUMNS, SPOT_COUNT, SPOT_WIDTH,
};

pub const RASTER_CHANNELS: usize = 2;
pub const RASTER_SIZE: usize = 16;
/// Instruction tokens per sample, padded with `<pad>`.
pub const CONTEXT_LEN: usize = 4;
pub const HORIZON_WAYPOINTS: usize = 6;

/// Discrete speed grid, m/s.
pub const SPEEDS: [f64; 12] = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0, 8.5, 9.0, 9.5];
/// Turn yaw rates, rad/s.
pub const YAW_RATES: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];
/// Time to come to rest in the stop scenario, s.
pub const STOP_TIMES: [f64; 3] = [1.5, 2.0, 2.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Straight, Scenario::LeftTurn, Scenario::RightTurn, Scenario::Stop];

    pub fn instruction(self) -> &'static str {
        match self {
            Scenario::Straight => "go straight",
            Scenario::LeftTurn => "turn left",
            Scenario::RightTurn => "turn right",
            Scenario::Stop => "stop at sign",
        }
    }
}

/// Kinematic parameters that fully determine the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub speed: f64,
    /// Signed yaw rate; positive turns left, zero for straight and stop.
    pub yaw_rate: f64,
    /// Time to rest for the stop scenario.
    pub stop_time: Option<f64>,
}

impl Kinematics {
    /// Ego position at time `t` under constant speed and yaw rate, or
    /// constant deceleration when stopping.
    pub fn position(&self, t: f64) -> Waypoint {
        let v = self.speed;
        if let Some(ts) = self.stop_time {
            let tt = t.min(ts);
            let a = v / ts;
            return Waypoint::new(v * tt - 0.5 * a * tt * tt, 0.0);
        }
        let w = self.yaw_rate;
        if w == 0.0 {
            return Waypoint::new(v * t, 0.0);
        }
        let r = v / w;
        Waypoint::new(r.abs() * (w.abs() * t).sin(), r * (1.0 - (w * t).cos()))
    }

    /// Point at arc length `s` along the lane centreline.
    pub fn lane_point(&self, s: f64) -> Waypoint {
        if self.stop_time.is_some() || self.yaw_rate == 0.0 {
            return Waypoint::new(s, 0.0);
        }
        let curvature = self.yaw_rate / self.speed;
        let theta = s * curvature;
        Waypoint::new(theta.abs().sin() / curvature.abs(), (1.0 - theta.cos()) / curvature)
    }

    pub fn stop_distance(&self) -> Option<f64> {
        self.stop_time.map(|ts| 0.5 * self.speed * ts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub scenario: Scenario,
    pub kinematics: Kinematics,
    pub raster: SceneRaster,
    pub instruction: Vec<TokenId>,
    pub truth: Trajectory,
}

impl SceneSample {
    pub fn to_example(&self, codec: &Codec) -> Result<TrainExample, CodecError> {
        Ok(TrainExample {
            scene: self.raster.clone(),
            context: self.instruction.clone(),
            target: codec.encode(&self.truth)?,
        })
    }
}

/// `<pad>`-padded instruction ids of length [`CONTEXT_LEN`].
pub fn instruction_tokens(vocab: &Vocabulary, phrase: &str) -> Vec<TokenId> {
    let mut ids = vocab.phrase(phrase).expect("instruction words are in the vocabulary");
    assert!(ids.len() <= CONTEXT_LEN, "instruction longer than the context");
    ids.resize(CONTEXT_LEN, vocab.pad_id());
    ids
}

pub fn generate_scene(seed: u64, vocab: &Vocabulary) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = Scenario::ALL[rng.random_range(0..4)];
    let speed = SPEEDS[rng.random_range(0..SPEEDS.len())];
    let turn = YAW_RATES[rng.random_range(0..YAW_RATES.len())];
    let stop = STOP_TIMES[rng.random_range(0..STOP_TIMES.len())];
    let kinematics = Kinematics {
        speed,
        yaw_rate: match scenario {
            Scenario::LeftTurn => turn,
            Scenario::RightTurn => -turn,
            _ => 0.0,
        },
        stop_time: (scenario == Scenario::Stop).then_some(stop),
    };
    let truth = Trajectory::new(
        (0..HORIZON_WAYPOINTS)
            .map(|k| kinematics.position((k + 1) as f64 * WAYPOINT_DT))
            .collect(),
    );
    let raster = raster::driving(&kinematics, &mut rng);
    SceneSample {
        seed,
        scenario,
        kinematics,
        raster,
        instruction: instruction_tokens(vocab, scenario.instruction()),
        truth,
    }
}

//! Command-conditioned spot selection in a two-row lot.
//!
//! The lot entrance is the ego origin; the building entrance sits across the
//! lot at depth [`ENTRANCE_DEPTH`]. The answer is a single waypoint, the
//! centre of the chosen spot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{instruction_tokens, raster};
use crate::codec::{CodecError, Codec, TokenId, Trajectory, Vocabulary, Waypoint};
use crate::model::SceneRaster;
use crate::training::TrainExample;

pub const SPOT_COLUMNS: usize = 5;
pub const SPOT_ROWS: usize = 2;
pub const SPOT_COUNT: usize = SPOT_COLUMNS * SPOT_ROWS;
/// Lateral spacing of spot centres, m.
pub const SPOT_WIDTH: f64 = 3.0;
const ROW_DEPTHS: [f64; SPOT_ROWS] = [5.0, 11.0];
pub const ENTRANCE_DEPTH: f64 = 15.0;

/// Centre of spot `i`; spots are numbered row by row from the lot entrance,
/// right to left.
pub fn spot_center(i: usize) -> Waypoint {
    assert!(i < SPOT_COUNT);
    let (row, col) = (i / SPOT_COLUMNS, i % SPOT_COLUMNS);
    Waypoint::new(ROW_DEPTHS[row], SPOT_WIDTH * (col as f64 - 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParkingCommand {
    Nearest,
    Farthest,
    AwayFromCars,
    NextToEntrance,
}

impl ParkingCommand {
    pub const ALL: [ParkingCommand; 4] = [
        ParkingCommand::Nearest,
        ParkingCommand::Farthest,
        ParkingCommand::AwayFromCars,
        ParkingCommand::NextToEntrance,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            ParkingCommand::Nearest => "park at nearest spot",
            ParkingCommand::Farthest => "park at farthest spot",
            ParkingCommand::AwayFromCars => "park away from cars",
            ParkingCommand::NextToEntrance => "park next to entrance",
        }
    }

    /// Score to maximise over free spots, ties to the lowest index.
    fn score(self, spot: usize, occupied: &[bool; SPOT_COUNT], entrance: Waypoint) -> f64 {
        let c = spot_center(spot);
        let origin = Waypoint::new(0.0, 0.0);
        match self {
            ParkingCommand::Nearest => -c.distance(&origin),
            ParkingCommand::Farthest => c.distance(&origin),
            ParkingCommand::NextToEntrance => -c.distance(&entrance),
            ParkingCommand::AwayFromCars => (0..SPOT_COUNT)
                .filter(|&j| occupied[j])
                .map(|j| c.distance(&spot_center(j)))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// The spot satisfying this command; `None` only when the lot is full.
    pub fn best_spot(self, occupied: &[bool; SPOT_COUNT], entrance: Waypoint) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for spot in (0..SPOT_COUNT).filter(|&s| !occupied[s]) {
            let score = self.score(spot, occupied, entrance);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((spot, score));
            }
        }
        best.map(|(s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParkingSample {
    pub seed: u64,
    pub command: ParkingCommand,
    pub instruction: Vec<TokenId>,
    pub occupied: [bool; SPOT_COUNT],
    /// Building entrance marker.
    pub entrance: Waypoint,
    pub raster: SceneRaster,
    pub valid_spots: Vec<usize>,
    pub best_spot: usize,
}

impl ParkingSample {
    pub fn truth(&self) -> Trajectory {
        Trajectory::new(vec![spot_center(self.best_spot)])
    }

    pub fn to_example(&self, codec: &Codec) -> Result<TrainExample, CodecError> {
        Ok(TrainExample {
            scene: self.raster.clone(),
            context: self.instruction.clone(),
            target: codec.encode(&self.truth())?,
        })
    }
}

pub fn generate_parking(seed: u64, vocab: &Vocabulary) -> ParkingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let command = ParkingCommand::ALL[rng.random_range(0..4)];
    let p_occupied = rng.random_range(0.2..0.6);
    let mut occupied = [false; SPOT_COUNT];
    occupied.iter_mut().for_each(|o| *o = rng.random_bool(p_occupied));
    if occupied.iter().all(|&o| o) {
        occupied[rng.random_range(0..SPOT_COUNT)] = false;
    }
    let entrance = Waypoint::new(
        ENTRANCE_DEPTH,
        SPOT_WIDTH * (rng.random_range(0..SPOT_COLUMNS) as f64 - 2.0),
    );
    let best_spot = command.best_spot(&occupied, entrance).expect("at least one free spot");
    ParkingSample {
        seed,
        command,
        instruction: instruction_tokens(vocab, command.phrase()),
        occupied,
        entrance,
        raster: raster::parking(&occupied, entrance.y),
        valid_spots: (0..SPOT_COUNT).filter(|&s| !occupied[s]).collect(),
        best_spot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TemplateSpec;

    #[test]
    fn empty_lot_nearest_is_closest_to_origin() {
        let free = [false; SPOT_COUNT];
        let e = Waypoint::new(ENTRANCE_DEPTH, 0.0);
        // Spot 2 is dead ahead of the lot entrance.
        assert_eq!(ParkingCommand::Nearest.best_spot(&free, e), Some(2));
        // Far corners tie; the lower index wins.
        assert_eq!(ParkingCommand::Farthest.best_spot(&free, e), Some(5));
        assert_eq!(ParkingCommand::NextToEntrance.best_spot(&free, e), Some(7));
        assert_eq!(ParkingCommand::AwayFromCars.best_spot(&free, e), Some(0));
    }

    #[test]
    fn single_free_spot_wins_every_command() {
        for spot in 0..SPOT_COUNT {
            let mut occ = [true; SPOT_COUNT];
            occ[spot] = false;
            for cmd in ParkingCommand::ALL {
                assert_eq!(cmd.best_spot(&occ, Waypoint::new(ENTRANCE_DEPTH, 3.0)), Some(spot));
            }
        }
        assert_eq!(ParkingCommand::Nearest.best_spot(&[true; SPOT_COUNT], Waypoint::new(0.0, 0.0)), None);
    }

    #[test]
    fn samples_are_consistent() {
        let v = Vocabulary::standard();
        let codec = Codec::new(TemplateSpec::parking());
        for seed in 0..500 {
            let s = generate_parking(seed, &v);
            assert_eq!(s, generate_parking(seed, &v));
            assert!(s.valid_spots.contains(&s.best_spot));
            assert!(!s.occupied[s.best_spot]);
            let ex = s.to_example(&codec).unwrap();
            assert_eq!(codec.decode(&ex.target).unwrap().waypoints[0], spot_center(s.best_spot));
            assert!(s.raster.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn spots_are_separated_by_more_than_the_success_radius() {
        for a in 0..SPOT_COUNT {
            for b in a + 1..SPOT_COUNT {
                assert!(spot_center(a).distance(&spot_center(b)) >= SPOT_WIDTH);
            }
        }
    }
}

//! Bird's-eye rasterisation. Ego sits at the bottom centre facing up; `x`
//! (forward) maps to rows, `y` (left) maps to decreasing columns.

use rand::Rng;

use super::parking::{spot_center, ENTRANCE_DEPTH, SPOT_COUNT};
use super::{Kinematics, RASTER_CHANNELS, RASTER_SIZE, SPEEDS};
use crate::codec::Waypoint;
use crate::model::SceneRaster;

/// Metres per pixel for driving scenes.
const DRIVE_SCALE: f64 = 2.0;
/// Metres per pixel for the parking lot.
const PARK_SCALE: f64 = 1.0;
const LANE_LENGTH: f64 = 30.0;

fn to_pixel(p: Waypoint, scale: f64) -> (f64, f64) {
    let n = RASTER_SIZE as f64;
    (n - 1.0 - p.x / scale, n / 2.0 - 0.5 - p.y / scale)
}

/// Bilinear deposit of `value` at continuous `(row, col)`, saturating at 1.
fn splat(r: &mut SceneRaster, ch: usize, row: f64, col: f64, value: f32) {
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = ((row - r0) as f32, (col - c0) as f32);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (y, x) = (r0 + dr, c0 + dc);
            if y < 0.0 || x < 0.0 || y >= r.height as f64 || x >= r.width as f64 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let v = (r.get(ch, y, x) + value * wr * wc).min(1.0);
            r.set(ch, y, x, v);
        }
    }
}

fn fill(r: &mut SceneRaster, ch: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, v: f32) {
    for y in rows {
        for x in cols.clone() {
            if y < r.height && x < r.width {
                r.set(ch, y, x, v.max(r.get(ch, y, x)));
            }
        }
    }
}

pub(super) fn driving<R: Rng + ?Sized>(k: &Kinematics, rng: &mut R) -> SceneRaster {
    let mut r = SceneRaster::zeros(RASTER_CHANNELS, RASTER_SIZE, RASTER_SIZE);

    // Speed bar along the top row: one lit pixel per speed grid step.
    let idx = SPEEDS.iter().position(|&v| v == k.speed).expect("speed on the grid");
    fill(&mut r, 0, 0..1, 0..idx + 1, 1.0);

    // Distractor obstacles at the sides; they never affect the truth.
    for _ in 0..rng.random_range(0..3) {
        let row = rng.random_range(2..13);
        let col = if rng.random_bool(0.5) {
            rng.random_range(0..2)
        } else {
            rng.random_range(RASTER_SIZE - 3..RASTER_SIZE - 1)
        };
        fill(&mut r, 0, row..row + 2, col..col + 2, 0.6);
    }

    if let Some(line) = k.stop_distance() {
        for j in -2..=2 {
            let (row, col) = to_pixel(Waypoint::new(line, j as f64 * DRIVE_SCALE), DRIVE_SCALE);
            splat(&mut r, 0, row, col, 1.0);
        }
    }

    let steps = (LANE_LENGTH / 0.25) as usize;
    for i in 0..=steps {
        let p = k.lane_point(i as f64 * 0.25);
        let (row, col) = to_pixel(p, DRIVE_SCALE);
        splat(&mut r, 1, row, col, 0.25);
    }
    r
}

pub(super) fn parking(occupied: &[bool; SPOT_COUNT], entrance_y: f64) -> SceneRaster {
    let mut r = SceneRaster::zeros(RASTER_CHANNELS, RASTER_SIZE, RASTER_SIZE);
    for (i, &occ) in occupied.iter().enumerate() {
        let (row, col) = to_pixel(spot_center(i), PARK_SCALE);
        let (row, col) = (row.round() as usize, col.floor() as usize);
        // Painted bay outline in channel 1, parked cars in channel 0.
        fill(&mut r, 1, row - 1..row + 2, col..col + 2, 0.5);
        if occ {
            fill(&mut r, 0, row - 1..row + 2, col..col + 2, 1.0);
        }
    }
    let (row, col) = to_pixel(Waypoint::new(ENTRANCE_DEPTH, entrance_y), PARK_SCALE);
    fill(&mut r, 1, row as usize..row as usize + 1, col.floor() as usize..col.floor() as usize + 2, 1.0);
    r
}

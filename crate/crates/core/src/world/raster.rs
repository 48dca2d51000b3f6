use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::scene::{Marking, ObstacleKind, Scene};
use super::{CONE, EGO, EMPTY, LANE, PEDESTRIAN, VEHICLE};

/// The ego's front cell sits this many rows above the bottom edge, centered horizontally.
pub const ANCHOR_FROM_BOTTOM: usize = 4;
/// Dashed markings: painted for the first `DASH_ON` meters of every `DASH_PERIOD`.
const DASH_PERIOD: f64 = 6.0;
const DASH_ON: f64 = 3.0;
const SAMPLE_STEP: f64 = 0.25;
const VEHICLE_LEN: f64 = 4.0;
const VEHICLE_WIDTH: f64 = 2.0;

/// A grid of cell classes, row-major, one cell per meter.
/// Row 0 is the far end of the view; forward is up.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Raster {
    pub h: usize,
    pub w: usize,
    #[serde(serialize_with = "cells_out", deserialize_with = "cells_in")]
    pub cells: Vec<u8>,
}

fn cells_out<S: Serializer>(cells: &[u8], s: S) -> Result<S::Ok, S::Error> {
    let text: String = cells.iter().map(|&c| char::from(b'0' + c)).collect();
    s.serialize_str(&text)
}

fn cells_in<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let text = String::deserialize(d)?;
    text.bytes()
        .map(|b| match b {
            b'0'..=b'9' => Ok(b - b'0'),
            _ => Err(serde::de::Error::custom("cell classes must be digits")),
        })
        .collect()
}

impl Raster {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![EMPTY; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.w + c]
    }

    pub fn anchor(&self) -> (usize, usize) {
        (self.h - ANCHOR_FROM_BOTTOM, self.w / 2)
    }

    fn paint(&mut self, r: i64, c: i64, class: u8) {
        if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w {
            self.cells[r as usize * self.w + c as usize] = class;
        }
    }

    /// Binary PPM, each cell drawn as a `scale`×`scale` block.
    pub fn to_ppm(&self, scale: usize) -> Vec<u8> {
        const PALETTE: [[u8; 3]; 6] = [
            [24, 24, 24],
            [200, 200, 200],
            [40, 160, 255],
            [230, 60, 60],
            [250, 200, 40],
            [255, 120, 0],
        ];
        let scale = scale.max(1);
        let (h, w) = (self.h * scale, self.w * scale);
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for r in 0..h {
            for c in 0..w {
                let class = self.get(r / scale, c / scale) as usize;
                out.extend_from_slice(&PALETTE[class.min(PALETTE.len() - 1)]);
            }
        }
        out
    }

    /// Fraction of cells with equal class.
    pub fn agreement(&self, other: &Raster) -> f64 {
        let same = self.cells.iter().zip(&other.cells).filter(|(a, b)| a == b).count();
        same as f64 / self.cells.len() as f64
    }
}

/// Renders an ego-centric top-down view. Cell (r, c) covers the point
/// `anchor_row − r` meters ahead and `anchor_col − c` meters to the left of the ego.
pub fn rasterize(scene: &Scene, h: usize, w: usize) -> Raster {
    let mut out = Raster::new(h, w);
    let (ar, ac) = out.anchor();
    let (ar, ac) = (ar as f64, ac as f64);
    let [ex, ey] = scene.ego.pos;
    let reach = (h.max(w) as f64) + 8.0;

    for lane in &scene.lanes {
        for (side, marking) in [(1.0, lane.left), (-1.0, lane.right)] {
            let mut s_base = 0.0;
            for seg in lane.points.windows(2) {
                let (p, q) = (seg[0], seg[1]);
                let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                if len == 0.0 {
                    continue;
                }
                let (tx, ty) = ((q[0] - p[0]) / len, (q[1] - p[1]) / len);
                let (nx, ny) = (-ty * side * lane.width / 2.0, tx * side * lane.width / 2.0);
                let n = (len / SAMPLE_STEP) as usize;
                for i in 0..=n {
                    let s = i as f64 * SAMPLE_STEP;
                    let x = p[0] + tx * s + nx;
                    let y = p[1] + ty * s + ny;
                    if (x - ex).abs() > reach || (y - ey).abs() > reach {
                        continue;
                    }
                    if marking == Marking::Dashed && (s_base + s).rem_euclid(DASH_PERIOD) >= DASH_ON {
                        continue;
                    }
                    out.paint((ar - (x - ex)).round() as i64, (ac - (y - ey)).round() as i64, LANE);
                }
                s_base += len;
            }
        }
    }

    let mut order: Vec<&super::Obstacle> = scene.obstacles.iter().collect();
    order.sort_by_key(|o| match o.kind {
        ObstacleKind::Cone => 0,
        ObstacleKind::Pedestrian => 1,
        ObstacleKind::Vehicle => 2,
    });
    for o in order {
        let dx = o.pos[0] - ex;
        let dy = o.pos[1] - ey;
        match o.kind {
            ObstacleKind::Cone | ObstacleKind::Pedestrian => {
                let class = if o.kind == ObstacleKind::Cone { CONE } else { PEDESTRIAN };
                out.paint((ar - dx).round() as i64, (ac - dy).round() as i64, class);
            }
            ObstacleKind::Vehicle => {
                paint_box(&mut out, ar, ac, dx, dy, VEHICLE);
            }
        }
    }

    // The ego box extends backwards from the anchor cell.
    let (r0, c0) = out.anchor();
    for r in r0..(r0 + VEHICLE_LEN as usize).min(h) {
        for c in c0.saturating_sub(VEHICLE_WIDTH as usize - 1)..=c0 {
            out.paint(r as i64, c as i64, EGO);
        }
    }
    out
}

/// Cells whose centers fall in the half-open box around (dx, dy).
fn paint_box(out: &mut Raster, ar: f64, ac: f64, dx: f64, dy: f64, class: u8) {
    let lo_x = (dx - VEHICLE_LEN / 2.0).ceil() as i64;
    let hi_x = (dx + VEHICLE_LEN / 2.0).ceil() as i64;
    let lo_y = (dy - VEHICLE_WIDTH / 2.0).ceil() as i64;
    let hi_y = (dy + VEHICLE_WIDTH / 2.0).ceil() as i64;
    for cx in lo_x..hi_x {
        for cy in lo_y..hi_y {
            out.paint(ar as i64 - cx, ac as i64 - cy, class);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, roll_forward, Scenario};
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let mut r = Raster::new(2, 3);
        r.cells[4] = EGO;
        let img = r.to_ppm(2);
        let header = b"P6\n6 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 6 * 4 * 3);
        // cell (1, 1) covers pixel rows 2..4, cols 2..4
        let px = header.len() + (2 * 6 + 2) * 3;
        assert_eq!(&img[px..px + 3], &[40, 160, 255]);
    }

    #[test]
    fn empty_scene_has_only_road_and_ego() {
        let mut sc = generate_scene(2, Scenario::Straight);
        sc.obstacles.clear();
        let r = rasterize(&sc, 32, 32);
        assert!(r.cells.iter().all(|&c| c == EMPTY || c == LANE || c == EGO));
        let mut bare = sc.clone();
        bare.lanes.clear();
        let r = rasterize(&bare, 32, 32);
        let non_ego: Vec<_> = r.cells.iter().filter(|&&c| c != EGO).collect();
        assert!(non_ego.iter().all(|&&c| c == EMPTY));
    }

    #[test]
    fn ego_at_anchor_in_every_frame() {
        for s in Scenario::ALL {
            let sc = generate_scene(11, s);
            for st in std::iter::once(sc.clone()).chain(roll_forward(&sc, 0.5, 8)) {
                let r = rasterize(&st, 32, 32);
                assert_eq!(r.get(28, 16), EGO);
            }
        }
    }

    #[test]
    fn lateral_shift_by_lane_width_shifts_columns() {
        for seed in 0..20 {
            let sc = generate_scene(seed, Scenario::CutIn);
            let mut shifted = sc.clone();
            for l in &mut shifted.lanes {
                for p in &mut l.points {
                    p[1] += super::super::LANE_WIDTH;
                }
            }
            for o in &mut shifted.obstacles {
                o.pos[1] += super::super::LANE_WIDTH;
            }
            let a = rasterize(&sc, 32, 32);
            let b = rasterize(&shifted, 32, 32);
            // +4 m to the left moves content 4 columns towards column 0.
            for r in 0..32 {
                for c in 4..32 {
                    let (x, y) = (a.get(r, c), b.get(r, c - 4));
                    if x == EGO || y == EGO {
                        continue;
                    }
                    assert_eq!(x, y, "seed {seed} cell ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn future_frames_show_motion() {
        let sc = generate_scene(5, Scenario::SlowLead);
        let now = rasterize(&sc, 32, 32);
        let later = rasterize(&roll_forward(&sc, 0.5, 2)[1], 32, 32);
        assert_ne!(now, later);
    }

    #[test]
    fn serde_round_trip() {
        let r = rasterize(&generate_scene(1, Scenario::WorkzoneTaper), 32, 32);
        let s = serde_json::to_string(&r).unwrap();
        let back: Raster = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
    }
}

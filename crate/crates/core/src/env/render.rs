use serde::{Deserialize, Serialize};

use super::RopeState;

/// Radius of the disk stamped for each geom in raster observations.
pub const DISK_RADIUS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    /// Geom positions divided by the image size, flattened in geom order.
    Coords,
    /// Single-channel `size x size` image, row-major (`y` major).
    Raster,
}

impl ObsKind {
    pub fn dim(self, geom_count: usize, image_size: usize) -> usize {
        match self {
            ObsKind::Coords => 2 * geom_count,
            ObsKind::Raster => image_size * image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub kind: ObsKind,
    pub values: Vec<f64>,
}

pub fn render(state: &RopeState, kind: ObsKind, image_size: usize) -> Observation {
    let s = image_size as f64;
    let values = match kind {
        ObsKind::Coords => state
            .geoms
            .iter()
            .flat_map(|p| [p.x / s, p.y / s])
            .collect(),
        ObsKind::Raster => raster(state, image_size),
    };
    Observation { kind, values }
}

/// Pixel `(px, py)` is lit when its center `(px + 0.5, py + 0.5)` lies within
/// `DISK_RADIUS` of any geom.
fn raster(state: &RopeState, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    let r2 = DISK_RADIUS * DISK_RADIUS;
    for g in &state.geoms {
        let lo = |v: f64| ((v - DISK_RADIUS - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + DISK_RADIUS).ceil() as usize).min(size - 1);
        for py in lo(g.y)..=hi(g.y) {
            let dy = py as f64 + 0.5 - g.y;
            for px in lo(g.x)..=hi(g.x) {
                let dx = px as f64 + 0.5 - g.x;
                if dx * dx + dy * dy <= r2 {
                    img[py * size + px] = 1.0;
                }
            }
        }
    }
    img
}

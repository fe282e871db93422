//! 2D rope testbed: a chain of point geoms moved by pick-and-place actions.

mod goals;
mod render;
mod rope;

pub use goals::{goal_template, make_goal, make_goal_with_pose, GoalKind, GoalPose};
pub use render::{render, ObsKind, Observation, DISK_RADIUS};
pub use rope::{reset, reset_with_burn_in, sample_action, step, straight_chain};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered geom positions in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeState {
    pub geoms: Vec<Point>,
}

impl RopeState {
    pub fn new(geoms: Vec<Point>) -> Self {
        Self { geoms }
    }

    pub fn len(&self) -> usize {
        self.geoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geoms.is_empty()
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.geoms.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        Self {
            geoms: values
                .chunks_exact(2)
                .map(|c| Point::new(c[0], c[1]))
                .collect(),
        }
    }

    pub fn max_segment_length(&self) -> f64 {
        self.geoms
            .windows(2)
            .map(|w| w[0].dist(w[1]))
            .fold(0.0, f64::max)
    }

    pub fn in_bounds(&self, image_size: usize) -> bool {
        let s = image_size as f64;
        self.geoms
            .iter()
            .all(|p| (0.0..s).contains(&p.x) && (0.0..s).contains(&p.y))
    }

    pub fn reversed(&self) -> Self {
        Self {
            geoms: self.geoms.iter().rev().copied().collect(),
        }
    }

    /// Index of the geom closest to `p`; ties go to the lowest index.
    pub fn nearest_geom(&self, p: Point) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in self.geoms.iter().enumerate() {
            let d = g.dist(p);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }
}

/// Pick point `(x1, y1)` and drop location `(x2, y2)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Action {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn pick(&self) -> Point {
        Point::new(self.x1, self.y1)
    }

    pub fn drop_point(&self) -> Point {
        Point::new(self.x2, self.y2)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Clamps every component into `[0, image_size)`.
    pub fn clamped(&self, image_size: usize) -> Self {
        let c = |v: f64| clamp_coord(v, image_size);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }

    pub fn in_bounds(&self, image_size: usize) -> bool {
        let s = image_size as f64;
        self.to_array().iter().all(|v| (0.0..s).contains(v))
    }
}

/// Clamps into `[0, size)`; NaN maps to 0.
pub fn clamp_coord(v: f64, image_size: usize) -> f64 {
    let hi = (image_size as f64).next_down();
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    Deterministic,
    Stochastic,
}

impl EnvMode {
    pub fn tag(self) -> &'static str {
        match self {
            EnvMode::Deterministic => "det",
            EnvMode::Stochastic => "stoch",
        }
    }
}

/// Pose distribution for sampled goal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalPoseConfig {
    /// Rotations are drawn uniformly from `[-max_rotation, max_rotation]` radians.
    pub max_rotation: f64,
    /// Centroid shifts per axis are drawn uniformly from `[-max_shift, max_shift]` pixels.
    pub max_shift: f64,
    /// Minimum distance from the image border for every goal geom.
    pub margin: f64,
}

impl Default for GoalPoseConfig {
    fn default() -> Self {
        Self {
            max_rotation: std::f64::consts::FRAC_PI_6,
            max_shift: 4.0,
            margin: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub mode: EnvMode,
    /// Standard deviation of the per-geom Gaussian noise in stochastic mode.
    pub noise_sigma: f64,
    pub pick_radius: f64,
    /// Rest segment length `L0`.
    pub rest_length: f64,
    pub image_size: usize,
    pub geom_count: usize,
    /// Random actions applied to the straight chain by `reset`.
    pub burn_in: usize,
    pub seed: u64,
    pub goal: GoalPoseConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            mode: EnvMode::Deterministic,
            noise_sigma: 0.5,
            pick_radius: 5.0,
            rest_length: 2.0,
            image_size: 64,
            geom_count: 25,
            burn_in: 10,
            seed: 0,
            goal: GoalPoseConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn with_mode(mut self, mode: EnvMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.pick_radius > 0.0) {
            return bad("pick_radius must be > 0");
        }
        if !(self.rest_length > 0.0) {
            return bad("rest_length must be > 0");
        }
        if self.geom_count < 2 {
            return bad("geom_count must be >= 2");
        }
        if self.image_size == 0 {
            return bad("image_size must be > 0");
        }
        if (self.geom_count - 1) as f64 * self.rest_length >= self.image_size as f64 {
            return bad("rope does not fit inside the image");
        }
        if !(self.goal.max_rotation >= 0.0 && self.goal.max_shift >= 0.0 && self.goal.margin >= 0.0)
        {
            return bad("goal pose bounds must be >= 0");
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        let c = self.image_size as f64 / 2.0;
        Point::new(c, c)
    }
}

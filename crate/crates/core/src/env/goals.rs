use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{straight_chain, EnvConfig, Point, RopeState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GoalKind {
    #[serde(rename = "straight")]
    Straight,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "l")]
    L,
    #[serde(rename = "s")]
    S,
}

impl GoalKind {
    pub const SHAPED: [GoalKind; 3] = [GoalKind::C, GoalKind::L, GoalKind::S];

    pub fn tag(self) -> &'static str {
        match self {
            GoalKind::Straight => "straight",
            GoalKind::C => "c",
            GoalKind::L => "l",
            GoalKind::S => "s",
        }
    }

    pub fn is_shaped(self) -> bool {
        self != GoalKind::Straight
    }
}

impl fmt::Display for GoalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for GoalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "straight" => Ok(GoalKind::Straight),
            "c" => Ok(GoalKind::C),
            "l" => Ok(GoalKind::L),
            "s" => Ok(GoalKind::S),
            other => Err(Error::UnsupportedGoal(other.to_string())),
        }
    }
}

/// Rigid placement of a goal template: rotation about the template centroid,
/// then translation of the centroid to `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalPose {
    pub center: Point,
    pub angle: f64,
}

const C_ARC_DEGREES: f64 = 240.0;
const S_AMPLITUDE: f64 = 8.0;
const S_WIDTH: f64 = 4.0;

/// Template shape with consecutive geoms exactly `rest_length` apart,
/// centered on its centroid.
pub fn goal_template(kind: GoalKind, config: &EnvConfig) -> Vec<Point> {
    let n = config.geom_count;
    let l0 = config.rest_length;
    let pts = match kind {
        GoalKind::Straight => return straight_chain(Point::default(), 0.0, n, l0),
        GoalKind::C => {
            // Equal angular steps with chord length l0.
            let dtheta = (C_ARC_DEGREES / (n as f64 - 1.0)).to_radians();
            let r = l0 / (2.0 * (dtheta / 2.0).sin());
            let start = -std::f64::consts::FRAC_PI_2 - C_ARC_DEGREES.to_radians() / 2.0;
            (0..n)
                .map(|i| {
                    let t = start - i as f64 * dtheta;
                    Point::new(r * t.cos(), r * t.sin())
                })
                .collect()
        }
        GoalKind::L => {
            let corner = (n - 1) / 2;
            (0..n)
                .map(|i| {
                    if i <= corner {
                        Point::new(-((corner - i) as f64) * l0, 0.0)
                    } else {
                        Point::new(0.0, (i - corner) as f64 * l0)
                    }
                })
                .collect()
        }
        GoalKind::S => chord_walk(|t| Point::new(t, S_AMPLITUDE * (t / S_WIDTH).tanh()), n, l0),
    };
    center_on_centroid(pts)
}

fn center_on_centroid(mut pts: Vec<Point>) -> Vec<Point> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    for p in &mut pts {
        p.x -= cx;
        p.y -= cy;
    }
    pts
}

/// Places `n` points along the curve `f` (parameterized by `t`, with the
/// Euclidean distance from any point increasing along the curve) so
/// consecutive points are exactly `step` apart. The walk is centered on the
/// arc-length midpoint around `t = 0`.
fn chord_walk(f: impl Fn(f64) -> Point, n: usize, step: f64) -> Vec<Point> {
    // Locate the start so that roughly half the rope lies on each side of t=0.
    let half = step * (n as f64 - 1.0) / 2.0;
    let dt = 1e-3;
    let mut t0 = 0.0;
    let mut len = 0.0;
    while len < half {
        let prev = f(t0);
        t0 -= dt;
        len += f(t0).dist(prev);
    }

    let mut pts = vec![f(t0)];
    let mut t = t0;
    while pts.len() < n {
        let anchor = *pts.last().expect("non-empty");
        let mut hi = t;
        while f(hi).dist(anchor) < step {
            hi += 0.05;
        }
        let mut lo = hi - 0.05;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid).dist(anchor) < step {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        t = hi;
        pts.push(f(t));
    }
    pts
}

pub fn make_goal_with_pose(kind: GoalKind, config: &EnvConfig, pose: GoalPose) -> RopeState {
    let (s, c) = pose.angle.sin_cos();
    if kind == GoalKind::Straight {
        return RopeState::new(straight_chain(
            pose.center,
            pose.angle,
            config.geom_count,
            config.rest_length,
        ));
    }
    let geoms = goal_template(kind, config)
        .into_iter()
        .map(|p| {
            Point::new(
                pose.center.x + p.x * c - p.y * s,
                pose.center.y + p.x * s + p.y * c,
            )
        })
        .collect();
    RopeState::new(geoms)
}

/// Goal shape with a random rotation and centroid shift, kept inside the
/// image with `config.goal.margin` to spare.
pub fn make_goal<R: Rng + ?Sized>(
    kind: GoalKind,
    config: &EnvConfig,
    rng: &mut R,
) -> Result<RopeState> {
    let g = config.goal;
    let angle = if g.max_rotation > 0.0 {
        rng.random_range(-g.max_rotation..=g.max_rotation)
    } else {
        0.0
    };
    let mut shift = || {
        if g.max_shift > 0.0 {
            rng.random_range(-g.max_shift..=g.max_shift)
        } else {
            0.0
        }
    };
    let (dx, dy) = (shift(), shift());

    let at_origin = make_goal_with_pose(
        kind,
        config,
        GoalPose {
            center: Point::default(),
            angle,
        },
    );
    let (mut minx, mut maxx, mut miny, mut maxy) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &at_origin.geoms {
        minx = minx.min(p.x);
        maxx = maxx.max(p.x);
        miny = miny.min(p.y);
        maxy = maxy.max(p.y);
    }
    let size = config.image_size as f64;
    let center = config.center();
    let fit = |c: f64, lo: f64, hi: f64| {
        let (a, b) = (g.margin - lo, size - g.margin - hi);
        if a <= b {
            c.clamp(a, b)
        } else {
            c
        }
    };
    let pose = GoalPose {
        center: Point::new(
            fit(center.x + dx, minx, maxx),
            fit(center.y + dy, miny, maxy),
        ),
        angle,
    };
    let goal = make_goal_with_pose(kind, config, pose);
    if !goal.in_bounds(config.image_size) {
        return Err(Error::Config(format!(
            "goal {kind} does not fit inside the image"
        )));
    }
    Ok(goal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset_with_burn_in;
    use crate::seed;

    #[test]
    fn centered_straight_goal_equals_unperturbed_reset() {
        let cfg = EnvConfig::default();
        let goal = make_goal_with_pose(
            GoalKind::Straight,
            &cfg,
            GoalPose {
                center: cfg.center(),
                angle: 0.0,
            },
        );
        assert_eq!(goal, reset_with_burn_in(&cfg, 0, 0));
    }

    #[test]
    fn segment_lengths_match_rest_length() {
        let cfg = EnvConfig::default();
        let mut rng = seed::rng(3);
        for kind in [GoalKind::Straight, GoalKind::C, GoalKind::L, GoalKind::S] {
            for _ in 0..50 {
                let g = make_goal(kind, &cfg, &mut rng).unwrap();
                assert_eq!(g.len(), cfg.geom_count);
                assert!(g.in_bounds(cfg.image_size));
                for w in g.geoms.windows(2) {
                    let d = w[0].dist(w[1]);
                    assert!((d - cfg.rest_length).abs() < 1e-6, "{kind}: {d}");
                }
            }
        }
    }

    #[test]
    fn knot_is_unsupported() {
        assert!(matches!(
            "knot".parse::<GoalKind>(),
            Err(Error::UnsupportedGoal(_))
        ));
        assert_eq!("C".parse::<GoalKind>().unwrap(), GoalKind::C);
    }

    #[test]
    fn c_spans_an_arc() {
        let cfg = EnvConfig::default();
        let t = goal_template(GoalKind::C, &cfg);
        // end-to-end distance of a 240 degree arc is well below the rope length
        let span = t[0].dist(t[24]);
        assert!(span < 0.5 * 48.0, "{span}");
        assert!(span > 10.0);
    }

    #[test]
    fn l_has_a_right_angle() {
        let cfg = EnvConfig::default();
        let t = goal_template(GoalKind::L, &cfg);
        let a = (t[0].x - t[12].x, t[0].y - t[12].y);
        let b = (t[24].x - t[12].x, t[24].y - t[12].y);
        assert!((a.0 * b.0 + a.1 * b.1).abs() < 1e-9);
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{clamp_coord, Action, EnvConfig, EnvMode, Point, RopeState};
use crate::seed;

/// `n` geoms spaced `rest_length` apart on a line through `center` at `angle`.
pub fn straight_chain(center: Point, angle: f64, n: usize, rest_length: f64) -> Vec<Point> {
    let (s, c) = angle.sin_cos();
    let mid = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let t = (i as f64 - mid) * rest_length;
            Point::new(center.x + t * c, center.y + t * s)
        })
        .collect()
}

/// Straight horizontal chain at the image center perturbed by `config.burn_in`
/// random actions.
pub fn reset(config: &EnvConfig, seed: u64) -> RopeState {
    reset_with_burn_in(config, seed, config.burn_in)
}

pub fn reset_with_burn_in(config: &EnvConfig, seed: u64, burn_in: usize) -> RopeState {
    let mut state = RopeState::new(straight_chain(
        config.center(),
        0.0,
        config.geom_count,
        config.rest_length,
    ));
    let mut rng = seed::rng(seed);
    let det = config.with_mode(EnvMode::Deterministic);
    for _ in 0..burn_in {
        let a = sample_action(&state, config.image_size, &mut rng);
        state = step(&state, &a, &det, &mut rng);
    }
    state
}

/// Segments already within this much of the rest length are left alone, so a
/// projected chain is a fixed point of further projection passes.
const PROJECTION_SLACK: f64 = 1e-9;

/// Pulls `geoms[follower]` toward `geoms[leader]` until they are at most `rest_length` apart.
fn follow(geoms: &mut [Point], leader: usize, follower: usize, rest_length: f64) {
    let l = geoms[leader];
    let f = geoms[follower];
    let d = l.dist(f);
    if d > rest_length + PROJECTION_SLACK {
        let k = rest_length / d;
        geoms[follower] = Point::new(l.x + (f.x - l.x) * k, l.y + (f.y - l.y) * k);
    }
}

fn clamp_all(geoms: &mut [Point], image_size: usize) {
    for g in geoms {
        g.x = clamp_coord(g.x, image_size);
        g.y = clamp_coord(g.y, image_size);
    }
}

/// One pick-and-place transition.
///
/// The geom nearest the pick point is moved to the drop point when it lies
/// within `pick_radius`; neighbours then follow outward along the chain so no
/// segment exceeds the rest length. Stochastic mode perturbs every geom with
/// Gaussian noise and re-projects from geom 0. Deterministic mode never draws
/// from `rng`.
pub fn step<R: Rng + ?Sized>(
    state: &RopeState,
    action: &Action,
    config: &EnvConfig,
    rng: &mut R,
) -> RopeState {
    let mut geoms = state.geoms.clone();
    let n = geoms.len();
    let l0 = config.rest_length;

    if let Some((k, d)) = state.nearest_geom(action.pick()) {
        if d <= config.pick_radius {
            geoms[k] = action.drop_point();
            for i in k + 1..n {
                follow(&mut geoms, i - 1, i, l0);
            }
            for i in (0..k).rev() {
                follow(&mut geoms, i + 1, i, l0);
            }
            clamp_all(&mut geoms, config.image_size);
        }
    }

    if config.mode == EnvMode::Stochastic && config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma validated >= 0");
        for g in geoms.iter_mut() {
            g.x += normal.sample(rng);
            g.y += normal.sample(rng);
        }
        for i in 1..n {
            follow(&mut geoms, i - 1, i, l0);
        }
        clamp_all(&mut geoms, config.image_size);
    }

    RopeState::new(geoms)
}

/// Exploration action: pick near a uniformly chosen geom (±2 px jitter) and
/// drop 2–12 px away in a uniform direction, clamped into the image.
pub fn sample_action<R: Rng + ?Sized>(state: &RopeState, image_size: usize, rng: &mut R) -> Action {
    let k = rng.random_range(0..state.len());
    let g = state.geoms[k];
    let px = g.x + rng.random_range(-2.0..=2.0);
    let py = g.y + rng.random_range(-2.0..=2.0);
    let r = rng.random_range(2.0..=12.0);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    Action::new(px, py, px + r * c, py + r * s).clamped(image_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn zero_burn_in_gives_centered_straight_chain() {
        let c = cfg();
        let s = reset_with_burn_in(&c, 1, 0);
        assert_eq!(s.len(), 25);
        for (i, g) in s.geoms.iter().enumerate() {
            assert_eq!(g.y, 32.0);
            assert_eq!(g.x, 8.0 + 2.0 * i as f64);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let c = cfg();
        assert_eq!(reset(&c, 42), reset(&c, 42));
        assert_ne!(reset(&c, 42), reset(&c, 43));
    }

    #[test]
    fn resets_satisfy_invariants() {
        let c = cfg();
        for s in 0..1000 {
            let st = reset(&c, s);
            assert!(st.max_segment_length() <= c.rest_length + 1e-6);
            assert!(st.in_bounds(c.image_size));
        }
    }

    #[test]
    fn far_pick_is_noop() {
        let c = cfg();
        let s = reset_with_burn_in(&c, 0, 0);
        let a = Action::new(32.0, 50.0, 10.0, 10.0);
        let mut rng = seed::rng(0);
        assert_eq!(step(&s, &a, &c, &mut rng), s);
    }

    #[test]
    fn drop_in_place_is_noop() {
        let c = cfg();
        let s = reset(&c, 5);
        let g = s.geoms[7];
        let a = Action::new(g.x, g.y, g.x, g.y);
        let mut rng = seed::rng(0);
        assert_eq!(step(&s, &a, &c, &mut rng), s);
    }

    #[test]
    fn dragging_an_end_pulls_the_chain() {
        let c = cfg();
        let s = reset_with_burn_in(&c, 0, 0);
        // grab geom 24 at (56,32) and move it right by 6 px
        let a = Action::new(56.0, 32.0, 62.0, 32.0);
        let mut rng = seed::rng(0);
        let n = step(&s, &a, &c, &mut rng);
        assert_eq!(n.geoms[24], Point::new(62.0, 32.0));
        assert!((n.geoms[23].x - 60.0).abs() < 1e-12);
        assert!((n.geoms[21].x - 56.0).abs() < 1e-12);
        assert!((n.geoms[0].x - 14.0).abs() < 1e-12);
        assert!(n.max_segment_length() <= c.rest_length + 1e-9);
    }

    #[test]
    fn deterministic_steps_keep_invariants() {
        let c = cfg();
        let mut rng = seed::rng(11);
        let mut s = reset(&c, 3);
        for _ in 0..100 {
            let a = sample_action(&s, c.image_size, &mut rng);
            s = step(&s, &a, &c, &mut rng);
            assert!(s.max_segment_length() <= c.rest_length + 1e-6);
            assert!(s.in_bounds(c.image_size));
        }
    }

    #[test]
    fn noiseless_stochastic_matches_deterministic() {
        let det = cfg();
        let sto = EnvConfig {
            mode: EnvMode::Stochastic,
            noise_sigma: 0.0,
            ..det
        };
        let mut ra = seed::rng(1);
        let mut rb = seed::rng(1);
        let mut arng = seed::rng(2);
        let mut a = reset(&det, 9);
        let mut b = a.clone();
        for _ in 0..200 {
            let act = sample_action(&a, det.image_size, &mut arng);
            a = step(&a, &act, &det, &mut ra);
            b = step(&b, &act, &sto, &mut rb);
            assert_eq!(
                a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn stochastic_step_keeps_invariants() {
        let c = EnvConfig {
            mode: EnvMode::Stochastic,
            noise_sigma: 1.5,
            ..cfg()
        };
        let mut rng = seed::rng(4);
        let mut s = reset(&c, 1);
        for _ in 0..500 {
            let a = sample_action(&s, c.image_size, &mut rng);
            s = step(&s, &a, &c, &mut rng);
            assert!(s.max_segment_length() <= c.rest_length + 1e-6);
            assert!(s.in_bounds(c.image_size));
        }
    }

    #[test]
    fn sampled_picks_are_near_the_rope() {
        let c = cfg();
        let mut rng = seed::rng(8);
        let s = reset(&c, 2);
        for _ in 0..10_000 {
            let a = sample_action(&s, c.image_size, &mut rng);
            let (_, d) = s.nearest_geom(a.pick()).unwrap();
            assert!(d <= 2.0 * 2f64.sqrt() + 1e-12);
            assert!(a.in_bounds(c.image_size));
        }
    }

    #[test]
    fn corner_rope_actions_stay_in_bounds() {
        let c = cfg();
        let s = RopeState::new((0..25).map(|i| Point::new(0.1 * i as f64, 0.05)).collect());
        let mut rng = seed::rng(0);
        for _ in 0..2000 {
            assert!(sample_action(&s, c.image_size, &mut rng).in_bounds(c.image_size));
        }
    }

    #[test]
    fn same_seed_same_action() {
        let s = reset(&cfg(), 0);
        let a = sample_action(&s, 64, &mut seed::rng(99));
        let b = sample_action(&s, 64, &mut seed::rng(99));
        assert_eq!(a, b);
    }
}

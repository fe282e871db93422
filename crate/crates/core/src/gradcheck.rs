//! Finite-difference verification of the analytic gradients.
//!
//! Each composite is rebuilt at a number of random points (fresh parameters
//! and inputs). Vector-valued maps are reduced to a scalar through a fixed
//! random projection. At every point a sample of coordinates of every
//! trainable leaf is compared against a central difference.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::env::ObsKind;
use crate::error::{Error, Result};
use crate::models::{init_bundle, Architecture, BoundBundle, Variant};
use crate::seed;
use crate::train::{
    action_reconstruction, build_losses, nce_loss, BatchNodes, Denominator, LossConfig, Objective,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random points per composite.
    pub points: usize,
    /// Coordinates sampled per trainable leaf per point.
    pub coords_per_leaf: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 20,
            coords_per_leaf: 6,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeReport {
    pub name: &'static str,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub composites: Vec<CompositeReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.composites
            .iter()
            .all(|c| c.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.composites {
            let verdict = if c.max_rel_error < self.tolerance {
                "pass"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{verdict} {:<26} points={} coords={} max_rel_error={:.3e}",
                c.name, c.points, c.coordinates, c.max_rel_error
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.0e})",
            if self.passed() {
                "gradcheck passed"
            } else {
                "gradcheck FAILED"
            },
            self.tolerance
        )
    }
}

/// The checked composites, in report order.
pub const COMPOSITES: [&str; 9] = [
    "encode_state/coords",
    "encode_state/raster",
    "encode_action",
    "forward_predict",
    "inverse_predict",
    "forward_nce_loss",
    "inverse_nce_loss",
    "decoder_loss",
    "baseline_regression_loss",
];

/// A scalar output and the leaves it is differentiated against.
struct Instance {
    graph: Graph,
    output: NodeId,
    leaves: Vec<NodeId>,
}

const BATCH: usize = 3;
const NCE_BATCH: usize = 4;
const MAX_REDRAWS: usize = 200;

fn small_arch(obs_kind: ObsKind) -> Architecture {
    Architecture {
        obs_kind,
        geom_count: 25,
        image_size: 12,
        embed_dim: 6,
        state_hidden: 10,
        action_hidden: 8,
        dynamics_hidden: 10,
    }
}

fn uniform(rng: &mut seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn normal(rng: &mut seed::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// A bundle with perturbed weights and non-zero biases, bound trainable.
fn random_bundle(g: &mut Graph, arch: Architecture, rng: &mut seed::Rng) -> BoundBundle {
    let mut bundle = init_bundle(Variant::FI, arch, rng.random());
    for p in bundle.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    bundle.bind(g, true)
}

/// `sum(y ⊙ R)` for a fixed standard-normal `R`.
fn project(g: &mut Graph, y: NodeId, rng: &mut seed::Rng) -> Result<NodeId> {
    let r = g.constant(normal(rng, g.shape(y)));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

fn build(name: &str, point: usize, rng: &mut seed::Rng) -> Result<Instance> {
    let mut g = Graph::new();
    let coords = small_arch(ObsKind::Coords);
    let e = coords.embed_dim;
    let mode = if point.is_multiple_of(2) {
        Denominator::Negatives
    } else {
        Denominator::WithPositive
    };
    let output = match name {
        "encode_state/coords" | "encode_state/raster" => {
            let kind = if name.ends_with("coords") {
                ObsKind::Coords
            } else {
                ObsKind::Raster
            };
            let arch = small_arch(kind);
            let m = random_bundle(&mut g, arch, rng);
            let obs = g.param(uniform(rng, &[BATCH, arch.obs_dim()], 0.0, 1.0));
            let h = m.encode_states(&mut g, obs)?;
            project(&mut g, h, rng)?
        }
        "encode_action" => {
            let m = random_bundle(&mut g, coords, rng);
            let a = g.param(uniform(rng, &[BATCH, 4], 0.0, 1.0));
            let z = m.encode_actions(&mut g, a)?;
            project(&mut g, z, rng)?
        }
        "forward_predict" | "inverse_predict" => {
            let m = random_bundle(&mut g, coords, rng);
            let x = g.param(normal(rng, &[BATCH, e]));
            let y = g.param(normal(rng, &[BATCH, e]));
            let out = if name == "forward_predict" {
                m.predict_forward(&mut g, x, y)?
            } else {
                m.predict_inverse(&mut g, x, y)?
            };
            project(&mut g, out, rng)?
        }
        "forward_nce_loss" | "inverse_nce_loss" => {
            let pred = g.param(normal(rng, &[NCE_BATCH, e]));
            let current = g.param(normal(rng, &[NCE_BATCH, e]));
            let next = g.param(normal(rng, &[NCE_BATCH, e]));
            if name == "forward_nce_loss" {
                nce_loss(&mut g, pred, next, current, 0.1, mode)?
            } else {
                nce_loss(&mut g, pred, current, next, 0.1, mode)?
            }
        }
        "decoder_loss" => {
            let m = random_bundle(&mut g, coords, rng);
            let a = g.param(uniform(rng, &[BATCH, 4], 0.0, 1.0));
            let z = m.encode_actions(&mut g, a)?;
            let decoded = m.decode_actions(&mut g, z)?;
            action_reconstruction(&mut g, decoded, a, m.image_size)?
        }
        "baseline_regression_loss" => {
            let m = random_bundle(&mut g, coords, rng);
            let obs = g.param(uniform(rng, &[BATCH, coords.obs_dim()], 0.0, 1.0));
            let next_obs = g.param(uniform(rng, &[BATCH, coords.obs_dim()], 0.0, 1.0));
            let actions = g.param(uniform(rng, &[BATCH, 4], 0.0, 1.0));
            let batch = BatchNodes {
                obs,
                next_obs,
                actions,
                next_actions: None,
            };
            let cfg = LossConfig {
                temperature: 0.1,
                decoder_weight: 1.0,
                denominator: mode,
                objective: Objective::Regression,
            };
            build_losses(&mut g, &m, &batch, &cfg)?.total
        }
        other => return Err(Error::Config(format!("unknown composite {other:?}"))),
    };
    let leaves = g.trainable_ancestors(output);
    Ok(Instance {
        graph: g,
        output,
        leaves,
    })
}

/// Draws a point whose ReLU inputs all sit farther than `margin` from zero.
fn draw(name: &str, point: usize, rng: &mut seed::Rng, margin: f64) -> Result<Instance> {
    for _ in 0..MAX_REDRAWS {
        let mut inst = build(name, point, rng)?;
        inst.graph.forward(&[])?;
        if inst.graph.min_abs_relu_input() > margin {
            return Ok(inst);
        }
    }
    Err(Error::Domain(format!(
        "{name}: no point clear of ReLU kinks after {MAX_REDRAWS} draws"
    )))
}

/// Max relative error and number of coordinates checked at one point.
fn check_point(
    inst: &mut Instance,
    cfg: &GradCheckConfig,
    rng: &mut seed::Rng,
) -> Result<(f64, usize)> {
    let g = &mut inst.graph;
    let grads = g.backward(inst.output)?;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &leaf in &inst.leaves {
        let base = g.value(leaf)?.clone();
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let k = cfg.coords_per_leaf.min(base.len());
        for i in index::sample(rng, base.len(), k) {
            let mut plus = base.clone();
            plus.data_mut()[i] += cfg.step;
            let fp = g.forward_eval(inst.output, &[(leaf, plus)])?.item();
            let mut minus = base.clone();
            minus.data_mut()[i] -= cfg.step;
            let fm = g.forward_eval(inst.output, &[(leaf, minus)])?.item();
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
            count += 1;
        }
        g.forward(&[(leaf, base)])?;
    }
    Ok((worst, count))
}

/// Checks one composite at `cfg.points` random points.
pub fn check_composite(name: &'static str, cfg: &GradCheckConfig) -> Result<CompositeReport> {
    let idx = COMPOSITES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Config(format!("unknown composite {name:?}")))?;
    let mut report = CompositeReport {
        name,
        points: 0,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    // A perturbation of `step` moves a pre-activation by far less than this.
    let margin = 10.0 * cfg.step;
    for point in 0..cfg.points {
        let mut rng = seed::child_rng(
            seed::child_seed(cfg.seed, name, idx as u64),
            "point",
            point as u64,
        );
        let mut inst = draw(name, point, &mut rng, margin)?;
        let (worst, count) = check_point(&mut inst, cfg, &mut rng)?;
        report.points += 1;
        report.coordinates += count;
        report.max_rel_error = report.max_rel_error.max(worst);
    }
    Ok(report)
}

/// Runs every composite.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.points == 0 || !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config(
            "gradcheck needs points > 0, step > 0 and tolerance > 0".into(),
        ));
    }
    let composites = COMPOSITES
        .iter()
        .map(|name| check_composite(name, cfg))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        composites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            points: 3,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn every_composite_passes_at_a_few_points() {
        let report = gradcheck(&quick()).unwrap();
        assert_eq!(report.composites.len(), COMPOSITES.len());
        assert!(report.passed(), "{report}");
        for c in &report.composites {
            assert_eq!(c.points, 3);
            assert!(c.coordinates > 0);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Comparing against a perturbed objective must blow the tolerance.
        let cfg = quick();
        let mut rng = seed::rng(3);
        let mut inst = draw("encode_action", 0, &mut rng, 1e-4).unwrap();
        let out = inst.output;
        let shifted = inst.graph.scale(out, 1.5);
        inst.output = shifted;
        let grads = inst.graph.backward(out).unwrap();
        let leaf = *inst.leaves.last().unwrap();
        let a = grads.get(leaf).unwrap().data()[0];
        let mut plus = inst.graph.value(leaf).unwrap().clone();
        plus.data_mut()[0] += cfg.step;
        let mut minus = plus.clone();
        minus.data_mut()[0] -= 2.0 * cfg.step;
        let fp = inst
            .graph
            .forward_eval(shifted, &[(leaf, plus)])
            .unwrap()
            .item();
        let fm = inst
            .graph
            .forward_eval(shifted, &[(leaf, minus)])
            .unwrap()
            .item();
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        assert!(rel > cfg.tolerance, "rel {rel}");
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = GradCheckConfig {
            points: 2,
            seed: 7,
            ..GradCheckConfig::default()
        };
        let a = check_composite("inverse_nce_loss", &cfg).unwrap();
        let b = check_composite("inverse_nce_loss", &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GradCheckConfig {
            points: 0,
            ..GradCheckConfig::default()
        };
        assert!(matches!(gradcheck(&cfg), Err(Error::Config(_))));
        assert!(check_composite("nope", &GradCheckConfig::default()).is_err());
    }
}

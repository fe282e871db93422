//! Contrastive, reconstruction and regression objectives as graph builders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::{BoundBundle, Variant};

/// Which terms appear in the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// The `2(N-1)` real negatives only; the positive is excluded.
    #[default]
    Negatives,
    /// Negatives plus the positive pair (InfoNCE / NT-Xent convention).
    WithPositive,
}

impl std::str::FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negatives" => Ok(Denominator::Negatives),
            "with_positive" => Ok(Denominator::WithPositive),
            other => Err(Error::Config(format!("unknown denominator {other:?}"))),
        }
    }
}

/// Contrastive loss over a batch.
///
/// Row `i` of `anchors` is scored against `positives[i]` (numerator) and
/// against `others[j]`, `positives[j]` for `j != i` (denominator), plus
/// `positives[i]` itself in [`Denominator::WithPositive`] mode. Returns the mean
/// over anchors as a `[1]` node.
pub fn nce_loss(
    g: &mut Graph,
    anchors: NodeId,
    positives: NodeId,
    others: NodeId,
    temperature: f64,
    mode: Denominator,
) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let n = g.shape(anchors)[0];
    if n < 2 {
        return Err(Error::Domain(format!(
            "contrastive loss needs at least 2 samples, got {n}"
        )));
    }
    for x in [positives, others] {
        if g.shape(x)[0] != n {
            return Err(Error::shape(
                "nce_loss",
                format!("{n} anchors but {} rows", g.shape(x)[0]),
            ));
        }
    }
    let s_other = g.cosine_sim(anchors, others)?;
    let s_pos = g.cosine_sim(anchors, positives)?;
    let logits = g.concat(&[s_other, s_pos])?;
    let logits = g.scale(logits, 1.0 / temperature);

    let mut mask = vec![true; n * 2 * n];
    for i in 0..n {
        mask[i * 2 * n + i] = false;
        if mode == Denominator::Negatives {
            mask[i * 2 * n + n + i] = false;
        }
    }
    let lse = g.log_sum_exp_rows(logits, Some(mask))?;
    let pos = g.diag(s_pos)?;
    let pos = g.scale(pos, 1.0 / temperature);
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

fn eval_scalar(g: &mut Graph, out: NodeId) -> Result<f64> {
    Ok(g.forward_eval(out, &[])?.item())
}

/// Forward-model loss: anchors `h̃_{t+1}`, positives `h_{t+1}`, extra negatives `h_t`.
pub fn forward_nce_loss(
    predicted: &Tensor,
    current: &Tensor,
    next: &Tensor,
    temperature: f64,
    mode: Denominator,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(predicted.clone());
    let p = g.constant(next.clone());
    let o = g.constant(current.clone());
    let l = nce_loss(&mut g, a, p, o, temperature, mode)?;
    eval_scalar(&mut g, l)
}

/// Inverse-model loss: anchors `z̃_t`, positives `z_t`, extra negatives
/// `z_{t+1}` (embeddings of the following actions).
pub fn inverse_nce_loss(
    predicted: &Tensor,
    current: &Tensor,
    next: &Tensor,
    temperature: f64,
    mode: Denominator,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(predicted.clone());
    let p = g.constant(current.clone());
    let o = g.constant(next.clone());
    let l = nce_loss(&mut g, a, p, o, temperature, mode)?;
    eval_scalar(&mut g, l)
}

/// Mean over rows of the squared Euclidean distance between `a` and `b`.
pub fn mean_sq_dist(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let n = g.shape(a)[0];
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `mean ‖decoded / image_size − actions_norm‖²`, with `decoded` in pixels.
pub fn action_reconstruction(
    g: &mut Graph,
    decoded: NodeId,
    actions_norm: NodeId,
    image_size: usize,
) -> Result<NodeId> {
    let scaled = g.scale(decoded, 1.0 / image_size as f64);
    mean_sq_dist(g, scaled, actions_norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Contrastive,
    /// Deterministic latent regression baseline.
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub decoder_weight: f64,
    pub denominator: Denominator,
    pub objective: Objective,
}

/// Batch inputs as graph nodes. Actions are scaled into `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub obs: NodeId,
    pub next_obs: NodeId,
    pub actions: NodeId,
    /// The action taken from `next_obs`; needed by the contrastive inverse loss.
    pub next_actions: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub forward: Option<NodeId>,
    pub inverse: Option<NodeId>,
    pub decoder: Option<NodeId>,
    pub total: NodeId,
}

/// Builds every loss term for the bundle's variant and objective.
///
/// Contrastive: FI → `l_F + l_I + λ·l_dec`, F → `l_F`, I → `l_I + λ·l_dec`.
/// Regression (FI only): `‖h̃ − h_{t+1}‖² + ‖p(z̃) − a‖² + λ·l_dec`.
pub fn build_losses(
    g: &mut Graph,
    model: &BoundBundle,
    batch: &BatchNodes,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let variant = model.variant;
    if cfg.objective == Objective::Regression && variant != Variant::FI {
        return Err(Error::Variant(format!(
            "regression objective needs variant fi, got {variant}"
        )));
    }
    let size = model.image_size;
    let h = model.encode_states(g, batch.obs)?;
    let h_next = model.encode_states(g, batch.next_obs)?;

    let z = if variant.has_action_codec() {
        Some(model.encode_actions(g, batch.actions)?)
    } else {
        None
    };
    let decoder = match z {
        Some(z) => {
            let decoded = model.decode_actions(g, z)?;
            Some(action_reconstruction(g, decoded, batch.actions, size)?)
        }
        None => None,
    };

    let forward = if variant.has_forward() {
        let action_in = z.unwrap_or(batch.actions);
        let pred = model.predict_forward(g, h, action_in)?;
        Some(match cfg.objective {
            Objective::Contrastive => {
                nce_loss(g, pred, h_next, h, cfg.temperature, cfg.denominator)?
            }
            Objective::Regression => mean_sq_dist(g, pred, h_next)?,
        })
    } else {
        None
    };

    let inverse = if variant.has_inverse() {
        let pred = model.predict_inverse(g, h, h_next)?;
        Some(match cfg.objective {
            Objective::Contrastive => {
                let next = batch.next_actions.ok_or_else(|| {
                    Error::shape("build_losses", "inverse loss needs the following actions")
                })?;
                let z_next = model.encode_actions(g, next)?;
                let z = z.expect("inverse variants carry an action encoder");
                nce_loss(g, pred, z, z_next, cfg.temperature, cfg.denominator)?
            }
            Objective::Regression => {
                let decoded = model.decode_actions(g, pred)?;
                action_reconstruction(g, decoded, batch.actions, size)?
            }
        })
    } else {
        None
    };

    let mut total: Option<NodeId> = None;
    for term in [forward, inverse].into_iter().flatten() {
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    if let Some(d) = decoder {
        let weighted = g.scale(d, cfg.decoder_weight);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("every variant has at least one dynamics model");
    Ok(LossNodes {
        forward,
        inverse,
        decoder,
        total,
    })
}

//! Joint training of the encoders and dynamics models.

mod dataset;
mod loss;

pub use dataset::{collect_dataset, train_split, Dataset, Transition};
pub use loss::{
    action_reconstruction, build_losses, forward_nce_loss, inverse_nce_loss, mean_sq_dist,
    nce_loss, BatchNodes, Denominator, LossConfig, LossNodes, Objective,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::env::{render, ObsKind};
use crate::error::{Error, Result};
use crate::models::{init_bundle, normalized_actions, Architecture, ModelBundle, Variant};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub temperature: f64,
    /// Weight `λ_dec` of the action reconstruction term.
    pub decoder_weight: f64,
    pub variant: Variant,
    pub objective: Objective,
    pub denominator: Denominator,
    pub obs_kind: ObsKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            epochs: 30,
            temperature: 0.1,
            decoder_weight: 1.0,
            variant: Variant::FI,
            objective: Objective::Contrastive,
            denominator: Denominator::Negatives,
            obs_kind: ObsKind::Coords,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be >= 0".into());
        }
        if !(self.decoder_weight >= 0.0) {
            return bad("decoder_weight must be >= 0".into());
        }
        if self.objective == Objective::Regression && self.variant != Variant::FI {
            return bad("the regression objective requires variant fi".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            decoder_weight: self.decoder_weight,
            denominator: self.denominator,
            objective: self.objective,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Short method label: the variant tag, or `baseline` for regression.
    pub fn method_tag(&self) -> &'static str {
        match self.objective {
            Objective::Regression => "baseline",
            Objective::Contrastive => self.variant.tag(),
        }
    }
}

/// Per-epoch means over batches. Terms absent from the variant are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub forward: Option<f64>,
    pub inverse: Option<f64>,
    pub decoder: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub curve: Vec<EpochLoss>,
}

pub fn architecture_for(dataset: &Dataset, obs_kind: ObsKind) -> Architecture {
    Architecture {
        geom_count: dataset.env.geom_count,
        image_size: dataset.env.image_size,
        ..Architecture::new(obs_kind)
    }
}

/// Tensors for one batch of transitions.
#[derive(Clone, Debug)]
pub struct BatchTensors {
    pub obs: Tensor,
    pub next_obs: Tensor,
    pub actions: Tensor,
    pub next_actions: Option<Tensor>,
}

impl BatchTensors {
    /// Renders the batch `indices` of `dataset`. `next_actions` is filled when
    /// every index has an in-trajectory successor.
    pub fn assemble(dataset: &Dataset, indices: &[usize], kind: ObsKind) -> Result<Self> {
        let size = dataset.env.image_size;
        let recs: Vec<_> = indices.iter().map(|&i| &dataset.transitions[i]).collect();
        let obs: Vec<Vec<f64>> = recs
            .iter()
            .map(|t| render(&t.state, kind, size).values)
            .collect();
        let next: Vec<Vec<f64>> = recs
            .iter()
            .map(|t| render(&t.next_state, kind, size).values)
            .collect();
        let actions: Vec<_> = recs.iter().map(|t| t.action).collect();
        let successors: Option<Vec<_>> = indices
            .iter()
            .map(|&i| dataset.successor(i).map(|j| dataset.transitions[j].action))
            .collect();
        Ok(Self {
            obs: Tensor::from_rows(&obs)?,
            next_obs: Tensor::from_rows(&next)?,
            actions: normalized_actions(&actions, size)?,
            next_actions: successors
                .map(|s| normalized_actions(&s, size))
                .transpose()?,
        })
    }

    pub fn feed(&self, g: &mut Graph) -> BatchNodes {
        BatchNodes {
            obs: g.constant(self.obs.clone()),
            next_obs: g.constant(self.next_obs.clone()),
            actions: g.constant(self.actions.clone()),
            next_actions: self.next_actions.as_ref().map(|t| g.constant(t.clone())),
        }
    }
}

/// `(l_F, l_I, l_dec, total)`; absent terms are `None`.
pub type BatchLosses = (Option<f64>, Option<f64>, Option<f64>, f64);

/// Loss terms of `bundle` on one batch, without gradients.
pub fn evaluate_batch(
    bundle: &ModelBundle,
    batch: &BatchTensors,
    cfg: &LossConfig,
) -> Result<BatchLosses> {
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g, false);
    let nodes = batch.feed(&mut g);
    let l = build_losses(&mut g, &bound, &nodes, cfg)?;
    g.forward(&[])?;
    let read =
        |g: &Graph, n: Option<_>| n.map(|n| g.value(n).map(|t: &Tensor| t.item())).transpose();
    Ok((
        read(&g, l.forward)?,
        read(&g, l.inverse)?,
        read(&g, l.decoder)?,
        g.value(l.total)?.item(),
    ))
}

/// Training indices: transitions of the training split that have an
/// in-trajectory successor (the contrastive inverse loss needs the next action).
pub fn trainable_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.train().len())
        .filter(|&i| dataset.successor(i).is_some())
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_| {})
}

/// Adam on the total loss, one shuffled pass per epoch. Epoch `e` shuffles
/// with child stream `("epoch", e)`; initial weights use child seed `("init", 0)`.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = architecture_for(dataset, config.obs_kind);
    let mut bundle = init_bundle(
        config.variant,
        arch,
        seed::child_seed(config.seed, "init", 0),
    );
    let mut curve = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome { bundle, curve });
    }
    let eligible = trainable_indices(dataset);
    if eligible.len() < 2 {
        return Err(Error::EmptyDataset("fewer than 2 trainable transitions"));
    }
    let mut adam = AdamState::new(config.adam(), bundle.params());
    let loss_cfg = config.loss_config();

    for epoch in 0..config.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut seed::child_rng(config.seed, "epoch", epoch as u64));
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = BatchTensors::assemble(dataset, chunk, config.obs_kind)?;
            let mut g = Graph::new();
            let bound = bundle.bind(&mut g, true);
            let nodes = batch.feed(&mut g);
            let l = build_losses(&mut g, &bound, &nodes, &loss_cfg)?;
            match g.forward(&[]) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, batch: b }),
                other => other?,
            }
            let total = g.value(l.total)?.item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            for (k, n) in [l.forward, l.inverse, l.decoder].into_iter().enumerate() {
                if let Some(n) = n {
                    sums[k] += g.value(n)?.item();
                }
            }
            sums[3] += total;
            batches += 1;

            let grads = g.backward(l.total)?;
            let nodes = bound.param_nodes();
            let grad_refs: Vec<&Tensor> = nodes
                .iter()
                .map(|&n| grads.get(n).expect("trainable leaf has a gradient"))
                .collect();
            adam.update(&mut bundle.params_mut(), &grad_refs)?;
        }
        let mean = |k: usize| sums[k] / batches as f64;
        let row = EpochLoss {
            epoch,
            forward: config.variant.has_forward().then(|| mean(0)),
            inverse: config.variant.has_inverse().then(|| mean(1)),
            decoder: config.variant.has_action_codec().then(|| mean(2)),
            total: mean(3),
        };
        on_epoch(&row);
        curve.push(row);
    }
    Ok(TrainOutcome { bundle, curve })
}

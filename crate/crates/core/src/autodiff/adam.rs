use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay is coupled: `g += wd * p` before the
/// moment update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            first_moment,
            second_moment,
            step: 0,
        }
    }

    /// In-place update of `params`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[k].shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "param {k}: {:?}, grad {:?}, moment {:?}",
                        p.shape(),
                        g.shape(),
                        self.first_moment[k].shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let grad = gv + weight_decay * *pv;
                *mv = beta1 * *mv + (1.0 - beta1) * grad;
                *vv = beta2 * *vv + (1.0 - beta2) * grad * grad;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Pure form of one Adam update: returns new parameters and state.
pub fn adam_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &AdamState,
) -> Result<(Vec<Tensor>, AdamState)> {
    let mut new_params = params.to_vec();
    let mut new_state = state.clone();
    {
        let mut refs: Vec<&mut Tensor> = new_params.iter_mut().collect();
        let grefs: Vec<&Tensor> = grads.iter().collect();
        new_state.update(&mut refs, &grefs)?;
    }
    Ok((new_params, new_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let p = vec![Tensor::row(&[1.0, -2.0, 3.5])];
        let g = vec![Tensor::zeros(&[1, 3])];
        let st = AdamState::new(cfg(0.0), &p);
        let (np, ns) = adam_step(&p, &g, &st).unwrap();
        assert_eq!(np, p);
        assert_eq!(ns.step, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.5)];
        let st = AdamState::new(cfg(0.0), &p);
        let (np, _) = adam_step(&p, &g, &st).unwrap();
        // m̂ = 0.5, v̂ = 0.25 -> Δ = -1e-3 * 0.5 / (0.5 + 1e-8)
        let delta = np[0].item() - 1.0;
        assert!((delta - (-9.99999980e-4)).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn weight_decay_alone_shrinks_params() {
        let p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(0.0)];
        let st = AdamState::new(cfg(1e-6), &p);
        let (np, _) = adam_step(&p, &g, &st).unwrap();
        // effective gradient 1e-6: Δ = -lr * 1e-6 / (1e-6 + 1e-8)
        let want = 1.0 - 1e-3 * 1e-6 / (1e-6 + 1e-8);
        assert!(np[0].item() < 1.0);
        assert!((np[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn pure_step_is_repeatable() {
        let p = vec![Tensor::row(&[0.3, -0.1]), Tensor::scalar(2.0)];
        let g = vec![Tensor::row(&[0.7, 1e-3]), Tensor::scalar(-4.0)];
        let st = AdamState::new(cfg(1e-6), &p);
        let (a, sa) = adam_step(&p, &g, &st).unwrap();
        let (b, sb) = adam_step(&p, &g, &st).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let (_, s2) = adam_step(&a, &g, &sa).unwrap();
        assert_eq!(s2.step, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = vec![Tensor::row(&[0.3, -0.1])];
        let g = vec![Tensor::row(&[0.7, 1e-3, 2.0])];
        let st = AdamState::new(cfg(0.0), &p);
        assert!(adam_step(&p, &g, &st).is_err());
    }
}

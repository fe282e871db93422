//! Small reverse-mode autodiff engine plus Adam.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId, Op, GATHER_ZERO};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::shape(
            "cosine_sim",
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::Domain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

//! State encoder `g`, action encoder `q`, action decoder `p`, forward model
//! `F` and inverse model `I`.
//!
//! Every map is a plain parameter set; to run one it is bound into a
//! [`Graph`] (trainable or constant) and applied to graph nodes. The
//! value-level helpers at the bottom wrap that for single inputs.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor, GATHER_ZERO};
use crate::env::{Action, ObsKind, Observation};
use crate::error::{Error, Result};
use crate::seed;

/// Which dynamics models a bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Forward model only; raw actions are fed to `F`.
    #[serde(rename = "f")]
    F,
    /// Inverse model with action encoder/decoder; no forward model.
    #[serde(rename = "i")]
    I,
    /// All five maps.
    #[serde(rename = "fi")]
    FI,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::F => "f",
            Variant::I => "i",
            Variant::FI => "fi",
        }
    }

    pub fn has_forward(self) -> bool {
        matches!(self, Variant::F | Variant::FI)
    }

    pub fn has_inverse(self) -> bool {
        matches!(self, Variant::I | Variant::FI)
    }

    pub fn has_action_codec(self) -> bool {
        self.has_inverse()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" => Ok(Variant::F),
            "i" => Ok(Variant::I),
            "fi" => Ok(Variant::FI),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Layer widths and input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub obs_kind: ObsKind,
    pub geom_count: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub state_hidden: usize,
    pub action_hidden: usize,
    pub dynamics_hidden: usize,
}

impl Architecture {
    pub fn new(obs_kind: ObsKind) -> Self {
        Self {
            obs_kind,
            geom_count: 25,
            image_size: 64,
            embed_dim: 16,
            state_hidden: 128,
            action_hidden: 64,
            dynamics_hidden: 128,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_kind.dim(self.geom_count, self.image_size)
    }
}

/// Output channels of the raster encoder stages. Kernels are 3x3, stride 2, padding 1.
pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
const ACTION_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// ReLU hidden layers, linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|w| Linear::xavier(w[0], w[1], rng))
                .collect(),
        }
    }

    /// Four layers: `input -> hidden -> hidden -> hidden -> output`.
    pub fn four_layer<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(&[input, hidden, hidden, hidden, output], rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    /// Per stage: weight `[9 * c_in, c_out]`, bias `[1, c_out]`.
    pub stages: Vec<Linear>,
    pub head: Linear,
    pub image_size: usize,
}

impl ConvEncoder {
    fn new<R: Rng + ?Sized>(image_size: usize, embed_dim: usize, rng: &mut R) -> Self {
        let mut c_in = 1;
        let mut stages = Vec::new();
        let mut side = image_size;
        for &c_out in &CONV_CHANNELS {
            // Xavier with receptive-field fan sizes.
            stages.push(conv_xavier(c_in, c_out, rng));
            c_in = c_out;
            side = conv_out(side);
        }
        let head = Linear::xavier(side * side * c_in, embed_dim, rng);
        Self {
            stages,
            head,
            image_size,
        }
    }
}

fn conv_xavier<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Linear {
    let bound = (6.0 / (9 * c_in + 9 * c_out) as f64).sqrt();
    let data = (0..9 * c_in * c_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Linear {
        weight: Tensor::new(vec![9 * c_in, c_out], data).expect("shape"),
        bias: Tensor::zeros(&[1, c_out]),
    }
}

/// Output side length of a 3x3, stride 2, padding 1 convolution.
pub fn conv_out(side: usize) -> usize {
    (side - 1) / 2 + 1
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateEncoder {
    Mlp(Mlp),
    Conv(ConvEncoder),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub variant: Variant,
    pub arch: Architecture,
    pub state_encoder: StateEncoder,
    pub action_encoder: Option<Mlp>,
    pub action_decoder: Option<Mlp>,
    pub forward_model: Option<Mlp>,
    pub inverse_model: Option<Mlp>,
}

/// Xavier-uniform weights, zero biases, reproducible from `seed`.
pub fn init_bundle(variant: Variant, arch: Architecture, seed: u64) -> ModelBundle {
    let mut rng = seed::rng(seed);
    let e = arch.embed_dim;
    let state_encoder = match arch.obs_kind {
        ObsKind::Coords => StateEncoder::Mlp(Mlp::four_layer(
            arch.obs_dim(),
            arch.state_hidden,
            e,
            &mut rng,
        )),
        ObsKind::Raster => StateEncoder::Conv(ConvEncoder::new(arch.image_size, e, &mut rng)),
    };
    let codec = variant.has_action_codec();
    let action_encoder =
        codec.then(|| Mlp::four_layer(ACTION_DIM, arch.action_hidden, e, &mut rng));
    let action_decoder =
        codec.then(|| Mlp::four_layer(e, arch.action_hidden, ACTION_DIM, &mut rng));
    let forward_model = variant.has_forward().then(|| {
        let action_in = if variant == Variant::F { ACTION_DIM } else { e };
        Mlp::four_layer(e + action_in, arch.dynamics_hidden, e, &mut rng)
    });
    let inverse_model = variant
        .has_inverse()
        .then(|| Mlp::four_layer(2 * e, arch.dynamics_hidden, e, &mut rng));
    ModelBundle {
        variant,
        arch,
        state_encoder,
        action_encoder,
        action_decoder,
        forward_model,
        inverse_model,
    }
}

impl ModelBundle {
    /// Parameters in canonical order with stable names. Checkpoints, the
    /// optimizer and [`BoundBundle::param_nodes`] all use this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.named_linears()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn named_linears(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        match &self.state_encoder {
            StateEncoder::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("state_encoder.{i}"), l));
                }
            }
            StateEncoder::Conv(c) => {
                for (i, l) in c.stages.iter().enumerate() {
                    out.push((format!("state_encoder.conv{i}"), l));
                }
                out.push(("state_encoder.head".into(), &c.head));
            }
        }
        let mlps = [
            ("action_encoder", &self.action_encoder),
            ("action_decoder", &self.action_decoder),
            ("forward_model", &self.forward_model),
            ("inverse_model", &self.inverse_model),
        ];
        for (name, m) in mlps {
            if let Some(m) = m {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("{name}.{i}"), l));
                }
            }
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        match &mut self.state_encoder {
            StateEncoder::Mlp(m) => out.extend(m.layers.iter_mut()),
            StateEncoder::Conv(c) => {
                out.extend(c.stages.iter_mut());
                out.push(&mut c.head);
            }
        }
        for m in [
            &mut self.action_encoder,
            &mut self.action_decoder,
            &mut self.forward_model,
            &mut self.inverse_model,
        ]
        .into_iter()
        .flatten()
        {
            out.extend(m.layers.iter_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn require_forward(&self) -> Result<()> {
        if self.forward_model.is_none() {
            return Err(Error::Variant(format!(
                "variant {} has no forward model",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn require_inverse(&self) -> Result<()> {
        if self.inverse_model.is_none() || self.action_decoder.is_none() {
            return Err(Error::Variant(format!(
                "variant {} has no inverse model",
                self.variant
            )));
        }
        Ok(())
    }

    /// Registers all parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBundle {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut bind_linear = |l: &Linear| BoundLinear {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let state_encoder = match &self.state_encoder {
            StateEncoder::Mlp(m) => BoundEncoder::Mlp(BoundMlp {
                layers: m.layers.iter().map(&mut bind_linear).collect(),
            }),
            StateEncoder::Conv(c) => BoundEncoder::Conv {
                stages: c.stages.iter().map(&mut bind_linear).collect(),
                head: bind_linear(&c.head),
                image_size: c.image_size,
            },
        };
        let mut bind_mlp = |m: &Option<Mlp>| {
            m.as_ref().map(|m| BoundMlp {
                layers: m.layers.iter().map(&mut bind_linear).collect(),
            })
        };
        let action_encoder = bind_mlp(&self.action_encoder);
        let action_decoder = bind_mlp(&self.action_decoder);
        let forward_model = bind_mlp(&self.forward_model);
        let inverse_model = bind_mlp(&self.inverse_model);
        BoundBundle {
            variant: self.variant,
            image_size: self.arch.image_size,
            state_encoder,
            action_encoder,
            action_decoder,
            forward_model,
            inverse_model,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl BoundLinear {
    fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, self.weight)?;
        g.add_bias(xw, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum BoundEncoder {
    Mlp(BoundMlp),
    Conv {
        stages: Vec<BoundLinear>,
        head: BoundLinear,
        image_size: usize,
    },
}

#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub variant: Variant,
    pub image_size: usize,
    pub state_encoder: BoundEncoder,
    pub action_encoder: Option<BoundMlp>,
    pub action_decoder: Option<BoundMlp>,
    pub forward_model: Option<BoundMlp>,
    pub inverse_model: Option<BoundMlp>,
}

/// im2col gather indices for a 3x3, stride 2, padding 1 convolution over a
/// batch laid out as `[n, side*side, channels]`.
pub fn im2col_index(batch: usize, side: usize, channels: usize) -> (Arc<[u32]>, usize) {
    let out = conv_out(side);
    let mut idx = Vec::with_capacity(batch * out * out * 9 * channels);
    for n in 0..batch {
        for oy in 0..out {
            for ox in 0..out {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        let inside =
                            (0..side as isize).contains(&iy) && (0..side as isize).contains(&ix);
                        for c in 0..channels {
                            idx.push(if inside {
                                let flat =
                                    ((n * side + iy as usize) * side + ix as usize) * channels + c;
                                flat as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    (Arc::from(idx), out)
}

impl BoundBundle {
    /// Parameter nodes in [`ModelBundle::named_params`] order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut push = |l: &BoundLinear| {
            out.push(l.weight);
            out.push(l.bias);
        };
        match &self.state_encoder {
            BoundEncoder::Mlp(m) => m.layers.iter().for_each(&mut push),
            BoundEncoder::Conv { stages, head, .. } => {
                stages.iter().for_each(&mut push);
                push(head);
            }
        }
        for m in [
            &self.action_encoder,
            &self.action_decoder,
            &self.forward_model,
            &self.inverse_model,
        ]
        .into_iter()
        .flatten()
        {
            m.layers.iter().for_each(&mut push);
        }
        out
    }

    /// `h = g(o)` for a batch of observations `[n, obs_dim]`.
    pub fn encode_states(&self, g: &mut Graph, obs: NodeId) -> Result<NodeId> {
        match &self.state_encoder {
            BoundEncoder::Mlp(m) => m.apply(g, obs),
            BoundEncoder::Conv {
                stages,
                head,
                image_size,
            } => {
                let n = g.shape(obs)[0];
                let mut x = obs;
                let mut side = *image_size;
                let mut channels = 1;
                for stage in stages {
                    let (idx, out) = im2col_index(n, side, channels);
                    let cols = g.gather(x, idx, &[n * out * out, 9 * channels])?;
                    let y = stage.apply(g, cols)?;
                    x = g.relu(y);
                    side = out;
                    channels = g.shape(stage.weight)[1];
                }
                let flat = g.reshape(x, &[n, side * side * channels])?;
                head.apply(g, flat)
            }
        }
    }

    fn need<'a>(&self, m: &'a Option<BoundMlp>, what: &str) -> Result<&'a BoundMlp> {
        m.as_ref()
            .ok_or_else(|| Error::Variant(format!("variant {} has no {what}", self.variant)))
    }

    /// `z = q(a)` for actions already divided by the image size.
    pub fn encode_actions(&self, g: &mut Graph, actions_norm: NodeId) -> Result<NodeId> {
        self.need(&self.action_encoder, "action encoder")?
            .apply(g, actions_norm)
    }

    /// `a = p(z)`, in pixels (unclamped).
    pub fn decode_actions(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        self.need(&self.action_decoder, "action decoder")?
            .apply(g, z)
    }

    /// `h̃ = F(h, z)`; for variant F, `z` is the normalized raw action.
    pub fn predict_forward(&self, g: &mut Graph, h: NodeId, z: NodeId) -> Result<NodeId> {
        let f = self.need(&self.forward_model, "forward model")?;
        let x = g.concat(&[h, z])?;
        f.apply(g, x)
    }

    /// `z̃ = I(h_t, h_{t+1})`.
    pub fn predict_inverse(&self, g: &mut Graph, h_t: NodeId, h_next: NodeId) -> Result<NodeId> {
        let inv = self.need(&self.inverse_model, "inverse model")?;
        let x = g.concat(&[h_t, h_next])?;
        inv.apply(g, x)
    }
}

// ---- value-level helpers -------------------------------------------------

/// Actions as an `[n, 4]` tensor scaled into `[0, 1]`.
pub fn normalized_actions(actions: &[Action], image_size: usize) -> Result<Tensor> {
    let s = image_size as f64;
    let rows: Vec<[f64; 4]> = actions
        .iter()
        .map(|a| a.to_array().map(|v| v / s))
        .collect();
    Tensor::from_rows(&rows)
}

pub fn observation_batch(bundle: &ModelBundle, obs: &[&Observation]) -> Result<Tensor> {
    let dim = bundle.arch.obs_dim();
    for o in obs {
        if o.kind != bundle.arch.obs_kind || o.values.len() != dim {
            return Err(Error::shape(
                "encode_state",
                format!(
                    "bundle expects {:?} observations of length {dim}, got {:?} of length {}",
                    bundle.arch.obs_kind,
                    o.kind,
                    o.values.len()
                ),
            ));
        }
    }
    let rows: Vec<&[f64]> = obs.iter().map(|o| o.values.as_slice()).collect();
    Tensor::from_rows(&rows)
}

/// Embeddings `[n, embed_dim]` for a batch of observations.
pub fn encode_state_batch(bundle: &ModelBundle, obs: &[&Observation]) -> Result<Tensor> {
    let x = observation_batch(bundle, obs)?;
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let xi = g.constant(x);
    let h = b.encode_states(&mut g, xi)?;
    g.forward_eval(h, &[])
}

pub fn encode_state(bundle: &ModelBundle, obs: &Observation) -> Result<Vec<f64>> {
    Ok(encode_state_batch(bundle, &[obs])?.into_data())
}

pub fn encode_action(bundle: &ModelBundle, action: &Action) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let a = g.constant(normalized_actions(&[*action], bundle.arch.image_size)?);
    let z = b.encode_actions(&mut g, a)?;
    Ok(g.forward_eval(z, &[])?.into_data())
}

/// `p(z)` clamped into the image.
pub fn decode_action(bundle: &ModelBundle, z: &[f64]) -> Result<Action> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let zi = g.constant(Tensor::row(z));
    let a = b.decode_actions(&mut g, zi)?;
    let out = g.forward_eval(a, &[])?;
    Ok(Action::from_slice(out.data()).clamped(bundle.arch.image_size))
}

/// `F(h, z)`. For variant F pass the raw action in pixels as `z`.
pub fn forward_predict(bundle: &ModelBundle, h: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    bundle.require_forward()?;
    let z: Vec<f64> = if bundle.variant == Variant::F {
        if z.len() != ACTION_DIM {
            return Err(Error::shape(
                "forward_predict",
                format!("raw action of length {}", z.len()),
            ));
        }
        z.iter()
            .map(|v| v / bundle.arch.image_size as f64)
            .collect()
    } else {
        z.to_vec()
    };
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let hi = g.constant(Tensor::row(h));
    let zi = g.constant(Tensor::row(&z));
    let out = b.predict_forward(&mut g, hi, zi)?;
    Ok(g.forward_eval(out, &[])?.into_data())
}

pub fn inverse_predict(bundle: &ModelBundle, h_t: &[f64], h_next: &[f64]) -> Result<Vec<f64>> {
    bundle.require_inverse()?;
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let a = g.constant(Tensor::row(h_t));
    let c = g.constant(Tensor::row(h_next));
    let out = b.predict_inverse(&mut g, a, c)?;
    Ok(g.forward_eval(out, &[])?.into_data())
}

/// Unclamped decoder output, for round-trip diagnostics.
pub fn decode_action_raw(bundle: &ModelBundle, z: &[f64]) -> Result<[f64; 4]> {
    let mut g = Graph::new();
    let b = bundle.bind(&mut g, false);
    let zi = g.constant(Tensor::row(z));
    let a = b.decode_actions(&mut g, zi)?;
    let out = g.forward_eval(a, &[])?;
    let d = out.data();
    Ok([d[0], d[1], d[2], d[3]])
}

//! Transformer encoder stack and the two-layer reconstruction head.

mod config;

pub use config::{ActivationKind, ModelConfig, NormPlacement, Preset};

use crate::error::{Result, TeraError};
use crate::numeric::{Activation, Graph, NodeId, ParamId, ParamStore, Real, Tensor, LAYER_NORM_EPS};
use crate::rng::TeraRng;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub attention_norm: Norm,
    pub ff_in: Affine,
    pub ff_out: Affine,
    pub ff_norm: Norm,
}

/// Handles to the encoder's tensors inside the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub input: Affine,
    pub layers: Vec<LayerParams>,
    pub final_norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub hidden: Affine,
    pub out: Affine,
}

/// Walks a store in [`ModelConfig::param_shapes`] order.
struct Cursor(usize);

impl Cursor {
    fn next(&mut self) -> ParamId {
        self.0 += 1;
        ParamId(self.0 - 1)
    }

    fn affine(&mut self) -> Affine {
        Affine { weight: self.next(), bias: self.next() }
    }

    fn norm(&mut self) -> Norm {
        Norm { gain: self.next(), bias: self.next() }
    }
}

/// Encoder and reconstruction head sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct TeraModel<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Runtime mode for a forward pass.
pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut TeraRng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut TeraRng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }
}

/// Weights ~ N(0, 0.02²), biases 0, LayerNorm gains 1.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<TeraModel<T>> {
    config.validate()?;
    let mut rng = TeraRng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with(".weight") {
            Tensor::randn(&shape, INIT_STD, &mut rng)
        } else if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        store.push(name, t);
    }
    TeraModel::from_store(config.clone(), store)
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoid_table<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            t.set(pos, i, T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    t
}

impl<T: Real> TeraModel<T> {
    /// Rebuild the structured handles from a store laid out by
    /// [`ModelConfig::param_shapes`]; names and shapes must match exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != store.len() {
            return Err(TeraError::Incompatible(format!(
                "parameter store has {} tensors, config needs {}",
                store.len(),
                shapes.len()
            )));
        }
        for ((name, shape), id) in shapes.iter().zip(store.ids()) {
            if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
                return Err(TeraError::Incompatible(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        let mut cur = Cursor(0);
        let input = cur.affine();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                query: cur.affine(),
                key: cur.affine(),
                value: cur.affine(),
                output: cur.affine(),
                attention_norm: cur.norm(),
                ff_in: cur.affine(),
                ff_out: cur.affine(),
                ff_norm: cur.norm(),
            })
            .collect();
        let final_norm = cur.norm();
        let head = HeadParams { hidden: cur.affine(), out: cur.affine() };
        Ok(TeraModel { config, store, encoder: EncoderParams { input, layers, final_norm }, head })
    }

    /// Whether a parameter belongs to the encoder (as opposed to the head).
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with("encoder.")
    }

    pub fn cast<U: Real>(&self) -> TeraModel<U> {
        TeraModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    fn affine(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId, a: Affine) -> Result<NodeId> {
        g.affine(x, p[a.weight.0], p[a.bias.0])
    }

    fn norm(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId, n: Norm) -> Result<NodeId> {
        g.layer_norm(x, p[n.gain.0], p[n.bias.0], LAYER_NORM_EPS)
    }

    fn dropout(&self, g: &mut Graph<T>, x: NodeId, mode: &mut Mode) -> Result<NodeId> {
        match mode.rng() {
            Some(rng) => g.dropout(x, self.config.dropout, rng),
            None => Ok(x),
        }
    }

    fn self_attention(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId, lp: &LayerParams, valid: &[bool], mode: &mut Mode) -> Result<NodeId> {
        let dh = self.config.head_dim();
        let q = self.affine(g, p, x, lp.query)?;
        let k = self.affine(g, p, x, lp.key)?;
        let v = self.affine(g, p, x, lp.value)?;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, Some(valid))?;
            let weights = self.dropout(g, weights, mode)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.affine(g, p, ctx, lp.output)
    }

    fn feed_forward(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId, lp: &LayerParams) -> Result<NodeId> {
        let h = self.affine(g, p, x, lp.ff_in)?;
        let h = g.activation(h, Activation::from(self.config.activation));
        self.affine(g, p, h, lp.ff_out)
    }

    /// Run the encoder on `x: [L, H]` with `valid[t]` false at padded frames.
    /// Returns every layer's output `[L, d_model]`, shallowest first.
    pub fn encode(&self, g: &mut Graph<T>, p: &[NodeId], x: NodeId, valid: &[bool], mut mode: Mode) -> Result<Vec<NodeId>> {
        let (l, h) = (g.value(x).rows(), g.value(x).cols());
        if g.value(x).shape().len() != 2 || h != self.config.input_dim {
            return Err(TeraError::Contract(format!(
                "encoder expects [L, {}] input, got {:?}",
                self.config.input_dim,
                g.value(x).shape()
            )));
        }
        if valid.len() != l {
            return Err(TeraError::Contract(format!("pad mask has {} entries for {l} frames", valid.len())));
        }
        if !valid.iter().any(|&v| v) {
            return Err(TeraError::Contract("pad mask marks every frame as padding".into()));
        }
        let mut hid = self.affine(g, p, x, self.encoder.input)?;
        if self.config.position_encoding {
            let pe = g.constant(sinusoid_table(l, self.config.d_model));
            hid = g.add(hid, pe)?;
        }
        hid = self.dropout(g, hid, &mut mode)?;

        let mut outputs = Vec::with_capacity(self.config.n_layers);
        for lp in &self.encoder.layers {
            hid = match self.config.norm {
                NormPlacement::Post => {
                    let att = self.self_attention(g, p, hid, lp, valid, &mut mode)?;
                    let att = self.dropout(g, att, &mut mode)?;
                    let sum = g.add(hid, att)?;
                    let hid = self.norm(g, p, sum, lp.attention_norm)?;
                    let ff = self.feed_forward(g, p, hid, lp)?;
                    let ff = self.dropout(g, ff, &mut mode)?;
                    let sum = g.add(hid, ff)?;
                    self.norm(g, p, sum, lp.ff_norm)?
                }
                NormPlacement::Pre => {
                    let normed = self.norm(g, p, hid, lp.attention_norm)?;
                    let att = self.self_attention(g, p, normed, lp, valid, &mut mode)?;
                    let att = self.dropout(g, att, &mut mode)?;
                    let hid = g.add(hid, att)?;
                    let normed = self.norm(g, p, hid, lp.ff_norm)?;
                    let ff = self.feed_forward(g, p, normed, lp)?;
                    let ff = self.dropout(g, ff, &mut mode)?;
                    g.add(hid, ff)?
                }
            };
            outputs.push(hid);
        }
        if self.config.norm == NormPlacement::Pre {
            let last = outputs.pop().expect("at least one layer");
            outputs.push(self.norm(g, p, last, self.encoder.final_norm)?);
        }
        Ok(outputs)
    }

    /// Per-frame affine → activation → affine back to the input dimension.
    pub fn reconstruct(&self, g: &mut Graph<T>, p: &[NodeId], h_last: NodeId) -> Result<NodeId> {
        let h = self.affine(g, p, h_last, self.head.hidden)?;
        let h = g.activation(h, Activation::from(self.config.activation));
        self.affine(g, p, h, self.head.out)
    }

    /// Eager evaluation-mode encoding; returns every layer's hidden states.
    pub fn encode_eval(&self, x: &Tensor<T>, valid: &[bool]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let xn = g.constant(x.clone());
        let outs = self.encode(&mut g, &p, xn, valid, Mode::Eval)?;
        Ok(outs.into_iter().map(|id| g.value(id).clone()).collect())
    }
}

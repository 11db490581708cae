use serde::{Deserialize, Serialize};

use crate::error::{Result, TeraError};
use crate::numeric::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Gelu,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// Residual add, then LayerNorm (original Transformer).
    Post,
    /// LayerNorm on the sublayer input, final LayerNorm on the stack output.
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Micro,
    Base,
    Medium,
    Large,
    Xlarge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub input_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_norm")]
    pub norm: NormPlacement,
    /// Add fixed sinusoidal position encodings after the input projection.
    #[serde(default = "default_true")]
    pub position_encoding: bool,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_activation() -> ActivationKind {
    ActivationKind::Gelu
}
fn default_norm() -> NormPlacement {
    NormPlacement::Post
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn preset(preset: Preset, input_dim: usize) -> Self {
        let (n_layers, d_model, n_heads, d_ff) = match preset {
            Preset::Micro => (2, 32, 2, 64),
            Preset::Base => (3, 768, 12, 3072),
            Preset::Medium => (6, 768, 12, 3072),
            Preset::Large => (12, 768, 12, 3072),
            Preset::Xlarge => (24, 768, 12, 3072),
        };
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            dropout: default_dropout(),
            input_dim,
            activation: default_activation(),
            norm: default_norm(),
            position_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TeraError::Config(format!("model.{m}")));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Named parameter shapes in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, h) = (self.d_model, self.d_ff, self.input_dim);
        let mut out = vec![
            ("encoder.input.weight".to_string(), vec![h, d]),
            ("encoder.input.bias".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("encoder.layers.{l}");
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("{p}.attention.{proj}.weight"), vec![d, d]));
                out.push((format!("{p}.attention.{proj}.bias"), vec![d]));
            }
            out.push((format!("{p}.attention_norm.gain"), vec![d]));
            out.push((format!("{p}.attention_norm.bias"), vec![d]));
            out.push((format!("{p}.ff.in.weight"), vec![d, f]));
            out.push((format!("{p}.ff.in.bias"), vec![f]));
            out.push((format!("{p}.ff.out.weight"), vec![f, d]));
            out.push((format!("{p}.ff.out.bias"), vec![d]));
            out.push((format!("{p}.ff_norm.gain"), vec![d]));
            out.push((format!("{p}.ff_norm.bias"), vec![d]));
        }
        out.push(("encoder.final_norm.gain".into(), vec![d]));
        out.push(("encoder.final_norm.bias".into(), vec![d]));
        out.push(("head.hidden.weight".into(), vec![d, d]));
        out.push(("head.hidden.bias".into(), vec![d]));
        out.push(("head.out.weight".into(), vec![d, h]));
        out.push(("head.out.bias".into(), vec![h]));
        out
    }

    /// Scalars in the Transformer layers alone (no input projection, final norm or head).
    pub fn encoder_layer_param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("encoder.layers."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

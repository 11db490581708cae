//! Using a pre-trained encoder downstream: last-layer or weighted-sum
//! extraction from a frozen encoder, and joint fine-tuning with a classifier.

mod downstream;

pub use downstream::{build_downstream, Downstream, DownstreamStep};

use serde::{Deserialize, Serialize};

use crate::encoder::{Mode, TeraModel};
use crate::error::{Result, TeraError};
use crate::features::{FeatureKind, FeatureMatrix};
use crate::numeric::{Graph, NodeId, Tensor};
use crate::pretrain::pad_batch;

/// Encoders this deep are refused for fine-tuning: they do not train stably.
pub const MAX_FINETUNE_LAYERS: usize = 24;

/// Fine-tuning rate of the 3-layer base encoder; halved per doubling of depth.
pub const BASE_FINETUNE_LR: f64 = 2e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    ExtractLast,
    ExtractWs,
    Finetune,
    FinetuneWs,
}

impl TransferMode {
    pub fn is_finetune(self) -> bool {
        matches!(self, TransferMode::Finetune | TransferMode::FinetuneWs)
    }

    pub fn uses_weighted_sum(self) -> bool {
        matches!(self, TransferMode::ExtractWs | TransferMode::FinetuneWs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub mode: TransferMode,
    /// One logit per encoder layer, softmax-normalized when combined.
    pub ws_weights: Vec<f32>,
    /// Global scale γ applied to the weighted sum.
    pub ws_scale: f32,
    /// Encoder learning rate when fine-tuning; derived from depth if unset.
    pub finetune_lr: Option<f64>,
}

impl TransferConfig {
    /// Equal layer weights and γ = 1.
    pub fn new(mode: TransferMode, n_layers: usize) -> Self {
        TransferConfig { mode, ws_weights: vec![0.0; n_layers], ws_scale: 1.0, finetune_lr: None }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.ws_weights.len() != n_layers {
            return Err(TeraError::Config(format!("ws_weights has {} entries for {n_layers} layers", self.ws_weights.len())));
        }
        if !self.ws_scale.is_finite() || self.ws_weights.iter().any(|w| !w.is_finite()) {
            return Err(TeraError::Config("weighted-sum parameters must be finite".into()));
        }
        if self.finetune_lr.is_some_and(|lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(TeraError::Config("finetune_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        softmax(&self.ws_weights)
    }
}

pub fn softmax(w: &[f32]) -> Vec<f64> {
    let max = w.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = w.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Encoder learning rate for fine-tuning an `n_layers`-deep model.
pub fn finetune_lr_for_depth(n_layers: usize) -> Result<f64> {
    if n_layers >= MAX_FINETUNE_LAYERS {
        return Err(TeraError::Config(format!(
            "fine-tuning a {n_layers}-layer encoder is refused: {MAX_FINETUNE_LAYERS} or more layers are too unstable to fine-tune; use extract_last or extract_ws"
        )));
    }
    if n_layers == 0 {
        return Err(TeraError::Config("encoder has no layers".into()));
    }
    Ok(BASE_FINETUNE_LR / (n_layers as f64 / 3.0))
}

/// Last layer, or `γ·Σ softmax(w)_i·h_i` with `ws: [1, n_layers]`, `scale: [1]`.
pub fn combine_layers(g: &mut Graph<f32>, layers: &[NodeId], mode: TransferMode, ws: NodeId, scale: NodeId) -> Result<NodeId> {
    let last = *layers.last().ok_or_else(|| TeraError::Contract("no encoder layers to combine".into()))?;
    if !mode.uses_weighted_sum() {
        return Ok(last);
    }
    let w = g.softmax_rows(ws, None)?;
    let mut acc = g.scale_by_elem(layers[0], w, 0)?;
    for (i, &h) in layers.iter().enumerate().skip(1) {
        let term = g.scale_by_elem(h, w, i)?;
        acc = g.add(acc, term)?;
    }
    g.scale_by_elem(acc, scale, 0)
}

pub(crate) fn ws_tensors(tc: &TransferConfig) -> (Tensor<f32>, Tensor<f32>) {
    let n = tc.ws_weights.len();
    (Tensor::new(vec![1, n], tc.ws_weights.clone()).expect("row shape"), Tensor::new(vec![1], vec![tc.ws_scale]).expect("scalar shape"))
}

fn check_input(fm: &FeatureMatrix, model: &TeraModel<f32>) -> Result<()> {
    if fm.num_channels() != model.config.input_dim {
        return Err(TeraError::Incompatible(format!(
            "{}: {:?} features with {} channels, encoder expects {}",
            fm.utterance_id,
            fm.kind,
            fm.num_channels(),
            model.config.input_dim
        )));
    }
    Ok(())
}

/// Evaluation-mode representation `[L, d_model]` of one utterance. The
/// encoder is only read.
pub fn extract_representation(x: &FeatureMatrix, model: &TeraModel<f32>, tc: &TransferConfig) -> Result<Tensor<f32>> {
    Ok(extract_batch(&[x], model, tc)?.pop().expect("one output per input"))
}

/// Representations for several utterances, zero-padded to a common length
/// internally and trimmed back to each utterance's own frames.
pub fn extract_batch(xs: &[&FeatureMatrix], model: &TeraModel<f32>, tc: &TransferConfig) -> Result<Vec<Tensor<f32>>> {
    tc.validate(model.config.n_layers)?;
    for fm in xs {
        check_input(fm, model)?;
    }
    let padded = pad_batch(&xs.iter().map(|fm| fm.frames.clone()).collect::<Vec<_>>())?;
    let (ws, scale) = ws_tensors(tc);
    let mut out = Vec::with_capacity(xs.len());
    for ((x, valid), fm) in padded.inputs.into_iter().zip(&padded.valid).zip(xs) {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, |_| false);
        let xn = g.constant(x);
        let layers = model.encode(&mut g, &p, xn, valid, Mode::Eval)?;
        let (wn, sn) = (g.constant(ws.clone()), g.constant(scale.clone()));
        let rep = combine_layers(&mut g, &layers, tc.mode, wn, sn)?;
        let idx: Vec<usize> = (0..fm.num_frames()).collect();
        out.push(g.value(rep).gather_rows(&idx));
    }
    Ok(out)
}

/// Wrap a representation for storage as a feature file.
pub fn representation_matrix(source: &FeatureMatrix, repr: Tensor<f32>) -> Result<FeatureMatrix> {
    FeatureMatrix::new(source.utterance_id.clone(), source.speaker_id.clone(), repr, FeatureKind::Other, source.frame_shift_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, ModelConfig, Preset};
    use crate::features::FRAME_SHIFT_MS;
    use crate::rng::TeraRng;

    fn model(layers: usize) -> TeraModel<f32> {
        let cfg = ModelConfig { n_layers: layers, dropout: 0.0, ..ModelConfig::preset(Preset::Micro, 6) };
        init_params(&cfg, 3).unwrap()
    }

    fn utt(len: usize, seed: u64) -> FeatureMatrix {
        let x = Tensor::randn(&[len, 6], 1.0, &mut TeraRng::seed_from_u64(seed));
        FeatureMatrix::new(format!("u{seed}"), "s", x, FeatureKind::Other, FRAME_SHIFT_MS).unwrap()
    }

    #[test]
    fn single_layer_ws_equals_last() {
        let m = model(1);
        let x = utt(9, 1);
        let last = extract_representation(&x, &m, &TransferConfig::new(TransferMode::ExtractLast, 1)).unwrap();
        let tc = TransferConfig { ws_weights: vec![3.7], ..TransferConfig::new(TransferMode::ExtractWs, 1) };
        let ws = extract_representation(&x, &m, &tc).unwrap();
        assert!(last.max_abs_diff(&ws) < 1e-6);
    }

    #[test]
    fn equal_weights_average_layers() {
        let m = model(2);
        let x = utt(8, 2);
        let layers = m.encode_eval(&x.frames, &[true; 8]).unwrap();
        let ws = extract_representation(&x, &m, &TransferConfig::new(TransferMode::ExtractWs, 2)).unwrap();
        let mean = Tensor::new(vec![8, 32], layers[0].data().iter().zip(layers[1].data()).map(|(a, b)| (a + b) / 2.0).collect()).unwrap();
        assert!(ws.max_abs_diff(&mean) < 1e-6);
        let w = TransferConfig::new(TransferMode::ExtractWs, 2).normalized_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn raising_a_layer_weight_moves_toward_it() {
        let m = model(2);
        let x = utt(8, 3);
        let layers = m.encode_eval(&x.frames, &[true; 8]).unwrap();
        let base = TransferConfig { ws_weights: vec![0.3, -0.2], ..TransferConfig::new(TransferMode::ExtractWs, 2) };
        let eps = 1e-2;
        for k in 0..2 {
            let mut up = base.clone();
            up.ws_weights[k] += eps;
            let a = extract_representation(&x, &m, &base).unwrap();
            let b = extract_representation(&x, &m, &up).unwrap();
            let dist = |r: &Tensor<f32>| r.data().iter().zip(layers[k].data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>();
            assert!(dist(&b) < dist(&a), "layer {k}");
        }
    }

    #[test]
    fn padded_batch_matches_single() {
        let m = model(2);
        let xs = [utt(5, 4), utt(11, 5), utt(8, 6)];
        let tc = TransferConfig::new(TransferMode::ExtractLast, 2);
        let batch = extract_batch(&xs.iter().collect::<Vec<_>>(), &m, &tc).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let single = extract_representation(x, &m, &tc).unwrap();
            assert_eq!(single.shape(), b.shape());
            assert!(single.max_abs_diff(b) < 1e-5);
        }
    }

    #[test]
    fn dimension_mismatch_is_incompatible() {
        let m = model(1);
        let x = FeatureMatrix::new("u", "s", Tensor::zeros(&[4, 5]), FeatureKind::Other, FRAME_SHIFT_MS).unwrap();
        let err = extract_representation(&x, &m, &TransferConfig::new(TransferMode::ExtractLast, 1)).unwrap_err();
        assert!(matches!(err, TeraError::Incompatible(_)));
    }

    #[test]
    fn depth_learning_rates() {
        assert_eq!(finetune_lr_for_depth(3).unwrap(), 2e-4);
        assert_eq!(finetune_lr_for_depth(6).unwrap(), 1e-4);
        assert_eq!(finetune_lr_for_depth(12).unwrap(), 5e-5);
        assert!(matches!(finetune_lr_for_depth(24), Err(TeraError::Config(m)) if m.contains("unstable")));
    }
}

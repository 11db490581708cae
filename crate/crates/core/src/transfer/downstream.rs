use rand_core::RngCore;

use crate::alteration::{specaugment_mask, SpecAugmentConfig};
use crate::encoder::{Mode, TeraModel};
use crate::error::{Result, TeraError};
use crate::numeric::{Graph, NodeId, ParamStore, Tensor};
use crate::pretrain::{AdamConfig, AdamState};
use crate::probes::{prepare_input_node, Classifier, ProbeExample, ProbeSpec};
use crate::rng::TeraRng;

use super::{combine_layers, finetune_lr_for_depth, ws_tensors, TransferConfig};

/// Encoder, optional layer weighting and classifier trained as one model.
/// Examples carry raw input features; the encoder runs inside every step.
#[derive(Clone, Debug)]
pub struct Downstream {
    pub model: TeraModel<f32>,
    pub transfer: TransferConfig,
    pub spec: ProbeSpec,
    pub classifier: Classifier,
    /// `[ws_weights [1, n_layers], ws_scale [1]]`.
    pub weighting: ParamStore<f32>,
    /// Masking applied to inputs while fine-tuning.
    pub specaugment: SpecAugmentConfig,
    pub encoder_lr: Option<f64>,
    encoder_adam: Option<AdamState>,
    weighting_adam: AdamState,
    classifier_adam: AdamState,
    rng: TeraRng,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamStep {
    pub loss: f32,
    /// Encoder parameters that received a gradient this step.
    pub encoder_gradients: usize,
    /// Softmax-normalized layer weights after the update.
    pub layer_weights: Vec<f64>,
}

/// Attach a freshly initialized classifier to a pre-trained encoder. The
/// reconstruction head is never used or updated.
pub fn build_downstream(model: &TeraModel<f32>, tc: &TransferConfig, spec: &ProbeSpec, seed: u64) -> Result<Downstream> {
    spec.validate()?;
    tc.validate(model.config.n_layers)?;
    let encoder_lr = if tc.mode.is_finetune() {
        let depth_lr = finetune_lr_for_depth(model.config.n_layers)?;
        Some(tc.finetune_lr.unwrap_or(depth_lr))
    } else {
        None
    };
    let mut rng = TeraRng::derive(seed, &[0x6473]);
    let classifier = Classifier::new(spec, model.config.d_model, &mut rng)?;
    let (ws, scale) = ws_tensors(tc);
    let mut weighting = ParamStore::new();
    weighting.push("transfer.ws_weights", ws);
    weighting.push("transfer.ws_scale", scale);
    Ok(Downstream {
        encoder_adam: encoder_lr.map(|_| AdamState::new(&model.store)),
        weighting_adam: AdamState::new(&weighting),
        classifier_adam: AdamState::new(&classifier.store),
        model: model.clone(),
        transfer: tc.clone(),
        spec: spec.clone(),
        classifier,
        weighting,
        specaugment: SpecAugmentConfig::default(),
        encoder_lr,
        rng,
        step: 0,
    })
}

struct Bound {
    encoder: Vec<NodeId>,
    weighting: Vec<NodeId>,
    classifier: Vec<NodeId>,
}

impl Downstream {
    pub fn layer_weights(&self) -> Vec<f64> {
        super::softmax(self.weighting.tensors()[0].data())
    }

    fn bind(&self, g: &mut Graph<f32>, train: bool) -> Bound {
        let finetune = train && self.transfer.mode.is_finetune();
        let ws = train && self.transfer.mode.uses_weighted_sum();
        Bound {
            encoder: self.model.store.bind(g, |id| finetune && self.model.is_encoder_param(id)),
            weighting: self.weighting.bind(g, |_| ws),
            classifier: self.classifier.store.bind(g, |_| train),
        }
    }

    /// Logits for one utterance of raw features.
    fn logits(&self, g: &mut Graph<f32>, b: &Bound, x: Tensor<f32>, mode: Mode) -> Result<NodeId> {
        if x.cols() != self.model.config.input_dim {
            return Err(TeraError::Incompatible(format!("{} input channels, encoder expects {}", x.cols(), self.model.config.input_dim)));
        }
        let valid = vec![true; x.rows()];
        let xn = g.constant(x);
        let layers = self.model.encode(g, &b.encoder, xn, &valid, mode)?;
        let rep = combine_layers(g, &layers, self.transfer.mode, b.weighting[0], b.weighting[1])?;
        let inp = prepare_input_node(g, &self.spec, rep)?;
        self.classifier.forward(g, &b.classifier, inp)
    }

    /// Frame-weighted mean cross-entropy over `batch`.
    fn batch_loss(&self, g: &mut Graph<f32>, b: &Bound, batch: &[ProbeExample], mut step_rng: Option<&mut TeraRng>) -> Result<NodeId> {
        let total: usize = batch.iter().map(|e| e.labels.len()).sum();
        if total == 0 {
            return Err(TeraError::EmptyInput("downstream batch has no labels".into()));
        }
        let mut loss: Option<NodeId> = None;
        for e in batch {
            let (x, mode) = match step_rng.as_deref_mut() {
                Some(rng) if self.transfer.mode.is_finetune() => (specaugment_mask(&e.features, &self.specaugment, rng), Mode::Train(rng)),
                _ => (e.features.clone(), Mode::Eval),
            };
            let logits = self.logits(g, b, x, mode)?;
            if g.value(logits).rows() != e.labels.len() {
                return Err(TeraError::Data(format!("example {}: {} labels for {} outputs", e.id, e.labels.len(), g.value(logits).rows())));
            }
            if let Some(&bad) = e.labels.iter().find(|&&c| c >= self.spec.n_classes) {
                return Err(TeraError::Data(format!("example {}: label {bad} outside [0, {})", e.id, self.spec.n_classes)));
            }
            let ce = g.cross_entropy(logits, e.labels.clone())?;
            let term = g.scale(ce, e.labels.len() as f32 / total as f32);
            loss = Some(match loss {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(loss.expect("non-empty batch"))
    }

    /// One Adam update. Frozen modes leave the encoder untouched; fine-tuning
    /// updates it at the depth-scaled rate with SpecAugment on the inputs.
    pub fn train_step(&mut self, batch: &[ProbeExample]) -> Result<DownstreamStep> {
        if batch.is_empty() {
            return Err(TeraError::EmptyInput("downstream batch is empty".into()));
        }
        let mut step_rng = TeraRng::derive(self.rng.next_u64(), &[self.step]);
        let mut g = Graph::new();
        let b = self.bind(&mut g, true);
        let loss = self.batch_loss(&mut g, &b, batch, Some(&mut step_rng))?;
        let (value, mut grads) = g.value_and_grad(loss)?;
        let mut take = |ids: &[NodeId]| ids.iter().map(|&id| grads.take(id)).collect::<Vec<Option<Tensor<f32>>>>();
        let enc = take(&b.encoder);
        let ws = take(&b.weighting);
        let clf = take(&b.classifier);
        let encoder_gradients = enc.iter().filter(|g| g.is_some()).count();

        let cfg = AdamConfig::default();
        if let (Some(adam), Some(lr)) = (self.encoder_adam.as_mut(), self.encoder_lr) {
            adam.step(&cfg, &mut self.model.store, &enc, |_| lr);
        }
        let lr = self.spec.lr;
        self.weighting_adam.step(&cfg, &mut self.weighting, &ws, |_| lr);
        self.classifier_adam.step(&cfg, &mut self.classifier.store, &clf, |_| lr);
        self.step += 1;
        Ok(DownstreamStep { loss: value, encoder_gradients, layer_weights: self.layer_weights() })
    }

    /// Evaluation-mode loss without augmentation or dropout.
    pub fn loss(&self, examples: &[ProbeExample]) -> Result<f32> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let loss = self.batch_loss(&mut g, &b, examples, None)?;
        Ok(g.value(loss).data()[0])
    }

    /// Fraction of correctly classified items.
    pub fn accuracy(&self, examples: &[ProbeExample]) -> Result<f64> {
        let (mut correct, mut total) = (0usize, 0usize);
        for e in examples {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let logits = self.logits(&mut g, &b, e.features.clone(), Mode::Eval)?;
            let lv = g.value(logits);
            for (r, &label) in e.labels.iter().enumerate() {
                let row = lv.row(r);
                let pred = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                correct += usize::from(pred == label);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, ModelConfig, Preset};
    use crate::probes::{ClassifierKind, ProbeTask};
    use crate::transfer::TransferMode;

    fn setup(mode: TransferMode) -> (Downstream, Vec<ProbeExample>) {
        let cfg = ModelConfig::preset(Preset::Micro, 6);
        let model = init_params(&cfg, 1).unwrap();
        let spec = ProbeSpec::new(ProbeTask::PhoneFrame, ClassifierKind::Linear, 3, 1);
        let mut ds = build_downstream(&model, &TransferConfig::new(mode, 2), &spec, 0).unwrap();
        ds.specaugment = SpecAugmentConfig { time_width: 3, freq_width: 1, ..Default::default() };
        let mut rng = TeraRng::seed_from_u64(2);
        let ex = (0..4)
            .map(|i| ProbeExample {
                id: format!("u{i}"),
                features: Tensor::randn(&[10, 6], 1.0, &mut rng),
                labels: (0..10).map(|t| (t + i) % 3).collect(),
            })
            .collect();
        (ds, ex)
    }

    #[test]
    fn frozen_encoder_never_changes() {
        for mode in [TransferMode::ExtractLast, TransferMode::ExtractWs] {
            let (mut ds, ex) = setup(mode);
            let before = ds.model.store.clone();
            for _ in 0..100 {
                let s = ds.train_step(&ex[..2]).unwrap();
                assert_eq!(s.encoder_gradients, 0);
                assert!((s.layer_weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            assert_eq!(ds.model.store, before);
        }
    }

    #[test]
    fn finetune_updates_encoder_only() {
        let (mut ds, ex) = setup(TransferMode::FinetuneWs);
        let before = ds.model.store.clone();
        let s = ds.train_step(&ex).unwrap();
        assert!(s.encoder_gradients > 0);
        for id in before.ids() {
            // the final norm only exists in the pre-norm layout
            if before.name(id).starts_with("encoder.final_norm") {
                continue;
            }
            let changed = before.get(id) != ds.model.store.get(id);
            assert_eq!(changed, ds.model.is_encoder_param(id), "{}", before.name(id));
        }
        assert!((ds.encoder_lr.unwrap() - 3e-4).abs() < 1e-15);
    }

    #[test]
    fn deep_finetune_refused() {
        let cfg = ModelConfig { n_layers: 24, ..ModelConfig::preset(Preset::Micro, 6) };
        let model = init_params(&cfg, 1).unwrap();
        let spec = ProbeSpec::new(ProbeTask::PhoneFrame, ClassifierKind::Linear, 3, 1);
        let err = build_downstream(&model, &TransferConfig::new(TransferMode::Finetune, 24), &spec, 0).unwrap_err();
        assert!(matches!(err, TeraError::Config(m) if m.contains("too unstable")));
        build_downstream(&model, &TransferConfig::new(TransferMode::ExtractLast, 24), &spec, 0).unwrap();
    }

    #[test]
    fn loss_decreases_with_training() {
        let (mut ds, ex) = setup(TransferMode::ExtractLast);
        let start = ds.loss(&ex).unwrap();
        for _ in 0..50 {
            ds.train_step(&ex).unwrap();
        }
        assert!(ds.loss(&ex).unwrap() < start);
        assert!(ds.accuracy(&ex).unwrap() > 0.0);
    }
}

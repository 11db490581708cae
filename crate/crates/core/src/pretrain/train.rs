use std::fs;
use std::path::{Path, PathBuf};

use rand_core::RngCore;

use super::adam::{clip_global_norm, AdamState};
use super::checkpoint::{Checkpoint, LossPoint};
use super::loss::{loss_mask, L1Accumulator};
use super::schedule::lr_at_step;
use super::TrainConfig;
use crate::alteration::{alter, AlterationRecord};
use crate::encoder::{init_params, Mode, TeraModel};
use crate::error::{Result, TeraError};
use crate::features::{Corpus, FeatureMatrix};
use crate::numeric::{Graph, Tensor};
use crate::rng::TeraRng;

const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const EPOCH_STREAM: u64 = 0x0065_706f_6368;
const DROPOUT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: TeraModel<f32>,
    pub adam: AdamState<f32>,
    pub rng: TeraRng,
    pub history: Vec<LossPoint>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = init_params(&cfg.model, cfg.seed)?;
        let adam = AdamState::new(&model.store);
        Ok(TrainState { step: 0, model, adam, rng: TeraRng::derive(cfg.seed, &[TRAIN_STREAM]), history: Vec::new() })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            step: self.step,
            rng: self.rng.clone(),
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(&model.store));
        Ok(TrainState { step: ck.step, model, adam, rng: ck.rng, history: ck.history })
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f64,
    pub records: Vec<AlterationRecord>,
}

/// Sequences zero-padded to the longest member, with per-frame validity.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub inputs: Vec<Tensor<f32>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn pad_batch(seqs: &[Tensor<f32>]) -> Result<PaddedBatch> {
    let max = seqs.iter().map(Tensor::rows).max().ok_or_else(|| TeraError::EmptyInput("empty batch".into()))?;
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut valid = Vec::with_capacity(seqs.len());
    for s in seqs {
        let (l, h) = (s.rows(), s.cols());
        let mut data = s.data().to_vec();
        data.resize(max * h, 0.0);
        inputs.push(Tensor::new(vec![max, h], data)?);
        let mut v = vec![true; l];
        v.resize(max, false);
        valid.push(v);
    }
    Ok(PaddedBatch { inputs, valid })
}

/// Corpus indices of the batch taken at `step`: the corpus is walked in
/// epochs, each a fresh seeded permutation, and batches run across epoch
/// boundaries.
pub fn batch_indices(corpus_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    let start = step as usize * batch_size;
    (start..start + batch_size)
        .map(|g| {
            let epoch = (g / corpus_len) as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..corpus_len).collect();
                TeraRng::derive(seed, &[EPOCH_STREAM, epoch]).shuffle(&mut perm);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[g % corpus_len]
        })
        .collect()
}

/// Alter each utterance, reconstruct it, and take one Adam step on the L1 loss.
pub fn train_step(state: &mut TrainState, batch: &[&FeatureMatrix], cfg: &TrainConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(TeraError::EmptyInput("training batch has no utterances".into()));
    }
    let fault = |step: u64| move |e: TeraError| match e {
        TeraError::NumericFault { node, op } => TeraError::StepFault { step, detail: format!("non-finite value at node {node} ({op})") },
        other => other,
    };
    let step_no = state.step + 1;
    let step_seed = state.rng.next_u64();

    let mut altered = Vec::with_capacity(batch.len());
    let mut records = Vec::with_capacity(batch.len());
    for (i, fm) in batch.iter().enumerate() {
        if fm.num_channels() != cfg.model.input_dim {
            return Err(TeraError::Incompatible(format!(
                "{}: {} channels, model expects {}",
                fm.utterance_id,
                fm.num_channels(),
                cfg.model.input_dim
            )));
        }
        let (xh, rec) = alter(fm, &cfg.alteration, &mut TeraRng::derive(step_seed, &[i as u64]))?;
        altered.push(xh);
        records.push(rec);
    }
    let inputs = pad_batch(&altered)?;
    let targets = pad_batch(&batch.iter().map(|fm| fm.frames.clone()).collect::<Vec<_>>())?;

    let model = &state.model;
    let mut g = Graph::<f32>::new();
    let p = model.store.bind(&mut g, |_| true);
    let mut acc = L1Accumulator::new();
    for (i, (x, valid)) in inputs.inputs.iter().zip(&inputs.valid).enumerate() {
        let xn = g.constant(x.clone());
        let mut drop_rng = TeraRng::derive(step_seed, &[i as u64, DROPOUT_STREAM]);
        let hidden = model.encode(&mut g, &p, xn, valid, Mode::Train(&mut drop_rng))?;
        let pred = model.reconstruct(&mut g, &p, *hidden.last().expect("non-empty stack"))?;
        let mask = loss_mask(valid, x.cols(), cfg.loss_scope, Some(&records[i]));
        acc.add(&mut g, pred, targets.inputs[i].clone(), mask)?;
    }
    let loss_node = acc.finish(&mut g)?;
    let (loss, mut grads) = g.value_and_grad(loss_node).map_err(fault(step_no))?;
    if !loss.is_finite() {
        return Err(TeraError::StepFault { step: step_no, detail: "loss is not finite".into() });
    }
    let mut param_grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&id| grads.take(id)).collect();
    let grad_norm = clip_global_norm(&mut param_grads, cfg.grad_clip);
    let lr = lr_at_step(step_no as f64, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
    state.adam.step(&cfg.adam, &mut state.model.store, &param_grads, |_| lr);
    state.step = step_no;
    state.history.push(LossPoint { step: step_no, loss, lr: lr as f32 });
    Ok(StepReport { step: step_no, loss, lr, grad_norm, records })
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.tckp"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| TeraError::io(dir, e))? {
        let path = entry.map_err(|e| TeraError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".tckp")).and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Train for exactly `cfg.total_steps` steps. With a checkpoint directory,
/// periodic and final checkpoints plus a `loss.csv` sidecar are written there,
/// and a run resumes from the newest `step-*.tckp` it finds.
pub fn pretrain(
    features: &[FeatureMatrix],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainState> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(TeraError::EmptyInput("pre-training corpus is empty".into()));
    }
    let mut state = TrainState::new(cfg)?;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| TeraError::io(dir, e))?;
        if let Some(path) = latest_checkpoint(dir)? {
            let ck = Checkpoint::load(&path)?;
            if ck.config != *cfg {
                return Err(TeraError::Incompatible(format!(
                    "{}: checkpoint was written with a different training config",
                    path.display()
                )));
            }
            state = TrainState::from_checkpoint(ck)?;
        }
    }
    while state.step < cfg.total_steps {
        let idx = batch_indices(features.len(), cfg.batch_size, cfg.seed, state.step);
        let batch: Vec<&FeatureMatrix> = idx.iter().map(|&i| &features[i]).collect();
        let report = train_step(&mut state, &batch, cfg)?;
        on_step(&report);
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if state.step % every == 0 && state.step < cfg.total_steps {
                state.to_checkpoint(cfg).save(checkpoint_path(dir, state.step))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let ck = state.to_checkpoint(cfg);
        ck.save(dir.join("final.tckp"))?;
        crate::util::write_text_atomic(&dir.join("loss.csv"), &ck.history_csv())?;
    }
    Ok(state)
}

/// [`pretrain`] over a manifest-backed corpus of TFEA1 files.
pub fn pretrain_run(corpus: &Corpus, cfg: &TrainConfig, checkpoint_dir: &Path) -> Result<Checkpoint> {
    let features = corpus.load()?;
    let state = pretrain(&features, cfg, Some(checkpoint_dir), |_| {})?;
    Ok(state.to_checkpoint(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 7;
        let mut seen = Vec::new();
        for step in 0..7 {
            seen.extend(batch_indices(n, 3, 42, step));
        }
        // 21 draws = 3 full epochs
        for epoch in seen.chunks(7) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
        assert_ne!(seen[..7], seen[7..14]);
    }

    #[test]
    fn padding_marks_valid_frames() {
        let a = Tensor::ones(&[3, 2]);
        let b = Tensor::ones(&[5, 2]);
        let pb = pad_batch(&[a, b]).unwrap();
        assert_eq!(pb.inputs[0].shape(), &[5, 2]);
        assert_eq!(pb.valid[0], vec![true, true, true, false, false]);
        assert_eq!(pb.inputs[0].row(4), &[0.0, 0.0]);
        assert!(pb.valid[1].iter().all(|&v| v));
    }
}

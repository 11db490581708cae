//! Self-checks shared by the command line and the test suites: 64-bit
//! finite-difference gradient checks and sampling statistics of the
//! alteration policies.

use std::fmt;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::alteration::{alter, channel_alteration, magnitude_alteration, time_alteration, AlterationConfig, TimeMode};
use crate::encoder::{init_params, Mode, ModelConfig, Preset};
use crate::error::Result;
use crate::features::{FeatureKind, FeatureMatrix, FRAME_SHIFT_MS};
use crate::numeric::{Activation, Graph, NodeId, ParamStore, Tensor};
use crate::pretrain::{loss_mask, pad_batch, L1Accumulator, LossScope};
use crate::rng::TeraRng;

/// One named measurement against its expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    /// Largest accepted `|observed − expected|`.
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, observed: f64, expected: f64, tolerance: f64) -> Self {
        let pass = (observed - expected).abs() <= tolerance;
        Check { name: name.into(), observed, expected, tolerance, pass }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} observed {:.6e}  expected {:.6e}  tolerance {:.3e}",
            if self.pass { "ok" } else { "FAIL" },
            self.name,
            self.observed,
            self.expected,
            self.tolerance
        )
    }
}

/// Differentiable operations covered by [`op_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    Mul,
    MulConst,
    Scale,
    Gelu,
    Relu,
    Dropout,
    LayerNorm,
    Softmax,
    MaskedSoftmax,
    SliceCols,
    ConcatCols,
    GatherRows,
    ScaleByElem,
    Sum,
    L1Sum,
    CrossEntropy,
}

impl GradOp {
    pub const ALL: [GradOp; 20] = [
        GradOp::MatMul,
        GradOp::MatMulBt,
        GradOp::Add,
        GradOp::AddRow,
        GradOp::Mul,
        GradOp::MulConst,
        GradOp::Scale,
        GradOp::Gelu,
        GradOp::Relu,
        GradOp::Dropout,
        GradOp::LayerNorm,
        GradOp::Softmax,
        GradOp::MaskedSoftmax,
        GradOp::SliceCols,
        GradOp::ConcatCols,
        GradOp::GatherRows,
        GradOp::ScaleByElem,
        GradOp::Sum,
        GradOp::L1Sum,
        GradOp::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::MatMul => "matmul",
            GradOp::MatMulBt => "matmul_bt",
            GradOp::Add => "add",
            GradOp::AddRow => "add_row",
            GradOp::Mul => "mul",
            GradOp::MulConst => "mul_const",
            GradOp::Scale => "scale",
            GradOp::Gelu => "gelu",
            GradOp::Relu => "relu",
            GradOp::Dropout => "dropout",
            GradOp::LayerNorm => "layer_norm",
            GradOp::Softmax => "softmax_rows",
            GradOp::MaskedSoftmax => "masked_softmax_rows",
            GradOp::SliceCols => "slice_cols",
            GradOp::ConcatCols => "concat_cols",
            GradOp::GatherRows => "gather_rows",
            GradOp::ScaleByElem => "scale_by_elem",
            GradOp::Sum => "sum",
            GradOp::L1Sum => "l1_sum",
            GradOp::CrossEntropy => "cross_entropy",
        }
    }
}

/// Random tensor whose entries keep at least `gap` away from zero, so kinked
/// functions stay differentiable within the finite-difference step.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut TeraRng) -> Tensor<f64> {
    let mut t = Tensor::randn(shape, 1.0, rng);
    t.data_mut().iter_mut().for_each(|v: &mut f64| *v += gap * v.signum());
    t
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

fn op_case(op: GradOp, rng: &mut TeraRng) -> (Vec<Tensor<f64>>, Build) {
    let m = rng.inclusive(1, 4);
    let k = rng.inclusive(1, 4);
    // at width 2 layer norm maps every row to ±1 and its input gradient vanishes
    let n = rng.inclusive(3, 5);
    let randn = |shape: &[usize], rng: &mut TeraRng| Tensor::<f64>::randn(shape, 1.0, rng);
    match op {
        GradOp::MatMul => (vec![randn(&[m, k], rng), randn(&[k, n], rng)], Box::new(|g, x| g.matmul(x[0], x[1]))),
        GradOp::MatMulBt => (vec![randn(&[m, k], rng), randn(&[n, k], rng)], Box::new(|g, x| g.matmul_bt(x[0], x[1]))),
        GradOp::Add => (vec![randn(&[m, n], rng), randn(&[m, n], rng)], Box::new(|g, x| g.add(x[0], x[1]))),
        GradOp::AddRow => (vec![randn(&[m, n], rng), randn(&[n], rng)], Box::new(|g, x| g.add_row(x[0], x[1]))),
        GradOp::Mul => (vec![randn(&[m, n], rng), randn(&[m, n], rng)], Box::new(|g, x| g.mul(x[0], x[1]))),
        GradOp::MulConst => {
            let f = randn(&[m * n], rng).into_data();
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.mul_const(x[0], f.clone())))
        }
        GradOp::Scale => {
            let s = rng.normal(0.0, 2.0);
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| Ok(g.scale(x[0], s))))
        }
        GradOp::Gelu => (vec![randn(&[m, n], rng)], Box::new(|g, x| Ok(g.activation(x[0], Activation::Gelu)))),
        GradOp::Relu => (vec![away_from_zero(&[m, n], 0.1, rng)], Box::new(|g, x| Ok(g.activation(x[0], Activation::Relu)))),
        GradOp::Dropout => {
            let seed = rng.next_u64();
            // re-seeded on every evaluation so each sees the same mask
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.dropout(x[0], 0.3, &mut TeraRng::seed_from_u64(seed))))
        }
        GradOp::LayerNorm => (
            vec![randn(&[m, n], rng), randn(&[n], rng), randn(&[n], rng)],
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-12)),
        ),
        GradOp::Softmax => (vec![randn(&[m, n], rng)], Box::new(|g, x| g.softmax_rows(x[0], None))),
        GradOp::MaskedSoftmax => {
            let mut valid: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.6).collect();
            valid[0] = true;
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.softmax_rows(x[0], Some(&valid))))
        }
        GradOp::SliceCols => {
            let start = rng.below(n);
            let len = rng.inclusive(1, n - start);
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.slice_cols(x[0], start, len)))
        }
        GradOp::ConcatCols => (vec![randn(&[m, n], rng), randn(&[m, k], rng)], Box::new(|g, x| g.concat_cols(&[x[0], x[1]]))),
        GradOp::GatherRows => {
            let idx: Vec<usize> = (0..m + 2).map(|_| rng.below(m)).collect();
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.gather_rows(x[0], idx.clone())))
        }
        GradOp::ScaleByElem => {
            let idx = rng.below(k);
            (vec![randn(&[m, n], rng), randn(&[1, k], rng)], Box::new(move |g, x| g.scale_by_elem(x[0], x[1], idx)))
        }
        GradOp::Sum => (vec![randn(&[m, n], rng)], Box::new(|g, x| Ok(g.sum(x[0])))),
        GradOp::L1Sum => {
            let target = randn(&[m, n], rng);
            let offset = away_from_zero(&[m, n], 0.1, rng);
            let pred = Tensor::new(vec![m, n], target.data().iter().zip(offset.data()).map(|(t, o)| t + o).collect()).expect("shape");
            let mask: Vec<bool> = (0..m * n).map(|_| rng.uniform() < 0.7).collect();
            (vec![pred], Box::new(move |g, x| g.l1_sum(x[0], target.clone(), Some(mask.clone()))))
        }
        GradOp::CrossEntropy => {
            let labels: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
            (vec![randn(&[m, n], rng)], Box::new(move |g, x| g.cross_entropy(x[0], labels.clone())))
        }
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
fn norm_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Largest relative error, over the op's inputs, between reverse-mode and
/// central-difference gradients of `Σ w ⊙ op(x)` for random weights `w`.
pub fn op_gradcheck(op: GradOp, seed: u64) -> Result<f64> {
    let mut rng = TeraRng::derive(seed, &[0x6763, op as u64]);
    let (inputs, build) = op_case(op, &mut rng);
    let probe_out = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).clone()
    };
    let weights = Tensor::<f64>::randn(probe_out.shape(), 1.0, &mut rng).into_data();
    let objective = |g: &mut Graph<f64>, ids: &[NodeId]| -> Result<NodeId> {
        let out = build(g, ids)?;
        let weighted = g.mul_const(out, weights.clone())?;
        Ok(g.sum(weighted))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = objective(&mut g, &ids)?;
    let (_, grads) = g.value_and_grad(loss)?;

    let mut worst = 0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).map_or_else(|| vec![0.0; input.len()], |t| t.data().to_vec());
        let numeric = crate::numeric::finite_difference(
            |x| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs.iter().enumerate().map(|(j, t)| g.constant(if j == i { x.clone() } else { t.clone() })).collect();
                let loss = objective(&mut g, &ids).expect("shapes fixed by the first evaluation");
                g.value(loss).data()[0]
            },
            input,
            1e-6,
        );
        worst = worst.max(norm_relative_error(&analytic, numeric.data(), 1e-10));
    }
    Ok(worst)
}

/// Fourth-order central difference of `f` along `dir`. Unit directions give
/// directional derivatives near 1e-5 here, too small for the two-point rule
/// to resolve against round-off.
fn five_point(f: &impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, dir: &Tensor<f64>, h: f64) -> f64 {
    let at = |t: f64| {
        let moved: Vec<f64> = x.data().iter().zip(dir.data()).map(|(a, d)| a + t * d).collect();
        f(&Tensor::new(x.shape().to_vec(), moved).expect("same shape"))
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

/// Largest relative error between the reverse-mode directional derivative and
/// its central difference, over `directions` random unit directions in the
/// parameter space of a 64-bit micro encoder + head trained on the full L1
/// objective (alteration, padding and dropout included, masks held fixed).
pub fn model_gradcheck(seed: u64, directions: usize) -> Result<f64> {
    let input_dim = 12;
    let config = ModelConfig { dropout: 0.1, ..ModelConfig::preset(Preset::Micro, input_dim) };
    let model = init_params::<f64>(&config, seed)?;
    let mut rng = TeraRng::derive(seed, &[0x6d67]);
    let alteration = AlterationConfig { max_channel_width: 4, ..Default::default() };

    let mut altered = Vec::new();
    let mut targets = Vec::new();
    let mut records = Vec::new();
    for (i, len) in [9usize, 14].into_iter().enumerate() {
        let frames = Tensor::<f32>::randn(&[len, input_dim], 1.0, &mut rng);
        let fm = FeatureMatrix::new(format!("g{i}"), "s", frames, FeatureKind::Other, FRAME_SHIFT_MS)?;
        let (xh, rec) = alter(&fm, &alteration, &mut TeraRng::derive(seed, &[i as u64]))?;
        altered.push(xh);
        targets.push(fm.frames);
        records.push(rec);
    }
    let inputs = pad_batch(&altered)?;
    let padded_targets = pad_batch(&targets)?;
    let drop_seed = rng.next_u64();

    let loss_for = |store: &ParamStore<f64>, g: &mut Graph<f64>, trainable: bool| -> Result<(NodeId, Vec<NodeId>)> {
        let p = store.bind(g, |_| trainable);
        let mut acc = L1Accumulator::new();
        for (i, (x, valid)) in inputs.inputs.iter().zip(&inputs.valid).enumerate() {
            let xn = g.constant(x.cast());
            let mut drop = TeraRng::derive(drop_seed, &[i as u64]);
            let hidden = model.encode(g, &p, xn, valid, Mode::Train(&mut drop))?;
            let pred = model.reconstruct(g, &p, *hidden.last().expect("layers"))?;
            let mask = loss_mask(valid, input_dim, LossScope::FullSequence, Some(&records[i]));
            acc.add(g, pred, padded_targets.inputs[i].cast(), mask)?;
        }
        Ok((acc.finish(g)?, p))
    };

    let mut g = Graph::new();
    let (loss, p) = loss_for(&model.store, &mut g, true)?;
    let (_, grads) = g.value_and_grad(loss)?;
    let flat_grad: Vec<f64> = p
        .iter()
        .zip(model.store.tensors())
        .flat_map(|(&id, t)| grads.get(id).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect();
    let flat_params: Vec<f64> = model.store.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    let flat = Tensor::new(vec![flat_params.len()], flat_params)?;

    let evaluate = |x: &Tensor<f64>| -> f64 {
        let mut store = model.store.clone();
        let mut offset = 0;
        for id in model.store.ids() {
            let t = store.get_mut(id);
            let n = t.len();
            t.data_mut().copy_from_slice(&x.data()[offset..offset + n]);
            offset += n;
        }
        let mut g = Graph::new();
        let (loss, _) = loss_for(&store, &mut g, false).expect("fixed shapes");
        g.value(loss).data()[0]
    };

    let mut worst = 0f64;
    for _ in 0..directions {
        let mut dir = Tensor::<f64>::randn(&[flat.len()], 1.0, &mut rng);
        let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.data_mut().iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = flat_grad.iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        let numeric = five_point(&evaluate, &flat, &dir, 1e-3);
        worst = worst.max(crate::numeric::relative_error(analytic, numeric, 1e-8));
    }
    Ok(worst)
}

/// `k` successes in `n` Bernoulli(p) trials, accepted within three standard errors.
fn frequency_check(name: &str, k: usize, n: usize, p: f64) -> Check {
    Check::new(name, k as f64 / n as f64, p, 3.0 * (p * (1.0 - p) / n as f64).sqrt())
}

/// Sampling checks of every alteration policy, `draws` samples each.
pub fn alteration_statistics(seed: u64, draws: usize) -> Result<Vec<Check>> {
    let cfg = AlterationConfig::default();
    let mut checks = Vec::new();

    // time modes: 467 frames hold exactly ten blocks
    let x = Tensor::<f32>::zeros(&[467, 1]);
    let mut counts = [0usize; 3];
    let mut total = 0;
    let mut rng = TeraRng::derive(seed, &[1]);
    while total < draws {
        let (_, rec) = time_alteration(&x, &cfg, &mut rng)?;
        for b in rec.time_blocks.iter().take(draws - total) {
            counts[match b.mode {
                TimeMode::MaskZero => 0,
                TimeMode::Replace => 1,
                TimeMode::Keep => 2,
            }] += 1;
            total += 1;
        }
    }
    checks.push(frequency_check("time mode: mask", counts[0], total, 0.8));
    checks.push(frequency_check("time mode: replace", counts[1], total, 0.1));
    checks.push(frequency_check("time mode: keep", counts[2], total, 0.1));

    let x = Tensor::<f32>::zeros(&[1, 16]);
    let mut rng = TeraRng::derive(seed, &[2]);
    let mut no_mask = 0;
    for _ in 0..draws {
        no_mask += usize::from(channel_alteration(&x, &cfg, &mut rng)?.1.channel_block.is_none());
    }
    checks.push(frequency_check("channel: no mask", no_mask, draws, 1.0 / (cfg.max_channel_width + 1) as f64));

    let x = Tensor::<f32>::zeros(&[1, 1]);
    let mut rng = TeraRng::derive(seed, &[3]);
    let mut applied = 0;
    for _ in 0..draws {
        applied += usize::from(magnitude_alteration(&x, &cfg, &mut rng)?.1.noise_applied);
    }
    checks.push(frequency_check("magnitude: applied", applied, draws, cfg.noise_probability));

    let always = AlterationConfig { noise_probability: 1.0, ..cfg.clone() };
    let (_, rec) = magnitude_alteration(&Tensor::zeros(&[draws, 1]), &always, &mut TeraRng::derive(seed, &[4]))?;
    let noise: Vec<f64> = rec.noise.expect("noise applied").data().iter().map(|&v| v as f64).collect();
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let v = cfg.noise_variance;
    checks.push(Check::new("magnitude: noise mean", mean, 0.0, 3.0 * (v / n).sqrt()));
    checks.push(Check::new("magnitude: noise variance", var, v, 3.0 * v * (2.0 / (n - 1.0)).sqrt()));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_once() {
        for op in GradOp::ALL {
            let e = op_gradcheck(op, 1).unwrap();
            assert!(e < 1e-6, "{}: {e}", op.name());
        }
    }

    #[test]
    fn statistics_are_deterministic() {
        assert_eq!(alteration_statistics(7, 2000).unwrap(), alteration_statistics(7, 2000).unwrap());
    }

    #[test]
    fn check_line_mentions_status() {
        let c = Check::new("x", 1.0, 1.0, 0.0);
        assert!(c.to_string().starts_with("ok"));
        assert!(!Check::new("x", 1.0, 2.0, 0.5).pass);
    }
}

use crate::error::Result;
use crate::numeric::{Activation, Graph, NodeId, ParamStore, Tensor};
use crate::rng::TeraRng;

use super::{concat_windows, utterance_pool, window_indices, ClassifierKind, ProbeSpec, CONCAT_WINDOW};

/// Turn a `[L, d]` representation into classifier input rows: windowed for
/// the concat classifier, pooled to one row for utterance tasks.
pub fn prepare_input(spec: &ProbeSpec, repr: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !spec.task.is_frame_level() {
        return utterance_pool(repr);
    }
    Ok(match spec.classifier {
        ClassifierKind::Concat8Linear => concat_windows(repr, CONCAT_WINDOW),
        _ => repr.clone(),
    })
}

/// Graph counterpart of [`prepare_input`], differentiable through `repr`.
pub fn prepare_input_node(g: &mut Graph<f32>, spec: &ProbeSpec, repr: NodeId) -> Result<NodeId> {
    let len = g.value(repr).rows();
    if !spec.task.is_frame_level() {
        let avg = g.constant(Tensor::full(&[1, len], 1.0 / len as f32));
        return g.matmul(avg, repr);
    }
    match spec.classifier {
        ClassifierKind::Concat8Linear => {
            let parts = (0..CONCAT_WINDOW)
                .map(|o| g.gather_rows(repr, window_indices(len, CONCAT_WINDOW, o)))
                .collect::<Result<Vec<_>>>()?;
            g.concat_cols(&parts)
        }
        _ => Ok(repr),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub kind: ClassifierKind,
    pub input_dim: usize,
    pub n_classes: usize,
    pub store: ParamStore<f32>,
}

impl Classifier {
    /// `repr_dim` is the per-frame representation width; the windowed
    /// classifier sees eight times that.
    pub fn new(spec: &ProbeSpec, repr_dim: usize, rng: &mut TeraRng) -> Result<Self> {
        spec.validate()?;
        let input_dim = match spec.classifier {
            ClassifierKind::Concat8Linear => repr_dim * CONCAT_WINDOW,
            _ => repr_dim,
        };
        let mut store = ParamStore::new();
        let mut layer = |store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize| {
            store.push(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
            store.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        };
        match spec.classifier {
            ClassifierKind::Hidden1 => {
                let hidden = spec.hidden_width.unwrap_or(repr_dim);
                layer(&mut store, "probe.hidden", input_dim, hidden);
                layer(&mut store, "probe.out", hidden, spec.n_classes);
            }
            _ => layer(&mut store, "probe.out", input_dim, spec.n_classes),
        }
        Ok(Classifier { kind: spec.classifier, input_dim, n_classes: spec.n_classes, store })
    }

    /// Logits `[n, K]` for prepared input rows; `p` binds this classifier's store.
    pub fn forward(&self, g: &mut Graph<f32>, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        match self.kind {
            ClassifierKind::Hidden1 => {
                let h = g.affine(x, p[0], p[1])?;
                let h = g.activation(h, Activation::Relu);
                g.affine(h, p[2], p[3])
            }
            _ => g.affine(x, p[0], p[1]),
        }
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let xn = g.constant(x.clone());
        let logits = self.forward(&mut g, &p, xn)?;
        Ok(argmax_rows(g.value(logits)))
    }
}

pub(crate) fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            // first maximum wins so ties resolve deterministically
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

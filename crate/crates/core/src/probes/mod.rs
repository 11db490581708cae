//! Supervised probes that measure what a representation makes accessible:
//! linear, one-hidden-layer and windowed-linear classifiers trained with Adam.

mod classifier;
mod report;
mod train;

pub use classifier::{prepare_input, prepare_input_node, Classifier};
pub use report::{ClassSummary, ProbeReport};
pub use train::{examples_for_task, shuffled_labels, stratified_split, train_probe, ProbeData, ProbeExample};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeraError};
use crate::numeric::Tensor;

/// Frames concatenated by the windowed classifier.
pub const CONCAT_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    PhoneFrame,
    SpeakerFrame,
    SpeakerUtterance,
}

impl ProbeTask {
    pub fn is_frame_level(self) -> bool {
        !matches!(self, ProbeTask::SpeakerUtterance)
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::PhoneFrame => "phone_frame",
            ProbeTask::SpeakerFrame => "speaker_frame",
            ProbeTask::SpeakerUtterance => "speaker_utterance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Hidden1,
    Concat8Linear,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Linear => "linear",
            ClassifierKind::Hidden1 => "hidden1",
            ClassifierKind::Concat8Linear => "concat8_linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub task: ProbeTask,
    pub classifier: ClassifierKind,
    pub n_classes: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Width of the hidden layer; defaults to the input dimension.
    #[serde(default)]
    pub hidden_width: Option<usize>,
}

fn default_lr() -> f64 {
    4e-3
}

fn default_batch() -> usize {
    6
}

impl ProbeSpec {
    pub fn new(task: ProbeTask, classifier: ClassifierKind, n_classes: usize, epochs: usize) -> Self {
        ProbeSpec { task, classifier, n_classes, lr: default_lr(), batch_size: default_batch(), epochs, hidden_width: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(TeraError::Config(format!("probe n_classes must be ≥ 2, got {}", self.n_classes)));
        }
        if self.classifier == ClassifierKind::Concat8Linear && !self.task.is_frame_level() {
            return Err(TeraError::Config("concat8_linear requires a frame-level task".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TeraError::Config(format!("probe lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TeraError::Config("probe batch_size and epochs must be positive".into()));
        }
        if self.hidden_width == Some(0) {
            return Err(TeraError::Config("probe hidden_width must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over the frames of `repr: [L, d]`.
pub fn utterance_pool(repr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (l, d) = (repr.rows(), repr.cols());
    if l == 0 {
        return Err(TeraError::EmptyInput("cannot pool a zero-frame representation".into()));
    }
    let mut acc = vec![0f64; d];
    for t in 0..l {
        for (a, &v) in acc.iter_mut().zip(repr.row(t)) {
            *a += v as f64;
        }
    }
    Tensor::new(vec![1, d], acc.into_iter().map(|a| (a / l as f64) as f32).collect())
}

/// Row indices feeding frame `t` of a `k`-frame window, edges replicated.
pub fn window_indices(len: usize, k: usize, offset: usize) -> Vec<usize> {
    let back = k / 2;
    (0..len).map(|t| (t + offset).saturating_sub(back).min(len - 1)).collect()
}

/// Frame `t` becomes the concatenation of frames `t-k/2 .. t+ceil(k/2)-1`.
pub fn concat_windows(repr: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (l, d) = (repr.rows(), repr.cols());
    if l == 0 || k == 0 {
        return Tensor::zeros(&[l, k * d]);
    }
    let idx: Vec<Vec<usize>> = (0..k).map(|o| window_indices(l, k, o)).collect();
    let mut data = Vec::with_capacity(l * k * d);
    for t in 0..l {
        for rows in &idx {
            data.extend_from_slice(repr.row(rows[t]));
        }
    }
    Tensor::new(vec![l, k * d], data).expect("shape fixed above")
}

use std::collections::{BTreeMap, HashSet};

use crate::error::{Result, TeraError};
use crate::numeric::{Graph, Tensor};
use crate::pretrain::{AdamConfig, AdamState};
use crate::rng::TeraRng;

use super::classifier::{prepare_input, Classifier};
use super::report::{ClassSummary, ProbeReport};
use super::{ProbeSpec, ProbeTask};

/// One utterance's representation with its labels: one per frame for
/// frame-level tasks, a single label for utterance tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub id: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeData {
    pub train: Vec<ProbeExample>,
    pub dev: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

impl ProbeData {
    /// Partition `examples` by the index lists of a split.
    pub fn from_split(examples: &[ProbeExample], split: &(Vec<usize>, Vec<usize>, Vec<usize>)) -> Self {
        let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
        ProbeData { train: pick(&split.0), dev: pick(&split.1), test: pick(&split.2) }
    }
}

/// Pair representations with the labels a task needs.
pub fn examples_for_task(
    ids: &[String],
    reprs: Vec<Tensor<f32>>,
    frame_labels: &[Vec<usize>],
    speaker_labels: &[usize],
    task: ProbeTask,
) -> Result<Vec<ProbeExample>> {
    if reprs.len() != ids.len() || speaker_labels.len() != ids.len() || (task == ProbeTask::PhoneFrame && frame_labels.len() != ids.len()) {
        return Err(TeraError::Data("representations and labels disagree in count".into()));
    }
    reprs
        .into_iter()
        .enumerate()
        .map(|(i, features)| {
            let labels = match task {
                ProbeTask::PhoneFrame => frame_labels[i].clone(),
                ProbeTask::SpeakerFrame => vec![speaker_labels[i]; features.rows()],
                ProbeTask::SpeakerUtterance => vec![speaker_labels[i]],
            };
            Ok(ProbeExample { id: ids[i].clone(), features, labels })
        })
        .collect()
}

/// Per-group shuffled split into (train, dev, test) index lists. Every group
/// with at least three members contributes to all three parts.
pub fn stratified_split(groups: &[usize], dev_fraction: f64, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (g, mut members) in by_group {
        TeraRng::derive(seed, &[g as u64]).shuffle(&mut members);
        let n = members.len();
        let share = |f: f64| if f > 0.0 && n >= 3 { ((f * n as f64).round() as usize).max(1) } else { 0 };
        let n_test = share(test_fraction);
        let n_dev = share(dev_fraction).min(n - n_test - 1.min(n - n_test));
        test.extend_from_slice(&members[..n_test]);
        dev.extend_from_slice(&members[n_test..n_test + n_dev]);
        train.extend_from_slice(&members[n_test + n_dev..]);
    }
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    (train, dev, test)
}

/// Permute every label across all examples, breaking any link to features.
pub fn shuffled_labels(examples: &[ProbeExample], seed: u64) -> Vec<ProbeExample> {
    let mut all: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    TeraRng::seed_from_u64(seed).shuffle(&mut all);
    let mut it = all.into_iter();
    examples
        .iter()
        .map(|e| ProbeExample { labels: it.by_ref().take(e.labels.len()).collect(), ..e.clone() })
        .collect()
}

struct Prepared {
    inputs: Vec<Tensor<f32>>,
    labels: Vec<Vec<usize>>,
}

fn prepare(examples: &[ProbeExample], spec: &ProbeSpec, part: &str, dim: usize) -> Result<Prepared> {
    let mut inputs = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        let (l, d) = (e.features.rows(), e.features.cols());
        if d != dim {
            return Err(TeraError::Data(format!("{part} example {}: width {d}, expected {dim}", e.id)));
        }
        let expected = if spec.task.is_frame_level() { l } else { 1 };
        if e.labels.len() != expected {
            return Err(TeraError::Data(format!("{part} example {}: {} labels, expected {expected}", e.id, e.labels.len())));
        }
        if let Some(&bad) = e.labels.iter().find(|&&c| c >= spec.n_classes) {
            return Err(TeraError::Data(format!("{part} example {}: label {bad} outside [0, {})", e.id, spec.n_classes)));
        }
        inputs.push(prepare_input(spec, &e.features)?);
        labels.push(e.labels.clone());
    }
    Ok(Prepared { inputs, labels })
}

fn stack(inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let cols = inputs[0].cols();
    let rows = inputs.iter().map(|t| t.rows()).sum();
    let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Correct count, total, and per-class (support, correct, confusions).
fn evaluate(clf: &Classifier, data: &Prepared, n_classes: usize) -> Result<(usize, usize, Vec<ClassSummary>)> {
    let mut support = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    let mut confusion: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_classes];
    for (x, labels) in data.inputs.iter().zip(&data.labels) {
        for (pred, &truth) in clf.predict(x)?.into_iter().zip(labels) {
            support[truth] += 1;
            if pred == truth {
                correct[truth] += 1;
            } else {
                *confusion[truth].entry(pred).or_default() += 1;
            }
        }
    }
    let per_class = (0..n_classes)
        .map(|c| ClassSummary {
            class: c,
            support: support[c],
            correct: correct[c],
            // highest count, smallest class id on ties
            most_confused_with: confusion[c].iter().max_by_key(|&(k, v)| (*v, std::cmp::Reverse(*k))).map(|(&k, _)| k),
        })
        .collect();
    Ok((correct.iter().sum(), support.iter().sum(), per_class))
}

fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Train a classifier on `data.train` with Adam at `spec.lr` for
/// `spec.epochs` epochs, keep the parameters of the epoch with the best dev
/// accuracy (the last epoch without a dev set), and report test accuracy.
pub fn train_probe(data: &ProbeData, spec: &ProbeSpec, seed: u64) -> Result<ProbeReport> {
    spec.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(TeraError::EmptyInput("probe needs non-empty train and test sets".into()));
    }
    let train_ids: HashSet<&str> = data.train.iter().map(|e| e.id.as_str()).collect();
    if let Some(e) = data.test.iter().chain(&data.dev).find(|e| train_ids.contains(e.id.as_str())) {
        return Err(TeraError::Data(format!("example {} appears in the training set and a held-out set", e.id)));
    }
    let dim = data.train[0].features.cols();
    let train = prepare(&data.train, spec, "train", dim)?;
    let dev = prepare(&data.dev, spec, "dev", dim)?;
    let test = prepare(&data.test, spec, "test", dim)?;
    let classes: HashSet<usize> = train.labels.iter().flatten().copied().collect();
    if classes.len() < 2 {
        return Err(TeraError::Data("degenerate probe data: training set holds a single class".into()));
    }

    let mut rng = TeraRng::derive(seed, &[0x7072_6f62]);
    let mut clf = Classifier::new(spec, dim, &mut rng)?;
    let mut adam = AdamState::new(&clf.store);
    let adam_cfg = AdamConfig::default();
    let mut best = (clf.store.clone(), f64::NEG_INFINITY, 0usize);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    for epoch in 1..=spec.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(spec.batch_size) {
            let x = stack(&chunk.iter().map(|&i| &train.inputs[i]).collect::<Vec<_>>())?;
            let y: Vec<usize> = chunk.iter().flat_map(|&i| train.labels[i].iter().copied()).collect();
            let mut g = Graph::new();
            let p = clf.store.bind(&mut g, |_| true);
            let xn = g.constant(x);
            let logits = clf.forward(&mut g, &p, xn)?;
            let loss = g.cross_entropy(logits, y)?;
            let (_, mut grads) = g.value_and_grad(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&id| grads.take(id)).collect();
            adam.step(&adam_cfg, &mut clf.store, &grads, |_| spec.lr);
        }
        let score = if dev.inputs.is_empty() {
            epoch as f64
        } else {
            let (c, n, _) = evaluate(&clf, &dev, spec.n_classes)?;
            accuracy(c, n)
        };
        // ties go to the later, longer-trained epoch
        if score >= best.1 {
            best = (clf.store.clone(), score, epoch);
        }
    }
    clf.store = best.0;

    let (tc, tn, _) = evaluate(&clf, &train, spec.n_classes)?;
    let dev_accuracy = if dev.inputs.is_empty() { None } else { Some(best.1) };
    let (sc, sn, per_class) = evaluate(&clf, &test, spec.n_classes)?;
    Ok(ProbeReport {
        spec: spec.clone(),
        seed,
        train_items: tn,
        test_items: sn,
        train_accuracy: accuracy(tc, tn),
        dev_accuracy,
        test_accuracy: accuracy(sc, sn),
        best_epoch: best.2,
        chance: 1.0 / spec.n_classes as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::ClassifierKind;

    fn separable(n: usize, seed: u64) -> Vec<ProbeExample> {
        let mut rng = TeraRng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut t = Tensor::<f32>::randn(&[5, 3], 0.3, &mut rng);
                for r in 0..5 {
                    t.row_mut(r)[0] += if label == 0 { -2.0 } else { 2.0 };
                }
                ProbeExample { id: format!("u{i}"), features: t, labels: vec![label; 5] }
            })
            .collect()
    }

    fn data(examples: Vec<ProbeExample>) -> ProbeData {
        let groups: Vec<usize> = examples.iter().map(|e| e.labels[0]).collect();
        ProbeData::from_split(&examples, &stratified_split(&groups, 0.1, 0.2, 0))
    }

    #[test]
    fn separable_two_class_is_perfect() {
        for kind in [ClassifierKind::Linear, ClassifierKind::Hidden1, ClassifierKind::Concat8Linear] {
            let spec = ProbeSpec::new(ProbeTask::PhoneFrame, kind, 2, 40);
            let r = train_probe(&data(separable(40, 1)), &spec, 3).unwrap();
            assert_eq!(r.test_accuracy, 1.0, "{kind:?}");
            assert!(r.per_class.iter().all(|c| c.most_confused_with.is_none()));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ProbeSpec::new(ProbeTask::SpeakerUtterance, ClassifierKind::Hidden1, 2, 4);
        let d = data(examples_for_task(
            &(0..30).map(|i| format!("u{i}")).collect::<Vec<_>>(),
            separable(30, 2).into_iter().map(|e| e.features).collect(),
            &[],
            &(0..30).map(|i| i % 2).collect::<Vec<_>>(),
            ProbeTask::SpeakerUtterance,
        )
        .unwrap());
        assert_eq!(train_probe(&d, &spec, 9).unwrap(), train_probe(&d, &spec, 9).unwrap());
    }

    #[test]
    fn rejects_bad_labels() {
        let spec = ProbeSpec::new(ProbeTask::PhoneFrame, ClassifierKind::Linear, 2, 1);
        let mut d = data(separable(20, 3));
        d.train[0].labels[0] = 5;
        assert!(matches!(train_probe(&d, &spec, 0), Err(TeraError::Data(m)) if m.contains("label 5")));
        let mut d = data(separable(20, 3));
        for e in &mut d.train {
            e.labels.iter_mut().for_each(|l| *l = 1);
        }
        assert!(matches!(train_probe(&d, &spec, 0), Err(TeraError::Data(m)) if m.contains("single class")));
        let mut d = data(separable(20, 3));
        d.test.push(d.train[0].clone());
        assert!(matches!(train_probe(&d, &spec, 0), Err(TeraError::Data(_))));
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let groups: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let (tr, dv, te) = stratified_split(&groups, 0.1, 0.2, 5);
        assert_eq!(tr.len() + dv.len() + te.len(), 60);
        for g in 0..4 {
            assert_eq!(te.iter().filter(|&&i| groups[i] == g).count(), 3);
            assert!(dv.iter().any(|&i| groups[i] == g));
        }
        let all: HashSet<usize> = tr.iter().chain(&dv).chain(&te).copied().collect();
        assert_eq!(all.len(), 60);
    }

    #[test]
    fn shuffle_keeps_label_multiset() {
        let ex = separable(10, 4);
        let sh = shuffled_labels(&ex, 1);
        let count = |v: &[ProbeExample]| v.iter().flat_map(|e| e.labels.iter()).filter(|&&l| l == 1).count();
        assert_eq!(count(&ex), count(&sh));
        assert!(sh.iter().zip(&ex).all(|(a, b)| a.labels.len() == b.labels.len()));
    }
}

use serde::{Deserialize, Serialize};

use crate::alteration::AlterationRecord;
use crate::error::{Result, TeraError};
use crate::numeric::{Graph, NodeId, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every non-padded cell.
    #[default]
    FullSequence,
    /// Only cells touched by an alteration.
    AlteredOnly,
}

/// Row-major mask of the cells that count towards the loss. `valid` covers
/// the padded length; `record` describes the unpadded utterance.
pub fn loss_mask(valid: &[bool], channels: usize, scope: LossScope, record: Option<&AlterationRecord>) -> Vec<bool> {
    let mut mask = Vec::with_capacity(valid.len() * channels);
    for (t, &ok) in valid.iter().enumerate() {
        for c in 0..channels {
            let in_scope = ok
                && match scope {
                    LossScope::FullSequence => true,
                    LossScope::AlteredOnly => {
                        record.is_some_and(|r| t < r.altered_frames.len() && r.is_altered(t, c))
                    }
                };
            mask.push(in_scope);
        }
    }
    mask
}

/// Mean absolute error over in-scope cells.
pub fn l1_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &[bool],
    scope: LossScope,
    record: Option<&AlterationRecord>,
) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(TeraError::Contract(format!("l1_loss shapes {:?} vs {:?}", pred.shape(), target.shape())));
    }
    if valid.len() != pred.rows() {
        return Err(TeraError::Contract("pad mask length differs from frame count".into()));
    }
    let mask = loss_mask(valid, pred.cols(), scope, record);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TeraError::DegenerateBatch);
    }
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p - t).abs())
        .sum();
    Ok(total / T::c(count as f64))
}

/// Accumulates per-utterance L1 sums on a graph and divides by the pooled
/// cell count, so every in-scope cell in the batch weighs the same.
pub struct L1Accumulator {
    sums: Vec<NodeId>,
    cells: usize,
}

impl L1Accumulator {
    pub fn new() -> Self {
        L1Accumulator { sums: Vec::new(), cells: 0 }
    }

    pub fn add<T: Real>(&mut self, g: &mut Graph<T>, pred: NodeId, target: Tensor<T>, mask: Vec<bool>) -> Result<()> {
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Ok(());
        }
        self.cells += n;
        self.sums.push(g.l1_sum(pred, target, Some(mask))?);
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn finish<T: Real>(self, g: &mut Graph<T>) -> Result<NodeId> {
        let mut it = self.sums.into_iter();
        let mut total = it.next().ok_or(TeraError::DegenerateBatch)?;
        for s in it {
            total = g.add(total, s)?;
        }
        Ok(g.scale(total, T::c(1.0 / self.cells as f64)))
    }
}

impl Default for L1Accumulator {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::TeraRng;

    #[test]
    fn equal_tensors_give_zero() {
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut TeraRng::seed_from_u64(0));
        assert_eq!(l1_loss(&x, &x, &[true; 3], LossScope::FullSequence, None).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_one() {
        let x = Tensor::<f32>::randn(&[3, 4], 1.0, &mut TeraRng::seed_from_u64(0));
        let y = x.map(|v| v + 1.0);
        let l = l1_loss(&y, &x, &[true; 3], LossScope::FullSequence, None).unwrap();
        assert!((l - 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_pair_matches_direct_mean() {
        let mut rng = TeraRng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let mut direct = 0.0;
        for r in 0..5 {
            for c in 0..4 {
                direct += (a.at(r, c) - b.at(r, c)).abs();
            }
        }
        direct /= 20.0;
        let l = l1_loss(&a, &b, &[true; 5], LossScope::FullSequence, None).unwrap();
        assert!((l - direct).abs() < 1e-6);
    }

    #[test]
    fn padded_frames_excluded() {
        let a = Tensor::<f64>::new(vec![2, 1], vec![1.0, 100.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(l1_loss(&a, &b, &[true, false], LossScope::FullSequence, None).unwrap(), 1.0);
    }

    #[test]
    fn altered_only_uses_record() {
        let a = Tensor::<f64>::new(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let b = Tensor::zeros(&[3, 2]);
        let mut rec = AlterationRecord::empty(3, 2);
        rec.altered_frames[1] = true;
        assert_eq!(l1_loss(&a, &b, &[true; 3], LossScope::AlteredOnly, Some(&rec)).unwrap(), 2.0);
        let none = AlterationRecord::empty(3, 2);
        assert!(matches!(
            l1_loss(&a, &b, &[true; 3], LossScope::AlteredOnly, Some(&none)),
            Err(TeraError::DegenerateBatch)
        ));
    }
}

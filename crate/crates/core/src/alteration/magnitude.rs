use super::{AlterationConfig, AlterationRecord};
use crate::error::{Result, TeraError};
use crate::numeric::Tensor;
use crate::rng::TeraRng;

/// With probability `P_N`, add i.i.d. zero-mean Gaussian noise of the
/// configured variance to every cell.
pub fn magnitude_alteration(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut TeraRng) -> Result<(Tensor<f32>, AlterationRecord)> {
    if !(cfg.noise_variance >= 0.0) {
        return Err(TeraError::Config("noise_variance must be non-negative".into()));
    }
    let mut record = AlterationRecord::empty(x.rows(), x.cols());
    if rng.uniform() >= cfg.noise_probability {
        return Ok((x.clone(), record));
    }
    let noise = Tensor::<f32>::randn(x.shape(), cfg.noise_variance.sqrt(), rng);
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(noise.data()).for_each(|(v, &z)| *v += z);
    record.noise_applied = true;
    record.noise = Some(noise);
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_is_identity() {
        let x = Tensor::ones(&[4, 4]);
        let cfg = AlterationConfig { noise_probability: 0.0, ..Default::default() };
        for seed in 0..50 {
            let (xh, rec) = magnitude_alteration(&x, &cfg, &mut TeraRng::seed_from_u64(seed)).unwrap();
            assert_eq!(xh, x);
            assert!(!rec.noise_applied);
        }
    }

    #[test]
    fn applied_noise_is_recorded_exactly() {
        let x = Tensor::ones(&[4, 4]);
        let cfg = AlterationConfig { noise_probability: 1.0, ..Default::default() };
        let (xh, rec) = magnitude_alteration(&x, &cfg, &mut TeraRng::seed_from_u64(3)).unwrap();
        let noise = rec.noise.unwrap();
        for (i, &v) in xh.data().iter().enumerate() {
            assert_eq!(v, 1.0 + noise.data()[i]);
        }
    }
}

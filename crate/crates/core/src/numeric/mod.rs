//! Dense tensors with reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{directional_difference, finite_difference, relative_error};
pub use graph::{Activation, Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

use crate::error::{Result, TeraError};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Standardize each row of `x: [L,H]`, then apply `gain` and `bias`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(TeraError::Contract("layer_norm gain/bias length differs from row width".into()));
    }
    if eps <= 0.0 {
        return Err(TeraError::Contract("layer_norm eps must be positive".into()));
    }
    Ok(kernels::layer_norm_forward(x, gain.data(), bias.data(), T::c(eps)).0)
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    kernels::softmax_rows_masked(x, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::TeraRng;
    use proptest::prelude::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        let (v, grads) = g.value_and_grad(s).unwrap();
        assert_eq!(v, 11.5);
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_square_norm_is_x() {
        let data = [0.3, -1.2, 2.5, 4.0];
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let (_, grads) = g.value_and_grad(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &data);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(g.value_and_grad(x), Err(TeraError::Contract(_))));
    }

    #[test]
    fn nan_names_the_node() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2], &[1.0, 2.0]));
        let y = g.scale(x, f64::NAN);
        let s = g.sum(y);
        match g.value_and_grad(s) {
            Err(TeraError::NumericFault { node, op }) => {
                assert_eq!(node, y.index());
                assert_eq!(op, "scale");
            }
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t64(&[2], &[1.0, 2.0]));
        let x = g.param(t64(&[2], &[3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        let (_, grads) = g.value_and_grad(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = t64(&[3, 2], &[0.1, 0.2, -3.0, 4.0, 5.0, 6.0]);
        let g = finite_difference(|t| t.sum(), &x, 1e-4);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn fd_of_square_at_three() {
        let x = t64(&[1], &[3.0]);
        let g = finite_difference(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let ones = t64(&[2], &[1.0, 1.0]);
        let zeros = t64(&[2], &[0.0, 0.0]);
        let c = layer_norm(&t64(&[1, 2], &[5.0, 5.0]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let s = layer_norm(&t64(&[1, 2], &[-1.0, 1.0]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!((s.data()[0] + 1.0).abs() < 1e-9 && (s.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_random_rows_standardized() {
        let mut rng = TeraRng::seed_from_u64(11);
        let x = Tensor::<f32>::randn(&[4, 8], 3.0, &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), LAYER_NORM_EPS).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f32>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_grad_matches_fd() {
        let mut rng = TeraRng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let gain = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let f = |xv: &Tensor<f64>| {
            let y = layer_norm(xv, &gain, &bias, 1e-5).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::<f64>::new();
        let xn = g.param(x.clone());
        let gn = g.constant(gain.clone());
        let bn = g.constant(bias.clone());
        let y = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(y, wn).unwrap();
        let s = g.sum(p);
        let (_, grads) = g.value_and_grad(s).unwrap();
        let fd = finite_difference(f, &x, 1e-5);
        for (a, b) in grads.get(xn).unwrap().data().iter().zip(fd.data()) {
            assert!(relative_error(*a, *b, 1e-6) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t64(&[1, 4], &[0.0; 4]));
        assert_eq!(u.data(), &[0.25; 4]);
        let s = softmax_rows(&t64(&[1, 2], &[1000.0, 0.0]));
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.softmax_rows(x, Some(&[false, false, false])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..16), shift in -100.0f64..100.0) {
            let k = row.len();
            let x = t64(&[1, k], &row);
            let y = softmax_rows(&x);
            prop_assert!((y.sum() - 1.0).abs() < 1e-6);
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let shifted = softmax_rows(&x.map(|v| v + shift));
            prop_assert!(y.max_abs_diff(&shifted) < 1e-6);
        }
    }
}

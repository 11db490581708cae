use super::tensor::{Real, Tensor};

/// Central-difference gradient estimate of a scalar function, one coordinate at a time.
pub fn finite_difference<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    assert!(eps > T::zero(), "finite_difference needs eps > 0");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (T::c(2.0) * eps);
    }
    grad
}

/// Directional central difference `(f(x+εv) − f(x−εv)) / 2ε`.
pub fn directional_difference<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, dir: &Tensor<T>, eps: T) -> T {
    let shifted = |sign: T| {
        let mut p = x.clone();
        p.data_mut().iter_mut().zip(dir.data()).for_each(|(v, &d)| *v += sign * eps * d);
        p
    };
    let up = f(&shifted(T::one()));
    let down = f(&shifted(-T::one()));
    (up - down) / (T::c(2.0) * eps)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

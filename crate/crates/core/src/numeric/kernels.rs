use super::tensor::{Real, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// tanh-approximated GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

/// GELU value and derivative sharing one `tanh`.
pub(crate) fn gelu_with_grad<T: Real>(x: T) -> (T, T) {
    let k = T::c(SQRT_2_OVER_PI);
    let c = T::c(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    let half = T::c(0.5);
    (half * x * (T::one() + t), half * (T::one() + t) + half * x * (T::one() - t * t) * du)
}

/// Returns `(y, xhat, rstd)`; `xhat` and `rstd` are kept for the backward pass.
pub(crate) fn layer_norm_forward<T: Real>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let h = x.cols();
    let hn = T::c(h as f64);
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.rows());
    for row in x.data().chunks(h) {
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(gain).zip(bias) {
            let xh = (v - mean) * r;
            xhat.push(xh);
            y.push(xh * g + b);
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y).expect("layer_norm output shape");
    (y, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Real>(g: &[T], gain: &[T], xhat: &[T], rstd: &[T], dx: &mut [T], h: usize) {
    let hn = T::c(h as f64);
    let mut dxhat = vec![T::zero(); h];
    for (((grow, xrow), drow), &r) in g.chunks(h).zip(xhat.chunks(h)).zip(dx.chunks_mut(h)).zip(rstd) {
        for ((d, &gv), &gn) in dxhat.iter_mut().zip(grow).zip(gain) {
            *d = gv * gn;
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / hn;
        let mean_dx = dxhat.iter().zip(xrow).map(|(&d, &x)| d * x).sum::<T>() / hn;
        for ((out, &d), &xh) in drow.iter_mut().zip(&dxhat).zip(xrow) {
            *out += r * (d - mean_d - xh * mean_dx);
        }
    }
}

/// Max-subtracted softmax per row; masked columns receive exactly zero.
pub(crate) fn softmax_rows_masked<T: Real>(x: &Tensor<T>, valid: Option<&[bool]>) -> Tensor<T> {
    let k = x.cols();
    let ok = |c: usize| valid.is_none_or(|v| v[c]);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| ok(*c))
            .map(|(_, &v)| v)
            .fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = if ok(c) { (v - max).exp() } else { T::zero() };
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / total);
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let (y, d) = gelu_with_grad(x);
            assert_eq!(y, gelu(x));
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((d - fd).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}

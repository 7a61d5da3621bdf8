//! Hard, noisy and soft quantizers, and the Gaussian bit-cost op used in
//! training.

use rand::Rng;

use crate::error::{ClicError, Result};
use crate::tensor::{FeatureGrid, Real, Tape, Tensor, Var};

/// Probability floor used when turning likelihoods into bit costs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Nearest integer, halves away from zero.
pub fn round_half_away<T: Real>(x: T) -> T {
    x.round()
}

/// `round(y − μ) + μ` per element.
pub fn quantize_offset<T: Real>(y: &FeatureGrid<T>, mu: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    if y.dims() != mu.dims() {
        return Err(ClicError::shape(
            "quantize_offset",
            format!("{:?}", y.dims()),
            format!("{:?}", mu.dims()),
        ));
    }
    let data = y
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&a, &m)| round_half_away(a - m) + m)
        .collect();
    FeatureGrid::new(y.channels, y.height, y.width, data)
}

/// Draws additive noise `u ~ U(−0.5, 0.5)` per element.
pub fn uniform_noise<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    // open interval: gen_range excludes the upper end, and -0.5 itself is
    // nudged inward
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            T::of(if u == -0.5 { 0.0 } else { u })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `y + u` with fresh uniform noise; the noise is a constant on the tape.
pub fn universal_quantize<T: Real>(
    tape: &Tape<T>,
    y: &Var<T>,
    rng: &mut impl Rng,
) -> Result<Var<T>> {
    let noise = tape.constant(uniform_noise(y.shape(), rng));
    tape.add(y, &noise)
}

/// Scalar soft rounding with sharpness `k`.
pub fn dsq_scalar(y: f64, k: f64) -> f64 {
    let f = y.floor();
    let r = y - f - 0.5;
    f + 0.5 + (k * r).tanh() / (2.0 * (k / 2.0).tanh())
}

fn dsq_grad(y: f64, k: f64) -> f64 {
    let r = y - y.floor() - 0.5;
    let t = (k * r).tanh();
    k * (1.0 - t * t) / (2.0 * (k / 2.0).tanh())
}

/// Differentiable soft quantization, elementwise.
pub fn dsq<T: Real>(tape: &Tape<T>, y: &Var<T>, k: f64) -> Result<Var<T>> {
    if !(k > 0.0) {
        return Err(ClicError::invalid(format!(
            "soft quantization sharpness must be positive, got {k}"
        )));
    }
    let out = y.value().map(|v| T::of(dsq_scalar(v.f64(), k)));
    let yr = y.rc();
    Ok(tape.record(
        "dsq",
        &[y],
        out,
        Box::new(move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(yr.data())
                .map(|(&gv, &yv)| gv * T::of(dsq_grad(yv.f64(), k)))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        }),
    ))
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of the unit-width bin centered on `v` under `N(0, σ²)`.
/// Computed on the lower tail for accuracy.
pub fn gaussian_bin(v: f64, sigma: f64) -> f64 {
    let a = v.abs();
    phi((0.5 - a) / sigma) - phi((-0.5 - a) / sigma)
}

/// `Σ −log2 p(v_i)` where `p` is the Gaussian bin mass with scale `σ_i`.
/// `v` is the value relative to the mean.
pub fn gaussian_bits<T: Real>(tape: &Tape<T>, v: &Var<T>, sigma: &Var<T>) -> Result<Var<T>> {
    if v.shape() != sigma.shape() {
        return Err(ClicError::shape(
            "gaussian_bits",
            format!("{:?}", v.shape()),
            format!("{:?}", sigma.shape()),
        ));
    }
    let n = v.value().numel();
    let mut total = 0.0;
    // per element: (dbits/dv, dbits/dσ)
    let mut grads = Vec::with_capacity(n);
    for (&vt, &st) in v.data().iter().zip(sigma.data()) {
        let (x, s) = (vt.f64(), st.f64());
        let p = gaussian_bin(x, s);
        if p < LIKELIHOOD_FLOOR {
            total += -LIKELIHOOD_FLOOR.log2();
            grads.push((0.0, 0.0));
            continue;
        }
        total += -p.log2();
        let up = (x + 0.5) / s;
        let lo = (x - 0.5) / s;
        let dp_dv = (pdf(up) - pdf(lo)) / s;
        let dp_ds = -(up * pdf(up) - lo * pdf(lo)) / s;
        let c = -1.0 / (p * std::f64::consts::LN_2);
        grads.push((c * dp_dv, c * dp_ds));
    }
    let (vs, ss) = (v.shape().to_vec(), sigma.shape().to_vec());
    Ok(tape.record(
        "gaussian_bits",
        &[v, sigma],
        Tensor::scalar(T::of(total)),
        Box::new(move |g, need| {
            let gv = g.data()[0].f64();
            let dv = need[0].then(|| {
                Tensor::new(vs.clone(), grads.iter().map(|d| T::of(gv * d.0)).collect()).unwrap()
            });
            let ds = need[1].then(|| {
                Tensor::new(ss.clone(), grads.iter().map(|d| T::of(gv * d.1)).collect()).unwrap()
            });
            vec![dv, ds]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_away() {
        assert_eq!(round_half_away(0.5f64), 1.0);
        assert_eq!(round_half_away(-0.5f64), -1.0);
        assert_eq!(round_half_away(2.5f32), 3.0);
        assert_eq!(round_half_away(1.1f64), 1.0);
    }

    #[test]
    fn unit_bin_at_zero() {
        assert!((gaussian_bin(0.0, 1.0) - 0.382_924_922_548_026).abs() < 1e-12);
    }
}

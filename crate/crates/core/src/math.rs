//! Scalar helpers over `libm` so results are identical on every target.

pub(crate) const PROB_EPS: f64 = 1e-7;

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Sigmoid clipped to `[PROB_EPS, 1 - PROB_EPS]`.
#[inline]
pub(crate) fn clipped_prob(z: f64) -> f64 {
    sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
pub(crate) fn bce(label: f64, p: f64) -> f64 {
    -label * libm::log(p) - (1.0 - label) * libm::log(1.0 - p)
}

/// Derivative of `bce(y, clipped_prob(z))` with respect to `z`.
///
/// Zero inside the clipped region, where the loss is flat.
#[inline]
pub(crate) fn bce_grad_logit(label: f64, z: f64) -> f64 {
    let p = sigmoid(z);
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        p - label
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (divisor `n - 1`); zero for fewer than two values.
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    // Shifted by the first value: identical inputs give exactly zero.
    let n = xs.len() as f64;
    let k = xs[0];
    let (s, sq) = xs
        .iter()
        .fold((0.0, 0.0), |(s, sq), x| (s + (x - k), sq + (x - k) * (x - k)));
    ((sq - s * s / n) / (n - 1.0)).max(0.0)
}

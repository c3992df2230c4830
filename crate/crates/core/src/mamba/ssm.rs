//! Linear time-invariant state-space math for a single channel with diagonal `A`.

use crate::error::{Error, Result};

/// Below this `|delta * a|` the ZOH input coefficient uses its Taylor series.
pub const ZOH_SERIES_CUTOFF: f64 = 1e-4;

/// Continuous parameters of one channel. `a` holds the diagonal of `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
}

/// Zero-order-hold discretization: diagonal of `A_bar` and the vector `B_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(exp(delta * a), (exp(delta * a) - 1) / a)` for one diagonal entry.
///
/// The second value multiplies `B`; at `a -> 0` it tends to `delta`.
#[inline]
pub fn zoh_coeffs(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let b_scale = if x.abs() < ZOH_SERIES_CUTOFF {
        delta * (1.0 + x * (0.5 + x / 6.0))
    } else {
        delta * x.exp_m1() / x
    };
    (a_bar, b_scale)
}

/// Partial derivatives of `b_scale = (exp(delta a) - 1) / a` with respect to `delta` and `a`.
#[inline]
pub fn zoh_b_scale_grads(delta: f64, a: f64) -> (f64, f64) {
    let a_bar = (delta * a).exp();
    (a_bar, b_scale_da(delta, a, a_bar))
}

/// `d b_scale / d a = delta^2 (x e^x - e^x + 1) / x^2` with `x = delta a`, given `a_bar = e^x`.
#[inline]
pub(crate) fn b_scale_da(delta: f64, a: f64, a_bar: f64) -> f64 {
    let x = delta * a;
    if x.abs() < 1e-3 {
        delta * delta * (0.5 + x * (1.0 / 3.0 + x / 8.0))
    } else {
        delta * delta * (x * a_bar - (a_bar - 1.0)) / (x * x)
    }
}

pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0) || !p.delta.is_finite() {
        return Err(Error::Domain(format!("step size must be positive, got {}", p.delta)));
    }
    if p.a.len() != p.b.len() {
        return Err(Error::Contract(format!(
            "A has {} diagonal entries but B has {}",
            p.a.len(),
            p.b.len()
        )));
    }
    let (a_bar, b_bar) =
        p.a.iter()
            .zip(&p.b)
            .map(|(&a, &b)| {
                let (ab, bs) = zoh_coeffs(p.delta, a);
                (ab, bs * b)
            })
            .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Runs the recurrence `h_t = A_bar h_{t-1} + B_bar x_t`, `y_t = c . h_t + d x_t` from `h = 0`.
pub fn ssm_scan(disc: &DiscreteSsm, c: &[f64], d: f64, x: &[f64]) -> Vec<f64> {
    assert_eq!(c.len(), disc.a_bar.len());
    let mut h = vec![0.0; c.len()];
    x.iter()
        .map(|&xt| {
            let mut y = d * xt;
            for n in 0..h.len() {
                h[n] = disc.a_bar[n] * h[n] + disc.b_bar[n] * xt;
                y += c[n] * h[n];
            }
            y
        })
        .collect()
}

/// `K_j = c . A_bar^j . B_bar` for `j < len`.
pub fn ssm_conv_kernel(disc: &DiscreteSsm, c: &[f64], len: usize) -> Vec<f64> {
    assert_eq!(c.len(), disc.a_bar.len());
    let mut power = disc.b_bar.clone();
    (0..len)
        .map(|_| {
            let k = c.iter().zip(&power).map(|(c, p)| c * p).sum();
            for (p, a) in power.iter_mut().zip(&disc.a_bar) {
                *p *= a;
            }
            k
        })
        .collect()
}

/// Causal convolution `y_t = sum_{j <= t} K_j x_{t-j} + d x_t`.
pub fn causal_conv(kernel: &[f64], d: f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let conv: f64 = (0..=t.min(kernel.len().saturating_sub(1)))
                .map(|j| kernel[j] * x[t - j])
                .sum();
            conv + d * x[t]
        })
        .collect()
}

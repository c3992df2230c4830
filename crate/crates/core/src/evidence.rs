//! Dirichlet evidence, belief, uncertainty and expected probability from logits.
//!
//! Per-class evidence is `e = exp(tanh(P / tau))`, so it lives in `[1/e, e]` and the
//! uncertainty `u = C / S` never drops below `1 / (e + 1)`.

use std::path::Path;

use statrs::function::gamma::ln_gamma;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lowest reachable uncertainty: every class saturated at evidence `e`.
pub const UNCERTAINTY_FLOOR: f64 = 1.0 / (std::f64::consts::E + 1.0);

/// Tolerance on `sum(p) = 1` when deciding whether a point lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

#[inline]
pub fn evidence_scalar(logit: f64, tau: f64) -> f64 {
    (logit / tau).tanh().exp()
}

/// Elementwise evidence for logits of any shape.
pub fn evidence_from_logits(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    Ok(logits.map(|p| evidence_scalar(p, tau)))
}

/// Per-pixel Dirichlet quantities for a batch. Class maps are `[N, C, H, W]`,
/// pixel maps are `[N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceMaps {
    pub evidence: Tensor,
    pub alpha: Tensor,
    pub strength: Tensor,
    pub belief: Tensor,
    pub uncertainty: Tensor,
    pub prob: Tensor,
}

/// Dirichlet statistics of evidence `e` shaped `[N, C, H, W]`.
pub fn dirichlet_stats(evidence: &Tensor) -> Result<EvidenceMaps> {
    let shape = evidence.shape();
    if shape.len() != 4 {
        return Err(Error::Contract(format!("evidence must be [N, C, H, W], got {shape:?}")));
    }
    if evidence.data().iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::Domain("evidence must be finite and non-negative".into()));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let e = evidence.data();
    let alpha = evidence.map(|v| v + 1.0);
    let mut strength = vec![0.0; n * hw];
    for b in 0..n {
        for k in 0..c {
            for (s, &a) in strength[b * hw..(b + 1) * hw]
                .iter_mut()
                .zip(&alpha.data()[(b * c + k) * hw..][..hw])
            {
                *s += a;
            }
        }
    }
    let per_class = |f: &dyn Fn(f64, f64) -> f64, src: &[f64]| {
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for k in 0..c {
                let base = (b * c + k) * hw;
                for i in 0..hw {
                    out[base + i] = f(src[base + i], strength[b * hw + i]);
                }
            }
        }
        Tensor::from_vec(shape, out)
    };
    let belief = per_class(&|e, s| e / s, e);
    let prob = per_class(&|a, s| a / s, alpha.data());
    let uncertainty = strength.iter().map(|&s| c as f64 / s).collect();
    let pix = [n, shape[2], shape[3]];
    Ok(EvidenceMaps {
        evidence: evidence.clone(),
        alpha,
        strength: Tensor::from_vec(&pix, strength),
        belief,
        uncertainty: Tensor::from_vec(&pix, uncertainty),
        prob,
    })
}

/// Full pipeline from logits `[N, C, H, W]`.
pub fn evidence_maps(logits: &Tensor, tau: f64) -> Result<EvidenceMaps> {
    dirichlet_stats(&evidence_from_logits(logits, tau)?)
}

/// Uncertainty `u = C / S` per pixel, `[N, H, W]`, already in `(0, 1]`.
pub fn uncertainty_map(logits: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(evidence_maps(logits, tau)?.uncertainty)
}

/// Dirichlet density at `p`; zero off the simplex.
pub fn dirichlet_pdf(p: &[f64], alpha: &[f64]) -> Result<f64> {
    if p.len() != alpha.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "point has {} coordinates but alpha has {}",
            p.len(),
            alpha.len()
        )));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Domain(format!(
            "Dirichlet parameters must be positive: {alpha:?}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Ok(0.0);
    }
    let ln_beta: f64 = alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(alpha.iter().sum());
    let mut log_density = -ln_beta;
    for (&pk, &ak) in p.iter().zip(alpha) {
        if ak == 1.0 {
            continue;
        }
        if pk == 0.0 {
            return Ok(if ak > 1.0 { 0.0 } else { f64::INFINITY });
        }
        log_density += (ak - 1.0) * pk.ln();
    }
    Ok(log_density.exp())
}

/// Recorded evidential quantities for a branch.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceVars {
    pub alpha: Var,
    pub prob: Var,
}

/// `alpha = exp(tanh(P / tau)) + 1` and `p = alpha / S` on the tape, channel axis 1.
pub fn evidential_graph(g: &mut Graph, logits: Var, tau: f64) -> Result<EvidenceVars> {
    check_tau(tau)?;
    let c = g.shape(logits)[1];
    let z = g.scale(logits, 1.0 / tau);
    let z = g.tanh(z);
    let e = g.exp(z);
    let alpha = g.add_scalar(e, 1.0);
    let s = g.sum_axis_keep(alpha, 1);
    let s = g.expand_axis(s, 1, c);
    let prob = g.div(alpha, s);
    Ok(EvidenceVars { alpha, prob })
}

/// Maps one uncertainty map `[H, W]` linearly to 8-bit gray (`u = 1` is white).
pub fn uncertainty_raster(u: &[f64]) -> Vec<u8> {
    u.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn save_uncertainty_png(u: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    assert_eq!(u.len(), h * w);
    let img = image::GrayImage::from_raw(w as u32, h as u32, uncertainty_raster(u)).expect("raster matches dimensions");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

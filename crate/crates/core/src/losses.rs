//! Training objectives: partial cross-entropy, gated CRF, the evidential
//! expected-CE + KL loss, and their weighted sum.
//!
//! Label maps use `0..C-1` for classes and `C` for unannotated pixels.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian affinity used by the gated CRF.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfKernel {
    pub sigma_xy: f64,
    pub sigma_intensity: f64,
    /// Half-width of the square neighbourhood, in pixels.
    pub radius: usize,
}

impl Default for CrfKernel {
    fn default() -> Self {
        Self {
            sigma_xy: 5.0,
            sigma_intensity: 0.1,
            radius: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub crf: CrfKernel,
    pub iter_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            crf: CrfKernel::default(),
            iter_max: 2000,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let k = &self.crf;
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(k.sigma_xy > 0.0 && k.sigma_intensity > 0.0) {
            return Err(Error::Config("CRF bandwidths must be positive".into()));
        }
        if k.radius == 0 {
            return Err(Error::Config("CRF window radius must be at least 1".into()));
        }
        if self.iter_max == 0 {
            return Err(Error::Config("iter_max must be positive".into()));
        }
        Ok(())
    }
}

/// Which pixels carry a scribble label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMask(pub Vec<bool>);

impl ScribbleMask {
    pub fn new(labels: &[u8], num_classes: usize) -> Self {
        Self(labels.iter().map(|&y| (y as usize) < num_classes).collect())
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

fn nchw(g: &Graph, x: Var) -> (usize, usize, usize) {
    let s = g.shape(x);
    assert_eq!(s.len(), 4, "expected [N, C, H, W], got {s:?}");
    (s[0], s[1], s[2] * s[3])
}

/// Softmax over the channel axis of `[N, C, H, W]`.
pub fn softmax(g: &mut Graph, logits: Var) -> Var {
    let (n, c, hw) = nchw(g, logits);
    let x = g.value(logits);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for b in 0..n {
        for i in 0..hw {
            let at = |k: usize| (b * c + k) * hw + i;
            let m = (0..c).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[at(k)] /= z;
            }
        }
    }
    let shape = x.shape().to_vec();
    g.op(
        Tensor::from_vec(&shape, out),
        &[logits],
        Box::new(move |ctx| {
            let (p, gy) = (ctx.output.data(), ctx.grad.data());
            let mut gx = vec![0.0; p.len()];
            for b in 0..n {
                for i in 0..hw {
                    let at = |k: usize| (b * c + k) * hw + i;
                    let dot: f64 = (0..c).map(|k| gy[at(k)] * p[at(k)]).sum();
                    for k in 0..c {
                        gx[at(k)] = p[at(k)] * (gy[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        }),
    )
}

/// Mean softmax cross-entropy over the pixels where `mask` holds, against `targets`
/// (one class index per pixel). Zero when the mask is empty.
pub fn masked_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
    let (n, c, hw) = nchw(g, logits);
    assert_eq!(targets.len(), n * hw);
    assert_eq!(mask.len(), n * hw);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let src = g.value(logits).data();
    let mut probs = vec![0.0; n * c * hw];
    let mut total = 0.0;
    for (p, (&t, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        let (b, i) = (p / hw, p % hw);
        assert!(t < c, "target {t} out of range for {c} classes");
        let at = |k: usize| (b * c + k) * hw + i;
        let m = (0..c).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (src[at(k)] - m).exp()).sum();
        total += z.ln() + m - src[at(t)];
        for k in 0..c {
            probs[at(k)] = (src[at(k)] - m).exp() / z;
        }
    }
    let targets = targets.to_vec();
    let mask = mask.to_vec();
    let shape = g.shape(logits).to_vec();
    g.op(
        Tensor::scalar(total / count as f64),
        &[logits],
        Box::new(move |ctx| {
            let scale = ctx.grad.item() / count as f64;
            let mut gx = vec![0.0; probs.len()];
            for p in (0..n * hw).filter(|&p| mask[p]) {
                let (b, i) = (p / hw, p % hw);
                for k in 0..c {
                    let at = (b * c + k) * hw + i;
                    let onehot = if k == targets[p] { 1.0 } else { 0.0 };
                    gx[at] = scale * (probs[at] - onehot);
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        }),
    )
}

/// Cross-entropy on scribbled pixels only.
pub fn partial_ce(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let c = g.shape(logits)[1];
    let mask = ScribbleMask::new(labels, c);
    let targets: Vec<usize> = labels.iter().map(|&y| (y as usize).min(c - 1)).collect();
    masked_cross_entropy(g, logits, &targets, &mask.0)
}

/// Precomputed pairwise affinities for one image batch `[N, 1, H, W]` (or `[N, H, W]`).
///
/// Each unordered neighbour pair is stored once, under the offset that points
/// forward in raster order.
#[derive(Clone, Debug)]
pub struct CrfAffinity {
    n: usize,
    h: usize,
    w: usize,
    offsets: Vec<(usize, isize)>,
    /// `weights[o][pixel]`, zero where the partner falls outside the image.
    weights: Vec<Vec<f64>>,
    ordered_pairs: usize,
}

impl CrfAffinity {
    pub fn new(image: &Tensor, kernel: &CrfKernel) -> Self {
        let s = image.shape();
        let (n, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[1] == 1 => (s[0], s[2], s[3]),
            _ => panic!("expected a single-channel image batch, got {s:?}"),
        };
        let r = kernel.radius as isize;
        let offsets: Vec<(usize, isize)> = (0..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| dy > 0 || dx > 0)
            .map(|(dy, dx)| (dy as usize, dx))
            .collect();
        let img = image.data();
        let (sxy, si) = (2.0 * kernel.sigma_xy.powi(2), 2.0 * kernel.sigma_intensity.powi(2));
        let mut pairs = 0;
        let weights = offsets
            .iter()
            .map(|&(dy, dx)| {
                let spatial = -((dy * dy) as f64 + (dx * dx) as f64) / sxy;
                let mut wts = vec![0.0; n * h * w];
                for b in 0..n {
                    for y in 0..h.saturating_sub(dy) {
                        for x in 0..w {
                            let xj = x as isize + dx;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            let i = (b * h + y) * w + x;
                            let j = (b * h + y + dy) * w + xj as usize;
                            let di = img[i] - img[j];
                            wts[i] = (spatial - di * di / si).exp();
                            pairs += 1;
                        }
                    }
                }
                wts
            })
            .collect();
        Self {
            n,
            h,
            w,
            offsets,
            weights,
            ordered_pairs: 2 * pairs,
        }
    }

    /// Replaces every affinity with 1, keeping the window structure.
    pub fn unit(mut self) -> Self {
        for (o, wts) in self.weights.iter_mut().enumerate() {
            let (dy, dx) = self.offsets[o];
            for (p, v) in wts.iter_mut().enumerate() {
                let (y, x) = ((p / self.w) % self.h, p % self.w);
                let xj = x as isize + dx;
                if y + dy < self.h && xj >= 0 && xj < self.w as isize {
                    *v = 1.0;
                }
            }
        }
        self
    }

    pub fn ordered_pairs(&self) -> usize {
        self.ordered_pairs
    }
}

/// `sum_{i != j in window} K_ij |p_i - p_j|^2` over ordered pairs, divided by the pair count.
pub fn gated_crf(g: &mut Graph, probs: Var, aff: &CrfAffinity) -> Var {
    let (n, c, hw) = nchw(g, probs);
    assert_eq!((n, hw), (aff.n, aff.h * aff.w), "probabilities and image disagree");
    if aff.ordered_pairs == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let w = aff.w;
    let shift = |o: usize| aff.offsets[o].0 * w;
    let p = g.value(probs).data();
    // Unordered sum; each pair appears twice among ordered pairs, as does the count.
    let mut total = 0.0;
    for (o, wts) in aff.weights.iter().enumerate() {
        let step = shift(o) as isize + aff.offsets[o].1;
        for b in 0..n {
            for k in 0..c {
                let plane = &p[(b * c + k) * hw..][..hw];
                for (i, &wt) in wts[b * hw..(b + 1) * hw].iter().enumerate() {
                    if wt != 0.0 {
                        let d = plane[i] - plane[(i as isize + step) as usize];
                        total += wt * d * d;
                    }
                }
            }
        }
    }
    let norm = aff.ordered_pairs as f64 / 2.0;
    let aff = aff.clone();
    let shape = g.shape(probs).to_vec();
    g.op(
        Tensor::scalar(total / norm),
        &[probs],
        Box::new(move |ctx| {
            let p = ctx.inputs[0].data();
            let scale = 2.0 * ctx.grad.item() / norm;
            let mut gp = vec![0.0; p.len()];
            for (o, wts) in aff.weights.iter().enumerate() {
                let step = (aff.offsets[o].0 * aff.w) as isize + aff.offsets[o].1;
                for b in 0..n {
                    for k in 0..c {
                        let base = (b * c + k) * hw;
                        for (i, &wt) in wts[b * hw..(b + 1) * hw].iter().enumerate() {
                            if wt != 0.0 {
                                let j = (i as isize + step) as usize;
                                let d = scale * wt * (p[base + i] - p[base + j]);
                                gp[base + i] += d;
                                gp[base + j] -= d;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gp))]
        }),
    )
}

/// Derivative of the digamma function.
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // asymptotic expansion in 1/x with Bernoulli-number coefficients
    let z = 1.0 / (x * x);
    let tail =
        1.0 / 6.0 - z * (1.0 / 30.0 - z * (1.0 / 42.0 - z * (1.0 / 30.0 - z * (5.0 / 66.0 - z * 691.0 / 2730.0))));
    acc + 1.0 / x + z / 2.0 + tail * z / x
}

fn one_hot_index(y: &[f64]) -> Option<usize> {
    let hot: Vec<usize> = (0..y.len()).filter(|&k| y[k] == 1.0).collect();
    (hot.len() == 1 && y.iter().all(|&v| v == 0.0 || v == 1.0)).then(|| hot[0])
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::Domain(format!(
            "Dirichlet parameters must be positive: {alpha:?}"
        )));
    }
    Ok(())
}

/// Expected cross-entropy under `Dir(alpha)`: `psi(S) - psi(alpha_y)`.
pub fn ece_loss(alpha: &[f64], y: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    if y.len() != alpha.len() {
        return Err(Error::Contract("label and alpha lengths differ".into()));
    }
    let k = one_hot_index(y).ok_or_else(|| Error::Contract(format!("label is not one-hot: {y:?}")))?;
    Ok(digamma(alpha.iter().sum()) - digamma(alpha[k]))
}

/// `KL[Dir(alpha) || Dir(1, ..., 1)]`.
pub fn kl_to_uniform(alpha: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(kl_uniform_unchecked(alpha))
}

/// `ln Gamma` with the zeros at 1 and 2 made exact.
fn ln_gamma_exact(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        0.0
    } else {
        ln_gamma(x)
    }
}

fn kl_uniform_unchecked(alpha: &[f64]) -> f64 {
    let c = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma_exact(s) - ln_gamma_exact(c);
    for &a in alpha {
        kl += (a - 1.0) * (digamma(a) - psi_s) - ln_gamma_exact(a);
    }
    kl
}

/// KL annealing weight `min(1, 2 iter / iter_max)`.
pub fn anneal(iter: usize, iter_max: usize) -> f64 {
    assert!(iter_max > 0);
    (2.0 * iter as f64 / iter_max as f64).min(1.0)
}

/// Evidential loss of one branch: mean over scribbled pixels of
/// `ece + phi * KL(alpha_tilde)`, where `alpha_tilde` resets the true class to 1.
/// `alpha` is `[N, C, H, W]`.
pub fn pedl_loss(g: &mut Graph, alpha: Var, labels: &[u8], phi: f64) -> Var {
    let (n, c, hw) = nchw(g, alpha);
    assert_eq!(labels.len(), n * hw);
    let labeled: Vec<usize> = (0..n * hw).filter(|&p| (labels[p] as usize) < c).collect();
    if labeled.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let a = g.value(alpha).data();
    let gather = |p: usize| -> Vec<f64> {
        let (b, i) = (p / hw, p % hw);
        (0..c).map(|k| a[(b * c + k) * hw + i]).collect()
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(labeled.len() * c);
    for &p in &labeled {
        let y = labels[p] as usize;
        let mut al = gather(p);
        let s: f64 = al.iter().sum();
        total += digamma(s) - digamma(al[y]);
        let ts = trigamma(s);
        let mut gr: Vec<f64> = (0..c)
            .map(|k| ts - if k == y { trigamma(al[y]) } else { 0.0 })
            .collect();
        if phi != 0.0 {
            al[y] = 1.0;
            total += phi * kl_uniform_unchecked(&al);
            let st: f64 = al.iter().sum();
            let tail = (st - c as f64) * trigamma(st);
            for k in (0..c).filter(|&k| k != y) {
                gr[k] += phi * ((al[k] - 1.0) * trigamma(al[k]) - tail);
            }
        }
        grads.extend(gr);
    }
    let count = labeled.len() as f64;
    let shape = g.shape(alpha).to_vec();
    g.op(
        Tensor::scalar(total / count),
        &[alpha],
        Box::new(move |ctx| {
            let scale = ctx.grad.item() / count;
            let mut ga = vec![0.0; n * c * hw];
            for (q, &p) in labeled.iter().enumerate() {
                let (b, i) = (p / hw, p % hw);
                for k in 0..c {
                    ga[(b * c + k) * hw + i] = scale * grads[q * c + k];
                }
            }
            vec![Some(Tensor::from_vec(&shape, ga))]
        }),
    )
}

/// The seven terms of the training objective, in log order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components<T> {
    pub pce_cnn: T,
    pub pce_mamba: T,
    pub crf_cnn: T,
    pub crf_mamba: T,
    pub evi: T,
    pub ic: T,
    pub c: T,
}

impl<T: Copy> Components<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Components<U> {
        Components {
            pce_cnn: f(self.pce_cnn),
            pce_mamba: f(self.pce_mamba),
            crf_cnn: f(self.crf_cnn),
            crf_mamba: f(self.crf_mamba),
            evi: f(self.evi),
            ic: f(self.ic),
            c: f(self.c),
        }
    }

    pub fn to_array(&self) -> [T; 7] {
        [
            self.pce_cnn,
            self.pce_mamba,
            self.crf_cnn,
            self.crf_mamba,
            self.evi,
            self.ic,
            self.c,
        ]
    }
}

impl Components<f64> {
    pub fn total(&self, gamma: f64) -> f64 {
        self.pce_cnn + gamma * self.crf_cnn + self.pce_mamba + gamma * self.crf_mamba + self.evi + self.ic + self.c
    }
}

/// Weighted sum on the tape. Fails with [`Error::NonFinite`] if any term is not finite.
pub fn total_loss(g: &mut Graph, parts: &Components<Var>, gamma: f64) -> Result<Var> {
    let values = parts.map(|v| g.value(v).item());
    let names = ["pce_cnn", "pce_mamba", "crf_cnn", "crf_mamba", "evi", "ic", "c"];
    if let Some((name, _)) = names.iter().zip(values.to_array()).find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    let crf = g.add(parts.crf_cnn, parts.crf_mamba);
    let mut acc = g.scale(crf, gamma);
    for v in [parts.pce_cnn, parts.pce_mamba, parts.evi, parts.ic, parts.c] {
        acc = g.add(acc, v);
    }
    Ok(acc)
}

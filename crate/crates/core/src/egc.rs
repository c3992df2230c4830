//! Evidence-guided consistency between the two branches.
//!
//! Pixels where both branches are confident beyond an adaptive threshold form
//! the consistent region and are trained with cross pseudo-labels. Elsewhere,
//! whichever branch is more confident at a pixel supplies a sharpened, detached
//! target for the other.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::masked_cross_entropy;
use crate::tensor::Tensor;

/// Adaptive confidence threshold, owned by the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub lambda: f64,
    pub iter: usize,
    pub iter_max: usize,
    pub num_classes: usize,
}

/// Batch mean of the per-image maximum of `1 - u`; `u` is `[N, H, W]`.
pub fn mean_max_confidence(u: &Tensor) -> f64 {
    let n = u.dim(0);
    let per = u.len() / n;
    u.data()
        .chunks(per)
        .map(|img| img.iter().map(|&v| 1.0 - v).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64
}

/// One threshold step: blend each branch's confidence into the previous value with
/// weight `eta`, then keep the smaller of the two.
pub fn threshold_step(lambda_prev: f64, eta: f64, conf_cnn: f64, conf_mamba: f64) -> f64 {
    let blend = |conf: f64| eta * conf + (1.0 - eta) * lambda_prev;
    blend(conf_cnn).min(blend(conf_mamba))
}

impl ThresholdState {
    pub fn new(num_classes: usize, iter_max: usize) -> Result<Self> {
        if iter_max == 0 {
            return Err(Error::Config("iter_max must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            lambda: 1.0 / num_classes as f64,
            iter: 0,
            iter_max,
            num_classes,
        })
    }

    /// Advances to `iter` using this batch's uncertainty maps (`[N, H, W]` each).
    pub fn update(&mut self, iter: usize, u_cnn: &Tensor, u_mamba: &Tensor) -> Result<f64> {
        if iter > self.iter_max {
            return Err(Error::Contract(format!(
                "iter {iter} exceeds iter_max {}",
                self.iter_max
            )));
        }
        self.iter = iter;
        self.lambda = if iter == 0 {
            1.0 / self.num_classes as f64
        } else {
            let eta = iter as f64 / self.iter_max as f64;
            threshold_step(
                self.lambda,
                eta,
                mean_max_confidence(u_cnn),
                mean_max_confidence(u_mamba),
            )
        };
        Ok(self.lambda)
    }
}

/// Per-pixel region masks over a batch, flattened `[N, H, W]`.
///
/// The high-evidence masks are per pixel and apply to every channel of that pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMasks {
    pub consistent: Vec<bool>,
    pub inconsistent: Vec<bool>,
    pub high_evidence_cnn: Vec<bool>,
    pub high_evidence_mamba: Vec<bool>,
}

impl PartitionMasks {
    /// All four masks from the uncertainty maps `[N, H, W]` and expected
    /// probabilities `[N, C, H, W]` of both branches.
    pub fn compute(
        u_cnn: &Tensor,
        u_mamba: &Tensor,
        lambda: f64,
        prob_cnn: &Tensor,
        prob_mamba: &Tensor,
    ) -> Result<Self> {
        let (consistent, inconsistent) = partition(u_cnn, u_mamba, lambda)?;
        let r = split_regions(prob_cnn, prob_mamba, prob_cnn, prob_mamba, &consistent, &inconsistent)?;
        let (high_evidence_cnn, high_evidence_mamba) =
            high_evidence_masks(&r.inconsistent_evi_cnn, &r.inconsistent_evi_mamba);
        Ok(Self {
            consistent,
            inconsistent,
            high_evidence_cnn,
            high_evidence_mamba,
        })
    }
}

/// Consistent where both branches have confidence `1 - u` above `lambda`.
pub fn partition(u_cnn: &Tensor, u_mamba: &Tensor, lambda: f64) -> Result<(Vec<bool>, Vec<bool>)> {
    if u_cnn.shape() != u_mamba.shape() {
        return Err(Error::Contract(format!(
            "uncertainty maps differ in shape: {:?} vs {:?}",
            u_cnn.shape(),
            u_mamba.shape()
        )));
    }
    let consistent: Vec<bool> = u_cnn
        .data()
        .iter()
        .zip(u_mamba.data())
        .map(|(&a, &b)| 1.0 - a > lambda && 1.0 - b > lambda)
        .collect();
    let inconsistent = consistent.iter().map(|&m| !m).collect();
    Ok((consistent, inconsistent))
}

/// Broadcasts a pixel mask over the channel axis of an `[N, C, H, W]` shape.
pub fn channel_mask(mask: &[bool], shape: &[usize]) -> Tensor {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    assert_eq!(mask.len(), n * hw);
    let mut data = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for _ in 0..c {
            data.extend(mask[b * hw..(b + 1) * hw].iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Masked copies of the branch outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Regions {
    pub consistent_cnn: Tensor,
    pub consistent_mamba: Tensor,
    pub inconsistent_evi_cnn: Tensor,
    pub inconsistent_evi_mamba: Tensor,
}

pub fn split_regions(
    p_cnn: &Tensor,
    p_mamba: &Tensor,
    evi_cnn: &Tensor,
    evi_mamba: &Tensor,
    consistent: &[bool],
    inconsistent: &[bool],
) -> Result<Regions> {
    let shape = p_cnn.shape();
    if shape.len() != 4 || [p_mamba, evi_cnn, evi_mamba].iter().any(|t| t.shape() != shape) {
        return Err(Error::Contract(
            "branch outputs must share one [N, C, H, W] shape".into(),
        ));
    }
    let pixels = shape[0] * shape[2] * shape[3];
    if consistent.len() != pixels || inconsistent.len() != pixels {
        return Err(Error::Contract(format!("masks must cover {pixels} pixels")));
    }
    let mc = channel_mask(consistent, shape);
    let mic = channel_mask(inconsistent, shape);
    let apply = |t: &Tensor, m: &Tensor| t.zip_map(m, |v, m| if m != 0.0 { v } else { 0.0 });
    Ok(Regions {
        consistent_cnn: apply(p_cnn, &mc),
        consistent_mamba: apply(p_mamba, &mc),
        inconsistent_evi_cnn: apply(evi_cnn, &mic),
        inconsistent_evi_mamba: apply(evi_mamba, &mic),
    })
}

/// Renormalized elementwise power `p^(1/epsilon)`.
pub fn sharpen(p: &[f64], epsilon: f64) -> Vec<f64> {
    assert!(epsilon > 0.0);
    let powered: Vec<f64> = p.iter().map(|&v| v.powf(1.0 / epsilon)).collect();
    let z: f64 = powered.iter().sum();
    if z > 0.0 {
        powered.iter().map(|v| v / z).collect()
    } else {
        powered
    }
}

/// Pixelwise max over channels of `[N, C, H, W]`.
fn confidence(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![f64::NEG_INFINITY; n * hw];
    for b in 0..n {
        for k in 0..c {
            for (o, &v) in out[b * hw..(b + 1) * hw]
                .iter_mut()
                .zip(&t.data()[(b * c + k) * hw..][..hw])
            {
                *o = o.max(v);
            }
        }
    }
    out
}

/// Pixels where one branch's masked confidence strictly beats the other's.
pub fn high_evidence_masks(evi_ic_cnn: &Tensor, evi_ic_mamba: &Tensor) -> (Vec<bool>, Vec<bool>) {
    let (a, b) = (confidence(evi_ic_cnn), confidence(evi_ic_mamba));
    let cnn = a.iter().zip(&b).map(|(x, y)| x > y).collect();
    let mamba = a.iter().zip(&b).map(|(x, y)| y > x).collect();
    (cnn, mamba)
}

/// Sharpened targets at the guided pixels; zeros elsewhere.
fn guide(src: &Tensor, mask: &[bool], epsilon: f64) -> Tensor {
    let s = src.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; src.len()];
    let mut column = vec![0.0; c];
    for p in (0..n * hw).filter(|&p| mask[p]) {
        let (b, i) = (p / hw, p % hw);
        for (k, v) in column.iter_mut().enumerate() {
            *v = src.data()[(b * c + k) * hw + i];
        }
        for (k, v) in sharpen(&column, epsilon).into_iter().enumerate() {
            out[(b * c + k) * hw + i] = v;
        }
    }
    Tensor::from_vec(s, out)
}

/// Squared error between `student` and fixed `target` summed over channels at the
/// masked pixels, divided by `C * count`. The target carries no gradient.
fn guided_mse(g: &mut Graph, student: Var, target: Tensor, mask: &[bool]) -> Var {
    let s = g.shape(student).to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let norm = (c * count) as f64;
    let pix = channel_mask(mask, &s);
    let diff: Vec<f64> = g
        .value(student)
        .data()
        .iter()
        .zip(target.data())
        .zip(pix.data())
        .map(|((&x, &t), &m)| m * (x - t))
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / norm;
    debug_assert_eq!(diff.len(), n * c * hw);
    g.op(
        Tensor::scalar(loss),
        &[student],
        Box::new(move |ctx| {
            let scale = 2.0 * ctx.grad.item() / norm;
            vec![Some(Tensor::from_vec(&s, diff.iter().map(|d| scale * d).collect()))]
        }),
    )
}

/// Guidance losses and the masks that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Guidance {
    /// Mamba pulled toward the sharpened CNN output.
    pub loss_a: Var,
    /// CNN pulled toward the sharpened Mamba output.
    pub loss_b: Var,
}

/// Guidance on inconsistent regions. `evi_ic_*` are expected probabilities already
/// masked to the inconsistent region; each loss only reaches the guided branch.
pub fn evidence_guidance(
    g: &mut Graph,
    evi_ic_cnn: Var,
    evi_ic_mamba: Var,
    epsilon: f64,
) -> Result<(Guidance, Vec<bool>, Vec<bool>)> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "sharpening temperature must be positive, got {epsilon}"
        )));
    }
    if g.shape(evi_ic_cnn) != g.shape(evi_ic_mamba) {
        return Err(Error::Contract("branch probabilities differ in shape".into()));
    }
    let (cnn, mamba) = (g.value(evi_ic_cnn).clone(), g.value(evi_ic_mamba).clone());
    let (h_cnn, h_mamba) = high_evidence_masks(&cnn, &mamba);
    let guide_cnn = guide(&cnn, &h_cnn, epsilon);
    let guide_mamba = guide(&mamba, &h_mamba, epsilon);
    let loss_a = guided_mse(g, evi_ic_mamba, guide_cnn, &h_cnn);
    let loss_b = guided_mse(g, evi_ic_cnn, guide_mamba, &h_mamba);
    Ok((Guidance { loss_a, loss_b }, h_cnn, h_mamba))
}

/// Channel argmax per pixel; ties go to the lowest index.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    (0..n * hw)
        .map(|p| {
            let (b, i) = (p / hw, p % hw);
            (1..c).fold(0, |best, k| {
                if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                    k
                } else {
                    best
                }
            })
        })
        .collect()
}

/// Cross pseudo-supervision on the consistent region: each branch's logits are
/// trained toward the other branch's detached argmax.
pub fn cross_pseudo_loss(g: &mut Graph, logits_cnn: Var, logits_mamba: Var, consistent: &[bool]) -> Var {
    let y_cnn = argmax_channels(g.value(logits_cnn));
    let y_mamba = argmax_channels(g.value(logits_mamba));
    let a = masked_cross_entropy(g, logits_cnn, &y_mamba, consistent);
    let b = masked_cross_entropy(g, logits_mamba, &y_cnn, consistent);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, values.len(), 1, 1], values.to_vec())
    }

    fn maps(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, 1, v.len()], v.to_vec())
    }

    #[test]
    fn threshold_examples() {
        let mut s = ThresholdState::new(4, 100).unwrap();
        assert_eq!(s.lambda, 0.25);
        let u = maps(&[0.2, 0.5]);
        assert_eq!(s.update(0, &u, &u).unwrap(), 0.25);

        let mut s = ThresholdState::new(2, 10).unwrap();
        assert!((s.update(10, &u, &u).unwrap() - 0.8).abs() < 1e-15);

        assert!((threshold_step(0.25, 0.5, 0.6, 0.7) - 0.425).abs() < 1e-15);
        let mut s = ThresholdState::new(4, 10).unwrap();
        let got = s.update(5, &maps(&[0.4, 0.9]), &maps(&[0.3, 0.8])).unwrap();
        assert!((got - 0.425).abs() < 1e-15);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(ThresholdState::new(2, 0), Err(Error::Config(_))));
        let mut s = ThresholdState::new(2, 5).unwrap();
        let u = maps(&[0.5]);
        assert!(matches!(s.update(6, &u, &u), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_confidence_is_mean_of_image_maxima() {
        let u = Tensor::from_vec(&[2, 1, 2], vec![0.9, 0.4, 0.5, 0.7]);
        assert!((mean_max_confidence(&u) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn partition_examples() {
        let (c, ic) = partition(&maps(&[0.3]), &maps(&[0.6]), 0.5).unwrap();
        assert_eq!((c, ic), (vec![false], vec![true]));
        let u = maps(&[0.0, 0.3, 0.99, 1.0]);
        let (c, _) = partition(&u, &u, 0.0).unwrap();
        assert_eq!(c, vec![true, true, true, false]);
        let (c, ic) = partition(&u, &u, 1.0).unwrap();
        assert!(c.iter().all(|&m| !m) && ic.iter().all(|&m| m));
    }

    #[test]
    fn split_examples() {
        let p = Tensor::from_vec(&[1, 2, 1, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let all = [true, true];
        let none = [false, false];
        let r = split_regions(&p, &p, &p, &p, &all, &none).unwrap();
        assert_eq!(r.consistent_cnn, p);
        assert!(r.inconsistent_evi_mamba.data().iter().all(|&v| v == 0.0));
        let r = split_regions(&p, &p, &p, &p, &none, &all).unwrap();
        assert!(r.consistent_cnn.data().iter().all(|&v| v == 0.0));
        let q = Tensor::zeros(&[1, 3, 1, 2]);
        assert!(matches!(
            split_regions(&p, &q, &p, &p, &all, &none),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sharpen_example() {
        let s = sharpen(&[0.8, 0.2], 0.5);
        assert!((s[0] - 0.64 / 0.68).abs() < 1e-15);
        assert!((s[0] - 0.9412).abs() < 1e-4 && (s[1] - 0.0588).abs() < 1e-4);
    }

    #[test]
    fn guidance_examples() {
        let mut g = Graph::new();
        let same = g.leaf(px(&[0.7, 0.3]));
        let other = g.leaf(px(&[0.7, 0.3]));
        let (l, hc, hm) = evidence_guidance(&mut g, same, other, 0.5).unwrap();
        assert_eq!((hc, hm), (vec![false], vec![false]));
        assert_eq!(g.value(l.loss_a).item(), 0.0);
        assert_eq!(g.value(l.loss_b).item(), 0.0);

        // A cnn output of (0.8, 0.2) sharpens to (0.9412, 0.0588).
        let cnn = g.leaf(px(&[0.8, 0.2]));
        let mamba = g.leaf(px(&[0.6, 0.4]));
        let (l, hc, hm) = evidence_guidance(&mut g, cnn, mamba, 0.5).unwrap();
        assert_eq!((hc, hm), (vec![true], vec![false]));
        let s = sharpen(&[0.8, 0.2], 0.5);
        let want = ((s[0] - 0.6).powi(2) + (s[1] - 0.4).powi(2)) / 2.0;
        assert!((g.value(l.loss_a).item() - want).abs() < 1e-15);
        assert!((want - 0.11645).abs() < 1e-4);
        assert_eq!(g.value(l.loss_b).item(), 0.0);

        let grads = g.backward(l.loss_a);
        assert!(grads.get(cnn).is_none());
        let gm = grads.get(mamba).unwrap();
        assert!((gm.data()[0] - (0.6 - s[0])).abs() < 1e-15);
    }

    #[test]
    fn guidance_gradient_stays_on_the_guided_branch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let rand_probs = |rng: &mut rand::rngs::StdRng| {
            let mut d = vec![0.0; 3 * 16];
            for i in 0..16 {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = v.iter().sum();
                for k in 0..3 {
                    d[k * 16 + i] = v[k] / z;
                }
            }
            Tensor::from_vec(&[1, 3, 4, 4], d)
        };
        let (a, b) = (rand_probs(&mut rng), rand_probs(&mut rng));
        let loss_a = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let (l, ..) = evidence_guidance(&mut g, x, y, 0.5).unwrap();
            let grads = g.backward(l.loss_a);
            (
                g.value(l.loss_a).item(),
                grads.get(x).cloned(),
                grads.get(y).cloned().unwrap(),
            )
        };
        let (_, gx, gy) = loss_a(&a, &b);
        assert!(gx.is_none(), "the guiding branch must receive no gradient");
        // Numeric derivative on the guided (mamba) side matches the tape.
        let h = 1e-6;
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            let fd = (loss_a(&a, &bp).0 - loss_a(&a, &bm).0) / (2.0 * h);
            assert!((fd - gy.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", gy.data()[i]);
        }
    }

    #[test]
    fn cps_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let l = cross_pseudo_loss(&mut g, z, z, &[false]);
        assert_eq!(g.value(l).item(), 0.0);

        let cnn = g.leaf(px(&[0.9f64.ln(), 0.1f64.ln()]));
        let mamba = g.leaf(px(&[0.4f64.ln(), 0.6f64.ln()]));
        let l = cross_pseudo_loss(&mut g, cnn, mamba, &[true]);
        let want = -(0.1f64.ln()) - 0.4f64.ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!((want - 3.2189).abs() < 1e-4);

        let sure = g.leaf(px(&[900.0, -900.0]));
        let l = cross_pseudo_loss(&mut g, sure, sure, &[true]);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_channels(&px(&[0.5, 0.5])), vec![0]);
        assert_eq!(argmax_channels(&px(&[0.1, 0.7, 0.7])), vec![1]);
    }

    proptest! {
        #[test]
        fn partition_covers_every_pixel_once(
            u in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64),
            lambda in 0.0f64..=1.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = u.into_iter().unzip();
            let (c, ic) = partition(&maps(&a), &maps(&b), lambda).unwrap();
            prop_assert!(c.iter().zip(&ic).all(|(x, y)| x ^ y));
        }

        #[test]
        fn split_is_a_partition(v in prop::collection::vec(-3.0f64..3.0, 8), m in prop::collection::vec(any::<bool>(), 4)) {
            let p = Tensor::from_vec(&[1, 2, 2, 2], v);
            let ic: Vec<bool> = m.iter().map(|&x| !x).collect();
            let r = split_regions(&p, &p, &p, &p, &m, &ic).unwrap();
            let rest = split_regions(&p, &p, &p, &p, &ic, &m).unwrap().consistent_cnn;
            for i in 0..8 {
                prop_assert_eq!(r.consistent_cnn.data()[i] + rest.data()[i], p.data()[i]);
            }
        }

        #[test]
        fn threshold_stays_in_unit_interval(
            steps in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40),
            c in 2usize..6,
        ) {
            let iter_max = steps.len();
            let mut s = ThresholdState::new(c, iter_max).unwrap();
            for (i, (a, b)) in steps.into_iter().enumerate() {
                let l = s.update(i + 1, &maps(&[a]), &maps(&[b])).unwrap();
                prop_assert!((0.0..=1.0).contains(&l));
            }
        }

        #[test]
        fn zero_eta_keeps_lambda(prev in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assert_eq!(threshold_step(prev, 0.0, a, b), prev);
        }

        #[test]
        fn guidance_is_one_directional(a in prop::collection::vec(0.0f64..1.0, 8), b in prop::collection::vec(0.0f64..1.0, 8)) {
            let (hc, hm) = high_evidence_masks(
                &Tensor::from_vec(&[1, 2, 2, 2], a),
                &Tensor::from_vec(&[1, 2, 2, 2], b),
            );
            prop_assert!(hc.iter().zip(&hm).all(|(x, y)| !(x & y)));
        }

        #[test]
        fn sharpening_raises_the_max(v in prop::collection::vec(1e-3f64..1.0, 2..6), eps in 0.05f64..1.0) {
            let z: f64 = v.iter().sum();
            let p: Vec<f64> = v.iter().map(|x| x / z).collect();
            let s = sharpen(&p, eps);
            let max = |x: &[f64]| x.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max(&s) >= max(&p) - 1e-12);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

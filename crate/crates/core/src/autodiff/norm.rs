use super::{Graph, Var};
use crate::tensor::Tensor;

/// Per-channel batch mean and biased variance observed in a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

impl Graph {
    /// Batch normalization over `(N, H, W)` of an NCHW tensor using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xd[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                var[ch] += xd[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let at = (b * c + ch) * hw;
                for i in at..at + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let stats = BatchStats { mean, var, count };
        let v = self.op(
            Tensor::from_vec(&xs, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let at = (b * c + ch) * hw;
                        for i in at..at + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let m = count as f64;
                    let mut d = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / m;
                            let at = (b * c + ch) * hw;
                            for i in at..at + hw {
                                d[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    Tensor::from_vec(&xs, d)
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], sum_gx)),
                    Some(Tensor::from_vec(&[c], sum_g)),
                ]
            }),
        );
        (v, stats)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let at = (b * c + ch) * hw;
                for i in at..at + hw {
                    out[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        self.op(
            Tensor::from_vec(&xs, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (g, xd, gamma) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let at = (b * c + ch) * hw;
                        for i in at..at + hw {
                            gx[i] = g[i] * gamma[ch] * inv_std[ch];
                            gg[ch] += g[i] * (xd[i] - mean[ch]) * inv_std[ch];
                            gb[ch] += g[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&xs, gx)),
                    Some(Tensor::from_vec(&[c], gg)),
                    Some(Tensor::from_vec(&[c], gb)),
                ]
            }),
        )
    }

    /// Layer normalization of each row of `x[M, C]` with affine `gamma`, `beta` of length `C`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let (m, c) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; xd.len()];
        for r in 0..m {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let xh = (row[k] - mean) * is;
                xhat[r * c + k] = xh;
                out[r * c + k] = gd[k] * xh + bd[k];
            }
        }
        self.op(
            Tensor::from_vec(&xs, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (g, gamma) = (ctx.grad.data(), ctx.inputs[1].data());
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gxh = vec![0.0; c];
                for r in 0..m {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for k in 0..c {
                        let i = r * c + k;
                        gg[k] += g[i] * xhat[i];
                        gb[k] += g[i];
                        gxh[k] = g[i] * gamma[k];
                        s1 += gxh[k];
                        s2 += gxh[k] * xhat[i];
                    }
                    let cf = c as f64;
                    for k in 0..c {
                        let i = r * c + k;
                        gx[i] = inv_std[r] / cf * (cf * gxh[k] - s1 - xhat[i] * s2);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&xs, gx)),
                    Some(Tensor::from_vec(&[c], gg)),
                    Some(Tensor::from_vec(&[c], gb)),
                ]
            }),
        )
    }
}

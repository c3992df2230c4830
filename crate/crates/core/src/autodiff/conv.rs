use super::{Graph, Var};
use crate::tensor::{gemm, gemm_strided, MatRef, Tensor};

/// Zero-padded copy of a batch `[n, c, h, w]` laid out as rows of channels:
/// row `c` holds the `n` padded images back to back, each `plane` long, where a
/// padded image row is `w + 2 * pad` wide. The trailing slack keeps every
/// shifted tap view in bounds.
struct Padded {
    data: Vec<f64>,
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    pad: usize,
    width: usize,
    plane: usize,
}

impl Padded {
    fn zeros(n: usize, channels: usize, h: usize, w: usize, pad: usize) -> Self {
        let width = w + 2 * pad;
        let plane = (h + 2 * pad) * width;
        Self {
            data: vec![0.0; channels * n * plane + 2 * pad],
            n,
            channels,
            h,
            w,
            pad,
            width,
            plane,
        }
    }

    fn new(x: &[f64], n: usize, channels: usize, h: usize, w: usize, pad: usize) -> Self {
        let mut p = Self::zeros(n, channels, h, w, pad);
        p.write(x, pad);
        p
    }

    /// Zeroed buffer with the same geometry but a different channel count.
    fn like(&self, channels: usize) -> Self {
        Self::zeros(self.n, channels, self.h, self.w, self.pad)
    }

    /// Copies `[n, c, h, w]` data in with pixel `(0, 0)` at padded `(origin, origin)`.
    fn write(&mut self, x: &[f64], origin: usize) {
        let (n, c, h, w) = (self.n, self.channels, self.h, self.w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let dst = self.row_start(b, ch, y + origin) + origin;
                    self.data[dst..dst + w].copy_from_slice(&x[((b * c + ch) * h + y) * w..][..w]);
                }
            }
        }
    }

    fn row_stride(&self) -> usize {
        self.n * self.plane
    }

    fn row_start(&self, b: usize, c: usize, y: usize) -> usize {
        c * self.row_stride() + b * self.plane + y * self.width
    }

    /// Columns covered by one output row of the shifted views.
    fn cols(&self) -> usize {
        (self.n - 1) * self.plane + self.h * self.width
    }

    /// `[channels, cols]` view shifted by tap `(ky, kx)`.
    fn tap(&self, ky: usize, kx: usize) -> MatRef<'_> {
        MatRef {
            data: &self.data[ky * self.width + kx..],
            rows: self.channels,
            cols: self.cols(),
            row_stride: self.row_stride() as isize,
            col_stride: 1,
        }
    }

    /// Inverse of [`Padded::write`].
    fn crop(&self, origin: usize) -> Vec<f64> {
        let (n, c, h, w) = (self.n, self.channels, self.h, self.w);
        let mut out = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let src = self.row_start(b, ch, y + origin) + origin;
                    out[((b * c + ch) * h + y) * w..][..w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }
}

/// `[co, ci]` slice of a `[co, ci, k, k]` weight at tap `(ky, kx)`.
fn tap_weight(wd: &[f64], co: usize, ci: usize, k: usize, ky: usize, kx: usize) -> MatRef<'_> {
    MatRef {
        data: &wd[ky * k + kx..],
        rows: co,
        cols: ci,
        row_stride: (ci * k * k) as isize,
        col_stride: (k * k) as isize,
    }
}

impl Graph {
    /// `a[M, K] * b[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        self.op(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Box::new(move |ctx| {
                let g = MatRef::row_major(ctx.grad.data(), m, n);
                let ga = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(g, MatRef::row_major(ctx.inputs[1].data(), k, n).t(), &mut d, 0.0);
                    Tensor::from_vec(&[m, k], d)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(MatRef::row_major(ctx.inputs[0].data(), m, k).t(), g, &mut d, 0.0);
                    Tensor::from_vec(&[k, n], d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x[M, N] + bias[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.shape(x)[1];
        assert_eq!(self.shape(bias), &[n]);
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.op(
            value,
            &[x, bias],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for row in ctx.grad.data().chunks(n) {
                        for (a, v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[n], d)
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        )
    }

    /// Same-size `k x k` convolution (stride 1, zero padding `k / 2`) on NCHW input.
    /// `weight` is `[Co, Ci, k, k]`, `bias` is `[Co]`.
    ///
    /// Each tap is one GEMM against a shifted view of the padded batch; the
    /// result lives in padded coordinates and only the interior is kept.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4);
        assert!(ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && ws[2] % 2 == 1);
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let hw = h * w;
        let padded = Padded::new(self.value(x).data(), n, ci, h, w, pad);
        let wd = self.value(weight).data();
        // Output pixel (y, x) lands at padded (y, x), the anchor of the top-left tap.
        let mut acc = padded.like(co);
        let stride = acc.row_stride();
        for ky in 0..k {
            for kx in 0..k {
                gemm_strided(
                    tap_weight(wd, co, ci, k, ky, kx),
                    padded.tap(ky, kx),
                    &mut acc.data,
                    stride,
                    1.0,
                );
            }
        }
        let mut out = acc.crop(0);
        let bd = self.value(bias).data();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let b = bd[i % co];
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.op(
            Tensor::from_vec(&[n, co, h, w], out),
            &[x, weight, bias],
            Box::new(move |ctx| {
                let (xd, wd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let padded = Padded::new(xd, n, ci, h, w, pad);
                let mut gout = padded.like(co);
                gout.write(gd, 0);
                let gm = gout.tap(0, 0);
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; co * ci * k * k];
                    let mut gtap = vec![0.0; co * ci];
                    for ky in 0..k {
                        for kx in 0..k {
                            gemm(gm, padded.tap(ky, kx).t(), &mut gtap, 0.0);
                            for (o, row) in gtap.chunks(ci).enumerate() {
                                for (i, &v) in row.iter().enumerate() {
                                    gw[(o * ci + i) * k * k + ky * k + kx] = v;
                                }
                            }
                        }
                    }
                    Tensor::from_vec(&[co, ci, k, k], gw)
                });
                let gx = ctx.needs[0].then(|| {
                    let mut gpad = padded.like(ci);
                    let stride = gpad.row_stride();
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = ky * gpad.width + kx;
                            gemm_strided(
                                tap_weight(wd, co, ci, k, ky, kx).t(),
                                gm,
                                &mut gpad.data[at..],
                                stride,
                                1.0,
                            );
                        }
                    }
                    Tensor::from_vec(&[n, ci, h, w], gpad.crop(pad))
                });
                let gb = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; co];
                    for (i, plane) in gd.chunks(hw).enumerate() {
                        d[i % co] += plane.iter().sum::<f64>();
                    }
                    Tensor::from_vec(&[co], d)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2x2 stride-2 transposed convolution; `weight` is `[Ci, Co, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert!(ws.len() == 4 && ws[0] == xs[1] && ws[2] == 2 && ws[3] == 2);
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        let (hw, co4) = (h * w, co * 4);
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * co * oh * ow];
        let mut y = vec![0.0; co4 * hw];
        for b in 0..n {
            gemm(
                MatRef::row_major(wd, ci, co4).t(),
                MatRef::row_major(&xd[b * ci * hw..(b + 1) * ci * hw], ci, hw),
                &mut y,
                0.0,
            );
            let dst = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
            for c in 0..co {
                for a in 0..2 {
                    for e in 0..2 {
                        let src = &y[(c * 4 + a * 2 + e) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..w {
                                dst[(c * oh + 2 * i + a) * ow + 2 * j + e] = src[i * w + j] + bd[c];
                            }
                        }
                    }
                }
            }
        }
        self.op(
            Tensor::from_vec(&[n, co, oh, ow], out),
            &[x, weight, bias],
            Box::new(move |ctx| {
                let (xd, wd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = ctx.needs[0].then(|| vec![0.0; n * ci * hw]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; ci * co4]);
                let mut gb = vec![0.0; co];
                let mut gy = vec![0.0; co4 * hw];
                for b in 0..n {
                    let src = &gd[b * co * oh * ow..(b + 1) * co * oh * ow];
                    for c in 0..co {
                        for a in 0..2 {
                            for e in 0..2 {
                                let dst = &mut gy[(c * 4 + a * 2 + e) * hw..][..hw];
                                for i in 0..h {
                                    for j in 0..w {
                                        let v = src[(c * oh + 2 * i + a) * ow + 2 * j + e];
                                        dst[i * w + j] = v;
                                        gb[c] += v;
                                    }
                                }
                            }
                        }
                    }
                    let gym = MatRef::row_major(&gy, co4, hw);
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            MatRef::row_major(wd, ci, co4),
                            gym,
                            &mut gx[b * ci * hw..(b + 1) * ci * hw],
                            0.0,
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(
                            MatRef::row_major(&xd[b * ci * hw..(b + 1) * ci * hw], ci, hw),
                            gym.t(),
                            gw,
                            1.0,
                        );
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_vec(&[n, ci, h, w], d)),
                    gw.map(|d| Tensor::from_vec(&[ci, co, 2, 2], d)),
                    ctx.needs[2].then(|| Tensor::from_vec(&[co], gb)),
                ]
            }),
        )
    }

    /// 2x2 stride-2 max pooling on NCHW input with even spatial extents.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (a, e) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + a) * w + 2 * j + e;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        self.op(
            Tensor::from_vec(&[n, c, oh, ow], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let gd = g.data_mut();
                for (&i, &v) in arg.iter().zip(ctx.grad.data()) {
                    gd[i] += v;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Depthwise 3x3 convolution (zero padding) on channels-last `[N, H, W, C]` input.
    /// `weight` is `[C, 3, 3]`, `bias` is `[C]`.
    pub fn depthwise_conv3x3_nhwc(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.shape(weight), &[c, 3, 3]);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let o = &mut out[((b * h + y) * w + xx) * c..][..c];
                    o.copy_from_slice(bd);
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = &xd[((b * h + sy as usize) * w + sx as usize) * c..][..c];
                            for ch in 0..c {
                                o[ch] += wd[ch * 9 + ky * 3 + kx] * src[ch];
                            }
                        }
                    }
                }
            }
        }
        self.op(
            Tensor::from_vec(&xs, out),
            &[x, weight, bias],
            Box::new(move |ctx| {
                let (xd, wd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; c * 9];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = &gd[((b * h + y) * w + xx) * c..][..c];
                            for ch in 0..c {
                                gb[ch] += go[ch];
                            }
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let at = ((b * h + sy as usize) * w + sx as usize) * c;
                                    for ch in 0..c {
                                        gw[ch * 9 + ky * 3 + kx] += go[ch] * xd[at + ch];
                                        gx[at + ch] += go[ch] * wd[ch * 9 + ky * 3 + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&xs, gx)),
                    Some(Tensor::from_vec(&[c, 3, 3], gw)),
                    Some(Tensor::from_vec(&[c], gb)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;

    fn ramp(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.73 + phase).sin()).collect())
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = ramp(&[2, 2, 4, 5], 0.1);
        let w = ramp(&[3, 2, 3, 3], 0.7);
        let b = ramp(&[3], 1.1);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv);
        let y = g.value(y);
        for n in 0..2 {
            for co in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        let mut s = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                    if (0..4).contains(&si) && (0..5).contains(&sj) {
                                        s += w.data()[w.idx4(co, ci, ky, kx)]
                                            * x.data()[x.idx4(n, ci, si as usize, sj as usize)];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[y.idx4(n, co, i, j)] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_family_gradients() {
        let wsum = ramp(&[2, 3, 4, 4], 2.0);
        check(
            &[ramp(&[2, 2, 4, 4], 0.1), ramp(&[3, 2, 3, 3], 0.7), ramp(&[3], 1.1)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2]);
                let k = g.constant(wsum.clone());
                let y = g.mul(y, k);
                g.sum_all(y)
            },
            1e-6,
            1e-6,
        );
        let wsum = ramp(&[2, 3, 4, 6], 0.4);
        check(
            &[ramp(&[2, 2, 2, 3], 0.3), ramp(&[2, 3, 2, 2], 0.9), ramp(&[3], 0.2)],
            |g, v| {
                let y = g.conv_transpose2x2(v[0], v[1], v[2]);
                let k = g.constant(wsum.clone());
                let y = g.mul(y, k);
                g.sum_all(y)
            },
            1e-6,
            1e-6,
        );
        check(
            &[ramp(&[1, 2, 4, 4], 0.5)],
            |g, v| {
                let y = g.max_pool2(v[0]);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
            1e-6,
        );
        let wsum = ramp(&[2, 3, 4, 5], 1.4);
        check(
            &[ramp(&[2, 3, 4, 5], 0.3), ramp(&[5, 3, 3], 0.9), ramp(&[5], 0.2)],
            |g, v| {
                let y = g.depthwise_conv3x3_nhwc(v[0], v[1], v[2]);
                let k = g.constant(wsum.clone());
                let y = g.mul(y, k);
                g.sum_all(y)
            },
            1e-6,
            1e-6,
        );
        check(
            &[ramp(&[3, 4], 0.1), ramp(&[4, 2], 0.2), ramp(&[2], 0.3)],
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_row_bias(y, v[2]);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
            1e-6,
        );
    }
}

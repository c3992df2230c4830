use super::{Graph, Var};
use crate::tensor::Tensor;

/// Reorders the axes of `t`: output axis `i` is input axis `axes[i]`.
pub fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    assert_eq!(axes.len(), nd);
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; nd];
    let last = nd - 1;
    let mut offset = 0usize;
    'outer: loop {
        // innermost axis as a tight loop
        let s = strides[last];
        for k in 0..out_shape[last] {
            out.push(src[offset + k * s]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                break 'outer;
            }
            axis -= 1;
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.op(
            value,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = permute_tensor(self.value(x), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.op(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(permute_tensor(ctx.grad, &inverse))]),
        )
    }

    /// Concatenation of `parts` along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        for s in &shapes {
            assert_eq!(s.len(), out_shape.len());
            for (d, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                assert!(d == axis || a == b, "concat extent mismatch {s:?} vs {out_shape:?}");
            }
        }
        let (outer, inner) = outer_inner(&out_shape, axis);
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; outer * total];
        for o in 0..outer {
            let mut at = o * total;
            for (p, &w) in parts.iter().zip(&widths) {
                data[at..at + w].copy_from_slice(&self.value(*p).data()[o * w..(o + 1) * w]);
                at += w;
            }
        }
        self.op(
            Tensor::from_vec(&out_shape, data),
            parts,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
                let g = ctx.grad.data();
                for o in 0..outer {
                    let mut at = o * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[at..at + w]);
                        at += w;
                    }
                }
                grads
                    .into_iter()
                    .zip(&ctx.inputs)
                    .map(|(d, x)| Some(Tensor::from_vec(x.shape(), d)))
                    .collect()
            }),
        )
    }

    /// The slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis]);
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis] * inner;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.op(
            Tensor::from_vec(&out_shape, data),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&shape);
                let gd = g.data_mut();
                let src = ctx.grad.data();
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gd[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Rows of a 2-D tensor picked by `index` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2);
        let cols = shape[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let index = index.to_vec();
        self.op(
            Tensor::from_vec(&[index.len(), cols], data),
            &[x],
            Box::new(move |ctx| vec![Some(scatter_rows(ctx.grad, &index, shape[0]))]),
        )
    }

    /// Inverse of [`Graph::gather_rows`]: row `i` of `x` is added into output row `index[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Var {
        let value = scatter_rows(self.value(x), index, rows);
        let index = index.to_vec();
        self.op(
            value,
            &[x],
            Box::new(move |ctx| {
                let cols = ctx.grad.dim(1);
                let src = ctx.grad.data();
                let mut data = Vec::with_capacity(index.len() * cols);
                for &r in &index {
                    data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
                }
                vec![Some(Tensor::from_vec(&[index.len(), cols], data))]
            }),
        )
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        self.op(
            Tensor::from_vec(&out_shape, data),
            &[x],
            Box::new(move |ctx| vec![Some(expand(ctx.grad, axis, n))]),
        )
    }

    /// Repeat an extent-1 `axis` `n` times.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Var {
        assert_eq!(self.shape(x)[axis], 1);
        let value = expand(self.value(x), axis, n);
        self.op(
            value,
            &[x],
            Box::new(move |ctx| {
                let shape = ctx.grad.shape();
                let (outer, inner) = outer_inner(shape, axis);
                let src = ctx.grad.data();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), data))]
            }),
        )
    }
}

fn scatter_rows(x: &Tensor, index: &[usize], rows: usize) -> Tensor {
    let cols = x.dim(1);
    assert_eq!(x.dim(0), index.len());
    let mut out = Tensor::zeros(&[rows, cols]);
    let od = out.data_mut();
    for (i, &r) in index.iter().enumerate() {
        for (o, &v) in od[r * cols..(r + 1) * cols]
            .iter_mut()
            .zip(&x.data()[i * cols..(i + 1) * cols])
        {
            *o += v;
        }
    }
    out
}

fn expand(x: &Tensor, axis: usize, n: usize) -> Tensor {
    let shape = x.shape();
    let (outer, inner) = outer_inner(shape, axis);
    let src = x.data();
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n;
    Tensor::from_vec(&out_shape, data)
}

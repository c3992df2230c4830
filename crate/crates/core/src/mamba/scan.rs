//! Fused selective scan over many sequences with input-dependent step, `B` and `C`.

use super::ssm::{b_scale_da, ZOH_SERIES_CUTOFF};
use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[inline]
fn coeffs(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let em1 = x.exp_m1();
    let b_scale = if x.abs() < ZOH_SERIES_CUTOFF {
        delta * (1.0 + x * (0.5 + x / 6.0))
    } else {
        delta * em1 / x
    };
    (em1 + 1.0, b_scale)
}

impl Graph {
    /// Runs `S = M / seq_len` independent sequences stored back to back in the rows of
    /// `u [M, D]`. Per row `t` and channel `d` the step is `delta[t, d]`, the diagonal
    /// state matrix row is `a[d, :]` (`[D, N]`), and the input/output maps are
    /// `b[t, :]`, `c[t, :]` (`[M, N]`), shared by all channels. `skip [D]` is the
    /// direct feed-through. Discretization is exact zero-order hold.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, skip: Var, seq_len: usize) -> Var {
        let (m, dim) = (self.shape(u)[0], self.shape(u)[1]);
        let n = self.shape(a)[1];
        assert_eq!(self.shape(delta), &[m, dim]);
        assert_eq!(self.shape(a), &[dim, n]);
        assert_eq!(self.shape(b), &[m, n]);
        assert_eq!(self.shape(c), &[m, n]);
        assert_eq!(self.shape(skip), &[dim]);
        assert!(
            seq_len > 0 && m % seq_len == 0,
            "{m} rows do not split into length {seq_len}"
        );

        let (ud, dd, ad) = (self.value(u).data(), self.value(delta).data(), self.value(a).data());
        let (bd, cd, sd) = (self.value(b).data(), self.value(c).data(), self.value(skip).data());
        let mut y = vec![0.0; m * dim];
        let mut hist = vec![0.0; m * dim * n];
        for t in 0..m {
            let start = t % seq_len == 0;
            let (brow, crow) = (&bd[t * n..(t + 1) * n], &cd[t * n..(t + 1) * n]);
            for d in 0..dim {
                let (dt, x) = (dd[t * dim + d], ud[t * dim + d]);
                let arow = &ad[d * n..(d + 1) * n];
                let at = (t * dim + d) * n;
                let mut acc = sd[d] * x;
                for k in 0..n {
                    let (a_bar, b_scale) = coeffs(dt, arow[k]);
                    let prev = if start { 0.0 } else { hist[at - dim * n + k] };
                    let h = a_bar * prev + b_scale * brow[k] * x;
                    hist[at + k] = h;
                    acc += crow[k] * h;
                }
                y[t * dim + d] = acc;
            }
        }

        self.op(
            Tensor::from_vec(&[m, dim], y),
            &[u, delta, a, b, c, skip],
            Box::new(move |ctx| {
                let [ud, dd, ad, bd, cd, sd] = [0, 1, 2, 3, 4, 5].map(|i| ctx.inputs[i].data());
                let gy = ctx.grad.data();
                let mut gu = vec![0.0; m * dim];
                let mut gdelta = vec![0.0; m * dim];
                let mut ga = vec![0.0; dim * n];
                let mut gb = vec![0.0; m * n];
                let mut gc = vec![0.0; m * n];
                let mut gskip = vec![0.0; dim];
                // Running adjoint of the state, one row of N per channel.
                let mut gh = vec![0.0; dim * n];
                for t in (0..m).rev() {
                    if t % seq_len == seq_len - 1 {
                        gh.fill(0.0);
                    }
                    let start = t % seq_len == 0;
                    let (brow, crow) = (&bd[t * n..(t + 1) * n], &cd[t * n..(t + 1) * n]);
                    for d in 0..dim {
                        let i = t * dim + d;
                        let (dt, x, g) = (dd[i], ud[i], gy[i]);
                        gu[i] += g * sd[d];
                        gskip[d] += g * x;
                        let arow = &ad[d * n..(d + 1) * n];
                        let at = i * n;
                        let (mut g_delta, mut g_u) = (0.0, 0.0);
                        for k in 0..n {
                            let h = hist[at + k];
                            gc[t * n + k] += g * h;
                            let adj = gh[d * n + k] + g * crow[k];
                            let av = arow[k];
                            let (a_bar, b_scale) = coeffs(dt, av);
                            let prev = if start { 0.0 } else { hist[at - dim * n + k] };
                            let g_abar = adj * prev;
                            let g_bs = adj * brow[k] * x;
                            g_delta += g_abar * a_bar * av + g_bs * a_bar;
                            ga[d * n + k] += g_abar * a_bar * dt + g_bs * b_scale_da(dt, av, a_bar);
                            gb[t * n + k] += adj * b_scale * x;
                            g_u += adj * b_scale * brow[k];
                            gh[d * n + k] = adj * a_bar;
                        }
                        gdelta[i] += g_delta;
                        gu[i] += g_u;
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[m, dim], gu)),
                    Some(Tensor::from_vec(&[m, dim], gdelta)),
                    Some(Tensor::from_vec(&[dim, n], ga)),
                    Some(Tensor::from_vec(&[m, n], gb)),
                    Some(Tensor::from_vec(&[m, n], gc)),
                    Some(Tensor::from_vec(&[dim], gskip)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::ssm::{ssm_scan, zoh_discretize, SsmParams};
    use super::*;
    use crate::autodiff::gradcheck::check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn time_invariant_inputs_match_reference_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (seqs, len, dim, n) = (2, 7, 3, 4);
        let m = seqs * len;
        let u = rand_t(&mut rng, &[m, dim], -1.0, 1.0);
        let steps: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..0.5)).collect();
        let delta = Tensor::from_vec(&[m, dim], (0..m * dim).map(|i| steps[i % dim]).collect());
        let a = rand_t(&mut rng, &[dim, n], -3.0, 0.0);
        let brow: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let crow: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = Tensor::from_vec(&[m, n], brow.iter().cycle().take(m * n).copied().collect());
        let c = Tensor::from_vec(&[m, n], crow.iter().cycle().take(m * n).copied().collect());
        let skip = rand_t(&mut rng, &[dim], -1.0, 1.0);

        let mut g = Graph::new();
        let vars = [&u, &delta, &a, &b, &c, &skip].map(|t| g.constant(t.clone()));
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], len);
        let y = g.value(y);
        for s in 0..seqs {
            for d in 0..dim {
                let p = SsmParams {
                    a: a.data()[d * n..(d + 1) * n].to_vec(),
                    b: brow.clone(),
                    c: crow.clone(),
                    d: skip.data()[d],
                    delta: steps[d],
                };
                let x: Vec<f64> = (0..len).map(|t| u.data()[(s * len + t) * dim + d]).collect();
                let want = ssm_scan(&zoh_discretize(&p).unwrap(), &p.c, p.d, &x);
                for t in 0..len {
                    let got = y.data()[(s * len + t) * dim + d];
                    assert!((got - want[t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (len, m, dim, n) = (4, 8, 3, 2);
        let inputs = [
            rand_t(&mut rng, &[m, dim], -1.0, 1.0),
            rand_t(&mut rng, &[m, dim], 0.05, 1.0),
            rand_t(&mut rng, &[dim, n], -2.0, -0.1),
            rand_t(&mut rng, &[m, n], -1.0, 1.0),
            rand_t(&mut rng, &[m, n], -1.0, 1.0),
            rand_t(&mut rng, &[dim], -1.0, 1.0),
        ];
        let weights = rand_t(&mut rng, &[m, dim], -1.0, 1.0);
        check(
            &inputs,
            |g, v| {
                let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], len);
                let w = g.constant(weights.clone());
                let y = g.mul(y, w);
                g.sum_all(y)
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn gradients_near_zero_step_product() {
        // Exercises the series branches of the ZOH coefficients.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, m, dim, n) = (3, 3, 2, 2);
        let inputs = [
            rand_t(&mut rng, &[m, dim], -1.0, 1.0),
            rand_t(&mut rng, &[m, dim], 5e-3, 1e-2),
            rand_t(&mut rng, &[dim, n], -9e-3, -5e-3),
            rand_t(&mut rng, &[m, n], -1.0, 1.0),
            rand_t(&mut rng, &[m, n], -1.0, 1.0),
            rand_t(&mut rng, &[dim], -1.0, 1.0),
        ];
        check(
            &inputs,
            |g, v| {
                let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], len);
                let y = g.square(y);
                g.sum_all(y)
            },
            1e-6,
            1e-4,
        );
    }
}

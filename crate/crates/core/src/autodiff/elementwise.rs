use super::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(x).map(f);
        self.op(
            value,
            &[x],
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(ctx.output.data())
                    .map(|((&g, &xv), &yv)| g * df(xv, yv))
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), data))]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |v, _| {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |v, _| sigmoid(v))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |v, _| if v > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v, _| 2.0 * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(
            value,
            &[a, b],
            Box::new(|ctx| {
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(y, |g, v| g * v)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(x, |g, v| g * v)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.op(
            value,
            &[a, b],
            Box::new(|ctx| {
                let y = ctx.inputs[1];
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(y, |g, v| g / v)),
                    ctx.needs[1].then(|| {
                        // d(a/b)/db = -(a/b)/b
                        let t = ctx.grad.zip_map(ctx.output, |g, q| -g * q);
                        t.zip_map(y, |t, v| t / v)
                    }),
                ]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.op(
            value,
            &[x],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

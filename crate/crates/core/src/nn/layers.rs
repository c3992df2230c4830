use rand::Rng;

use super::{init, BnUpdate, Ctx, Mode, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::tensor::Tensor;

/// Row-wise affine map `x[M, in] -> [M, out]`; weight stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init::uniform(rng, &[in_dim, out_dim], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let y = cx.g.matmul(x, cx.p(self.weight));
        match self.bias {
            Some(b) => cx.g.add_row_bias(y, cx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init::kaiming(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        cx.g.conv2d(x, cx.p(self.weight), cx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let bound = 1.0 / ((out_ch * 4) as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init::uniform(rng, &[in_ch, out_ch, 2, 2], bound),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        cx.g.conv_transpose2x2(x, cx.p(self.weight), cx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let (gamma, beta) = (cx.p(self.gamma), cx.p(self.beta));
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.g.batch_norm_train(x, gamma, beta, Self::EPS);
                cx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                y
            }
            Mode::Eval => {
                let mean = cx.g.value(cx.p(self.running_mean)).data().to_vec();
                let var = cx.g.value(cx.p(self.running_var)).data().to_vec();
                cx.g.batch_norm_eval(x, gamma, beta, &mean, &var, Self::EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        cx.g.layer_norm(x, cx.p(self.gamma), cx.p(self.beta), Self::EPS)
    }
}

/// Depthwise 3x3 convolution over channels-last feature maps.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv3x3 {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init::uniform(rng, &[channels, 3, 3], 1.0 / 3.0),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    /// `x` is `[N, H, W, C]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        cx.g.depthwise_conv3x3_nhwc(x, cx.p(self.weight), cx.p(self.bias))
    }
}

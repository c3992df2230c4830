//! Convolutional U-Net branch: the local-receptive-field expert.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2x2, Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Per-class score maps `[N, C, H, W]` produced by either branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Tensor);

impl Logits {
    pub fn num_classes(&self) -> usize {
        self.0.dim(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl CnnConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            base_channels: 16,
            depth: 4,
            num_classes,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("U-Net depth {} < 2", self.depth)));
        }
        if self.base_channels == 0 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let stride = 1usize << (self.depth - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input {h}x{w} not divisible by U-Net stride {stride}"
            )));
        }
        Ok(())
    }
}

/// conv3x3 -> BN -> LeakyReLU, twice.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), cout),
        }
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.conv1.forward(cx, x);
        let y = self.bn1.forward(cx, y);
        let y = cx.g.leaky_relu(y, LEAKY_SLOPE);
        let y = self.conv2.forward(cx, y);
        let y = self.bn2.forward(cx, y);
        cx.g.leaky_relu(y, LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvTranspose2x2,
    block: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: CnnConfig,
    encoder: Vec<ConvBlock>,
    decoder: Vec<UpLevel>,
    head: Conv2d,
}

impl UNet {
    /// Builds the layer graph and registers freshly initialized parameters in a new store.
    pub fn new(config: CnnConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ch: Vec<usize> = (0..config.depth).map(|l| config.base_channels << l).collect();
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for (l, &c) in ch.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut store, rng, &format!("enc{l}"), cin, c));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (0..config.depth - 1).rev() {
            decoder.push(UpLevel {
                up: ConvTranspose2x2::new(&mut store, rng, &format!("dec{l}.up"), ch[l + 1], ch[l]),
                block: ConvBlock::new(&mut store, rng, &format!("dec{l}.block"), 2 * ch[l], ch[l]),
            });
        }
        let head = Conv2d::new(&mut store, rng, "head", ch[0], config.num_classes, 1);
        Ok((
            Self {
                config,
                encoder,
                decoder,
                head,
            },
            store,
        ))
    }

    /// `x` is `[N, in_channels, H, W]`; returns logits `[N, C, H, W]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_with_skip_ablation(cx, x, None)
    }

    /// Forward pass with the skip connection at `zero_skip` (encoder level) replaced by zeros.
    pub fn forward_with_skip_ablation(&self, cx: &mut Ctx<'_>, x: Var, zero_skip: Option<usize>) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Config(format!("U-Net input shape {shape:?}")));
        }
        self.config.check_input(shape[2], shape[3])?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = x;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                y = cx.g.max_pool2(y);
            }
            y = block.forward(cx, y);
            skips.push(y);
        }
        skips.pop();
        for (level, (up, skip)) in self.decoder.iter().zip(skips.into_iter().rev()).enumerate() {
            let l = self.encoder.len() - 2 - level;
            y = up.up.forward(cx, y);
            let skip = if zero_skip == Some(l) {
                let zeros = Tensor::zeros(cx.g.shape(skip));
                cx.g.constant(zeros)
            } else {
                skip
            };
            y = cx.g.concat(&[skip, y], 1);
            y = up.block.forward(cx, y);
        }
        Ok(self.head.forward(cx, y))
    }

    /// Eval-mode logits for a batch `[N, 1, H, W]` without recording gradients.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Logits> {
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let mut cx = Ctx::new(&mut g, &params, Mode::Eval);
        let y = self.forward(&mut cx, x)?;
        Ok(Logits(g.value(y).clone()))
    }
}

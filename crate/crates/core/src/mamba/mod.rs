//! State-space U-Net branch: the global-receptive-field expert.
//!
//! Feature maps are kept channels-last as `[N * h * w, C]` row matrices so that
//! every linear layer is a single GEMM and scans can gather rows directly.

mod scan;
pub mod ssm;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::cnn::Logits;
use crate::error::{Error, Result};
use crate::nn::{Ctx, DepthwiseConv3x3, LayerNorm, Linear, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PATCH: usize = 4;
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct VssConfig {
    pub embed_dim: usize,
    pub state_dim: usize,
    /// VSS blocks per encoder stage and per decoder stage.
    pub depth: usize,
    /// Inner width of a VSS block relative to its input width.
    pub expand: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl VssConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            embed_dim: 32,
            state_dim: 8,
            depth: 1,
            expand: 2,
            num_classes,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.state_dim == 0
            || self.depth == 0
            || self.expand == 0
            || self.num_classes < 2
            || self.in_channels == 0
        {
            return Err(Error::Config(format!("invalid VSS config {self:?}")));
        }
        Ok(())
    }

    /// Total downsampling between the input and the deepest stage.
    pub fn stride() -> usize {
        PATCH << (STAGES - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = Self::stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Config(format!("input {h}x{w} not divisible by {s}")));
        }
        Ok(())
    }
}

/// A channels-last feature map `[n * h * w, c]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub x: Var,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.x)[1]
    }

    fn with(self, x: Var) -> Self {
        Self { x, ..self }
    }
}

/// Row orders of the four scan directions over `n` maps of size `h x w`:
/// row-major forward/backward, then column-major forward/backward.
pub fn scan_order(n: usize, h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    let mut index = Vec::with_capacity(4 * n * hw);
    let row_major = |t: usize| t;
    let col_major = |t: usize| (t % h) * w + t / h;
    for dir in 0..4 {
        for b in 0..n {
            for t in 0..hw {
                let t = if dir % 2 == 1 { hw - 1 - t } else { t };
                let pos = if dir < 2 { row_major(t) } else { col_major(t) };
                index.push(b * hw + pos);
            }
        }
    }
    index
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Input-dependent (selective) diagonal SSM applied independently per channel.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub dt_rank: usize,
    pub state_dim: usize,
}

impl SelectiveSsm {
    pub const DT_MIN: f64 = 1e-3;
    pub const DT_MAX: f64 = 1e-1;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, state_dim: usize) -> Self {
        let dt_rank = dim.div_ceil(16);
        let x_proj = Linear::new(
            store,
            rng,
            &format!("{name}.x_proj"),
            dim,
            dt_rank + 2 * state_dim,
            false,
        );
        let dt_proj = Linear::new(store, rng, &format!("{name}.dt_proj"), dt_rank, dim, true);
        let (lo, hi) = (Self::DT_MIN.ln(), Self::DT_MAX.ln());
        let bias = dt_proj.bias.expect("dt projection has a bias");
        for v in store.get_mut(bias).data_mut() {
            *v = inverse_softplus(rng.random_range(lo..hi).exp());
        }
        let a_log = Tensor::from_vec(
            &[dim, state_dim],
            (0..dim * state_dim)
                .map(|i| ((i % state_dim + 1) as f64).ln())
                .collect(),
        );
        Self {
            x_proj,
            dt_proj,
            a_log: store.add(format!("{name}.A_log"), a_log),
            skip: store.add(format!("{name}.D"), Tensor::full(&[dim], 1.0)),
            dt_rank,
            state_dim,
        }
    }

    /// `x` holds sequences of length `seq_len` back to back in its rows.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, seq_len: usize) -> Var {
        let (r, n) = (self.dt_rank, self.state_dim);
        let proj = self.x_proj.forward(cx, x);
        let dt = cx.g.narrow(proj, 1, 0, r);
        let b = cx.g.narrow(proj, 1, r, n);
        let c = cx.g.narrow(proj, 1, r + n, n);
        let dt = self.dt_proj.forward(cx, dt);
        let delta = cx.g.softplus(dt);
        let a = cx.g.exp(cx.p(self.a_log));
        let a = cx.g.neg(a);
        cx.g.selective_scan(x, delta, a, b, c, cx.p(self.skip), seq_len)
    }
}

/// Four-direction 2-D selective scan with parameters shared across directions;
/// the directional outputs are summed.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub ssm: SelectiveSsm,
}

impl Ss2d {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, state_dim: usize) -> Self {
        Self {
            ssm: SelectiveSsm::new(store, rng, name, dim, state_dim),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, f: FeatureMap) -> FeatureMap {
        let rows = f.n * f.h * f.w;
        let index = scan_order(f.n, f.h, f.w);
        let seqs = cx.g.gather_rows(f.x, &index);
        let y = self.ssm.forward(cx, seqs, f.h * f.w);
        f.with(cx.g.scatter_add_rows(y, &index, rows))
    }
}

/// Gated residual block: `x + out(SS2D-branch * SiLU(gate))`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub dwconv: DepthwiseConv3x3,
    pub ss2d: Ss2d,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub inner: usize,
}

impl VssBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, cfg: &VssConfig) -> Self {
        let inner = cfg.expand * dim;
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), dim, 2 * inner, false),
            dwconv: DepthwiseConv3x3::new(store, rng, &format!("{name}.dwconv"), inner),
            ss2d: Ss2d::new(store, rng, &format!("{name}.ss2d"), inner, cfg.state_dim),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), inner),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), inner, dim, false),
            inner,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, f: FeatureMap) -> FeatureMap {
        let di = self.inner;
        let y = self.norm.forward(cx, f.x);
        let xz = self.in_proj.forward(cx, y);
        let xp = cx.g.narrow(xz, 1, 0, di);
        let z = cx.g.narrow(xz, 1, di, di);
        let xp = cx.g.reshape(xp, &[f.n, f.h, f.w, di]);
        let xp = self.dwconv.forward(cx, xp);
        let xp = cx.g.reshape(xp, &[f.n * f.h * f.w, di]);
        let xp = cx.g.silu(xp);
        let xp = self.ss2d.forward(cx, f.with(xp)).x;
        let xp = self.out_norm.forward(cx, xp);
        let z = cx.g.silu(z);
        let y = cx.g.mul(xp, z);
        let y = self.out_proj.forward(cx, y);
        f.with(cx.g.add(f.x, y))
    }
}

/// Rearranges `s x s` pixel blocks into channels: `[n*h*w, c] -> [n*(h/s)*(w/s), s*s*c]`.
fn space_to_depth(g: &mut Graph, f: FeatureMap, s: usize) -> FeatureMap {
    let c = f.channels(g);
    let x = g.reshape(f.x, &[f.n, f.h / s, s, f.w / s, s, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    let (h, w) = (f.h / s, f.w / s);
    FeatureMap {
        x: g.reshape(x, &[f.n * h * w, s * s * c]),
        n: f.n,
        h,
        w,
    }
}

/// Inverse of [`space_to_depth`].
fn depth_to_space(g: &mut Graph, f: FeatureMap, s: usize) -> FeatureMap {
    let c = f.channels(g) / (s * s);
    let x = g.reshape(f.x, &[f.n, f.h, f.w, s, s, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    let (h, w) = (f.h * s, f.w * s);
    FeatureMap {
        x: g.reshape(x, &[f.n * h * w, c]),
        n: f.n,
        h,
        w,
    }
}

/// 2x2 space-to-channel, normalization, linear reduction `4c -> 2c`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, rng, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, f: FeatureMap) -> FeatureMap {
        let f = space_to_depth(cx.g, f, 2);
        let x = self.norm.forward(cx, f.x);
        f.with(self.reduction.forward(cx, x))
    }
}

/// Linear expansion to `s*s*out` channels, channel-to-space by `s`, normalization.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub scale: usize,
}

impl PatchExpand {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, out: usize, scale: usize) -> Self {
        Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), dim, scale * scale * out, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out),
            scale,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, f: FeatureMap) -> FeatureMap {
        let x = self.expand.forward(cx, f.x);
        let f = depth_to_space(cx.g, f.with(x), self.scale);
        f.with(self.norm.forward(cx, f.x))
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: PatchExpand,
    fuse: Linear,
    blocks: Vec<VssBlock>,
}

/// `(h, w, channels)` of one encoder stage.
pub type StageShape = (usize, usize, usize);

#[derive(Clone, Debug)]
pub struct MambaUNet {
    pub config: VssConfig,
    embed: Linear,
    embed_norm: LayerNorm,
    encoder: Vec<Vec<VssBlock>>,
    merges: Vec<PatchMerging>,
    decoder: Vec<DecoderStage>,
    final_up: PatchExpand,
    head: Linear,
}

impl MambaUNet {
    pub fn new(config: VssConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = config.embed_dim;
        let dims: Vec<usize> = (0..STAGES).map(|l| c << l).collect();
        let embed = Linear::new(s, rng, "embed.proj", PATCH * PATCH * config.in_channels, c, true);
        let embed_norm = LayerNorm::new(s, "embed.norm", c);
        let blocks = |s: &mut ParamStore, rng: &mut _, name: &str, dim| {
            (0..config.depth)
                .map(|i| VssBlock::new(s, rng, &format!("{name}.{i}"), dim, &config))
                .collect::<Vec<_>>()
        };
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for (l, &d) in dims.iter().enumerate() {
            encoder.push(blocks(s, rng, &format!("enc{l}"), d));
            if l + 1 < STAGES {
                merges.push(PatchMerging::new(s, rng, &format!("merge{l}"), d));
            }
        }
        let mut decoder = Vec::new();
        for l in (0..STAGES - 1).rev() {
            let d = dims[l];
            decoder.push(DecoderStage {
                up: PatchExpand::new(s, rng, &format!("dec{l}.up"), dims[l + 1], d, 2),
                fuse: Linear::new(s, rng, &format!("dec{l}.fuse"), 2 * d, d, true),
                blocks: blocks(s, rng, &format!("dec{l}"), d),
            });
        }
        let final_up = PatchExpand::new(s, rng, "final_up", c, c, PATCH);
        let head = Linear::new(s, rng, "head", c, config.num_classes, true);
        let net = Self {
            config,
            embed,
            embed_norm,
            encoder,
            merges,
            decoder,
            final_up,
            head,
        };
        Ok((net, store))
    }

    /// `x` is `[N, in_channels, H, W]`; returns logits `[N, C, H, W]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.forward_traced(cx, x).map(|(y, _)| y)
    }

    /// Like [`MambaUNet::forward`], also reporting `(h, w, channels)` of each encoder stage.
    pub fn forward_traced(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Vec<StageShape>)> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Config(format!("state-space U-Net input shape {shape:?}")));
        }
        let (n, cin, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        self.config.check_input(h, w)?;
        let nhwc = cx.g.permute(x, &[0, 2, 3, 1]);
        let rows = cx.g.reshape(nhwc, &[n * h * w, cin]);
        let f = space_to_depth(cx.g, FeatureMap { x: rows, n, h, w }, PATCH);
        let e = self.embed.forward(cx, f.x);
        let mut f = f.with(self.embed_norm.forward(cx, e));

        let mut skips = Vec::with_capacity(STAGES);
        let mut trace = Vec::with_capacity(STAGES);
        for (l, stage) in self.encoder.iter().enumerate() {
            if l > 0 {
                f = self.merges[l - 1].forward(cx, f);
            }
            for block in stage {
                f = block.forward(cx, f);
            }
            trace.push((f.h, f.w, f.channels(cx.g)));
            skips.push(f);
        }
        skips.pop();
        for (stage, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = stage.up.forward(cx, f);
            let cat = cx.g.concat(&[skip.x, up.x], 1);
            f = up.with(stage.fuse.forward(cx, cat));
            for block in &stage.blocks {
                f = block.forward(cx, f);
            }
        }
        let f = self.final_up.forward(cx, f);
        let y = self.head.forward(cx, f.x);
        let y = cx.g.reshape(y, &[n, h, w, self.config.num_classes]);
        Ok((cx.g.permute(y, &[0, 3, 1, 2]), trace))
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

/// Sets every linear weight of a store to zero (used to exercise residual paths).
#[cfg(test)]
fn zero_linear_weights(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.param_mut(id);
        if p.name.ends_with("proj.weight") {
            p.value.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn run<T>(store: &ParamStore, f: impl FnOnce(&mut Ctx<'_>) -> T) -> (Graph, T) {
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let out = {
            let mut cx = Ctx::new(&mut g, &params, Mode::Eval);
            f(&mut cx)
        };
        (g, out)
    }

    #[test]
    fn scan_order_covers_every_position_per_direction() {
        let index = scan_order(2, 3, 4);
        for dir in index.chunks(24) {
            let mut sorted = dir.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..24).collect::<Vec<_>>());
        }
        // column-major forward starts down the first column
        assert_eq!(&index[48..51], &[0, 4, 8]);
    }

    #[test]
    fn selective_ssm_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, &mut rng, "s", 6, 4);
        let (g, y) = run(&store, |cx| {
            let x = cx.g.constant(Tensor::zeros(&[10, 6]));
            ssm.forward(cx, x, 5)
        });
        assert_eq!(g.shape(y), &[10, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_steps_lie_in_declared_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, &mut rng, "s", 64, 8);
        for &b in store.get(ssm.dt_proj.bias.unwrap()).data() {
            let dt = crate::autodiff::softplus(b);
            assert!((SelectiveSsm::DT_MIN..=SelectiveSsm::DT_MAX).contains(&dt), "{dt}");
        }
        assert_eq!(
            store.get(ssm.a_log).data()[..8]
                .iter()
                .map(|v| v.exp().round())
                .collect::<Vec<_>>(),
            (1..=8).map(f64::from).collect::<Vec<_>>()
        );
    }

    #[test]
    fn selective_ssm_gradients_wrt_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, &mut rng, "s", 4, 3);
        let x = rand_t(&mut rng, &[6, 4]);
        let mut coords = Vec::new();
        for id in [
            ssm.x_proj.weight,
            ssm.dt_proj.weight,
            ssm.dt_proj.bias.unwrap(),
            ssm.a_log,
            ssm.skip,
        ] {
            coords.extend((0..store.get(id).len()).map(|i| (id, i)));
        }
        let results = check_params(&store, &coords, Mode::Train, 1e-3, |cx| {
            let xv = cx.g.constant(x.clone());
            let y = ssm.forward(cx, xv, 3);
            cx.g.sum_all(y)
        });
        for r in results {
            assert!(r.rel_err(1e-7) < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn ss2d_single_pixel_is_four_scans() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ss = Ss2d::new(&mut store, &mut rng, "s", 5, 4);
        let x = rand_t(&mut rng, &[1, 5]);
        let (g, (a, b)) = run(&store, |cx| {
            let xv = cx.g.constant(x.clone());
            let a = ss
                .forward(
                    cx,
                    FeatureMap {
                        x: xv,
                        n: 1,
                        h: 1,
                        w: 1,
                    },
                )
                .x;
            let b = ss.ssm.forward(cx, xv, 1);
            (a, b)
        });
        for (a, b) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn ss2d_commutes_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c = 3;
        let ss = Ss2d::new(&mut store, &mut rng, "s", c, 4);
        let (h, w) = (8, 8);
        let x = rand_t(&mut rng, &[h * w, c]);
        let transpose = |t: &Tensor| {
            let mut out = vec![0.0; t.len()];
            for r in 0..h {
                for col in 0..w {
                    for k in 0..c {
                        out[(col * h + r) * c + k] = t.data()[(r * w + col) * c + k];
                    }
                }
            }
            Tensor::from_vec(t.shape(), out)
        };
        let (g, (y, yt)) = run(&store, |cx| {
            let a = cx.g.constant(x.clone());
            let b = cx.g.constant(transpose(&x));
            let y = ss.forward(cx, FeatureMap { x: a, n: 1, h, w }).x;
            let yt = ss.forward(cx, FeatureMap { x: b, n: 1, h: w, w: h }).x;
            (y, yt)
        });
        let want = transpose(g.value(y));
        for (a, b) in want.data().iter().zip(g.value(yt).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vss_block_with_zero_maps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = VssConfig::new(2);
        let block = VssBlock::new(&mut store, &mut rng, "b", 32, &cfg);
        zero_linear_weights(&mut store);
        let x = rand_t(&mut rng, &[64, 32]);
        let (g, y) = run(&store, |cx| {
            let xv = cx.g.constant(x.clone());
            block
                .forward(
                    cx,
                    FeatureMap {
                        x: xv,
                        n: 1,
                        h: 8,
                        w: 8,
                    },
                )
                .x
        });
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn vss_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = VssBlock::new(&mut store, &mut rng, "b", 32, &VssConfig::new(2));
        let (g, y) = run(&store, |cx| {
            let xv = cx.g.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(0), &[64, 32]));
            block
                .forward(
                    cx,
                    FeatureMap {
                        x: xv,
                        n: 1,
                        h: 8,
                        w: 8,
                    },
                )
                .x
        });
        assert_eq!(g.shape(y), &[64, 32]);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn space_depth_round_trip() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(&[2 * 4 * 8, 3], (0..192).map(f64::from).collect());
        let x = g.constant(t.clone());
        let f = FeatureMap { x, n: 2, h: 4, w: 8 };
        let down = space_to_depth(&mut g, f, 2);
        assert_eq!((down.h, down.w), (2, 4));
        assert_eq!(g.shape(down.x), &[16, 12]);
        // the first merged token holds pixels (0,0), (0,1), (1,0), (1,1) in that order
        assert_eq!(
            &g.value(down.x).data()[..12],
            &[0., 1., 2., 3., 4., 5., 24., 25., 26., 27., 28., 29.]
        );
        let up = depth_to_space(&mut g, down, 2);
        assert_eq!(g.value(up.x), &t);
    }

    #[test]
    fn network_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (net, store) = MambaUNet::new(VssConfig::new(2), &mut rng).unwrap();
        let x = rand_t(&mut rng, &[1, 1, 64, 64]);
        let (g, (y, trace)) = run(&store, |cx| {
            let xv = cx.g.constant(x.clone());
            net.forward_traced(cx, xv).unwrap()
        });
        assert_eq!(g.shape(y), &[1, 2, 64, 64]);
        assert!(g.value(y).all_finite());
        assert_eq!(trace, vec![(16, 16, 32), (8, 8, 64), (4, 4, 128), (2, 2, 256)]);
        let a = net.predict(&store, &x).unwrap();
        assert_eq!(&a.0, g.value(y));
        assert_eq!(a, net.predict(&store, &x).unwrap());
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (net, store) = MambaUNet::new(VssConfig::new(2), &mut rng).unwrap();
        let err = net.predict(&store, &Tensor::zeros(&[1, 1, 48, 64])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn init_is_reproducible() {
        let build = || {
            MambaUNet::new(VssConfig::new(3), &mut ChaCha8Rng::seed_from_u64(8))
                .unwrap()
                .1
        };
        let (a, b) = (build(), build());
        assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value));
        assert!(a.params().iter().any(|p| p.name.contains("A_log")));
    }
}

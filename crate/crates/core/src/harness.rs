//! Training and evaluation orchestration.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Graph;
use crate::cnn::{CnnConfig, UNet};
use crate::data::{derive_seed, load_dataset, Sample};
use crate::egc::{argmax_channels, channel_mask, cross_pseudo_loss, evidence_guidance, partition, ThresholdState};
use crate::error::{Error, Result};
use crate::evidence::{evidence_maps, evidential_graph, save_uncertainty_png};
use crate::losses::{
    anneal, gated_crf, partial_ce, pedl_loss, softmax, total_loss, Components, CrfAffinity, CrfKernel,
};
use crate::mamba::{MambaUNet, VssConfig};
use crate::metrics::{evaluate, MetricReport};
use crate::nn::optim::Sgd;
use crate::nn::{apply_bn_updates, checkpoint, Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Running-statistics momentum of the batch-norm layers.
pub const BN_MOMENTUM: f64 = 0.1;
/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: usize = 10;
const EVAL_BATCH: usize = 8;

pub const LOG_HEADER: &str =
    "iter,loss_total,loss_pce_cnn,loss_pce_mamba,loss_crf_cnn,loss_crf_mamba,loss_evi,loss_ic,loss_c,lambda,lr";

/// Which objective to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Both branches with evidence-guided consistency.
    Full,
    /// Both branches; the guidance and pseudo-label terms are replaced by a plain
    /// MSE between the two branches' expected probabilities on every pixel.
    MseConsistency,
    /// CNN branch alone with partial cross-entropy.
    PceOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "mse" => Ok(Self::MseConsistency),
            "pce" => Ok(Self::PceOnly),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected full, mse or pce)"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::MseConsistency => "mse",
            Self::PceOnly => "pce",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub iter_max: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint_interval: usize,
    pub out_dir: PathBuf,
    pub mode: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            epsilon: 0.5,
            gamma: 0.1,
            batch_size: 4,
            iter_max: 2000,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint_interval: 500,
            out_dir: PathBuf::from("run"),
            mode: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("tau", self.tau), ("epsilon", self.epsilon), ("lr0", self.lr0)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("gamma and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.iter_max == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config(
                "batch_size, iter_max and checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {key}: {e}", n + 1));
            macro_rules! num {
                ($field:ident) => {
                    cfg.$field = value.parse().map_err(|e| bad(&e))?
                };
            }
            match key {
                "tau" => num!(tau),
                "epsilon" => num!(epsilon),
                "gamma" => num!(gamma),
                "batch_size" => num!(batch_size),
                "iter_max" => num!(iter_max),
                "lr0" => num!(lr0),
                "momentum" => num!(momentum),
                "weight_decay" => num!(weight_decay),
                "seed" => num!(seed),
                "checkpoint_interval" => num!(checkpoint_interval),
                "dataset" => cfg.dataset = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "mode" => cfg.mode = value.parse()?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "tau = {}\nepsilon = {}\ngamma = {}\nbatch_size = {}\niter_max = {}\nlr0 = {}\nmomentum = {}\n\
             weight_decay = {}\nseed = {}\ndataset = {}\ncheckpoint_interval = {}\nout_dir = {}\nmode = {}\n",
            self.tau,
            self.epsilon,
            self.gamma,
            self.batch_size,
            self.iter_max,
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.seed,
            self.dataset.display(),
            self.checkpoint_interval,
            self.out_dir.display(),
            self.mode,
        )
    }
}

/// `(1 - iter / iter_max)^0.9 * lr0`.
pub fn poly_lr(iter: usize, iter_max: usize, lr0: f64) -> f64 {
    assert!(iter <= iter_max && iter_max > 0);
    (1.0 - iter as f64 / iter_max as f64).powf(0.9) * lr0
}

/// One draw of the augmentation pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns; only drawn for square images.
    pub quarter_turns: u8,
    /// Extra rotation in degrees, nearest-neighbour resampled.
    pub angle_deg: f64,
    pub equalize: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            quarter_turns: 0,
            angle_deg: 0.0,
            equalize: false,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn draw(rng: &mut impl Rng, square: bool) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: if square { rng.random_range(0..4) } else { 0 },
            angle_deg: if rng.random_bool(0.5) {
                rng.random_range(-15.0..15.0)
            } else {
                0.0
            },
            equalize: rng.random_bool(0.1),
            brightness: rng.random_range(-0.05..0.05),
            contrast: rng.random_range(0.9..1.1),
        }
    }
}

fn remap<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    fill: T,
    f: impl Fn(usize, usize) -> Option<(usize, usize)>,
) -> Vec<T> {
    (0..h * w)
        .map(|p| f(p / w, p % w).map_or(fill, |(y, x)| src[y * w + x]))
        .collect()
}

/// Maps each 8-bit level through the normalized cumulative histogram.
pub fn equalize(image: &[f64]) -> Vec<f64> {
    let levels: Vec<usize> = image.iter().map(|&v| crate::data::quantize(v) as usize).collect();
    let mut cdf = [0usize; 256];
    for &l in &levels {
        cdf[l] += 1;
    }
    for i in 1..256 {
        cdf[i] += cdf[i - 1];
    }
    let min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let span = (levels.len() - min).max(1) as f64;
    levels.iter().map(|&l| (cdf[l] - min) as f64 / span).collect()
}

pub fn apply_augment(s: &Sample, p: &AugmentParams) -> Sample {
    let (h, w) = (s.h, s.w);
    let fill_label = s.num_classes as u8;
    let mut out = s.clone();
    let spatial = |out: &mut Sample, f: &dyn Fn(usize, usize) -> Option<(usize, usize)>| {
        out.image = remap(&out.image, h, w, 0.0, f);
        out.mask = remap(&out.mask, h, w, 0, f);
        out.scribble = remap(&out.scribble, h, w, fill_label, f);
    };
    if p.hflip {
        spatial(&mut out, &|y, x| Some((y, w - 1 - x)));
    }
    if p.vflip {
        spatial(&mut out, &|y, x| Some((h - 1 - y, x)));
    }
    for _ in 0..p.quarter_turns {
        assert_eq!(h, w, "quarter turns need a square image");
        // (r, c) moves to (w - 1 - c, r); read back through the inverse.
        spatial(&mut out, &|y, x| Some((x, w - 1 - y)));
    }
    if p.angle_deg != 0.0 {
        let (s, c) = p.angle_deg.to_radians().sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        spatial(&mut out, &|y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let (sy, sx) = ((c * dy - s * dx + cy).round(), (s * dy + c * dx + cx).round());
            (sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64).then_some((sy as usize, sx as usize))
        });
    }
    if p.equalize {
        out.image = equalize(&out.image);
    }
    if p.brightness != 0.0 || p.contrast != 1.0 {
        let mean = out.image.iter().sum::<f64>() / out.image.len() as f64;
        for v in out.image.iter_mut() {
            *v = ((*v - mean) * p.contrast + mean + p.brightness).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    apply_augment(s, &AugmentParams::draw(rng, s.h == s.w))
}

/// Stacks sample images into `[N, 1, H, W]`.
pub fn image_batch(samples: &[&Sample]) -> Tensor {
    let (h, w) = (samples[0].h, samples[0].w);
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::from_vec(&[samples.len(), 1, h, w], data)
}

/// Both branches and their parameters. The state-space branch is absent in CNN-only runs.
pub struct Models {
    pub cnn: UNet,
    pub cnn_store: ParamStore,
    pub mamba: Option<(MambaUNet, ParamStore)>,
}

impl Models {
    pub fn new(num_classes: usize, seed: u64, with_mamba: bool) -> Result<Self> {
        let (cnn, cnn_store) = UNet::new(
            CnnConfig::new(num_classes),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 100)),
        )?;
        let mamba = if with_mamba {
            Some(MambaUNet::new(
                VssConfig::new(num_classes),
                &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 101)),
            )?)
        } else {
            None
        };
        Ok(Self { cnn, cnn_store, mamba })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.cnn_store, &dir.join("cnn.ckpt"))?;
        if let Some((_, store)) = &self.mamba {
            checkpoint::save(store, &dir.join("mamba.ckpt"))?;
        }
        Ok(())
    }
}

/// Builds a CNN for `num_classes` and loads its weights from `path`.
pub fn load_cnn(path: &Path, num_classes: usize) -> Result<(UNet, ParamStore)> {
    let (cnn, mut store) = UNet::new(CnnConfig::new(num_classes), &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::load_into(&mut store, path)?;
    Ok((cnn, store))
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub total: f64,
    pub parts: Components<f64>,
    pub lambda: f64,
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.iter, self.total);
        for v in self.parts.to_array() {
            write!(s, ",{v}").unwrap();
        }
        write!(s, ",{},{}", self.lambda, self.lr).unwrap();
        s
    }
}

/// What happened in one optimizer iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied(LogRow),
    /// The loss was not finite; parameters were left unchanged.
    Skipped(LogRow),
}

/// Drives optimization over an in-memory training set.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub threshold: ThresholdState,
    /// Where periodic checkpoints go; `None` keeps training in memory.
    pub checkpoint_dir: Option<PathBuf>,
    crf: CrfKernel,
    cnn_opt: Sgd,
    mamba_opt: Sgd,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    nonfinite_streak: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let models = Models::new(num_classes, cfg.seed, cfg.mode != Ablation::PceOnly)?;
        Ok(Self {
            threshold: ThresholdState::new(num_classes, cfg.iter_max)?,
            checkpoint_dir: None,
            crf: CrfKernel::default(),
            cnn_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            mamba_opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 102)),
            order: Vec::new(),
            cursor: 0,
            nonfinite_streak: 0,
            models,
            cfg,
        })
    }

    /// Next batch of indices, reshuffling at each pass through the data.
    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Runs iteration `iter` on an augmented batch drawn from `data`.
    pub fn step(&mut self, iter: usize, data: &[Sample]) -> Result<StepOutcome> {
        let idx = self.next_batch(data.len());
        let batch: Vec<Sample> = idx.iter().map(|&i| augment(&data[i], &mut self.rng)).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let images = image_batch(&refs);
        let labels: Vec<u8> = batch.iter().flat_map(|s| s.scribble.iter().copied()).collect();
        let lr = poly_lr(iter, self.cfg.iter_max, self.cfg.lr0);
        let cfg = self.cfg.clone();

        let mut g = Graph::new();
        let cnn_bound = self.models.cnn_store.bind(&mut g);
        let x = g.constant(images.clone());
        let mut cnn_cx = Ctx::new(&mut g, &cnn_bound, Mode::Train);
        let logits_c = self.models.cnn.forward(&mut cnn_cx, x)?;
        let cnn_bn = std::mem::take(&mut cnn_cx.bn_updates);
        let zero = g.constant(Tensor::scalar(0.0));
        let pce_c = partial_ce(&mut g, logits_c, &labels);

        let (parts, lambda, mamba_bound, mamba_bn) = match &self.models.mamba {
            None => {
                let parts = Components {
                    pce_cnn: pce_c,
                    pce_mamba: zero,
                    crf_cnn: zero,
                    crf_mamba: zero,
                    evi: zero,
                    ic: zero,
                    c: zero,
                };
                (parts, self.threshold.lambda, None, Vec::new())
            }
            Some((mamba, mamba_store)) => {
                let mb = mamba_store.bind(&mut g);
                let mut mcx = Ctx::new(&mut g, &mb, Mode::Train);
                let logits_m = mamba.forward(&mut mcx, x)?;
                let mamba_bn = std::mem::take(&mut mcx.bn_updates);
                let pce_m = partial_ce(&mut g, logits_m, &labels);

                let aff = CrfAffinity::new(&images, &self.crf);
                let p_c = softmax(&mut g, logits_c);
                let p_m = softmax(&mut g, logits_m);
                let crf_c = gated_crf(&mut g, p_c, &aff);
                let crf_m = gated_crf(&mut g, p_m, &aff);

                let ev_c = evidential_graph(&mut g, logits_c, cfg.tau)?;
                let ev_m = evidential_graph(&mut g, logits_m, cfg.tau)?;
                let phi = anneal(iter, cfg.iter_max);
                let evi_c = pedl_loss(&mut g, ev_c.alpha, &labels, phi);
                let evi_m = pedl_loss(&mut g, ev_m.alpha, &labels, phi);
                let evi = g.add(evi_c, evi_m);

                let u_c = evidence_maps(g.value(logits_c), cfg.tau)?.uncertainty;
                let u_m = evidence_maps(g.value(logits_m), cfg.tau)?.uncertainty;
                let lambda = self.threshold.update(iter, &u_c, &u_m)?;

                let (ic, cps) = if cfg.mode == Ablation::Full {
                    let (consistent, inconsistent) = partition(&u_c, &u_m, lambda)?;
                    let mic = g.constant(channel_mask(&inconsistent, g.shape(logits_c)));
                    let ic_c = g.mul(ev_c.prob, mic);
                    let ic_m = g.mul(ev_m.prob, mic);
                    let (guide, _, _) = evidence_guidance(&mut g, ic_c, ic_m, cfg.epsilon)?;
                    let ic = g.add(guide.loss_a, guide.loss_b);
                    (ic, cross_pseudo_loss(&mut g, logits_c, logits_m, &consistent))
                } else {
                    let d = g.sub(ev_c.prob, ev_m.prob);
                    let d = g.square(d);
                    (g.mean_all(d), zero)
                };
                let parts = Components {
                    pce_cnn: pce_c,
                    pce_mamba: pce_m,
                    crf_cnn: crf_c,
                    crf_mamba: crf_m,
                    evi,
                    ic,
                    c: cps,
                };
                (parts, lambda, Some(mb), mamba_bn)
            }
        };

        let values = parts.map(|v| g.value(v).item());
        let gamma = if self.models.mamba.is_some() { cfg.gamma } else { 0.0 };
        let row = |total| LogRow {
            iter,
            total,
            parts: values,
            lambda,
            lr,
        };
        let total = match total_loss(&mut g, &parts, gamma) {
            Ok(t) => t,
            Err(Error::NonFinite(term)) => {
                self.nonfinite_streak += 1;
                log::warn!("iteration {iter}: non-finite {term} loss, step skipped");
                if self.nonfinite_streak >= MAX_NONFINITE_STREAK {
                    return Err(Error::Aborted(format!(
                        "{MAX_NONFINITE_STREAK} consecutive non-finite losses, last in {term} at iteration {iter}"
                    )));
                }
                return Ok(StepOutcome::Skipped(row(values.total(gamma))));
            }
            Err(e) => return Err(e),
        };
        self.nonfinite_streak = 0;
        let total_value = g.value(total).item();
        let mut grads = g.backward(total);
        let cnn_grads = cnn_bound.grads(&mut grads);
        self.cnn_opt.step(&mut self.models.cnn_store, &cnn_grads, lr);
        apply_bn_updates(&mut self.models.cnn_store, &cnn_bn, BN_MOMENTUM);
        if let (Some((_, store)), Some(mb)) = (&mut self.models.mamba, mamba_bound) {
            let mg = mb.grads(&mut grads);
            self.mamba_opt.step(store, &mg, lr);
            apply_bn_updates(store, &mamba_bn, BN_MOMENTUM);
        }
        Ok(StepOutcome::Applied(row(total_value)))
    }

    /// Trains for `iter_max` iterations, streaming log rows to `log` when given.
    pub fn run(&mut self, data: &[Sample], mut log: Option<&mut dyn std::io::Write>) -> Result<Vec<LogRow>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("metrics log", e))?;
        }
        let mut rows = Vec::with_capacity(self.cfg.iter_max);
        for iter in 0..self.cfg.iter_max {
            let row = match self.step(iter, data)? {
                StepOutcome::Applied(r) | StepOutcome::Skipped(r) => r,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io("metrics log", e))?;
            }
            if iter % 50 == 0 {
                log::info!(
                    "iter {iter}: loss {:.4} lambda {:.4} lr {:.5}",
                    row.total,
                    row.lambda,
                    row.lr
                );
            }
            let done = iter + 1;
            if let Some(dir) = &self.checkpoint_dir {
                if done % self.cfg.checkpoint_interval == 0 && done < self.cfg.iter_max {
                    self.models.save(dir)?;
                }
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Loads the dataset named in `cfg`, trains, and writes `metrics.csv`, the
/// checkpoints and a copy of the config under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<(Models, Vec<LogRow>)> {
    let manifest = load_dataset(&cfg.dataset)?;
    let data = manifest.samples()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = cfg.out_dir.join("metrics.csv");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut trainer = Trainer::new(cfg.clone(), manifest.num_classes)?;
    trainer.checkpoint_dir = Some(cfg.out_dir.clone());
    let rows = trainer.run(&data, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.models.save(&cfg.out_dir)?;
    Ok((trainer.models, rows))
}

/// CNN-only prediction: per-pixel argmax for a batch `[N, 1, H, W]`.
pub fn infer(cnn: &UNet, store: &ParamStore, images: &Tensor) -> Result<Vec<u8>> {
    let logits = cnn.predict(store, images)?;
    Ok(argmax_channels(logits.tensor()).into_iter().map(|k| k as u8).collect())
}

/// Per-image scores and uncertainty of the CNN on a set of samples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub mean: MetricReport,
    /// Mean uncertainty `u` of each image.
    pub uncertainty: Vec<f64>,
    /// Uncertainty maps `[H * W]` per image.
    pub maps: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn mean_dice(&self) -> f64 {
        self.mean.mean.dice
    }

    pub fn mean_uncertainty(&self) -> f64 {
        self.uncertainty.iter().sum::<f64>() / self.uncertainty.len() as f64
    }
}

/// Scores the CNN branch against the dense masks of `samples`.
pub fn evaluate_cnn(cnn: &UNet, store: &ParamStore, samples: &[Sample], tau: f64) -> Result<Evaluation> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("nothing to evaluate".into()))?;
    let (h, w, c) = (first.h, first.w, first.num_classes);
    let mut reports = Vec::with_capacity(samples.len());
    let mut uncertainty = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = cnn.predict(store, &image_batch(&refs))?;
        let pred = argmax_channels(logits.tensor());
        let u = evidence_maps(logits.tensor(), tau)?.uncertainty;
        for (i, s) in chunk.iter().enumerate() {
            let labels: Vec<u8> = pred[i * h * w..(i + 1) * h * w].iter().map(|&k| k as u8).collect();
            reports.push(evaluate(&labels, &s.mask, h, w, c)?);
            let map = u.data()[i * h * w..(i + 1) * h * w].to_vec();
            uncertainty.push(map.iter().sum::<f64>() / map.len() as f64);
            maps.push(map);
        }
    }
    let mean = MetricReport::average(&reports);
    Ok(Evaluation {
        reports,
        mean,
        uncertainty,
        maps,
    })
}

/// Adds `N(0, sigma^2)` noise to every pixel and clamps to `[0, 1]`.
pub fn add_noise(samples: &[Sample], sigma: f64, seed: u64) -> Vec<Sample> {
    if sigma == 0.0 {
        return samples.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut out = s.clone();
            for v in out.image.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub sigma: f64,
    pub eval: Evaluation,
}

/// Evaluates the CNN under additive Gaussian noise at each `sigma`. With
/// `export`, writes the uncertainty maps to `export/sigma_<sigma>/<id>.png`.
pub fn robustness_sweep(
    cnn: &UNet,
    store: &ParamStore,
    samples: &[Sample],
    sigmas: &[f64],
    tau: f64,
    seed: u64,
    export: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma >= 0.0) {
                return Err(Error::Config(format!("noise level must be >= 0, got {sigma}")));
            }
            let noisy = add_noise(samples, sigma, seed);
            let eval = evaluate_cnn(cnn, store, &noisy, tau)?;
            if let Some(dir) = export {
                let sub = dir.join(format!("sigma_{sigma:.2}"));
                export_maps(&noisy, &eval.maps, &sub)?;
            }
            Ok(SweepPoint { sigma, eval })
        })
        .collect()
}

fn export_maps(samples: &[Sample], maps: &[Vec<f64>], dir: &Path) -> Result<()> {
    for (s, m) in samples.iter().zip(maps) {
        save_uncertainty_png(m, s.h, s.w, &dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Writes the CNN's uncertainty map for every sample as `<dir>/<id>.png`.
pub fn export_uncertainty(cnn: &UNet, store: &ParamStore, samples: &[Sample], tau: f64, dir: &Path) -> Result<()> {
    let eval = evaluate_cnn(cnn, store, samples, tau)?;
    export_maps(samples, &eval.maps, dir)
}

/// Sweep summary as `sigma,dice,jaccard,hd95,asd,uncertainty` lines.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("sigma,dice,jaccard,hd95,asd,uncertainty\n");
    for p in points {
        let m = &p.eval.mean.mean;
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.sigma,
            m.dice,
            m.jaccard,
            m.hd95,
            m.asd,
            p.eval.mean_uncertainty()
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenSpec};

    fn sample_with_pixel(h: usize, w: usize, y: usize, x: usize) -> Sample {
        let mut mask = vec![0u8; h * w];
        mask[y * w + x] = 1;
        let mut image = vec![0.0; h * w];
        image[y * w + x] = 1.0;
        let mut scribble = vec![2u8; h * w];
        scribble[y * w + x] = 1;
        Sample {
            h,
            w,
            num_classes: 2,
            image,
            mask,
            scribble,
            id: "t".into(),
        }
    }

    #[test]
    fn poly_lr_values() {
        assert_eq!(poly_lr(0, 100, 0.01), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01), 0.0);
        assert!((poly_lr(50, 100, 0.01) - 0.005359).abs() < 1e-6);
        assert_eq!(poly_lr(50, 100, 0.01), 0.5f64.powf(0.9) * 0.01);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig {
            seed: 9,
            iter_max: 30,
            mode: Ablation::MseConsistency,
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let parsed = TrainConfig::parse("# comment\nbatch_size = 2\n\nlr0=0.5 # trailing\n").unwrap();
        assert_eq!((parsed.batch_size, parsed.lr0, parsed.tau), (2, 0.5, 0.25));
        for bad in [
            "colour = red",
            "tau = -1",
            "batch_size = two",
            "iter_max = 0",
            "mode = both",
            "tau",
        ] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn augment_identity_and_involutions() {
        let s = generate_dataset(1, &GenSpec::new(32, 32, 2), 3).unwrap().remove(0);
        assert_eq!(apply_augment(&s, &AugmentParams::identity()), s);
        let flip = AugmentParams {
            hflip: true,
            ..AugmentParams::identity()
        };
        assert_eq!(apply_augment(&apply_augment(&s, &flip), &flip), s);
        let turn = AugmentParams {
            quarter_turns: 1,
            ..AugmentParams::identity()
        };
        let mut t = s.clone();
        for _ in 0..4 {
            t = apply_augment(&t, &turn);
        }
        assert_eq!(t, s);
    }

    #[test]
    fn quarter_turn_moves_pixel_to_rotated_coordinate() {
        let (n, y, x) = (64, 2, 3);
        let s = sample_with_pixel(n, n, y, x);
        let turn = AugmentParams {
            quarter_turns: 1,
            ..AugmentParams::identity()
        };
        let t = apply_augment(&s, &turn);
        let (ny, nx) = (n - 1 - x, y);
        let hot: Vec<usize> = (0..n * n).filter(|&p| t.mask[p] == 1).collect();
        assert_eq!(hot, vec![ny * n + nx]);
        assert_eq!(t.image[ny * n + nx], 1.0);
        assert_eq!(t.scribble[ny * n + nx], 1);
    }

    #[test]
    fn rotation_keeps_labels_discrete_and_fills() {
        let s = generate_dataset(1, &GenSpec::new(32, 32, 3), 5).unwrap().remove(0);
        let p = AugmentParams {
            angle_deg: 12.0,
            equalize: true,
            brightness: 0.05,
            contrast: 1.1,
            ..AugmentParams::identity()
        };
        let t = apply_augment(&s, &p);
        assert!(t.mask.iter().all(|v| s.mask.contains(v)));
        assert!(t.scribble.iter().all(|&v| v <= 3));
        // corners come from outside the source grid
        assert_eq!((t.mask[0], t.scribble[0]), (0, 3));
        assert!(t.image.iter().all(|v| (0.0..=1.0).contains(v)));
        t.validate().unwrap();
    }

    #[test]
    fn equalization_spreads_levels() {
        let img: Vec<f64> = (0..100).map(|i| 0.4 + 0.001 * (i % 10) as f64).collect();
        let e = equalize(&img);
        let max = e.iter().cloned().fold(0.0, f64::max);
        let min = e.iter().cloned().fold(1.0, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn noise_matches_folded_normal_mean() {
        let mut s = generate_dataset(1, &GenSpec::new(128, 128, 2), 1).unwrap().remove(0);
        s.image = vec![0.5; 128 * 128];
        let sigma = 0.05;
        let noisy = add_noise(std::slice::from_ref(&s), sigma, 3).remove(0);
        let mad = noisy.image.iter().map(|v| (v - 0.5).abs()).sum::<f64>() / s.image.len() as f64;
        let want = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mad - want).abs() < 0.05 * want, "{mad} vs {want}");
        assert_eq!(add_noise(std::slice::from_ref(&s), 0.0, 3)[0], s);
    }

    fn tiny_cfg(mode: Ablation, iters: usize) -> TrainConfig {
        TrainConfig {
            iter_max: iters,
            batch_size: 2,
            seed: 4,
            mode,
            ..Default::default()
        }
    }

    #[test]
    fn short_training_runs_log_and_stay_in_range() {
        let data = generate_dataset(8, &GenSpec::new(32, 32, 2), 8).unwrap();
        for mode in [Ablation::Full, Ablation::MseConsistency, Ablation::PceOnly] {
            let mut t = Trainer::new(tiny_cfg(mode, 10), 2).unwrap();
            let mut buf = Vec::new();
            let rows = t.run(&data, Some(&mut buf)).unwrap();
            assert_eq!(rows.len(), 10);
            assert_eq!(rows[0].lambda, 0.5);
            assert!(rows
                .iter()
                .all(|r| (0.0..=1.0).contains(&r.lambda) && r.total.is_finite()));
            let text = String::from_utf8(buf).unwrap();
            assert_eq!(text.lines().next(), Some(LOG_HEADER));
            assert_eq!(text.lines().count(), 11);
            assert_eq!(t.models.mamba.is_some(), mode != Ablation::PceOnly);
        }
    }

    #[test]
    fn inference_never_binds_the_state_space_branch() {
        let data = generate_dataset(4, &GenSpec::new(32, 32, 2), 2).unwrap();
        let mut t = Trainer::new(tiny_cfg(Ablation::Full, 2), 2).unwrap();
        t.run(&data, None).unwrap();
        let store = &t.models.mamba.as_ref().unwrap().1;
        let before = store.bind_count();
        let refs: Vec<&Sample> = data.iter().collect();
        let a = infer(&t.models.cnn, &t.models.cnn_store, &image_batch(&refs)).unwrap();
        let b = infer(&t.models.cnn, &t.models.cnn_store, &image_batch(&refs)).unwrap();
        evaluate_cnn(&t.models.cnn, &t.models.cnn_store, &data, 0.25).unwrap();
        assert_eq!(store.bind_count(), before);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v < 2));
    }

    #[test]
    fn sweep_at_zero_sigma_is_the_clean_evaluation() {
        let data = generate_dataset(3, &GenSpec::new(32, 32, 2), 6).unwrap();
        let m = Models::new(2, 1, false).unwrap();
        let clean = evaluate_cnn(&m.cnn, &m.cnn_store, &data, 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sweep = robustness_sweep(&m.cnn, &m.cnn_store, &data, &[0.0, 0.1], 0.25, 1, Some(dir.path())).unwrap();
        assert_eq!(sweep[0].eval.reports, clean.reports);
        assert_eq!(sweep[0].eval.uncertainty, clean.uncertainty);
        assert!(dir
            .path()
            .join("sigma_0.10")
            .join(format!("{}.png", data[2].id))
            .exists());
        assert_eq!(sweep_csv(&sweep).lines().count(), 3);
    }
}

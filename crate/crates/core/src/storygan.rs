//! Generator, discriminator, hinge losses and the alternating training loop.
//!
//! The generator maps each sentence independently: `(s, noise)` is projected
//! to a 4×4 seed map and upsampled to the target size, with dynamic blocks
//! after the 8×8 and 16×16 stages. The discriminator downsamples with strided
//! convs, fuses words through dynamic blocks at 16×16 and 8×8, and joins the
//! replicated sentence vector at 4×4 before scoring.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::FeatureMap;
use crate::checkpoint::Checkpoint;
use crate::dynamic_block::{dynamic_block_forward, BlockConfig, BlockKind, DynamicBlock, DynamicBlockOutput, Mode};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::image::{grid, images_to_tensor, tensor_to_images, Image};
use crate::init::orthogonal;
use crate::optim::{adam_step, AdamState, ParamSet};
use crate::rng::SeededRng;
use crate::tensor::{
    add, add_scalar, concat, conv2d, div, leaky_relu, matmul, mean_all, mean_axis, mul, narrow, neg, no_grad,
    pixel_norm, relu, reshape, scale, sqrt, tanh, upsample2x, Tensor,
};
use crate::text_encoder::TextEncoding;

pub const SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const COND_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    SaOnly,
    WsaOnly,
    NoBlock,
    NoDbInG,
    NoDbInD,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::SaOnly,
        Ablation::WsaOnly,
        Ablation::NoBlock,
        Ablation::NoDbInG,
        Ablation::NoDbInD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SaOnly => "sa_only",
            Ablation::WsaOnly => "wsa_only",
            Ablation::NoBlock => "no_block",
            Ablation::NoDbInG => "no_db_in_g",
            Ablation::NoDbInD => "no_db_in_d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }

    /// Block kinds placed in `(generator, discriminator)`.
    pub fn block_kinds(self) -> (Option<BlockKind>, Option<BlockKind>) {
        match self {
            Ablation::Full => (Some(BlockKind::Full), Some(BlockKind::Full)),
            Ablation::SaOnly => (Some(BlockKind::SaOnly), Some(BlockKind::SaOnly)),
            Ablation::WsaOnly => (Some(BlockKind::WsaOnly), Some(BlockKind::WsaOnly)),
            Ablation::NoBlock => (None, None),
            Ablation::NoDbInG => (None, Some(BlockKind::Full)),
            Ablation::NoDbInD => (Some(BlockKind::Full), None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub noise_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub share_projections: bool,
    pub shared_noise: bool,
    /// Sample grids every this many steps (0 disables).
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            noise_dim: 64,
            steps: 2000,
            batch: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            tau: 1.0,
            ablation: Ablation::Full,
            seed: 0,
            share_projections: true,
            shared_noise: false,
            sample_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ![16, 32, 64].contains(&self.image_size) {
            return bad(format!("image_size must be 16, 32 or 64, got {}", self.image_size));
        }
        if self.base_channels < 4 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and at least 4, got {}", self.base_channels));
        }
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.noise_dim == 0 {
            return bad("noise_dim must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("lr must be positive and betas in [0, 1)".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    /// Channel width at each generator resolution, 4×4 first.
    pub fn generator_channels(&self) -> Vec<usize> {
        let b = self.base_channels;
        let levels = (self.image_size / 4).trailing_zeros() as usize + 1;
        (0..levels)
            .map(|k| match k {
                0 => 2 * b,
                1 | 2 => b,
                _ => b / 2,
            })
            .collect()
    }

    /// Channel width after each discriminator downsampling, largest map first.
    pub fn discriminator_channels(&self) -> Vec<usize> {
        let b = self.base_channels;
        let levels = (self.image_size / 4).trailing_zeros() as usize;
        (0..levels).map(|k| ((b / 2) << k).min(2 * b)).collect()
    }
}

/// Resolutions that carry a dynamic block.
pub const BLOCK_RESOLUTIONS: [usize; 2] = [8, 16];

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    /// Optional per-channel bias.
    pub bias: Option<Tensor>,
}

impl ConvLayer {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        bias: bool,
        params: &mut ParamSet,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            weight: params.add(
                format!("{name}.weight"),
                orthogonal(cout, cin * 9, gain, rng),
                &[cout, cin, 3, 3],
            ),
            bias: bias.then(|| params.add(format!("{name}.bias"), vec![0.0; cout], &[cout])),
        }
    }

    fn apply(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), stride, 1)
    }
}

fn block_config(cfg: &TrainConfig, kind: BlockKind, channels: usize, text_dim: usize) -> BlockConfig {
    BlockConfig {
        kind,
        share_projections: cfg.share_projections,
        shared_noise: cfg.shared_noise,
        ..BlockConfig::new(channels, text_dim)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub channels: Vec<usize>,
    pub text_dim: usize,
    pub noise_dim: usize,
    pub seed_proj: Tensor,
    pub seed_bias: Tensor,
    /// One conv per upsampling stage (8×8 onwards).
    pub ups: Vec<ConvLayer>,
    /// Aligned with `ups`.
    pub blocks: Vec<Option<DynamicBlock>>,
    pub out: ConvLayer,
}

impl GeneratorParams {
    pub fn new(cfg: &TrainConfig, text_dim: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Self {
        let ch = cfg.generator_channels();
        let gain = 2f64.sqrt();
        let seed_in = text_dim + cfg.noise_dim;
        let seed_proj = params.add("g.seed_proj", orthogonal(seed_in, ch[0] * 16, 1.0, rng), &[seed_in, ch[0] * 16]);
        let seed_bias = params.add("g.seed_bias", vec![0.0; ch[0] * 16], &[1, ch[0] * 16]);
        let kind = cfg.ablation.block_kinds().0;
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for k in 1..ch.len() {
            ups.push(ConvLayer::new(&format!("g.up{k}"), ch[k - 1], ch[k], gain, true, params, rng));
            let res = 4 << k;
            blocks.push(match kind {
                Some(kind) if BLOCK_RESOLUTIONS.contains(&res) => Some(DynamicBlock::new(
                    &format!("g.db{res}"),
                    block_config(cfg, kind, ch[k], text_dim),
                    params,
                    rng,
                )),
                _ => None,
            });
        }
        let out = ConvLayer::new("g.out", ch[ch.len() - 1], 3, 1.0, true, params, rng);
        Self {
            channels: ch,
            text_dim,
            noise_dim: cfg.noise_dim,
            seed_proj,
            seed_bias,
            ups,
            blocks,
            out,
        }
    }

    pub fn image_size(&self) -> usize {
        4 << self.ups.len()
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub channels: Vec<usize>,
    pub text_dim: usize,
    pub downs: Vec<ConvLayer>,
    pub blocks: Vec<Option<DynamicBlock>>,
    /// Conv over image features joined with the replicated sentence vector.
    pub joint: ConvLayer,
    pub head: Tensor,
}

impl DiscriminatorParams {
    pub fn new(cfg: &TrainConfig, text_dim: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Self {
        let ch = cfg.discriminator_channels();
        let gain = 2f64.sqrt();
        let kind = cfg.ablation.block_kinds().1;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (k, &c) in ch.iter().enumerate() {
            downs.push(ConvLayer::new(&format!("d.down{k}"), cin, c, gain, true, params, rng));
            let res = cfg.image_size >> (k + 1);
            blocks.push(match kind {
                Some(kind) if BLOCK_RESOLUTIONS.contains(&res) => Some(DynamicBlock::new(
                    &format!("d.db{res}"),
                    block_config(cfg, kind, c, text_dim),
                    params,
                    rng,
                )),
                _ => None,
            });
            cin = c;
        }
        let jc = 2 * cfg.base_channels;
        let joint = ConvLayer::new("d.joint", cin + text_dim, jc, gain, true, params, rng);
        let head = params.add("d.head", orthogonal(jc * 16, 1, 1.0, rng), &[jc * 16, 1]);
        Self {
            channels: ch,
            text_dim,
            downs,
            blocks,
            joint,
            head,
        }
    }
}

/// Generator result for a batch of sentences.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `[N, 3, S, S]` in `[-1, 1]`.
    pub images: Tensor,
    pub blocks: Vec<DynamicBlockOutput>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// `[N]`.
    pub scores: Tensor,
    pub blocks: Vec<DynamicBlockOutput>,
}

fn check_text(enc: &TextEncoding, dim: usize) -> Result<()> {
    if enc.dim() != dim || enc.words.shape()[2] != dim {
        return dim_err(format!("encoding dimension {} but the model expects {dim}", enc.dim()));
    }
    Ok(())
}

/// Rescales every row along the last axis to unit RMS (all-zero rows stay zero).
pub fn rms_rows(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let last = shape.len() - 1;
    let mut keep = shape.clone();
    keep[last] = 1;
    let ms = reshape(&mean_axis(&mul(x, x)?, last)?, &keep)?;
    div(x, &sqrt(&add_scalar(&ms, COND_EPS)))
}

/// Sentence vector and word rows rescaled to unit RMS.
fn conditioning(enc: &TextEncoding) -> Result<(Tensor, Tensor)> {
    Ok((rms_rows(&enc.s)?, rms_rows(&enc.words)?))
}

/// One image per sentence; sentences never interact.
pub fn generate(
    g: &GeneratorParams,
    enc: &TextEncoding,
    noise: &Tensor,
    mode: Mode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<GeneratorOutput> {
    check_text(enc, g.text_dim)?;
    let n = enc.batch();
    if n == 0 {
        return contract_err("no sentences to generate from");
    }
    if noise.shape() != [n, g.noise_dim] {
        return dim_err(format!("noise {:?}, expected [{n}, {}]", noise.shape(), g.noise_dim));
    }
    let (s, words) = conditioning(enc)?;
    let seed_in = concat(&[s, noise.clone()], 1)?;
    let seed = add(&matmul(&seed_in, &g.seed_proj)?, &g.seed_bias)?;
    let mut x = reshape(&seed, &[n, g.channels[0], 4, 4])?;
    x = leaky_relu(&pixel_norm(&x, NORM_EPS)?, SLOPE);
    let mut outs = Vec::new();
    for (conv, block) in g.ups.iter().zip(&g.blocks) {
        x = conv.apply(&upsample2x(&x)?, 1)?;
        x = leaky_relu(&pixel_norm(&x, NORM_EPS)?, SLOPE);
        if let Some(b) = block {
            let o = dynamic_block_forward(b, &FeatureMap::new(x)?, &words, &enc.mask, mode, tau, rng)?;
            x = o.output.tensor().clone();
            outs.push(o);
        }
    }
    Ok(GeneratorOutput {
        images: tanh(&g.out.apply(&x, 1)?),
        blocks: outs,
    })
}

/// The images of [`generate`] for the `n` sentences of one story.
pub fn generate_story(
    g: &GeneratorParams,
    enc: &TextEncoding,
    noise: &Tensor,
    mode: Mode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Image>> {
    tensor_to_images(&generate(g, enc, noise, mode, tau, rng)?.images)
}

pub fn discriminate(
    d: &DiscriminatorParams,
    images: &Tensor,
    enc: &TextEncoding,
    mode: Mode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<DiscriminatorOutput> {
    check_text(enc, d.text_dim)?;
    let n = enc.batch();
    let expected = 4 << d.downs.len();
    if images.shape() != [n, 3, expected, expected] {
        return dim_err(format!("images {:?}, expected [{n}, 3, {expected}, {expected}]", images.shape()));
    }
    let (s, words) = conditioning(enc)?;
    let mut x = images.clone();
    let mut outs = Vec::new();
    for (conv, block) in d.downs.iter().zip(&d.blocks) {
        x = leaky_relu(&conv.apply(&x, 2)?, SLOPE);
        if let Some(b) = block {
            let o = dynamic_block_forward(b, &FeatureMap::new(x)?, &words, &enc.mask, mode, tau, rng)?;
            x = o.output.tensor().clone();
            outs.push(o);
        }
    }
    let sent = mul(&reshape(&s, &[n, d.text_dim, 1, 1])?, &Tensor::ones(&[1, 1, 4, 4]))?;
    let joined = leaky_relu(&d.joint.apply(&concat(&[x, sent], 1)?, 1)?, SLOPE);
    let flat = reshape(&joined, &[n, joined.numel() / n])?;
    let scores = reshape(&matmul(&flat, &d.head)?, &[n])?;
    Ok(DiscriminatorOutput { scores, blocks: outs })
}

/// `mean relu(1 − real) + ½ mean relu(1 + fake) + ½ mean relu(1 + mismatched)`.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor, mismatched: &Tensor) -> Result<Tensor> {
    if real.numel() == 0 || fake.numel() == 0 || mismatched.numel() == 0 {
        return contract_err("empty score batch");
    }
    let r = mean_all(&relu(&add_scalar(&neg(real), 1.0)));
    let f = mean_all(&relu(&add_scalar(fake, 1.0)));
    let m = mean_all(&relu(&add_scalar(mismatched, 1.0)));
    add(&r, &scale(&add(&f, &m)?, 0.5))
}

pub fn generator_loss(fake_scores: &Tensor) -> Tensor {
    neg(&mean_all(fake_scores))
}

/// Generator and discriminator with their parameter sets.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub g_params: ParamSet,
    pub d_params: ParamSet,
}

impl GanModel {
    pub fn new(cfg: &TrainConfig, text_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed).stream(1);
        let mut g_params = ParamSet::new();
        let mut d_params = ParamSet::new();
        let generator = GeneratorParams::new(cfg, text_dim, &mut g_params, &mut rng);
        let discriminator = DiscriminatorParams::new(cfg, text_dim, &mut d_params, &mut rng);
        Ok(Self {
            generator,
            discriminator,
            g_params,
            d_params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.g_params.count() + self.d_params.count()
    }
}

/// Precomputed training material: one constant encoding row per image.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub encodings: TextEncoding,
    pub images: Vec<Image>,
    /// Frames per story; pairs are stored story by story.
    pub frames: usize,
}

impl TrainData {
    pub fn new(encodings: TextEncoding, images: Vec<Image>, frames: usize) -> Result<Self> {
        if encodings.batch() != images.len() || images.is_empty() {
            return dim_err(format!("{} encodings for {} images", encodings.batch(), images.len()));
        }
        if frames == 0 || images.len() % frames != 0 {
            return dim_err(format!("{} images do not split into stories of {frames}", images.len()));
        }
        Ok(Self {
            encodings: encodings.detach(),
            images,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mean_w_g: Option<f64>,
    pub mean_psa_g: Option<f64>,
    pub mean_w_d: Option<f64>,
    pub mean_psa_d: Option<f64>,
    pub wallclock_s: f64,
}

pub const LOG_HEADER: &str = "step,d_loss,g_loss,mean_w_g,mean_psa_g,mean_w_d,mean_psa_d,wallclock_s";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.d_loss,
            self.g_loss,
            opt(self.mean_w_g),
            opt(self.mean_psa_g),
            opt(self.mean_w_d),
            opt(self.mean_psa_d),
            self.wallclock_s
        )
    }
}

fn mean_of(outs: &[DynamicBlockOutput], f: impl Fn(&DynamicBlockOutput) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = outs.iter().filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn tensor_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Training state: model, optimizers, RNG position and step.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GanModel,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: SeededRng,
    pub step: u64,
    started: Instant,
    elapsed_before: f64,
}

fn training_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed).stream(2)
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, params: &ParamSet, state: &AdamState) {
    for (i, (name, t)) in params.iter().enumerate() {
        ck.push(format!("{prefix}.m.{name}"), t.shape(), state.m[i].clone());
        ck.push(format!("{prefix}.v.{name}"), t.shape(), state.v[i].clone());
    }
    ck.push(format!("{prefix}.step"), &[1], vec![state.step as f64]);
}

fn restore_adam(ck: &Checkpoint, prefix: &str, params: &ParamSet, state: &mut AdamState) -> Result<()> {
    let fetch = |key: String, n: usize| -> Result<Vec<f64>> {
        let t = ck.get(&key).ok_or_else(|| Error::Contract(format!("checkpoint lacks {key}")))?;
        if t.data.len() != n {
            return dim_err(format!("{key} has {} values, expected {n}", t.data.len()));
        }
        Ok(t.data.clone())
    };
    for (i, (name, t)) in params.iter().enumerate() {
        state.m[i] = fetch(format!("{prefix}.m.{name}"), t.numel())?;
        state.v[i] = fetch(format!("{prefix}.v.{name}"), t.numel())?;
    }
    state.step = fetch(format!("{prefix}.step"), 1)?[0] as u64;
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig, text_dim: usize) -> Result<Self> {
        let model = GanModel::new(&config, text_dim)?;
        let adam_g = AdamState::new(&model.g_params, config.lr, config.beta1, config.beta2);
        let adam_d = AdamState::new(&model.d_params, config.lr, config.beta1, config.beta2);
        Ok(Self {
            rng: training_rng(config.seed),
            config,
            model,
            adam_g,
            adam_d,
            step: 0,
            started: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    /// Rebuilds the trainer stored in `ck` (model, optimizer moments, RNG, step).
    pub fn from_checkpoint(config: TrainConfig, text_dim: usize, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, text_dim)?;
        ck.restore_params(&t.model.g_params)?;
        ck.restore_params(&t.model.d_params)?;
        restore_adam(ck, "adam_g", &t.model.g_params, &mut t.adam_g)?;
        restore_adam(ck, "adam_d", &t.model.d_params, &mut t.adam_d)?;
        t.rng = SeededRng::with_counter(t.rng.seed(), ck.rng_counter);
        t.step = ck.step;
        Ok(t)
    }

    /// Model, optimizer and RNG state plus `extra` parameters (the text encoder).
    pub fn checkpoint(&self, snapshot: &str, extra: &ParamSet) -> Checkpoint {
        let mut ck = Checkpoint::new(snapshot, self.rng.counter(), self.step);
        ck.push_params(&self.model.g_params);
        ck.push_params(&self.model.d_params);
        ck.push_params(extra);
        push_adam(&mut ck, "adam_g", &self.model.g_params, &self.adam_g);
        push_adam(&mut ck, "adam_d", &self.model.d_params, &self.adam_d);
        ck
    }

    fn elapsed(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// One discriminator update followed by one generator update (soft mode).
    pub fn train_step(&mut self, data: &TrainData) -> Result<StepLog> {
        let cfg = &self.config;
        let b = cfg.batch;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.below(data.len() as u64) as usize).collect();
        let mis: Vec<usize> = (0..b).map(|i| idx[(i + 1) % b]).collect();
        let enc = data.encodings.select(&idx)?;
        let enc_mis = data.encodings.select(&mis)?;
        let real = images_to_tensor(&idx.iter().map(|&i| &data.images[i]).collect::<Vec<_>>())?;
        let noise = Tensor::from_vec(self.rng.normal_vec(b * cfg.noise_dim), &[b, cfg.noise_dim]);
        let (g, d) = (&self.model.generator, &self.model.discriminator);

        let fake = generate(g, &enc, &noise, Mode::Soft, cfg.tau, &mut self.rng)?;
        let d_images = concat(&[real.clone(), fake.images.detach(), real], 0)?;
        let d_enc = TextEncoding::stack(&[enc.clone(), enc.clone(), enc_mis])?;
        let d_out = discriminate(d, &d_images, &d_enc, Mode::Soft, cfg.tau, &mut self.rng)?;
        let part = |k: usize| narrow(&d_out.scores, 0, k * b, b);
        let d_loss = discriminator_loss(&part(0)?, &part(1)?, &part(2)?)?;
        let d_val = d_loss.item();
        if !d_val.is_finite() {
            return Err(self.numerical_abort("d_loss", d_val, &[("fake_images", &fake.images), ("d_scores", &d_out.scores)]));
        }
        self.model.d_params.zero_grad();
        d_loss.backward()?;
        adam_step(&self.model.d_params, &mut self.adam_d)?;

        let g_out = discriminate(d, &fake.images, &enc, Mode::Soft, cfg.tau, &mut self.rng)?;
        let g_loss = generator_loss(&g_out.scores);
        let g_val = g_loss.item();
        if !g_val.is_finite() {
            return Err(self.numerical_abort("g_loss", g_val, &[("fake_images", &fake.images), ("g_scores", &g_out.scores)]));
        }
        self.model.g_params.zero_grad();
        g_loss.backward()?;
        adam_step(&self.model.g_params, &mut self.adam_g)?;
        self.model.d_params.zero_grad();

        self.step += 1;
        Ok(StepLog {
            step: self.step,
            d_loss: d_val,
            g_loss: g_val,
            mean_w_g: mean_of(&fake.blocks, DynamicBlockOutput::mean_w),
            mean_psa_g: mean_of(&fake.blocks, DynamicBlockOutput::mean_p_sa),
            mean_w_d: mean_of(&d_out.blocks, DynamicBlockOutput::mean_w),
            mean_psa_d: mean_of(&d_out.blocks, DynamicBlockOutput::mean_p_sa),
            wallclock_s: self.elapsed(),
        })
    }

    /// Parameter norms of both networks as a JSON object.
    pub fn parameter_norms(&self) -> serde_json::Value {
        let norms = |ps: &ParamSet| -> serde_json::Value {
            ps.iter().map(|(n, t)| (n.to_string(), tensor_norm(t).to_string().into())).collect::<serde_json::Map<_, _>>().into()
        };
        serde_json::json!({
            "generator_param_norms": norms(&self.model.g_params),
            "discriminator_param_norms": norms(&self.model.d_params),
        })
    }

    fn numerical_abort(&self, what: &str, value: f64, acts: &[(&str, &Tensor)]) -> Error {
        let activations: serde_json::Map<_, _> =
            acts.iter().map(|(n, t)| (n.to_string(), tensor_norm(t).to_string().into())).collect();
        let report = serde_json::json!({
            "step": self.step + 1,
            "loss": what,
            "value": value.to_string(),
            "activation_norms": activations,
        });
        Error::Numerical(format!("{what} became {value} at step {}; diagnostics: {report}", self.step + 1))
    }
}

/// Fixed sentences and noise used for the periodic sample grids.
pub fn sample_grid(model: &GanModel, data: &TrainData, config: &TrainConfig, stories: usize) -> Result<Image> {
    let n = (stories * data.frames).min(data.len());
    let rows: Vec<usize> = (0..n).collect();
    let enc = data.encodings.select(&rows)?;
    let mut noise_rng = SeededRng::new(config.seed).stream(3);
    let noise = Tensor::from_vec(noise_rng.normal_vec(n * config.noise_dim), &[n, config.noise_dim]);
    let mut gumbel = SeededRng::new(config.seed).stream(4);
    let images = no_grad(|| generate_story(&model.generator, &enc, &noise, Mode::Hard, config.tau, &mut gumbel))?;
    grid(&images, data.frames)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub checkpoint: Checkpoint,
    pub log_path: Option<PathBuf>,
}

/// Runs `trainer` up to `config.steps`, logging to `out_dir/train_log.csv`
/// and writing sample grids and `out_dir/checkpoint.dyns` when a directory is
/// given. A NaN loss also dumps diagnostics to `out_dir/nan_dump.txt`.
pub fn train(
    trainer: &mut Trainer,
    data: &TrainData,
    snapshot: &str,
    extra: &ParamSet,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let log_path = out_dir.map(|d| d.join("train_log.csv"));
    let mut log_file = match (&log_path, out_dir) {
        (Some(p), Some(d)) => {
            fs::create_dir_all(d)?;
            let fresh = trainer.step == 0 || !p.exists();
            let mut f = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
            if fresh {
                writeln!(f, "{LOG_HEADER}")?;
            }
            Some(f)
        }
        _ => None,
    };
    trainer.started = Instant::now();
    let mut logs = Vec::new();
    while trainer.step < trainer.config.steps as u64 {
        let row = match trainer.train_step(data) {
            Ok(r) => r,
            Err(Error::Numerical(msg)) => {
                if let Some(d) = out_dir {
                    let dump = d.join("nan_dump.txt");
                    fs::write(&dump, format!("{msg}\nparameters: {}\n", trainer.parameter_norms()))?;
                    return Err(Error::Numerical(format!("non-finite value during training; diagnostics in {}", dump.display())));
                }
                return Err(Error::Numerical(msg));
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.csv_row())?;
        }
        if let (Some(d), every) = (out_dir, trainer.config.sample_every) {
            if every > 0 && (row.step % every as u64 == 0 || row.step == trainer.config.steps as u64) {
                sample_grid(&trainer.model, data, &trainer.config, 4)?.write_ppm(&d.join(format!("samples_step{}.ppm", row.step)))?;
            }
        }
        on_step(&row);
        logs.push(row);
    }
    trainer.elapsed_before = trainer.elapsed();
    let checkpoint = trainer.checkpoint(snapshot, extra);
    if let Some(d) = out_dir {
        checkpoint.save(&d.join("checkpoint.dyns"))?;
    }
    Ok(TrainOutcome {
        logs,
        checkpoint,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, GradOptions};

    fn tiny_config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            image_size: 16,
            base_channels: 4,
            noise_dim: 3,
            batch: 2,
            ablation,
            ..TrainConfig::default()
        }
    }

    fn encoding(n: usize, l: usize, d: usize, rng: &mut SeededRng) -> TextEncoding {
        let mask: Vec<bool> = (0..n * l).map(|i| i % l < l - 1 || i / l == 0).collect();
        TextEncoding {
            s: Tensor::from_vec(rng.normal_vec(n * d), &[n, d]),
            words: Tensor::from_vec(rng.normal_vec(n * l * d), &[n, l, d]),
            mask,
        }
    }

    #[test]
    fn channel_plans() {
        let c = TrainConfig::default();
        assert_eq!(c.generator_channels(), vec![64, 32, 32, 16]);
        assert_eq!(c.discriminator_channels(), vec![16, 32, 64]);
        let m = GanModel::new(&c, 64).unwrap();
        assert_eq!(m.generator.blocks.iter().filter(|b| b.is_some()).count(), 2);
        assert_eq!(m.discriminator.blocks.iter().filter(|b| b.is_some()).count(), 2);
        assert!(m.generator.blocks[0].is_some() && m.generator.blocks[1].is_some() && m.generator.blocks[2].is_none());
        assert!(m.discriminator.blocks[0].is_some() && m.discriminator.blocks[1].is_some());
    }

    #[test]
    fn five_images_in_range() {
        let cfg = TrainConfig {
            noise_dim: 8,
            ..TrainConfig::default()
        };
        let m = GanModel::new(&cfg, 6).unwrap();
        let mut rng = SeededRng::new(1);
        let enc = encoding(5, 4, 6, &mut rng);
        let noise = Tensor::from_vec(rng.normal_vec(40), &[5, 8]);
        let imgs = generate_story(&m.generator, &enc, &noise, Mode::Soft, 1.0, &mut rng).unwrap();
        assert_eq!(imgs.len(), 5);
        assert!(imgs.iter().all(|i| i.size() == 32 && i.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn hard_mode_is_deterministic() {
        let m = GanModel::new(&tiny_config(Ablation::Full), 6).unwrap();
        let mut rng = SeededRng::new(2);
        let enc = encoding(2, 4, 6, &mut rng);
        let noise = Tensor::from_vec(rng.normal_vec(6), &[2, 3]);
        let run = || generate(&m.generator, &enc, &noise, Mode::Hard, 1.0, &mut SeededRng::new(9)).unwrap().images.to_vec();
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_gamma_ignores_words() {
        let m = GanModel::new(&tiny_config(Ablation::Full), 6).unwrap();
        let mut rng = SeededRng::new(3);
        let enc = encoding(2, 4, 6, &mut rng);
        let noise = Tensor::from_vec(rng.normal_vec(6), &[2, 3]);
        let mut other = enc.clone();
        other.words = Tensor::from_vec(rng.normal_vec(2 * 4 * 6), &[2, 4, 6]);
        let a = generate(&m.generator, &enc, &noise, Mode::Soft, 1.0, &mut SeededRng::new(4)).unwrap();
        let b = generate(&m.generator, &other, &noise, Mode::Soft, 1.0, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a.images.to_vec(), b.images.to_vec());
    }

    #[test]
    fn permuting_sentences_permutes_images() {
        let m = GanModel::new(&tiny_config(Ablation::SaOnly), 6).unwrap();
        for (_, t) in m.g_params.iter().filter(|(n, _)| n.ends_with("gamma")) {
            t.set_data(vec![0.7]).unwrap();
        }
        let mut rng = SeededRng::new(5);
        let enc = encoding(3, 4, 6, &mut rng);
        let noise = rng.normal_vec(9);
        let perm = [2, 0, 1];
        let pnoise: Vec<f64> = perm.iter().flat_map(|&r| noise[r * 3..r * 3 + 3].to_vec()).collect();
        let a = generate(&m.generator, &enc, &Tensor::from_vec(noise, &[3, 3]), Mode::Soft, 1.0, &mut rng).unwrap();
        let b = generate(
            &m.generator,
            &enc.select(&perm).unwrap(),
            &Tensor::from_vec(pnoise, &[3, 3]),
            Mode::Soft,
            1.0,
            &mut rng,
        )
        .unwrap();
        let (a, b) = (a.images.to_vec(), b.images.to_vec());
        let per = 3 * 16 * 16;
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(&b[k * per..(k + 1) * per], &a[src * per..(src + 1) * per]);
        }
    }

    #[test]
    fn zero_discriminator_scores_zero() {
        let m = GanModel::new(&tiny_config(Ablation::Full), 6).unwrap();
        for (_, t) in m.d_params.iter() {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        let mut rng = SeededRng::new(6);
        let enc = encoding(2, 4, 6, &mut rng);
        let imgs = Tensor::from_vec(rng.normal_vec(2 * 3 * 16 * 16), &[2, 3, 16, 16]);
        let out = discriminate(&m.discriminator, &imgs, &enc, Mode::Soft, 1.0, &mut rng).unwrap();
        assert_eq!(out.scores.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn score_gradient_wrt_pixels() {
        let m = GanModel::new(&tiny_config(Ablation::Full), 6).unwrap();
        for (_, t) in m.d_params.iter().filter(|(n, _)| n.ends_with("gamma")) {
            t.set_data(vec![0.5]).unwrap();
        }
        let mut rng = SeededRng::new(7);
        let enc = encoding(1, 4, 6, &mut rng);
        let img = gradcheck::random_input(&[1, 3, 16, 16], &mut rng, 0.0);
        let f = |xs: &[Tensor]| {
            let out = discriminate(&m.discriminator, &xs[0], &enc, Mode::Soft, 1.0, &mut SeededRng::new(8))?;
            Ok(crate::tensor::sum_all(&out.scores))
        };
        let opts = GradOptions {
            max_coords: Some(96),
            ..Default::default()
        };
        let r = gradcheck::check("score wrt pixels", &[img], f, &opts).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn loss_examples() {
        let z = Tensor::zeros(&[4]);
        assert_eq!(discriminator_loss(&z, &z, &z).unwrap().item(), 2.0);
        let perfect = discriminator_loss(&Tensor::full(&[3], 1.5), &Tensor::full(&[3], -1.0), &Tensor::full(&[3], -2.0));
        assert_eq!(perfect.unwrap().item(), 0.0);
        assert_eq!(generator_loss(&z).item(), 0.0);
        assert_eq!(generator_loss(&Tensor::full(&[2], 3.0)).item(), -3.0);
        let r = Tensor::from_vec(vec![0.3, -0.2, 1.4], &[3]);
        let f = Tensor::from_vec(vec![-1.5, 0.1, 0.4], &[3]);
        let m = Tensor::from_vec(vec![2.0, -0.7, 0.0], &[3]);
        let perm = |t: &Tensor| {
            let v = t.to_vec();
            Tensor::from_vec(vec![v[2], v[0], v[1]], &[3])
        };
        let base = discriminator_loss(&r, &f, &m).unwrap().item();
        let permuted = discriminator_loss(&perm(&r), &perm(&f), &perm(&m)).unwrap().item();
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn ablation_arms_shrink_the_model() {
        let count = |a| GanModel::new(&tiny_config(a), 6).unwrap().parameter_count();
        let full = count(Ablation::Full);
        assert!(count(Ablation::NoBlock) < full);
        assert!(count(Ablation::SaOnly) < count(Ablation::WsaOnly));
        assert!(count(Ablation::WsaOnly) < full);
        assert!(count(Ablation::NoDbInG) < full && count(Ablation::NoDbInD) < full);
        assert!(count(Ablation::NoDbInG) > count(Ablation::NoBlock));
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("both").is_err());
    }
}

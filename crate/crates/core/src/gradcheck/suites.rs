//! Named finite-difference suites, one per differentiable module, plus the
//! end-to-end composite path.

use super::{check, project, random_input, GradOptions, GradReport};
use crate::attention::{attention_weights, self_attention, word_spatial_attention, AttentionProjections, FeatureMap, KeySet};
use crate::dynamic_block::{
    branch_prob_tensor, correlation_gate, dynamic_block_forward, fuse_soft, BlockConfig, BlockKind, DynamicBlock,
    GateParams, Mode,
};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng::SeededRng;
use crate::storygan::{discriminate, discriminator_loss, generate, generator_loss, Ablation, GanModel, TrainConfig};
use crate::tensor::*;
use crate::text_encoder::{matching_loss, EncoderConfig, ImageEncoder, TextEncoder, TextEncoding, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    Tensor,
    Attention,
    DynamicBlock,
    TextEncoder,
    StoryGan,
    Composite,
    All,
}

impl GradModule {
    pub const NAMES: [&'static str; 7] = [
        "tensor",
        "attention",
        "dynamic_block",
        "text_encoder",
        "storygan",
        "composite",
        "all",
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor" => Self::Tensor,
            "attention" => Self::Attention,
            "dynamic_block" => Self::DynamicBlock,
            "text_encoder" => Self::TextEncoder,
            "storygan" => Self::StoryGan,
            "composite" => Self::Composite,
            "all" => Self::All,
            _ => {
                return Err(Error::Config(format!(
                    "unknown gradcheck module '{s}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}

struct Suite {
    seed: u64,
    rng: SeededRng,
    opts: GradOptions,
    reports: Vec<GradReport>,
}

impl Suite {
    fn new(seed: u64, inject_fault: bool) -> Self {
        Self {
            seed,
            rng: SeededRng::new(seed),
            opts: GradOptions {
                seed,
                inject_fault,
                ..Default::default()
            },
            reports: Vec::new(),
        }
    }

    fn input(&mut self, shape: &[usize]) -> Tensor {
        random_input(shape, &mut self.rng, 0.05)
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        let data = self.input(shape).to_vec();
        Tensor::param(data.iter().map(|v| v.abs() + 0.5).collect(), shape)
    }

    fn run<F>(&mut self, name: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let seed = self.seed;
        let r = check(name, inputs, |xs| project(&f(xs)?, seed ^ 0x5eed), &self.opts)?;
        self.reports.push(r);
        Ok(())
    }

    fn run_capped<F>(&mut self, name: &str, inputs: &[Tensor], cap: usize, f: F) -> Result<()>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let saved = self.opts.max_coords;
        self.opts.max_coords = Some(cap);
        let out = self.run(name, inputs, f);
        self.opts.max_coords = saved;
        out
    }
}

/// Runs the requested suite(s) and returns one report per checked op.
pub fn run_module(module: GradModule, seed: u64, inject_fault: bool) -> Result<Vec<GradReport>> {
    let mut s = Suite::new(seed, inject_fault);
    match module {
        GradModule::Tensor => tensor_suite(&mut s)?,
        GradModule::Attention => attention_suite(&mut s)?,
        GradModule::DynamicBlock => dynamic_block_suite(&mut s)?,
        GradModule::TextEncoder => text_encoder_suite(&mut s)?,
        GradModule::StoryGan => storygan_suite(&mut s)?,
        GradModule::Composite => composite_suite(&mut s)?,
        GradModule::All => {
            tensor_suite(&mut s)?;
            attention_suite(&mut s)?;
            dynamic_block_suite(&mut s)?;
            text_encoder_suite(&mut s)?;
            storygan_suite(&mut s)?;
            composite_suite(&mut s)?;
        }
    }
    Ok(s.reports)
}

fn tensor_suite(s: &mut Suite) -> Result<()> {
    let (a, b, row) = (s.input(&[3, 4]), s.input(&[3, 4]), s.input(&[1, 4]));
    let pos = s.positive(&[3, 4]);
    s.run("add", &[a.clone(), b.clone()], |x| add(&x[0], &x[1]))?;
    s.run("add_broadcast", &[a.clone(), row.clone()], |x| add(&x[0], &x[1]))?;
    s.run("sub_broadcast", &[row.clone(), a.clone()], |x| sub(&x[0], &x[1]))?;
    s.run("mul_broadcast", &[a.clone(), row.clone()], |x| mul(&x[0], &x[1]))?;
    s.run("div", &[a.clone(), pos.clone()], |x| div(&x[0], &x[1]))?;
    s.run("scale", &[a.clone()], |x| Ok(scale(&x[0], -1.7)))?;
    s.run("add_scalar", &[a.clone()], |x| Ok(add_scalar(&x[0], 0.3)))?;
    s.run("neg", &[a.clone()], |x| Ok(neg(&x[0])))?;
    s.run("relu", &[a.clone()], |x| Ok(relu(&x[0])))?;
    s.run("leaky_relu", &[a.clone()], |x| Ok(leaky_relu(&x[0], 0.2)))?;
    s.run("tanh", &[a.clone()], |x| Ok(tanh(&x[0])))?;
    s.run("sigmoid", &[a.clone()], |x| Ok(sigmoid(&x[0])))?;
    s.run("exp", &[a.clone()], |x| Ok(exp(&x[0])))?;
    s.run("log", &[pos.clone()], |x| Ok(log(&x[0])))?;
    s.run("sqrt", &[pos.clone()], |x| Ok(sqrt(&x[0])))?;
    s.run("clamp", &[a.clone()], |x| Ok(clamp(&x[0], -0.9, 1.1)))?;
    s.run("sum_all", &[a.clone()], |x| Ok(sum_all(&x[0])))?;
    s.run("mean_all", &[a.clone()], |x| Ok(mean_all(&x[0])))?;

    let c = s.input(&[2, 3, 4]);
    for axis in 0..3 {
        s.run(&format!("sum_axis{axis}"), &[c.clone()], move |x| sum_axis(&x[0], axis))?;
        s.run(&format!("mean_axis{axis}"), &[c.clone()], move |x| mean_axis(&x[0], axis))?;
        s.run(&format!("softmax_axis{axis}"), &[c.clone()], move |x| softmax(&x[0], axis))?;
        s.run(&format!("log_softmax_axis{axis}"), &[c.clone()], move |x| log_softmax(&x[0], axis))?;
    }
    s.run("reshape", &[c.clone()], |x| reshape(&x[0], &[4, 6]))?;
    s.run("permute", &[c.clone()], |x| permute(&x[0], &[2, 0, 1]))?;
    s.run("transpose", &[a.clone()], |x| transpose(&x[0]))?;
    s.run("narrow", &[c.clone()], |x| narrow(&x[0], 2, 1, 2))?;
    let d = s.input(&[2, 2, 4]);
    s.run("concat", &[c.clone(), d], |x| concat(&[x[0].clone(), x[1].clone()], 1))?;
    let table = s.input(&[5, 3]);
    s.run("embedding", &[table], |x| embedding(&x[0], &[4, 0, 2, 4, 1]))?;
    let (m1, m2) = (s.input(&[3, 5]), s.input(&[5, 2]));
    s.run("matmul", &[m1, m2], |x| matmul(&x[0], &x[1]))?;
    let (b1, b2) = (s.input(&[2, 3, 4]), s.input(&[2, 4, 5]));
    s.run("bmm", &[b1, b2], |x| bmm(&x[0], &x[1]))?;

    let img = s.input(&[2, 3, 5, 5]);
    let (w, bias) = (s.input(&[4, 3, 3, 3]), s.input(&[4]));
    s.run("conv2d_s1", &[img.clone(), w.clone(), bias.clone()], |x| {
        conv2d(&x[0], &x[1], Some(&x[2]), 1, 1)
    })?;
    s.run("conv2d_s2", &[img.clone(), w.clone(), bias], |x| conv2d(&x[0], &x[1], Some(&x[2]), 2, 1))?;
    s.run("conv2d_nobias", &[img.clone(), w], |x| conv2d(&x[0], &x[1], None, 1, 0))?;
    let sq = s.input(&[2, 3, 4, 4]);
    s.run("upsample2x", &[sq.clone()], |x| upsample2x(&x[0]))?;
    s.run("avg_pool2d", &[sq.clone()], |x| avg_pool2d(&x[0], 2))?;
    s.run("global_avg_pool", &[sq.clone()], |x| global_avg_pool(&x[0]))?;
    s.run("instance_norm", &[sq], |x| instance_norm(&x[0], 1e-5))?;
    let px = s.input(&[2, 3, 2, 3]);
    s.run("pixel_norm", &[px], |x| pixel_norm(&x[0], 1e-8))?;
    Ok(())
}

fn attention_setup(s: &mut Suite, d: usize) -> (ParamSet, AttentionProjections) {
    let mut ps = ParamSet::new();
    let p = AttentionProjections::new("att", 4, 3, Some(d), &mut ps, &mut s.rng);
    (ps, p)
}

fn word_mask() -> Vec<bool> {
    vec![true, true, true, false, true, true, true, true]
}

fn attention_suite(s: &mut Suite) -> Result<()> {
    let (ps, proj) = attention_setup(s, 5);
    let a = s.input(&[2, 4, 3, 3]);
    let words = s.input(&[2, 4, 5]);
    let mask = word_mask();
    let mut inputs = vec![a.clone()];
    inputs.extend(ps.tensors());
    s.run("self_attention", &inputs, |x| {
        Ok(self_attention(&FeatureMap::new(x[0].clone())?, &proj)?.into_tensor())
    })?;
    s.run("self_attention_weights", &inputs, |x| {
        let fm = FeatureMap::new(x[0].clone())?;
        attention_weights(&fm, &KeySet::from_features(&fm)?, &proj)
    })?;
    let mut inputs = vec![a, words];
    inputs.extend(ps.tensors());
    let m = mask.clone();
    s.run("word_spatial_attention", &inputs, move |x| {
        Ok(word_spatial_attention(&FeatureMap::new(x[0].clone())?, &x[1], &m, &proj)?.into_tensor())
    })?;
    Ok(())
}

fn dynamic_block_suite(s: &mut Suite) -> Result<()> {
    let a = s.input(&[2, 4, 3, 3]);
    let words = s.input(&[2, 4, 5]);
    let mask = word_mask();
    let gate = GateParams {
        image: s.input(&[4, 6]),
        text: s.input(&[5, 6]),
    };
    let m = mask.clone();
    s.run("correlation_gate", &[a.clone(), words.clone(), gate.image, gate.text], move |x| {
        let g = GateParams {
            image: x[2].clone(),
            text: x[3].clone(),
        };
        correlation_gate(&FeatureMap::new(x[0].clone())?, &x[1], &m, &g)
    })?;

    let w = Tensor::param(vec![0.2, 0.55, 0.8], &[3]);
    let (z_sa, z_wsa) = (vec![0.3, -1.1, 0.7], vec![-0.4, 0.5, 1.9]);
    s.run("branch_probs", &[w], move |x| branch_prob_tensor(&x[0], &z_sa, &z_wsa, 0.7))?;

    let (h1, h2) = (s.input(&[2, 4, 3, 3]), s.input(&[2, 4, 3, 3]));
    let p = Tensor::param(vec![0.3, 0.85], &[2]);
    s.run("fuse_soft", &[p, h1, h2], |x| {
        Ok(fuse_soft(&x[0], &FeatureMap::new(x[1].clone())?, &FeatureMap::new(x[2].clone())?)?.into_tensor())
    })?;

    for (label, kind, shared) in [
        ("block_full_shared", BlockKind::Full, true),
        ("block_full_separate", BlockKind::Full, false),
        ("block_sa_only", BlockKind::SaOnly, true),
        ("block_wsa_only", BlockKind::WsaOnly, true),
    ] {
        let mut ps = ParamSet::new();
        let cfg = BlockConfig {
            kind,
            share_projections: shared,
            ..BlockConfig::new(4, 5)
        };
        let block = DynamicBlock::new("db", cfg, &mut ps, &mut s.rng);
        block.gamma.set_data(vec![0.6])?;
        let mut inputs = vec![a.clone(), words.clone()];
        inputs.extend(ps.tensors());
        let m = mask.clone();
        let seed = s.seed;
        s.run(label, &inputs, move |x| {
            let mut rng = SeededRng::new(seed).stream(7);
            let out = dynamic_block_forward(&block, &FeatureMap::new(x[0].clone())?, &x[1], &m, Mode::Soft, 0.8, &mut rng)?;
            Ok(out.output.into_tensor())
        })?;
    }
    Ok(())
}

fn small_encoder(s: &mut Suite) -> Result<(ParamSet, TextEncoder)> {
    let mut ps = ParamSet::new();
    let cfg = EncoderConfig {
        embed_dim: 5,
        dim: 6,
        max_len: 5,
        ..EncoderConfig::new(9)
    };
    let enc = TextEncoder::new("enc", cfg, &mut ps, &mut s.rng)?;
    Ok((ps, enc))
}

fn sentences() -> Result<Vec<TokenSeq>> {
    [vec![2, 3, 4, 5], vec![6, 2], vec![7, 8, 3]]
        .into_iter()
        .map(TokenSeq::new)
        .collect()
}

fn text_encoder_suite(s: &mut Suite) -> Result<()> {
    let (ps, enc) = small_encoder(s)?;
    let seqs = sentences()?;
    s.run("encoder_sentence", &ps.tensors(), |_| Ok(enc.encode(&seqs)?.s))?;
    s.run("encoder_words", &ps.tensors(), |_| Ok(enc.encode(&seqs)?.words))?;

    let mut ips = ParamSet::new();
    let img_enc = ImageEncoder::new("img", 6, &mut ips, &mut s.rng);
    let imgs = s.input(&[3, 3, 16, 16]);
    let mut inputs = vec![imgs.clone()];
    inputs.extend(ips.tensors());
    s.run_capped("image_encoder", &inputs, 40, |x| img_enc.embed(&x[0]))?;

    let (t, v) = (s.input(&[4, 6]), s.input(&[4, 6]));
    let ls = Tensor::param(vec![0.8], &[1]);
    s.run("matching_loss", &[t, v, ls], |x| matching_loss(&x[0], &x[1], &x[2]))?;
    Ok(())
}

fn tiny_gan_config(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        image_size: 16,
        base_channels: 4,
        noise_dim: 3,
        batch: 2,
        ablation,
        ..TrainConfig::default()
    }
}

fn open_gammas(ps: &ParamSet) -> Result<()> {
    for (_, t) in ps.iter().filter(|(n, _)| n.ends_with("gamma")) {
        t.set_data(vec![0.5])?;
    }
    Ok(())
}

fn random_encoding(s: &mut Suite, n: usize, l: usize, d: usize) -> TextEncoding {
    let mask = (0..n * l).map(|i| i % l < l - 1 || i / l == 0).collect();
    TextEncoding {
        s: s.input(&[n, d]),
        words: s.input(&[n, l, d]),
        mask,
    }
}

fn storygan_suite(s: &mut Suite) -> Result<()> {
    let model = GanModel::new(&tiny_gan_config(Ablation::Full), 6)?;
    open_gammas(&model.g_params)?;
    open_gammas(&model.d_params)?;
    let enc = random_encoding(s, 2, 4, 6);
    let noise = s.input(&[2, 3]);
    let seed = s.seed;

    let mut inputs = vec![enc.s.clone(), enc.words.clone(), noise];
    inputs.extend(model.g_params.tensors());
    let mask = enc.mask.clone();
    let g = &model.generator;
    s.run_capped("generator", &inputs, 12, |x| {
        let e = TextEncoding {
            s: x[0].clone(),
            words: x[1].clone(),
            mask: mask.clone(),
        };
        Ok(generate(g, &e, &x[2], Mode::Soft, 1.0, &mut SeededRng::new(seed).stream(5))?.images)
    })?;

    let images = s.input(&[2, 3, 16, 16]);
    let mut inputs = vec![images, enc.s.clone(), enc.words.clone()];
    inputs.extend(model.d_params.tensors());
    let d = &model.discriminator;
    s.run_capped("discriminator", &inputs, 12, |x| {
        let e = TextEncoding {
            s: x[1].clone(),
            words: x[2].clone(),
            mask: mask.clone(),
        };
        Ok(discriminate(d, &x[0], &e, Mode::Soft, 1.0, &mut SeededRng::new(seed).stream(6))?.scores)
    })?;

    let (r, f, m) = (s.input(&[4]), s.input(&[4]), s.input(&[4]));
    s.run("discriminator_loss", &[r, f.clone(), m], |x| discriminator_loss(&x[0], &x[1], &x[2]))?;
    s.run("generator_loss", &[f], |x| Ok(generator_loss(&x[0])))?;
    Ok(())
}

/// Encoder → generator (soft blocks) → discriminator → hinge loss, checked
/// against every parameter tensor of all three networks at once.
fn composite_suite(s: &mut Suite) -> Result<()> {
    let (eps, enc) = small_encoder(s)?;
    let seqs = sentences()?;
    let model = GanModel::new(&tiny_gan_config(Ablation::Full), 6)?;
    open_gammas(&model.g_params)?;
    open_gammas(&model.d_params)?;
    let noise = Tensor::from_vec(s.rng.normal_vec(9), &[3, 3]);
    let real = Tensor::from_vec(
        (0..3 * 3 * 16 * 16).map(|_| s.rng.uniform_range(-1.0, 1.0)).collect(),
        &[3, 3, 16, 16],
    );
    let mut inputs = eps.tensors();
    inputs.extend(model.g_params.tensors());
    inputs.extend(model.d_params.tensors());
    let seed = s.seed;
    let f = |_: &[Tensor]| -> Result<Tensor> {
        let mut rng = SeededRng::new(seed).stream(9);
        let e = enc.encode(&seqs)?;
        let fake = generate(&model.generator, &e, &noise, Mode::Soft, 1.0, &mut rng)?.images;
        let roll = |t: &Tensor| concat(&[narrow(t, 0, 1, 2)?, narrow(t, 0, 0, 1)?], 0);
        let l = e.max_len();
        let mis = TextEncoding {
            s: roll(&e.s)?,
            words: roll(&e.words)?,
            mask: e.mask[l..].iter().chain(&e.mask[..l]).copied().collect(),
        };
        let d_real = discriminate(&model.discriminator, &real, &e, Mode::Soft, 1.0, &mut rng)?.scores;
        let d_fake = discriminate(&model.discriminator, &fake, &e, Mode::Soft, 1.0, &mut rng)?.scores;
        let d_mis = discriminate(&model.discriminator, &real, &mis, Mode::Soft, 1.0, &mut rng)?.scores;
        let d_loss = discriminator_loss(&d_real, &d_fake, &d_mis)?;
        add(&d_loss, &generator_loss(&d_fake))
    };
    let saved = s.opts.max_coords;
    s.opts.max_coords = Some(6);
    let r = check("composite", &inputs, f, &s.opts);
    s.opts.max_coords = saved;
    s.reports.push(r?);
    Ok(())
}

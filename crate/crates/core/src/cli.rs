//! Command-line front end and the pipeline steps behind each subcommand.

use std::ffi::OsString;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_range, ranges_overlap, RunConfig};
use crate::dynamic_block::Mode;
use crate::error::{Error, Result};
use crate::gradcheck::{run_module, GradModule, MAX_REL_ERR};
use crate::image::Image;
use crate::metrics::{cosine_metric, fid, fsd, sample_warning, EvalReport, FeatureExtractor, CAVEAT, EXTRACTOR_SEED};
use crate::optim::ParamSet;
use crate::rng::SeededRng;
use crate::storygan::{generate_story, train, GanModel, TrainData, TrainOutcome, Trainer};
use crate::synth_data::{read_dataset, write_dataset, Dataset, SynthConfig};
use crate::tensor::{no_grad, Tensor};
use crate::text_encoder::{matching_margin, pretrain_matching, MatchingMargin, MatchingModel, TextEncoding, TokenSeq};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// `root/split` when it holds a dataset, otherwise `root` itself.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if sub.join("manifest.json").exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let dir = split_dir(root, split);
    if !dir.join("manifest.json").exists() {
        return Err(Error::Config(format!("no dataset found at {}", dir.display())));
    }
    read_dataset(&dir)
}

/// Writes `out/train` and `out/test`; returns the story counts.
pub fn make_data(out: &Path, train_seeds: Range<u64>, test_seeds: Range<u64>, synth: &SynthConfig) -> Result<(usize, usize)> {
    if ranges_overlap(&train_seeds, &test_seeds) {
        return Err(Error::Config(format!(
            "train seeds {train_seeds:?} and test seeds {test_seeds:?} overlap"
        )));
    }
    let train = Dataset::generate(train_seeds, synth)?;
    write_dataset(&train, &out.join("train"))?;
    let test = Dataset::generate(test_seeds, synth)?;
    write_dataset(&test, &out.join("test"))?;
    Ok((train.stories.len(), test.stories.len()))
}

/// Freshly initialised matching model for `cfg`.
pub fn build_matching(cfg: &RunConfig, vocab_size: usize) -> Result<(ParamSet, MatchingModel)> {
    let mut params = ParamSet::new();
    let mut rng = SeededRng::new(cfg.pretrain_seed).stream(1);
    let model = MatchingModel::new(cfg.encoder.encoder_config(vocab_size), &mut params, &mut rng)?;
    Ok((params, model))
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub model: MatchingModel,
    pub losses: Vec<f64>,
    /// Measured on the test split.
    pub margin: MatchingMargin,
    pub checkpoint: Checkpoint,
}

/// Pretrains the text/image matching pair on the train split and measures
/// the matched vs mismatched cosine margin on the test split.
pub fn pretrain_encoder(data_root: &Path, cfg: &RunConfig) -> Result<PretrainOutcome> {
    let train = load_split(data_root, "train")?;
    let test = load_split(data_root, "test")?;
    let (params, model) = build_matching(cfg, train.vocab.len())?;
    let mut rng = SeededRng::new(cfg.pretrain_seed).stream(2);
    let losses = pretrain_matching(&model, &params, &train.pairs(), &cfg.pretrain, &mut rng)?;
    let margin = matching_margin(&model, &test.pairs(), test.manifest.frames.max(1))?;
    let mut checkpoint = Checkpoint::new(cfg.to_text(), rng.counter(), cfg.pretrain.steps as u64);
    checkpoint.push_params(&params);
    Ok(PretrainOutcome {
        params,
        model,
        losses,
        margin,
        checkpoint,
    })
}

fn snapshot_config(ck: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ck.config).map_err(|e| Error::Config(format!("checkpoint config snapshot: {e}")))
}

/// Rebuilds the matching model stored in `ck` (an encoder or GAN checkpoint).
pub fn matching_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, ParamSet, MatchingModel)> {
    let cfg = snapshot_config(ck)?;
    let table = ck
        .get("enc.embedding")
        .ok_or_else(|| Error::Contract("checkpoint holds no text encoder".into()))?;
    let (params, model) = build_matching(&cfg, table.shape[0])?;
    ck.restore_params(&params)?;
    Ok((cfg, params, model))
}

/// Constant encodings of `seqs`, computed in chunks.
pub fn encode_all(model: &MatchingModel, seqs: &[TokenSeq]) -> Result<TextEncoding> {
    no_grad(|| {
        let parts = seqs
            .chunks(256)
            .map(|c| model.text.encode(c))
            .collect::<Result<Vec<_>>>()?;
        TextEncoding::stack(&parts)
    })
}

pub fn train_data(data: &Dataset, model: &MatchingModel) -> Result<TrainData> {
    let pairs = data.pairs();
    let seqs: Vec<TokenSeq> = pairs.iter().map(|p| p.0.clone()).collect();
    let images = pairs.into_iter().map(|p| p.1).collect();
    TrainData::new(encode_all(model, &seqs)?, images, data.manifest.frames)
}

/// Trains a GAN against the frozen encoder in `encoder`. The run config keeps
/// its own training keys but takes the encoder keys from the encoder
/// checkpoint, so the result is self-describing.
pub fn run_train(
    data_root: &Path,
    encoder: &Path,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
    on_step: impl FnMut(&crate::storygan::StepLog),
) -> Result<(Trainer, TrainOutcome)> {
    let data = load_split(data_root, "train")?;
    let enc_ck = Checkpoint::load(encoder)?;
    let (enc_cfg, enc_params, model) = matching_from_checkpoint(&enc_ck)?;
    if data.manifest.image_size != cfg.train.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but image_size = {}",
            data.manifest.image_size, cfg.train.image_size
        )));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.encoder = enc_cfg.encoder;
    run_cfg.pretrain_seed = enc_cfg.pretrain_seed;
    let td = train_data(&data, &model)?;
    let text_dim = model.text.dim();
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(run_cfg.train.clone(), text_dim, &Checkpoint::load(p)?)?,
        None => Trainer::new(run_cfg.train.clone(), text_dim)?,
    };
    let outcome = train(&mut trainer, &td, &run_cfg.to_text(), &enc_params, out_dir, on_step)?;
    Ok((trainer, outcome))
}

/// Generated stories for `stories` (hard selection, fixed noise per story).
pub fn generate_for_stories(
    model: &GanModel,
    matching: &MatchingModel,
    cfg: &RunConfig,
    stories: &[Vec<TokenSeq>],
) -> Result<Vec<Vec<Image>>> {
    let mut noise_rng = SeededRng::new(cfg.eval_seed).stream(20);
    let mut gumbel = SeededRng::new(cfg.eval_seed).stream(21);
    let nd = cfg.train.noise_dim;
    let mut out = Vec::with_capacity(stories.len());
    for chunk in stories.chunks(16) {
        let seqs: Vec<TokenSeq> = chunk.iter().flatten().cloned().collect();
        let enc = encode_all(matching, &seqs)?;
        let n = seqs.len();
        let noise = Tensor::from_vec(noise_rng.normal_vec(n * nd), &[n, nd]);
        let images = no_grad(|| generate_story(&model.generator, &enc, &noise, Mode::Hard, cfg.train.tau, &mut gumbel))?;
        let mut it = images.into_iter();
        for s in chunk {
            out.push(it.by_ref().take(s.len()).collect());
        }
    }
    Ok(out)
}

/// Rebuilds the generator/discriminator pair stored in a training checkpoint.
pub fn gan_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig, text_dim: usize) -> Result<GanModel> {
    let model = GanModel::new(&cfg.train, text_dim)?;
    ck.restore_params(&model.g_params)?;
    ck.restore_params(&model.d_params)?;
    Ok(model)
}

/// FID, FSD and Cosine of the checkpoint's generator on the test split.
pub fn evaluate(test: &Dataset, ck: &Checkpoint) -> Result<EvalReport> {
    let (cfg, _, matching) = matching_from_checkpoint(ck)?;
    let model = gan_from_checkpoint(ck, &cfg, matching.text.dim())?;
    let n = match cfg.eval_stories {
        0 => test.stories.len(),
        k => k.min(test.stories.len()),
    };
    let stories = &test.stories[..n];
    let sentences: Vec<Vec<TokenSeq>> = stories.iter().map(|s| s.sentences.clone()).collect();
    let fake = generate_for_stories(&model, &matching, &cfg, &sentences)?;
    let real: Vec<Vec<Image>> = stories.iter().map(|s| s.frames.clone()).collect();
    report(&real, &fake, &sentences, &matching)
}

/// Metrics of `fake` stories against `real` ones.
pub fn report(
    real: &[Vec<Image>],
    fake: &[Vec<Image>],
    sentences: &[Vec<TokenSeq>],
    matching: &MatchingModel,
) -> Result<EvalReport> {
    let real_frames: Vec<Image> = real.iter().flatten().cloned().collect();
    let fake_frames: Vec<Image> = fake.iter().flatten().cloned().collect();
    let flat_sent: Vec<TokenSeq> = sentences.iter().flatten().cloned().collect();
    let fid_v = fid(&real_frames, &fake_frames, &FeatureExtractor::image(EXTRACTOR_SEED))?;
    let fsd_v = fsd(real, fake, &FeatureExtractor::sequence(EXTRACTOR_SEED))?;
    let cosine = cosine_metric(matching, &flat_sent, &fake_frames)?;
    let warning = match (
        sample_warning(real_frames.len(), fake_frames.len()),
        sample_warning(real.len(), fake.len()),
    ) {
        (Some(w), _) => Some(format!("FID: {w}")),
        (None, Some(w)) => Some(format!("FSD: {w}")),
        (None, None) => None,
    };
    Ok(EvalReport {
        fid: fid_v,
        fsd: fsd_v,
        cosine,
        n_real: real_frames.len(),
        n_fake: fake_frames.len(),
        extractor_seed: EXTRACTOR_SEED,
        caveat: CAVEAT.to_string(),
        warning,
    })
}

#[derive(Debug, Parser)]
#[command(name = "storyviz", version, about = "Story visualization GAN with dynamic attention blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic story dataset (train and test splits).
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0..1000")]
        train_seeds: String,
        #[arg(long, default_value = "1000..1200")]
        test_seeds: String,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
    },
    /// Pretrain the text encoder with its image counterpart.
    PretrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator and discriminator.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute FID, FSD and Cosine for a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb every analytic gradient (the check must then fail).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::MakeData {
            out,
            train_seeds,
            test_seeds,
            size,
            frames,
        } => {
            let (train, test) = make_data(
                &out,
                parse_range(&train_seeds)?,
                parse_range(&test_seeds)?,
                &SynthConfig { frames, size },
            )?;
            println!("wrote {train} train and {test} test stories to {}", out.display());
        }
        Command::PretrainEncoder { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let o = pretrain_encoder(&data, &cfg)?;
            o.checkpoint.save(&out)?;
            println!(
                "final loss {:.4}; held-out cosine matched {:.4} mismatched {:.4} margin {:.4}",
                o.losses.last().copied().unwrap_or(f64::NAN),
                o.margin.matched,
                o.margin.mismatched,
                o.margin.margin()
            );
        }
        Command::Train {
            data,
            encoder,
            config,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let mut announced = false;
            let (trainer, outcome) = run_train(&data, &encoder, &cfg, Some(&out), resume.as_deref(), |row| {
                if !announced || row.step % 100 == 0 {
                    println!("step {} d_loss {:.4} g_loss {:.4}", row.step, row.d_loss, row.g_loss);
                    announced = true;
                }
            })?;
            let m = &trainer.model;
            println!(
                "ablation {}: generator {} parameters, discriminator {} parameters",
                cfg.train.ablation.name(),
                m.g_params.count(),
                m.d_params.count()
            );
            println!(
                "trained to step {}; log {}; checkpoint {}",
                outcome.checkpoint.step,
                outcome.log_path.as_deref().unwrap_or(Path::new("-")).display(),
                out.join("checkpoint.dyns").display()
            );
        }
        Command::Eval { data, ckpt, report } => {
            let test = load_split(&data, "test")?;
            let r = evaluate(&test, &Checkpoint::load(&ckpt)?)?;
            fs::write(&report, serde_json::to_string_pretty(&r)? + "\n")?;
            println!("fid {:.4} fsd {:.4} cosine {:.4}", r.fid, r.fsd, r.cosine);
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::Gradcheck {
            module,
            seed,
            inject_fault,
        } => {
            let reports = run_module(GradModule::parse(&module)?, seed, inject_fault)?;
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<26} max_rel_err {:.3e}  checked {:>4}  skipped {:>2}  {status}",
                    r.name, r.max_rel_err, r.checked, r.skipped
                );
                if !r.passed() {
                    failed.push(r.name.as_str());
                }
            }
            if !failed.is_empty() {
                eprintln!("gradient check failed (threshold {MAX_REL_ERR:e}): {}", failed.join(", "));
                return Ok(EXIT_CHECK_FAILED);
            }
            println!("all {} checks below {MAX_REL_ERR:e}", reports.len());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

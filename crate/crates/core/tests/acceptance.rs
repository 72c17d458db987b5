//! Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
//! stderr. Training criteria drive the release-profile binary end to end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use storyviz::attention::FeatureMap;
use storyviz::checkpoint::file_sha256;
use storyviz::dynamic_block::{dynamic_block_forward, BlockConfig, Branch, DynamicBlock, Mode};
use storyviz::gradcheck::{run_module, GradModule, MAX_REL_ERR};
use storyviz::image::Image;
use storyviz::init::orthogonal;
use storyviz::metrics::{
    fid, frechet_distance, fsd, gaussian_stats, matmul_square, matrix_sqrt_psd, FeatureExtractor, EXTRACTOR_SEED,
};
use storyviz::rng::SeededRng;
use storyviz::optim::ParamSet;
use storyviz::synth_data::{Dataset, SynthConfig};
use storyviz::tensor::{no_grad, Tensor};

struct Outcome {
    name: &'static str,
    passed: bool,
    soft: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome {
        name,
        passed,
        soft: false,
        detail,
    }
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let reports = run_module(GradModule::All, 0, false).expect("gradcheck runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let composite = reports.iter().any(|r| r.name.starts_with("composite"));
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    outcome(
        "gradient fidelity",
        failed.is_empty() && composite && worst < MAX_REL_ERR && secs < 120.0,
        format!(
            "{} checks ({checked} coordinates, {skipped} skipped at kinks), max rel err {worst:.2e} < {MAX_REL_ERR:.0e}, \
             composite path {}, {secs:.1} s < 120 s{}",
            reports.len(),
            if composite { "included" } else { "missing" },
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn tiny_block(w: Option<f64>, rng: &mut SeededRng) -> DynamicBlock {
    let mut ps = ParamSet::new();
    let cfg = BlockConfig {
        w_override: w,
        ..BlockConfig::new(4, 6)
    };
    DynamicBlock::new("db", cfg, &mut ps, rng)
}

fn block_inputs(n: usize, rng: &mut SeededRng) -> (FeatureMap, Tensor, Vec<bool>) {
    let a = FeatureMap::new(Tensor::from_vec(rng.normal_vec(n * 4 * 2 * 2), &[n, 4, 2, 2])).unwrap();
    let words = Tensor::from_vec(rng.normal_vec(n * 3 * 6), &[n, 3, 6]);
    (a, words, vec![true; n * 3])
}

fn gumbel_statistics() -> Outcome {
    let t = Instant::now();
    let mut rng = SeededRng::new(11);
    let (a, words, mask) = block_inputs(1000, &mut rng);
    let mut lines = Vec::new();
    let mut ok = true;
    for &w in &[0.7, 0.1, 0.5, 0.9] {
        let block = tiny_block(Some(w), &mut rng);
        let mut draws = SeededRng::new(0x6d62_0000 ^ (w * 1000.0) as u64);
        let mut sa = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let out = no_grad(|| dynamic_block_forward(&block, &a, &words, &mask, Mode::Hard, 0.1, &mut draws)).unwrap();
            let sel = out.selected.expect("hard mode selects");
            sa += sel.iter().filter(|&&b| b == Branch::SA).count();
            total += sel.len();
        }
        let freq = sa as f64 / total as f64;
        let inside = (freq - w).abs() <= 0.01;
        ok &= inside;
        lines.push(format!("w={w}: {freq:.4} over {total}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 10.0;
    outcome(
        "gumbel-max selection",
        ok,
        format!("{} (band w +/- 0.01), {secs:.1} s < 10 s", lines.join(", ")),
    )
}

fn temperature_limit() -> Outcome {
    const TAUS: [f64; 5] = [1.0, 0.3, 0.1, 0.03, 0.01];
    let n = 100;
    let mut rng = SeededRng::new(12);
    let block = tiny_block(None, &mut rng);
    block.gamma.update_data(|g| g[0] = 1.0);
    let (a, words, mask) = block_inputs(n, &mut rng);
    let noise_seed = 0x7461_7530;
    let run = |mode, tau| {
        let mut draws = SeededRng::new(noise_seed);
        no_grad(|| dynamic_block_forward(&block, &a, &words, &mask, mode, tau, &mut draws)).unwrap()
    };
    let hard = run(Mode::Hard, 0.01);
    let per = hard.fused.tensor().numel() / n;
    let hard_data = hard.fused.tensor().to_vec();
    let mut gaps = vec![0.0; n];
    for (i, p) in hard.probs.iter().enumerate() {
        gaps[i] = ((p.w / (1.0 - p.w)).ln() + p.z_sa - p.z_wsa).abs();
    }
    let mut dists = vec![Vec::new(); n];
    for &tau in &TAUS {
        let soft = run(Mode::Soft, tau).fused.tensor().to_vec();
        for i in 0..n {
            let d: f64 = soft[i * per..(i + 1) * per]
                .iter()
                .zip(&hard_data[i * per..(i + 1) * per])
                .map(|(s, h)| (s - h) * (s - h))
                .sum::<f64>()
                .sqrt();
            dists[i].push(d);
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| gaps[i] > 0.1).collect();
    let monotone = kept.iter().all(|&i| dists[i].windows(2).all(|p| p[1] <= p[0]));
    let worst = kept
        .iter()
        .map(|&i| {
            let h = hard_data[i * per..(i + 1) * per].iter().map(|v| v * v).sum::<f64>().sqrt();
            dists[i][TAUS.len() - 1] / h
        })
        .fold(0.0, f64::max);
    outcome(
        "temperature limit",
        monotone && worst < 1e-3 && !kept.is_empty(),
        format!(
            "{} of {n} inputs outside the near-tie band, monotone over tau {TAUS:?}: {monotone}, \
             worst ||soft-hard||/||hard|| at 0.01 = {worst:.2e} < 1e-3",
            kept.len()
        ),
    )
}

fn frechet_oracle() -> Outcome {
    let d = 8;
    let mut rng = SeededRng::new(13);
    let q = orthogonal(d, d, 1.0, &mut rng);
    let mu1: Vec<f64> = rng.normal_vec(d);
    let mu2: Vec<f64> = mu1.iter().map(|m| m + 0.5 * rng.normal()).collect();
    let s1: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let s2: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect();
    let closed: f64 = mu1.iter().zip(&mu2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        + s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let sample = |mu: &[f64], s: &[f64], rng: &mut SeededRng| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|_| {
                let z = rng.normal_vec(d);
                (0..d)
                    .map(|i| mu[i] + (0..d).map(|k| q[i * d + k] * s[k] * z[k]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let x1 = sample(&mu1, &s1, &mut rng);
    let x2 = sample(&mu2, &s2, &mut rng);
    let est = frechet_distance(&gaussian_stats(&x1).unwrap(), &gaussian_stats(&x2).unwrap()).unwrap();
    let rel = (est - closed).abs() / closed;

    let n = 64;
    let b = rng.normal_vec(n * n);
    let mut bt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            bt[j * n + i] = b[i * n + j];
        }
    }
    let m = matmul_square(&b, &bt, n);
    let r = matrix_sqrt_psd(&m, n).unwrap();
    let rr = matmul_square(&r, &r, n);
    let frob = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = rr.iter().zip(&m).map(|(a, b)| a - b).collect();
    let recon = frob(&diff) / frob(&m);
    outcome(
        "frechet oracle",
        rel < 0.05 && recon < 1e-8,
        format!(
            "closed form {closed:.4}, estimate {est:.4}, rel err {rel:.4} < 0.05; \
             sqrt reconstruction at d=64 {recon:.2e} < 1e-8"
        ),
    )
}

fn fsd_sensitivity() -> Outcome {
    let cfg = SynthConfig::default();
    let frames = |d: Dataset| -> Vec<Vec<Image>> { d.stories.into_iter().map(|s| s.frames).collect() };
    let reference = frames(Dataset::generate(10_000..10_500, &cfg).unwrap());
    let intact = frames(Dataset::generate(0..500, &cfg).unwrap());
    let mut rng = SeededRng::new(14);
    let shuffled: Vec<Vec<Image>> = intact
        .iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            while order.iter().enumerate().all(|(i, &o)| i == o) {
                rng.shuffle(&mut order);
            }
            order.iter().map(|&i| s[i].clone()).collect()
        })
        .collect();
    let seq = FeatureExtractor::sequence(EXTRACTOR_SEED);
    let img = FeatureExtractor::image(EXTRACTOR_SEED);
    let flat = |v: &[Vec<Image>]| v.iter().flatten().cloned().collect::<Vec<_>>();
    let fsd_intact = fsd(&reference, &intact, &seq).unwrap();
    let fsd_shuffled = fsd(&reference, &shuffled, &seq).unwrap();
    let fid_intact = fid(&flat(&reference), &flat(&intact), &img).unwrap();
    let fid_shuffled = fid(&flat(&reference), &flat(&shuffled), &img).unwrap();
    let change = (fid_shuffled - fid_intact).abs() / fid_intact;
    outcome(
        "fsd temporal sensitivity",
        fsd_shuffled > fsd_intact && change < 0.05,
        format!(
            "500 stories vs a disjoint reference: FSD intact {fsd_intact:.4}, shuffled {fsd_shuffled:.4}; \
             FID intact {fid_intact:.4}, shuffled {fid_shuffled:.4} (change {:.2}% < 5%)",
            100.0 * change
        ),
    )
}

// ---- end-to-end runs through the binary ----

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        if root.exists() {
            fs::remove_dir_all(&root).unwrap();
        }
        fs::create_dir_all(&root).unwrap();
        Self { root }
    }

    fn run(&self, args: &[&str]) -> String {
        let out = Command::new(env!("CARGO_BIN_EXE_storyviz"))
            .args(args)
            .current_dir(&self.root)
            .output()
            .expect("binary runs");
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(
            out.status.success(),
            "storyviz {} failed: {}{}",
            args.join(" "),
            stdout,
            String::from_utf8_lossy(&out.stderr)
        );
        stdout
    }

    fn config(&self, name: &str, text: &str) -> String {
        fs::write(self.root.join(name), text).unwrap();
        name.to_string()
    }

    /// Trains into `out` and returns wall-clock seconds.
    fn train(&self, cfg: &str, out: &str, resume: Option<&str>) -> f64 {
        let t = Instant::now();
        let mut args = vec!["train", "--data", "data", "--encoder", "enc.dyns", "--config", cfg, "--out", out];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        self.run(&args);
        t.elapsed().as_secs_f64()
    }

    fn eval(&self, out: &str) -> (f64, f64) {
        let report = format!("{out}.json");
        self.run(&["eval", "--data", "data", "--ckpt", &format!("{out}/checkpoint.dyns"), "--report", &report]);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(self.root.join(&report)).unwrap()).unwrap();
        (v["fid"].as_f64().unwrap(), v["fsd"].as_f64().unwrap())
    }

    fn checkpoint_hash(&self, out: &str) -> String {
        file_sha256(&self.root.join(out).join("checkpoint.dyns")).unwrap()
    }

    fn loss_rows(&self, out: &str) -> Vec<(String, String, String)> {
        let text = fs::read_to_string(self.root.join(out).join("train_log.csv")).unwrap();
        text.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[1].to_string(), f[2].to_string())
            })
            .collect()
    }
}

const TRAIN: &str = "steps = 2000\nbatch = 16\nlr = 0.0002\ntau = 1\nsample_every = 500\n";

fn arm_config(ablation: &str, seed: u64) -> String {
    format!("{TRAIN}ablation = {ablation}\nseed = {seed}\n")
}

fn main() {
    let mut results = Vec::new();
    progress("gradient fidelity");
    results.push(gradient_fidelity());
    progress("gumbel-max selection");
    results.push(gumbel_statistics());
    progress("temperature limit");
    results.push(temperature_limit());
    progress("frechet oracle");
    results.push(frechet_oracle());
    progress("fsd sensitivity");
    results.push(fsd_sensitivity());

    let ws = Workspace::new();
    progress("make-data and encoder pretraining");
    ws.run(&["make-data", "--out", "data", "--train-seeds", "0..1000", "--test-seeds", "1000..1200", "--size", "32"]);
    let pre = ws.run(&["pretrain-encoder", "--data", "data", "--out", "enc.dyns"]);
    let margin = pre
        .split_whitespace()
        .skip_while(|w| *w != "margin")
        .nth(1)
        .and_then(|v| v.parse::<f64>().ok())
        .expect("pretraining prints the margin");

    progress("untrained baseline");
    let zero = ws.config("zero.cfg", &arm_config("full", 0).replace("steps = 2000", "steps = 0"));
    ws.train(&zero, "untrained", None);
    let (fid0, fsd0) = ws.eval("untrained");

    let mut fids: Vec<(&str, u64, f64)> = Vec::new();
    progress("full arm, seed 0 (2000 steps)");
    let full0 = ws.config("full_0.cfg", &arm_config("full", 0));
    let secs = ws.train(&full0, "full_0", None);
    let (fid1, fsd1) = ws.eval("full_0");
    fids.push(("full", 0, fid1));
    results.push(outcome(
        "toy training improvement",
        fid1 <= 0.5 * fid0 && fsd1 <= 0.7 * fsd0 && secs <= 45.0 * 60.0,
        format!(
            "FID {fid1:.4} vs untrained {fid0:.4} (ratio {:.3} <= 0.5), FSD {fsd1:.4} vs {fsd0:.4} (ratio {:.3} <= 0.7), \
             2000 steps in {:.1} min <= 45 min",
            fid1 / fid0,
            fsd1 / fsd0,
            secs / 60.0
        ),
    ));

    for seed in 0..3u64 {
        for arm in ["full", "sa_only", "wsa_only", "no_block"] {
            if arm == "full" && seed == 0 {
                continue;
            }
            progress(&format!("{arm} arm, seed {seed}"));
            let name = format!("{arm}_{seed}");
            let cfg = ws.config(&format!("{name}.cfg"), &arm_config(arm, seed));
            ws.train(&cfg, &name, None);
            fids.push((arm, seed, ws.eval(&name).0));
        }
    }
    let fid_of = |arm: &str, seed: u64| fids.iter().find(|f| f.0 == arm && f.1 == seed).unwrap().2;
    let mut detail = String::new();
    let mut ordered_everywhere = true;
    for seed in 0..3u64 {
        let (f, s, w, n) = (fid_of("full", seed), fid_of("sa_only", seed), fid_of("wsa_only", seed), fid_of("no_block", seed));
        let ordered = f <= s && f <= w && s <= n && w <= n;
        ordered_everywhere &= ordered;
        let _ = write!(
            detail,
            "seed {seed}: full {f:.3}, sa_only {s:.3}, wsa_only {w:.3}, no_block {n:.3} ({}); ",
            if ordered { "ordered" } else { "not ordered" }
        );
    }
    let mean = |arm: &str| (0..3).map(|s| fid_of(arm, s)).sum::<f64>() / 3.0;
    let (f, s, w, n) = (mean("full"), mean("sa_only"), mean("wsa_only"), mean("no_block"));
    let _ = write!(detail, "mean: full {f:.3}, sa_only {s:.3}, wsa_only {w:.3}, no_block {n:.3}");
    results.push(Outcome {
        name: "ablation ordering",
        passed: ordered_everywhere,
        soft: true,
        detail,
    });

    results.push(outcome("encoder margin", margin > 0.2, format!("held-out margin {margin:.4} > 0.2")));

    progress("determinism rerun and resume");
    ws.train(&full0, "full_0_rerun", None);
    let same_ckpt = ws.checkpoint_hash("full_0") == ws.checkpoint_hash("full_0_rerun");
    let short = ws.config("ten.cfg", &arm_config("full", 0).replace("steps = 2000", "steps = 10"));
    let twenty = ws.config("twenty.cfg", &arm_config("full", 0).replace("steps = 2000", "steps = 20"));
    ws.train(&twenty, "straight", None);
    ws.train(&short, "first_half", None);
    ws.train(&twenty, "second_half", Some("first_half/checkpoint.dyns"));
    let straight = ws.loss_rows("straight");
    let mut resumed = ws.loss_rows("first_half");
    resumed.extend(ws.loss_rows("second_half"));
    let same_losses = straight.len() == 20 && straight == resumed;
    let same_resumed_ckpt = ws.checkpoint_hash("straight") == ws.checkpoint_hash("second_half");
    results.push(outcome(
        "determinism and resume",
        same_ckpt && same_losses && same_resumed_ckpt,
        format!(
            "rerun checkpoint identical: {same_ckpt}; 10+10 resumed losses identical over {} steps: {same_losses}; \
             resumed checkpoint identical: {same_resumed_ckpt}",
            straight.len()
        ),
    ));

    let mut hard_failures = 0;
    println!();
    for (i, r) in results.iter().enumerate() {
        let tag = match (r.passed, r.soft) {
            (true, _) => "PASS",
            (false, true) => "FINDING",
            (false, false) => "FAIL",
        };
        if !r.passed && !r.soft {
            hard_failures += 1;
        }
        println!("criterion {} {}: {tag} ({})", i + 1, r.name, r.detail);
    }
    if hard_failures > 0 {
        println!("{hard_failures} criteria failed");
        std::process::exit(1);
    }
}

//! The dynamic block: a correlation gate between pooled image and text
//! representations picks SA or WSA through Gumbel-Softmax.
//!
//! * gate: `w = sigmoid(⟨P_a ā, P_b b̄⟩)`, `ā` the spatial mean of the
//!   features, `b̄` the masked mean of the word embeddings;
//! * branch probabilities: a two-way Gumbel-Softmax over `(log w, log(1 − w))`
//!   with temperature `τ` and one Gumbel draw per branch;
//! * training mixes the branches softly, inference keeps the more probable
//!   one (ties go to WSA);
//! * the block output is `a + γ · fused` with `γ` starting at zero.

use crate::attention::{self_attention, word_spatial_attention, AttentionProjections, FeatureMap};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::init::orthogonal;
use crate::optim::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::{
    add, add_scalar, clamp, div, global_avg_pool, log, matmul, mul, neg, reshape, scale, sigmoid, sub, sum_axis,
    Tensor,
};

/// Bounds keeping `log w` and `log(1 − w)` finite.
pub const W_CLAMP: f64 = 1e-6;
/// Uniforms feeding the Gumbel transform are clamped into `[U_CLAMP, 1 − U_CLAMP]`.
pub const U_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    SA,
    WSA,
}

/// Which attention branches a block carries (ablation arms).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Full,
    SaOnly,
    WsaOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub text_dim: usize,
    pub key_dim: usize,
    pub gate_dim: usize,
    pub kind: BlockKind,
    /// One query/key/value set for both branches.
    pub share_projections: bool,
    /// Reuse one Gumbel draw for both branches.
    pub shared_noise: bool,
    /// Replace the learned gate by a constant `w` (study/testing hook).
    pub w_override: Option<f64>,
}

impl BlockConfig {
    pub fn new(channels: usize, text_dim: usize) -> Self {
        Self {
            channels,
            text_dim,
            key_dim: (channels / 4).max(8),
            gate_dim: 16,
            kind: BlockKind::Full,
            share_projections: true,
            shared_noise: false,
            w_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateParams {
    pub image: Tensor,
    pub text: Tensor,
}

#[derive(Debug, Clone)]
pub struct DynamicBlock {
    pub config: BlockConfig,
    pub sa_proj: Option<AttentionProjections>,
    /// Separate WSA projections; `None` when shared with `sa_proj`.
    pub wsa_proj: Option<AttentionProjections>,
    pub gate: Option<GateParams>,
    pub gamma: Tensor,
}

impl DynamicBlock {
    pub fn new(prefix: &str, config: BlockConfig, params: &mut ParamSet, rng: &mut SeededRng) -> Self {
        let (c, d) = (config.channels, config.text_dim);
        let needs_words = config.kind != BlockKind::SaOnly;
        let (sa_proj, wsa_proj) = match (config.kind, config.share_projections) {
            (BlockKind::SaOnly, _) => (
                Some(AttentionProjections::new(&format!("{prefix}.att"), c, config.key_dim, None, params, rng)),
                None,
            ),
            (BlockKind::WsaOnly, _) => (
                None,
                Some(AttentionProjections::new(&format!("{prefix}.att"), c, config.key_dim, Some(d), params, rng)),
            ),
            (BlockKind::Full, true) => (
                Some(AttentionProjections::new(&format!("{prefix}.att"), c, config.key_dim, Some(d), params, rng)),
                None,
            ),
            (BlockKind::Full, false) => (
                Some(AttentionProjections::new(&format!("{prefix}.att_sa"), c, config.key_dim, None, params, rng)),
                Some(AttentionProjections::new(&format!("{prefix}.att_wsa"), c, config.key_dim, Some(d), params, rng)),
            ),
        };
        debug_assert!(!needs_words || sa_proj.iter().chain(&wsa_proj).any(|p| p.word_proj.is_some()));
        let gate = (config.kind == BlockKind::Full).then(|| GateParams {
            image: params.add(
                format!("{prefix}.gate_image"),
                orthogonal(c, config.gate_dim, 1.0, rng),
                &[c, config.gate_dim],
            ),
            text: params.add(
                format!("{prefix}.gate_text"),
                orthogonal(d, config.gate_dim, 1.0, rng),
                &[d, config.gate_dim],
            ),
        });
        let gamma = params.add(format!("{prefix}.gamma"), vec![0.0], &[1, 1, 1, 1]);
        Self {
            config,
            sa_proj,
            wsa_proj,
            gate,
            gamma,
        }
    }

    fn wsa_projections(&self) -> &AttentionProjections {
        self.wsa_proj.as_ref().or(self.sa_proj.as_ref()).expect("block has a WSA projection")
    }
}

/// Per-sample record of one branch decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchProbs {
    pub w: f64,
    pub z_sa: f64,
    pub z_wsa: f64,
    pub tau: f64,
    pub p_sa: f64,
    pub p_wsa: f64,
}

#[derive(Debug, Clone)]
pub struct DynamicBlockOutput {
    /// `a + γ · fused`.
    pub output: FeatureMap,
    pub fused: FeatureMap,
    /// Empty for single-branch ablation blocks.
    pub probs: Vec<BranchProbs>,
    /// Hard mode only.
    pub selected: Option<Vec<Branch>>,
    pub h_sa_norm: Vec<f64>,
    pub h_wsa_norm: Vec<f64>,
}

impl DynamicBlockOutput {
    pub fn mean_w(&self) -> Option<f64> {
        (!self.probs.is_empty()).then(|| self.probs.iter().map(|p| p.w).sum::<f64>() / self.probs.len() as f64)
    }

    pub fn mean_p_sa(&self) -> Option<f64> {
        (!self.probs.is_empty()).then(|| self.probs.iter().map(|p| p.p_sa).sum::<f64>() / self.probs.len() as f64)
    }
}

/// Masked mean of word rows, `[N, L, D] → [N, D]`.
pub fn masked_word_mean(s_word: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (n, l) = match *s_word.shape() {
        [n, l, _] if mask.len() == n * l => (n, l),
        _ => return dim_err(format!("words {:?} vs mask of {}", s_word.shape(), mask.len())),
    };
    let counts: Vec<f64> = mask.chunks(l).map(|r| r.iter().filter(|&&m| m).count() as f64).collect();
    if counts.iter().any(|&c| c == 0.0) {
        return contract_err("sentence with no unmasked words");
    }
    let m = Tensor::from_vec(mask.iter().map(|&v| f64::from(u8::from(v))).collect(), &[n, l, 1]);
    let summed = sum_axis(&mul(s_word, &m)?, 1)?;
    div(&summed, &Tensor::from_vec(counts, &[n, 1]))
}

/// `w = sigmoid(⟨ā P_a, b̄ P_b⟩)` per sample, shape `[N]`.
pub fn correlation_gate(a: &FeatureMap, s_word: &Tensor, mask: &[bool], gate: &GateParams) -> Result<Tensor> {
    let a_bar = global_avg_pool(a.tensor())?;
    let b_bar = masked_word_mean(s_word, mask)?;
    let pa = matmul(&a_bar, &gate.image)?;
    let pb = matmul(&b_bar, &gate.text)?;
    Ok(sigmoid(&sum_axis(&mul(&pa, &pb)?, 1)?))
}

/// Standard Gumbel variate from a uniform: `−log(−log u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    -(-u.ln()).ln()
}

pub fn gumbel_sample(rng: &mut SeededRng) -> f64 {
    gumbel_from_uniform(rng.uniform())
}

fn logit_gap(w: f64, z_sa: f64, z_wsa: f64, tau: f64) -> f64 {
    (w.ln() - (1.0 - w).ln() + z_sa - z_wsa) / tau
}

/// Two-branch Gumbel-Softmax, evaluated in log space.
pub fn branch_probs(w: f64, z_sa: f64, z_wsa: f64, tau: f64) -> Result<BranchProbs> {
    if !(w > 0.0 && w < 1.0) {
        return contract_err(format!("gate value {w} outside (0, 1)"));
    }
    if !(tau > 0.0) {
        return contract_err(format!("temperature {tau} must be positive"));
    }
    let gap = logit_gap(w, z_sa, z_wsa, tau);
    Ok(BranchProbs {
        w,
        z_sa,
        z_wsa,
        tau,
        p_sa: crate::tensor::sigmoid_f(gap),
        p_wsa: crate::tensor::sigmoid_f(-gap),
    })
}

/// Differentiable `p_sa` for a batch of gate values `[N]` with frozen noise.
pub fn branch_prob_tensor(w: &Tensor, z_sa: &[f64], z_wsa: &[f64], tau: f64) -> Result<Tensor> {
    let n = w.numel();
    if z_sa.len() != n || z_wsa.len() != n {
        return dim_err(format!("{n} gate values but {} / {} noise draws", z_sa.len(), z_wsa.len()));
    }
    if !(tau > 0.0) {
        return contract_err(format!("temperature {tau} must be positive"));
    }
    let wc = clamp(w, W_CLAMP, 1.0 - W_CLAMP);
    let log_odds = sub(&log(&wc), &log(&add_scalar(&neg(&wc), 1.0)))?;
    let noise: Vec<f64> = z_sa.iter().zip(z_wsa).map(|(a, b)| a - b).collect();
    let gap = add(&log_odds, &Tensor::from_vec(noise, w.shape()))?;
    Ok(sigmoid(&scale(&gap, 1.0 / tau)))
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return contract_err(format!(
            "branch shapes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        ));
    }
    Ok(())
}

/// `p_sa · h_sa + (1 − p_sa) · h_wsa`, with `p_sa: [N]`.
pub fn fuse_soft(p_sa: &Tensor, h_sa: &FeatureMap, h_wsa: &FeatureMap) -> Result<FeatureMap> {
    check_same_shape(h_sa, h_wsa)?;
    let n = h_sa.batch();
    if p_sa.numel() != n {
        return dim_err(format!("{} probabilities for a batch of {n}", p_sa.numel()));
    }
    let p = reshape(p_sa, &[n, 1, 1, 1])?;
    let q = add_scalar(&neg(&p), 1.0);
    FeatureMap::new(add(&mul(&p, h_sa.tensor())?, &mul(&q, h_wsa.tensor())?)?)
}

/// Per sample: `h_sa` iff `p_sa > p_wsa`, otherwise `h_wsa`. The result is a
/// constant (no graph); hard selection is an inference-only path.
pub fn fuse_hard(probs: &[BranchProbs], h_sa: &FeatureMap, h_wsa: &FeatureMap) -> Result<(FeatureMap, Vec<Branch>)> {
    check_same_shape(h_sa, h_wsa)?;
    let n = h_sa.batch();
    if probs.len() != n {
        return dim_err(format!("{} probabilities for a batch of {n}", probs.len()));
    }
    let per = h_sa.tensor().numel() / n;
    let (sa, wsa) = (h_sa.tensor().data(), h_wsa.tensor().data());
    let mut out = Vec::with_capacity(n * per);
    let mut tags = Vec::with_capacity(n);
    for (i, p) in probs.iter().enumerate() {
        let (src, tag) = if p.p_sa > p.p_wsa { (&sa, Branch::SA) } else { (&wsa, Branch::WSA) };
        out.extend_from_slice(&src[i * per..(i + 1) * per]);
        tags.push(tag);
    }
    Ok((FeatureMap::new(Tensor::from_vec(out, h_sa.tensor().shape()))?, tags))
}

fn per_sample_norms(h: &FeatureMap) -> Vec<f64> {
    let per = h.tensor().numel() / h.batch();
    h.tensor().data().chunks(per).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Full block: both branches, gate, probabilities, fusion per `mode`, and the
/// residual `a + γ · fused`. Consumes two uniforms per sample from `rng`
/// (one with shared noise) for full blocks; single-branch blocks draw nothing.
pub fn dynamic_block_forward(
    block: &DynamicBlock,
    a: &FeatureMap,
    s_word: &Tensor,
    mask: &[bool],
    mode: Mode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<DynamicBlockOutput> {
    if a.channels() != block.config.channels {
        return dim_err(format!(
            "block expects {} channels, got {}",
            block.config.channels,
            a.channels()
        ));
    }
    let n = a.batch();
    let (fused, probs, selected, h_sa_norm, h_wsa_norm) = match block.config.kind {
        BlockKind::SaOnly => {
            let h = self_attention(a, block.sa_proj.as_ref().expect("SA projections"))?;
            let norms = per_sample_norms(&h);
            (h, Vec::new(), None, norms, Vec::new())
        }
        BlockKind::WsaOnly => {
            let h = word_spatial_attention(a, s_word, mask, block.wsa_projections())?;
            let norms = per_sample_norms(&h);
            (h, Vec::new(), None, Vec::new(), norms)
        }
        BlockKind::Full => {
            let h_sa = self_attention(a, block.sa_proj.as_ref().expect("SA projections"))?;
            let h_wsa = word_spatial_attention(a, s_word, mask, block.wsa_projections())?;
            let w = match block.config.w_override {
                Some(v) => Tensor::full(&[n], v),
                None => correlation_gate(a, s_word, mask, block.gate.as_ref().expect("gate params"))?,
            };
            let mut z_sa = Vec::with_capacity(n);
            let mut z_wsa = Vec::with_capacity(n);
            for _ in 0..n {
                let zs = gumbel_sample(rng);
                z_sa.push(zs);
                z_wsa.push(if block.config.shared_noise { zs } else { gumbel_sample(rng) });
            }
            if let Some(bad) = w.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("gate value became {bad}")));
            }
            let probs: Vec<BranchProbs> = w
                .data()
                .iter()
                .zip(z_sa.iter().zip(&z_wsa))
                .map(|(&wv, (&zs, &zw))| branch_probs(wv.clamp(W_CLAMP, 1.0 - W_CLAMP), zs, zw, tau))
                .collect::<Result<_>>()?;
            let (na, nb) = (per_sample_norms(&h_sa), per_sample_norms(&h_wsa));
            match mode {
                Mode::Soft => {
                    let p = branch_prob_tensor(&w, &z_sa, &z_wsa, tau)?;
                    (fuse_soft(&p, &h_sa, &h_wsa)?, probs, None, na, nb)
                }
                Mode::Hard => {
                    let (h, tags) = fuse_hard(&probs, &h_sa, &h_wsa)?;
                    (h, probs, Some(tags), na, nb)
                }
            }
        }
    };
    let output = FeatureMap::new(add(a.tensor(), &mul(&block.gamma, fused.tensor())?)?)?;
    Ok(DynamicBlockOutput {
        output,
        fused,
        probs,
        selected,
        h_sa_norm,
        h_wsa_norm,
    })
}

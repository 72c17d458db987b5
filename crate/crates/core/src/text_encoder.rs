//! Bidirectional LSTM sentence encoder and its image–text matching pretraining.
//!
//! Each sentence yields word states `s_word` (`[L, D]`, forward and backward
//! halves concatenated) and a sentence vector `s` (masked mean of the word
//! states by default). Padding is trailing and masked out of the recurrence,
//! so padded positions hold exact zeros and never influence real positions.

use crate::dynamic_block::masked_word_mean;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::init::orthogonal;
use crate::optim::{adam_step, AdamState, ParamSet};
use crate::rng::SeededRng;
use crate::tensor::{
    add, add_scalar, clamp, concat, conv2d, div, embedding, exp, global_avg_pool, leaky_relu, log_softmax, matmul,
    mean_all, mul, narrow, neg, reshape, sigmoid, sqrt, sum_axis, tanh, transpose, Tensor,
};
use crate::vocab::{Vocabulary, PAD_ID};

/// Token ids of one sentence, optionally followed by trailing padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    len: usize,
}

impl TokenSeq {
    /// Trailing [`PAD_ID`]s are padding; a pad id before a real token is rejected.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let len = ids.iter().rposition(|&i| i != PAD_ID).map_or(0, |p| p + 1);
        if ids[..len].contains(&PAD_ID) {
            return Err(Error::Vocabulary("padding id inside a sentence".into()));
        }
        Ok(Self { ids, len })
    }

    pub fn from_words(vocab: &Vocabulary, words: &[&str]) -> Result<Self> {
        Self::new(vocab.encode(words))
    }

    /// Unpadded ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Ids padded to exactly `l` positions.
    pub fn padded(&self, l: usize) -> Result<Vec<usize>> {
        if self.len > l {
            return contract_err(format!("sentence of {} tokens exceeds maximum length {l}", self.len));
        }
        let mut ids = self.ids().to_vec();
        ids.resize(l, PAD_ID);
        Ok(ids)
    }

    pub fn mask(&self, l: usize) -> Vec<bool> {
        (0..l).map(|i| i < self.len).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    /// Final forward state concatenated with the backward state at position 0.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Sentence/word dimension `D`; each direction carries `D / 2`.
    pub dim: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    /// Backward direction reuses the forward cell (testing hook).
    pub tied_directions: bool,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            dim: 64,
            max_len: 16,
            pooling: Pooling::Mean,
            tied_directions: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    /// `[E, 4H]`, gate order input, forget, cell, output.
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    fn new(prefix: &str, input: usize, hidden: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_input: params.add(
                format!("{prefix}.w_input"),
                orthogonal(input, 4 * hidden, 1.0, rng),
                &[input, 4 * hidden],
            ),
            w_hidden: params.add(
                format!("{prefix}.w_hidden"),
                orthogonal(hidden, 4 * hidden, 1.0, rng),
                &[hidden, 4 * hidden],
            ),
            bias: params.add(format!("{prefix}.bias"), bias, &[1, 4 * hidden]),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    /// One masked step: rows with `keep = 0` carry their previous state.
    fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor, keep: &Tensor, hold: &Tensor) -> Result<(Tensor, Tensor)> {
        let hd = self.hidden();
        let gates = add(&add(&matmul(x, &self.w_input)?, &matmul(h, &self.w_hidden)?)?, &self.bias)?;
        let i = sigmoid(&narrow(&gates, 1, 0, hd)?);
        let f = sigmoid(&narrow(&gates, 1, hd, hd)?);
        let g = tanh(&narrow(&gates, 1, 2 * hd, hd)?);
        let o = sigmoid(&narrow(&gates, 1, 3 * hd, hd)?);
        let c_new = add(&mul(&f, c)?, &mul(&i, &g)?)?;
        let h_new = mul(&o, &tanh(&c_new))?;
        let c_out = add(&mul(&c_new, keep)?, &mul(c, hold)?)?;
        let h_out = add(&mul(&h_new, keep)?, &mul(h, hold)?)?;
        Ok((h_out, c_out))
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Encodings of a batch of sentences.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// Sentence vectors `[B, D]`.
    pub s: Tensor,
    /// Word states `[B, L, D]`, zero at padded positions.
    pub words: Tensor,
    /// `B·L` flags, true for real tokens.
    pub mask: Vec<bool>,
}

impl TextEncoding {
    pub fn batch(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn max_len(&self) -> usize {
        self.words.shape()[1]
    }

    /// Constant copy without graph history.
    pub fn detach(&self) -> Self {
        Self {
            s: self.s.detach(),
            words: self.words.detach(),
            mask: self.mask.clone(),
        }
    }

    /// Constant encoding made of the listed rows.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let (b, l, d) = (self.batch(), self.max_len(), self.dim());
        if let Some(&r) = rows.iter().find(|&&r| r >= b) {
            return dim_err(format!("row {r} outside batch of {b}"));
        }
        let (s, w) = (self.s.data(), self.words.data());
        let mut sd = Vec::with_capacity(rows.len() * d);
        let mut wd = Vec::with_capacity(rows.len() * l * d);
        let mut mask = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            sd.extend_from_slice(&s[r * d..(r + 1) * d]);
            wd.extend_from_slice(&w[r * l * d..(r + 1) * l * d]);
            mask.extend_from_slice(&self.mask[r * l..(r + 1) * l]);
        }
        Ok(Self {
            s: Tensor::new(sd, &[rows.len(), d])?,
            words: Tensor::new(wd, &[rows.len(), l, d])?,
            mask,
        })
    }

    /// Concatenates constant encodings along the batch axis.
    pub fn stack(parts: &[TextEncoding]) -> Result<Self> {
        if parts.is_empty() {
            return dim_err("no encodings to stack");
        }
        let s = concat(&parts.iter().map(|p| p.s.detach()).collect::<Vec<_>>(), 0)?;
        let words = concat(&parts.iter().map(|p| p.words.detach()).collect::<Vec<_>>(), 0)?;
        let mask = parts.iter().flat_map(|p| p.mask.iter().copied()).collect();
        Ok(Self { s, words, mask })
    }
}

impl TextEncoder {
    pub fn new(prefix: &str, config: EncoderConfig, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        if config.dim % 2 != 0 || config.dim == 0 {
            return Err(Error::Config(format!("text dimension must be even and positive, got {}", config.dim)));
        }
        if config.vocab_size < 3 || config.max_len == 0 || config.embed_dim == 0 {
            return Err(Error::Config("encoder needs a vocabulary, a length and an embedding size".into()));
        }
        let hidden = config.dim / 2;
        let table: Vec<f64> = rng.normal_vec(config.vocab_size * config.embed_dim).into_iter().map(|v| 0.5 * v).collect();
        let embedding = params.add(format!("{prefix}.embedding"), table, &[config.vocab_size, config.embed_dim]);
        let forward = LstmCell::new(&format!("{prefix}.fwd"), config.embed_dim, hidden, params, rng);
        let backward = if config.tied_directions {
            forward.clone()
        } else {
            LstmCell::new(&format!("{prefix}.bwd"), config.embed_dim, hidden, params, rng)
        };
        Ok(Self {
            config,
            embedding,
            forward,
            backward,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Encodes a batch of sentences padded to `max_len`.
    pub fn encode(&self, seqs: &[TokenSeq]) -> Result<TextEncoding> {
        let (l, hd) = (self.config.max_len, self.config.dim / 2);
        let b = seqs.len();
        if b == 0 {
            return contract_err("no sentences to encode");
        }
        let mut ids = Vec::with_capacity(b * l);
        for s in seqs {
            if s.is_empty() {
                return contract_err("empty sentence");
            }
            if let Some(&bad) = s.ids().iter().find(|&&i| i >= self.config.vocab_size) {
                return Err(Error::Vocabulary(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids.extend(s.padded(l)?);
        }
        let mask: Vec<bool> = seqs.iter().flat_map(|s| s.mask(l)).collect();
        let lens: Vec<usize> = seqs.iter().map(TokenSeq::len).collect();
        let longest = lens.iter().copied().max().unwrap_or(0);
        let column = |t: usize| -> Vec<usize> { (0..b).map(|r| ids[r * l + t]).collect() };
        let gates = |t: usize| -> (Tensor, Tensor) {
            let keep: Vec<f64> = lens.iter().map(|&n| if t < n { 1.0 } else { 0.0 }).collect();
            let hold = keep.iter().map(|k| 1.0 - k).collect();
            (Tensor::from_vec(keep, &[b, 1]), Tensor::from_vec(hold, &[b, 1]))
        };

        let zero = Tensor::zeros(&[b, hd]);
        let mut fwd_out = vec![zero.clone(); l];
        let mut bwd_out = vec![zero.clone(); l];
        let (mut h, mut c) = (zero.clone(), zero.clone());
        for t in 0..longest {
            let x = embedding(&self.embedding, &column(t))?;
            let (keep, hold) = gates(t);
            (h, c) = self.forward.step(&x, &h, &c, &keep, &hold)?;
            fwd_out[t] = mul(&h, &keep)?;
        }
        let last_forward = h;
        let (mut h, mut c) = (zero.clone(), zero);
        for t in (0..longest).rev() {
            let x = embedding(&self.embedding, &column(t))?;
            let (keep, hold) = gates(t);
            (h, c) = self.backward.step(&x, &h, &c, &keep, &hold)?;
            bwd_out[t] = mul(&h, &keep)?;
        }
        let first_backward = h;

        let cols: Vec<Tensor> = fwd_out
            .iter()
            .zip(&bwd_out)
            .map(|(f, bw)| reshape(&concat(&[f.clone(), bw.clone()], 1)?, &[b, 1, 2 * hd]))
            .collect::<Result<_>>()?;
        let words = concat(&cols, 1)?;
        let s = match self.config.pooling {
            Pooling::Mean => masked_word_mean(&words, &mask)?,
            Pooling::Last => concat(&[last_forward, first_backward], 1)?,
        };
        Ok(TextEncoding { s, words, mask })
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return dim_err(format!("cosine of vectors of length {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return contract_err("cosine similarity of a zero vector");
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Strided conv encoder mapping images to the text space (four stride-2 layers).
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub convs: Vec<(Tensor, Tensor)>,
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl ImageEncoder {
    pub const CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];

    pub fn new(prefix: &str, dim: usize, params: &mut ParamSet, rng: &mut SeededRng) -> Self {
        let ch = Self::CHANNELS;
        let convs = (0..4)
            .map(|i| {
                let (ci, co) = (ch[i], ch[i + 1]);
                (
                    params.add(
                        format!("{prefix}.conv{i}.weight"),
                        orthogonal(co, ci * 9, 2f64.sqrt(), rng),
                        &[co, ci, 3, 3],
                    ),
                    params.add(format!("{prefix}.conv{i}.bias"), vec![0.0; co], &[co]),
                )
            })
            .collect();
        Self {
            convs,
            head: params.add(format!("{prefix}.head"), orthogonal(ch[4], dim, 1.0, rng), &[ch[4], dim]),
            head_bias: params.add(format!("{prefix}.head_bias"), vec![0.0; dim], &[1, dim]),
        }
    }

    /// `[N, 3, S, S] → [N, D]`; `S` must be at least 16.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for (w, b) in &self.convs {
            x = leaky_relu(&conv2d(&x, w, Some(b), 2, 1)?, 0.2);
        }
        add(&matmul(&global_avg_pool(&x)?, &self.head)?, &self.head_bias)
    }
}

/// Joint text/image embedding model trained by in-batch matching.
#[derive(Debug, Clone)]
pub struct MatchingModel {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Log of the logit scale (inverse temperature).
    pub log_scale: Tensor,
}

/// Upper bound on the learnable logit scale.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl MatchingModel {
    pub fn new(config: EncoderConfig, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        let text = TextEncoder::new("enc", config, params, rng)?;
        let image = ImageEncoder::new("img_enc", text.dim(), params, rng);
        let log_scale = params.add("match.log_scale", vec![10f64.ln()], &[1]);
        Ok(Self { text, image, log_scale })
    }
}

/// Row-wise L2 normalization of `[B, D]`.
fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let norm = sqrt(&add_scalar(&sum_axis(&mul(x, x)?, 1)?, 1e-12));
    div(x, &reshape(&norm, &[b, 1])?)
}

fn diagonal_cross_entropy(logits: &Tensor) -> Result<Tensor> {
    let b = logits.shape()[0];
    let eye: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { 1.0 } else { 0.0 }).collect();
    let picked = sum_axis(&mul(&log_softmax(logits, 1)?, &Tensor::from_vec(eye, &[b, b]))?, 1)?;
    Ok(neg(&mean_all(&picked)))
}

/// Per-direction contrastive losses `(text→image, image→text)` over cosine logits.
pub fn matching_losses(text: &Tensor, image: &Tensor, log_scale: &Tensor) -> Result<(Tensor, Tensor)> {
    let b = text.shape()[0];
    if b < 2 {
        return contract_err(format!("matching needs at least 2 pairs per batch, got {b}"));
    }
    if image.shape() != text.shape() {
        return dim_err(format!("text {:?} vs image {:?} embeddings", text.shape(), image.shape()));
    }
    let cos = matmul(&normalize_rows(text)?, &transpose(&normalize_rows(image)?)?)?;
    let scale = reshape(&exp(&clamp(log_scale, f64::NEG_INFINITY, MAX_LOGIT_SCALE.ln())), &[1, 1])?;
    let logits = mul(&cos, &scale)?;
    Ok((diagonal_cross_entropy(&logits)?, diagonal_cross_entropy(&transpose(&logits)?)?))
}

/// Symmetric loss: the average of both directions.
pub fn matching_loss(text: &Tensor, image: &Tensor, log_scale: &Tensor) -> Result<Tensor> {
    let (t2i, i2t) = matching_losses(text, image, log_scale)?;
    Ok(crate::tensor::scale(&add(&t2i, &i2t)?, 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Trains `model` on `(sentence, image)` pairs; returns the loss per step.
/// Batches are drawn without replacement within each pass over the pairs.
pub fn pretrain_matching(
    model: &MatchingModel,
    params: &ParamSet,
    pairs: &[(TokenSeq, Image)],
    config: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if config.batch < 2 {
        return contract_err(format!("matching needs a batch of at least 2, got {}", config.batch));
    }
    if pairs.len() < config.batch {
        return contract_err(format!("{} pairs cannot fill a batch of {}", pairs.len(), config.batch));
    }
    let mut adam = AdamState::new(params, config.lr, config.beta1, config.beta2);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        if order.len() < config.batch {
            order = (0..pairs.len()).collect();
            rng.shuffle(&mut order);
        }
        let idx: Vec<usize> = order.split_off(order.len() - config.batch);
        let seqs: Vec<TokenSeq> = idx.iter().map(|&i| pairs[i].0.clone()).collect();
        let imgs: Vec<&Image> = idx.iter().map(|&i| &pairs[i].1).collect();
        let text = model.text.encode(&seqs)?.s;
        let image = model.image.embed(&images_to_tensor(&imgs)?)?;
        let loss = matching_loss(&text, &image, &model.log_scale)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("matching loss became {v}")));
        }
        params.zero_grad();
        loss.backward()?;
        adam_step(params, &mut adam)?;
        losses.push(v);
    }
    Ok(losses)
}

/// Embeds pairs in chunks without recording a graph; returns `(text, image)` rows.
pub fn embed_pairs(model: &MatchingModel, pairs: &[(TokenSeq, Image)]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    crate::tensor::no_grad(|| {
        let mut texts = Vec::with_capacity(pairs.len());
        let mut images = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let seqs: Vec<TokenSeq> = chunk.iter().map(|p| p.0.clone()).collect();
            let imgs: Vec<&Image> = chunk.iter().map(|p| &p.1).collect();
            let t = model.text.encode(&seqs)?.s;
            let i = model.image.embed(&images_to_tensor(&imgs)?)?;
            let d = t.shape()[1];
            texts.extend(t.data().chunks(d).map(<[f64]>::to_vec));
            images.extend(i.data().chunks(d).map(<[f64]>::to_vec));
        }
        Ok((texts, images))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingMargin {
    pub matched: f64,
    pub mismatched: f64,
}

impl MatchingMargin {
    pub fn margin(&self) -> f64 {
        self.matched - self.mismatched
    }
}

/// Mean cosine of matched pairs vs pairs whose image is rolled by `shift`.
pub fn matching_margin(model: &MatchingModel, pairs: &[(TokenSeq, Image)], shift: usize) -> Result<MatchingMargin> {
    let n = pairs.len();
    if n < 2 || shift % n == 0 {
        return contract_err("margin needs at least two pairs and a non-trivial shift");
    }
    let (texts, images) = embed_pairs(model, pairs)?;
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    for i in 0..n {
        matched += cosine_similarity(&texts[i], &images[i])?;
        mismatched += cosine_similarity(&texts[i], &images[(i + shift) % n])?;
    }
    Ok(MatchingMargin {
        matched: matched / n as f64,
        mismatched: mismatched / n as f64,
    })
}

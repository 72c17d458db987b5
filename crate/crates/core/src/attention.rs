//! Self-attention (SA) and word-level spatial attention (WSA).
//!
//! Both modes compute `β = softmax(query(a) · key(b)ᵀ)` and `h = β · value(b)`
//! over a batch. For SA the key set `b` is the feature map itself; for WSA it
//! is the sentence's word embeddings, first lifted into feature channels by a
//! word projection so that one set of query/key/value maps serves both modes.

use crate::error::{contract_err, dim_err, Result};
use crate::init::orthogonal;
use crate::optim::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::{add, bmm, matmul, permute, reshape, softmax, Tensor};

/// Logit added to padded word positions before the softmax.
pub const MASK_LOGIT: f64 = -1e9;

/// Batch of feature maps, `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return dim_err(format!("feature map must be [N, C, H, W], got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// `[N, H·W, C]` view for attention.
    pub fn flatten(&self) -> Result<Tensor> {
        let (n, c, hw) = (self.batch(), self.channels(), self.height() * self.width());
        permute(&reshape(&self.0, &[n, c, hw])?, &[0, 2, 1])
    }

    /// Inverse of [`FeatureMap::flatten`].
    pub fn from_flat(flat: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, hw, c) = match *flat.shape() {
            [n, hw, c] if hw == h * w => (n, hw, c),
            _ => return dim_err(format!("flat map {:?} does not match {h}x{w}", flat.shape())),
        };
        let t = reshape(&permute(flat, &[0, 2, 1])?, &[n, c, h, w])?;
        debug_assert_eq!(t.numel(), n * hw * c);
        Self::new(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOrigin {
    SelfFeatures,
    Words,
}

/// Keys/values source `b`: `[N, M, D_b]` rows plus an optional validity mask
/// (row-major `N × M`, `true` = attendable).
#[derive(Debug, Clone)]
pub struct KeySet {
    rows: Tensor,
    mask: Option<Vec<bool>>,
    origin: KeyOrigin,
}

impl KeySet {
    pub fn from_features(a: &FeatureMap) -> Result<Self> {
        Ok(Self {
            rows: a.flatten()?,
            mask: None,
            origin: KeyOrigin::SelfFeatures,
        })
    }

    /// Word embeddings `[N, L, D]` with a padding mask of length `N·L`.
    pub fn words(s_word: &Tensor, mask: &[bool]) -> Result<Self> {
        let (n, l) = match *s_word.shape() {
            [n, l, _] => (n, l),
            _ => return dim_err(format!("word embeddings must be [N, L, D], got {:?}", s_word.shape())),
        };
        if mask.len() != n * l {
            return dim_err(format!("mask has {} entries, expected {}", mask.len(), n * l));
        }
        Ok(Self {
            rows: s_word.clone(),
            mask: Some(mask.to_vec()),
            origin: KeyOrigin::Words,
        })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn origin(&self) -> KeyOrigin {
        self.origin
    }

    pub fn count(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[2]
    }
}

/// Query/key/value maps shared by the SA and WSA paths of one block.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// Lifts `D`-dimensional words into `C` feature channels (WSA only).
    pub word_proj: Option<Tensor>,
}

impl AttentionProjections {
    pub fn new(
        prefix: &str,
        channels: usize,
        key_dim: usize,
        text_dim: Option<usize>,
        params: &mut ParamSet,
        rng: &mut SeededRng,
    ) -> Self {
        let query = params.add(
            format!("{prefix}.query"),
            orthogonal(channels, key_dim, 1.0, rng),
            &[channels, key_dim],
        );
        let key = params.add(
            format!("{prefix}.key"),
            orthogonal(channels, key_dim, 1.0, rng),
            &[channels, key_dim],
        );
        let value = params.add(
            format!("{prefix}.value"),
            orthogonal(channels, channels, 1.0, rng),
            &[channels, channels],
        );
        let word_proj = text_dim.map(|d| {
            params.add(
                format!("{prefix}.word_proj"),
                orthogonal(d, channels, 1.0, rng),
                &[d, channels],
            )
        });
        Self {
            query,
            key,
            value,
            word_proj,
        }
    }

    pub fn channels(&self) -> usize {
        self.value.shape()[1]
    }

    /// Rows of `b` expressed in feature channels, `[N, M, C]`.
    fn lifted(&self, b: &KeySet) -> Result<Tensor> {
        match b.origin {
            KeyOrigin::SelfFeatures => Ok(b.rows.clone()),
            KeyOrigin::Words => {
                let Some(wp) = &self.word_proj else {
                    return contract_err("word-level attention needs a word projection");
                };
                let (n, m, d) = (b.rows.shape()[0], b.count(), b.dim());
                if wp.shape()[0] != d {
                    return contract_err(format!(
                        "word projection expects {}-d words, got {d}-d",
                        wp.shape()[0]
                    ));
                }
                reshape(&matmul(&reshape(&b.rows, &[n * m, d])?, wp)?, &[n, m, self.channels()])
            }
        }
    }
}

fn project_rows(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, m, d) = match *x.shape() {
        [n, m, d] => (n, m, d),
        _ => return dim_err(format!("expected [N, M, D] rows, got {:?}", x.shape())),
    };
    if w.shape()[0] != d {
        return contract_err(format!("projection {:?} cannot map {d}-d rows", w.shape()));
    }
    reshape(&matmul(&reshape(x, &[n * m, d])?, w)?, &[n, m, w.shape()[1]])
}

/// `β = softmax(query(a) · key(b)ᵀ)`, shape `[N, H·W, M]`; masked keys get
/// exactly zero weight.
pub fn attention_weights(a: &FeatureMap, b: &KeySet, proj: &AttentionProjections) -> Result<Tensor> {
    if b.rows.shape()[0] != a.batch() {
        return dim_err(format!("batch mismatch: features {} vs keys {}", a.batch(), b.rows.shape()[0]));
    }
    let q = project_rows(&a.flatten()?, &proj.query)?;
    let k = project_rows(&proj.lifted(b)?, &proj.key)?;
    if q.shape()[2] != k.shape()[2] {
        return contract_err(format!(
            "query dim {} != key dim {}",
            q.shape()[2],
            k.shape()[2]
        ));
    }
    let scores = bmm(&q, &permute(&k, &[0, 2, 1])?)?;
    let scores = match &b.mask {
        None => scores,
        Some(mask) => {
            let m = b.count();
            if mask.chunks(m).any(|row| row.iter().all(|&v| !v)) {
                return contract_err("every word position is masked: empty attention support");
            }
            let bias: Vec<f64> = mask.iter().map(|&v| if v { 0.0 } else { MASK_LOGIT }).collect();
            add(&scores, &Tensor::from_vec(bias, &[a.batch(), 1, m]))?
        }
    };
    softmax(&scores, 2)
}

/// `h = β · value(b)` reshaped back to `[N, C, H, W]`.
pub fn attend(beta: &Tensor, b: &KeySet, proj: &AttentionProjections, h: usize, w: usize) -> Result<FeatureMap> {
    let (n, hw, m) = match *beta.shape() {
        [n, hw, m] if hw == h * w && m == b.count() && n == b.rows.shape()[0] => (n, hw, m),
        _ => {
            return contract_err(format!(
                "attention weights {:?} incompatible with {h}x{w} map and {} keys",
                beta.shape(),
                b.count()
            ))
        }
    };
    {
        let bd = beta.data();
        if let Some(row) = bd.chunks(m).find(|r| (r.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
            return contract_err(format!("attention row sums to {}, not 1", row.iter().sum::<f64>()));
        }
    }
    debug_assert_eq!(n * hw * m, beta.numel());
    let values = project_rows(&proj.lifted(b)?, &proj.value)?;
    FeatureMap::from_flat(&bmm(beta, &values)?, h, w)
}

/// SA over the spatial positions of `a`; output has the shape of `a`.
pub fn self_attention(a: &FeatureMap, proj: &AttentionProjections) -> Result<FeatureMap> {
    let b = KeySet::from_features(a)?;
    let beta = attention_weights(a, &b, proj)?;
    attend(&beta, &b, proj, a.height(), a.width())
}

/// WSA of every spatial position over the unmasked words of its sentence.
pub fn word_spatial_attention(
    a: &FeatureMap,
    s_word: &Tensor,
    mask: &[bool],
    proj: &AttentionProjections,
) -> Result<FeatureMap> {
    let b = KeySet::words(s_word, mask)?;
    let beta = attention_weights(a, &b, proj)?;
    attend(&beta, &b, proj, a.height(), a.width())
}

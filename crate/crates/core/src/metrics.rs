//! FID, FSD and Cosine evaluation.
//!
//! Embeddings come from fixed random-weight conv extractors (an image stack and
//! a (2+1)-D sequence stack), so scores are only comparable within this crate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::image::{images_to_tensor, Image};
use crate::rng::SeededRng;
use crate::tensor::{conv2d, global_avg_pool, mean_axis, no_grad, relu, reshape, Tensor};
use crate::text_encoder::{cosine_similarity, embed_pairs, MatchingModel, TokenSeq};

pub const FEATURE_DIM: usize = 64;
pub const EXTRACTOR_SEED: u64 = 0x00F1_D5EE_D000_0064;
pub const MIN_SAMPLES_PER_DIM: usize = 5;
pub const CAVEAT: &str = "FID and FSD use fixed random-weight extractors instead of pretrained Inception \
and R(2+1)D backbones, on a procedural dataset at 32x32; values are only comparable between runs of this \
tool, not with published numbers.";

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `d × d`.
    pub sigma: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return contract_err(format!("need at least 2 samples for covariance, got {n}"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return dim_err("feature rows must share a positive dimension");
    }
    let mut mu = vec![0.0; d];
    for r in rows {
        mu.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in rows {
        centered.iter_mut().zip(r.iter().zip(&mu)).for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                sigma[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / (n - 1) as f64;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, count: n })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues and row-major eigenvectors stored column-wise.
pub fn symmetric_eigen(m: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; d * d];
    (0..d).for_each(|i| v[i * d + i] = 1.0);
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Symmetric tolerance relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-10;
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-8;

/// `Q diag(√λ) Qᵀ` with negative eigenvalues clamped to zero.
pub fn matrix_sqrt_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    if m.len() != d * d {
        return dim_err(format!("{} values for a {d}x{d} matrix", m.len()));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..d {
        for j in i + 1..d {
            if (m[i * d + j] - m[j * d + i]).abs() > SYMMETRY_TOL * scale {
                return contract_err(format!("matrix not symmetric at ({i}, {j})"));
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(m, d);
    if let Some(bad) = vals.iter().find(|&&l| l < -NEGATIVE_EIGEN_TOL * scale) {
        return contract_err(format!("matrix has eigenvalue {bad}, not positive semidefinite"));
    }
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    Ok(out)
}

pub fn matmul_square(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// `‖μp − μq‖² + tr Σp + tr Σq − 2 tr (Σp^½ Σq Σp^½)^½`, clamped at zero.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return dim_err(format!("Frechet distance between {d}-d and {}-d statistics", q.dim()));
    }
    let mean_term: f64 = p.mu.iter().zip(&q.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let sp = matrix_sqrt_psd(&p.sigma, d)?;
    let mut inner = matmul_square(&matmul_square(&sp, &q.sigma, d), &sp, d);
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let cross = trace(&matrix_sqrt_psd(&inner, d)?);
    Ok((mean_term + trace(&p.sigma) + trace(&q.sigma) - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorKind {
    Image,
    Sequence,
}

/// Plain weights so extraction can fan out across threads.
#[derive(Debug, Clone)]
struct FixedConv {
    weight: Vec<f64>,
    shape: [usize; 4],
    stride: usize,
}

impl FixedConv {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut SeededRng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            weight: rng.normal_vec(cout * cin * k * k).into_iter().map(|v| v * std).collect(),
            shape: [cout, cin, k, k],
            stride,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let w = Tensor::new(self.weight.clone(), &self.shape)?;
        Ok(relu(&conv2d(x, &w, None, self.stride, self.shape[2] / 2)?))
    }
}

/// Fixed random-weight embedding network, never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub seed: u64,
    spatial: Vec<FixedConv>,
    /// Sequence only: 1×1 conv over `[t−1, t, t+1]` channel stacks, then one more spatial conv.
    temporal: Option<(FixedConv, FixedConv)>,
}

impl FeatureExtractor {
    pub fn image(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).stream(10);
        Self {
            kind: ExtractorKind::Image,
            seed,
            spatial: vec![
                FixedConv::new(3, 16, 3, 2, &mut rng),
                FixedConv::new(16, 32, 3, 2, &mut rng),
                FixedConv::new(32, FEATURE_DIM, 3, 2, &mut rng),
            ],
            temporal: None,
        }
    }

    pub fn sequence(seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).stream(11);
        Self {
            kind: ExtractorKind::Sequence,
            seed,
            spatial: vec![FixedConv::new(3, 16, 3, 2, &mut rng), FixedConv::new(16, 32, 3, 2, &mut rng)],
            temporal: Some((
                FixedConv::new(3 * 32, FEATURE_DIM, 1, 1, &mut rng),
                FixedConv::new(FEATURE_DIM, FEATURE_DIM, 3, 2, &mut rng),
            )),
        }
    }

    fn spatial(&self, x: &Tensor) -> Result<Tensor> {
        self.spatial.iter().try_fold(x.clone(), |x, c| c.apply(&x))
    }

    /// `[N, 3, S, S] → N × 64`.
    fn embed_image_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let f = global_avg_pool(&self.spatial(&images_to_tensor(images)?)?)?;
        let rows = f.data().chunks(FEATURE_DIM).map(<[f64]>::to_vec).collect();
        Ok(rows)
    }

    /// One 64-d vector per story of `n` frames.
    fn embed_story_batch(&self, stories: &[&[Image]]) -> Result<Vec<Vec<f64>>> {
        let (temporal, tail) = self.temporal.as_ref().expect("sequence extractor");
        let n = stories[0].len();
        let b = stories.len();
        let frames: Vec<&Image> = stories.iter().flat_map(|s| s.iter()).collect();
        let f = self.spatial(&images_to_tensor(&frames)?)?;
        let (c, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
        let per = c * h * w;
        let fd = f.to_vec();
        let zero = vec![0.0; per];
        let mut stacked = Vec::with_capacity(b * n * 3 * per);
        for s in 0..b {
            for t in 0..n {
                let frame = |k: isize| -> &[f64] {
                    if k < 0 || k >= n as isize {
                        &zero
                    } else {
                        let i = s * n + k as usize;
                        &fd[i * per..(i + 1) * per]
                    }
                };
                for k in [t as isize - 1, t as isize, t as isize + 1] {
                    stacked.extend_from_slice(frame(k));
                }
            }
        }
        let x = Tensor::new(stacked, &[b * n, 3 * c, h, w])?;
        let y = global_avg_pool(&tail.apply(&temporal.apply(&x)?)?)?;
        let per_story = mean_axis(&reshape(&y, &[b, n, FEATURE_DIM])?, 1)?;
        let rows = per_story.data().chunks(FEATURE_DIM).map(<[f64]>::to_vec).collect();
        Ok(rows)
    }

    pub fn embed_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        if self.kind != ExtractorKind::Image {
            return contract_err("sequence extractor cannot embed single images");
        }
        let chunks: Vec<Vec<Vec<f64>>> = images
            .par_chunks(32)
            .map(|c| no_grad(|| self.embed_image_batch(&c.iter().collect::<Vec<_>>())))
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    pub fn embed_stories(&self, stories: &[Vec<Image>]) -> Result<Vec<Vec<f64>>> {
        if self.kind != ExtractorKind::Sequence {
            return contract_err("image extractor cannot embed sequences");
        }
        let Some(first) = stories.first() else {
            return Ok(Vec::new());
        };
        if first.is_empty() || stories.iter().any(|s| s.len() != first.len()) {
            return contract_err("stories must all have the same positive number of frames");
        }
        let chunks: Vec<Vec<Vec<f64>>> = stories
            .par_chunks(8)
            .map(|c| no_grad(|| self.embed_story_batch(&c.iter().map(Vec::as_slice).collect::<Vec<_>>())))
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }
}

pub fn fid(real: &[Image], fake: &[Image], extractor: &FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return contract_err("FID needs at least 2 images per side");
    }
    let p = gaussian_stats(&extractor.embed_images(real)?)?;
    let q = gaussian_stats(&extractor.embed_images(fake)?)?;
    frechet_distance(&p, &q)
}

pub fn fsd(real: &[Vec<Image>], fake: &[Vec<Image>], extractor: &FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return contract_err("FSD needs at least 2 stories per side");
    }
    if real[0].len() != fake[0].len() {
        return contract_err(format!("stories of {} and {} frames", real[0].len(), fake[0].len()));
    }
    let p = gaussian_stats(&extractor.embed_stories(real)?)?;
    let q = gaussian_stats(&extractor.embed_stories(fake)?)?;
    frechet_distance(&p, &q)
}

/// `100 ×` mean cosine between each sentence and its paired image in the
/// matching model's joint space.
pub fn cosine_metric(model: &MatchingModel, sentences: &[TokenSeq], images: &[Image]) -> Result<f64> {
    if sentences.len() != images.len() || sentences.is_empty() {
        return dim_err(format!("{} sentences for {} images", sentences.len(), images.len()));
    }
    let pairs: Vec<(TokenSeq, Image)> = sentences.iter().cloned().zip(images.iter().cloned()).collect();
    let (t, i) = embed_pairs(model, &pairs)?;
    let total = t.iter().zip(&i).map(|(a, b)| cosine_similarity(a, b)).sum::<Result<f64>>()?;
    Ok(100.0 * total / t.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub fsd: f64,
    pub cosine: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor_seed: u64,
    pub caveat: String,
    /// Set when a side has fewer than `5 · 64` samples.
    pub warning: Option<String>,
}

pub fn sample_warning(n_real: usize, n_fake: usize) -> Option<String> {
    let need = MIN_SAMPLES_PER_DIM * FEATURE_DIM;
    (n_real.min(n_fake) < need).then(|| {
        format!("only {} samples on the smaller side; covariance estimates in {FEATURE_DIM}-d want at least {need}", n_real.min(n_fake))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(a: &[f64]) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mu: vec![mu],
            sigma: vec![var],
            count: 2,
        }
    }

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mu, vec![1.0, 0.0]);
        assert_eq!(s.sigma, vec![2.0, 0.0, 0.0, 0.0]);
        let same = gaussian_stats(&vec![vec![1.0, 3.0]; 4]).unwrap();
        assert!(same.sigma.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn monte_carlo_covariance() {
        let mut rng = SeededRng::new(1);
        let sd = [1.0, 2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..100_000).map(|_| sd.iter().map(|s| s * rng.normal()).collect()).collect();
        let st = gaussian_stats(&rows).unwrap();
        for i in 0..3 {
            assert!((st.sigma[i * 3 + i] / (sd[i] * sd[i]) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(matrix_sqrt_psd(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let r = matrix_sqrt_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-14 && (r[3] - 3.0).abs() < 1e-14 && r[1] == 0.0);
        assert!(matrix_sqrt_psd(&[1.0, 0.5, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        let mut rng = SeededRng::new(2);
        let d = 8;
        let b = rng.normal_vec(d * d);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            }
        }
        let r = matrix_sqrt_psd(&a, d).unwrap();
        let back = matmul_square(&r, &r, d);
        let diff: Vec<f64> = back.iter().zip(&a).map(|(x, y)| x - y).collect();
        assert!(frob(&diff) / frob(&a) < 1e-8);
    }

    #[test]
    fn frechet_closed_forms() {
        assert_eq!(frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 1.0)).unwrap(), 0.0);
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&stats_1d(0.0, 4.0), &stats_1d(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let two = GaussianStats {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 0.0, 0.0, 1.0],
            count: 2,
        };
        assert!(frechet_distance(&stats_1d(0.0, 1.0), &two).is_err());
    }

    fn some_images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| Image::new(16, (0..3 * 256).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let imgs = some_images(20, 3);
        let ex = FeatureExtractor::image(EXTRACTOR_SEED);
        assert!(fid(&imgs, &imgs, &ex).unwrap().abs() < 1e-6);
        let shifted: Vec<Image> = imgs
            .iter()
            .map(|i| Image::new(16, i.data().iter().map(|v| (v + 0.3).min(1.0)).collect()).unwrap())
            .collect();
        assert!(fid(&imgs, &shifted, &ex).unwrap() > 0.0);
    }

    #[test]
    fn fsd_rejects_mixed_lengths_and_wrong_extractor() {
        let imgs = some_images(6, 4);
        let a = vec![imgs[..3].to_vec(), imgs[3..].to_vec()];
        let b = vec![imgs[..2].to_vec(), imgs[2..4].to_vec()];
        let ex = FeatureExtractor::sequence(EXTRACTOR_SEED);
        assert!(fsd(&a, &b, &ex).is_err());
        assert!(fsd(&a, &a, &ex).unwrap().abs() < 1e-6);
        assert!(FeatureExtractor::image(1).embed_stories(&a).is_err());
    }

    #[test]
    fn extractors_are_reproducible() {
        let imgs = some_images(3, 5);
        let a = FeatureExtractor::image(EXTRACTOR_SEED).embed_images(&imgs).unwrap();
        let b = FeatureExtractor::image(EXTRACTOR_SEED).embed_images(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), FEATURE_DIM);
    }

    #[test]
    fn warning_threshold() {
        assert!(sample_warning(319, 1000).is_some());
        assert!(sample_warning(320, 320).is_none());
    }
}

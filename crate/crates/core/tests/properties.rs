//! Randomised invariants.

use proptest::prelude::*;

use storyviz::attention::{attention_weights, AttentionProjections, FeatureMap, KeySet};
use storyviz::checkpoint::Checkpoint;
use storyviz::config::RunConfig;
use storyviz::dynamic_block::branch_probs;
use storyviz::image::Image;
use storyviz::metrics::{frechet_distance, gaussian_stats, matrix_sqrt_psd, matmul_square};
use storyviz::optim::ParamSet;
use storyviz::storygan::Ablation;
use storyviz::synth_data::{caption_words, parse_caption, SceneSpec};
use storyviz::tensor::{sigmoid, softmax, Tensor};
use storyviz::text_encoder::{EncoderConfig, TextEncoder, TokenSeq};
use storyviz::SeededRng;

fn rows(n: usize, d: usize, seed: u64, scale: f64) -> Vec<Vec<f64>> {
    let mut r = SeededRng::new(seed);
    (0..n).map(|_| r.normal_vec(d).into_iter().map(|v| v * scale).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..3) {
        let x = Tensor::from_vec(data, &[2, 3, 2]);
        let y = softmax(&x, axis).unwrap().to_vec();
        let shape = [2usize, 3, 2];
        let strides = [6usize, 2, 1];
        for base in 0..12 {
            if (base / strides[axis]) % shape[axis] != 0 {
                continue;
            }
            let s: f64 = (0..shape[axis]).map(|k| y[base + k * strides[axis]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_stays_open_unit(data in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let n = data.len();
        for v in sigmoid(&Tensor::from_vec(data, &[n])).to_vec() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_under_masks(seed in any::<u64>(), mask_bits in 1u8..=15) {
        let mut rng = SeededRng::new(seed);
        let mut ps = ParamSet::new();
        let proj = AttentionProjections::new("att", 4, 3, Some(5), &mut ps, &mut rng);
        let a = FeatureMap::new(Tensor::from_vec(rng.normal_vec(4 * 9), &[1, 4, 3, 3])).unwrap();
        let words = Tensor::from_vec(rng.normal_vec(4 * 5), &[1, 4, 5]);
        let mask: Vec<bool> = (0..4).map(|i| mask_bits >> i & 1 == 1).collect();
        let beta = attention_weights(&a, &KeySet::words(&words, &mask).unwrap(), &proj).unwrap().to_vec();
        for row in beta.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (v, &m) in row.iter().zip(&mask) {
                if !m {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn branch_probabilities_are_normalised(w in 1e-6f64..(1.0 - 1e-6), zs in -10.0f64..10.0, zw in -10.0f64..10.0, tau in 0.01f64..5.0) {
        let p = branch_probs(w, zs, zw, tau).unwrap();
        prop_assert!((p.p_sa + p.p_wsa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_itself(seed in any::<u64>(), d in 1usize..6, scale in 0.1f64..3.0) {
        let p = gaussian_stats(&rows(40, d, seed, 1.0)).unwrap();
        let q = gaussian_stats(&rows(40, d, seed ^ 1, scale)).unwrap();
        let (pq, qp) = (frechet_distance(&p, &q).unwrap(), frechet_distance(&q, &p).unwrap());
        prop_assert!((pq - qp).abs() < 1e-8, "{} vs {}", pq, qp);
        prop_assert!(frechet_distance(&p, &p).unwrap().abs() < 1e-10);
        prop_assert!(pq >= 0.0);
    }

    #[test]
    fn psd_square_root_squares_back(seed in any::<u64>(), d in 1usize..10) {
        let b: Vec<f64> = SeededRng::new(seed).normal_vec(d * d);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            }
        }
        let r = matrix_sqrt_psd(&a, d).unwrap();
        let back = matmul_square(&r, &r, d);
        let err: f64 = back.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * norm.max(1e-300));
        for i in 0..d {
            for j in 0..d {
                prop_assert!((r[i * d + j] - r[j * d + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        values in prop::collection::vec(any::<f64>(), 0..40),
        counter in any::<u64>(),
        step in any::<u64>(),
        config in "[a-z_ =.0-9\n]{0,60}",
    ) {
        let mut ck = Checkpoint::new(config, counter, step);
        let n = values.len();
        ck.push("weights", &[n], values.clone());
        ck.push("scalar", &[], vec![f64::NAN]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let got: Vec<u64> = back.get("weights").unwrap().data.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!((back.rng_counter, back.step), (counter, step));
    }

    #[test]
    fn captions_parse_back_to_the_scene(seed in any::<u64>(), frame in 0usize..5) {
        let spec = SceneSpec::from_seed(seed, 5);
        let parts = parse_caption(&caption_words(&spec, frame)).unwrap();
        prop_assert_eq!(parts.color, spec.color);
        prop_assert_eq!(parts.shape, spec.shape);
        prop_assert_eq!(parts.background, spec.background);
        prop_assert_eq!(parts.prop, spec.prop.map(|p| p.0));
        prop_assert_eq!(parts.action, spec.actions[frame]);
    }

    #[test]
    fn ppm_roundtrip(seed in any::<u64>(), size in 1usize..9) {
        let mut r = SeededRng::new(seed);
        let mut img = Image::filled(size, [0, 0, 0]);
        for y in 0..size {
            for x in 0..size {
                img.set_pixel(x, y, [r.below(256) as u8, r.below(256) as u8, r.below(256) as u8]);
            }
        }
        let back = Image::parse_ppm(&img.to_ppm_bytes()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn config_text_roundtrip(steps in 0usize..5000, tau in 0.01f64..10.0, seed in any::<u64>(), arm in 0usize..6) {
        let mut c = RunConfig::default();
        c.train.steps = steps;
        c.train.tau = tau;
        c.train.seed = seed;
        c.train.ablation = Ablation::ALL[arm];
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn trailing_padding_never_changes_the_encoding(ids in prop::collection::vec(2usize..9, 1..5), pad in 0usize..3, seed in any::<u64>()) {
        let mut ps = ParamSet::new();
        let cfg = EncoderConfig { embed_dim: 4, dim: 6, max_len: 8, ..EncoderConfig::new(9) };
        let enc = TextEncoder::new("enc", cfg, &mut ps, &mut SeededRng::new(seed)).unwrap();
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat_n(0, pad));
        let a = enc.encode(&[TokenSeq::new(ids).unwrap()]).unwrap();
        let b = enc.encode(&[TokenSeq::new(padded).unwrap()]).unwrap();
        prop_assert_eq!(a.s.to_vec(), b.s.to_vec());
        prop_assert_eq!(a.words.to_vec(), b.words.to_vec());
    }
}

//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls the forward function, so it stays
//! independent of every backward closure it is checking.

mod suites;

pub use suites::{run_module, GradModule};

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{mul, no_grad, sum_all, trace_kinks, Tensor};

pub const FD_EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradOptions {
    pub eps: f64,
    /// Denominator floor of the relative error; components where both the
    /// analytic and numeric gradient are below it are compared absolutely.
    pub floor: f64,
    /// Cap on coordinates per input tensor (sampled deterministically).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient so the checker must fail.
    pub inject_fault: bool,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self {
            eps: FD_EPS,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates skipped because the stencil straddled a relu, leaky-relu
    /// or clamp kink.
    pub skipped: usize,
    /// `(input index, coordinate, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR && (self.checked > 0 || self.skipped == 0)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff and central differences for every trainable tensor in
/// `inputs`. `f` must map the inputs to a single-element tensor and be
/// deterministic. Coordinates whose `±eps` stencil lands on different pieces
/// of a piecewise-linear op are skipped and counted.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, opts: &GradOptions) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    inputs.iter().for_each(Tensor::zero_grad);
    let (out, base_kinks) = trace_kinks(|| f(inputs));
    out?.backward()?;
    let analytic: Vec<Option<Vec<f64>>> = inputs.iter().map(Tensor::grad).collect();
    inputs.iter().for_each(Tensor::zero_grad);

    let mut rng = SeededRng::new(opts.seed ^ 0x6772_6164);
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst = None;
    for (k, (t, a)) in inputs.iter().zip(analytic).enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let a = a.unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut coords: Vec<usize> = (0..t.numel()).collect();
        if let Some(cap) = opts.max_coords {
            if coords.len() > cap {
                rng.shuffle(&mut coords);
                coords.truncate(cap);
            }
        }
        for i in coords {
            let orig = t.data()[i];
            t.update_data(|d| d[i] = orig + opts.eps);
            let (plus, kp) = trace_kinks(|| no_grad(|| f(inputs)));
            t.update_data(|d| d[i] = orig - opts.eps);
            let (minus, km) = trace_kinks(|| no_grad(|| f(inputs)));
            t.update_data(|d| d[i] = orig);
            let (plus, minus) = (plus?.item(), minus?.item());
            if kp != km || kp != base_kinks {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let mut ana = a[i];
            if opts.inject_fault {
                ana += 1e-2 * (1.0 + ana.abs());
            }
            let err = relative_error(ana, numeric, opts.floor);
            if worst.is_none() || err > max_err {
                max_err = err;
                worst = Some((k, i, ana, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked,
        skipped,
        worst,
    })
}

/// Fixed random projection `sum(out ⊙ r)` turning any output into a scalar,
/// so that a check covers the full vector-Jacobian product.
pub fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = SeededRng::new(seed);
    let r = Tensor::from_vec(rng.normal_vec(out.numel()), out.shape());
    Ok(sum_all(&mul(out, &r)?))
}

/// Trainable tensor with entries uniform in `[-2, 2]`, nudged at least
/// `margin` away from zero (keeps relu kinks out of the finite differences).
pub fn random_input(shape: &[usize], rng: &mut SeededRng, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.uniform_range(-2.0, 2.0);
            if v.abs() < margin {
                margin.copysign(v) * 2.0
            } else {
                v
            }
        })
        .collect();
    Tensor::param(data, shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, sum_all};

    #[test]
    fn quadratic_passes_and_fault_fails() {
        let x = Tensor::param(vec![0.3, -1.2, 2.0], &[3]);
        let f = |xs: &[Tensor]| Ok(sum_all(&mul(&xs[0], &xs[0])?));
        let r = check("square", &[x.clone()], f, &GradOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
        let bad = GradOptions {
            inject_fault: true,
            ..Default::default()
        };
        assert!(!check("square", &[x], f, &bad).unwrap().passed());
    }

    #[test]
    fn stencil_across_a_kink_is_skipped() {
        let x = Tensor::param(vec![3e-6, 0.5], &[2]);
        let f = |xs: &[Tensor]| Ok(sum_all(&crate::tensor::relu(&xs[0])));
        let r = check("relu", &[x], f, &GradOptions::default()).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.passed());
    }
}

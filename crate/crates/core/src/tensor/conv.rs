//! Image-shaped ops on `[N, C, H, W]` tensors.

use super::{gemm, mean_axis, reshape, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..(c * self.h + iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                gx[base + ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_nchw(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => dim_err(format!("{what} expects [N, C, H, W], got {:?}", x.shape())),
    }
}

/// Direct 2-D convolution (im2col + GEMM) with square kernels and zero padding.
///
/// `x: [N, Cin, H, W]`, `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = check_nchw(x, "conv2d")?;
    let (cout, k) = match *weight.shape() {
        [co, ci, kh, kw] if ci == cin && kh == kw => (co, kh),
        _ => {
            return dim_err(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                weight.shape(),
                x.shape()
            ))
        }
    };
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return dim_err(format!("conv2d: bias {:?} does not match {cout} output channels", b.shape()));
        }
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return dim_err(format!("conv2d: kernel {k} stride {stride} pad {pad} invalid for {h}x{w}"));
    }
    let geom = ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    };
    let (rows, p) = (geom.rows(), geom.cols());
    let mut out = vec![0.0; n * cout * p];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.data());
        let mut cols = vec![0.0; rows * p];
        for i in 0..n {
            geom.im2col(&xd[i * cin * h * w..(i + 1) * cin * h * w], &mut cols);
            let o = &mut out[i * cout * p..(i + 1) * cout * p];
            gemm(cout, rows, p, &wd, false, &cols, false, o, false);
            if let Some(bd) = &bd {
                for (c, chunk) in o.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
    }
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(vec![n, cout, geom.ho, geom.wo], out, parents, move |g, ps, _| {
        let (x, weight) = (&ps[0], &ps[1]);
        let need_x = x.requires_grad();
        let need_w = weight.requires_grad();
        let xd = x.data();
        let wd = weight.data();
        let mut gx = need_x.then(|| vec![0.0; n * cin * h * w]);
        let mut gw = need_w.then(|| vec![0.0; cout * rows]);
        let mut cols = vec![0.0; rows * p];
        let mut gcols = vec![0.0; rows * p];
        for i in 0..n {
            let gi = &g[i * cout * p..(i + 1) * cout * p];
            if let Some(gw) = gw.as_mut() {
                geom.im2col(&xd[i * cin * h * w..(i + 1) * cin * h * w], &mut cols);
                gemm(cout, p, rows, gi, false, &cols, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(rows, cout, p, &wd, true, gi, false, &mut gcols, false);
                geom.col2im(&gcols, &mut gx[i * cin * h * w..(i + 1) * cin * h * w]);
            }
        }
        let mut grads = vec![gx, gw];
        if ps.len() == 3 {
            let gb = ps[2].requires_grad().then(|| {
                let mut gb = vec![0.0; cout];
                for (j, chunk) in g.chunks(p).enumerate() {
                    gb[j % cout] += chunk.iter().sum::<f64>();
                }
                gb
            });
            grads.push(gb);
        }
        grads
    }))
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_nchw(x, "upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    {
        let xd = x.data();
        for plane in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(plane * h2 + y) * w2 + xx] = xd[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, h2, w2], out, vec![x.clone()], move |g, _, _| {
        let mut gx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    gx[(plane * h + y / 2) * w + xx / 2] += g[(plane * h2 + y) * w2 + xx];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = check_nchw(x, "avg_pool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return dim_err(format!("avg_pool2d: window {k} does not tile {h}x{w}"));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    {
        let xd = x.data();
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * ho + y / k) * wo + xx / k] += xd[(plane * h + y) * w + xx] * inv;
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, vec![x.clone()], move |g, _, _| {
        let mut gx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    gx[(plane * h + y) * w + xx] = g[(plane * ho + y / k) * wo + xx / k] * inv;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean over the spatial dims: `[N, C, H, W] → [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_nchw(x, "global_avg_pool")?;
    mean_axis(&reshape(x, &[n, c, h * w])?, 2)
}

/// Per-sample, per-channel normalisation over H×W without affine terms.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = check_nchw(x, "instance_norm")?;
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    let mut inv_std = vec![0.0; n * c];
    {
        let xd = x.data();
        for plane in 0..n * c {
            let xs = &xd[plane * hw..(plane + 1) * hw];
            let mean = xs.iter().sum::<f64>() / hw as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for (o, v) in out[plane * hw..(plane + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, h, w], out, vec![x.clone()], move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for plane in 0..n * c {
            let r = plane * hw..(plane + 1) * hw;
            let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
            let mg = gs.iter().sum::<f64>() / hw as f64;
            let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
            for ((d, &gv), &yv) in gx[r].iter_mut().zip(gs).zip(ys) {
                *d = inv_std[plane] * (gv - mg - yv * mgy);
            }
        }
        vec![Some(gx)]
    }))
}

/// Per-pixel normalisation across channels: `x / sqrt(mean_c x² + eps)`.
pub fn pixel_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = check_nchw(x, "pixel_norm")?;
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    let mut inv = vec![0.0; n * hw];
    {
        let xd = x.data();
        for b in 0..n {
            for p in 0..hw {
                let ms = (0..c).map(|k| xd[(b * c + k) * hw + p].powi(2)).sum::<f64>() / c as f64;
                let r = 1.0 / (ms + eps).sqrt();
                inv[b * hw + p] = r;
                for k in 0..c {
                    out[(b * c + k) * hw + p] = xd[(b * c + k) * hw + p] * r;
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, h, w], out, vec![x.clone()], move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |k: usize| (b * c + k) * hw + p;
                let gy = (0..c).map(|k| g[idx(k)] * y[idx(k)]).sum::<f64>() / c as f64;
                let r = inv[b * hw + p];
                for k in 0..c {
                    gx[idx(k)] = r * (g[idx(k)] - y[idx(k)] * gy);
                }
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec((0..16).map(f64::from).collect(), &[1, 1, 4, 4]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let wt = Tensor::from_vec(k, &[1, 1, 3, 3]);
        let y = conv2d(&x, &wt, None, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_stride_two_shape_and_bias() {
        let x = Tensor::ones(&[2, 3, 8, 8]);
        let wt = Tensor::ones(&[4, 3, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, 0.0, 0.0, 0.0], &[4]);
        let y = conv2d(&x, &wt, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        // interior output sees all 27 taps
        assert_eq!(y.data()[16 + 5], 27.0);
        assert_eq!(y.data()[5], 27.5);
        // corner sees the padded border: 3 channels * 2 * 2
        assert_eq!(y.data()[1 * 16], 12.0);
    }

    #[test]
    fn conv_rejects_bad_weight() {
        let x = Tensor::ones(&[1, 3, 4, 4]);
        assert!(conv2d(&x, &Tensor::ones(&[2, 2, 3, 3]), None, 1, 1).is_err());
    }

    #[test]
    fn upsample_and_pool_invert() {
        let x = Tensor::from_vec((0..8).map(f64::from).collect(), &[1, 2, 2, 2]);
        let up = upsample2x(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        assert_eq!(avg_pool2d(&up, 2).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::from_vec((0..32).map(|v| (v as f64 * 0.7).sin() * 3.0 + 1.0).collect(), &[2, 1, 4, 4]);
        let y = instance_norm(&x, 1e-12).unwrap().to_vec();
        for plane in y.chunks(16) {
            let m = plane.iter().sum::<f64>() / 16.0;
            let v = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_norm_unit_rms_per_pixel() {
        let x = Tensor::from_vec((0..24).map(|v| (v as f64 * 0.9).cos() * 2.0 + 0.5).collect(), &[2, 3, 2, 2]);
        let y = pixel_norm(&x, 0.0).unwrap().to_vec();
        for b in 0..2 {
            for p in 0..4 {
                let ms = (0..3).map(|k| y[(b * 3 + k) * 4 + p].powi(2)).sum::<f64>() / 3.0;
                assert!((ms - 1.0).abs() < 1e-12);
            }
        }
    }
}

//! Weight initialisation.

use crate::rng::SeededRng;

/// Orthogonal matrix of shape `rows × cols` (rows or columns orthonormal,
/// whichever is fewer), scaled by `gain`. Built by modified Gram–Schmidt on a
/// Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut SeededRng) -> Vec<f64> {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // `short` orthonormal vectors of length `long`
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v = rng.normal_vec(long);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows <= cols { basis[i][j] } else { basis[j][i] };
        }
    }
    out
}

//! Per-sample group normalization over contiguous feature groups.

use crate::Matrix;

pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct GroupNormCache {
    /// Normalized features before the affine transform.
    pub xhat: Matrix,
    /// `1 / sqrt(var + eps)` per (sample, group), row-major.
    pub inv_std: Vec<f64>,
}

/// Normalizes each contiguous group of `features / groups` features of every
/// row to zero mean and unit variance (biased variance, `EPS` added).
pub fn normalize(z: &Matrix, groups: usize) -> Matrix {
    normalize_with_stats(z, groups).0
}

fn normalize_with_stats(z: &Matrix, groups: usize) -> (Matrix, Vec<f64>) {
    let (rows, cols) = z.shape();
    let size = cols / groups;
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows * groups);
    for r in 0..rows {
        let src = z.row(r);
        let dst = xhat.row_mut(r);
        for g in 0..groups {
            let span = g * size..(g + 1) * size;
            let x = &src[span.clone()];
            let mean = x.iter().sum::<f64>() / size as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for (d, v) in dst[span].iter_mut().zip(x) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
    }
    (xhat, inv_std)
}

pub(crate) fn forward(
    z: &Matrix,
    scale: &[f64],
    shift: &[f64],
    groups: usize,
) -> (Matrix, GroupNormCache) {
    let (xhat, inv_std) = normalize_with_stats(z, groups);
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, s), b) in y.row_mut(r).iter_mut().zip(scale).zip(shift) {
            *v = *v * s + b;
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

/// Returns the gradient w.r.t. the pre-norm features and accumulates the
/// affine parameter gradients into `dscale` / `dshift`.
pub(crate) fn backward(
    dy: &Matrix,
    cache: &GroupNormCache,
    scale: &[f64],
    groups: usize,
    dscale: &mut [f64],
    dshift: &mut [f64],
) -> Matrix {
    let (rows, cols) = dy.shape();
    let size = cols / groups;
    let n = size as f64;
    let mut dz = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; size];
    for r in 0..rows {
        let dy_row = dy.row(r);
        let xhat_row = cache.xhat.row(r);
        for j in 0..cols {
            dscale[j] += dy_row[j] * xhat_row[j];
            dshift[j] += dy_row[j];
        }
        let out = dz.row_mut(r);
        for g in 0..groups {
            let base = g * size;
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for k in 0..size {
                let d = dy_row[base + k] * scale[base + k];
                dxhat[k] = d;
                sum += d;
                sum_x += d * xhat_row[base + k];
            }
            let inv = cache.inv_std[r * groups + g];
            for k in 0..size {
                out[base + k] = inv / n * (n * dxhat[k] - sum - xhat_row[base + k] * sum_x);
            }
        }
    }
    dz
}

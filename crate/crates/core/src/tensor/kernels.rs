//! Forward kernels. Each is a pure function of its inputs; the tape wraps
//! them and supplies the matching backward rules.

use super::{Result, Tensor, TensorError};

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

impl Tensor {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::DimensionMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = match self.shape.as_slice() {
            [m, n] => (*m, *n),
            _ => {
                return Err(TensorError::RankUnsupported {
                    op: "transpose",
                    shape: self.shape.clone(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite("softmax", self)?;
        let (outer, len, inner) = axis_split("softmax", &self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| self.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (self.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Normalizes each row over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_forward(self, gain, bias, eps)?.0)
    }
}

/// Returns `(output, x̂, 1/σ per row)`.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let n = *x.shape.last().unwrap();
    if n == 0 {
        return Err(TensorError::Empty { op: "layer_norm" });
    }
    if gain.len() != n || bias.len() != n {
        return Err(TensorError::DimensionMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    check_finite("layer_norm", x)?;
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..n {
            let h = (row[c] - mean) * is;
            xhat[r * n + c] = h;
            out[r * n + c] = gain.data[c] * h + bias.data[c];
        }
    }
    Ok((Tensor::new(x.shape.clone(), out)?, xhat, inv_std))
}

/// Broadcast index map for `rhs` against a rank-2 (or rank-1) `lhs`.
/// `rhs` may match exactly, be a `1×n` row, an `m×1` column, or a single element.
pub(crate) fn broadcast_index(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
) -> Result<impl Fn(usize) -> usize> {
    let (m, n) = lhs.dims2(op)?;
    let mismatch = || TensorError::DimensionMismatch {
        op,
        left: lhs.shape.clone(),
        right: rhs.shape.clone(),
    };
    let (rm, rn) = if rhs.len() == 1 {
        (1, 1)
    } else {
        rhs.dims2(op)?
    };
    if !((rm == m || rm == 1) && (rn == n || rn == 1)) {
        return Err(mismatch());
    }
    Ok(move |idx: usize| {
        let (i, j) = (idx / n, idx % n);
        (i % rm) * rn + (j % rn)
    })
}

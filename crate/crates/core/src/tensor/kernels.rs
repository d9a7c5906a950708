// Forward kernels shared by the tape and by value-level callers.

use super::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_matrix("transpose")?;
    let av = a.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), values)
}

/// `x + b` with `b` broadcast over every row of `x`.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("add_row")?;
    if b.numel() != n || b.rank() != 1 {
        return Err(Error::shape("add_row", x.shape(), b.shape()));
    }
    let mut out = x.values().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        for (o, bj) in row.iter_mut().zip(b.values()) {
            *o += bj;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| v * s).collect())
        .expect("same shape")
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    masked_softmax_rows(x, None)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum. Columns
/// with `mask[j] == false` receive probability exactly zero.
pub fn masked_softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("softmax_rows")?;
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::shape("softmax_rows mask", x.shape(), &[mask.len()]));
        }
        if n > 0 && !mask.iter().any(|&k| k) {
            return Err(Error::AllMasked);
        }
    }
    let keep = |j: usize| mask.is_none_or(|mk| mk[j]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.values()[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols needs at least one operand".into()))?;
    let (m, _) = first.expect_matrix("concat_cols")?;
    let mut total = 0;
    for p in parts {
        let (pm, pn) = p.expect_matrix("concat_cols")?;
        if pm != m {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        total += pn;
    }
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![m, total], out)
}

/// Columns `[start, end)` of a matrix.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("slice_cols")?;
    if start > end || end > n {
        return Err(Error::Contract(format!(
            "slice_cols [{start}, {end}) out of range for {:?}",
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(m * (end - start));
    for i in 0..m {
        out.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::new(vec![m, end - start], out)
}

/// Per-row mean and `1 / sqrt(var + eps)`, with the biased variance.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("layer_norm_rows")?;
    if n == 0 {
        return Err(Error::Contract("layer_norm_rows needs at least one column".into()));
    }
    if gamma.numel() != n || gamma.rank() != 1 {
        return Err(Error::shape("layer_norm_rows gamma", x.shape(), gamma.shape()));
    }
    if beta.numel() != n || beta.rank() != 1 {
        return Err(Error::shape("layer_norm_rows beta", x.shape(), beta.shape()));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let (mean, inv_std) = row_stats(row, eps);
        for j in 0..n {
            out.push((row[j] - mean) * inv_std * gamma.values()[j] + beta.values()[j]);
        }
    }
    Tensor::new(vec![m, n], out)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.values().iter().map(|&v| gelu_scalar(v)).collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_left() {
        let b = Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]);
        let b = Tensor::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().values(), &[11.0]);
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_log_weights() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[[1f64.ln(), 2f64.ln(), 3f64.ln()]]);
        let s = softmax_rows(&x).unwrap();
        for (v, e) in s.values().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.5, 0.0]]);
        let shifted = Tensor::from_rows(&[[100.3, 98.8, 102.5, 100.0]]);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let x = Tensor::from_rows(&[[1e6, 0.0, -1e6]]);
        let s = softmax_rows(&x).unwrap();
        assert!(s.is_finite());
        assert!((s.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let s = masked_softmax_rows(&Tensor::zeros(&[2, 4]), Some(&[true, false, true, false])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.0, 0.5, 0.0]);
        assert!(matches!(
            masked_softmax_rows(&Tensor::zeros(&[1, 2]), Some(&[false, false])),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rand::rng());
        let b = Tensor::uniform(&[3, 4], 1.0, &mut rand::rng());
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 8]);
        assert_eq!(slice_cols(&c, 0, 4).unwrap(), a);
        assert_eq!(slice_cols(&c, 4, 8).unwrap(), b);
        let empty = Tensor::zeros(&[3, 0]);
        assert_eq!(concat_cols(&[&a, &empty]).unwrap(), a);
        assert!(concat_cols(&[&a, &Tensor::zeros(&[2, 4])]).is_err());
    }

    #[test]
    fn layer_norm_constant_and_unit_rows() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm_rows(&Tensor::filled(&[2, 3], 7.5), &g, &b, LN_EPS).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.0));

        let y = layer_norm_rows(
            &Tensor::from_rows(&[[1.0, -1.0]]),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.values(), &[1.0, -1.0]);
    }

    const LN_EPS: f64 = super::super::LAYER_NORM_EPS;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.2] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}

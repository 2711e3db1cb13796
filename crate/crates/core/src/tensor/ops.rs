//! Forward kernels shared by the gradient tape and the inference path.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

fn as_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (m, k) = as_matrix(x, "linear input")?;
    let (n, k2) = as_matrix(w, "linear weight")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "linear: input width {k} but weight expects {k2}"
        )));
    }
    Ok((m, k, n))
}

/// `x[m×in] · w[out×in]ᵀ`, the weight layout used by every projection.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = linear_dims(x, w)?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, x.data(), (k, 1), w.data(), (1, k), T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Same product as [`linear`], but every output element is a fixed-order dot
/// product, so a row's result does not depend on how many rows are processed
/// together.
pub fn linear_rowwise<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = linear_dims(x, w)?;
    let mut out = Vec::with_capacity(m * n);
    let wd = w.data();
    for i in 0..m {
        let xr = x.row(i);
        for o in 0..n {
            out.push(dot(xr, &wd[o * k..(o + 1) * k]));
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a length-`cols` vector to every row.
pub fn add_row<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.numel() != a.cols() {
        return Err(Error::shape(format!(
            "add_row: bias of {} for rows of {}",
            bias.numel(),
            a.cols()
        )));
    }
    let c = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + bias.data()[i % c])
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Softmax over the last axis. `-inf` entries get zero probability; NaN,
/// `+inf` or an all-`-inf` row is a numeric error.
pub fn row_softmax<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    for r in 0..a.rows() {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    if row.iter().any(|x| x.is_nan() || *x == T::infinity()) {
        return Err(Error::NonFinite("row_softmax"));
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::NonFinite("row_softmax"));
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `y = x / rms(x) * gain` over the last axis. Also returns `1/rms` per row.
pub fn rms_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let c = x.cols();
    if gain.numel() != c {
        return Err(Error::shape(format!(
            "rms_norm: gain of {} for rows of {c}",
            gain.numel()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("rms_norm"));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let n = T::c(c as f64);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = dot(row, row) / n;
        let ir = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * ir * g;
        }
        inv.push(ir);
    }
    Ok((out, inv))
}

pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(silu_scalar)
}

/// Gathers rows of `table[vocab×d]`.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (vocab, d) = as_matrix(table, "embedding table")?;
    if ids.is_empty() {
        return Err(Error::usage("embedding lookup of an empty sequence"));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { token: id, vocab });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = as_matrix(a, "transpose")?;
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(a.data()[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], data)
}

pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    a.reshaped(shape)
}

/// Rotary position encoding applied independently to each `head_dim`-wide
/// slice of every row, in the half-split layout: element `i` is paired with
/// element `i + head_dim/2`. Row `r` sits at absolute position `offset + r`.
/// `inverse` rotates by the negated angle (the adjoint).
pub fn rope<T: Scalar>(
    a: &Tensor<T>,
    head_dim: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) -> Result<Tensor<T>> {
    let c = a.cols();
    if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
        return Err(Error::shape(format!(
            "rope: head_dim {head_dim} must be even and divide width {c}"
        )));
    }
    let half = head_dim / 2;
    let mut out = a.clone();
    for r in 0..a.rows() {
        let pos = (offset + r) as f64;
        let row = out.row_mut(r);
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let (sin, cos) = (T::c(if inverse { -sin } else { sin }), T::c(cos));
            for head in row.chunks_exact_mut(head_dim) {
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * cos - x2 * sin;
                head[i + half] = x2 * cos + x1 * sin;
            }
        }
    }
    Ok(out)
}

pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, width: usize) -> Result<Tensor<T>> {
    let (r, c) = as_matrix(a, "slice_cols")?;
    if width == 0 || start + width > c {
        return Err(Error::shape(format!(
            "slice_cols {start}..{} out of {c} columns",
            start + width
        )));
    }
    let mut data = Vec::with_capacity(r * width);
    for i in 0..r {
        data.extend_from_slice(&a.row(i)[start..start + width]);
    }
    Tensor::new(vec![r, width], data)
}

pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat_cols of nothing"))?;
    let (r, _) = as_matrix(first, "concat_cols")?;
    let mut width = 0;
    for p in parts {
        let (pr, pc) = as_matrix(p, "concat_cols")?;
        if pr != r {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        width += pc;
    }
    let mut data = Vec::with_capacity(r * width);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![r, width], data)
}

/// Sets entries above the causal diagonal to `-inf`: row `i` may attend to
/// columns `j ≤ i + offset`.
pub fn causal_mask<T: Scalar>(a: &Tensor<T>, offset: usize) -> Result<Tensor<T>> {
    let (r, c) = as_matrix(a, "causal_mask")?;
    let mut out = a.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        for x in row.iter_mut().take(c).skip(i + offset + 1) {
            *x = T::neg_infinity();
        }
    }
    Ok(out)
}

/// `log softmax(row)[target]` computed stably.
pub fn log_prob<T: Scalar>(row: &[T], target: usize) -> Result<T> {
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_prob"));
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    Ok(row[target] - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_projector_products() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::identity(2).unwrap(), &m).unwrap(), m);
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let v = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(matmul(&p, &v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut naive = [0.0f32; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    naive[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let got = matmul(
            &Tensor::new(vec![3, 4], a).unwrap(),
            &Tensor::new(vec![4, 2], b).unwrap(),
        )
        .unwrap();
        for (g, n) in got.data().iter().zip(naive) {
            assert_abs_diff_eq!(*g, n, epsilon = 1e-6);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[3, 5], &x);
        let w = t(&[4, 5], &w);
        let a = linear(&x, &w).unwrap();
        let b = linear_rowwise(&x, &w).unwrap();
        let c = matmul(&x, &transpose(&w).unwrap()).unwrap();
        for ((a, b), c) in a.data().iter().zip(b.data()).zip(c.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            assert_abs_diff_eq!(a, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let s = row_softmax(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for p in s.data() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
        }
        let s = row_softmax(&t(&[2, 3], &[1.0, -2.0, 30.0, 0.5, 0.5, f64::NEG_INFINITY])).unwrap();
        for r in 0..2 {
            assert_abs_diff_eq!(s.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }
        assert_eq!(s.row(1)[2], 0.0);
    }

    #[test]
    fn softmax_flags_nan() {
        let bad = t(&[1, 2], &[f64::NAN, 0.0]);
        assert!(matches!(row_softmax(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu_scalar(0.0f32), 0.0);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let x = t(&[3, 8], &(0..24).map(|i| i as f64 * 0.1 - 1.0).collect::<Vec<_>>());
        let y = rope(&x, 4, 5, 10000.0, false).unwrap();
        let back = rope(&y, 4, 5, 10000.0, true).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // position 0 is the identity
        let z = rope(&x, 4, 0, 10000.0, false).unwrap();
        assert_eq!(z.row(0), x.row(0));
    }

    #[test]
    fn embedding_bounds() {
        let table = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(embedding(&table, &[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(matches!(
            embedding(&table, &[3]),
            Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
        ));
    }
}

//! Value-level kernels shared by the tape and by non-differentiated code
//! paths. Keeping a single implementation means a value computed on the
//! tape and off it agree bit for bit.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// `a[m×k] · b[k×n]`, accumulated in `t` order for every output cell.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.dims(), b.dims()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let s = ad[i * k + t];
            if s == T::zero() {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (c, &b) in crow.iter_mut().zip(brow) {
                *c = *c + s * b;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.matrix_dims("transpose")?;
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a · bᵀ` for row-major `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(a, &transpose(b)?)
}

/// Symmetric `z · zᵀ`; only the upper triangle is computed.
pub fn gram<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (v, d) = z.matrix_dims("gram")?;
    let zt = transpose(z)?;
    let (zd, ztd) = (z.data(), zt.data());
    let mut out = vec![T::zero(); v * v];
    for i in 0..v {
        let row = &mut out[i * v..(i + 1) * v];
        for t in 0..d {
            let s = zd[i * d + t];
            if s == T::zero() {
                continue;
            }
            let col = &ztd[t * v..(t + 1) * v];
            for (c, &b) in row[i..].iter_mut().zip(&col[i..]) {
                *c = *c + s * b;
            }
        }
    }
    for i in 0..v {
        for j in 0..i {
            out[i * v + j] = out[j * v + i];
        }
    }
    Tensor::new(vec![v, v], out)
}

/// Row-wise softmax with max subtraction. Entries where `mask` is false are
/// exactly zero; every row needs at least one unmasked entry.
pub fn softmax_rows<T: Real>(m: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let (r, c) = m.matrix_dims("softmax_rows")?;
    if let Some(mask) = mask {
        if mask.len() != r * c {
            return Err(Error::shape("softmax_rows", m.dims(), &[mask.len()]));
        }
    }
    let keep = |i: usize| mask.is_none_or(|mk| mk[i]);
    let d = m.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let base = i * c;
        let mut hi = T::neg_infinity();
        for j in 0..c {
            if keep(base + j) {
                hi = hi.max(d[base + j]);
            }
        }
        if hi == T::neg_infinity() {
            return Err(Error::Contract(format!("softmax row {i} is fully masked")));
        }
        let mut total = T::zero();
        for j in 0..c {
            if keep(base + j) {
                let e = (d[base + j] - hi).exp();
                out[base + j] = e;
                total = total + e;
            }
        }
        for x in &mut out[base..base + c] {
            *x = *x / total;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Scales each row to unit L2 norm; zero rows stay zero. Returns the norms.
pub fn normalize_rows<T: Real>(m: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (r, c) = m.matrix_dims("normalize_rows")?;
    let d = m.data();
    let mut out = vec![T::zero(); r * c];
    let mut norms = Vec::with_capacity(r);
    for i in 0..r {
        let row = &d[i * c..(i + 1) * c];
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        norms.push(n);
        if n > T::zero() {
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x / n;
            }
        }
    }
    Ok((Tensor::new(vec![r, c], out)?, norms))
}

/// Subtracts each row's mean from that row.
pub fn center_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.matrix_dims("center_rows")?;
    let d = m.data();
    let inv = T::one() / T::count(c);
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = &d[i * c..(i + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv;
        out.extend(row.iter().map(|&x| x - mean));
    }
    Tensor::new(vec![r, c], out)
}

pub fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Degenerate("cosine_similarity"));
    }
    Ok((dot(u, v) / (nu * nv)).max(-T::one()).min(T::one()))
}

/// Pearson correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson_corr<T: Real>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape("pearson_corr", &[u.len()], &[v.len()]));
    }
    if u.len() < 2 {
        return Err(Error::Degenerate("pearson_corr"));
    }
    let n = T::count(u.len());
    let mu = u.iter().copied().sum::<T>() / n;
    let mv = v.iter().copied().sum::<T>() / n;
    let (mut suv, mut suu, mut svv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv = suv + da * db;
        suu = suu + da * da;
        svv = svv + db * db;
    }
    if suu == T::zero() || svv == T::zero() {
        return Err(Error::Degenerate("pearson_corr"));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt()))
        .max(-T::one())
        .min(T::one()))
}

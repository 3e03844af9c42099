//! Scaled dot-product attention kernel with optional relative-position terms.
//!
//! For one head the score between query `i` and key `j` is
//!
//! ```text
//! (q_i·k_j + q_i·r_{i−j} + u·k_j + v·r_{i−j}) / sqrt(d_head)
//!   = ((q_i + u)·k_j + (q_i + v)·r_{i−j}) / sqrt(d_head)
//! ```
//!
//! and the relative term is computed as one matrix product against the band
//! of `r` rows that the (i, j) grid actually touches.

use super::element::{gemm, Element};
use super::tensor::Tensor;
use super::NumericsError;

/// Static layout of one attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Mask keys `j > i`.
    pub causal: bool,
    /// `batch·k_len` flags; `false` keys receive zero weight.
    pub key_mask: Option<Vec<bool>>,
}

pub(crate) struct AttnCache<T> {
    /// Softmax weights, `[batch, heads, q_len, k_len]`.
    pub probs: Vec<T>,
}

pub(crate) struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub drel: Option<(Vec<T>, Vec<T>, Vec<T>)>,
}

fn bad(detail: String) -> NumericsError {
    NumericsError::ShapeMismatch {
        op: "attention",
        detail,
    }
}

/// Copies a `rows × dh` block of head `h` out of a `[.., d]` matrix.
fn gather_head<T: Element>(
    src: &[T],
    row0: usize,
    rows: usize,
    d: usize,
    h: usize,
    dh: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let s = (row0 + r) * d + h * dh;
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter_head_add<T: Element>(
    dst: &mut [T],
    row0: usize,
    rows: usize,
    d: usize,
    h: usize,
    dh: usize,
    src: &[T],
) {
    for r in 0..rows {
        let s = (row0 + r) * d + h * dh;
        for (o, &v) in dst[s..s + dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *o += v;
        }
    }
}

struct Layout {
    d: usize,
    dh: usize,
    centre: usize,
}

fn validate<T: Element>(
    spec: &AttnSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: Option<(&Tensor<T>, &Tensor<T>, &Tensor<T>)>,
) -> Result<Layout, NumericsError> {
    let d = q.cols();
    if spec.heads == 0 || !d.is_multiple_of(spec.heads) {
        return Err(bad(format!(
            "width {d} not divisible by {} heads",
            spec.heads
        )));
    }
    if q.rows() != spec.batch * spec.q_len
        || k.rows() != spec.batch * spec.k_len
        || v.rows() != spec.batch * spec.k_len
        || k.cols() != d
        || v.cols() != d
    {
        return Err(bad(format!(
            "q {:?}, k {:?}, v {:?} for batch {} × ({}, {})",
            q.shape(),
            k.shape(),
            v.shape(),
            spec.batch,
            spec.q_len,
            spec.k_len
        )));
    }
    if let Some(mask) = &spec.key_mask {
        if mask.len() != spec.batch * spec.k_len {
            return Err(bad(format!("key mask of length {}", mask.len())));
        }
    }
    let mut centre = 0;
    if let Some((r, u, vb)) = rel {
        let rows = r.rows();
        if r.cols() != d || rows % 2 == 0 || u.numel() != d || vb.numel() != d {
            return Err(bad(format!(
                "relative table {:?}, u {:?}, v {:?}",
                r.shape(),
                u.shape(),
                vb.shape()
            )));
        }
        centre = (rows - 1) / 2;
        if spec.q_len > centre + 1 || spec.k_len > centre + 1 {
            return Err(bad(format!(
                "relative table covers offsets ±{centre}, sequence ({}, {})",
                spec.q_len, spec.k_len
            )));
        }
    }
    Ok(Layout {
        d,
        dh: d / spec.heads,
        centre,
    })
}

#[inline]
fn allowed(spec: &AttnSpec, b: usize, i: usize, j: usize) -> bool {
    if spec.causal && j > i {
        return false;
    }
    match &spec.key_mask {
        Some(m) => m[b * spec.k_len + j],
        None => true,
    }
}

pub(crate) fn forward<T: Element>(
    spec: &AttnSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: Option<(&Tensor<T>, &Tensor<T>, &Tensor<T>)>,
) -> Result<(Vec<T>, AttnCache<T>), NumericsError> {
    let Layout { d, dh, centre } = validate(spec, q, k, v, rel)?;
    let (lq, lk) = (spec.q_len, spec.k_len);
    let band = lq + lk - 1;
    let band0 = (centre + 1).saturating_sub(lk);
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut out = vec![T::zero(); spec.batch * lq * d];
    let mut probs = vec![T::zero(); spec.batch * spec.heads * lq * lk];
    let mut qh = vec![T::zero(); lq * dh];
    let mut kh = vec![T::zero(); lk * dh];
    let mut vh = vec![T::zero(); lk * dh];
    let mut qv = vec![T::zero(); lq * dh];
    let mut rh = vec![T::zero(); band * dh];
    let mut brel = vec![T::zero(); lq * band];
    let mut oh = vec![T::zero(); lq * dh];

    for b in 0..spec.batch {
        for h in 0..spec.heads {
            gather_head(q.data(), b * lq, lq, d, h, dh, &mut qh);
            gather_head(k.data(), b * lk, lk, d, h, dh, &mut kh);
            gather_head(v.data(), b * lk, lk, d, h, dh, &mut vh);
            let p =
                &mut probs[((b * spec.heads + h) * lq) * lk..((b * spec.heads + h + 1) * lq) * lk];
            if let Some((r, u, vb)) = rel {
                let uh = &u.data()[h * dh..(h + 1) * dh];
                let vbh = &vb.data()[h * dh..(h + 1) * dh];
                for i in 0..lq {
                    for c in 0..dh {
                        qv[i * dh + c] = qh[i * dh + c] + vbh[c];
                        qh[i * dh + c] += uh[c];
                    }
                }
                gather_head(r.data(), band0, band, d, h, dh, &mut rh);
                gemm(lq, dh, lk, &qh, false, &kh, true, p, false);
                gemm(lq, dh, band, &qv, false, &rh, true, &mut brel, false);
                for i in 0..lq {
                    for j in 0..lk {
                        p[i * lk + j] += brel[i * band + (i + lk - 1 - j)];
                    }
                }
            } else {
                gemm(lq, dh, lk, &qh, false, &kh, true, p, false);
            }
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let mut mx = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    if allowed(spec, b, i, j) {
                        *s *= scale;
                        mx = mx.max(*s);
                    }
                }
                let mut sum = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    if allowed(spec, b, i, j) {
                        *s = (*s - mx).exp();
                        sum += *s;
                    } else {
                        *s = T::zero();
                    }
                }
                if sum > T::zero() {
                    row.iter_mut().for_each(|s| *s /= sum);
                }
            }
            gemm(lq, lk, dh, p, false, &vh, false, &mut oh, false);
            scatter_head_add(&mut out, b * lq, lq, d, h, dh, &oh);
        }
    }
    Ok((out, AttnCache { probs }))
}

/// Softmax weights `[batch, heads, q_len, k_len]` of an attention call.
pub fn attention_weights<T: Element>(
    spec: &AttnSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    rel: Option<(&Tensor<T>, &Tensor<T>, &Tensor<T>)>,
) -> Result<Tensor<T>, NumericsError> {
    let (_, cache) = forward(spec, q, k, k, rel)?;
    Ok(Tensor::from_parts(
        vec![spec.batch, spec.heads, spec.q_len, spec.k_len],
        cache.probs,
    ))
}

pub(crate) fn backward<T: Element>(
    spec: &AttnSpec,
    q: &[T],
    k: &[T],
    v: &[T],
    rel: Option<(&[T], &[T], &[T])>,
    cache: &AttnCache<T>,
    g: &[T],
) -> AttnGrads<T> {
    let (lq, lk) = (spec.q_len, spec.k_len);
    let d = q.len() / (spec.batch * lq);
    let dh = d / spec.heads;
    let band = lq + lk - 1;
    let centre = rel.map(|(r, _, _)| (r.len() / d - 1) / 2).unwrap_or(0);
    let band0 = (centre + 1).saturating_sub(lk);
    let scale = T::one() / T::of(dh as f64).sqrt();

    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut drel = rel.map(|(r, u, vb)| {
        (
            vec![T::zero(); r.len()],
            vec![T::zero(); u.len()],
            vec![T::zero(); vb.len()],
        )
    });

    let mut qh = vec![T::zero(); lq * dh];
    let mut kh = vec![T::zero(); lk * dh];
    let mut vh = vec![T::zero(); lk * dh];
    let mut qv = vec![T::zero(); lq * dh];
    let mut rh = vec![T::zero(); band * dh];
    let mut goh = vec![T::zero(); lq * dh];
    let mut dp = vec![T::zero(); lq * lk];
    let mut dbrel = vec![T::zero(); lq * band];
    let mut dqh = vec![T::zero(); lq * dh];
    let mut dqv = vec![T::zero(); lq * dh];
    let mut dkh = vec![T::zero(); lk * dh];
    let mut dvh = vec![T::zero(); lk * dh];
    let mut drh = vec![T::zero(); band * dh];

    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let p = &cache.probs
                [((b * spec.heads + h) * lq) * lk..((b * spec.heads + h + 1) * lq) * lk];
            gather_head(q, b * lq, lq, d, h, dh, &mut qh);
            gather_head(k, b * lk, lk, d, h, dh, &mut kh);
            gather_head(v, b * lk, lk, d, h, dh, &mut vh);
            gather_head(g, b * lq, lq, d, h, dh, &mut goh);

            gemm(lk, lq, dh, p, true, &goh, false, &mut dvh, false);
            scatter_head_add(&mut dv, b * lk, lk, d, h, dh, &dvh);

            gemm(lq, dh, lk, &goh, false, &vh, true, &mut dp, false);
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            let ds = &dp;

            if let (Some((r, u, vb)), Some((dr, du, dvb))) = (rel, drel.as_mut()) {
                let uh = &u[h * dh..(h + 1) * dh];
                let vbh = &vb[h * dh..(h + 1) * dh];
                for i in 0..lq {
                    for c in 0..dh {
                        qv[i * dh + c] = qh[i * dh + c] + vbh[c];
                        qh[i * dh + c] += uh[c];
                    }
                }
                gather_head(r, band0, band, d, h, dh, &mut rh);
                // content path: S = (q + u)·kᵀ
                gemm(lq, lk, dh, ds, false, &kh, false, &mut dqh, false);
                gemm(lk, lq, dh, ds, true, &qh, false, &mut dkh, false);
                // position path: S_ij += (q_i + v)·r_{i−j}
                dbrel.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..lq {
                    for j in 0..lk {
                        dbrel[i * band + (i + lk - 1 - j)] = ds[i * lk + j];
                    }
                }
                gemm(lq, band, dh, &dbrel, false, &rh, false, &mut dqv, false);
                gemm(band, lq, dh, &dbrel, true, &qv, false, &mut drh, false);
                for i in 0..lq {
                    for c in 0..dh {
                        du[h * dh + c] += dqh[i * dh + c];
                        dvb[h * dh + c] += dqv[i * dh + c];
                        dqh[i * dh + c] += dqv[i * dh + c];
                    }
                }
                scatter_head_add(dr, band0, band, d, h, dh, &drh);
            } else {
                gemm(lq, lk, dh, ds, false, &kh, false, &mut dqh, false);
                gemm(lk, lq, dh, ds, true, &qh, false, &mut dkh, false);
            }
            scatter_head_add(&mut dq, b * lq, lq, d, h, dh, &dqh);
            scatter_head_add(&mut dk, b * lk, lk, d, h, dh, &dkh);
        }
    }
    AttnGrads { dq, dk, dv, drel }
}

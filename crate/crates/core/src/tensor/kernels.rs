//! Slice-level compute kernels shared by the autodiff tape and the
//! incremental inference paths.
//!
//! Every reduction runs in a fixed order so repeated runs are bit-identical.

use std::cell::Cell;

/// Eight-lane dot product. Lane order is fixed, so results are
/// deterministic and the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating sequentially over k.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    matmul_acc(a, b, m, k, n, &mut c);
    c
}

/// `c += a · b`
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                axpy(av, &b[t * n..(t + 1) * n], row);
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_at_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                axpy(av, grow, &mut c[t * n..(t + 1) * n]);
            }
        }
    }
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Row-wise RMS normalization. Returns the output and the per-row
/// reciprocal RMS needed by the backward pass.
pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let d = weight.len();
    let rows = x.len() / d;
    let mut out = vec![0.0f32; x.len()];
    let mut inv = vec![0.0f32; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / d as f32;
        let ir = 1.0 / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, xv), w) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(weight) {
            *o = xv * ir * w;
        }
    }
    (out, inv)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotary angle table for one absolute position: `dh/2` (cos, sin) pairs.
pub fn rope_angles(position: usize, head_dim: usize, theta: f32) -> Vec<(f32, f32)> {
    let half = head_dim / 2;
    (0..half)
        .map(|i| {
            let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let angle = position as f64 * freq;
            (angle.cos() as f32, angle.sin() as f32)
        })
        .collect()
}

/// Rotates each head of each row by its absolute position (half-split
/// layout). `inverse` applies the transpose rotation, which is the
/// backward rule of this linear map.
pub fn rope_apply(
    x: &mut [f32],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    theta: f32,
    inverse: bool,
) {
    let width = n_heads * head_dim;
    let half = head_dim / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let angles = rope_angles(pos, head_dim, theta);
        let row = &mut x[r * width..(r + 1) * width];
        for h in 0..n_heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &(c, s)) in angles.iter().enumerate() {
                let s = if inverse { -s } else { s };
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * c - x2 * s;
                head[i + half] = x2 * c + x1 * s;
            }
        }
    }
}

/// Geometry of one multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub q_rows: usize,
    pub kv_rows: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// `Some(offset)`: query row `i` sits at absolute position `offset + i`
    /// and sees key rows `0..=offset + i`. `None`: no mask.
    pub causal_offset: Option<usize>,
}

impl AttnShape {
    pub fn visible(&self, i: usize) -> usize {
        match self.causal_offset {
            Some(off) => (off + i + 1).min(self.kv_rows),
            None => self.kv_rows,
        }
    }

    /// Multiply-accumulates spent on scores and on the value mix.
    pub fn macs(&self) -> u64 {
        let per_row: u64 = (0..self.q_rows).map(|i| self.visible(i) as u64).sum();
        2 * per_row * (self.n_heads * self.head_dim) as u64
    }
}

thread_local! {
    static ATTN_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Attention multiply-accumulates performed on this thread since the last reset.
pub fn attention_macs() -> u64 {
    ATTN_MACS.with(|c| c.get())
}

pub fn reset_attention_macs() {
    ATTN_MACS.with(|c| c.set(0));
}

/// Multi-head scaled dot-product attention. Returns the mixed values and the
/// (pre-dropout) probabilities laid out `[head][q_row][kv_row]`.
/// `dropout` holds per-probability multipliers with the same layout.
pub fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    shape: AttnShape,
    dropout: Option<&[f32]>,
) -> (Vec<f32>, Vec<f32>) {
    let AttnShape {
        q_rows: t,
        kv_rows: s,
        n_heads,
        head_dim: dh,
        ..
    } = shape;
    let width = n_heads * dh;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; t * width];
    let mut probs = vec![0.0f32; n_heads * t * s];
    ATTN_MACS.with(|c| c.set(c.get() + shape.macs()));
    if s == 0 {
        return (out, probs);
    }
    for h in 0..n_heads {
        for i in 0..t {
            let vis = shape.visible(i);
            let qi = &q[i * width + h * dh..i * width + (h + 1) * dh];
            let prow = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
            for j in 0..vis {
                prow[j] = dot(qi, &k[j * width + h * dh..j * width + (h + 1) * dh]) * scale;
            }
            softmax_in_place(&mut prow[..vis]);
            let orow = &mut out[i * width + h * dh..i * width + (h + 1) * dh];
            for j in 0..vis {
                let mut p = prow[j];
                if let Some(mask) = dropout {
                    p *= mask[(h * t + i) * s + j];
                }
                if p != 0.0 {
                    axpy(p, &v[j * width + h * dh..j * width + (h + 1) * dh], orow);
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; accumulates into the provided gradient buffers.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dropout: Option<&[f32]>,
    shape: AttnShape,
    d_out: &[f32],
    mut dq: Option<&mut [f32]>,
    mut dk: Option<&mut [f32]>,
    mut dv: Option<&mut [f32]>,
) {
    let AttnShape {
        q_rows: t,
        kv_rows: s,
        n_heads,
        head_dim: dh,
        ..
    } = shape;
    if s == 0 {
        return;
    }
    let width = n_heads * dh;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dscore = vec![0.0f32; s];
    for h in 0..n_heads {
        for i in 0..t {
            let vis = shape.visible(i);
            let prow = &probs[(h * t + i) * s..(h * t + i) * s + vis];
            let go = &d_out[i * width + h * dh..i * width + (h + 1) * dh];
            let mut weighted = 0.0f32;
            for j in 0..vis {
                let m = dropout.map_or(1.0, |d| d[(h * t + i) * s + j]);
                let vj = &v[j * width + h * dh..j * width + (h + 1) * dh];
                if let Some(dv) = dv.as_deref_mut() {
                    let pd = prow[j] * m;
                    if pd != 0.0 {
                        axpy(pd, go, &mut dv[j * width + h * dh..j * width + (h + 1) * dh]);
                    }
                }
                let dp = if m != 0.0 { dot(go, vj) * m } else { 0.0 };
                dscore[j] = dp;
                weighted += dp * prow[j];
            }
            for j in 0..vis {
                dscore[j] = prow[j] * (dscore[j] - weighted) * scale;
            }
            if let Some(dq) = dq.as_deref_mut() {
                let dqi = &mut dq[i * width + h * dh..i * width + (h + 1) * dh];
                for j in 0..vis {
                    if dscore[j] != 0.0 {
                        axpy(dscore[j], &k[j * width + h * dh..j * width + (h + 1) * dh], dqi);
                    }
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qi = &q[i * width + h * dh..i * width + (h + 1) * dh];
                for j in 0..vis {
                    if dscore[j] != 0.0 {
                        axpy(dscore[j], qi, &mut dk[j * width + h * dh..j * width + (h + 1) * dh]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum_on_short_and_long_inputs() {
        for n in [0usize, 1, 7, 8, 9, 33] {
            let a: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
            let b: Vec<f32> = (0..n).map(|i| 1.0 - i as f32 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4);
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut x: Vec<f32> = (0..16).map(|i| (i as f32).sin()).collect();
        let orig = x.clone();
        rope_apply(&mut x, &[3, 11], 2, 4, 10000.0, false);
        assert_ne!(x, orig);
        rope_apply(&mut x, &[3, 11], 2, 4, 10000.0, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_mac_count_causal() {
        let shape = AttnShape {
            q_rows: 3,
            kv_rows: 5,
            n_heads: 2,
            head_dim: 4,
            causal_offset: Some(2),
        };
        // rows see 3, 4, 5 keys
        assert_eq!(shape.macs(), 2 * (3 + 4 + 5) * 8);
    }
}

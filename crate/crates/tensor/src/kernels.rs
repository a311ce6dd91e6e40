//! Flat-slice compute kernels shared by the graph ops.
//!
//! All kernels accumulate each output element in a fixed order that does not
//! depend on how work is split across threads, so results are bit-identical
//! between sequential and parallel execution.

use crate::exec::{for_each_chunk, for_each_index};

/// out[m,n] = sum_k a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n, |i, row| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    });
}

/// out[m,n] = sum_k a[m,k] * b[n,k]   (b transposed)
pub fn matmul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

/// out[k,n] = sum_m a[m,k] * b[m,n]   (a transposed)
pub fn matmul_ta(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_chunk(out, n, |kk, row| {
        row.fill(0.0);
        for i in 0..m {
            let aik = a[i * k + kk];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    });
}

/// Batched out[b] = a[b] . b[b] with per-slice plain matmul.
pub fn batch_matmul(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), bs * m * k);
    debug_assert_eq!(b.len(), bs * k * n);
    for_each_chunk(out, m * n, |s, slice| {
        let a_s = &a[s * m * k..(s + 1) * m * k];
        let b_s = &b[s * k * n..(s + 1) * k * n];
        for i in 0..m {
            let row = &mut slice[i * n..(i + 1) * n];
            row.fill(0.0);
            for kk in 0..k {
                let aik = a_s[i * k + kk];
                let b_row = &b_s[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    });
}

/// Batched out[b] = a[b] . b[b]^T.
pub fn batch_matmul_tb(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), bs * m * k);
    debug_assert_eq!(b.len(), bs * n * k);
    for_each_chunk(out, m * n, |s, slice| {
        let a_s = &a[s * m * k..(s + 1) * m * k];
        let b_s = &b[s * n * k..(s + 1) * n * k];
        for i in 0..m {
            let a_row = &a_s[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b_s[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&av, &bv) in a_row.iter().zip(b_row) {
                    acc += av * bv;
                }
                slice[i * n + j] = acc;
            }
        }
    });
}

/// Lowers a padded 3x3 NHWC convolution input into rows of 9*c patches.
/// Row layout per output pixel: (dy, dx) in row-major over the 3x3 window,
/// channels innermost.
pub fn im2col_3x3(x: &[f64], bsz: usize, h: usize, w: usize, c: usize, out: &mut [f64]) {
    let row_len = 9 * c;
    debug_assert_eq!(out.len(), bsz * h * w * row_len);
    for_each_chunk(out, row_len, |pix, row| {
        let b = pix / (h * w);
        let y = (pix / w) % h;
        let x0 = pix % w;
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for dy in 0..3 {
            for dx in 0..3 {
                let seg = &mut row[(dy * 3 + dx) * c..(dy * 3 + dx + 1) * c];
                let sy = y as isize + dy as isize - 1;
                let sx = x0 as isize + dx as isize - 1;
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    let off = (sy as usize * w + sx as usize) * c;
                    seg.copy_from_slice(&img[off..off + c]);
                } else {
                    seg.fill(0.0);
                }
            }
        }
    });
}

/// Adjoint of `im2col_3x3`: gathers the column gradient back onto input
/// pixels. Written as a gather over input coordinates so chunks stay
/// disjoint.
pub fn col2im_3x3(cols: &[f64], bsz: usize, h: usize, w: usize, c: usize, out: &mut [f64]) {
    let row_len = 9 * c;
    debug_assert_eq!(cols.len(), bsz * h * w * row_len);
    debug_assert_eq!(out.len(), bsz * h * w * c);
    for_each_chunk(out, c, |pix, px| {
        let b = pix / (h * w);
        let y = (pix / w) % h;
        let x0 = pix % w;
        px.fill(0.0);
        // input (y, x0) appears in the window of output (y - dy + 1, x0 - dx + 1)
        for dy in 0..3usize {
            for dx in 0..3usize {
                let oy = y as isize - dy as isize + 1;
                let ox = x0 as isize - dx as isize + 1;
                if oy >= 0 && oy < h as isize && ox >= 0 && ox < w as isize {
                    let row = (b * h * w + oy as usize * w + ox as usize) * row_len;
                    let seg = &cols[row + (dy * 3 + dx) * c..row + (dy * 3 + dx + 1) * c];
                    for (o, &v) in px.iter_mut().zip(seg) {
                        *o += v;
                    }
                }
            }
        }
    });
}

/// PyTorch-style adaptive window bounds: [floor(i*n/o), ceil((i+1)*n/o)).
#[inline]
pub fn adaptive_bounds(i: usize, n: usize, o: usize) -> (usize, usize) {
    let lo = i * n / o;
    let hi = ((i + 1) * n + o - 1) / o;
    (lo, hi)
}

/// NHWC adaptive average pooling. Equals non-overlapping kernel=stride
/// pooling whenever the sides divide evenly.
pub fn adaptive_avg_pool(
    x: &[f64],
    bsz: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), bsz * oh * ow * c);
    for_each_chunk(out, c, |pix, px| {
        let b = pix / (oh * ow);
        let oy = (pix / ow) % oh;
        let ox = pix % ow;
        let (y0, y1) = adaptive_bounds(oy, h, oh);
        let (x0, x1) = adaptive_bounds(ox, w, ow);
        let count = ((y1 - y0) * (x1 - x0)) as f64;
        px.fill(0.0);
        let img = &x[b * h * w * c..(b + 1) * h * w * c];
        for y in y0..y1 {
            for xx in x0..x1 {
                let off = (y * w + xx) * c;
                for (o, &v) in px.iter_mut().zip(&img[off..off + c]) {
                    *o += v;
                }
            }
        }
        for o in px.iter_mut() {
            *o /= count;
        }
    });
}

/// Gradient of adaptive average pooling, gathered per input pixel.
pub fn adaptive_avg_pool_backward(
    g: &[f64],
    bsz: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(g.len(), bsz * oh * ow * c);
    debug_assert_eq!(out.len(), bsz * h * w * c);
    for_each_chunk(out, c, |pix, px| {
        let b = pix / (h * w);
        let y = (pix / w) % h;
        let x0 = pix % w;
        px.fill(0.0);
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, h, oh);
            if y < y0 || y >= y1 {
                continue;
            }
            for ox in 0..ow {
                let (xl, xr) = adaptive_bounds(ox, w, ow);
                if x0 < xl || x0 >= xr {
                    continue;
                }
                let count = ((y1 - y0) * (xr - xl)) as f64;
                let off = (b * oh * ow + oy * ow + ox) * c;
                for (o, &gv) in px.iter_mut().zip(&g[off..off + c]) {
                    *o += gv / count;
                }
            }
        }
    });
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for_each_chunk(out, n, |i, row| {
        let src = &x[i * n..(i + 1) * n];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    });
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for_each_chunk(out, n, |i, row| {
        let src = &x[i * n..(i + 1) * n];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in src {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in row.iter_mut().zip(src) {
            *o = v - lse;
        }
    });
}

/// Elementwise map with deterministic chunking.
pub fn map_unary(x: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64 + Sync + Send) {
    debug_assert_eq!(x.len(), out.len());
    for_each_chunk(out, 4096, |i, chunk| {
        let src = &x[i * 4096..i * 4096 + chunk.len()];
        for (o, &v) in chunk.iter_mut().zip(src) {
            *o = f(v);
        }
    });
}

/// Elementwise zip of equal-length slices.
pub fn map_binary(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64 + Sync + Send) {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), out.len());
    for_each_chunk(out, 4096, |i, chunk| {
        let off = i * 4096;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(a[off + j], b[off + j]);
        }
    });
}

/// Parallel-safe fill of disjoint rows: out[i] = f(i) for row-major rows.
pub fn fill_rows(out: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    for_each_chunk(out, row_len, f);
}

/// Applies `f(b)` once per batch index; used for scatter-style backward
/// passes where only per-batch slices are disjoint.
pub fn per_batch(bsz: usize, f: impl Fn(usize) + Sync + Send) {
    for_each_index(bsz, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{set_exec_mode, ExecMode};

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn arb(len: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, &[99]);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a = arb(m * k, 1);
        let b = arb(k * n, 2);
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut out);
        let want = naive_matmul(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (m, k, n) = (6, 4, 5);
        let a = arb(m * k, 3);
        let bt = arb(n * k, 4);
        let mut out = vec![0.0; m * n];
        matmul_tb(&a, &bt, m, k, n, &mut out);
        // reference: transpose bt then multiply
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                b[kk * n + j] = bt[j * k + kk];
            }
        }
        let want = naive_matmul(&a, &b, m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = arb(m * k, 5); // interpret as [m, k] with output [k, n]
        let c = arb(m * n, 6);
        let mut out2 = vec![0.0; k * n];
        matmul_ta(&at, &c, m, k, n, &mut out2);
        let mut want2 = vec![0.0; k * n];
        for kk in 0..k {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += at[i * k + kk] * c[i * n + j];
                }
                want2[kk * n + j] = acc;
            }
        }
        for (x, y) in out2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let (m, k, n) = (33, 47, 29);
        let a = arb(m * k, 7);
        let b = arb(k * n, 8);
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        set_exec_mode(ExecMode::Sequential);
        matmul(&a, &b, m, k, n, &mut seq);
        set_exec_mode(ExecMode::Parallel);
        matmul(&a, &b, m, k, n, &mut par);
        set_exec_mode(ExecMode::Parallel);
        assert_eq!(
            seq.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            par.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adaptive_pool_equals_strided_mean_when_divisible() {
        let (b, h, w, c) = (1, 4, 4, 2);
        let x = arb(b * h * w * c, 9);
        let mut out = vec![0.0; b * 2 * 2 * c];
        adaptive_avg_pool(&x, b, h, w, c, 2, 2, &mut out);
        for oy in 0..2 {
            for ox in 0..2 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x[((oy * 2 + dy) * w + ox * 2 + dx) * c + ch];
                        }
                    }
                    let got = out[(oy * 2 + ox) * c + ch];
                    assert!((got - acc / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let (b, h, w, c) = (2, 5, 4, 3);
        let x = arb(b * h * w * c, 10);
        let y = arb(b * h * w * 9 * c, 11);
        let mut cols = vec![0.0; y.len()];
        im2col_3x3(&x, b, h, w, c, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_3x3(&y, b, h, w, c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_normalize() {
        let x = arb(4 * 7, 12);
        let mut out = vec![0.0; x.len()];
        softmax_rows(&x, 7, &mut out);
        for row in out.chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

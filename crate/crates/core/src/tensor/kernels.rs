//! Raw f32 compute loops behind the tensor ops.
//!
//! Reductions use a fixed order (and f64 accumulators where cheap), so
//! results are bit-identical across runs regardless of thread count:
//! parallelism is always over disjoint output regions.

use rayon::prelude::*;

/// Branch-free exponential: `2^n * exp(f ln 2)` with a degree-6 Taylor tail,
/// accurate to ~1 ulp over the clamped range. Pure arithmetic, so results
/// are identical across platforms and the surrounding loops vectorize
/// (libm's `expf` is an opaque call).
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let z = x * std::f32::consts::LOG2_E;
    let n = z.round();
    let t = (z - n) * std::f32::consts::LN_2;
    let p = 1.0
        + t * (1.0
            + t * (0.5
                + t * (1.0 / 6.0 + t * (1.0 / 24.0 + t * (1.0 / 120.0 + t * (1.0 / 720.0))))));
    let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
    scale * p
}

/// Logistic sigmoid on top of `fast_exp`.
#[inline]
pub fn fast_sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

/// Fused multiply-add when the target has hardware FMA; falls back to the
/// two-op form otherwise (software fma is a slow libcall).
#[inline(always)]
fn fmadd(a: f32, b: f32, c: f32) -> f32 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Dot product with eight independent lanes so LLVM can vectorize it.
/// The lane combination order is fixed.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (ka, kb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = fmadd(ka[l], kb[l], acc[l]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = fmadd(*x, *y, s);
    }
    s
}

/// `out += a * xs`, elementwise.
#[inline]
pub fn axpy(out: &mut [f32], a: f32, xs: &[f32]) {
    debug_assert_eq!(out.len(), xs.len());
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = fmadd(a, x, *o);
    }
}

// ---------------------------------------------------------------------------
// Matrix multiplication
//
// Inner loops must run over long contiguous rows to vectorize, so each form
// dispatches on its dimensions and transposes the thin operand when that
// buys longer rows (attention uses head dims of 8 against rows of 1024).
// ---------------------------------------------------------------------------

/// Row-length threshold below which a loop is overhead-dominated.
const THIN: usize = 16;

fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut Vec<f32>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Single-pass row product for small `k`: `out[j] = sum_p a[p] * b[p*n + j]`
/// with all `k` accumulations fused, so the output is written exactly once.
fn nn_row_fused_small_k(a: &[f32], b: &[f32], n: usize, out: &mut [f32]) {
    let k = a.len();
    let chunks = n / 8;
    for j0 in 0..chunks {
        let mut acc = [0.0f32; 8];
        for (p, &ap) in a.iter().enumerate() {
            let bp = &b[p * n + j0 * 8..][..8];
            for l in 0..8 {
                acc[l] += ap * bp[l];
            }
        }
        out[j0 * 8..j0 * 8 + 8].copy_from_slice(&acc);
    }
    for j in chunks * 8..n {
        let mut s = 0.0f32;
        for (p, &ap) in a.iter().enumerate() {
            s += ap * b[p * n + j];
        }
        out[j] = s;
    }
    debug_assert!(k == a.len());
}

/// 4x16 register-blocked tile: rows `i0..i0+4`, one 16-wide column tile.
/// The accumulators live in registers across the whole k loop and the
/// output tile is written exactly once.
#[inline]
fn micro_4x16(a: &[f32], k: usize, b: &[f32], n: usize, i0: usize, j0: usize, out: &mut [f32]) {
    let mut acc = [[0.0f32; 16]; 4];
    for p in 0..k {
        let brow = &b[p * n + j0..p * n + j0 + 16];
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let av = a[(i0 + r) * k + p];
            for l in 0..16 {
                acc_r[l] = fmadd(av, brow[l], acc_r[l]);
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        out[(i0 + r) * n + j0..(i0 + r) * n + j0 + 16].copy_from_slice(acc_r);
    }
}

/// Serial GEMM, `out[m,n] = a[m,k] · b[k,n]`, built on the 4x16 micro
/// kernel (column tiles of `b` stay cache-resident across the row sweep).
/// Small `k` takes a fused write-once path instead.
pub fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if k <= 12 {
        for i in 0..m {
            nn_row_fused_small_k(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
        }
        return;
    }
    let mut j0 = 0;
    while j0 + 16 <= n {
        let mut i0 = 0;
        while i0 + 4 <= m {
            micro_4x16(a, k, b, n, i0, j0, out);
            i0 += 4;
        }
        for i in i0..m {
            let mut acc = [0.0f32; 16];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j0 + 16];
                for l in 0..16 {
                    acc[l] = fmadd(av, brow[l], acc[l]);
                }
            }
            out[i * n + j0..i * n + j0 + 16].copy_from_slice(&acc);
        }
        j0 += 16;
    }
    if j0 < n {
        let jw = n - j0;
        for i in 0..m {
            let mut acc = [0.0f32; 16];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j0 + jw];
                for (l, &bv) in brow.iter().enumerate() {
                    acc[l] = fmadd(av, bv, acc[l]);
                }
            }
            out[i * n + j0..i * n + j0 + jw].copy_from_slice(&acc[..jw]);
        }
    }
}

fn nt_dot_rows(a: &[f32], bt: &[f32], k: usize, n: usize, out: &mut [f32]) {
    // one output row against row-major b-transposed: out[j] = <a, bt[j, :]>
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(a, &bt[j * k..(j + 1) * k]);
    }
    debug_assert_eq!(out.len(), n);
}

/// Serial `out[m,n] = a[m,k] · b[k,n]` (the batch is the caller's parallel axis).
pub fn matmul_nn_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n < THIN && k >= THIN {
        // thin output rows: dot against transposed b instead
        let mut bt = Vec::new();
        transpose(b, k, n, &mut bt);
        for i in 0..m {
            nt_dot_rows(&a[i * k..(i + 1) * k], &bt, k, n, &mut out[i * n..(i + 1) * n]);
        }
    } else {
        gemm_nn(a, b, m, k, n, out);
    }
}

/// Serial `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k < THIN && n >= THIN {
        // thin dots: axpy over rows of bᵀ (shape [k, n]) instead
        let mut bt = Vec::new();
        transpose(b, n, k, &mut bt);
        for i in 0..m {
            nn_row_fused_small_k(&a[i * k..(i + 1) * k], &bt, n, &mut out[i * n..(i + 1) * n]);
        }
    } else {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    }
}

/// Whether `aᵀb` is better served by transposing both operands and taking
/// long dots: thin output rows, or a tall `m` with a small output tile
/// (per-row axpy overhead would dominate).
fn tn_prefers_dots(m: usize, k: usize, n: usize) -> bool {
    (n < THIN && m >= THIN) || (m >= 8 * n.max(k) && n * k <= 16_384)
}

/// Serial `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if tn_prefers_dots(m, k, n) {
        let mut at = Vec::new();
        transpose(a, m, k, &mut at); // [k, m]
        let mut bt = Vec::new();
        transpose(b, m, n, &mut bt); // [n, m]
        for p in 0..k {
            let a_col = &at[p * m..(p + 1) * m];
            for j in 0..n {
                out[p * n + j] = dot(a_col, &bt[j * m..(j + 1) * m]);
            }
        }
    } else {
        out.fill(0.0);
        for i in 0..m {
            for p in 0..k {
                axpy(&mut out[p * n..(p + 1) * n], a[i * k + p], &b[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Parallel `out[m,n] = a[m,k] · b[k,n]` (row slabs of the output in parallel).
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if n < THIN && k >= THIN {
        let mut bt = Vec::new();
        transpose(b, k, n, &mut bt);
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            nt_dot_rows(&a[i * k..(i + 1) * k], &bt, k, n, out_row);
        });
    } else {
        let slab = 32.max(m / (4 * rayon::current_num_threads().max(1))).min(m.max(1));
        out.par_chunks_mut(slab * n)
            .enumerate()
            .for_each(|(si, out_slab)| {
                let i0 = si * slab;
                let rows = out_slab.len() / n;
                gemm_nn(&a[i0 * k..(i0 + rows) * k], b, rows, k, n, out_slab);
            });
    }
}

/// Parallel `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if k < THIN && n >= THIN {
        let mut bt = Vec::new();
        transpose(b, n, k, &mut bt);
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            nn_row_fused_small_k(&a[i * k..(i + 1) * k], &bt, n, out_row);
        });
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &b[j * k..(j + 1) * k]);
            }
        });
    }
}

/// Parallel `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if tn_prefers_dots(m, k, n) {
        let mut at = Vec::new();
        transpose(a, m, k, &mut at);
        let mut bt = Vec::new();
        transpose(b, m, n, &mut bt);
        out.par_chunks_mut(n).enumerate().for_each(|(p, out_row)| {
            let a_col = &at[p * m..(p + 1) * m];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_col, &bt[j * m..(j + 1) * m]);
            }
        });
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(p, out_row)| {
            out_row.fill(0.0);
            for i in 0..m {
                axpy(out_row, a[i * k + p], &b[i * n..(i + 1) * n]);
            }
        });
    }
}

// ---------------------------------------------------------------------------
// 2D convolution (zero padding)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
        (in_size + 2 * pad - k) / stride + 1
    }
}

/// Output positions `o` for which `o*stride + k - pad` lands in `[0, in_size)`.
#[inline]
fn valid_out_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    if in_size + pad <= k {
        return (0, 0);
    }
    let hi = ((in_size - 1 + pad - k) / stride + 1).min(out_size);
    (lo, hi.max(lo))
}

/// Gather one item's padded patches: `col[k, oh*ow]` with
/// `k = ci*kh*kw` indexed `(ic, kh, kw)`, matching the `[co, ci, kh, kw]`
/// kernel layout flattened to `[co, k]`.
fn im2col_2d(x_item: &[f32], d: &Conv2dDims, col: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let iplane = d.h * d.w;
    for ic in 0..d.ci {
        let xp = &x_item[ic * iplane..][..iplane];
        for kh in 0..d.kh {
            let (oh_lo, oh_hi) = valid_out_range(kh, d.pad, d.stride, d.h, d.oh);
            for kw in 0..d.kw {
                let row = &mut col[((ic * d.kh + kh) * d.kw + kw) * ohw..][..ohw];
                let (ow_lo, ow_hi) = valid_out_range(kw, d.pad, d.stride, d.w, d.ow);
                row[..oh_lo * d.ow].fill(0.0);
                row[oh_hi * d.ow..].fill(0.0);
                if ow_lo >= ow_hi {
                    row.fill(0.0);
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * d.stride + kh - d.pad;
                    let iw0 = ow_lo * d.stride + kw - d.pad;
                    let dst = &mut row[oh * d.ow..(oh + 1) * d.ow];
                    dst[..ow_lo].fill(0.0);
                    dst[ow_hi..].fill(0.0);
                    if d.stride == 1 {
                        dst[ow_lo..ow_hi].copy_from_slice(&xp[ih * d.w + iw0..][..ow_hi - ow_lo]);
                    } else {
                        let xrow = &xp[ih * d.w..(ih + 1) * d.w];
                        for (j, o) in dst[ow_lo..ow_hi].iter_mut().enumerate() {
                            *o = xrow[iw0 + j * d.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of `im2col_2d`: `gx_item += col2im(tmp)`.
fn col2im_2d(tmp: &[f32], d: &Conv2dDims, gx_item: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let iplane = d.h * d.w;
    gx_item.fill(0.0);
    for ic in 0..d.ci {
        let gxp = &mut gx_item[ic * iplane..][..iplane];
        for kh in 0..d.kh {
            let (oh_lo, oh_hi) = valid_out_range(kh, d.pad, d.stride, d.h, d.oh);
            for kw in 0..d.kw {
                let row = &tmp[((ic * d.kh + kh) * d.kw + kw) * ohw..][..ohw];
                let (ow_lo, ow_hi) = valid_out_range(kw, d.pad, d.stride, d.w, d.ow);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * d.stride + kh - d.pad;
                    let iw0 = ow_lo * d.stride + kw - d.pad;
                    let src = &row[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                    if d.stride == 1 {
                        axpy(&mut gxp[ih * d.w + iw0..][..ow_hi - ow_lo], 1.0, src);
                    } else {
                        for (j, &g) in src.iter().enumerate() {
                            gxp[ih * d.w + iw0 + j * d.stride] += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_fwd(x: &[f32], wgt: &[f32], bias: Option<&[f32]>, d: &Conv2dDims, out: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let k = d.ci * d.kh * d.kw;
    let iplane = d.h * d.w;
    out.par_chunks_mut(d.co * ohw).enumerate().for_each(|(b, out_item)| {
        let mut col = vec![0.0f32; k * ohw];
        im2col_2d(&x[b * d.ci * iplane..][..d.ci * iplane], d, &mut col);
        gemm_nn(wgt, &col, d.co, k, ohw, out_item);
        if let Some(bv) = bias {
            for (oc, orow) in out_item.chunks_mut(ohw).enumerate() {
                let bias_v = bv[oc];
                for o in orow.iter_mut() {
                    *o += bias_v;
                }
            }
        }
    });
}

/// Gradient w.r.t. the input: `col2im(Wᵀ · gy)` per item.
pub fn conv2d_grad_x(gy: &[f32], wgt: &[f32], d: &Conv2dDims, gx: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let k = d.ci * d.kh * d.kw;
    let iplane = d.h * d.w;
    let mut wt = Vec::new();
    transpose(wgt, d.co, k, &mut wt); // [k, co]
    gx.par_chunks_mut(d.ci * iplane).enumerate().for_each(|(b, gx_item)| {
        let mut tmp = vec![0.0f32; k * ohw];
        gemm_nn(&wt, &gy[b * d.co * ohw..][..d.co * ohw], k, d.co, ohw, &mut tmp);
        col2im_2d(&tmp, d, gx_item);
    });
}

/// Gradient w.r.t. the kernel: `sum_b gy_b · col_bᵀ`, accumulated in f64
/// with a fixed item order, so results are independent of scheduling.
pub fn conv2d_grad_w(x: &[f32], gy: &[f32], d: &Conv2dDims, gw: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let k = d.ci * d.kh * d.kw;
    let iplane = d.h * d.w;
    let mut cols = vec![0.0f32; d.batch * k * ohw];
    cols.par_chunks_mut(k * ohw).enumerate().for_each(|(b, col)| {
        im2col_2d(&x[b * d.ci * iplane..][..d.ci * iplane], d, col);
    });
    gw.par_chunks_mut(k).enumerate().for_each(|(oc, gw_row)| {
        for (kk, g) in gw_row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for b in 0..d.batch {
                let gy_row = &gy[(b * d.co + oc) * ohw..][..ohw];
                let col_row = &cols[(b * k + kk) * ohw..][..ohw];
                acc += dot(gy_row, col_row) as f64;
            }
            *g += acc as f32;
        }
    });
}

pub fn conv2d_grad_bias(gy: &[f32], d: &Conv2dDims, gb: &mut [f32]) {
    let oplane = d.oh * d.ow;
    for (oc, g) in gb.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for b in 0..d.batch {
            for v in &gy[(b * d.co + oc) * oplane..][..oplane] {
                acc += *v as f64;
            }
        }
        *g += acc as f32;
    }
}

// ---------------------------------------------------------------------------
// 3D convolution (stride 1, zero padding)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Conv3dDims {
    pub batch: usize,
    pub ci: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
}

/// 3D analogue of `im2col_2d`: `col[k, od*oh*ow]`, `k = ci*k^3`, stride 1.
fn im2col_3d(x_item: &[f32], dm: &Conv3dDims, col: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    let ivol = dm.d * dm.h * dm.w;
    let kvol = dm.k * dm.k * dm.k;
    for ic in 0..dm.ci {
        let xp = &x_item[ic * ivol..][..ivol];
        for kd in 0..dm.k {
            let (od_lo, od_hi) = valid_out_range(kd, dm.pad, 1, dm.d, dm.od);
            for kh in 0..dm.k {
                let (oh_lo, oh_hi) = valid_out_range(kh, dm.pad, 1, dm.h, dm.oh);
                for kw in 0..dm.k {
                    let kk = ic * kvol + (kd * dm.k + kh) * dm.k + kw;
                    let row = &mut col[kk * ovol..][..ovol];
                    row.fill(0.0);
                    let (ow_lo, ow_hi) = valid_out_range(kw, dm.pad, 1, dm.w, dm.ow);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let iw0 = ow_lo + kw - dm.pad;
                    for od in od_lo..od_hi {
                        let id_ = od + kd - dm.pad;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - dm.pad;
                            row[(od * dm.oh + oh) * dm.ow + ow_lo..(od * dm.oh + oh) * dm.ow + ow_hi]
                                .copy_from_slice(&xp[(id_ * dm.h + ih) * dm.w + iw0..][..ow_hi - ow_lo]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_3d(tmp: &[f32], dm: &Conv3dDims, gx_item: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    let ivol = dm.d * dm.h * dm.w;
    let kvol = dm.k * dm.k * dm.k;
    gx_item.fill(0.0);
    for ic in 0..dm.ci {
        let gxp = &mut gx_item[ic * ivol..][..ivol];
        for kd in 0..dm.k {
            let (od_lo, od_hi) = valid_out_range(kd, dm.pad, 1, dm.d, dm.od);
            for kh in 0..dm.k {
                let (oh_lo, oh_hi) = valid_out_range(kh, dm.pad, 1, dm.h, dm.oh);
                for kw in 0..dm.k {
                    let kk = ic * kvol + (kd * dm.k + kh) * dm.k + kw;
                    let row = &tmp[kk * ovol..][..ovol];
                    let (ow_lo, ow_hi) = valid_out_range(kw, dm.pad, 1, dm.w, dm.ow);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let iw0 = ow_lo + kw - dm.pad;
                    for od in od_lo..od_hi {
                        let id_ = od + kd - dm.pad;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - dm.pad;
                            axpy(
                                &mut gxp[(id_ * dm.h + ih) * dm.w + iw0..][..ow_hi - ow_lo],
                                1.0,
                                &row[(od * dm.oh + oh) * dm.ow + ow_lo..(od * dm.oh + oh) * dm.ow + ow_hi],
                            );
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_fwd(x: &[f32], wgt: &[f32], bias: Option<&[f32]>, dm: &Conv3dDims, out: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    let ivol = dm.d * dm.h * dm.w;
    let k = dm.ci * dm.k * dm.k * dm.k;
    out.par_chunks_mut(dm.co * ovol).enumerate().for_each(|(b, out_item)| {
        let mut col = vec![0.0f32; k * ovol];
        im2col_3d(&x[b * dm.ci * ivol..][..dm.ci * ivol], dm, &mut col);
        gemm_nn(wgt, &col, dm.co, k, ovol, out_item);
        if let Some(bv) = bias {
            for (oc, orow) in out_item.chunks_mut(ovol).enumerate() {
                let bias_v = bv[oc];
                for o in orow.iter_mut() {
                    *o += bias_v;
                }
            }
        }
    });
}

pub fn conv3d_grad_x(gy: &[f32], wgt: &[f32], dm: &Conv3dDims, gx: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    let ivol = dm.d * dm.h * dm.w;
    let k = dm.ci * dm.k * dm.k * dm.k;
    let mut wt = Vec::new();
    transpose(wgt, dm.co, k, &mut wt);
    gx.par_chunks_mut(dm.ci * ivol).enumerate().for_each(|(b, gx_item)| {
        let mut tmp = vec![0.0f32; k * ovol];
        gemm_nn(&wt, &gy[b * dm.co * ovol..][..dm.co * ovol], k, dm.co, ovol, &mut tmp);
        col2im_3d(&tmp, dm, gx_item);
    });
}

pub fn conv3d_grad_w(x: &[f32], gy: &[f32], dm: &Conv3dDims, gw: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    let ivol = dm.d * dm.h * dm.w;
    let k = dm.ci * dm.k * dm.k * dm.k;
    let mut cols = vec![0.0f32; dm.batch * k * ovol];
    cols.par_chunks_mut(k * ovol).enumerate().for_each(|(b, col)| {
        im2col_3d(&x[b * dm.ci * ivol..][..dm.ci * ivol], dm, col);
    });
    gw.par_chunks_mut(k).enumerate().for_each(|(oc, gw_row)| {
        for (kk, g) in gw_row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for b in 0..dm.batch {
                let gy_row = &gy[(b * dm.co + oc) * ovol..][..ovol];
                let col_row = &cols[(b * k + kk) * ovol..][..ovol];
                acc += dot(gy_row, col_row) as f64;
            }
            *g += acc as f32;
        }
    });
}

pub fn conv3d_grad_bias(gy: &[f32], dm: &Conv3dDims, gb: &mut [f32]) {
    let ovol = dm.od * dm.oh * dm.ow;
    for (oc, g) in gb.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for b in 0..dm.batch {
            for v in &gy[(b * dm.co + oc) * ovol..][..ovol] {
                acc += *v as f64;
            }
        }
        *g += acc as f32;
    }
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

/// Softmax over contiguous rows of length `len` (last-axis layout).
pub fn softmax_rows(x: &[f32], len: usize, out: &mut [f32]) {
    out.par_chunks_mut(len).zip(x.par_chunks(len)).for_each(|(o, r)| {
        let mut m = f32::NEG_INFINITY;
        for &v in r {
            m = m.max(v);
        }
        for (oi, &v) in o.iter_mut().zip(r) {
            *oi = fast_exp(v - m);
        }
        let mut sum = 0.0f64;
        for &e in o.iter() {
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for oi in o.iter_mut() {
            *oi *= inv;
        }
    });
}

/// dL/dx for softmax over rows: y * (g - <g, y>).
pub fn softmax_rows_grad(y: &[f32], g: &[f32], len: usize, gx: &mut [f32]) {
    gx.par_chunks_mut(len).enumerate().for_each(|(i, gxr)| {
        let yr = &y[i * len..(i + 1) * len];
        let gr = &g[i * len..(i + 1) * len];
        let s = dot(gr, yr);
        for j in 0..len {
            gxr[j] += yr[j] * (gr[j] - s);
        }
    });
}

/// Per-group mean and 1/sqrt(var + eps) over groups of `n` contiguous values.
pub fn moments(x: &[f32], n: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let groups = x.len() / n;
    let mut means = vec![0.0f32; groups];
    let mut invs = vec![0.0f32; groups];
    for gi in 0..groups {
        let seg = &x[gi * n..(gi + 1) * n];
        let mut s = 0.0f64;
        for &v in seg {
            s += v as f64;
        }
        let mean = s / n as f64;
        let mut v2 = 0.0f64;
        for &v in seg {
            let d = v as f64 - mean;
            v2 += d * d;
        }
        let var = v2 / n as f64;
        means[gi] = mean as f32;
        invs[gi] = (1.0 / (var + eps as f64).sqrt()) as f32;
    }
    (means, invs)
}

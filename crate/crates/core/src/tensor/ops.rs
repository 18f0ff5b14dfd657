//! Differentiable tensor operations.
//!
//! Every op validates shapes up front, computes the forward value, and
//! records a closure that accumulates exact analytic gradients into its
//! parents. Gradient buffers are written via temporaries plus `axpy`, so
//! repeated consumers of a tensor accumulate correctly.

use rayon::prelude::*;

use super::kernels::{self, axpy, Conv2dDims, Conv3dDims};
use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Cache-tiled 2D transpose: `dst[c, r] = src[r, c]`.
fn transpose_2d(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const T: usize = 32;
    for r0 in (0..rows).step_by(T) {
        let r1 = rows.min(r0 + T);
        for c0 in (0..cols).step_by(T) {
            let c1 = cols.min(c0 + T);
            for r in r0..r1 {
                let off = r * cols;
                for c in c0..c1 {
                    dst[c * rows + r] = src[off + c];
                }
            }
        }
    }
}

/// Copy with permuted axes; returns (out_shape, out_data).
///
/// Adjacent axes that stay adjacent are merged first; the common cases then
/// collapse to a memcpy, a (batched) tiled transpose, or odometer iteration
/// with contiguous run copies. Only exotic permutations fall back to the
/// scalar odometer.
fn permute_copy(src: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0f32; src.len()];

    // merge runs of consecutive input axes appearing consecutively in output
    let mut groups: Vec<(usize, usize)> = Vec::new(); // (input start, len)
    for &a in axes {
        if let Some(last) = groups.last_mut() {
            if a == last.0 + last.1 {
                last.1 += 1;
                continue;
            }
        }
        groups.push((a, 1));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&g| groups[g].0);
    let eff_in_dims: Vec<usize> = order
        .iter()
        .map(|&g| shape[groups[g].0..groups[g].0 + groups[g].1].iter().product())
        .collect();
    let mut rank_of = vec![0usize; groups.len()];
    for (rank, &g) in order.iter().enumerate() {
        rank_of[g] = rank;
    }
    let eff_perm: Vec<usize> = (0..groups.len()).map(|g| rank_of[g]).collect();

    match eff_perm.as_slice() {
        [_] => out.copy_from_slice(src),
        [1, 0] => transpose_2d(src, eff_in_dims[0], eff_in_dims[1], &mut out),
        [0, 2, 1] => {
            let (b, r, c) = (eff_in_dims[0], eff_in_dims[1], eff_in_dims[2]);
            for i in 0..b {
                transpose_2d(&src[i * r * c..(i + 1) * r * c], r, c, &mut out[i * r * c..(i + 1) * r * c]);
            }
        }
        _ => {
            let eff_nd = eff_perm.len();
            let in_strides = strides_of(&eff_in_dims);
            let out_dims: Vec<usize> = eff_perm.iter().map(|&p| eff_in_dims[p]).collect();
            let os: Vec<usize> = eff_perm.iter().map(|&p| in_strides[p]).collect();
            if eff_perm[eff_nd - 1] == eff_nd - 1 {
                // last axis preserved: copy contiguous runs
                let run = out_dims[eff_nd - 1];
                let outer = eff_nd - 1;
                let mut idx = vec![0usize; outer];
                let mut off = 0usize;
                for chunk in out.chunks_exact_mut(run) {
                    chunk.copy_from_slice(&src[off..off + run]);
                    for ax in (0..outer).rev() {
                        idx[ax] += 1;
                        off += os[ax];
                        if idx[ax] < out_dims[ax] {
                            break;
                        }
                        off -= os[ax] * out_dims[ax];
                        idx[ax] = 0;
                    }
                }
            } else {
                let mut idx = vec![0usize; eff_nd];
                let mut off = 0usize;
                for o in out.iter_mut() {
                    *o = src[off];
                    for ax in (0..eff_nd).rev() {
                        idx[ax] += 1;
                        off += os[ax];
                        if idx[ax] < out_dims[ax] {
                            break;
                        }
                        off -= os[ax] * out_dims[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
    (out_shape, out)
}

impl Tensor {
    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
                ctx.parents[1].accum_grad(|g| axpy(g, -1.0, ctx.grad_out));
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                ctx.parents[0].accum_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad_out[i] * b[i];
                    }
                });
                ctx.parents[1].accum_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad_out[i] * a[i];
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, c, ctx.grad_out));
            }),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
            }),
        )
    }

    pub fn silu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| x * kernels::fast_sigmoid(x))
            .collect();
        Tensor::from_op(
            "silu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.parents[0].data();
                ctx.parents[0].accum_grad(|g| {
                    for i in 0..g.len() {
                        let s = kernels::fast_sigmoid(x[i]);
                        g[i] += ctx.grad_out[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                });
            }),
        )
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor> {
        let mut acc = 0.0f64;
        for &v in self.data() {
            acc += v as f64;
        }
        Ok(Tensor::from_op(
            "sum_all",
            vec![1],
            vec![acc as f32],
            vec![self.clone()],
            Box::new(|ctx| {
                let g0 = ctx.grad_out[0];
                ctx.parents[0].accum_grad(|g| g.iter_mut().for_each(|v| *v += g0));
            }),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::invalid("mean_all: empty tensor"));
        }
        let n = self.numel();
        let mut acc = 0.0f64;
        for &v in self.data() {
            acc += v as f64;
        }
        Ok(Tensor::from_op(
            "mean_all",
            vec![1],
            vec![(acc / n as f64) as f32],
            vec![self.clone()],
            Box::new(move |ctx| {
                let g0 = ctx.grad_out[0] / n as f32;
                ctx.parents[0].accum_grad(|g| g.iter_mut().for_each(|v| *v += g0));
            }),
        ))
    }

    /// Mean squared error between `self` (prediction) and `target`.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let n = self.numel();
        let mut acc = 0.0f64;
        for (p, t) in self.data().iter().zip(target.data()) {
            let d = (p - t) as f64;
            acc += d * d;
        }
        Ok(Tensor::from_op(
            "mse",
            vec![1],
            vec![(acc / n as f64) as f32],
            vec![self.clone(), target.clone()],
            Box::new(move |ctx| {
                let c = ctx.grad_out[0] * 2.0 / n as f32;
                let p = ctx.parents[0].data();
                let t = ctx.parents[1].data();
                ctx.parents[0].accum_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += c * (p[i] - t[i]);
                    }
                });
                ctx.parents[1].accum_grad(|g| {
                    for i in 0..g.len() {
                        g[i] -= c * (p[i] - t[i]);
                    }
                });
            }),
        ))
    }

    // -- shape manipulation --------------------------------------------------

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
            }),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute: {:?} is not a permutation of 0..{}",
                axes, nd
            )));
        }
        let (out_shape, data) = permute_copy(self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let fwd_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let (_, gin) = permute_copy(ctx.grad_out, &fwd_shape, &inverse);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gin));
            }),
        ))
    }

    // -- matrix products -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if s.len() != 2 || o.len() != 2 || s[1] != o[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: s.to_vec(),
                rhs: o.to_vec(),
            });
        }
        let (m, k, n) = (s[0], s[1], o[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_nn(self.data(), other.data(), m, k, n, &mut out);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let mut ga = vec![0.0f32; m * k];
                kernels::matmul_nt(ctx.grad_out, b, m, n, k, &mut ga);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &ga));
                let mut gb = vec![0.0f32; k * n];
                kernels::matmul_tn(a, ctx.grad_out, m, k, n, &mut gb);
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gb));
            }),
        ))
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if s.len() != 3 || o.len() != 3 || s[0] != o[0] || s[2] != o[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: s.to_vec(),
                rhs: o.to_vec(),
            });
        }
        let (bsz, m, k, n) = (s[0], s[1], s[2], o[2]);
        let mut out = vec![0.0f32; bsz * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, op)| {
            kernels::matmul_nn_serial(
                &self.data()[i * m * k..][..m * k],
                &other.data()[i * k * n..][..k * n],
                m,
                k,
                n,
                op,
            );
        });
        Ok(Tensor::from_op(
            "bmm",
            vec![bsz, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let mut ga = vec![0.0f32; bsz * m * k];
                ga.par_chunks_mut(m * k).enumerate().for_each(|(i, gap)| {
                    kernels::matmul_nt_serial(
                        &ctx.grad_out[i * m * n..][..m * n],
                        &b[i * k * n..][..k * n],
                        m,
                        n,
                        k,
                        gap,
                    );
                });
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &ga));
                let mut gb = vec![0.0f32; bsz * k * n];
                gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gbp)| {
                    kernels::matmul_tn_serial(
                        &a[i * m * k..][..m * k],
                        &ctx.grad_out[i * m * n..][..m * n],
                        m,
                        k,
                        n,
                        gbp,
                    );
                });
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gb));
            }),
        ))
    }

    /// Batched `[B,m,k] x [B,n,k]ᵀ -> [B,m,n]` (keys stay row-major).
    pub fn bmm_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if s.len() != 3 || o.len() != 3 || s[0] != o[0] || s[2] != o[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                lhs: s.to_vec(),
                rhs: o.to_vec(),
            });
        }
        let (bsz, m, k, n) = (s[0], s[1], s[2], o[1]);
        let mut out = vec![0.0f32; bsz * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, op)| {
            kernels::matmul_nt_serial(
                &self.data()[i * m * k..][..m * k],
                &other.data()[i * n * k..][..n * k],
                m,
                k,
                n,
                op,
            );
        });
        Ok(Tensor::from_op(
            "bmm_nt",
            vec![bsz, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let mut ga = vec![0.0f32; bsz * m * k];
                ga.par_chunks_mut(m * k).enumerate().for_each(|(i, gap)| {
                    kernels::matmul_nn_serial(
                        &ctx.grad_out[i * m * n..][..m * n],
                        &b[i * n * k..][..n * k],
                        m,
                        n,
                        k,
                        gap,
                    );
                });
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &ga));
                let mut gb = vec![0.0f32; bsz * n * k];
                gb.par_chunks_mut(n * k).enumerate().for_each(|(i, gbp)| {
                    kernels::matmul_tn_serial(
                        &ctx.grad_out[i * m * n..][..m * n],
                        &a[i * m * k..][..m * k],
                        m,
                        n,
                        k,
                        gbp,
                    );
                });
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gb));
            }),
        ))
    }

    /// `[rows, cin] x [cin, cout] (+ bias[cout]) -> [rows, cout]`
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (s, ws) = (self.shape(), weight.shape());
        if s.len() != 2 || ws.len() != 2 || s[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: s.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (rows, cin, cout) = (s[0], s[1], ws[1]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "linear(bias)",
                    lhs: b.shape().to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let mut out = vec![0.0f32; rows * cout];
        kernels::matmul_nn(self.data(), weight.data(), rows, cin, cout, &mut out);
        if let Some(b) = bias {
            for r in out.chunks_mut(cout) {
                axpy(r, 1.0, b.data());
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "linear",
            vec![rows, cout],
            out,
            parents,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let w = ctx.parents[1].data();
                let mut gx = vec![0.0f32; rows * cin];
                kernels::matmul_nt(ctx.grad_out, w, rows, cout, cin, &mut gx);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gx));
                let mut gw = vec![0.0f32; cin * cout];
                kernels::matmul_tn(x, ctx.grad_out, rows, cin, cout, &mut gw);
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gw));
                if ctx.parents.len() == 3 {
                    ctx.parents[2].accum_grad(|g| {
                        for row in ctx.grad_out.chunks(cout) {
                            axpy(g, 1.0, row);
                        }
                    });
                }
            }),
        ))
    }

    // -- convolution ---------------------------------------------------------

    /// 2D convolution with zero padding. `x:[b,ci,h,w]`, `w:[co,ci,kh,kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (s, ws) = (self.shape(), weight.shape());
        if s.len() != 4 || ws.len() != 4 || s[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: s.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let d = Conv2dDims {
            batch: s[0],
            ci: s[1],
            h: s[2],
            w: s[3],
            co: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: Conv2dDims::out_size(s[2], ws[2], stride, pad),
            ow: Conv2dDims::out_size(s[3], ws[3], stride, pad),
            stride,
            pad,
        };
        if let Some(b) = bias {
            if b.shape() != [d.co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d(bias)",
                    lhs: b.shape().to_vec(),
                    rhs: vec![d.co],
                });
            }
        }
        let mut out = vec![0.0f32; d.batch * d.co * d.oh * d.ow];
        kernels::conv2d_fwd(self.data(), weight.data(), bias.map(|b| b.data()), &d, &mut out);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            vec![d.batch, d.co, d.oh, d.ow],
            out,
            parents,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let w = ctx.parents[1].data();
                let mut gx = vec![0.0f32; x.len()];
                kernels::conv2d_grad_x(ctx.grad_out, w, &d, &mut gx);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gx));
                let mut gw = vec![0.0f32; w.len()];
                kernels::conv2d_grad_w(x, ctx.grad_out, &d, &mut gw);
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gw));
                if ctx.parents.len() == 3 {
                    let mut gb = vec![0.0f32; d.co];
                    kernels::conv2d_grad_bias(ctx.grad_out, &d, &mut gb);
                    ctx.parents[2].accum_grad(|g| axpy(g, 1.0, &gb));
                }
            }),
        ))
    }

    /// 3D convolution, stride 1, zero padding. `x:[b,ci,d,h,w]`, `w:[co,ci,k,k,k]`.
    pub fn conv3d(&self, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
        let (s, ws) = (self.shape(), weight.shape());
        if s.len() != 5 || ws.len() != 5 || s[1] != ws[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: s.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let k = ws[2];
        let dm = Conv3dDims {
            batch: s[0],
            ci: s[1],
            d: s[2],
            h: s[3],
            w: s[4],
            co: ws[0],
            k,
            od: s[2] + 2 * pad - k + 1,
            oh: s[3] + 2 * pad - k + 1,
            ow: s[4] + 2 * pad - k + 1,
            pad,
        };
        if let Some(b) = bias {
            if b.shape() != [dm.co] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d(bias)",
                    lhs: b.shape().to_vec(),
                    rhs: vec![dm.co],
                });
            }
        }
        let mut out = vec![0.0f32; dm.batch * dm.co * dm.od * dm.oh * dm.ow];
        kernels::conv3d_fwd(self.data(), weight.data(), bias.map(|b| b.data()), &dm, &mut out);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv3d",
            vec![dm.batch, dm.co, dm.od, dm.oh, dm.ow],
            out,
            parents,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let w = ctx.parents[1].data();
                let mut gx = vec![0.0f32; x.len()];
                kernels::conv3d_grad_x(ctx.grad_out, w, &dm, &mut gx);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gx));
                let mut gw = vec![0.0f32; w.len()];
                kernels::conv3d_grad_w(x, ctx.grad_out, &dm, &mut gw);
                ctx.parents[1].accum_grad(|g| axpy(g, 1.0, &gw));
                if ctx.parents.len() == 3 {
                    let mut gb = vec![0.0f32; dm.co];
                    kernels::conv3d_grad_bias(ctx.grad_out, &dm, &mut gb);
                    ctx.parents[2].accum_grad(|g| axpy(g, 1.0, &gb));
                }
            }),
        ))
    }

    // -- normalization / activation structure --------------------------------

    /// Softmax along `axis`. Values are shifted by the row max before
    /// exponentiation, so adding a constant to a row leaves the result
    /// unchanged up to rounding.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let nd = self.shape().len();
        if axis >= nd {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        if axis + 1 == nd {
            return Ok(self.softmax_last());
        }
        // Move the axis last, apply the fast path, move it back. Both
        // permutes record their own gradients.
        let mut axes: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
        axes.push(axis);
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.permute(&axes)?.softmax_last().permute(&inverse)
    }

    fn softmax_last(&self) -> Tensor {
        let len = *self.shape().last().unwrap();
        let mut out = vec![0.0f32; self.numel()];
        kernels::softmax_rows(self.data(), len, &mut out);
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![0.0f32; ctx.grad_out.len()];
                kernels::softmax_rows_grad(ctx.out_data, ctx.grad_out, len, &mut gx);
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gx));
            }),
        )
    }

    /// Group normalization over `[b, c, spatial...]` with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::invalid("group_norm: input must be [b, c, ...]"));
        }
        let (b, c) = (s[0], s[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm(affine)",
                lhs: gamma.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let spatial: usize = s[2..].iter().product();
        let cpg = c / groups;
        let n = cpg * spatial; // elements per (batch, group)
        let (means, invs) = kernels::moments(self.data(), n, eps);

        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let gidx = bi * groups + gi;
                let (mu, inv) = (means[gidx], invs[gidx]);
                for cc in 0..cpg {
                    let ch = gi * cpg + cc;
                    let base = (bi * c + ch) * spatial;
                    let (ga, be) = (gm[ch], bt[ch]);
                    for i in 0..spatial {
                        out[base + i] = (x[base + i] - mu) * inv * ga + be;
                    }
                }
            }
        }

        Ok(Tensor::from_op(
            "group_norm",
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let gm = ctx.parents[1].data();
                let go = ctx.grad_out;

                // d/dx: inv * (ghat - mean(ghat) - xhat * mean(ghat * xhat))
                let mut gx = vec![0.0f32; x.len()];
                for bi in 0..b {
                    for gi in 0..groups {
                        let gidx = bi * groups + gi;
                        let (mu, inv) = (means[gidx], invs[gidx]);
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let base = (bi * c + ch) * spatial;
                            for i in 0..spatial {
                                let ghat = (go[base + i] * gm[ch]) as f64;
                                let xhat = ((x[base + i] - mu) * inv) as f64;
                                s1 += ghat;
                                s2 += ghat * xhat;
                            }
                        }
                        let m1 = (s1 / n as f64) as f32;
                        let m2 = (s2 / n as f64) as f32;
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let base = (bi * c + ch) * spatial;
                            for i in 0..spatial {
                                let ghat = go[base + i] * gm[ch];
                                let xhat = (x[base + i] - mu) * inv;
                                gx[base + i] = inv * (ghat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, &gx));

                ctx.parents[1].accum_grad(|g| {
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for bi in 0..b {
                            let gidx = bi * groups + ch / cpg;
                            let (mu, inv) = (means[gidx], invs[gidx]);
                            let base = (bi * c + ch) * spatial;
                            for i in 0..spatial {
                                acc += (go[base + i] * (x[base + i] - mu) * inv) as f64;
                            }
                        }
                        g[ch] += acc as f32;
                    }
                });
                ctx.parents[2].accum_grad(|g| {
                    for ch in 0..c {
                        let mut acc = 0.0f64;
                        for bi in 0..b {
                            let base = (bi * c + ch) * spatial;
                            for i in 0..spatial {
                                acc += go[base + i] as f64;
                            }
                        }
                        g[ch] += acc as f32;
                    }
                });
            }),
        ))
    }

    /// Per-channel scale/shift modulation: `y = x*(1+s) + t` with
    /// `x:[b,c,spatial...]`, `s,t:[b,c]`.
    pub fn film(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::invalid("film: input must be [b, c, ...]"));
        }
        let (b, c) = (s[0], s[1]);
        if scale.shape() != [b, c] || shift.shape() != [b, c] {
            return Err(Error::ShapeMismatch {
                op: "film",
                lhs: s.to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let spatial: usize = s[2..].iter().product();
        let x = self.data();
        let sc = scale.data();
        let sh = shift.data();
        let mut out = vec![0.0f32; x.len()];
        for bc in 0..b * c {
            let (a, t) = (1.0 + sc[bc], sh[bc]);
            let base = bc * spatial;
            for i in 0..spatial {
                out[base + i] = x[base + i] * a + t;
            }
        }
        Ok(Tensor::from_op(
            "film",
            s.to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let sc = ctx.parents[1].data();
                let go = ctx.grad_out;
                ctx.parents[0].accum_grad(|g| {
                    for bc in 0..b * c {
                        let a = 1.0 + sc[bc];
                        let base = bc * spatial;
                        axpy(&mut g[base..base + spatial], a, &go[base..base + spatial]);
                    }
                });
                ctx.parents[1].accum_grad(|g| {
                    for bc in 0..b * c {
                        let base = bc * spatial;
                        let mut acc = 0.0f64;
                        for i in 0..spatial {
                            acc += (go[base + i] * x[base + i]) as f64;
                        }
                        g[bc] += acc as f32;
                    }
                });
                ctx.parents[2].accum_grad(|g| {
                    for bc in 0..b * c {
                        let base = bc * spatial;
                        let mut acc = 0.0f64;
                        for i in 0..spatial {
                            acc += go[base + i] as f64;
                        }
                        g[bc] += acc as f32;
                    }
                });
            }),
        ))
    }

    // -- gather / resampling ---------------------------------------------------

    /// Row lookup: `table:[r,c]`, returns `[indices.len(), c]`.
    pub fn rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::invalid("rows: table must be 2D"));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("rows: index {bad} >= {r}")));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&table.data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "rows",
            vec![indices.len(), c],
            out,
            vec![table.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accum_grad(|g| {
                    for (pos, &i) in idx.iter().enumerate() {
                        axpy(&mut g[i * c..(i + 1) * c], 1.0, &ctx.grad_out[pos * c..(pos + 1) * c]);
                    }
                });
            }),
        ))
    }

    /// Nearest-neighbor 2x spatial upsampling of `[b,c,h,w]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("upsample_nearest2x: input must be [b,c,h,w]"));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0f32; bc * oh * ow];
        for p in 0..bc {
            let xp = &x[p * h * w..][..h * w];
            let op = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                let xrow = &xp[(y / 2) * w..][..w];
                let orow = &mut op[y * ow..][..ow];
                for (i, o) in orow.iter_mut().enumerate() {
                    *o = xrow[i / 2];
                }
            }
        }
        Ok(Tensor::from_op(
            "upsample_nearest2x",
            vec![s[0], s[1], oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accum_grad(|g| {
                    for p in 0..bc {
                        let gp = &ctx.grad_out[p * oh * ow..][..oh * ow];
                        let gx = &mut g[p * h * w..][..h * w];
                        for y in 0..oh {
                            for i in 0..ow {
                                gx[(y / 2) * w + i / 2] += gp[y * ow + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Average pooling of `[b,c,d,h,w]` by integer factors per spatial axis.
    pub fn avg_pool3d(&self, fd: usize, fh: usize, fw: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::invalid("avg_pool3d: input must be [b,c,d,h,w]"));
        }
        let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        if fd == 0 || fh == 0 || fw == 0 || d % fd != 0 || h % fh != 0 || w % fw != 0 {
            return Err(Error::invalid(format!(
                "avg_pool3d: dims {:?} not divisible by factors ({fd},{fh},{fw})",
                &s[2..]
            )));
        }
        let (od, oh, ow) = (d / fd, h / fh, w / fw);
        let inv = 1.0 / (fd * fh * fw) as f32;
        let x = self.data();
        let mut out = vec![0.0f32; bc * od * oh * ow];
        for p in 0..bc {
            let xp = &x[p * d * h * w..][..d * h * w];
            let op = &mut out[p * od * oh * ow..][..od * oh * ow];
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = 0.0f32;
                        for id_ in zd * fd..(zd + 1) * fd {
                            for ih in zh * fh..(zh + 1) * fh {
                                for iw in zw * fw..(zw + 1) * fw {
                                    acc += xp[(id_ * h + ih) * w + iw];
                                }
                            }
                        }
                        op[(zd * oh + zh) * ow + zw] = acc * inv;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "avg_pool3d",
            vec![s[0], s[1], od, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accum_grad(|g| {
                    for p in 0..bc {
                        let gp = &ctx.grad_out[p * od * oh * ow..][..od * oh * ow];
                        let gx = &mut g[p * d * h * w..][..d * h * w];
                        for zd in 0..od {
                            for zh in 0..oh {
                                for zw in 0..ow {
                                    let gval = gp[(zd * oh + zh) * ow + zw] * inv;
                                    for id_ in zd * fd..(zd + 1) * fd {
                                        for ih in zh * fh..(zh + 1) * fh {
                                            for iw in zw * fw..(zw + 1) * fw {
                                                gx[(id_ * h + ih) * w + iw] += gval;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Broadcast add of a `[n,m]` bias over the leading axis of `[B,n,m]`.
    pub fn add_bias_nm(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[1], s[2]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_nm",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let slab = s[1] * s[2];
        let mut out = self.to_vec();
        for chunk in out.chunks_mut(slab) {
            axpy(chunk, 1.0, bias.data());
        }
        Ok(Tensor::from_op(
            "add_bias_nm",
            s.to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accum_grad(|g| axpy(g, 1.0, ctx.grad_out));
                ctx.parents[1].accum_grad(|g| {
                    for chunk in ctx.grad_out.chunks(slab) {
                        axpy(g, 1.0, chunk);
                    }
                });
            }),
        ))
    }
}

/// Concatenate along `axis`. All other dimensions must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat: no inputs"));
    }
    let first = inputs[0].shape();
    let nd = first.len();
    if axis >= nd {
        return Err(Error::invalid(format!("concat: axis {axis} out of range")));
    }
    for t in inputs {
        let s = t.shape();
        if s.len() != nd
            || s.iter()
                .zip(first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: s.to_vec(),
            });
        }
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let slabs: Vec<usize> = inputs.iter().map(|t| t.shape()[axis] * inner).collect();
    let total_slab: usize = slabs.iter().sum();

    let mut out = vec![0.0f32; outer * total_slab];
    for o in 0..outer {
        let mut off = o * total_slab;
        for (t, &slab) in inputs.iter().zip(&slabs) {
            out[off..off + slab].copy_from_slice(&t.data()[o * slab..(o + 1) * slab]);
            off += slab;
        }
    }
    let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::from_op(
        "concat",
        out_shape,
        out,
        parents,
        Box::new(move |ctx| {
            for (pi, parent) in ctx.parents.iter().enumerate() {
                let slab = slabs[pi];
                let before: usize = slabs[..pi].iter().sum();
                parent.accum_grad(|g| {
                    for o in 0..outer {
                        let src = &ctx.grad_out[o * total_slab + before..][..slab];
                        axpy(&mut g[o * slab..(o + 1) * slab], 1.0, src);
                    }
                });
            }
        }),
    ))
}

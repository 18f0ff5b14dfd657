//! Cross-attention operators: the standard scaled-dot form, the
//! column-aware variant with a Gaussian-decayed column-distance bias, and
//! zero-conv-gated injection of 3D feature tokens.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Column-distance bias for an `h x w` token grid flattened row-major:
/// `bias[i,j] = -(|col(i) - col(j)|)^2 / (2 sigma^2)` with `col(i) = i mod w`.
/// Symmetric, non-positive, zero exactly on same-column pairs. The matrix is
/// input-independent, so callers build it once per `(h, w, sigma)` and reuse.
pub fn column_bias(h: usize, w: usize, sigma: f32) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("column_bias: h and w must be >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("column_bias: sigma must be positive"));
    }
    let n = h * w;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        let ci = (i % w) as f32;
        for j in 0..n {
            let cj = (j % w) as f32;
            let d = ci - cj;
            data[i * n + j] = -(d * d) * inv;
        }
    }
    Tensor::from_vec(&[n, n], data)
}

/// Scaled dot-product attention over batched token sequences:
/// `q:[B,nq,d]`, `k:[B,nk,d]`, `v:[B,nk,dv]`, optional additive `bias:[nq,nk]`
/// applied to the logits before softmax.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let d = *q.shape().last().unwrap();
    let logits = q.bmm_nt(k)?.scale(1.0 / (d as f32).sqrt());
    let logits = match bias {
        Some(b) => logits.add_bias_nm(b)?,
        None => logits,
    };
    logits.softmax(2)?.bmm(v)
}

/// Single-head cross-attention on raw projections, `q:[nq,d]`,
/// `k:[nk,d]`, `v:[nk,dv]`: `softmax(q kᵀ / sqrt(d)) v`.
pub fn standard_cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch {
            op: "standard_cross_attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(Error::ShapeMismatch {
            op: "standard_cross_attention(kv)",
            lhs: ks.to_vec(),
            rhs: vs.to_vec(),
        });
    }
    let (nq, d) = (qs[0], qs[1]);
    let (nk, dv) = (vs[0], vs[1]);
    let out = scaled_dot_attention(
        &q.reshape(&[1, nq, d])?,
        &k.reshape(&[1, nk, d])?,
        &v.reshape(&[1, nk, dv])?,
        None,
    )?;
    out.reshape(&[nq, dv])
}

// ---------------------------------------------------------------------------
// Token/grid plumbing
// ---------------------------------------------------------------------------

/// `[b,c,h,w] -> [b, h*w, c]` (row-major token order, matching `column_bias`).
pub fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.shape() else {
        return Err(Error::invalid("grid_to_tokens: input must be [b,c,h,w]"));
    };
    x.permute(&[0, 2, 3, 1])?.reshape(&[*b, h * w, *c])
}

/// `[b, h*w, c] -> [b,c,h,w]`
pub fn tokens_to_grid(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [b, n, c] = x.shape() else {
        return Err(Error::invalid("tokens_to_grid: input must be [b,n,c]"));
    };
    if *n != h * w {
        return Err(Error::invalid(format!(
            "tokens_to_grid: {n} tokens cannot fill {h}x{w}"
        )));
    }
    x.reshape(&[*b, h, w, *c])?.permute(&[0, 3, 1, 2])
}

// ---------------------------------------------------------------------------
// Weighted attention modules
// ---------------------------------------------------------------------------

/// Projection weights of one cross-attention module (all `c x c`, no bias).
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(heads >= 1 && channels % heads == 0, "channels {channels} not divisible by heads {heads}");
        let mut proj = |name: &str, rng: &mut Rng| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::uniform_fanin(&[channels, channels], channels, 1.0, rng),
            )
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let wo = proj("wo", rng);
        AttentionWeights {
            wq,
            wk,
            wv,
            wo,
            channels,
            heads,
        }
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let [b, n, c] = x.shape() else {
            return Err(Error::invalid("split_heads: input must be [b,n,c]"));
        };
        let dk = c / self.heads;
        x.reshape(&[*b, *n, self.heads, dk])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, *n, dk])
    }

    fn merge_heads(&self, x: &Tensor, b: usize) -> Result<Tensor> {
        let [bh, n, dk] = x.shape() else {
            return Err(Error::invalid("merge_heads: input must be [bh,n,dk]"));
        };
        x.reshape(&[b, bh / b, *n, *dk])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, *n, self.heads * dk])
    }

    /// Multi-head cross-attention over token sequences with an optional
    /// additive logit bias (shared by every head): project, attend, merge,
    /// output-project.
    pub fn attend(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        keys_values: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let [b, nq, c] = queries.shape() else {
            return Err(Error::invalid("attend: queries must be [b,n,c]"));
        };
        let (b, nq, c) = (*b, *nq, *c);
        if c != self.channels || keys_values.shape().len() != 3 || keys_values.shape()[2] != c {
            return Err(Error::ShapeMismatch {
                op: "attend",
                lhs: queries.shape().to_vec(),
                rhs: keys_values.shape().to_vec(),
            });
        }
        let nk = keys_values.shape()[1];
        let q_flat = queries.reshape(&[b * nq, c])?;
        let kv_flat = keys_values.reshape(&[b * nk, c])?;
        let q = q_flat.matmul(store.get(self.wq))?.reshape(&[b, nq, c])?;
        let k = kv_flat.matmul(store.get(self.wk))?.reshape(&[b, nk, c])?;
        let v = kv_flat.matmul(store.get(self.wv))?.reshape(&[b, nk, c])?;
        let out = scaled_dot_attention(
            &self.split_heads(&q)?,
            &self.split_heads(&k)?,
            &self.split_heads(&v)?,
            bias,
        )?;
        let merged = self.merge_heads(&out, b)?;
        merged.reshape(&[b * nq, c])?.matmul(store.get(self.wo))?.reshape(&[b, nq, c])
    }
}

/// 1x1 convolution with weights and bias initialized to exactly zero; gates
/// a residual branch so new conditioning starts as a no-op.
pub struct ZeroConv {
    pub w: ParamId,
    pub b: ParamId,
    channels: usize,
}

impl ZeroConv {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::zeros(&[channels, channels, 1, 1]));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[channels]));
        ZeroConv { w, b, channels }
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv2d(store.get(self.w), Some(store.get(self.b)), 1, 0)
    }

    pub fn is_zero(&self, store: &ParamStore) -> bool {
        store.get(self.w).data().iter().all(|&v| v == 0.0)
            && store.get(self.b).data().iter().all(|&v| v == 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Column-aware cross-attention over feature grids: queries from the target
/// grid, keys/values from the reference grid, `column_bias` added to the
/// logits before softmax. Returns the attended grid (no residual).
pub fn caca(
    store: &ParamStore,
    weights: &AttentionWeights,
    f_tar: &Tensor,
    f_ref: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let [_, _, h, w] = f_tar.shape() else {
        return Err(Error::invalid("caca: f_tar must be [b,c,h,w]"));
    };
    let (h, w) = (*h, *w);
    if f_tar.shape() != f_ref.shape() {
        return Err(Error::ShapeMismatch {
            op: "caca",
            lhs: f_tar.shape().to_vec(),
            rhs: f_ref.shape().to_vec(),
        });
    }
    let q = grid_to_tokens(f_tar)?;
    let kv = grid_to_tokens(f_ref)?;
    let out = weights.attend(store, &q, &kv, bias)?;
    tokens_to_grid(&out, h, w)
}

/// Inject 3D structure: `f_caca + ZeroConv(Attention(f_caca, f_3d, f_3d))`
/// with the 3D feature volume flattened to tokens as keys/values.
pub fn inject_3d(
    store: &ParamStore,
    weights: &AttentionWeights,
    gate: &ZeroConv,
    f_caca: &Tensor,
    f3d_tokens: &Tensor,
) -> Result<Tensor> {
    let [_, c, h, w] = f_caca.shape() else {
        return Err(Error::invalid("inject_3d: f_caca must be [b,c,h,w]"));
    };
    let (c, h, w) = (*c, *h, *w);
    if f3d_tokens.shape().len() != 3 || f3d_tokens.shape()[2] != c {
        return Err(Error::ShapeMismatch {
            op: "inject_3d",
            lhs: f_caca.shape().to_vec(),
            rhs: f3d_tokens.shape().to_vec(),
        });
    }
    let q = grid_to_tokens(f_caca)?;
    let attended = weights.attend(store, &q, f3d_tokens, None)?;
    let gated = gate.apply(store, &tokens_to_grid(&attended, h, w)?)?;
    f_caca.add(&gated)
}

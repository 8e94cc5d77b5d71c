use candle_core::{Tensor, D};

use super::im2col::im2col3x3;
use super::ops::{self, softmax_last};
use super::params::{Init, ParamGroup, ParamStore};
use crate::error::{argument, Result};

/// Affine map on the last dimension; weight stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Variance-preserving uniform init, `Var(w) = 1 / in`.
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, group: ParamGroup) -> Result<Self> {
        let bound = (3.0 / input as f64).sqrt();
        Ok(Self {
            weight: ps.get(&format!("{name}.weight"), &[input, output], Init::Uniform(bound), group)?,
            bias: ps.get(&format!("{name}.bias"), &[output], Init::Zeros, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("linear input has a last dimension");
        let rows = x.elem_count() / input.max(1);
        let y = x
            .contiguous()?
            .reshape((rows, input))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&format!("{name}.gamma"), &[dim], Init::Ones, group)?,
            beta: ps.get(&format!("{name}.beta"), &[dim], Init::Zeros, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 3x3 convolution with zero padding on channels-last maps, computed as a
/// single matrix product over the nine shifted copies of the input.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// `(9 * in, out)`, rows ordered by kernel row, kernel column, channel.
    pub weight: Tensor,
    pub bias: Tensor,
    input: usize,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, group: ParamGroup) -> Result<Self> {
        Self::with_gain(ps, name, input, output, 1.0, group)
    }

    /// Init with `Var(w) = gain^2 / fan_in`; a gain of `sqrt(2)` suits
    /// layers followed by a rectifying activation.
    pub fn with_gain(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        group: ParamGroup,
    ) -> Result<Self> {
        let bound = gain * (3.0 / (9.0 * input as f64)).sqrt();
        Ok(Self {
            weight: ps.get(&format!("{name}.weight"), &[9 * input, output], Init::Uniform(bound), group)?,
            bias: ps.get(&format!("{name}.bias"), &[output], Init::Zeros, group)?,
            input,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.input {
            return argument(format!("conv expects {} channels, got {c}", self.input));
        }
        let cols = im2col3x3(x)?.reshape((b * h * w, 9 * c))?;
        let y = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, h, w, self.weight.dim(1)?))?)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return argument(format!("{heads} heads do not divide width {dim}"));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.q"), dim, dim, group)?,
            key: Linear::new(ps, &format!("{name}.k"), dim, dim, group)?,
            value: Linear::new(ps, &format!("{name}.v"), dim, dim, group)?,
            output: Linear::new(ps, &format!("{name}.o"), dim, dim, group)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `q: (S, A, C)`, `k`/`v: (S, B, C)`. `bias` is added to the attention
    /// logits and must broadcast to `(S, heads, A, B)`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v, bias)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the attention
    /// weights `(S, heads, A, B)`.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (s, a, c) = q.dims3()?;
        let (sk, b, ck) = k.dims3()?;
        if c != self.dim || ck != self.dim || sk != s || v.dims() != k.dims() {
            return argument(format!(
                "attention shapes q {:?} k {:?} v {:?} do not match width {}",
                q.dims(),
                k.dims(),
                v.dims(),
                self.dim
            ));
        }
        let h = self.heads;
        let d = c / h;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((s, len, h, d))?.transpose(1, 2)?.contiguous()?)
        };
        let qh = split(self.query.forward(q)?, a)?;
        let kh = split(self.key.forward(k)?, b)?;
        let vh = split(self.value.forward(v)?, b)?;
        let mut logits = (qh.matmul(&kh.t()?)? * (1.0 / (d as f64).sqrt()))?;
        if let Some(bias) = bias {
            logits = logits.broadcast_add(bias)?;
        }
        let weights = softmax_last(&logits)?;
        let out = weights
            .matmul(&vh)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((s, a, c))?;
        Ok((self.output.forward(&out)?, weights))
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, group)?,
            out: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&ops::gelu(&self.hidden.forward(x)?)?)
    }
}

/// Key-padding bias `(S, 1, 1, L)` from a `(S, L)` validity mask.
pub fn key_padding_bias(mask: &Tensor) -> Result<Tensor> {
    let (s, l) = mask.dims2()?;
    let bias = ((mask.ones_like()? - mask)? * ops::MASKED)?;
    Ok(bias.reshape((s, 1, 1, l))?)
}

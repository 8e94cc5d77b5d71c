//! Differentiable building blocks composed from candle primitives. Feature
//! maps are channels-last `(batch, height, width, channels)`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{argument, Result};

/// Additive bias that removes a key from attention.
pub const MASKED: f64 = -1e9;

/// Softmax over the last dimension. The max shift is detached: it cancels
/// analytically, so gradients stay exact.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Computed through `tanh`, whose gradient stays finite for logits of any
/// magnitude; the `1 / (1 + exp(-x))` form overflows in the backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Sets flush-to-zero and denormals-are-zero for the calling thread.
/// Late in training, gradients and Adam moments drift into the subnormal
/// range, and x86 arithmetic on subnormals is slow enough to double the
/// iteration time.
pub fn flush_denormals() {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack));
    }
}

/// Tanh-approximated GELU built from primitive ops. The fused kernel's
/// backward uses rounded constants and drifts from the forward by ~1e-4.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + (x.powf(3.0)? * 0.044715)?)?.affine(k, 0.0)?;
    Ok((x * (inner.tanh()? + 1.0)?)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// 2x2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return argument(format!("cannot pool a {h}x{w} map"));
    }
    let x = x.contiguous()?.reshape((b, h / 2, 2, w / 2, 2, c))?;
    Ok((x.sum(4)?.sum(2)? * 0.25)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let x = x
        .contiguous()?
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?;
    Ok(x.reshape((b, 2 * h, 2 * w, c))?)
}

/// Sinusoidal encoding of positions `0..len`, shape `(len, dim)`.
pub fn sinusoidal_1d(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Two-dimensional sinusoidal encoding for an `h x w` grid, shape
/// `(h * w, dim)`: the first half of the channels encodes rows, the second
/// half columns.
pub fn sinusoidal_2d(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let rows = sinusoidal_1d(h, half);
    let cols = sinusoidal_1d(w, dim - half);
    let mut out = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&rows[y * half..(y + 1) * half]);
            out.extend_from_slice(&cols[x * (dim - half)..(x + 1) * (dim - half)]);
        }
    }
    out
}

pub fn constant(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean over dimension 1 of `(batch, len, dim)` restricted to valid rows.
/// `mask` is `(batch, len)` with ones on valid positions.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?;
    let sum = x.broadcast_mul(&m)?.sum(1)?;
    let count = mask.sum_keepdim(1)?;
    Ok(sum.broadcast_div(&count)?)
}

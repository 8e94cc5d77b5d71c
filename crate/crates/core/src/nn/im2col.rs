//! 3x3 patch extraction with zero padding as a custom autograd op. The
//! naive composition of pads, narrows and a channel concat dominated the
//! cost of every convolution.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use std::ops::AddAssign;

fn unsupported<T>() -> candle_core::Result<T> {
    Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into()))
}

fn dims(shape: &Shape) -> candle_core::Result<(usize, usize, usize, usize)> {
    shape.dims4()
}

/// `(B,H,W,C)` to `(B,H,W,9C)`; column block `k = 3*dy + dx` holds the
/// input at offset `(dy-1, dx-1)`.
fn gather<T: Copy + Default>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * 9 * c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((n * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let from = ((n * h + sy as usize) * w + sx as usize) * c;
                        let to = row + (dy * 3 + dx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`gather`]: scatters column blocks back onto pixels.
fn scatter<T: Copy + Default + AddAssign>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * c];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((n * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let to = ((n * h + sy as usize) * w + sx as usize) * c;
                        let from = row + (dy * 3 + dx) * c;
                        for (o, &v) in out[to..to + c].iter_mut().zip(&src[from..from + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col needs a contiguous input".into())),
    }
}

struct Im2Col;
struct Col2Im;

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims(layout.shape())?;
        let shape = Shape::from((b, h, w, 9 * c));
        match storage {
            CpuStorage::F32(d) => Ok((CpuStorage::F32(gather(slice(d, layout)?, b, h, w, c)), shape)),
            CpuStorage::F64(d) => Ok((CpuStorage::F64(gather(slice(d, layout)?, b, h, w, c)), shape)),
            _ => unsupported(),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c9) = dims(layout.shape())?;
        let c = c9 / 9;
        let shape = Shape::from((b, h, w, c));
        match storage {
            CpuStorage::F32(d) => Ok((CpuStorage::F32(scatter(slice(d, layout)?, b, h, w, c)), shape)),
            CpuStorage::F64(d) => Ok((CpuStorage::F64(scatter(slice(d, layout)?, b, h, w, c)), shape)),
            _ => unsupported(),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col)?))
    }
}

/// Zero-padded 3x3 patches of a channels-last map, `(B,H,W,9C)`.
pub fn im2col3x3(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn backward_is_the_adjoint() {
        // <im2col(x), g> == <x, col2im(g)>
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 2), &Device::Cpu).unwrap();
        let g = Tensor::randn(0f64, 1.0, (2, 3, 4, 18), &Device::Cpu).unwrap();
        let lhs = (im2col3x3(&x).unwrap() * &g).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let back = g.apply_op1(Col2Im).unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gradient_flows() {
        let v = Var::new(&[[[[1.0f32]]]], &Device::Cpu).unwrap();
        let g = im2col3x3(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0]);
    }
}

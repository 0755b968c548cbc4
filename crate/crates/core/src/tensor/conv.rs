use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Spatial output size of a strided cross-correlation.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn upconv_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || out_pad >= stride {
        return None;
    }
    ((input - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` (c x h x w) into `cols` ((c*kh*kw) x (ho*wo)).
/// Output columns `ox` whose input column `ox * stride + kx - pad` lies
/// inside `0..w`.
fn valid_cols(g: &Geom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if (g.w as isize) <= off {
        0
    } else {
        (((g.w as isize - off + s - 1) / s) as usize).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let owo = g.ho * g.wo;
    let pad = g.pad as isize;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * owo..(row + 1) * owo];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `x`.
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let owo = g.ho * g.wo;
    let pad = g.pad as isize;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * owo..(row + 1) * owo];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(dy: &[T], plane: usize, db: &mut [T]) {
    for (co, g) in db.iter_mut().enumerate() {
        *g += dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries for {channels} channels", b.len()),
        )),
        _ => Ok(()),
    }
}

fn conv_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geom)> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let (cout, cin, kh, kw) = kernel.dims4("conv2d")?;
    if cin != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {cin} input channels, input has {c}"),
        ));
    }
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(
            "conv2d",
            format!("{h}x{w} input too small for {kh}x{kw} kernel, pad {pad}, stride {stride}"),
        ));
    };
    Ok((
        n,
        cout,
        Geom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

/// Strided 2D cross-correlation. `kernel` is `[cout, cin, kh, kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv_geom(input, kernel, stride, pad)?;
    check_bias(bias, cout, "conv2d")?;
    let k = g.c * g.kh * g.kw;
    let owo = g.ho * g.wo;
    let in_plane = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut cols = if g.is_identity() { Vec::new() } else { vec![T::zero(); k * owo] };
    for b in 0..n {
        let x = &input.data()[b * in_plane..(b + 1) * in_plane];
        let y = &mut out.data_mut()[b * cout * owo..(b + 1) * cout * owo];
        let src: &[T] = if g.is_identity() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        T::gemm(cout, k, owo, kernel.data(), false, src, false, T::zero(), y);
        if let Some(bias) = bias {
            add_bias(y, bias.data(), owo);
        }
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (n, cout, g) = conv_geom(input, kernel, stride, pad)?;
    if grad_out.shape() != [n, cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?} vs output [{n}, {cout}, {}, {}]", grad_out.shape(), g.ho, g.wo),
        ));
    }
    let k = g.c * g.kh * g.kw;
    let owo = g.ho * g.wo;
    let in_plane = g.c * g.h * g.w;
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![T::zero(); k * owo];
    let mut dcols = vec![T::zero(); k * owo];
    for b in 0..n {
        let x = &input.data()[b * in_plane..(b + 1) * in_plane];
        let dy = &grad_out.data()[b * cout * owo..(b + 1) * cout * owo];
        let src: &[T] = if g.is_identity() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        // dK += dY * cols^T
        T::gemm(cout, owo, k, dy, false, src, true, T::one(), dk.data_mut());
        accumulate_bias_grad(dy, owo, db.data_mut());
        let dxb = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
        if g.is_identity() {
            T::gemm(k, cout, owo, kernel.data(), true, dy, false, T::one(), dxb);
        } else {
            T::gemm(k, cout, owo, kernel.data(), true, dy, false, T::zero(), &mut dcols);
            col2im(&dcols, &g, dxb);
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

fn upconv_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<(usize, usize, Geom)> {
    let (n, c, h, w) = input.dims4("upconv2d")?;
    let (cin, cout, kh, kw) = kernel.dims4("upconv2d")?;
    if cin != c {
        return Err(Error::shape(
            "upconv2d",
            format!("kernel expects {cin} input channels, input has {c}"),
        ));
    }
    let ho = upconv_out_size(h, kh, stride, pad, out_pad);
    let wo = upconv_out_size(w, kw, stride, pad, out_pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(
            "upconv2d",
            format!("invalid geometry: {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
        ));
    };
    // Geometry of the equivalent forward convolution (output image -> input grid).
    Ok((
        n,
        c,
        Geom {
            c: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: w,
        },
    ))
}

/// Transposed convolution (adjoint of [`conv2d`] with the same geometry).
/// `kernel` is `[cin, cout, kh, kw]`.
pub fn upconv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, g) = upconv_geom(input, kernel, stride, pad, out_pad)?;
    check_bias(bias, g.c, "upconv2d")?;
    let k = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let out_plane = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, g.c, g.h, g.w]);
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..n {
        let x = &input.data()[b * cin * hw..(b + 1) * cin * hw];
        T::gemm(k, cin, hw, kernel.data(), true, x, false, T::zero(), &mut cols);
        let y = &mut out.data_mut()[b * out_plane..(b + 1) * out_plane];
        col2im(&cols, &g, y);
        if let Some(bias) = bias {
            add_bias(y, bias.data(), g.h * g.w);
        }
    }
    out.debug_check_finite("upconv2d");
    Ok(out)
}

/// Gradients of [`upconv2d`].
pub fn upconv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvGrads<T>> {
    let (n, cin, g) = upconv_geom(input, kernel, stride, pad, out_pad)?;
    if grad_out.shape() != [n, g.c, g.h, g.w] {
        return Err(Error::shape(
            "upconv2d_backward",
            format!("grad {:?} vs output [{n}, {}, {}, {}]", grad_out.shape(), g.c, g.h, g.w),
        ));
    }
    let k = g.c * g.kh * g.kw;
    let hw = g.ho * g.wo;
    let out_plane = g.c * g.h * g.w;
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros(&[g.c]);
    let mut dcols = vec![T::zero(); k * hw];
    for b in 0..n {
        let x = &input.data()[b * cin * hw..(b + 1) * cin * hw];
        let dy = &grad_out.data()[b * out_plane..(b + 1) * out_plane];
        im2col(dy, &g, &mut dcols);
        accumulate_bias_grad(dy, g.h * g.w, db.data_mut());
        let dxb = &mut dx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
        T::gemm(cin, k, hw, kernel.data(), false, &dcols, false, T::zero(), dxb);
        T::gemm(cin, hw, k, x, false, &dcols, true, T::one(), dk.data_mut());
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

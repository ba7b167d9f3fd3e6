//! Tape-free numeric kernels. The [`Tape`](super::Tape) records calls to these
//! and pairs each forward kernel with its adjoint.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent of a cross-correlation along one axis.
    pub fn conv_out(&self, input: usize, kernel: usize, axis: &'static str, op: &'static str) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be at least 1")));
        }
        let padded = input + 2 * self.padding;
        if kernel > padded {
            return Err(Error::shape(
                op,
                format!("kernel {axis} {kernel} exceeds padded input {axis} {padded}"),
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transpose_out(&self, input: usize, kernel: usize, axis: &'static str, op: &'static str) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be at least 1")));
        }
        let full = (input - 1) * self.stride + kernel;
        if full <= 2 * self.padding {
            return Err(Error::shape(op, format!("padding {} leaves no output along {axis}", self.padding)));
        }
        Ok(full - 2 * self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
    geometry: ConvGeometry,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.geometry.stride + k) as isize - self.geometry.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `image` (`[C,H,W]`) into `[C·kh·kw, OH·OW]` patch columns.
fn im2col<T: Element>(image: &[T], win: &Window, cols: &mut [T]) {
    let span = win.cols();
    for c in 0..win.channels {
        let plane = &image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let dst = &mut cols[row * span..(row + 1) * span];
                for oy in 0..win.out_h {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    let Some(iy) = win.source(oy, ky, win.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * win.width..(iy + 1) * win.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        *slot = match win.source(ox, kx, win.width) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
fn col2im<T: Element>(cols: &[T], win: &Window, image: &mut [T]) {
    let span = win.cols();
    for c in 0..win.channels {
        let plane = &mut image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..win.kernel_h {
            for kx in 0..win.kernel_w {
                let row = (c * win.kernel_h + ky) * win.kernel_w + kx;
                let src = &cols[row * span..(row + 1) * span];
                for oy in 0..win.out_h {
                    let Some(iy) = win.source(oy, ky, win.height) else { continue };
                    let dst = &mut plane[iy * win.width..(iy + 1) * win.width];
                    for (ox, &v) in src[oy * win.out_w..(oy + 1) * win.out_w].iter().enumerate() {
                        if let Some(ix) = win.source(ox, kx, win.width) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `out`.
fn for_each_chunk<T: Element>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Per-sample partial results, summed in sample order so the total does not
/// depend on how the work was scheduled.
fn sum_partials<T: Element>(n: usize, len: usize, f: impl Fn(usize) -> Vec<T> + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<T>> = {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<T>> = (0..n).map(f).collect();
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

struct ConvShapes {
    n: usize,
    cin: usize,
    cout: usize,
    win: Window,
}

fn conv_shapes<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geometry: ConvGeometry,
) -> Result<ConvShapes> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: OP,
            axis: "input channels",
            expected: wcin,
            actual: cin,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "bias length",
                expected: cout,
                actual: b.len(),
            });
        }
    }
    let out_h = geometry.conv_out(h, kh, "height", OP)?;
    let out_w = geometry.conv_out(w, kw, "width", OP)?;
    Ok(ConvShapes {
        n,
        cin,
        cout,
        win: Window {
            channels: cin,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            out_h,
            out_w,
            geometry,
        },
    })
}

/// Cross-correlation of `input` `[N,Cin,H,W]` with `weight` `[Cout,Cin,kh,kw]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    let s = conv_shapes(input, weight, bias, geometry)?;
    let win = s.win;
    let (k, p) = (win.rows(), win.cols());
    let in_stride = s.cin * win.height * win.width;
    let mut out = vec![T::zero(); s.n * s.cout * p];
    for_each_chunk(&mut out, s.cout * p, |i, dst| {
        let mut cols = vec![T::zero(); k * p];
        im2col(&input.data()[i * in_stride..(i + 1) * in_stride], &win, &mut cols);
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(s.cout, k, p, weight.data(), false, &cols, false, beta, dst);
    });
    Tensor::new([s.n, s.cout, win.out_h, win.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geometry: ConvGeometry,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let s = conv_shapes(input, weight, None, geometry)?;
    let win = s.win;
    let (k, p) = (win.rows(), win.cols());
    let in_stride = s.cin * win.height * win.width;
    let up_stride = s.cout * p;

    let grad_input = if need_input {
        let mut gi = vec![T::zero(); input.len()];
        for_each_chunk(&mut gi, in_stride, |i, dst| {
            let mut cols = vec![T::zero(); k * p];
            T::gemm(k, s.cout, p, weight.data(), true, &upstream.data()[i * up_stride..(i + 1) * up_stride], false, T::zero(), &mut cols);
            col2im(&cols, &win, dst);
        });
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };

    let gw = sum_partials(s.n, s.cout * k, |i| {
        let mut cols = vec![T::zero(); k * p];
        im2col(&input.data()[i * in_stride..(i + 1) * in_stride], &win, &mut cols);
        let mut part = vec![T::zero(); s.cout * k];
        T::gemm(s.cout, p, k, &upstream.data()[i * up_stride..(i + 1) * up_stride], false, &cols, true, T::zero(), &mut part);
        part
    });
    let grad_bias = channel_sums(upstream.data(), s.n, s.cout, p);
    Ok((grad_input, Tensor::new(weight.shape().to_vec(), gw)?, Tensor::new([s.cout], grad_bias)?))
}

fn channel_sums<T: Element>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut sums = vec![0.0f64; c];
    for i in 0..n {
        for (ch, sum) in sums.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *sum += data[start..start + plane].iter().map(|x| x.to_f64().unwrap()).sum::<f64>();
        }
    }
    sums.into_iter().map(T::lit).collect()
}

fn transpose_shapes<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geometry: ConvGeometry,
) -> Result<ConvShapes> {
    const OP: &str = "conv_transpose2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (wcin, cout, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: OP,
            axis: "input channels",
            expected: wcin,
            actual: cin,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: "bias length",
                expected: cout,
                actual: b.len(),
            });
        }
    }
    let out_h = geometry.transpose_out(h, kh, "height", OP)?;
    let out_w = geometry.transpose_out(w, kw, "width", OP)?;
    // The window describes the adjoint convolution: it maps the (larger)
    // output image back onto the input grid.
    Ok(ConvShapes {
        n,
        cin,
        cout,
        win: Window {
            channels: cout,
            height: out_h,
            width: out_w,
            kernel_h: kh,
            kernel_w: kw,
            out_h: h,
            out_w: w,
            geometry,
        },
    })
}

/// Transposed convolution; `weight` is `[Cin,Cout,kh,kw]` and the output
/// extent is `(H−1)·stride − 2·padding + kh`.
pub fn conv_transpose2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    let s = transpose_shapes(input, weight, bias, geometry)?;
    let win = s.win;
    let (k, p) = (win.rows(), win.cols());
    let in_stride = s.cin * p;
    let plane = win.height * win.width;
    let mut out = vec![T::zero(); s.n * s.cout * plane];
    for_each_chunk(&mut out, s.cout * plane, |i, dst| {
        let mut cols = vec![T::zero(); k * p];
        T::gemm(k, s.cin, p, weight.data(), true, &input.data()[i * in_stride..(i + 1) * in_stride], false, T::zero(), &mut cols);
        col2im(&cols, &win, dst);
        if let Some(b) = bias {
            for (ch, &bv) in dst.chunks_mut(plane).zip(b.data()) {
                ch.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new([s.n, s.cout, win.height, win.width], out)
}

pub fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geometry: ConvGeometry,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let s = transpose_shapes(input, weight, None, geometry)?;
    let win = s.win;
    let (k, p) = (win.rows(), win.cols());
    let in_stride = s.cin * p;
    let plane = win.height * win.width;
    let up_stride = s.cout * plane;

    let grad_input = if need_input {
        let mut gi = vec![T::zero(); input.len()];
        for_each_chunk(&mut gi, in_stride, |i, dst| {
            let mut cols = vec![T::zero(); k * p];
            im2col(&upstream.data()[i * up_stride..(i + 1) * up_stride], &win, &mut cols);
            T::gemm(s.cin, k, p, weight.data(), false, &cols, false, T::zero(), dst);
        });
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };

    let gw = sum_partials(s.n, s.cin * k, |i| {
        let mut cols = vec![T::zero(); k * p];
        im2col(&upstream.data()[i * up_stride..(i + 1) * up_stride], &win, &mut cols);
        let mut part = vec![T::zero(); s.cin * k];
        T::gemm(s.cin, p, k, &input.data()[i * in_stride..(i + 1) * in_stride], false, &cols, true, T::zero(), &mut part);
        part
    });
    let grad_bias = channel_sums(upstream.data(), s.n, s.cout, plane);
    Ok((grad_input, Tensor::new(weight.shape().to_vec(), gw)?, Tensor::new([s.cout], grad_bias)?))
}

/// `ln(1 + eˣ)` evaluated as `max(x,0) + ln(1 + e^{−|x|})`.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x · tanh(softplus(x))`.
pub fn mish<T: Element>(x: T) -> T {
    x * softplus(x).tanh()
}

pub fn mish_grad<T: Element>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

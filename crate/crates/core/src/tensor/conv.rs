//! 2-D convolution and transposed convolution in NCHW layout.
//!
//! Both lower to one GEMM over the whole batch: the im2col matrix holds every
//! sample side by side, `[c_in * k * k, n * out_h * out_w]`.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use super::{Float, Var};

/// Output extent of a strided convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_output_size(height, kernel, stride, pad),
            out_w: conv_output_size(width, kernel, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Index of the input pixel feeding output `(oy, ox)` through tap `(ky, kx)`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Writes the columns of one image into `cols` (row stride `ld`) starting at column `col0`.
fn im2col<T: Float>(image: &[T], g: &Geometry, cols: &mut [T], ld: usize, col0: usize) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let base = ((c * k + ky) * k + kx) * ld + col0;
                for oy in 0..g.out_h {
                    let dst = &mut cols[base + oy * g.out_w..base + (oy + 1) * g.out_w];
                    match g.source(oy, ky, g.height) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.source(ox, kx, g.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Float>(cols: &[T], g: &Geometry, ld: usize, col0: usize, image: &mut [T]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let base = ((c * k + ky) * k + kx) * ld + col0;
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let src = &cols[base + oy * g.out_w..base + (oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn batch_im2col<T: Float>(x: &ArrayD<T>, g: &Geometry) -> Array2<T> {
    let n = x.shape()[0];
    let ld = n * g.positions();
    let mut cols = Array2::zeros((g.rows(), ld));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("fresh array");
    for i in 0..n {
        im2col(&xs[i * g.image_len()..(i + 1) * g.image_len()], g, cs, ld, i * g.positions());
    }
    cols
}

fn batch_col2im<T: Float>(cols: &Array2<T>, g: &Geometry, n: usize) -> ArrayD<T> {
    let mut out = ArrayD::zeros(IxDyn(&[n, g.channels, g.height, g.width]));
    let ld = cols.ncols();
    let cs = cols.as_slice().expect("contiguous cols");
    let os = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        col2im(cs, g, ld, i * g.positions(), &mut os[i * g.image_len()..(i + 1) * g.image_len()]);
    }
    out
}

/// `[n, c, p]` (flattened spatial) to `[c, n * p]`.
fn batch_to_matrix<T: Float>(x: &ArrayD<T>) -> Array2<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let p = x.len() / (n * c).max(1);
    let mut m = Array2::zeros((c, n * p));
    let xs = x.as_slice().expect("contiguous");
    for i in 0..n {
        for ch in 0..c {
            let src = &xs[(i * c + ch) * p..(i * c + ch + 1) * p];
            m.row_mut(ch)
                .as_slice_mut()
                .expect("row-major")[i * p..(i + 1) * p]
                .copy_from_slice(src);
        }
    }
    m
}

/// Inverse of [`batch_to_matrix`], producing `[n, c, h, w]`.
fn matrix_to_batch<T: Float>(m: &Array2<T>, n: usize, h: usize, w: usize) -> ArrayD<T> {
    let c = m.nrows();
    let p = h * w;
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    let os = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let row = m.row(ch);
        let row = row.as_slice().expect("row-major");
        for i in 0..n {
            os[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(&row[i * p..(i + 1) * p]);
        }
    }
    out
}

fn contiguous<T: Float>(a: &ArrayD<T>) -> ArrayD<T> {
    a.as_standard_layout().into_owned()
}

fn add_channel_bias<T: Float>(out: &mut ArrayD<T>, bias: &ArrayD<T>) {
    for (mut plane, &b) in out.axis_iter_mut(Axis(1)).zip(bias.iter()) {
        plane.mapv_inplace(|v| v + b);
    }
}

fn channel_sums<T: Float>(g: &ArrayD<T>) -> ArrayD<T> {
    let c = g.shape()[1];
    ArrayD::from_shape_fn(IxDyn(&[c]), |i| g.index_axis(Axis(1), i[0]).sum())
}

/// Cross-correlation of `x: [n, c_in, h, w]` with `kernel: [c_out, c_in, k, k]`.
pub fn conv2d<'t, T: Float>(
    x: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
) -> Var<'t, T> {
    let xv = contiguous(&x.value());
    let kv = kernel.value();
    let (n, c_in, h, w) = dims4(&xv);
    let (c_out, kc_in, k, k2) = dims4(&kv);
    assert_eq!(c_in, kc_in, "conv2d: input has {c_in} channels, kernel expects {kc_in}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let g = Geometry::new(c_in, h, w, k, stride, pad);

    let cols = Rc::new(batch_im2col(&xv, &g));
    let kmat = kernel_matrix(&kv, c_out, g.rows());
    let mut out_mat = Array2::zeros((c_out, n * g.positions()));
    general_mat_mul(T::one(), &kmat, &*cols, T::zero(), &mut out_mat);
    let mut out = matrix_to_batch(&out_mat, n, g.out_h, g.out_w);
    if let Some(b) = bias {
        add_channel_bias(&mut out, &b.value());
    }

    let mut parents = vec![x, kernel];
    parents.extend(bias);
    let kshape = kv.shape().to_vec();
    x.tape().push_op(out, &parents, move |grad, needs| {
        let gmat = batch_to_matrix(&contiguous(grad));
        let dx = needs[0].then(|| {
            let mut dcols = Array2::zeros((g.rows(), gmat.ncols()));
            general_mat_mul(T::one(), &kmat.t(), &gmat, T::zero(), &mut dcols);
            batch_col2im(&dcols, &g, n)
        });
        let dk = needs[1].then(|| {
            let mut dk = Array2::zeros((c_out, g.rows()));
            general_mat_mul(T::one(), &gmat, &cols.t(), T::zero(), &mut dk);
            dk.into_shape_with_order(IxDyn(&kshape)).expect("kernel shape")
        });
        let mut grads = vec![dx, dk];
        if needs.len() > 2 {
            grads.push(needs[2].then(|| channel_sums(grad)));
        }
        grads
    })
}

/// Transposed convolution of `x: [n, c_in, h, w]` with `kernel: [c_in, c_out, k, k]`.
/// Output extent is `(h - 1) * stride - 2 * pad + k + output_pad`.
pub fn conv_transpose2d<'t, T: Float>(
    x: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Var<'t, T> {
    let xv = contiguous(&x.value());
    let kv = kernel.value();
    let (n, c_in, h, w) = dims4(&xv);
    let (kc_in, c_out, k, k2) = dims4(&kv);
    assert_eq!(c_in, kc_in, "conv_transpose2d: input has {c_in} channels, kernel expects {kc_in}");
    assert_eq!(k, k2, "conv_transpose2d: square kernels only");
    assert!(output_pad < stride, "output padding must be smaller than the stride");
    let out_h = (h - 1) * stride + k + output_pad - 2 * pad;
    let out_w = (w - 1) * stride + k + output_pad - 2 * pad;
    // Geometry of the forward convolution this operator is the adjoint of.
    let g = Geometry::new(c_out, out_h, out_w, k, stride, pad);
    debug_assert_eq!((g.out_h, g.out_w), (h, w));

    let xmat = Rc::new(batch_to_matrix(&xv));
    let kmat = kernel_matrix(&kv, c_in, g.rows());
    let mut cols = Array2::zeros((g.rows(), n * h * w));
    general_mat_mul(T::one(), &kmat.t(), &*xmat, T::zero(), &mut cols);
    let mut out = batch_col2im(&cols, &g, n);
    if let Some(b) = bias {
        add_channel_bias(&mut out, &b.value());
    }

    let mut parents = vec![x, kernel];
    parents.extend(bias);
    let kshape = kv.shape().to_vec();
    x.tape().push_op(out, &parents, move |grad, needs| {
        let gcols = batch_im2col(&contiguous(grad), &g);
        let dx = needs[0].then(|| {
            let mut dx = Array2::zeros((c_in, gcols.ncols()));
            general_mat_mul(T::one(), &kmat, &gcols, T::zero(), &mut dx);
            matrix_to_batch(&dx, n, h, w)
        });
        let dk = needs[1].then(|| {
            let mut dk = Array2::zeros((c_in, g.rows()));
            general_mat_mul(T::one(), &*xmat, &gcols.t(), T::zero(), &mut dk);
            dk.into_shape_with_order(IxDyn(&kshape)).expect("kernel shape")
        });
        let mut grads = vec![dx, dk];
        if needs.len() > 2 {
            grads.push(needs[2].then(|| channel_sums(grad)));
        }
        grads
    })
}

fn dims4<T>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    match *a.shape() {
        [a0, a1, a2, a3] => (a0, a1, a2, a3),
        ref other => panic!("expected a 4-D tensor, got shape {other:?}"),
    }
}

fn kernel_matrix<T: Float>(k: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    let view: ArrayView2<T> = k
        .view()
        .into_shape_with_order((rows, cols))
        .unwrap_or_else(|_| {
            panic!("kernel {:?} is not contiguous", k.shape());
        })
        .into_dimensionality::<Ix2>()
        .expect("2-D");
    view.to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::ArrayD;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &ArrayD<f64>, k: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
        let (n, ci, h, w) = dims4(x);
        let (co, _, kk, _) = dims4(k);
        let oh = conv_output_size(h, kk, stride, pad);
        let ow = conv_output_size(w, kk, stride, pad);
        ArrayD::from_shape_fn(IxDyn(&[n, co, oh, ow]), |idx| {
            let (b, o, y, x0) = (idx[0], idx[1], idx[2], idx[3]);
            let mut acc = 0.0;
            for c in 0..ci {
                for ky in 0..kk {
                    for kx in 0..kk {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        let ix = (x0 * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[[b, c, iy as usize, ix as usize]] * k[[o, c, ky, kx]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = ramp(&[2, 3, 7, 6], 0.1);
            let k = ramp(&[4, 3, 3, 3], 0.07);
            let tape = Tape::new();
            let out = conv2d(tape.constant(x.clone()), tape.constant(k.clone()), None, stride, pad);
            let expected = naive_conv(&x, &k, stride, pad);
            assert_eq!(out.shape(), expected.shape());
            for (a, b) in out.value().iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint() {
        // <conv(x), y> == <x, conv_transpose(y)> for matching geometry.
        let x = ramp(&[2, 3, 8, 8], 0.1);
        let k = ramp(&[4, 3, 3, 3], 0.05);
        let y = ramp(&[2, 4, 4, 4], 0.3);
        let tape = Tape::new();
        let cx = conv2d(tape.constant(x.clone()), tape.constant(k.clone()), None, 2, 1);
        let ty = conv_transpose2d(tape.constant(y.clone()), tape.constant(k), None, 2, 1, 1);
        assert_eq!(ty.shape(), vec![2, 3, 8, 8]);
        let lhs: f64 = cx.value().iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(ty.value().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn stride_two_halves_resolution() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        let k = tape.constant(ArrayD::zeros(IxDyn(&[8, 3, 3, 3])));
        assert_eq!(conv2d(x, k, None, 2, 1).shape(), vec![1, 8, 32, 32]);
        let up = tape.constant(ArrayD::zeros(IxDyn(&[3, 8, 3, 3])));
        let y = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 8, 8])));
        assert_eq!(conv_transpose2d(y, up, None, 2, 1, 1).shape(), vec![1, 8, 16, 16]);
    }
}

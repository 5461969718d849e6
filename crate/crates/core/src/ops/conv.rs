//! im2col-based convolution, its adjoint (transposed convolution) and the
//! locally-connected layer used for CFC capsule translation.
//!
//! All three share [`ConvGeom`]: a convolution from an `in_c x in_h x in_w`
//! image to an `out_h x out_w` grid. For `deconv2d` the roles are swapped:
//! the geometry describes the convolution whose adjoint is being applied.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::Geometry(format!(
            "kernel {kernel} larger than padded input {input}+2*{pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(h - 1) * stride - 2 * pad + k`.
pub fn deconv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(Error::Geometry("stride, kernel and input must be positive".into()));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::Geometry(format!(
            "transposed convolution of {input} with kernel {kernel}, stride {stride}, padding {pad} has no output"
        )));
    }
    Ok(full - 2 * pad)
}

impl ConvGeom {
    /// Geometry of a forward convolution on `[b, c, h, w]`.
    pub fn new(
        input: &[usize],
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = *input else {
            return Err(Error::Geometry(format!("expected [b, c, h, w], got {input:?}")));
        };
        let out_h = conv_out_extent(in_h, kh, stride, pad)?;
        let out_w = conv_out_extent(in_w, kw, stride, pad)?;
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the im2col matrix: `in_c * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Columns of the im2col matrix: `out_h * out_w`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_image_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Unfolds one image into a `patch_len x positions` matrix.
pub fn im2col<T: Element>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.positions();
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &image[(c * g.in_h + y as usize) * g.in_w..][..g.in_w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if x < 0 || x >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `image`.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let n = g.positions();
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.in_h + y as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.in_w as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(tape: &Tape<T>, bias: Option<Var>, len: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if tape.value(b).numel() != len {
            return Err(Error::shape(op, tape.shape(b), &[len]));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    dy: &[T],
    grads: &mut Grads<T>,
) {
    let (k_len, n) = (g.patch_len(), g.positions());
    let x = tape.data(input);
    let w = tape.data(kernel);
    let img = g.in_image_len();
    let out_img = g.out_c * n;
    let mut cols = vec![T::zero(); k_len * n];
    if grads.wants(kernel) {
        let mut dw = vec![T::zero(); g.out_c * k_len];
        for b in 0..g.batch {
            im2col(&x[b * img..(b + 1) * img], g, &mut cols);
            // dW += dY_b * cols^T
            T::gemm(
                g.out_c, n, k_len, T::one(),
                &dy[b * out_img..], n, 1,
                &cols, 1, n,
                T::one(),
                &mut dw, k_len, 1,
            );
        }
        grads.accumulate(kernel, dw);
    }
    if grads.wants(input) {
        let dx = grads.slot(input);
        for b in 0..g.batch {
            // dcols = W^T * dY_b
            T::gemm(
                k_len, g.out_c, n, T::one(),
                w, 1, k_len,
                &dy[b * out_img..], n, 1,
                T::zero(),
                &mut cols, n, 1,
            );
            col2im(&cols, g, &mut dx[b * img..(b + 1) * img]);
        }
    }
    if let Some(bias) = bias.filter(|&b| grads.wants(b)) {
        let db = grads.slot(bias);
        for b in 0..g.batch {
            for (o, slot) in db.iter_mut().enumerate() {
                let s: T = dy[b * out_img + o * n..b * out_img + (o + 1) * n].iter().copied().sum();
                *slot = *slot + s;
            }
        }
    }
}

pub(crate) fn deconv2d_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    dy: &[T],
    grads: &mut Grads<T>,
) {
    // `g` is the forward convolution from output space (out_c = deconv input
    // channels) back to input space; dy lives in its input space.
    let (k_len, n) = (g.patch_len(), g.positions());
    let x = tape.data(input);
    let w = tape.data(kernel);
    let y_img = g.in_image_len();
    let x_img = g.out_c * n;
    let mut cols = vec![T::zero(); k_len * n];
    let want_x = grads.wants(input);
    let want_w = grads.wants(kernel);
    let mut dw = if want_w { vec![T::zero(); g.out_c * k_len] } else { Vec::new() };
    for b in 0..g.batch {
        im2col(&dy[b * y_img..(b + 1) * y_img], g, &mut cols);
        if want_x {
            let dx = grads.slot(input);
            T::gemm(
                g.out_c, k_len, n, T::one(),
                w, k_len, 1,
                &cols, n, 1,
                T::one(),
                &mut dx[b * x_img..], n, 1,
            );
        }
        if want_w {
            T::gemm(
                g.out_c, n, k_len, T::one(),
                &x[b * x_img..], n, 1,
                &cols, 1, n,
                T::one(),
                &mut dw, k_len, 1,
            );
        }
    }
    if want_w {
        grads.accumulate(kernel, dw);
    }
    if let Some(bias) = bias.filter(|&b| grads.wants(b)) {
        let hw = g.in_h * g.in_w;
        let db = grads.slot(bias);
        for b in 0..g.batch {
            for (c, slot) in db.iter_mut().enumerate() {
                let s: T = dy[b * y_img + c * hw..b * y_img + (c + 1) * hw].iter().copied().sum();
                *slot = *slot + s;
            }
        }
    }
}

pub(crate) fn local_linear_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    kernels: Var,
    bias: Option<Var>,
    g: &ConvGeom,
    dy: &[T],
    grads: &mut Grads<T>,
) {
    let (k_len, p, o) = (g.patch_len(), g.positions(), g.out_c);
    let batch = g.batch;
    let x = tape.data(input);
    let kd = tape.data(kernels);
    let img = g.in_image_len();
    let cols = batch_cols(x, g);
    if grads.wants(kernels) {
        let mut dk = vec![T::zero(); p * o * k_len];
        for pos in 0..p {
            // dK_p (o x K) = dY_p^T (o x B) * X_p (B x K)
            T::gemm(
                o, batch, k_len, T::one(),
                &dy[pos * o..], 1, p * o,
                &cols[pos..], k_len * p, p,
                T::zero(),
                &mut dk[pos * o * k_len..], k_len, 1,
            );
        }
        grads.accumulate(kernels, dk);
    }
    if grads.wants(input) {
        let mut dcols = vec![T::zero(); batch * k_len * p];
        for pos in 0..p {
            // dX_p (B x K) = dY_p (B x o) * K_p (o x K)
            T::gemm(
                batch, o, k_len, T::one(),
                &dy[pos * o..], p * o, 1,
                &kd[pos * o * k_len..], k_len, 1,
                T::zero(),
                &mut dcols[pos..], k_len * p, p,
            );
        }
        let dx = grads.slot(input);
        for b in 0..batch {
            col2im(&dcols[b * k_len * p..(b + 1) * k_len * p], g, &mut dx[b * img..(b + 1) * img]);
        }
    }
    if let Some(bias) = bias.filter(|&b| grads.wants(b)) {
        let db = grads.slot(bias);
        for b in 0..batch {
            for (slot, &d) in db.iter_mut().zip(&dy[b * p * o..(b + 1) * p * o]) {
                *slot = *slot + d;
            }
        }
    }
}

/// im2col for every image of the batch, stacked: `[batch][patch_len][positions]`.
fn batch_cols<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let per = g.patch_len() * g.positions();
    let img = g.in_image_len();
    let mut cols = vec![T::zero(); g.batch * per];
    for b in 0..g.batch {
        im2col(&x[b * img..(b + 1) * img], g, &mut cols[b * per..(b + 1) * per]);
    }
    cols
}

impl<T: Element> Tape<T> {
    /// 2-D convolution. `kernel: [o, c, kh, kw]`, optional `bias: [o]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let [o, c, kh, kw] = ks[..] else {
            return Err(Error::Geometry(format!("kernel must be [o, c, kh, kw], got {ks:?}")));
        };
        let g = ConvGeom::new(self.shape(input), o, kh, kw, stride, pad)?;
        if g.in_c != c {
            return Err(Error::shape("conv2d", self.shape(input), &ks));
        }
        check_bias(self, bias, o, "conv2d")?;
        let (k_len, n) = (g.patch_len(), g.positions());
        let x = self.data(input);
        let w = self.data(kernel);
        let img = g.in_image_len();
        let mut out = vec![T::zero(); g.batch * o * n];
        let mut cols = vec![T::zero(); k_len * n];
        for b in 0..g.batch {
            im2col(&x[b * img..(b + 1) * img], &g, &mut cols);
            T::gemm(
                o, k_len, n, T::one(),
                w, k_len, 1,
                &cols, n, 1,
                T::zero(),
                &mut out[b * o * n..], n, 1,
            );
        }
        if let Some(bias) = bias {
            let bd = self.data(bias);
            for (chunk, &bv) in out.chunks_mut(n).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[g.batch, o, g.out_h, g.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom: g }))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] for the same
    /// kernel. `kernel: [c_in, c_out, kh, kw]`, optional `bias: [c_out]`.
    /// Output extent is `(h - 1) * stride - 2 * pad + kh`.
    pub fn deconv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let xs = self.shape(input).to_vec();
        let (&[ci, co, kh, kw], &[batch, c, h, w]) = (&ks[..], &xs[..]) else {
            return Err(Error::Geometry(format!(
                "deconv2d expects [b, c, h, w] input and [c_in, c_out, kh, kw] kernel, got {xs:?} and {ks:?}"
            )));
        };
        if c != ci {
            return Err(Error::shape("deconv2d", &xs, &ks));
        }
        check_bias(self, bias, co, "deconv2d")?;
        let oh = deconv_out_extent(h, kh, stride, pad)?;
        let ow = deconv_out_extent(w, kw, stride, pad)?;
        let g = ConvGeom::new(&[batch, co, oh, ow], ci, kh, kw, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        let (k_len, n) = (g.patch_len(), g.positions());
        let x = self.data(input);
        let wd = self.data(kernel);
        let y_img = g.in_image_len();
        let mut out = vec![T::zero(); batch * y_img];
        let mut cols = vec![T::zero(); k_len * n];
        for b in 0..batch {
            // cols = W^T * x_b, then fold back
            T::gemm(
                k_len, ci, n, T::one(),
                wd, 1, k_len,
                &x[b * ci * n..], n, 1,
                T::zero(),
                &mut cols, n, 1,
            );
            col2im(&cols, &g, &mut out[b * y_img..(b + 1) * y_img]);
        }
        if let Some(bias) = bias {
            let bd = self.data(bias);
            for (chunk, &bv) in out.chunks_mut(oh * ow).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[batch, co, oh, ow], out)?;
        Ok(self.push(value, Op::Deconv2d { input, kernel, bias, geom: g }))
    }

    /// Locally connected layer: position `p` of the output grid has its own
    /// weights `kernels[p]: [out, c * kh * kw]` applied to its receptive field.
    /// `kernels: [positions, out, c * kh * kw]`, `bias: [positions, out]`.
    /// Output is `[b, positions, out]`.
    pub fn local_linear(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        let [p, o, k_len] = ks[..] else {
            return Err(Error::Geometry(format!(
                "local kernels must be [positions, out, patch], got {ks:?}"
            )));
        };
        let g = ConvGeom::new(self.shape(input), o, kh, kw, stride, 0)?;
        if g.patch_len() != k_len || g.positions() != p {
            return Err(Error::Geometry(format!(
                "input {:?} with {kh}x{kw}/{stride} gives {} positions of patch {}, kernels are {ks:?}",
                self.shape(input),
                g.positions(),
                g.patch_len()
            )));
        }
        check_bias(self, bias, p * o, "local_linear")?;
        let batch = g.batch;
        let cols = batch_cols(self.data(input), &g);
        let kd = self.data(kernels);
        let mut out = vec![T::zero(); batch * p * o];
        for pos in 0..p {
            // Y_p (B x o) = X_p (B x K) * K_p^T (K x o)
            T::gemm(
                batch, k_len, o, T::one(),
                &cols[pos..], k_len * p, p,
                &kd[pos * o * k_len..], 1, k_len,
                T::zero(),
                &mut out[pos * o..], p * o, 1,
            );
        }
        if let Some(bias) = bias {
            let bd = self.data(bias);
            for chunk in out.chunks_mut(p * o) {
                for (v, &bv) in chunk.iter_mut().zip(bd) {
                    *v = *v + bv;
                }
            }
        }
        let value = Tensor::new(&[batch, p, o], out)?;
        Ok(self.push(value, Op::LocalLinear { input, kernels, bias, geom: g }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = tape.constant(Tensor::new(&[1, 1, 4, 4], data.clone()).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.data(y), &data[..]);
        let d = tape.deconv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.data(d), &data[..]);
    }

    #[test]
    fn mnist_first_layer_geometry() {
        let g = ConvGeom::new(&[1, 1, 28, 28], 256, 9, 9, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (20, 20));
    }

    #[test]
    fn deconv_extent_formula() {
        assert_eq!(deconv_out_extent(6, 3, 2, 0).unwrap(), 13);
        assert_eq!(deconv_out_extent(7, 4, 2, 1).unwrap(), 14);
        assert!(deconv_out_extent(1, 1, 1, 1).is_err());
    }

    #[test]
    fn deconv_output_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 6, 6]));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.deconv2d(x, k, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 13, 13]);
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 7, 7]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 1), Err(Error::Geometry(_))));
        assert!(tape.conv2d(x, k, None, 1, 2).is_ok());
    }

    #[test]
    fn hand_computed_conv_with_padding_and_stride() {
        let mut tape = Tape::<f64>::new();
        // 3x3 image 1..9, 2x2 kernel of ones, stride 2, pad 1
        let x = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[1], 0.5));
        let y = tape.conv2d(x, k, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.data(y), &[1.5, 5.5, 11.5, 28.5]);
    }

    #[test]
    fn local_linear_uses_one_kernel_per_position() {
        let mut tape = Tape::<f64>::new();
        // 1 channel 2x2 input, 1x1 receptive field: 4 positions, out dim 1
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[4, 1, 1], &[10., 20., 30., 40.]).unwrap());
        let y = tape.local_linear(x, k, None, 1, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 1]);
        assert_eq!(tape.data(y), &[10., 40., 90., 160.]);
    }
}

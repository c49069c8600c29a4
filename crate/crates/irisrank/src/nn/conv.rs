//! 2D convolution over NHWC tensors via im2col + GEMM.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::gemm;
use super::param::{Param, Visit};

/// Unrolls sliding windows into a `(B*OH*OW, kh*kw*C)` matrix.
///
/// Patch rows keep the NHWC layout: for each kernel row the `kw * C` input
/// values are one contiguous run, so filling is three copies per output pixel
/// for a 3x3 kernel. Out-of-bounds taps are zero. Interior windows (no pad
/// contact) skip the zero-fill entirely.
pub fn im2col(x: &Array4<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let _t = std::time::Instant::now();
    let out = im2col_inner(x, kh, kw, stride, pad);
    super::prof::add(&super::prof::IM2COL, _t);
    out
}

fn im2col_inner(x: &Array4<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (b, h, w, c) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * c;
    let mut buf = super::uninit_vec::<f32>(b * oh * ow * k);
    let xs = super::SharedConst(x.as_slice().expect("contiguous input").as_ptr());
    let cs = super::SharedMut(buf.as_mut_ptr());
    let row_stride = w * c;
    let img_stride = h * w * c;
    // interior output columns: every horizontal tap lands inside the image
    let ox_lo = pad.div_ceil(stride);
    let ox_hi_excl = if w + pad >= kw {
        (((w + pad - kw) / stride) + 1).min(ow)
    } else {
        0
    };
    super::par_chunks(b * oh, move |range| {
        let (xs, cs) = (xs, cs);
        let xs = xs.0;
        let cs = cs.0;
        for row in range {
            let bi = row / oh;
            let oy = row % oh;
            let iy0 = (oy * stride) as isize - pad as isize;
            let vertically_interior = iy0 >= 0 && iy0 + kh as isize <= h as isize;
            let row_base = row * ow * k;
            let fill_edges = |ox_range: std::ops::Range<usize>| {
                for ox in ox_range {
                    let out_row = row_base + ox * k;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    // SAFETY: out_row + k <= total buffer length by construction
                    unsafe {
                        std::ptr::write_bytes(cs.add(out_row), 0, k);
                    }
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let kx_lo = (-ix0).max(0) as usize;
                        let kx_hi = ((w as isize - ix0).min(kw as isize)).max(0) as usize;
                        if kx_lo >= kx_hi {
                            continue;
                        }
                        let src = bi * img_stride
                            + iy as usize * row_stride
                            + (ix0 + kx_lo as isize) as usize * c;
                        let dst = out_row + (ky * kw + kx_lo) * c;
                        // SAFETY: src/dst ranges verified by the clipping above
                        unsafe {
                            std::ptr::copy_nonoverlapping(
                                xs.add(src),
                                cs.add(dst),
                                (kx_hi - kx_lo) * c,
                            );
                        }
                    }
                }
            };
            if !vertically_interior || ox_lo >= ox_hi_excl {
                fill_edges(0..ow);
                continue;
            }
            fill_edges(0..ox_lo);
            // fast path: kh contiguous copies of kw*c floats per output pixel
            let run = kw * c;
            for ky in 0..kh {
                let iy = (iy0 + ky as isize) as usize;
                let src_row = bi * img_stride + iy * row_stride;
                let dst_off = row_base + ky * run;
                let mut src = src_row + (ox_lo * stride) * c - pad * c;
                let mut dst = dst_off + ox_lo * k;
                for _ in ox_lo..ox_hi_excl {
                    // SAFETY: interior windows are fully inside the image
                    unsafe {
                        std::ptr::copy_nonoverlapping(xs.add(src), cs.add(dst), run);
                    }
                    src += stride * c;
                    dst += k;
                }
            }
            fill_edges(ox_hi_excl..ow);
        }
    });
    Array2::from_shape_vec((b * oh * ow, k), buf).expect("shape matches")
}

/// Scatter-add inverse of [`im2col`]: folds patch-gradient rows back onto the
/// input gradient.
pub fn col2im(
    cols: &Array2<f32>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let _t = std::time::Instant::now();
    let out = col2im_inner(cols, dims, kh, kw, stride, pad);
    super::prof::add(&super::prof::COL2IM, _t);
    out
}

fn col2im_inner(
    cols: &Array2<f32>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (b, h, w, c) = dims;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let k = kh * kw * c;
    let mut dx = Array4::<f32>::zeros((b, h, w, c));
    let ds = super::SharedMut(dx.as_slice_mut().expect("contiguous dx").as_mut_ptr());
    let cs = super::SharedConst(cols.as_slice().expect("contiguous cols").as_ptr());
    let row_stride = w * c;
    let img_stride = h * w * c;
    // parallel over batch images: scatter targets are disjoint per image
    super::par_chunks(b, move |brange| {
        let (ds, cs) = (ds, cs);
        let ds = ds.0;
        let cs = cs.0;
        for bi in brange {
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let out_row = ((bi * oh + oy) * ow + ox) * k;
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let kx_lo = (-ix0).max(0) as usize;
                        let kx_hi = ((w as isize - ix0).min(kw as isize)).max(0) as usize;
                        if kx_lo >= kx_hi {
                            continue;
                        }
                        let dst = bi * img_stride
                            + iy as usize * row_stride
                            + (ix0 + kx_lo as isize) as usize * c;
                        let src = out_row + (ky * kw + kx_lo) * c;
                        let run = (kx_hi - kx_lo) * c;
                        // SAFETY: ranges clipped to the image; images disjoint
                        unsafe {
                            for i in 0..run {
                                *ds.add(dst + i) += *cs.add(src + i);
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Bias-free 2D convolution (normalization layers carry the offsets).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    /// Weights stored GEMM-ready as `(kh*kw*cin, cout)`.
    pub weight: Param,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kh * kw * cin;
        Self {
            kh,
            kw,
            stride,
            pad,
            cin,
            cout,
            weight: Param::randn(name, &[fan_in, cout], fan_in, rng),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        self.forward_cached(x).0
    }

    /// Forward pass that hands back the unrolled patch matrix (when one was
    /// needed) so the backward pass can skip recomputing it.
    pub fn forward_cached(&self, x: &Array4<f32>) -> (Array4<f32>, Option<Array2<f32>>) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let mut y = super::uninit4((b, oh, ow, self.cout));
        let cols = self.forward_into_impl(x, y.as_slice_mut().unwrap(), 0.0);
        (y, cols)
    }

    /// `y += conv(x)` when `beta == 1`, overwriting when `beta == 0`.
    pub fn forward_into(&self, x: &Array4<f32>, y: &mut Array4<f32>, beta: f32) -> Option<Array2<f32>> {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(y.dim(), (b, oh, ow, self.cout), "conv output shape");
        self.forward_into_impl(x, y.as_slice_mut().unwrap(), beta)
    }

    fn forward_into_impl(&self, x: &Array4<f32>, y: &mut [f32], beta: f32) -> Option<Array2<f32>> {
        let (b, h, w, _) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let m = b * oh * ow;
        let k = self.kh * self.kw * self.cin;
        if self.is_pointwise() {
            gemm::sgemm(m, k, self.cout, x.as_slice().unwrap(), &self.weight.value, beta, y);
            None
        } else {
            let cols = im2col(x, self.kh, self.kw, self.stride, self.pad);
            gemm::sgemm(m, k, self.cout, cols.as_slice().unwrap(), &self.weight.value, beta, y);
            Some(cols)
        }
    }

    /// Accumulates the weight gradient only, for layers whose input gradient
    /// is never consumed.
    pub fn backward_weights_only(&mut self, x: &Array4<f32>, dy: &Array4<f32>) {
        let (b, h, w, _) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        debug_assert_eq!(dy.dim(), (b, oh, ow, self.cout));
        let m = b * oh * ow;
        let k = self.kh * self.kw * self.cin;
        let dys = dy.as_slice().unwrap();
        if self.is_pointwise() {
            gemm::sgemm_tn(k, m, self.cout, x.as_slice().unwrap(), dys, 1.0, &mut self.weight.grad);
        } else {
            let cols = im2col(x, self.kh, self.kw, self.stride, self.pad);
            gemm::sgemm_tn(k, m, self.cout, cols.as_slice().unwrap(), dys, 1.0, &mut self.weight.grad);
        }
    }

    /// Accumulates the weight gradient and returns the input gradient.
    /// `x` must be the same tensor the forward pass saw.
    pub fn backward(&mut self, x: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
        self.backward_cached(x, &None, dy)
    }

    /// As [`Conv2d::backward`], reusing the forward pass's patch matrix when
    /// the caller kept it.
    pub fn backward_cached(
        &mut self,
        x: &Array4<f32>,
        cols: &Option<Array2<f32>>,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let (b, h, w, _) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        debug_assert_eq!(dy.dim(), (b, oh, ow, self.cout));
        let m = b * oh * ow;
        let k = self.kh * self.kw * self.cin;
        let dys = dy.as_slice().unwrap();
        if self.is_pointwise() {
            // dW += x^T . dy
            gemm::sgemm_tn(
                k,
                m,
                self.cout,
                x.as_slice().unwrap(),
                dys,
                1.0,
                &mut self.weight.grad,
            );
            // dX = dy . W^T
            let mut dx = super::uninit4(x.dim());
            gemm::sgemm_nt(
                m,
                self.cout,
                k,
                dys,
                &self.weight.value,
                0.0,
                dx.as_slice_mut().unwrap(),
            );
            dx
        } else {
            let fresh;
            let cols = if let Some(c) = cols {
                c
            } else {
                fresh = im2col(x, self.kh, self.kw, self.stride, self.pad);
                &fresh
            };
            gemm::sgemm_tn(
                k,
                m,
                self.cout,
                cols.as_slice().unwrap(),
                dys,
                1.0,
                &mut self.weight.grad,
            );
            let mut dcols = Array2::from_shape_vec((m, k), super::uninit_vec(m * k)).expect("shape");
            gemm::sgemm_nt(
                m,
                self.cout,
                k,
                dys,
                &self.weight.value,
                0.0,
                dcols.as_slice_mut().unwrap(),
            );
            col2im(&dcols, x.dim(), self.kh, self.kw, self.stride, self.pad)
        }
    }
}

impl Visit for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut super::param::Buffer)) {}
}

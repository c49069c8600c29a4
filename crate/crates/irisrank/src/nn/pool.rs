//! Pooling and resampling over NHWC maps.

use ndarray::{Array2, Array4};

/// Max pooling; ties resolve to the lowest flat index so the backward scatter
/// is deterministic.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Returns the pooled map and the flat input index of each maximum.
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
        let _t = std::time::Instant::now();
        let r = self.forward_inner(x);
        super::prof::add(&super::prof::POOL, _t);
        r
    }

    fn forward_inner(&self, x: &Array4<f32>) -> (Array4<f32>, Vec<u32>) {
        let (b, h, w, c) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let xs = x.as_slice().unwrap();
        let mut y = super::uninit4((b, oh, ow, c));
        let ys = y.as_slice_mut().unwrap();
        let mut arg = super::uninit_vec(b * oh * ow * c);
        let row_stride = w * c;
        for bi in 0..b {
            let img = bi * h * w * c;
            for oy in 0..oh {
                let iy0 = (oy * self.stride) as isize - self.pad as isize;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = ((h as isize - iy0).min(self.k as isize)).max(0) as usize;
                for ox in 0..ow {
                    let out_base = ((bi * oh + oy) * ow + ox) * c;
                    let ix0 = (ox * self.stride) as isize - self.pad as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = ((w as isize - ix0).min(self.k as isize)).max(0) as usize;
                    let out = &mut ys[out_base..out_base + c];
                    let args = &mut arg[out_base..out_base + c];
                    let mut first = true;
                    for ky in ky_lo..ky_hi {
                        let iy = (iy0 + ky as isize) as usize;
                        let row = img + iy * row_stride;
                        for kx in kx_lo..kx_hi {
                            let ix = (ix0 + kx as isize) as usize;
                            let base = row + ix * c;
                            let tap = &xs[base..base + c];
                            if first {
                                out.copy_from_slice(tap);
                                for (a, ci) in args.iter_mut().zip(0u32..) {
                                    *a = base as u32 + ci;
                                }
                                first = false;
                            } else {
                                for ci in 0..c {
                                    if tap[ci] > out[ci] {
                                        out[ci] = tap[ci];
                                        args[ci] = (base + ci) as u32;
                                    }
                                }
                            }
                        }
                    }
                    debug_assert!(!first, "pool window fully outside input");
                }
            }
        }
        (y, arg)
    }

    pub fn backward(
        &self,
        in_dims: (usize, usize, usize, usize),
        argmax: &[u32],
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let _t = std::time::Instant::now();
        let r = self.backward_inner(in_dims, argmax, dy);
        super::prof::add(&super::prof::POOL, _t);
        r
    }

    fn backward_inner(
        &self,
        in_dims: (usize, usize, usize, usize),
        argmax: &[u32],
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let mut dx = Array4::<f32>::zeros(in_dims);
        let dxs = dx.as_slice_mut().unwrap();
        for (&idx, &g) in argmax.iter().zip(dy.as_slice().unwrap()) {
            dxs[idx as usize] += g;
        }
        dx
    }
}

/// Mean over the full spatial extent, `(B,H,W,C) -> (B,C)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (b, h, w, c) = x.dim();
    let n = (h * w) as f32;
    let mut y = Array2::<f32>::zeros((b, c));
    let xs = x.as_slice().unwrap();
    for bi in 0..b {
        let base = bi * h * w * c;
        let yrow = &mut y.as_slice_mut().unwrap()[bi * c..(bi + 1) * c];
        for row in xs[base..base + h * w * c].chunks_exact(c) {
            for (acc, &v) in yrow.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in yrow {
            *v /= n;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = super::uninit4((b, h, w, c));
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().unwrap();
    for bi in 0..b {
        let grad = &dys[bi * c..(bi + 1) * c];
        let base = bi * h * w * c;
        for row in dxs[base..base + h * w * c].chunks_exact_mut(c) {
            for (d, &g) in row.iter_mut().zip(grad) {
                *d = g * scale;
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &Array4<f32>) -> Array4<f32> {
    let (b, h, w, c) = x.dim();
    let mut y = super::uninit4((b, 2 * h, 2 * w, c));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    let in_row = w * c;
    let out_row = 2 * w * c;
    for bi in 0..b {
        for iy in 0..h {
            let src = (bi * h + iy) * in_row;
            let dst = (bi * 2 * h + 2 * iy) * out_row;
            // widen one input row into the first output row
            let src_row = &xs[src..src + in_row];
            for ix in 0..w {
                let cell = &src_row[ix * c..(ix + 1) * c];
                ys[dst + 2 * ix * c..dst + (2 * ix + 1) * c].copy_from_slice(cell);
                ys[dst + (2 * ix + 1) * c..dst + (2 * ix + 2) * c].copy_from_slice(cell);
            }
            // duplicate it into the second output row
            ys.copy_within(dst..dst + out_row, dst + out_row);
        }
    }
    y
}

/// Backward of [`upsample2x`]: each input cell collects its 2x2 block.
pub fn upsample2x_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (b, h2, w2, c) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = super::uninit4((b, h, w, c));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    let in_row = w2 * c;
    for bi in 0..b {
        for iy in 0..h {
            let r0 = (bi * h2 + 2 * iy) * in_row;
            let r1 = r0 + in_row;
            let out = (bi * h + iy) * w * c;
            for ix in 0..w {
                let a = &dys[r0 + 2 * ix * c..r0 + (2 * ix + 1) * c];
                let bb = &dys[r0 + (2 * ix + 1) * c..r0 + (2 * ix + 2) * c];
                let cc = &dys[r1 + 2 * ix * c..r1 + (2 * ix + 1) * c];
                let dd = &dys[r1 + (2 * ix + 1) * c..r1 + (2 * ix + 2) * c];
                let o = &mut dxs[out + ix * c..out + (ix + 1) * c];
                for ci in 0..c {
                    o[ci] = a[ci] + bb[ci] + cc[ci] + dd[ci];
                }
            }
        }
    }
    dx
}

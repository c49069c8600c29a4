//! Minimal CPU substrate for the classifier: NHWC tensors backed by
//! `ndarray`, convolution via im2col + GEMM, batch normalization, pooling,
//! and explicit backward passes for each piece. No autodiff: every layer
//! knows its own gradient, and composite blocks chain them by hand.

pub mod conv;
pub mod gemm;
pub mod linear;
pub mod norm;
pub mod param;
pub mod pool;

pub mod prof {
    use std::sync::atomic::{AtomicU64, Ordering};
    pub static GEMM: AtomicU64 = AtomicU64::new(0);
    pub static GEMM_TN: AtomicU64 = AtomicU64::new(0);
    pub static GEMM_NT: AtomicU64 = AtomicU64::new(0);
    pub static IM2COL: AtomicU64 = AtomicU64::new(0);
    pub static COL2IM: AtomicU64 = AtomicU64::new(0);
    pub static BN: AtomicU64 = AtomicU64::new(0);
    pub static POOL: AtomicU64 = AtomicU64::new(0);
    pub static ELEM: AtomicU64 = AtomicU64::new(0);
    pub fn add(c: &AtomicU64, t: std::time::Instant) {
        c.fetch_add(t.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }
    pub fn dump_reset() {
        for (name, c) in [("gemm", &GEMM), ("gemm_tn", &GEMM_TN), ("gemm_nt", &GEMM_NT), ("im2col", &IM2COL), ("col2im", &COL2IM), ("bn", &BN), ("pool", &POOL), ("elem", &ELEM)] {
            println!("  {name}: {:.2} s", c.swap(0, Ordering::Relaxed) as f64 / 1e9);
        }
    }
}

pub use conv::Conv2d;
pub use linear::Dense;
pub use norm::{BatchNorm2d, BnCache};
pub use param::{Buffer, Param, Visit};
pub use pool::MaxPool2d;

use ndarray::Array4;

/// Allocates an NHWC tensor without zero-filling. Callers must overwrite
/// every element before it is read.
pub(crate) fn uninit4(dim: (usize, usize, usize, usize)) -> Array4<f32> {
    let len = dim.0 * dim.1 * dim.2 * dim.3;
    let mut v = Vec::<f32>::with_capacity(len);
    // SAFETY: f32 has no drop glue and no validity invariants; the contract
    // above requires full initialization before use.
    unsafe { v.set_len(len) };
    Array4::from_shape_vec(dim, v).expect("shape matches length")
}

pub(crate) fn uninit_vec<T: Copy>(len: usize) -> Vec<T> {
    let mut v = Vec::<T>::with_capacity(len);
    // SAFETY: `T: Copy` has no drop glue; the contract above requires full
    // initialization before use.
    unsafe { v.set_len(len) };
    v
}

/// Runs `f` over `0..total` split into at most [`gemm::threads`] contiguous
/// ranges. The split depends only on `total` and the configured thread count,
/// and every range is processed by a dedicated scoped thread, so writers to
/// disjoint output regions stay deterministic.
pub(crate) fn par_chunks(total: usize, f: impl Fn(std::ops::Range<usize>) + Sync) {
    let threads = gemm::threads().min(total).max(1);
    if threads <= 1 || total < 2 {
        f(0..total);
        return;
    }
    let chunk = total.div_ceil(threads);
    rayon::scope(|scope| {
        let mut start = 0;
        while start < total {
            let end = (start + chunk).min(total);
            let f = &f;
            scope.spawn(move |_| f(start..end));
            start = end;
        }
    });
}

/// Raw pointer that may cross scoped-thread boundaries. Callers guarantee
/// disjoint access per thread.
#[derive(Clone, Copy)]
pub(crate) struct SharedMut(pub *mut f32);
unsafe impl Send for SharedMut {}
unsafe impl Sync for SharedMut {}

#[derive(Clone, Copy)]
pub(crate) struct SharedConst(pub *const f32);
unsafe impl Send for SharedConst {}
unsafe impl Sync for SharedConst {}

/// Element-wise rectifier.
pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// In-place rectifier for owned activations.
pub fn relu_inplace(x: &mut Array4<f32>) {
    for v in x.as_slice_mut().expect("contiguous").iter_mut() {
        *v = v.max(0.0);
    }
}

/// Gradient of [`relu`] given its output (`y > 0` marks the pass-through set).
pub fn relu_backward(dy: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    relu_backward_inplace(&mut dx, y);
    dx
}

/// As [`relu_backward`], masking the gradient buffer in place.
pub fn relu_backward_inplace(dy: &mut Array4<f32>, y: &Array4<f32>) {
    let d = dy.as_slice_mut().expect("contiguous");
    let yv = y.as_slice().expect("contiguous");
    for (d, &v) in d.iter_mut().zip(yv) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Attended map `(1 + mask) o trunk`, written in one pass.
pub fn combine_attention(t: &Array4<f32>, m: &Array4<f32>) -> Array4<f32> {
    debug_assert_eq!(t.dim(), m.dim());
    let mut y = uninit4(t.dim());
    let ys = y.as_slice_mut().expect("contiguous");
    let ts = t.as_slice().expect("contiguous");
    let ms = m.as_slice().expect("contiguous");
    let yp = SharedMut(ys.as_mut_ptr());
    let tp = SharedConst(ts.as_ptr());
    let mp = SharedConst(ms.as_ptr());
    let len = ts.len();
    par_chunks(len.div_ceil(1 << 20), move |range| {
        let (yp, tp, mp) = (yp, tp, mp);
        let start = range.start << 20;
        let end = (range.end << 20).min(len);
        // SAFETY: disjoint 1M-element blocks
        unsafe {
            for i in start..end {
                *yp.0.add(i) = *tp.0.add(i) * (1.0 + *mp.0.add(i));
            }
        }
    });
    y
}

/// One-pass `dy o (bias + other)`, used for both attention gradients.
pub fn scaled_product(dy: &Array4<f32>, other: &Array4<f32>, bias: f32) -> Array4<f32> {
    debug_assert_eq!(dy.dim(), other.dim());
    let mut y = uninit4(dy.dim());
    let ys = y.as_slice_mut().expect("contiguous");
    let ds = dy.as_slice().expect("contiguous");
    let os = other.as_slice().expect("contiguous");
    for ((y, &d), &o) in ys.iter_mut().zip(ds).zip(os) {
        *y = d * (bias + o);
    }
    y
}

/// Element-wise logistic function.
pub fn sigmoid(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient of [`sigmoid`] given its output.
pub fn sigmoid_backward(dy: &Array4<f32>, y: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_gradients() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
        let dy = Array4::from_elem((1, 1, 1, 4), 1.0f32);
        let dx = relu_backward(&dy, &y);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);

        let s = sigmoid(&x);
        for &v in s.iter() {
            assert!(v > 0.0 && v < 1.0);
        }
        let ds = sigmoid_backward(&dy, &s);
        // peak derivative 0.25 at x=0
        assert!((ds[(0, 0, 0, 1)] - 0.25).abs() < 1e-6);
    }
}

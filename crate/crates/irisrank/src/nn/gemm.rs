//! f32 matrix multiplication with deterministic row-chunk threading.
//!
//! All heavy math in the network lowers to these three entry points. Work is
//! split along the output-row dimension across a fixed number of threads;
//! each output element is still produced by a single sequential kernel with a
//! fixed accumulation order over `k`, so results are bit-identical regardless
//! of the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps the number of worker threads used for matrix products.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current worker-thread cap (defaults to the machine's parallelism).
pub fn threads() -> usize {
    let t = THREADS.load(Ordering::Relaxed);
    if t > 0 {
        return t;
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[derive(Clone, Copy)]
struct ConstPtr(*const f32);
unsafe impl Send for ConstPtr {}
unsafe impl Sync for ConstPtr {}
#[derive(Clone, Copy)]
struct MutPtr(*mut f32);
unsafe impl Send for MutPtr {}
unsafe impl Sync for MutPtr {}

/// `c = a * b + beta * c` over virtual row-major views described by strides.
///
/// Safety is the caller's responsibility: every index reachable from the
/// strides must be in bounds, and `c` must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn sgemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
) {
    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    let want = threads();
    // below ~a few MFLOP the spawn overhead outweighs the split
    let nthreads = if flops < 4e6 || m < 2 * want {
        1
    } else {
        want
    };
    if nthreads == 1 {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
        return;
    }
    let chunk = m.div_ceil(nthreads);
    let base_a = ConstPtr(a);
    let base_b = ConstPtr(b);
    let base_c = MutPtr(c);
    rayon::scope(move |scope| {
        let (base_a, base_b, base_c) = (base_a, base_b, base_c);
        let mut r0 = 0usize;
        while r0 < m {
            let rows = chunk.min(m - r0);
            let ap = ConstPtr(base_a.0.wrapping_offset(r0 as isize * rsa));
            let bp = ConstPtr(base_b.0);
            let cp = MutPtr(base_c.0.wrapping_add(r0 * n));
            scope.spawn(move |_| {
                let (ap, bp, cp) = (ap, bp, cp);
                unsafe {
                    matrixmultiply::sgemm(
                        rows, k, n, 1.0, ap.0, rsa, csa, bp.0, rsb, csb, beta, cp.0,
                        n as isize, 1,
                    );
                }
            });
            r0 += rows;
        }
    });
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all row-major contiguous.
pub fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    let _t = std::time::Instant::now();
    assert_eq!(a.len(), m * k, "a size");
    assert_eq!(b.len(), k * n, "b size");
    assert_eq!(c.len(), m * n, "c size");
    unsafe {
        sgemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
        )
    }
    super::prof::add(&super::prof::GEMM, _t);
}

/// `c (m x n) = a^T * b + beta * c` where `a` is stored `(k x m)` row-major.
pub fn sgemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    let _t = std::time::Instant::now();
    assert_eq!(a.len(), k * m, "a size");
    assert_eq!(b.len(), k * n, "b size");
    assert_eq!(c.len(), m * n, "c size");
    unsafe {
        sgemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
        )
    }
    super::prof::add(&super::prof::GEMM_TN, _t);
}

/// `c (m x n) = a * b^T + beta * c` where `b` is stored `(n x k)` row-major.
pub fn sgemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    let _t = std::time::Instant::now();
    assert_eq!(a.len(), m * k, "a size");
    assert_eq!(b.len(), n * k, "b size");
    assert_eq!(c.len(), m * n, "c size");
    unsafe {
        sgemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
        )
    }
    super::prof::add(&super::prof::GEMM_NT, _t);
}

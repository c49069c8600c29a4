//! Batch normalization over NHWC maps with per-channel affine parameters.

use ndarray::Array4;

use super::param::{Buffer, Param, Visit};

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
}

/// Saved batch statistics needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::constant(&format!("{name}.beta"), &[channels], 0.0),
            running_mean: Buffer::new(&format!("{name}.running_mean"), channels, 0.0),
            running_var: Buffer::new(&format!("{name}.running_var"), channels, 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// Training-mode forward: normalizes by batch statistics and folds them
    /// into the running averages.
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let _t = std::time::Instant::now();
        let r = self.forward_train_inner(x, false);
        super::prof::add(&super::prof::BN, _t);
        r
    }

    /// Training-mode forward fused with the rectifier that always follows it
    /// in this network.
    pub fn forward_train_relu(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let _t = std::time::Instant::now();
        let r = self.forward_train_inner(x, true);
        super::prof::add(&super::prof::BN, _t);
        r
    }

    fn forward_train_inner(&mut self, x: &Array4<f32>, fuse_relu: bool) -> (Array4<f32>, BnCache) {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let rows = b * h * w;
        let n = rows as f64;
        let xs = x.as_slice().unwrap();

        // per-thread partial sums over fixed row ranges, combined in range
        // order so the result is independent of scheduling
        let threads = super::gemm::threads().max(1);
        let chunk = rows.div_ceil(threads);
        let mut partials: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        {
            let xp = super::SharedConst(xs.as_ptr());
            let slots: Vec<usize> = (0..rows).step_by(chunk.max(1)).collect();
            let mut results: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; slots.len()];
            rayon::scope(|scope| {
                for (slot, out) in results.iter_mut().enumerate() {
                    let xp = xp;
                    let start = slot * chunk;
                    let end = (start + chunk).min(rows);
                    scope.spawn(move |_| {
                        let xp = xp;
                        let xs = xp.0;
                        let mut sum = vec![0.0f64; c];
                        let mut sumsq = vec![0.0f64; c];
                        // f32 partial sums over bounded row blocks, folded
                        // into f64 per block: SIMD-friendly and deterministic
                        let mut bs = vec![0.0f32; c];
                        let mut bq = vec![0.0f32; c];
                        const BLOCK: usize = 512;
                        let mut r = start;
                        while r < end {
                            let stop = (r + BLOCK).min(end);
                            // SAFETY: r < rows, channel i < c
                            unsafe {
                                while r < stop {
                                    let base = xs.add(r * c);
                                    for i in 0..c {
                                        let v = *base.add(i);
                                        *bs.get_unchecked_mut(i) += v;
                                        *bq.get_unchecked_mut(i) += v * v;
                                    }
                                    r += 1;
                                }
                            }
                            for i in 0..c {
                                sum[i] += bs[i] as f64;
                                sumsq[i] += bq[i] as f64;
                                bs[i] = 0.0;
                                bq[i] = 0.0;
                            }
                        }
                        *out = Some((sum, sumsq));
                    });
                }
            });
            for r in results {
                partials.push(r.expect("thread completed"));
            }
        }
        let mut sum = vec![0.0f64; c];
        let mut sumsq = vec![0.0f64; c];
        for (ps, pq) in &partials {
            for i in 0..c {
                sum[i] += ps[i];
                sumsq[i] += pq[i];
            }
        }

        let mut mean32 = Vec::with_capacity(c);
        let mut invstd = Vec::with_capacity(c);
        for i in 0..c {
            let mean = sum[i] / n;
            let var = (sumsq[i] / n - mean * mean).max(0.0);
            mean32.push(mean as f32);
            invstd.push(1.0 / ((var as f32 + self.eps).sqrt()));
            self.running_mean.value[i] =
                self.momentum * self.running_mean.value[i] + (1.0 - self.momentum) * mean as f32;
            self.running_var.value[i] =
                self.momentum * self.running_var.value[i] + (1.0 - self.momentum) * var as f32;
        }

        let scale: Vec<f32> = (0..c).map(|i| invstd[i] * self.gamma.value[i]).collect();
        let shift: Vec<f32> = (0..c)
            .map(|i| self.beta.value[i] - mean32[i] * scale[i])
            .collect();
        let mut y = super::uninit4((b, h, w, c));
        {
            let xp = super::SharedConst(xs.as_ptr());
            let yp = super::SharedMut(y.as_slice_mut().unwrap().as_mut_ptr());
            let sp = super::SharedConst(scale.as_ptr());
            let hp = super::SharedConst(shift.as_ptr());
            super::par_chunks(rows, move |range| {
                let (xp, yp, sp, hp) = (xp, yp, sp, hp);
                // SAFETY: disjoint row ranges; all indices < rows * c
                unsafe {
                    if fuse_relu {
                        for r in range {
                            let xrow = xp.0.add(r * c);
                            let yrow = yp.0.add(r * c);
                            for i in 0..c {
                                *yrow.add(i) =
                                    (*xrow.add(i)).mul_add(*sp.0.add(i), *hp.0.add(i)).max(0.0);
                            }
                        }
                    } else {
                        for r in range {
                            let xrow = xp.0.add(r * c);
                            let yrow = yp.0.add(r * c);
                            for i in 0..c {
                                *yrow.add(i) = (*xrow.add(i)).mul_add(*sp.0.add(i), *hp.0.add(i));
                            }
                        }
                    }
                }
            });
        }
        (
            y,
            BnCache {
                mean: mean32,
                invstd,
            },
        )
    }

    /// Inference-mode forward fused with the rectifier.
    pub fn forward_eval_relu(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut y = self.forward_eval(x);
        super::relu_inplace(&mut y);
        y
    }

    /// Inference-mode forward using the running statistics.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (b, h, w, c) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let scale: Vec<f32> = (0..c)
            .map(|i| self.gamma.value[i] / (self.running_var.value[i] + self.eps).sqrt())
            .collect();
        let shift: Vec<f32> = (0..c)
            .map(|i| self.beta.value[i] - self.running_mean.value[i] * scale[i])
            .collect();
        let mut y = super::uninit4((b, h, w, c));
        let ys = y.as_slice_mut().unwrap();
        let xs = x.as_slice().unwrap();
        for (yrow, xrow) in ys.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
            for i in 0..c {
                yrow[i] = xrow[i] * scale[i] + shift[i];
            }
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f32>, cache: &BnCache, dy: &Array4<f32>) -> Array4<f32> {
        let _t = std::time::Instant::now();
        let r = self.backward_inner(x, cache, dy, None);
        super::prof::add(&super::prof::BN, _t);
        r
    }

    /// Backward through the fused BN+ReLU: `relu_out` is the fused forward's
    /// output, whose zeros mask the incoming gradient.
    pub fn backward_relu(
        &mut self,
        x: &Array4<f32>,
        cache: &BnCache,
        dy: &Array4<f32>,
        relu_out: &Array4<f32>,
    ) -> Array4<f32> {
        let _t = std::time::Instant::now();
        let r = self.backward_inner(x, cache, dy, Some(relu_out));
        super::prof::add(&super::prof::BN, _t);
        r
    }

    fn backward_inner(
        &mut self,
        x: &Array4<f32>,
        cache: &BnCache,
        dy: &Array4<f32>,
        relu_out: Option<&Array4<f32>>,
    ) -> Array4<f32> {
        let (b, h, w, c) = x.dim();
        let rows = b * h * w;
        let n = rows as f64;
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        // sum(dy) and sum(dy * xhat) per channel, parallel partials combined
        // in fixed order
        let threads = super::gemm::threads().max(1);
        let chunk = rows.div_ceil(threads);
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        {
            let xp = super::SharedConst(xs.as_ptr());
            let dp = super::SharedConst(dys.as_ptr());
            let rp = relu_out.map(|r| super::SharedConst(r.as_slice().unwrap().as_ptr()));
            let mp = super::SharedConst(cache.mean.as_ptr());
            let ip = super::SharedConst(cache.invstd.as_ptr());
            let slots: Vec<usize> = (0..rows).step_by(chunk.max(1)).collect();
            let mut results: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; slots.len()];
            rayon::scope(|scope| {
                for (slot, out) in results.iter_mut().enumerate() {
                    let (xp, dp, mp, ip, rp) = (xp, dp, mp, ip, rp);
                    let start = slot * chunk;
                    let end = (start + chunk).min(rows);
                    scope.spawn(move |_| {
                        let (xp, dp, mp, ip, rp) = (xp, dp, mp, ip, rp);
                        let mut sd = vec![0.0f64; c];
                        let mut sdx = vec![0.0f64; c];
                        let mut bd = vec![0.0f32; c];
                        let mut bx = vec![0.0f32; c];
                        const BLOCK: usize = 512;
                        let mut r = start;
                        while r < end {
                            let stop = (r + BLOCK).min(end);
                            // SAFETY: indices bounded by rows * c and c
                            unsafe {
                                while r < stop {
                                    let xrow = xp.0.add(r * c);
                                    let drow = dp.0.add(r * c);
                                    match rp {
                                        Some(rel) => {
                                            let rrow = rel.0.add(r * c);
                                            for i in 0..c {
                                                if *rrow.add(i) > 0.0 {
                                                    let xhat = (*xrow.add(i) - *mp.0.add(i))
                                                        * *ip.0.add(i);
                                                    let d = *drow.add(i);
                                                    *bd.get_unchecked_mut(i) += d;
                                                    *bx.get_unchecked_mut(i) += d * xhat;
                                                }
                                            }
                                        }
                                        None => {
                                            for i in 0..c {
                                                let xhat = (*xrow.add(i) - *mp.0.add(i))
                                                    * *ip.0.add(i);
                                                let d = *drow.add(i);
                                                *bd.get_unchecked_mut(i) += d;
                                                *bx.get_unchecked_mut(i) += d * xhat;
                                            }
                                        }
                                    }
                                    r += 1;
                                }
                            }
                            for i in 0..c {
                                sd[i] += bd[i] as f64;
                                sdx[i] += bx[i] as f64;
                                bd[i] = 0.0;
                                bx[i] = 0.0;
                            }
                        }
                        *out = Some((sd, sdx));
                    });
                }
            });
            for r in results {
                let (sd, sdx) = r.expect("thread completed");
                for i in 0..c {
                    sum_dy[i] += sd[i];
                    sum_dy_xhat[i] += sdx[i];
                }
            }
        }
        for i in 0..c {
            self.beta.grad[i] += sum_dy[i] as f32;
            self.gamma.grad[i] += sum_dy_xhat[i] as f32;
        }

        let coef: Vec<f32> = (0..c)
            .map(|i| self.gamma.value[i] * cache.invstd[i])
            .collect();
        let mean_dy: Vec<f32> = sum_dy.iter().map(|&s| (s / n) as f32).collect();
        let mean_dy_xhat: Vec<f32> = sum_dy_xhat.iter().map(|&s| (s / n) as f32).collect();
        let mut dx = super::uninit4((b, h, w, c));
        {
            let xp = super::SharedConst(xs.as_ptr());
            let dp = super::SharedConst(dys.as_ptr());
            let op = super::SharedMut(dx.as_slice_mut().unwrap().as_mut_ptr());
            let mp = super::SharedConst(cache.mean.as_ptr());
            let ip = super::SharedConst(cache.invstd.as_ptr());
            let cp = super::SharedConst(coef.as_ptr());
            let ap = super::SharedConst(mean_dy.as_ptr());
            let bp = super::SharedConst(mean_dy_xhat.as_ptr());
            let rp = relu_out.map(|r| super::SharedConst(r.as_slice().unwrap().as_ptr()));
            super::par_chunks(rows, move |range| {
                let (xp, dp, op, mp, ip, cp, ap, bp, rp) = (xp, dp, op, mp, ip, cp, ap, bp, rp);
                // SAFETY: disjoint row ranges; indices < rows * c
                unsafe {
                    for r in range {
                        let xrow = xp.0.add(r * c);
                        let drow = dp.0.add(r * c);
                        let orow = op.0.add(r * c);
                        match rp {
                            Some(rel) => {
                                let rrow = rel.0.add(r * c);
                                for i in 0..c {
                                    let d =
                                        if *rrow.add(i) > 0.0 { *drow.add(i) } else { 0.0 };
                                    let xhat = (*xrow.add(i) - *mp.0.add(i)) * *ip.0.add(i);
                                    *orow.add(i) = *cp.0.add(i)
                                        * (d - *ap.0.add(i) - xhat * *bp.0.add(i));
                                }
                            }
                            None => {
                                for i in 0..c {
                                    let xhat = (*xrow.add(i) - *mp.0.add(i)) * *ip.0.add(i);
                                    *orow.add(i) = *cp.0.add(i)
                                        * (*drow.add(i) - *ap.0.add(i) - xhat * *bp.0.add(i));
                                }
                            }
                        }
                    }
                }
            });
        }
        dx
    }
}

impl Visit for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_forward_normalizes_batch() {
        let mut bn = BatchNorm2d::new("bn", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((4, 5, 5, 3), |_| rng.random_range(-2.0f32..3.0));
        let (y, _) = bn.forward_train(&x);
        let n = (4 * 5 * 5) as f64;
        for ci in 0..3 {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for v in y.index_axis(ndarray::Axis(3), ci).iter() {
                mean += *v as f64;
            }
            mean /= n;
            for v in y.index_axis(ndarray::Axis(3), ci).iter() {
                var += (*v as f64 - mean).powi(2);
            }
            var /= n;
            assert!(mean.abs() < 1e-4, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "channel {ci} var {var}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // non-trivial affine parameters
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = Array4::from_shape_fn((2, 3, 3, 2), |_| rng.random_range(-1.0f32..1.0));
        // objective: sum(y * w) with fixed random w, so dy = w
        let wgt = Array4::from_shape_fn((2, 3, 3, 2), |_| rng.random_range(-1.0f32..1.0));
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&x, &cache, &wgt);

        let h = 1e-3f32;
        let loss = |bn: &mut BatchNorm2d, x: &Array4<f32>| -> f64 {
            let (y, _) = bn.forward_train(x);
            y.iter().zip(wgt.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        for &(bi, iy, ix, ci) in &[(0usize, 0usize, 0usize, 0usize), (1, 2, 1, 1), (0, 1, 2, 0)] {
            let mut xp = x.clone();
            xp[(bi, iy, ix, ci)] += h;
            let mut xm = x.clone();
            xm[(bi, iy, ix, ci)] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h as f64);
            let an = dx[(bi, iy, ix, ci)] as f64;
            assert!((fd - an).abs() < 2e-2, "dx {an} vs fd {fd}");
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Array4::from_elem((2, 2, 2, 1), 4.0f32);
        for _ in 0..200 {
            bn.forward_train(&x);
        }
        // running mean converges to 4, var to 0 -> eval output ~ beta = 0
        let y = bn.forward_eval(&x);
        for &v in y.iter() {
            assert!(v.abs() < 0.1, "eval output {v}");
        }
    }
}

//! Fully connected layer.

use ndarray::Array2;
use rand::Rng;

use super::gemm;
use super::param::{Param, Visit};

#[derive(Debug, Clone)]
pub struct Dense {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param, // (cin, cout)
    pub bias: Param,   // (cout,)
}

impl Dense {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            cin,
            cout,
            weight: Param::randn(&format!("{name}.weight"), &[cin, cout], cin, rng),
            bias: Param::constant(&format!("{name}.bias"), &[cout], 0.0),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let (b, cin) = x.dim();
        assert_eq!(cin, self.cin, "dense input width");
        let mut y = Array2::<f32>::zeros((b, self.cout));
        gemm::sgemm(
            b,
            self.cin,
            self.cout,
            x.as_slice().unwrap(),
            &self.weight.value,
            0.0,
            y.as_slice_mut().unwrap(),
        );
        let ys = y.as_slice_mut().unwrap();
        for row in ys.chunks_exact_mut(self.cout) {
            for (v, &bv) in row.iter_mut().zip(&self.bias.value) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        let (b, _) = x.dim();
        gemm::sgemm_tn(
            self.cin,
            b,
            self.cout,
            x.as_slice().unwrap(),
            dy.as_slice().unwrap(),
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.as_slice().unwrap().chunks_exact(self.cout) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Array2::<f32>::zeros((b, self.cin));
        gemm::sgemm_nt(
            b,
            self.cout,
            self.cin,
            dy.as_slice().unwrap(),
            &self.weight.value,
            0.0,
            dx.as_slice_mut().unwrap(),
        );
        dx
    }
}

impl Visit for Dense {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut super::param::Buffer)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_backward_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Dense::new("fc", 3, 2, &mut rng);
        layer.weight.value = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        layer.bias.value = vec![0.5, -0.5];
        let x = Array2::from_shape_vec((1, 3), vec![2.0, 3.0, 4.0]).unwrap();
        let y = layer.forward(&x);
        // col0: 2*1 + 3*0 + 4*1 + 0.5 ; col1: 2*0 + 3*1 + 4*1 - 0.5
        assert_eq!(y[(0, 0)], 6.5);
        assert_eq!(y[(0, 1)], 6.5);

        let dy = Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
        let dx = layer.backward(&x, &dy);
        assert_eq!(dx[(0, 0)], 1.0); // w[0,:] . dy
        assert_eq!(dx[(0, 1)], 2.0);
        assert_eq!(dx[(0, 2)], 3.0);
        assert_eq!(layer.bias.grad, vec![1.0, 2.0]);
        assert_eq!(layer.weight.grad[0], 2.0); // x0 * dy0
    }
}

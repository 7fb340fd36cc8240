//! Dense row-major f64 tensors. Shapes are explicit everywhere; nothing
//! broadcasts implicitly.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Standard normal fill from the given stream.
    pub fn randn(shape: Vec<usize>, rng: &mut ChaCha12Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| randn_scalar(rng)).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Uniform fill on [lo, hi).
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// One standard normal draw. Box-Muller on top of ChaCha keeps the exact
/// bit pattern a local decision instead of a rand_distr implementation
/// detail; these draws feed the reproducibility guarantees.
pub fn randn_scalar(rng: &mut ChaCha12Rng) -> f64 {
    // u1 in (0,1] so ln(u1) is finite
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_moments_are_sane() {
        let mut rng = stream_rng(7, 99);
        let t = Tensor::randn(vec![20000], &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var: f64 =
            t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn randn_is_reproducible() {
        let mut a = stream_rng(11, 4);
        let mut b = stream_rng(11, 4);
        let ta = Tensor::randn(vec![64], &mut a);
        let tb = Tensor::randn(vec![64], &mut b);
        assert_eq!(ta.data(), tb.data());
    }
}

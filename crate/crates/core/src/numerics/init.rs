use rand::Rng;

use super::tensor::Tensor;

/// Glorot-uniform kernel of shape `[width, cin, cout]`.
///
/// Bound is `sqrt(6 / (fan_in + fan_out))` with `fan = width * channels`.
pub fn xavier_kernel<R: Rng>(rng: &mut R, width: usize, cin: usize, cout: usize) -> Tensor {
    let bound = (6.0 / ((width * cin + width * cout) as f64)).sqrt();
    let data = (0..width * cin * cout)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![width, cin, cout], data)
        .expect("kernel shape")
        .with_grad()
}

pub fn zero_bias(len: usize) -> Tensor {
    Tensor::zeros(vec![len]).with_grad()
}

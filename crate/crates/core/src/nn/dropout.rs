use ndarray::{Array2, Ix2};
use rand::Rng;

/// Inverted-dropout mask: entries are `0` with probability `p` and
/// `1 / (1 - p)` otherwise.
pub fn mask<R: Rng>(shape: Ix2, p: f64, rng: &mut R) -> Array2<f64> {
    if p <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

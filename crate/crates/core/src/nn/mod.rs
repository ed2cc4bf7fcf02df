//! Layers with explicit forward caches and hand-written backward passes.

pub mod adam;
pub mod char_cnn;
pub mod dropout;
pub mod linear;
pub mod lstm;
pub mod param;

pub use adam::Adam;
pub use char_cnn::{CharCnn, CharVocab};
pub use linear::Linear;
pub use lstm::{BiLstm, BiLstmCache, Lstm};
pub use param::{Param, Params};

use ndarray::{Array1, ArrayView1};

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(x);
    x.mapv(|v| (v - lse).exp())
}

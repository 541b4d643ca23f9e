//! Differentiable building blocks: tensors, a reverse-mode tape, attention
//! layers, Adam and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{DecoderLayer, Dropout, EncoderLayer, Linear, ModelConfig};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{AttentionSpec, Gradients, Segment, Tape, Var};
pub use tensor::{Scalar, Tensor};

/// Layer normalization of a single vector (epsilon 1e-5).
pub fn layer_norm(a: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(1, a.len(), a.to_vec()));
    let g = tape.constant(Tensor::from_vec(1, gain.len(), gain.to_vec()));
    let b = tape.constant(Tensor::from_vec(1, bias.len(), bias.to_vec()));
    let y = tape.layer_norm(x, g, b);
    tape.value(y).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_input_is_zero() {
        assert_eq!(layer_norm(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn layer_norm_of_plus_minus_one() {
        // mean 0, variance 1: output is (x / sqrt(1 + 1e-5)).
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - s).abs() < 1e-12 && (y[1] + s).abs() < 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let y = layer_norm(&[3.0, -7.0, 0.5], &[0.0; 3], &[0.1, 0.2, 0.3]);
        assert_eq!(y, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let a = [0.3, 2.0, -1.5, 4.0, 0.0];
        let y = layer_norm(&a, &[1.0; 5], &[0.0; 5]);
        let mean = y.iter().sum::<f64>() / 5.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

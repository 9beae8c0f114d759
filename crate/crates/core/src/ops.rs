//! Tensor-level forward functions for callers that do not need gradients.
//!
//! Each function runs the same code path as the corresponding [`Graph`]
//! operation on an inference graph, so values agree bit for bit.

use crate::autodiff::{Graph, ParamStore};
use crate::error::{CstpError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Matrix product; `a` may carry leading batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let store = ParamStore::new();
    let g = Graph::inference(&store);
    Ok(g.matmul(&g.constant(a.clone()), &g.constant(b.clone()))?.to_tensor())
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let w = x.last_dim();
    if w > 0 {
        for row in out.data_mut().chunks_mut(w) {
            kernels::softmax_in_place(row);
        }
    }
    out
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let store = ParamStore::new();
    let g = Graph::inference(&store);
    let y = g.layer_norm(
        &g.constant(x.clone()),
        &g.constant(gain.clone()),
        &g.constant(bias.clone()),
        eps,
    )?;
    Ok(y.to_tensor())
}

/// Causal depthwise convolution of a `T × c` signal with a `k × c` kernel.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || kernel.rank() != 2 {
        return Err(CstpError::shape(format!(
            "depthwise_conv1d expects T×c input and k×c kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if kernel.shape()[0] == 0 {
        return Err(CstpError::invalid("kernel length must be at least 1"));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let store = ParamStore::new();
    let g = Graph::inference(&store);
    let x4 = g.constant(x.reshape(vec![1, t, 1, c])?);
    let y = g.conv_time_depthwise(&x4, &g.constant(kernel.clone()), None)?;
    y.value().reshape(vec![t, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_error_names_shapes() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_logs() {
        let x = Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let p = softmax_rows(&x);
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        let y = layer_norm(
            &Tensor::from_vec(vec![1.0, 2.0, 3.0]),
            &Tensor::ones(vec![3]),
            &Tensor::zeros(vec![3]),
            1e-12,
        )
        .unwrap();
        let r = 1.5f64.sqrt();
        for (got, want) in y.data().iter().zip([-r, 0.0, r]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let bias = Tensor::from_vec(vec![0.5, -1.0]);
        let y = layer_norm(&Tensor::from_vec(vec![3.0, 7.0]), &Tensor::zeros(vec![2]), &bias, 1e-5).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn conv_hand_example_and_identity() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(depthwise_conv1d(&x, &k).unwrap().data(), &[1.0, 3.0, 5.0]);
        let id = Tensor::new(vec![4, 1], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(depthwise_conv1d(&x, &id).unwrap().data(), x.data());
    }
}

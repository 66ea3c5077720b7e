use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::gemm::{gemm, Layout};

fn dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    if weights.shape().len() != 2 {
        return Err(Error::shape(format!(
            "linear weights must be 2-D, got {:?}",
            weights.shape()
        )));
    }
    let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
    if input.per_sample() != n_in {
        return Err(Error::shape(format!(
            "linear expects {n_in} input features, got {:?}",
            input.shape()
        )));
    }
    Ok((input.batch(), n_in, n_out))
}

/// `y = x W^T + b` over the flattened per-sample features of `input`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, n_in, n_out) = dims(input, weights)?;
    bias.check_shape(&[n_out], "linear bias")?;
    let mut out = Tensor::zeros(&[n, n_out]);
    for row in out.data_mut().chunks_exact_mut(n_out) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        n_in,
        n_out,
        input.data(),
        Layout::row_major(n_in),
        weights.data(),
        Layout::transposed(n_in),
        1.0,
        out.data_mut(),
        Layout::row_major(n_out),
    );
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` keeps the
/// shape of `input`.
pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, gw, gb) = linear_backward_parts(grad_out, input, weights, true)?;
    Ok((gi.expect("input gradient requested"), gw, gb))
}

pub fn linear_backward_parts(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, n_in, n_out) = dims(input, weights)?;
    grad_out.check_shape(&[n, n_out], "linear grad_out")?;
    let mut gw = Tensor::zeros(&[n_out, n_in]);
    gemm(
        n_out,
        n,
        n_in,
        grad_out.data(),
        Layout::transposed(n_out),
        input.data(),
        Layout::row_major(n_in),
        0.0,
        gw.data_mut(),
        Layout::row_major(n_in),
    );
    let mut gb = Tensor::zeros(&[n_out]);
    for row in grad_out.data().chunks_exact(n_out) {
        for (b, g) in gb.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let gi = need_input.then(|| {
        let mut gi = Tensor::zeros(input.shape());
        gemm(
            n,
            n_out,
            n_in,
            grad_out.data(),
            Layout::row_major(n_out),
            weights.data(),
            Layout::row_major(n_in),
            0.0,
            gi.data_mut(),
            Layout::row_major(n_in),
        );
        gi
    });
    Ok((gi, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        let w = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let y = linear_forward(&x, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn accepts_feature_maps_as_flat_input() {
        let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
        let w = Tensor::full(&[1, 8], 1.0);
        let y = linear_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[28.0, 92.0]);
        let (gi, _, _) = linear_backward(&Tensor::full(&[2, 1], 1.0), &x, &w).unwrap();
        assert_eq!(gi.shape(), x.shape());
    }

    #[test]
    fn rejects_wrong_width() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(linear_forward(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 mean pooling with stride 2 over `[N, C, H, W]`.
pub fn avgpool2x2_forward(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape(format!(
            "avgpool2x2 needs [N, C, even H, even W], got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[s[0], s[1], ho, wo]);
    for (src, dst) in input
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(ho * wo))
    {
        for i in 0..ho {
            let r0 = &src[2 * i * w..][..w];
            let r1 = &src[(2 * i + 1) * w..][..w];
            for j in 0..wo {
                dst[i * wo + j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
            }
        }
    }
    Ok(out)
}

/// Spreads each output gradient evenly (a quarter each) over its window.
pub fn avgpool2x2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let s = grad_out.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("avgpool2x2 grad must be 4-D, got {s:?}")));
    }
    let (ho, wo) = (s[2], s[3]);
    let (h, w) = (2 * ho, 2 * wo);
    let mut gi = Tensor::zeros(&[s[0], s[1], h, w]);
    for (src, dst) in grad_out
        .data()
        .chunks_exact(ho * wo)
        .zip(gi.data_mut().chunks_exact_mut(h * w))
    {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * src[i * wo + j];
                dst[2 * i * w + 2 * j] = g;
                dst[2 * i * w + 2 * j + 1] = g;
                dst[(2 * i + 1) * w + 2 * j] = g;
                dst[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    Ok(gi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_mean() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2x2_forward(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn backward_conserves_mass() {
        let g = Tensor::from_fn(&[2, 3, 2, 3], |i| (i as f64 * 0.7).sin());
        let gi = avgpool2x2_backward(&g).unwrap();
        assert_eq!(gi.shape(), &[2, 3, 4, 6]);
        assert!((gi.sum() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn odd_input_rejected() {
        assert!(avgpool2x2_forward(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
    }
}

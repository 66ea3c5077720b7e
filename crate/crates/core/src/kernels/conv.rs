//! 2-D cross-correlation through im2col and GEMM.

use crate::error::Result;
use crate::network::ConvSpec;
use crate::tensor::Tensor;

use super::gemm::{gemm, Layout};

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn geometry(input_shape: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    use crate::error::Error;
    if input_shape.len() != 4 || input_shape[1] != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d input {input_shape:?} does not match {} input channels",
            spec.in_channels
        )));
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = spec
        .output_hw(h, w)
        .ok_or_else(|| Error::shape(format!("conv2d kernel does not fit input {input_shape:?}")))?;
    Ok(Geometry {
        c: spec.in_channels,
        h,
        w,
        ho,
        wo,
    })
}

/// Unfolds one sample `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
fn im2col(x: &[f64], g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    let pad = spec.padding as isize;
    for c in 0..g.c {
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - pad;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, out) in line.iter_mut().enumerate() {
                        let jj = (oj * spec.stride + kj) as isize - pad;
                        *out = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[C*kh*kw, Ho*Wo]` back onto `[C, H, W]`, accumulating overlaps.
fn col2im(cols: &[f64], g: &Geometry, spec: &ConvSpec, x: &mut [f64]) {
    let p = g.ho * g.wo;
    let pad = spec.padding as isize;
    for c in 0..g.c {
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (c * spec.kernel_h + ki) * spec.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * spec.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * spec.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(input.shape(), spec)?;
    weights.check_shape(&spec.weight_shape(), "conv2d weights")?;
    bias.check_shape(&[spec.out_channels], "conv2d bias")?;
    let n = input.batch();
    let o = spec.out_channels;
    let ck = spec.fan_in();
    let p = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
    let mut cols = vec![0.0; ck * p];
    for s in 0..n {
        im2col(input.sample(s), &g, spec, &mut cols);
        let y = out.sample_mut(s);
        for (oc, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        gemm(
            o,
            ck,
            p,
            weights.data(),
            Layout::row_major(ck),
            &cols,
            Layout::row_major(p),
            1.0,
            y,
            Layout::row_major(p),
        );
    }
    Ok(out)
}

pub struct ConvGrads {
    /// `None` when the caller did not request the input gradient.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient and the
/// cached forward input.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let ConvGrads { input, weights, bias } = conv2d_backward_parts(grad_out, input, weights, spec, true)?;
    Ok((input.expect("input gradient requested"), weights, bias))
}

pub fn conv2d_backward_parts(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = geometry(input.shape(), spec)?;
    weights.check_shape(&spec.weight_shape(), "conv2d weights")?;
    let n = input.batch();
    let o = spec.out_channels;
    grad_out.check_shape(&[n, o, g.ho, g.wo], "conv2d grad_out")?;
    let ck = spec.fan_in();
    let p = g.ho * g.wo;

    let mut gw = Tensor::zeros(&spec.weight_shape());
    let mut gb = Tensor::zeros(&[o]);
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![0.0; ck * p];
    let mut gcols = vec![0.0; ck * p];
    for s in 0..n {
        let go = grad_out.sample(s);
        if go.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (oc, row) in go.chunks_exact(p).enumerate() {
            gb.data_mut()[oc] += row.iter().sum::<f64>();
        }
        im2col(input.sample(s), &g, spec, &mut cols);
        // gw[O, CK] += go[O, P] * cols^T
        gemm(
            o,
            p,
            ck,
            go,
            Layout::row_major(p),
            &cols,
            Layout::transposed(p),
            1.0,
            gw.data_mut(),
            Layout::row_major(ck),
        );
        if let Some(gi) = gi.as_mut() {
            // gcols[CK, P] = w^T * go
            gemm(
                ck,
                o,
                p,
                weights.data(),
                Layout::transposed(ck),
                go,
                Layout::row_major(p),
                0.0,
                &mut gcols,
                Layout::row_major(p),
            );
            col2im(&gcols, &g, spec, gi.sample_mut(s));
        }
    }
    Ok(ConvGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
        }
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), &spec(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64).sin());
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, &spec(2, 3, 3, 2, 1)).unwrap();
        for s in 0..2 {
            for (c, chunk) in y.sample(s).chunks(9).enumerate() {
                assert!(chunk.iter().all(|&v| v == b.data()[c]));
            }
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let sp = spec(2, 3, 3, 1, 1);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).cos());
        let (gi, gw, gb) = conv2d_backward(&Tensor::zeros(&[1, 3, 4, 4]), &x, &w, &sp).unwrap();
        assert_eq!(gi.max_abs() + gw.max_abs() + gb.max_abs(), 0.0);
    }

    #[test]
    fn single_pixel_grad_on_1x1_filter_is_input_patch() {
        let sp = spec(2, 1, 1, 1, 0);
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 + 1.0);
        let w = Tensor::full(&[1, 2, 1, 1], 0.3);
        let mut go = Tensor::zeros(&[1, 1, 3, 3]);
        go.data_mut()[4] = 1.0; // centre pixel
        let (_, gw, gb) = conv2d_backward(&go, &x, &w, &sp).unwrap();
        assert_eq!(gw.data(), &[x.data()[4], x.data()[9 + 4]]);
        assert_eq!(gb.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), &spec(2, 1, 3, 1, 1)).is_err());
    }
}

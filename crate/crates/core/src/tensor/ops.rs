//! Differentiable tensor operations with hand-written backwards.

use super::scalar::{sc, Scalar};
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// 2D cross-correlation with zero padding (k-1)/2, stride 1; spatial size is
/// preserved. `input` is [C_in,H,W], `kernel` [C_out,C_in,k,k], `bias`
/// optional [C_out].
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (c_in, h, w) = dims3(input, "conv2d input")?;
    let (c_out, kc_in, kh, kw) = dims4(kernel, "conv2d kernel")?;
    if kc_in != c_in {
        return Err(Error::shape("conv2d kernel vs input channels", 1, c_in, kc_in));
    }
    if kh != kw {
        return Err(Error::shape("conv2d kernel must be square", 3, kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::data(format!("conv2d kernel size must be odd, got {kh}")));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d bias", 0, c_out, b.len()));
        }
    }
    let pad = (kh - 1) / 2;
    let mut out = Tensor::zeros(vec![c_out, h, w]);
    let in_data = input.data();
    let k_data = kernel.data();
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(co, out_plane)| {
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for ci in 0..c_in {
                let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let k_row = &k_data[((co * c_in + ci) * kh + ky) * kw..][..kw];
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let in_row = &in_plane[(iy - pad) * w..(iy - pad) * w + w];
                        let out_row = &mut out_plane[y * w..y * w + w];
                        for (kx, &kv) in k_row.iter().enumerate() {
                            if kv == S::zero() {
                                continue;
                            }
                            // x + kx - pad must land in [0, w)
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (w + pad - kx).min(w);
                            for x in x_lo..x_hi {
                                out_row[x] = out_row[x] + kv * in_row[x + kx - pad];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] for all three inputs.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (c_in, h, w) = dims3(input, "conv2d_backward input")?;
    let (c_out, _, kh, kw) = dims4(kernel, "conv2d_backward kernel")?;
    let (go_c, go_h, go_w) = dims3(grad_out, "conv2d_backward grad")?;
    if (go_c, go_h, go_w) != (c_out, h, w) {
        return Err(Error::shape("conv2d_backward grad channels", 0, c_out, go_c));
    }
    let pad = (kh - 1) / 2;
    let g_data = grad_out.data();
    let k_data = kernel.data();
    let in_data = input.data();

    let mut grad_input = Tensor::zeros(vec![c_in, h, w]);
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ci, gi_plane)| {
            for co in 0..c_out {
                let g_plane = &g_data[co * h * w..(co + 1) * h * w];
                for ky in 0..kh {
                    let k_row = &k_data[((co * c_in + ci) * kh + ky) * kw..][..kw];
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        // out row y reads input row iy-pad; transpose writes back
                        let gi_row = &mut gi_plane[(iy - pad) * w..(iy - pad) * w + w];
                        let g_row = &g_plane[y * w..y * w + w];
                        for (kx, &kv) in k_row.iter().enumerate() {
                            if kv == S::zero() {
                                continue;
                            }
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (w + pad - kx).min(w);
                            for x in x_lo..x_hi {
                                gi_row[x + kx - pad] = gi_row[x + kx - pad] + kv * g_row[x];
                            }
                        }
                    }
                }
            }
        });

    let mut grad_kernel = Tensor::zeros(vec![c_out, c_in, kh, kw]);
    grad_kernel
        .data_mut()
        .par_chunks_mut(c_in * kh * kw)
        .enumerate()
        .for_each(|(co, gk_block)| {
            let g_plane = &g_data[co * h * w..(co + 1) * h * w];
            for ci in 0..c_in {
                let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = S::zero();
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let in_row = &in_plane[(iy - pad) * w..(iy - pad) * w + w];
                            let g_row = &g_plane[y * w..y * w + w];
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (w + pad - kx).min(w);
                            for x in x_lo..x_hi {
                                acc = acc + g_row[x] * in_row[x + kx - pad];
                            }
                        }
                        gk_block[(ci * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    let mut grad_bias = Tensor::zeros(vec![c_out]);
    for co in 0..c_out {
        let mut acc = S::zero();
        for v in &g_data[co * h * w..(co + 1) * h * w] {
            acc = acc + *v;
        }
        grad_bias.data_mut()[co] = acc;
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Source sample position for 2x bilinear upsampling: centers at
/// (i+0.5)/2 - 0.5, edges clamped.
#[inline]
fn up2_src<S: Scalar>(i: usize, src_len: usize) -> (usize, usize, S) {
    let pos = 0.5 * i as f64 - 0.25;
    let floor = pos.floor();
    let frac = sc::<S>(pos - floor);
    let lo = (floor.max(0.0) as usize).min(src_len - 1);
    let hi = ((floor + 1.0).max(0.0) as usize).min(src_len - 1);
    (lo, hi, frac)
}

/// Bilinear 2x upsampling of a [C,H,W] tensor to [C,2H,2W].
pub fn upsample2x<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = dims3(input, "upsample2x input")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let xs: Vec<(usize, usize, S)> = (0..ow).map(|x| up2_src::<S>(x, w)).collect();
    let ys: Vec<(usize, usize, S)> = (0..oh).map(|y| up2_src::<S>(y, h)).collect();
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ci, out_plane)| {
            let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
            for y in 0..oh {
                let (y0, y1, fy) = ys[y];
                let row0 = &in_plane[y0 * w..y0 * w + w];
                let row1 = &in_plane[y1 * w..y1 * w + w];
                let out_row = &mut out_plane[y * ow..y * ow + ow];
                for x in 0..ow {
                    let (x0, x1, fx) = xs[x];
                    let one = S::one();
                    let top = row0[x0] * (one - fx) + row0[x1] * fx;
                    let bot = row1[x0] * (one - fx) + row1[x1] * fx;
                    out_row[x] = top * (one - fy) + bot * fy;
                }
            }
        });
    Ok(out)
}

/// Transpose of [`upsample2x`]: scatters a [C,2H,2W] gradient back to [C,H,W].
pub fn upsample2x_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<S>> {
    let (c, oh, ow) = dims3(grad_out, "upsample2x_backward grad")?;
    if oh != 2 * in_h || ow != 2 * in_w {
        return Err(Error::shape("upsample2x_backward spatial", 1, 2 * in_h, oh));
    }
    let xs: Vec<(usize, usize, S)> = (0..ow).map(|x| up2_src::<S>(x, in_w)).collect();
    let ys: Vec<(usize, usize, S)> = (0..oh).map(|y| up2_src::<S>(y, in_h)).collect();
    let g_data = grad_out.data();
    let mut grad_in = Tensor::zeros(vec![c, in_h, in_w]);
    grad_in
        .data_mut()
        .par_chunks_mut(in_h * in_w)
        .enumerate()
        .for_each(|(ci, gi_plane)| {
            let g_plane = &g_data[ci * oh * ow..(ci + 1) * oh * ow];
            let one = S::one();
            for y in 0..oh {
                let (y0, y1, fy) = ys[y];
                for x in 0..ow {
                    let (x0, x1, fx) = xs[x];
                    let g = g_plane[y * ow + x];
                    gi_plane[y0 * in_w + x0] =
                        gi_plane[y0 * in_w + x0] + g * (one - fy) * (one - fx);
                    gi_plane[y0 * in_w + x1] = gi_plane[y0 * in_w + x1] + g * (one - fy) * fx;
                    gi_plane[y1 * in_w + x0] = gi_plane[y1 * in_w + x0] + g * fy * (one - fx);
                    gi_plane[y1 * in_w + x1] = gi_plane[y1 * in_w + x1] + g * fy * fx;
                }
            }
        });
    Ok(grad_in)
}

#[inline]
pub fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp() - S::one()
    }
}

/// Derivative of ELU from its saved output.
#[inline]
pub fn elu_grad_from_output<S: Scalar>(y: S) -> S {
    if y > S::zero() {
        S::one()
    } else {
        y + S::one()
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub fn sigmoid_grad_from_output<S: Scalar>(y: S) -> S {
    y * (S::one() - y)
}

#[inline]
pub fn logit<S: Scalar>(p: S) -> S {
    (p / (S::one() - p)).ln()
}

/// Numerically stable ln(1+exp(x)).
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

pub(crate) fn dims3<S: Scalar>(t: &Tensor<S>, context: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(context, 0, 3, s.len()));
    }
    Ok((s[0], s[1], s[2]))
}

pub(crate) fn dims4<S: Scalar>(t: &Tensor<S>, context: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(context, 0, 4, s.len()));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        let input = Tensor::from_fn(vec![1, 4, 5], |i| i as f32 * 0.37 - 2.0);
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
        let out = conv2d(&input, &kernel, None).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_zero_padding_counts() {
        let input = Tensor::full(vec![1, 3, 3], 1.0f32);
        let kernel = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let out = conv2d(&input, &kernel, None).unwrap();
        assert_eq!(out.data()[4], 9.0); // center sees all nine
        assert_eq!(out.data()[0], 4.0); // corner sees a 2x2 patch
        assert_eq!(out.data()[1], 6.0); // edge sees 2x3
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let input = Tensor::zeros(vec![2, 3, 3]);
        let kernel = Tensor::zeros(vec![1, 3, 3, 3]);
        let err = conv2d::<f32>(&input, &kernel, None).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let input = Tensor::full(vec![2, 3, 4], 0.7f32);
        let out = upsample2x(&input).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn upsample_line_matches_hand_values() {
        // centers at (i+0.5)/2 - 0.5 give [0, 0.25, 0.75, 1] for input [0, 1]
        let input = Tensor::new(vec![1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let out = upsample2x(&input).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", out.data());
        }
    }

    #[test]
    fn upsample_backward_preserves_mass() {
        let grad = Tensor::full(vec![1, 6, 8], 1.0f64);
        let gi = upsample2x_backward(&grad, 3, 4).unwrap();
        let total: f64 = gi.data().iter().sum();
        assert!((total - 48.0).abs() < 1e-9);
    }

    fn fd_conv_check(c_in: usize, c_out: usize, h: usize, w: usize, k: usize, seed: u64) -> f64 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let input: Tensor<f64> = Tensor::from_fn(vec![c_in, h, w], |_| rng.gen_range(-1.0..1.0));
        let kernel = Tensor::from_fn(vec![c_out, c_in, k, k], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(vec![c_out], |_| rng.gen_range(-1.0..1.0));
        let loss = |inp: &Tensor<f64>, ker: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let out = conv2d(inp, ker, Some(b)).unwrap();
            // weighted sum so every output position matters differently
            out.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * ((i % 7) as f64 - 3.0))
                .sum()
        };
        let out = conv2d(&input, &kernel, Some(&bias)).unwrap();
        let grad_out = Tensor::from_fn(out.shape().to_vec(), |i| (i % 7) as f64 - 3.0);
        let (gi, gk, gb) = conv2d_backward(&input, &kernel, &grad_out).unwrap();
        let h_step = 1e-3;
        let mut max_rel: f64 = 0.0;
        let mut check = |t: &Tensor<f64>, g: &Tensor<f64>, which: usize| {
            let mut t = t.clone();
            for i in (0..t.len()).step_by(t.len() / 20 + 1) {
                let orig = t.data()[i];
                t.data_mut()[i] = orig + h_step;
                let lp = match which {
                    0 => loss(&t, &kernel, &bias),
                    1 => loss(&input, &t, &bias),
                    _ => loss(&input, &kernel, &t),
                };
                t.data_mut()[i] = orig - h_step;
                let lm = match which {
                    0 => loss(&t, &kernel, &bias),
                    1 => loss(&input, &t, &bias),
                    _ => loss(&input, &kernel, &t),
                };
                t.data_mut()[i] = orig;
                let fd = (lp - lm) / (2.0 * h_step);
                let a = g.data()[i];
                // floor absorbs central-difference rounding noise on
                // exactly-zero gradients (loss is O(10), noise ~1e-12)
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                max_rel = max_rel.max(rel);
            }
        };
        check(&input, &gi, 0);
        check(&kernel, &gk, 1);
        check(&bias, &gb, 2);
        max_rel
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        assert!(fd_conv_check(2, 4, 8, 8, 3, 11) < 1e-6);
    }

    #[test]
    fn upsample_gradient_is_exact_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_fn(vec![2, 3, 5], |_| rng.gen_range(-1.0f64..1.0));
        let weights = Tensor::from_fn(vec![2, 6, 10], |i| ((i * 31 % 17) as f64) / 7.0 - 1.0);
        let out = upsample2x(&input).unwrap();
        let fwd: f64 = out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let gi = upsample2x_backward(&weights, 3, 5).unwrap();
        let bwd: f64 = gi.data().iter().zip(input.data()).map(|(a, b)| a * b).sum();
        assert!((fwd - bwd).abs() < 1e-10, "adjoint identity violated");
    }
}

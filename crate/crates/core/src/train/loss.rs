//! Image losses and metrics: MSE, differentiable SSIM, PSNR, and their
//! combination used as the training criterion.

use crate::error::{Error, Result};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use rayon::prelude::*;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// SSIM weight in the combined loss.
pub const LOSS_LAMBDA: f64 = 0.2;

pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse shapes", 0, a.len(), b.len()));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_s() - y.to_f64_s();
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Gradient of mse(a,b) with respect to `a`.
pub fn mse_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let n = sc::<S>(a.len() as f64);
    let two = sc::<S>(2.0);
    Tensor::from_fn(a.shape().to_vec(), |i| {
        two * (a.data()[i] - b.data()[i]) / n
    })
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr(mse_value: f64) -> f64 {
    -10.0 * mse_value.log10()
}

fn gaussian_window<S: Scalar>() -> [S; SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    std::array::from_fn(|i| sc::<S>(w[i] / total))
}

/// Valid-region separable correlation with the Gaussian window.
fn blur_valid<S: Scalar>(plane: &[S], h: usize, w: usize, win: &[S; SSIM_WINDOW]) -> Vec<S> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![S::zero(); h * vw];
    tmp.par_chunks_mut(vw).enumerate().for_each(|(y, row)| {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..vw {
            let mut acc = S::zero();
            for (k, wk) in win.iter().enumerate() {
                acc = acc + *wk * src[x + k];
            }
            row[x] = acc;
        }
    });
    let mut out = vec![S::zero(); vh * vw];
    out.par_chunks_mut(vw).enumerate().for_each(|(y, row)| {
        for x in 0..vw {
            let mut acc = S::zero();
            for (k, wk) in win.iter().enumerate() {
                acc = acc + *wk * tmp[(y + k) * vw + x];
            }
            row[x] = acc;
        }
    });
    out
}

/// Transpose of [`blur_valid`]: distributes a valid-region gradient back to
/// the full image.
fn blur_valid_transpose<S: Scalar>(
    grad: &[S],
    h: usize,
    w: usize,
    win: &[S; SSIM_WINDOW],
) -> Vec<S> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    // vertical scatter as a gather over valid rows
    let mut tmp = vec![S::zero(); h * vw];
    tmp.par_chunks_mut(vw).enumerate().for_each(|(iy, row)| {
        for x in 0..vw {
            let mut acc = S::zero();
            for (k, wk) in win.iter().enumerate() {
                if iy >= k && iy - k < vh {
                    acc = acc + *wk * grad[(iy - k) * vw + x];
                }
            }
            row[x] = acc;
        }
    });
    let mut out = vec![S::zero(); h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(iy, row)| {
        for (ix, o) in row.iter_mut().enumerate() {
            let mut acc = S::zero();
            for (k, wk) in win.iter().enumerate() {
                if ix >= k && ix - k < vw {
                    acc = acc + *wk * tmp[iy * vw + (ix - k)];
                }
            }
            *o = acc;
        }
    });
    out
}

pub struct SsimSaved<S> {
    mu1: Vec<Vec<S>>,
    mu2: Vec<Vec<S>>,
    sigma1: Vec<Vec<S>>,
    sigma2: Vec<Vec<S>>,
    sigma12: Vec<Vec<S>>,
    h: usize,
    w: usize,
    channels: usize,
    global: bool,
}

/// Mean structural similarity over channels and (valid) pixels, differentiable
/// in the first image. Images smaller than the window fall back to global
/// statistics.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(f64, SsimSaved<S>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim shapes", 0, a.len(), b.len()));
    }
    let (c, h, w) = (a.extent(0), a.extent(1), a.extent(2));
    let global = h < SSIM_WINDOW || w < SSIM_WINDOW;
    let win = gaussian_window::<S>();
    let plane = h * w;
    let mut saved = SsimSaved {
        mu1: Vec::new(),
        mu2: Vec::new(),
        sigma1: Vec::new(),
        sigma2: Vec::new(),
        sigma12: Vec::new(),
        h,
        w,
        channels: c,
        global,
    };
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let (mu1, mu2, e_x2, e_y2, e_xy) = if global {
            let n = sc::<S>(plane as f64);
            let m1 = pa.iter().copied().sum::<S>() / n;
            let m2 = pb.iter().copied().sum::<S>() / n;
            let x2 = pa.iter().map(|&v| v * v).sum::<S>() / n;
            let y2 = pb.iter().map(|&v| v * v).sum::<S>() / n;
            let xy = pa.iter().zip(pb).map(|(&x, &y)| x * y).sum::<S>() / n;
            (vec![m1], vec![m2], vec![x2], vec![y2], vec![xy])
        } else {
            let sq1: Vec<S> = pa.iter().map(|&v| v * v).collect();
            let sq2: Vec<S> = pb.iter().map(|&v| v * v).collect();
            let xy: Vec<S> = pa.iter().zip(pb).map(|(&x, &y)| x * y).collect();
            (
                blur_valid(pa, h, w, &win),
                blur_valid(pb, h, w, &win),
                blur_valid(&sq1, h, w, &win),
                blur_valid(&sq2, h, w, &win),
                blur_valid(&xy, h, w, &win),
            )
        };
        let mut s1 = Vec::with_capacity(mu1.len());
        let mut s2 = Vec::with_capacity(mu1.len());
        let mut s12 = Vec::with_capacity(mu1.len());
        for i in 0..mu1.len() {
            s1.push(e_x2[i] - mu1[i] * mu1[i]);
            s2.push(e_y2[i] - mu2[i] * mu2[i]);
            s12.push(e_xy[i] - mu1[i] * mu2[i]);
            let m1 = mu1[i].to_f64_s();
            let m2 = mu2[i].to_f64_s();
            let v1 = s1[i].to_f64_s();
            let v2 = s2[i].to_f64_s();
            let v12 = s12[i].to_f64_s();
            let val = ((2.0 * m1 * m2 + c1) * (2.0 * v12 + c2))
                / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
            total += val;
            count += 1;
        }
        saved.mu1.push(mu1);
        saved.mu2.push(mu2);
        saved.sigma1.push(s1);
        saved.sigma2.push(s2);
        saved.sigma12.push(s12);
    }
    Ok((total / count as f64, saved))
}

/// Gradient of the mean SSIM with respect to the first image, scaled by
/// `upstream`.
pub fn ssim_backward<S: Scalar>(
    saved: &SsimSaved<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    upstream: f64,
) -> Tensor<S> {
    let (h, w, c) = (saved.h, saved.w, saved.channels);
    let plane = h * w;
    let win = gaussian_window::<S>();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n_maps: usize = saved.mu1.iter().map(|m| m.len()).sum();
    let gscale = upstream / n_maps as f64;
    let mut grad = Tensor::zeros(a.shape().to_vec());
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let m = saved.mu1[ch].len();
        let mut co1 = vec![S::zero(); m];
        let mut co2 = vec![S::zero(); m];
        let mut co3 = vec![S::zero(); m];
        for i in 0..m {
            let m1 = saved.mu1[ch][i].to_f64_s();
            let m2 = saved.mu2[ch][i].to_f64_s();
            let v1 = saved.sigma1[ch][i].to_f64_s();
            let v2 = saved.sigma2[ch][i].to_f64_s();
            let v12 = saved.sigma12[ch][i].to_f64_s();
            let aa = 2.0 * m1 * m2 + c1;
            let bb = 2.0 * v12 + c2;
            let cc = m1 * m1 + m2 * m2 + c1;
            let dd = v1 + v2 + c2;
            let ds_dmu1 = 2.0 * m2 * bb / (cc * dd) - 2.0 * m1 * aa * bb / (cc * cc * dd);
            let ds_dsigma1 = -aa * bb / (cc * dd * dd);
            let ds_dsigma12 = 2.0 * aa / (cc * dd);
            co1[i] = sc::<S>(gscale * (ds_dmu1 - 2.0 * m1 * ds_dsigma1 - m2 * ds_dsigma12));
            co2[i] = sc::<S>(gscale * 2.0 * ds_dsigma1);
            co3[i] = sc::<S>(gscale * ds_dsigma12);
        }
        let gch = &mut grad.data_mut()[ch * plane..(ch + 1) * plane];
        if saved.global {
            let inv_n = sc::<S>(1.0 / plane as f64);
            for q in 0..plane {
                gch[q] = inv_n * (co1[0] + co2[0] * pa[q] + co3[0] * pb[q]);
            }
        } else {
            let t1 = blur_valid_transpose(&co1, h, w, &win);
            let t2 = blur_valid_transpose(&co2, h, w, &win);
            let t3 = blur_valid_transpose(&co3, h, w, &win);
            for q in 0..plane {
                gch[q] = t1[q] + t2[q] * pa[q] + t3[q] * pb[q];
            }
        }
    }
    grad
}

pub struct LossSaved<S> {
    ssim_saved: SsimSaved<S>,
    pub mse: f64,
    pub ssim: f64,
}

/// Combined criterion: (1-lambda) * MSE + lambda * (1 - SSIM).
pub fn total_loss<S: Scalar>(render: &Tensor<S>, gt: &Tensor<S>) -> Result<(f64, LossSaved<S>)> {
    let m = mse(render, gt)?;
    let (s, ssim_saved) = ssim(render, gt)?;
    Ok((
        (1.0 - LOSS_LAMBDA) * m + LOSS_LAMBDA * (1.0 - s),
        LossSaved {
            ssim_saved,
            mse: m,
            ssim: s,
        },
    ))
}

pub fn total_loss_backward<S: Scalar>(
    saved: &LossSaved<S>,
    render: &Tensor<S>,
    gt: &Tensor<S>,
) -> Tensor<S> {
    let mut grad = mse_backward(render, gt);
    let w = sc::<S>(1.0 - LOSS_LAMBDA);
    for g in grad.data_mut() {
        *g = *g * w;
    }
    let gs = ssim_backward(&saved.ssim_saved, render, gt, -LOSS_LAMBDA);
    for (g, s) in grad.data_mut().iter_mut().zip(gs.data()) {
        *g = *g + *s;
    }
    grad
}

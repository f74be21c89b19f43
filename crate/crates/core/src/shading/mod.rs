//! View-dependent shading (degree-2 real spherical harmonics over the
//! decoder's 27-channel output) and the physically-based tone mapper
//! (exposure, white balance, sensor response curve, vignetting).

use crate::error::{Error, Result};
use crate::raster::CameraView;
use crate::tensor::ops::{sigmoid, softplus};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Real SH basis constants, degree <= 2 (band 0 first).
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Evaluate the 9 basis functions at a unit direction.
#[inline]
pub fn sh_basis<S: Scalar>(dir: [S; 3]) -> [S; 9] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let c0 = sc::<S>(SH_C0);
    let c1 = sc::<S>(SH_C1);
    [
        c0,
        -c1 * y,
        c1 * z,
        -c1 * x,
        sc::<S>(SH_C2[0]) * x * y,
        sc::<S>(SH_C2[1]) * y * z,
        sc::<S>(SH_C2[2]) * (sc::<S>(3.0) * z * z - S::one()),
        sc::<S>(SH_C2[3]) * x * z,
        sc::<S>(SH_C2[4]) * (x * x - y * y),
    ]
}

/// Jacobian of the basis with respect to the direction.
#[inline]
pub fn sh_basis_grad<S: Scalar>(dir: [S; 3]) -> [[S; 3]; 9] {
    let (x, y, z) = (dir[0], dir[1], dir[2]);
    let zero = S::zero();
    let c1 = sc::<S>(SH_C1);
    let c20 = sc::<S>(SH_C2[0]);
    let c21 = sc::<S>(SH_C2[1]);
    let c22 = sc::<S>(SH_C2[2]);
    let c23 = sc::<S>(SH_C2[3]);
    let c24 = sc::<S>(SH_C2[4]);
    let two = sc::<S>(2.0);
    let six = sc::<S>(6.0);
    [
        [zero, zero, zero],
        [zero, -c1, zero],
        [zero, zero, c1],
        [-c1, zero, zero],
        [c20 * y, c20 * x, zero],
        [zero, c21 * z, c21 * y],
        [zero, zero, six * c22 * z],
        [c23 * z, zero, c23 * x],
        [two * c24 * x, -two * c24 * y, zero],
    ]
}

/// Camera-space and world-space unit view directions through every pixel
/// center.
pub fn pixel_dirs<S: Scalar>(cam: &CameraView<S>) -> (Vec<[S; 3]>, Vec<[S; 3]>) {
    let mut cam_dirs = Vec::with_capacity(cam.width * cam.height);
    let mut world_dirs = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = crate::scene::quat::normalize([
                (sc::<S>(x as f64) - cam.cx) / cam.fx,
                (sc::<S>(y as f64) - cam.cy) / cam.fy,
                S::one(),
            ]);
            cam_dirs.push(d);
            world_dirs.push(crate::scene::quat::mat_tvec(&cam.rot, d));
        }
    }
    (cam_dirs, world_dirs)
}

/// Shade a 27-channel coefficient image (9 per color channel) along
/// per-pixel unit directions; linear in the coefficients.
pub fn sh_shade_image<S: Scalar>(coeffs: &Tensor<S>, dirs: &[[S; 3]]) -> Result<Tensor<S>> {
    let shape = coeffs.shape();
    if shape[0] != 27 {
        return Err(Error::shape("sh_shade channels", 0, 27, shape[0]));
    }
    let (h, w) = (shape[1], shape[2]);
    if dirs.len() != h * w {
        return Err(Error::shape("sh_shade dirs", 0, h * w, dirs.len()));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(vec![3, h, w]);
    let data = coeffs.data();
    for p in 0..plane {
        let basis = sh_basis(dirs[p]);
        for c in 0..3 {
            let mut acc = S::zero();
            for (i, b) in basis.iter().enumerate() {
                acc = acc + data[(c * 9 + i) * plane + p] * *b;
            }
            out.data_mut()[c * plane + p] = acc;
        }
    }
    Ok(out)
}

/// Backward of [`sh_shade_image`]: gradient for the coefficients and, for
/// pose optimization, for the directions.
pub fn sh_shade_backward<S: Scalar>(
    coeffs: &Tensor<S>,
    dirs: &[[S; 3]],
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Vec<[S; 3]>) {
    let shape = coeffs.shape();
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut grad_coeffs = Tensor::zeros(vec![27, h, w]);
    let mut grad_dirs = vec![[S::zero(); 3]; plane];
    let data = coeffs.data();
    for p in 0..plane {
        let basis = sh_basis(dirs[p]);
        let jac = sh_basis_grad(dirs[p]);
        let mut gd = [S::zero(); 3];
        for c in 0..3 {
            let g = grad_out.data()[c * plane + p];
            for i in 0..9 {
                grad_coeffs.data_mut()[(c * 9 + i) * plane + p] = g * basis[i];
                let cf = data[(c * 9 + i) * plane + p];
                for a in 0..3 {
                    gd[a] = gd[a] + g * cf * jac[i][a];
                }
            }
        }
        grad_dirs[p] = gd;
    }
    (grad_coeffs, grad_dirs)
}

/// Pose-tangent (rotation) gradient contributed by the view directions:
/// d_world = R^T exp(-[w]x) d_cam, so at w=0 each pixel adds
/// (R * g_dir) x d_cam.
pub fn dirs_pose_gradient<S: Scalar>(
    cam: &CameraView<S>,
    cam_dirs: &[[S; 3]],
    grad_dirs: &[[S; 3]],
) -> [S; 3] {
    let mut acc = [0.0f64; 3];
    for (dc, gd) in cam_dirs.iter().zip(grad_dirs) {
        let rg = crate::scene::quat::mat_vec(&cam.rot, *gd);
        let c = crate::scene::quat::cross(rg, *dc);
        for a in 0..3 {
            acc[a] += c[a].to_f64_s();
        }
    }
    [sc::<S>(acc[0]), sc::<S>(acc[1]), sc::<S>(acc[2])]
}

pub const RESPONSE_KNOTS: usize = 32;

/// Global tone-map parameters (per-image exposure and white balance are
/// stored with the cameras).
#[derive(Clone, Debug)]
pub struct ToneMapParams<S> {
    /// Pre-softplus response deltas, [3, RESPONSE_KNOTS-1].
    pub response: Tensor<S>,
    /// Radial vignetting coefficients a1, a2, a3.
    pub vignette: Tensor<S>,
}

impl<S: Scalar> ToneMapParams<S> {
    /// Neutral parameters: identity response, no vignetting.
    pub fn neutral() -> Self {
        // softplus(x) = 1  =>  x = ln(e - 1)
        let tau = (std::f64::consts::E - 1.0).ln();
        ToneMapParams {
            response: Tensor::full(vec![3, RESPONSE_KNOTS - 1], sc::<S>(tau)),
            vignette: Tensor::zeros(vec![3]),
        }
    }

    /// Monotone response knots per channel, normalized to [0,1].
    pub fn knots(&self) -> [Vec<S>; 3] {
        let n = RESPONSE_KNOTS - 1;
        std::array::from_fn(|c| {
            let mut k = Vec::with_capacity(RESPONSE_KNOTS);
            k.push(S::zero());
            let mut acc = S::zero();
            for i in 0..n {
                acc = acc + softplus(self.response.data()[c * n + i]);
                k.push(acc);
            }
            let total = k[n];
            for v in k.iter_mut() {
                *v = *v / total;
            }
            k
        })
    }
}

/// Per-image capture parameters.
#[derive(Clone, Copy, Debug)]
pub struct CaptureParams<S> {
    pub exposure_ev: S,
    pub wb_red: S,
    pub wb_blue: S,
}

pub struct ToneSaved<S> {
    pub hdr: Tensor<S>,
    pub knots: [Vec<S>; 3],
    /// Pre-response value u per pixel (after clamping).
    pub u: Vec<S>,
    /// Whether the clamp was inactive (gradient flows).
    pub interior: Vec<bool>,
    pub vignette_r2: Vec<S>,
    pub width: usize,
    pub height: usize,
}

fn wb_gain<S: Scalar>(capture: &CaptureParams<S>, c: usize) -> S {
    match c {
        0 => capture.wb_red,
        2 => capture.wb_blue,
        _ => S::one(),
    }
}

/// Map linear HDR features to display values:
/// out = response_c(clamp(hdr * 2^EV * wb_c * v(r), 0, 1)) with
/// v(r) = 1 + a1 r^2 + a2 r^4 + a3 r^6 about the image center.
pub fn tone_map_image<S: Scalar>(
    hdr: &Tensor<S>,
    params: &ToneMapParams<S>,
    capture: &CaptureParams<S>,
) -> Result<(Tensor<S>, ToneSaved<S>)> {
    let shape = hdr.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("tone_map input", 0, 3, shape[0]));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let knots = params.knots();
    let gain_base = sc::<S>(2.0f64).powf(capture.exposure_ev);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let half_diag2 = (cx * cx + cy * cy).max(1e-12);
    let a = params.vignette.data();
    let mut r2s = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            r2s.push(sc::<S>((dx * dx + dy * dy) / half_diag2));
        }
    }
    let mut out = Tensor::zeros(vec![3, h, w]);
    let mut u_saved = vec![S::zero(); 3 * plane];
    let mut interior = vec![false; 3 * plane];
    let n = RESPONSE_KNOTS - 1;
    for c in 0..3 {
        let gain_wb = gain_base * wb_gain(capture, c);
        let k = &knots[c];
        for p in 0..plane {
            let r2 = r2s[p];
            let v = S::one() + a[0] * r2 + a[1] * r2 * r2 + a[2] * r2 * r2 * r2;
            let hv = hdr.data()[c * plane + p].max(S::zero());
            let u_raw = hv * gain_wb * v;
            let u = u_raw.min(S::one());
            let inside = hdr.data()[c * plane + p] > S::zero() && u_raw < S::one();
            let pos = u * sc::<S>(n as f64);
            let bin = (pos.to_f64_s().floor() as usize).min(n - 1);
            let frac = pos - sc::<S>(bin as f64);
            let val = k[bin] + frac * (k[bin + 1] - k[bin]);
            out.data_mut()[c * plane + p] = val;
            u_saved[c * plane + p] = u;
            interior[c * plane + p] = inside;
        }
    }
    Ok((
        out,
        ToneSaved {
            hdr: hdr.clone(),
            knots,
            u: u_saved,
            interior,
            vignette_r2: r2s,
            width: w,
            height: h,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct ToneGrads<S> {
    pub hdr: Tensor<S>,
    pub response: Tensor<S>,
    pub vignette: Tensor<S>,
    pub exposure_ev: S,
    pub wb_red: S,
    pub wb_blue: S,
}

pub fn tone_map_backward<S: Scalar>(
    saved: &ToneSaved<S>,
    params: &ToneMapParams<S>,
    capture: &CaptureParams<S>,
    grad_out: &Tensor<S>,
) -> ToneGrads<S> {
    let (h, w) = (saved.height, saved.width);
    let plane = h * w;
    let n = RESPONSE_KNOTS - 1;
    let gain_base = sc::<S>(2.0f64).powf(capture.exposure_ev);
    let ln2 = sc::<S>(std::f64::consts::LN_2);
    let a = params.vignette.data();
    let mut grads = ToneGrads {
        hdr: Tensor::zeros(vec![3, h, w]),
        response: Tensor::zeros(vec![3, n]),
        vignette: Tensor::zeros(vec![3]),
        exposure_ev: S::zero(),
        wb_red: S::zero(),
        wb_blue: S::zero(),
    };
    for c in 0..3 {
        let gain_wb = gain_base * wb_gain(capture, c);
        let k = &saved.knots[c];
        // response bin sums for the delta gradients
        let mut bin_g = vec![S::zero(); n];
        let mut bin_gf = vec![S::zero(); n];
        let mut total_g_out = S::zero();
        let mut d_gain_sum = S::zero();
        let mut d_v_r2 = S::zero();
        let mut d_v_r4 = S::zero();
        let mut d_v_r6 = S::zero();
        for p in 0..plane {
            let g = grad_out.data()[c * plane + p];
            if g == S::zero() {
                continue;
            }
            let u = saved.u[c * plane + p];
            let pos = u * sc::<S>(n as f64);
            let bin = (pos.to_f64_s().floor() as usize).min(n - 1);
            let frac = pos - sc::<S>(bin as f64);
            let out_val = k[bin] + frac * (k[bin + 1] - k[bin]);
            bin_g[bin] = bin_g[bin] + g;
            bin_gf[bin] = bin_gf[bin] + g * frac;
            total_g_out = total_g_out + g * out_val;
            if !saved.interior[c * plane + p] {
                continue;
            }
            let slope = (k[bin + 1] - k[bin]) * sc::<S>(n as f64);
            let d_u = g * slope;
            let r2 = saved.vignette_r2[p];
            let v = S::one() + a[0] * r2 + a[1] * r2 * r2 + a[2] * r2 * r2 * r2;
            let hv = saved.hdr.data()[c * plane + p].max(S::zero());
            grads.hdr.data_mut()[c * plane + p] = d_u * gain_wb * v;
            let d_gain_v = d_u * hv; // d/d(gain_wb * v)
            d_gain_sum = d_gain_sum + d_gain_v * v;
            let d_v = d_gain_v * gain_wb;
            d_v_r2 = d_v_r2 + d_v * r2;
            d_v_r4 = d_v_r4 + d_v * r2 * r2;
            d_v_r6 = d_v_r6 + d_v * r2 * r2 * r2;
        }
        // gain_wb = 2^EV * wb_c: d/dEV = gain_wb * ln2, d/dwb = 2^EV
        grads.exposure_ev = grads.exposure_ev + d_gain_sum * gain_wb * ln2;
        match c {
            0 => grads.wb_red = d_gain_sum * gain_base,
            2 => grads.wb_blue = d_gain_sum * gain_base,
            _ => {}
        }
        grads.vignette.data_mut()[0] = grads.vignette.data()[0] + d_v_r2;
        grads.vignette.data_mut()[1] = grads.vignette.data()[1] + d_v_r4;
        grads.vignette.data_mut()[2] = grads.vignette.data()[2] + d_v_r6;
        // response deltas: d out / d delta_j =
        // ([j < bin] + frac*[j == bin] - out) / S_total, then softplus'
        let deltas = &params.response.data()[c * n..(c + 1) * n];
        let total: S = deltas.iter().map(|&t| softplus(t)).sum();
        let mut suffix = S::zero();
        for j in (0..n).rev() {
            // suffix = sum of bin_g over bins > j
            let d_delta = (suffix + bin_gf[j] - total_g_out) / total;
            grads.response.data_mut()[c * n + j] = d_delta * sigmoid(deltas[j]);
            suffix = suffix + bin_g[j];
        }
    }
    grads
}

//! Backpropagation through the rasterizer using the sorted per-pixel lists
//! stored by the forward pass.
//!
//! The chain rule runs through the front-to-back blend (both each fragment's
//! own term and every downstream transmittance), gamma = beta * iota * alpha,
//! the bilinear weights in layer-local coordinates, the layer weight's
//! derivative in screen size (both branches), screen size in world size and
//! depth, and the projection Jacobian into world position and pose tangent.
//! Depth order is treated as constant; fragments beyond the 16 cap receive
//! zero gradient.

use super::*;
use crate::error::{Error, Result};
use crate::parallel::{map_chunks, n_chunks, CHUNK};
use crate::tensor::ops::sigmoid;
use std::cell::UnsafeCell;

struct SyncSlice<'a, T>(&'a [UnsafeCell<T>]);

unsafe impl<T: Send + Sync> Sync for SyncSlice<'_, T> {}

impl<'a, T> SyncSlice<'a, T> {
    fn new(slice: &'a mut [T]) -> Self {
        let ptr = slice.as_mut_ptr() as *const UnsafeCell<T>;
        SyncSlice(unsafe { std::slice::from_raw_parts(ptr, slice.len()) })
    }

    /// SAFETY: disjoint indices across threads.
    #[inline]
    unsafe fn write(&self, idx: usize, value: T) {
        *self.0[idx].get() = value;
    }
}

/// Gradients produced by [`rasterize_backward`], in the stored (log/logit)
/// parameterizations.
#[derive(Clone, Debug)]
pub struct RasterGrads<S> {
    pub positions: Vec<S>,
    pub log_sizes: Vec<S>,
    pub opacity_logits: Vec<S>,
    pub descriptors: Vec<S>,
    /// Axis-angle + translation tangent at the identity increment.
    pub pose_tangent: [S; 6],
    pub env_constant: Option<Vec<S>>,
    pub env_texture: Option<Vec<S>>,
}

pub fn rasterize_backward<S: Scalar>(
    saved: &RasterSavedState<S>,
    scene: &SceneRefs<'_, S>,
    cam: &CameraView<S>,
    env: &EnvironmentMap<S>,
    grad_pyramid: &ImagePyramid<S>,
) -> Result<RasterGrads<S>> {
    let n_points = scene.n_points();
    let nf = scene.n_features;
    if saved.n_points != n_points {
        return Err(Error::SavedStateMismatch(format!(
            "point count {} vs {}",
            saved.n_points, n_points
        )));
    }
    if saved.n_features != nf {
        return Err(Error::SavedStateMismatch(format!(
            "feature count {} vs {}",
            saved.n_features, nf
        )));
    }
    if grad_pyramid.layers.len() != saved.n_layers {
        return Err(Error::SavedStateMismatch(format!(
            "layer count {} vs {}",
            saved.n_layers,
            grad_pyramid.layers.len()
        )));
    }
    for (l, layer) in grad_pyramid.layers.iter().enumerate() {
        let (w, h) = saved.layer_dims[l];
        if layer.w != w || layer.h != h || layer.channels != nf + 1 {
            return Err(Error::SavedStateMismatch(format!("layer {l} shape")));
        }
    }

    let total_pixels: usize = saved.layer_dims.iter().map(|&(w, h)| w * h).sum();
    let n_kept = saved.kept.len();

    // phase 1: per-pixel blend backward; per-fragment records in kept order
    let mut frag_dgamma = vec![S::zero(); n_kept];
    let mut frag_dtau = vec![S::zero(); n_kept * nf];
    let mut frag_pixel = vec![0u32; n_kept];
    let env_dim = match env {
        EnvironmentMap::Constant(v) => v.len(),
        EnvironmentMap::Equirect {
            features,
            height,
            width,
            ..
        } => features * height * width,
    };
    let env_partials: Vec<Vec<f64>> = {
        let dg_sink = SyncSlice::new(&mut frag_dgamma);
        let dt_sink = SyncSlice::new(&mut frag_dtau);
        let fp_sink = SyncSlice::new(&mut frag_pixel);
        let sampler = EnvSampler::new(env, cam);
        map_chunks(n_chunks(total_pixels), |chunk| {
            let lo_pix = chunk * CHUNK;
            let hi_pix = (lo_pix + CHUNK).min(total_pixels);
            let mut env_grad = vec![0.0f64; env_dim];
            let mut bg = vec![S::zero(); nf];
            let mut g_c = vec![S::zero(); nf];
            let mut trans = [S::zero(); FRAGMENT_CAP];
            for pix in lo_pix..hi_pix {
                let (kept_lo, len) = saved.pixel_kept[pix];
                let kept_lo = kept_lo as usize;
                let len = len as usize;
                let l = match saved.layer_pixel_offset.binary_search(&pix) {
                    Ok(i) => i,
                    Err(i) => i - 1,
                };
                let (lw, lh) = saved.layer_dims[l];
                let local = pix - saved.layer_pixel_offset[l];
                let (px, py) = (local % lw, local / lw);
                let layer_grad = &grad_pyramid.layers[l];
                let plane = lw * lh;
                for f in 0..nf {
                    g_c[f] = layer_grad.data[f * plane + py * lw + px];
                }
                let g_a = layer_grad.data[nf * plane + py * lw + px];
                let taps = sampler.features_at(l, px, py, &mut bg);

                let list = &saved.kept[kept_lo..kept_lo + len];
                // forward transmittances
                let mut t = S::one();
                for (m, &(_z, gamma, _p)) in list.iter().enumerate() {
                    trans[m] = t;
                    t = t * (S::one() - gamma);
                }
                let t_end = t;

                // residual-transmittance gradient into the background
                let mut g_bg_dot = S::zero();
                for f in 0..nf {
                    g_bg_dot = g_bg_dot + g_c[f] * bg[f];
                }
                if t_end != S::zero() {
                    match taps {
                        None => {
                            for f in 0..nf {
                                env_grad[f] += (t_end * g_c[f]).to_f64_s();
                            }
                        }
                        Some(taps) => {
                            if let EnvironmentMap::Equirect { height, width, .. } = env {
                                let plane_e = height * width;
                                for f in 0..nf {
                                    let g = (t_end * g_c[f]).to_f64_s();
                                    for &(idx, w) in &taps {
                                        env_grad[f * plane_e + idx] += g * w;
                                    }
                                }
                            }
                        }
                    }
                }

                // suffix recursion: R_m after fragment m
                let mut r = g_bg_dot - g_a;
                for m in (0..len).rev() {
                    let (_z, gamma, point) = list[m];
                    let desc = &scene.descriptors[point as usize * nf..][..nf];
                    let mut g_dot_tau = S::zero();
                    for f in 0..nf {
                        g_dot_tau = g_dot_tau + g_c[f] * desc[f];
                    }
                    let slot = kept_lo + m;
                    let d_gamma = trans[m] * (g_dot_tau - r);
                    let tau_w = trans[m] * gamma;
                    unsafe {
                        dg_sink.write(slot, d_gamma);
                        fp_sink.write(slot, pix as u32);
                        for f in 0..nf {
                            dt_sink.write(slot * nf + f, tau_w * g_c[f]);
                        }
                    }
                    r = gamma * g_dot_tau + (S::one() - gamma) * r;
                }
            }
            env_grad
        })
    };

    // phase 2: invert fragment -> point (deterministic counting sort in
    // kept order)
    let mut point_counts = vec![0u32; n_points + 1];
    for &(_z, _g, p) in &saved.kept {
        point_counts[p as usize + 1] += 1;
    }
    for i in 0..n_points {
        point_counts[i + 1] += point_counts[i];
    }
    let mut point_slots = vec![0u32; n_kept];
    {
        let mut cursor = point_counts.clone();
        for (slot, &(_z, _g, p)) in saved.kept.iter().enumerate() {
            let c = &mut cursor[p as usize];
            point_slots[*c as usize] = slot as u32;
            *c += 1;
        }
    }

    // phase 3: per-point assembly through gamma, screen size, projection
    let mut positions_grad = vec![S::zero(); 3 * n_points];
    let mut log_sizes_grad = vec![S::zero(); n_points];
    let mut logits_grad = vec![S::zero(); n_points];
    let mut descriptors_grad = vec![S::zero(); n_points * nf];
    let focal = cam.focal();
    let pose_partials: Vec<[f64; 6]> = {
        let pos_sink = SyncSlice::new(&mut positions_grad);
        let size_sink = SyncSlice::new(&mut log_sizes_grad);
        let logit_sink = SyncSlice::new(&mut logits_grad);
        let desc_sink = SyncSlice::new(&mut descriptors_grad);
        let frag_dgamma = &frag_dgamma;
        let frag_dtau = &frag_dtau;
        let frag_pixel = &frag_pixel;
        let point_counts = &point_counts;
        let point_slots = &point_slots;
        map_chunks(n_chunks(n_points), |chunk| {
            let lo_p = chunk * CHUNK;
            let hi_p = (lo_p + CHUNK).min(n_points);
            let mut pose = [0.0f64; 6];
            for p in lo_p..hi_p {
                let Some(rec) = &saved.recs[p] else { continue };
                let range = point_counts[p] as usize..point_counts[p + 1] as usize;
                if range.is_empty() {
                    continue;
                }
                let alpha = sigmoid(scene.opacity_logits[p]);
                let d_alpha_d_logit = alpha * (S::one() - alpha);
                let mut d_x = S::zero();
                let mut d_y = S::zero();
                let mut d_s = S::zero();
                let mut d_logit = S::zero();
                let mut d_tau = vec![S::zero(); nf];
                for &slot in &point_slots[range] {
                    let slot = slot as usize;
                    let pix = frag_pixel[slot] as usize;
                    let l = match saved.layer_pixel_offset.binary_search(&pix) {
                        Ok(i) => i,
                        Err(i) => i - 1,
                    };
                    let (lw, _lh) = saved.layer_dims[l];
                    let local = pix - saved.layer_pixel_offset[l];
                    let (px, py) = (local % lw, local / lw);
                    let inv = sc::<S>(1.0 / (1u64 << l) as f64);
                    let xl = rec.x * inv;
                    let yl = rec.y * inv;
                    let dxl = xl - sc::<S>(px as f64);
                    let dyl = yl - sc::<S>(py as f64);
                    let wx = S::one() - dxl.abs();
                    let wy = S::one() - dyl.abs();
                    let beta = wx * wy;
                    let (iota, d_iota_ds) = if l == rec.sel.l_lo {
                        (rec.sel.iota_lo, rec.sel.d_iota_lo_ds)
                    } else {
                        (rec.sel.iota_hi, rec.sel.d_iota_hi_ds)
                    };
                    let g_gamma = frag_dgamma[slot];
                    // gamma = beta * iota * alpha
                    let d_beta = g_gamma * iota * alpha;
                    let d_iota = g_gamma * beta * alpha;
                    d_logit = d_logit + g_gamma * beta * iota * d_alpha_d_logit;
                    d_s = d_s + d_iota * d_iota_ds;
                    // bilinear kinks: zero subgradient exactly at the node
                    let sx = if dxl > S::zero() {
                        -S::one()
                    } else if dxl < S::zero() {
                        S::one()
                    } else {
                        S::zero()
                    };
                    let sy = if dyl > S::zero() {
                        -S::one()
                    } else if dyl < S::zero() {
                        S::one()
                    } else {
                        S::zero()
                    };
                    d_x = d_x + d_beta * sx * wy * inv;
                    d_y = d_y + d_beta * sy * wx * inv;
                    for f in 0..nf {
                        d_tau[f] = d_tau[f] + frag_dtau[slot * nf + f];
                    }
                }
                let pv = rec.view;
                let z = pv[2];
                let s_w = scene.log_sizes[p].exp();
                // s = f * s_w / z
                let d_sw = d_s * focal / z;
                let d_log_size = d_sw * s_w;
                let dz_from_s = -d_s * rec.s / z;
                // x = fx*px/pz + cx, y = fy*py/pz + cy
                let g_p = [
                    d_x * cam.fx / z,
                    d_y * cam.fy / z,
                    -d_x * cam.fx * pv[0] / (z * z) - d_y * cam.fy * pv[1] / (z * z) + dz_from_s,
                ];
                // world position: p = R x + t
                let d_xw = crate::scene::quat::mat_tvec(&cam.rot, g_p);
                unsafe {
                    for a in 0..3 {
                        pos_sink.write(3 * p + a, d_xw[a]);
                    }
                    size_sink.write(p, d_log_size);
                    logit_sink.write(p, d_logit);
                    for f in 0..nf {
                        desc_sink.write(p * nf + f, d_tau[f]);
                    }
                }
                // pose tangent at identity: rotation part is p_view x g_p
                let w = crate::scene::quat::cross(pv, g_p);
                for a in 0..3 {
                    pose[a] += w[a].to_f64_s();
                    pose[3 + a] += g_p[a].to_f64_s();
                }
            }
            pose
        })
    };

    let mut pose_tangent = [S::zero(); 6];
    for partial in &pose_partials {
        for a in 0..6 {
            pose_tangent[a] = pose_tangent[a] + sc::<S>(partial[a]);
        }
    }
    let mut env_total = vec![0.0f64; env_dim];
    for partial in &env_partials {
        for (t, v) in env_total.iter_mut().zip(partial) {
            *t += *v;
        }
    }
    let (env_constant, env_texture) = match env {
        EnvironmentMap::Constant(_) => {
            (Some(env_total.iter().map(|&v| sc::<S>(v)).collect()), None)
        }
        EnvironmentMap::Equirect { .. } => {
            (None, Some(env_total.iter().map(|&v| sc::<S>(v)).collect()))
        }
    };

    Ok(RasterGrads {
        positions: positions_grad,
        log_sizes: log_sizes_grad,
        opacity_logits: logits_grad,
        descriptors: descriptors_grad,
        pose_tangent,
        env_constant,
        env_texture,
    })
}

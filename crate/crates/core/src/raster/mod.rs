//! Differentiable trilinear point splatting into an image pyramid.
//!
//! Points project to continuous screen coordinates and a screen-space size
//! s = f*s_w/z. Each point is written bilinearly into the 2x2 pixel
//! footprints of the two pyramid layers whose nominal sizes 2^L bracket s,
//! with linear layer weights; per pixel the fragments are depth-sorted,
//! capped at 16, and blended front-to-back.

pub mod backward;
pub mod forward;
pub mod reference;

use crate::scene::quat::{mat_vec, quat_to_mat, Mat3};
use crate::scene::{Camera, EnvironmentMap, PointCloud};
use crate::tensor::scalar::{sc, Scalar};
use serde::Serialize;

/// Per-pixel fragment list cap.
pub const FRAGMENT_CAP: usize = 16;

/// Minimum layer-0 contribution of points smaller than one pixel.
pub const SMALL_POINT_EPSILON: f64 = 0.25;

#[derive(Clone, Copy, Debug)]
pub struct RasterConfig {
    /// Pyramid layer count (3..=8).
    pub n_layers: usize,
    /// Near plane in view-space units.
    pub near: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            n_layers: 4,
            near: 0.01,
        }
    }
}

/// Borrowed view of the optimizable scene arrays.
#[derive(Clone, Copy)]
pub struct SceneRefs<'a, S> {
    pub positions: &'a [S],
    pub log_sizes: &'a [S],
    pub opacity_logits: &'a [S],
    pub descriptors: &'a [S],
    pub n_features: usize,
}

impl<'a, S: Scalar> SceneRefs<'a, S> {
    pub fn from_cloud(cloud: &'a PointCloud<S>) -> Self {
        SceneRefs {
            positions: &cloud.positions,
            log_sizes: &cloud.log_sizes,
            opacity_logits: &cloud.opacity_logits,
            descriptors: &cloud.descriptors,
            n_features: cloud.n_features,
        }
    }

    pub fn n_points(&self) -> usize {
        self.positions.len() / 3
    }
}

/// Camera resolved for rendering: effective rotation matrix, translation,
/// intrinsics and the viewport extent.
#[derive(Clone, Debug)]
pub struct CameraView<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: usize,
    pub height: usize,
    pub rot: Mat3<S>,
    pub trans: [S; 3],
}

impl<S: Scalar> CameraView<S> {
    pub fn from_camera(cam: &Camera<S>) -> Self {
        CameraView {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rot: cam.rotation(),
            trans: cam.t,
        }
    }

    /// Camera composed with a pose tangent increment (axis-angle +
    /// translation) applied from the left.
    pub fn from_camera_with_tangent(cam: &Camera<S>, tangent: &[S; 6]) -> Self {
        let dq = crate::scene::quat::quat_from_axis_angle([tangent[0], tangent[1], tangent[2]]);
        let drot = quat_to_mat(dq);
        let base = cam.rotation();
        let mut rot = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = drot[i][0] * base[0][j] + drot[i][1] * base[1][j] + drot[i][2] * base[2][j];
            }
        }
        let rt = mat_vec(&drot, cam.t);
        CameraView {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rot,
            trans: [rt[0] + tangent[3], rt[1] + tangent[4], rt[2] + tangent[5]],
        }
    }

    pub fn focal(&self) -> S {
        (self.fx * self.fy).sqrt()
    }

    pub fn view_transform(&self, x_w: [S; 3]) -> [S; 3] {
        let p = mat_vec(&self.rot, x_w);
        [p[0] + self.trans[0], p[1] + self.trans[1], p[2] + self.trans[2]]
    }
}

/// Extent of pyramid layer `l` for a given viewport.
pub fn layer_dims(width: usize, height: usize, l: usize) -> (usize, usize) {
    let d = 1usize << l;
    (width.div_ceil(d), height.div_ceil(d))
}

/// Point projected to layer-0 continuous pixel coordinates with its
/// screen-space size.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedPoint<S> {
    pub x: S,
    pub y: S,
    /// View-space depth.
    pub z: S,
    /// Screen-space size in layer-0 pixels.
    pub s: S,
    pub index: u32,
}

/// Screen-space point size from focal length, world size, and depth.
#[inline]
pub fn screen_size<S: Scalar>(f: S, s_w: S, z: S) -> S {
    f * s_w / z
}

/// Result of the trilinear layer selection. Single-layer cases are encoded
/// as `l_lo == l_hi` with `iota_hi = 0`.
#[derive(Clone, Copy, Debug)]
pub struct LayerSelect<S> {
    pub l_lo: usize,
    pub l_hi: usize,
    pub iota_lo: S,
    pub iota_hi: S,
    pub d_iota_lo_ds: S,
    pub d_iota_hi_ds: S,
}

impl<S: Scalar> LayerSelect<S> {
    pub fn single(&self) -> bool {
        self.l_lo == self.l_hi
    }
}

/// Choose the two pyramid layers bracketing screen size `s` and their linear
/// weights. Sizes below one pixel land on layer 0 with weight
/// eps + (1-eps)*s; exact powers of two and sizes at or beyond the coarsest
/// layer use a single layer with weight 1.
pub fn select_layers<S: Scalar>(s: S, n_layers: usize) -> LayerSelect<S> {
    debug_assert!(s > S::zero());
    let one = S::one();
    let zero = S::zero();
    if s < one {
        let eps = sc::<S>(SMALL_POINT_EPSILON);
        return LayerSelect {
            l_lo: 0,
            l_hi: 0,
            iota_lo: eps + (one - eps) * s,
            iota_hi: zero,
            d_iota_lo_ds: one - eps,
            d_iota_hi_ds: zero,
        };
    }
    let top = sc::<S>((1u64 << (n_layers - 1)) as f64);
    if s >= top {
        return LayerSelect {
            l_lo: n_layers - 1,
            l_hi: n_layers - 1,
            iota_lo: one,
            iota_hi: zero,
            d_iota_lo_ds: zero,
            d_iota_hi_ds: zero,
        };
    }
    // floor(log2 s) with an exactness fix-up near powers of two
    let mut l = s.to_f64_s().log2().floor() as usize;
    loop {
        let lo = sc::<S>((1u64 << l) as f64);
        if lo > s && l > 0 {
            l -= 1;
            continue;
        }
        if sc::<S>((1u64 << (l + 1)) as f64) <= s {
            l += 1;
            continue;
        }
        break;
    }
    let lo = sc::<S>((1u64 << l) as f64);
    if s == lo {
        return LayerSelect {
            l_lo: l,
            l_hi: l,
            iota_lo: one,
            iota_hi: zero,
            d_iota_lo_ds: zero,
            d_iota_hi_ds: zero,
        };
    }
    let hi = sc::<S>((1u64 << (l + 1)) as f64);
    let denom = hi - lo;
    LayerSelect {
        l_lo: l,
        l_hi: l + 1,
        iota_lo: one - (s - lo) / denom,
        iota_hi: one - (hi - s) / denom,
        d_iota_lo_ds: -one / denom,
        d_iota_hi_ds: one / denom,
    }
}

/// Per-point record kept by the forward pass for backpropagation.
#[derive(Clone, Copy, Debug)]
pub struct ProjRec<S> {
    /// View-space position.
    pub view: [S; 3],
    pub x: S,
    pub y: S,
    pub s: S,
    pub sel: LayerSelect<S>,
}

/// Project one point; `None` means culled (behind the near plane, or the 2x2
/// footprint at the coarser selected layer lies fully outside the image).
pub fn project_point<S: Scalar>(
    cam: &CameraView<S>,
    x_w: [S; 3],
    s_w: S,
    cfg: &RasterConfig,
) -> Option<(ProjectedPoint<S>, ProjRec<S>)> {
    let p = cam.view_transform(x_w);
    let near = sc::<S>(cfg.near);
    if p[2] <= near {
        return None;
    }
    let x = cam.fx * p[0] / p[2] + cam.cx;
    let y = cam.fy * p[1] / p[2] + cam.cy;
    let s = screen_size(cam.focal(), s_w, p[2]);
    let sel = select_layers(s, cfg.n_layers);
    // footprint test at the coarser selected layer
    let l = sel.l_hi.max(sel.l_lo);
    let (lw, lh) = layer_dims(cam.width, cam.height, l);
    let inv = sc::<S>(1.0 / (1u64 << l) as f64);
    let xl = x * inv;
    let yl = y * inv;
    let x0 = xl.to_f64_s().floor();
    let y0 = yl.to_f64_s().floor();
    if x0 + 1.0 < 0.0 || x0 > (lw - 1) as f64 || y0 + 1.0 < 0.0 || y0 > (lh - 1) as f64 {
        return None;
    }
    Some((
        ProjectedPoint {
            x,
            y,
            z: p[2],
            s,
            index: 0,
        },
        ProjRec {
            view: p,
            x,
            y,
            s,
            sel,
        },
    ))
}

/// One fragment: a point's contribution to one pixel of one layer.
#[derive(Clone, Copy, Debug)]
pub struct Fragment<S> {
    pub depth: S,
    /// Final opacity gamma = beta * iota * alpha.
    pub weight: S,
    pub point: u32,
    pub layer: u8,
    pub px: u32,
    pub py: u32,
}

/// Visit the in-bounds, nonzero-weight fragments of a projected point.
/// The callback receives (layer, px, py, beta, iota, gamma).
#[inline]
pub fn visit_fragments<S: Scalar>(
    rec: &ProjRec<S>,
    alpha: S,
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, usize, S, S, S),
) {
    let layers: [(usize, S); 2] = [
        (rec.sel.l_lo, rec.sel.iota_lo),
        (rec.sel.l_hi, rec.sel.iota_hi),
    ];
    let n = if rec.sel.single() { 1 } else { 2 };
    for &(l, iota) in layers.iter().take(n) {
        if iota == S::zero() {
            continue;
        }
        let (lw, lh) = layer_dims(width, height, l);
        let inv = sc::<S>(1.0 / (1u64 << l) as f64);
        let xl = rec.x * inv;
        let yl = rec.y * inv;
        let x0 = xl.to_f64_s().floor() as i64;
        let y0 = yl.to_f64_s().floor() as i64;
        for yi in [y0, y0 + 1] {
            if yi < 0 || yi >= lh as i64 {
                continue;
            }
            let wy = S::one() - (yl - sc::<S>(yi as f64)).abs();
            for xi in [x0, x0 + 1] {
                if xi < 0 || xi >= lw as i64 {
                    continue;
                }
                let wx = S::one() - (xl - sc::<S>(xi as f64)).abs();
                let beta = wx * wy;
                let gamma = beta * iota * alpha;
                if gamma == S::zero() {
                    continue;
                }
                visit(l, xi as usize, yi as usize, beta, iota, gamma);
            }
        }
    }
}

/// Expand a point into its explicit fragments (at most 8).
pub fn splat_point<S: Scalar>(
    pp: &ProjectedPoint<S>,
    rec: &ProjRec<S>,
    alpha: S,
    width: usize,
    height: usize,
) -> Vec<Fragment<S>> {
    let mut out = Vec::with_capacity(8);
    visit_fragments(rec, alpha, width, height, |l, px, py, _beta, _iota, gamma| {
        out.push(Fragment {
            depth: rec.view[2],
            weight: gamma,
            point: pp.index,
            layer: l as u8,
            px: px as u32,
            py: py as u32,
        });
    });
    debug_assert!(out.len() <= 8);
    out
}

/// Front-to-back alpha blending of a depth-sorted fragment list.
///
/// `out` receives F blended feature channels followed by the accumulated
/// opacity; the background is composited under the fragments with the
/// residual transmittance.
pub fn blend_pixel<S: Scalar>(
    frags: &[(S, S, u32)],
    descriptors: &[S],
    n_features: usize,
    background: &[S],
    out: &mut [S],
) {
    debug_assert!(frags.len() <= FRAGMENT_CAP);
    debug_assert_eq!(out.len(), n_features + 1);
    let one = S::one();
    let mut transmittance = one;
    for f in out.iter_mut() {
        *f = S::zero();
    }
    for &(_z, gamma, point) in frags {
        let w = transmittance * gamma;
        let desc = &descriptors[point as usize * n_features..][..n_features];
        for (o, d) in out[..n_features].iter_mut().zip(desc) {
            *o = *o + w * *d;
        }
        transmittance = transmittance * (one - gamma);
    }
    for (o, b) in out[..n_features].iter_mut().zip(background) {
        *o = *o + transmittance * *b;
    }
    out[n_features] = one - transmittance;
}

/// Insert a fragment into a bounded, (depth, index)-sorted buffer keeping the
/// 16 smallest; semantically identical to full sort followed by truncation.
#[inline]
pub fn bounded_insert<S: Scalar>(list: &mut Vec<(S, S, u32)>, frag: (S, S, u32)) {
    let key = (frag.0, frag.2);
    if list.len() == FRAGMENT_CAP {
        let last = list[FRAGMENT_CAP - 1];
        if (last.0, last.2) <= key {
            return;
        }
        list.pop();
    }
    let pos = list.partition_point(|f| (f.0, f.2) <= key);
    list.insert(pos, frag);
}

/// Environment/background lookup per layer pixel.
pub struct EnvSampler<'a, S> {
    env: &'a EnvironmentMap<S>,
    cam: &'a CameraView<S>,
}

/// Bilinear footprint of an equirectangular lookup: four (texel, weight)
/// pairs.
pub type EnvTap = [(usize, f64); 4];

impl<'a, S: Scalar> EnvSampler<'a, S> {
    pub fn new(env: &'a EnvironmentMap<S>, cam: &'a CameraView<S>) -> Self {
        EnvSampler { env, cam }
    }

    pub fn n_features(&self) -> usize {
        match self.env {
            EnvironmentMap::Constant(v) => v.len(),
            EnvironmentMap::Equirect { features, .. } => *features,
        }
    }

    /// Background features for pixel (px,py) of layer `l`. Returns the taps
    /// used so the backward pass can scatter gradients.
    pub fn features_at(&self, l: usize, px: usize, py: usize, out: &mut [S]) -> Option<EnvTap> {
        match self.env {
            EnvironmentMap::Constant(v) => {
                out.copy_from_slice(v);
                None
            }
            EnvironmentMap::Equirect {
                data,
                features,
                height,
                width,
            } => {
                let scale = (1u64 << l) as f64;
                let x0 = px as f64 * scale;
                let y0 = py as f64 * scale;
                let dir_cam = crate::scene::quat::normalize([
                    (x0 - self.cam.cx.to_f64_s()) / self.cam.fx.to_f64_s(),
                    (y0 - self.cam.cy.to_f64_s()) / self.cam.fy.to_f64_s(),
                    1.0,
                ]);
                // world direction: transpose of world->view rotation
                let r = &self.cam.rot;
                let d = [
                    r[0][0].to_f64_s() * dir_cam[0]
                        + r[1][0].to_f64_s() * dir_cam[1]
                        + r[2][0].to_f64_s() * dir_cam[2],
                    r[0][1].to_f64_s() * dir_cam[0]
                        + r[1][1].to_f64_s() * dir_cam[1]
                        + r[2][1].to_f64_s() * dir_cam[2],
                    r[0][2].to_f64_s() * dir_cam[0]
                        + r[1][2].to_f64_s() * dir_cam[1]
                        + r[2][2].to_f64_s() * dir_cam[2],
                ];
                let phi = d[0].atan2(d[2]);
                let theta = d[1].clamp(-1.0, 1.0).acos();
                let u = (phi / std::f64::consts::TAU + 0.5) * *width as f64 - 0.5;
                let v = theta / std::f64::consts::PI * *height as f64 - 0.5;
                let u0 = u.floor();
                let v0 = v.floor();
                let fu = u - u0;
                let fv = v - v0;
                let wrap = |i: i64| -> usize { i.rem_euclid(*width as i64) as usize };
                let clampv = |i: i64| -> usize { i.clamp(0, *height as i64 - 1) as usize };
                let (u0i, u1i) = (wrap(u0 as i64), wrap(u0 as i64 + 1));
                let (v0i, v1i) = (clampv(v0 as i64), clampv(v0 as i64 + 1));
                let taps: EnvTap = [
                    (v0i * width + u0i, (1.0 - fu) * (1.0 - fv)),
                    (v0i * width + u1i, fu * (1.0 - fv)),
                    (v1i * width + u0i, (1.0 - fu) * fv),
                    (v1i * width + u1i, fu * fv),
                ];
                let plane = height * width;
                for f in 0..*features {
                    let mut acc = S::zero();
                    for &(idx, w) in &taps {
                        acc = acc + data[f * plane + idx] * sc::<S>(w);
                    }
                    out[f] = acc;
                }
                Some(taps)
            }
        }
    }
}

/// One resolution layer: F feature channels plus the accumulated-opacity
/// channel, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerImage<S> {
    pub w: usize,
    pub h: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> LayerImage<S> {
    pub fn zeros(w: usize, h: usize, channels: usize) -> Self {
        LayerImage {
            w,
            h,
            channels,
            data: vec![S::zero(); w * h * channels],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// The rasterizer output: n layers of feature + accumulated-opacity images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid<S> {
    pub layers: Vec<LayerImage<S>>,
}

/// Wall-clock cost of the three rasterizer stages (milliseconds).
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StageTimings {
    pub count_alloc_ms: f64,
    pub splat_ms: f64,
    pub sort_blend_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FragmentStats {
    pub total_fragments: usize,
    pub pixel_lists: usize,
    pub mean_list_len: f64,
    pub truncated_lists: usize,
    pub max_fragments_per_point: usize,
}

/// Everything the backward pass needs from a forward call.
pub struct RasterSavedState<S> {
    pub recs: Vec<Option<ProjRec<S>>>,
    /// Flat sorted kept fragments as (depth, gamma, point).
    pub kept: Vec<(S, S, u32)>,
    /// Per global pixel: (offset into `kept`, kept length).
    pub pixel_kept: Vec<(u32, u8)>,
    /// Start of each layer in the global pixel index space.
    pub layer_pixel_offset: Vec<usize>,
    pub layer_dims: Vec<(usize, usize)>,
    pub n_points: usize,
    pub n_features: usize,
    pub width: usize,
    pub height: usize,
    pub n_layers: usize,
    pub timings: StageTimings,
    pub stats: FragmentStats,
}

//! The full render pipeline over a parameter store: rasterize into the
//! pyramid, decode, optionally shade with spherical harmonics, tone map.
//! Every stage has a backward; gradients accumulate into the store.

use crate::decoder::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::raster::backward::rasterize_backward;
use crate::raster::forward::rasterize_forward;
use crate::raster::{
    CameraView, ImagePyramid, LayerImage, RasterConfig, RasterSavedState, SceneRefs, StageTimings,
};
use crate::scene::{Camera, EnvironmentMap, PointCloud};
use crate::shading::{
    dirs_pose_gradient, pixel_dirs, sh_shade_backward, sh_shade_image, tone_map_backward,
    tone_map_image, CaptureParams, ToneMapParams, ToneSaved, RESPONSE_KNOTS,
};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::store::ParameterStore;
use crate::tensor::Tensor;
use rand::SeedableRng;
use serde::Serialize;

pub const P_POSITIONS: &str = "points.positions";
pub const P_LOG_SIZES: &str = "points.log_sizes";
pub const P_OPACITY: &str = "points.opacity_logits";
pub const P_DESCRIPTORS: &str = "points.descriptors";
pub const P_ENV_CONSTANT: &str = "env.constant";
pub const P_ENV_TEXTURE: &str = "env.texture";
pub const P_TM_RESPONSE: &str = "tonemap.response";
pub const P_TM_VIGNETTE: &str = "tonemap.vignette";
pub const P_EXPOSURE: &str = "camera.exposure";
pub const P_WHITE_BALANCE: &str = "camera.wb";
pub const P_POSE_TANGENT: &str = "camera.pose_tangent";
/// Optional zero offset added to the decoder output; lets the
/// finite-difference suite probe gradients at the shading input.
pub const P_DEBUG_SH_OFFSET: &str = "debug.sh_offset";

#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub n_layers: usize,
    pub n_features: usize,
    pub sh: bool,
    pub env_latlong: bool,
    pub env_height: usize,
    pub near: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_layers: 4,
            n_features: 4,
            sh: false,
            env_latlong: false,
            env_height: 16,
            near: 0.01,
        }
    }
}

impl PipelineConfig {
    pub fn raster(&self) -> RasterConfig {
        RasterConfig {
            n_layers: self.n_layers,
            near: self.near,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.n_layers,
            raster_channels: self.n_features + 1,
            out_channels: if self.sh { 27 } else { 3 },
        }
    }
}

/// Per-group learning rates. Position steps scale with the scene extent.
#[derive(Clone, Copy, Debug)]
pub struct LearningRates {
    pub network: f64,
    pub features: f64,
    pub opacity: f64,
    pub size: f64,
    pub position: f64,
    pub pose: f64,
    pub tonemap: f64,
    pub environment: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            network: 1e-3,
            features: 5e-3,
            opacity: 1e-3,
            size: 1e-3,
            position: 1e-4,
            pose: 1e-5,
            tonemap: 1e-3,
            environment: 1e-3,
        }
    }
}

/// A trainable model: the parameter store plus everything that is not
/// optimized through it (base camera poses, configuration).
pub struct Model<S: Scalar> {
    pub store: ParameterStore<S>,
    pub cfg: PipelineConfig,
    pub cameras: Vec<Camera<S>>,
    pub epoch: u32,
}

impl<S: Scalar> Model<S> {
    /// Register the whole scene in a fresh store.
    pub fn build(
        cloud: &PointCloud<S>,
        cameras: Vec<Camera<S>>,
        cfg: PipelineConfig,
        lr: &LearningRates,
        seed: u64,
    ) -> Result<Model<S>> {
        if cloud.n_features != cfg.n_features {
            return Err(Error::shape(
                "model features",
                0,
                cfg.n_features,
                cloud.n_features,
            ));
        }
        let n = cloud.n_points();
        let extent = cloud.extent().to_f64_s().max(1e-9);
        let mut store = ParameterStore::new();
        store.register(
            P_POSITIONS,
            Tensor::new(vec![n, 3], cloud.positions.clone())?,
            lr.position * extent,
        );
        store.register(
            P_LOG_SIZES,
            Tensor::new(vec![n], cloud.log_sizes.clone())?,
            lr.size,
        );
        store.register(
            P_OPACITY,
            Tensor::new(vec![n], cloud.opacity_logits.clone())?,
            lr.opacity,
        );
        store.register(
            P_DESCRIPTORS,
            Tensor::new(vec![n, cfg.n_features], cloud.descriptors.clone())?,
            lr.features,
        );
        if cfg.env_latlong {
            store.register(
                P_ENV_TEXTURE,
                Tensor::zeros(vec![cfg.n_features, cfg.env_height, 2 * cfg.env_height]),
                lr.environment,
            );
        } else {
            store.register(
                P_ENV_CONSTANT,
                Tensor::zeros(vec![cfg.n_features]),
                lr.environment,
            );
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        decoder::register_params(&mut store, &cfg.decoder(), lr.network, &mut rng);
        let tm = ToneMapParams::<S>::neutral();
        store.register(P_TM_RESPONSE, tm.response, lr.tonemap);
        store.register(P_TM_VIGNETTE, tm.vignette, lr.tonemap);
        let nf = cameras.len();
        store.register(
            P_EXPOSURE,
            Tensor::new(vec![nf], cameras.iter().map(|c| c.exposure_ev).collect())?,
            lr.tonemap,
        );
        store.register(
            P_WHITE_BALANCE,
            Tensor::new(
                vec![nf, 2],
                cameras
                    .iter()
                    .flat_map(|c| [c.wb_red, c.wb_blue])
                    .collect(),
            )?,
            lr.tonemap,
        );
        store.register(P_POSE_TANGENT, Tensor::zeros(vec![nf, 6]), lr.pose);
        Ok(Model {
            store,
            cfg,
            cameras,
            epoch: 0,
        })
    }

    pub fn n_points(&self) -> usize {
        self.store.value(P_POSITIONS).extent(0)
    }

    /// Compose each frame's pose tangent onto its base camera and zero the
    /// tangents, so gradients are always taken at the identity increment.
    pub fn apply_pose_tangents(&mut self) {
        let tangents = self.store.value(P_POSE_TANGENT).data().to_vec();
        for (i, cam) in self.cameras.iter_mut().enumerate() {
            let t: [S; 6] = std::array::from_fn(|a| tangents[6 * i + a]);
            if t.iter().any(|v| *v != S::zero()) {
                cam.apply_tangent(&t);
            }
        }
        self.store.value_mut(P_POSE_TANGENT).fill(S::zero());
    }

    /// Point cloud snapshot reassembled from the store.
    pub fn cloud(&self) -> PointCloud<S> {
        PointCloud {
            positions: self.store.value(P_POSITIONS).data().to_vec(),
            log_sizes: self.store.value(P_LOG_SIZES).data().to_vec(),
            opacity_logits: self.store.value(P_OPACITY).data().to_vec(),
            descriptors: self.store.value(P_DESCRIPTORS).data().to_vec(),
            n_features: self.cfg.n_features,
        }
    }
}

pub fn scene_refs<'a, S: Scalar>(
    store: &'a ParameterStore<S>,
    cfg: &PipelineConfig,
) -> SceneRefs<'a, S> {
    SceneRefs {
        positions: store.slice(P_POSITIONS),
        log_sizes: store.slice(P_LOG_SIZES),
        opacity_logits: store.slice(P_OPACITY),
        descriptors: store.slice(P_DESCRIPTORS),
        n_features: cfg.n_features,
    }
}

pub fn environment<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &PipelineConfig,
) -> EnvironmentMap<S> {
    if cfg.env_latlong {
        EnvironmentMap::Equirect {
            data: store.slice(P_ENV_TEXTURE).to_vec(),
            features: cfg.n_features,
            height: cfg.env_height,
            width: 2 * cfg.env_height,
        }
    } else {
        EnvironmentMap::Constant(store.slice(P_ENV_CONSTANT).to_vec())
    }
}

pub fn tone_params<S: Scalar>(store: &ParameterStore<S>) -> ToneMapParams<S> {
    ToneMapParams {
        response: store.value(P_TM_RESPONSE).clone(),
        vignette: store.value(P_TM_VIGNETTE).clone(),
    }
}

pub fn capture_params<S: Scalar>(store: &ParameterStore<S>, frame: usize) -> CaptureParams<S> {
    CaptureParams {
        exposure_ev: store.slice(P_EXPOSURE)[frame],
        wb_red: store.slice(P_WHITE_BALANCE)[2 * frame],
        wb_blue: store.slice(P_WHITE_BALANCE)[2 * frame + 1],
    }
}

pub fn pose_tangent<S: Scalar>(store: &ParameterStore<S>, frame: usize) -> [S; 6] {
    let t = store.slice(P_POSE_TANGENT);
    std::array::from_fn(|a| t[6 * frame + a])
}

/// Everything kept from a forward render for the backward pass.
pub struct RenderSaved<S: Scalar> {
    pub raster: RasterSavedState<S>,
    pub decode: decoder::DecodeSaved<S>,
    pub tone: ToneSaved<S>,
    /// Decoder output after the optional debug offset (the shading input).
    pub shading_input: Tensor<S>,
    pub cam_dirs: Option<Vec<[S; 3]>>,
    pub world_dirs: Option<Vec<[S; 3]>>,
    pub cam_view: CameraView<S>,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FrameTimings {
    pub raster: StageTimings,
    pub decode_ms: f64,
    pub shade_tonemap_ms: f64,
}

impl FrameTimings {
    pub fn raster_total_ms(&self) -> f64 {
        self.raster.count_alloc_ms + self.raster.splat_ms + self.raster.sort_blend_ms
    }

    pub fn total_ms(&self) -> f64 {
        self.raster_total_ms() + self.decode_ms + self.shade_tonemap_ms
    }
}

/// Render one frame through the full pipeline. `render_cam` may be a scaled
/// or cropped variant of the frame's base camera; `frame` selects the pose
/// tangent and capture parameters.
pub fn render_frame<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &PipelineConfig,
    render_cam: &Camera<S>,
    frame: usize,
) -> Result<(Tensor<S>, RenderSaved<S>, FrameTimings)> {
    let tangent = pose_tangent(store, frame);
    let cam_view = CameraView::from_camera_with_tangent(render_cam, &tangent);
    let env = environment(store, cfg);
    let refs = scene_refs(store, cfg);
    let (pyramid, raster_saved) = rasterize_forward(&refs, &cam_view, &env, &cfg.raster())?;

    let t0 = std::time::Instant::now();
    let (mut decoded, decode_saved) = decoder::decode_pyramid(store, &cfg.decoder(), &pyramid)?;
    if store.contains(P_DEBUG_SH_OFFSET) {
        let off = store.value(P_DEBUG_SH_OFFSET);
        if off.shape() == decoded.shape() {
            for (d, o) in decoded.data_mut().iter_mut().zip(off.data()) {
                *d = *d + *o;
            }
        }
    }
    let decode_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = std::time::Instant::now();
    let (hdr, cam_dirs, world_dirs) = if cfg.sh {
        let (cam_dirs, world_dirs) = pixel_dirs(&cam_view);
        let rgb = sh_shade_image(&decoded, &world_dirs)?;
        (rgb, Some(cam_dirs), Some(world_dirs))
    } else {
        (decoded.clone(), None, None)
    };
    let params = tone_params(store);
    let capture = capture_params(store, frame);
    let (ldr, tone_saved) = tone_map_image(&hdr, &params, &capture)?;
    let shade_tonemap_ms = t1.elapsed().as_secs_f64() * 1e3;

    let timings = FrameTimings {
        raster: raster_saved.timings,
        decode_ms,
        shade_tonemap_ms,
    };
    Ok((
        ldr,
        RenderSaved {
            raster: raster_saved,
            decode: decode_saved,
            tone: tone_saved,
            shading_input: decoded,
            cam_dirs,
            world_dirs,
            cam_view,
            frame,
        },
        timings,
    ))
}

/// Push a gradient on the rendered image back to every parameter,
/// accumulating into the store's gradient buffers.
pub fn backward_frame<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &PipelineConfig,
    saved: &RenderSaved<S>,
    grad_ldr: &Tensor<S>,
) -> Result<()> {
    let frame = saved.frame;
    let mut named: Vec<(String, Vec<S>)> = Vec::new();
    {
        let params = tone_params(store);
        let capture = capture_params(store, frame);
        let tg = tone_map_backward(&saved.tone, &params, &capture, grad_ldr);
        named.push((P_TM_RESPONSE.to_string(), tg.response.into_data()));
        named.push((P_TM_VIGNETTE.to_string(), tg.vignette.into_data()));
        let n_frames = store.value(P_EXPOSURE).len();
        let mut ev = vec![S::zero(); n_frames];
        ev[frame] = tg.exposure_ev;
        named.push((P_EXPOSURE.to_string(), ev));
        let mut wb = vec![S::zero(); 2 * n_frames];
        wb[2 * frame] = tg.wb_red;
        wb[2 * frame + 1] = tg.wb_blue;
        named.push((P_WHITE_BALANCE.to_string(), wb));

        let grad_shading_input = if cfg.sh {
            let world_dirs = saved.world_dirs.as_ref().expect("sh dirs saved");
            let cam_dirs = saved.cam_dirs.as_ref().expect("sh dirs saved");
            let (grad_coeffs, grad_dirs) =
                sh_shade_backward(&saved.shading_input, world_dirs, &tg.hdr);
            let rot_grad = dirs_pose_gradient(&saved.cam_view, cam_dirs, &grad_dirs);
            let mut pose = vec![S::zero(); 6 * store.value(P_POSE_TANGENT).extent(0)];
            for a in 0..3 {
                pose[6 * frame + a] = rot_grad[a];
            }
            named.push((P_POSE_TANGENT.to_string(), pose));
            grad_coeffs
        } else {
            tg.hdr
        };
        if store.contains(P_DEBUG_SH_OFFSET) {
            named.push((
                P_DEBUG_SH_OFFSET.to_string(),
                grad_shading_input.data().to_vec(),
            ));
        }

        let (weight_grads, pyramid_grads) =
            decoder::decode_backward(store, &cfg.decoder(), &saved.decode, &grad_shading_input)?;
        for (name, g) in weight_grads {
            named.push((name, g.into_data()));
        }
        let grad_pyr = ImagePyramid {
            layers: pyramid_grads
                .into_iter()
                .map(|t| {
                    let (c, h, w) = (t.extent(0), t.extent(1), t.extent(2));
                    LayerImage {
                        w,
                        h,
                        channels: c,
                        data: t.into_data(),
                    }
                })
                .collect(),
        };
        let env = environment(store, cfg);
        let refs = scene_refs(store, cfg);
        let rg = rasterize_backward(&saved.raster, &refs, &saved.cam_view, &env, &grad_pyr)?;
        named.push((P_POSITIONS.to_string(), rg.positions));
        named.push((P_LOG_SIZES.to_string(), rg.log_sizes));
        named.push((P_OPACITY.to_string(), rg.opacity_logits));
        named.push((P_DESCRIPTORS.to_string(), rg.descriptors));
        let mut pose = vec![S::zero(); 6 * store.value(P_POSE_TANGENT).extent(0)];
        for a in 0..6 {
            pose[6 * frame + a] = rg.pose_tangent[a];
        }
        named.push((P_POSE_TANGENT.to_string(), pose));
        if let Some(eg) = rg.env_constant {
            named.push((P_ENV_CONSTANT.to_string(), eg));
        }
        if let Some(eg) = rg.env_texture {
            named.push((P_ENV_TEXTURE.to_string(), eg));
        }
    }
    for (name, g) in named {
        store.add_grad(&name, &g);
    }
    Ok(())
}

/// Forward + loss + backward for one frame against a ground-truth image.
/// Returns (loss, mse, ssim, timings).
pub fn train_step_gradients<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &PipelineConfig,
    render_cam: &Camera<S>,
    frame: usize,
    gt: &Tensor<S>,
) -> Result<(f64, f64, f64, FrameTimings)> {
    let (ldr, saved, timings) = render_frame(store, cfg, render_cam, frame)?;
    let (loss, loss_saved) = crate::train::loss::total_loss(&ldr, gt)?;
    let grad_ldr = crate::train::loss::total_loss_backward(&loss_saved, &ldr, gt);
    backward_frame(store, cfg, &saved, &grad_ldr)?;
    Ok((loss, loss_saved.mse, loss_saved.ssim, timings))
}

/// Scalar loss of one frame as a pure function of the store (for the
/// finite-difference suite).
pub fn frame_loss_value<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &PipelineConfig,
    render_cam: &Camera<S>,
    frame: usize,
    gt: &Tensor<S>,
) -> S {
    let (ldr, _, _) = render_frame(store, cfg, render_cam, frame).expect("render");
    let (loss, _) = crate::train::loss::total_loss(&ldr, gt).expect("loss");
    sc::<S>(loss)
}

pub fn tone_map_constant<S: Scalar>() -> S {
    sc::<S>((RESPONSE_KNOTS - 1) as f64)
}

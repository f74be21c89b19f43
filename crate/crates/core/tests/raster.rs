//! Rasterizer integration tests: oracle equivalence against the naive
//! reference and finite-difference verification of the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trips_core::raster::backward::rasterize_backward;
use trips_core::raster::forward::rasterize_forward;
use trips_core::raster::reference::rasterize_reference;
use trips_core::raster::{
    project_point, CameraView, ImagePyramid, LayerImage, RasterConfig, SceneRefs,
};
use trips_core::scene::EnvironmentMap;

struct TestScene {
    positions: Vec<f64>,
    log_sizes: Vec<f64>,
    opacity_logits: Vec<f64>,
    descriptors: Vec<f64>,
    n_features: usize,
}

impl TestScene {
    fn refs(&self) -> SceneRefs<'_, f64> {
        SceneRefs {
            positions: &self.positions,
            log_sizes: &self.log_sizes,
            opacity_logits: &self.opacity_logits,
            descriptors: &self.descriptors,
            n_features: self.n_features,
        }
    }
}

fn camera(width: usize, height: usize) -> CameraView<f64> {
    CameraView {
        fx: 60.0,
        fy: 64.0,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        trans: [0.0, 0.0, 0.0],
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, nf: usize) -> TestScene {
    TestScene {
        positions: (0..n)
            .flat_map(|_| {
                [
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(0.4..4.0),
                ]
            })
            .collect(),
        log_sizes: (0..n).map(|_| rng.gen_range(-5.0..0.2)).collect(),
        opacity_logits: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        descriptors: (0..n * nf).map(|_| rng.gen_range(0.0..1.0)).collect(),
        n_features: nf,
    }
}

/// Keep only points whose layer-local coordinates and size sit away from the
/// bilinear/layer kinks, so finite differences stay on one smooth piece.
fn reject_kinks(scene: &mut TestScene, cam: &CameraView<f64>, cfg: &RasterConfig, margin: f64) {
    let mut keep = Vec::new();
    for i in 0..scene.positions.len() / 3 {
        let x_w = [
            scene.positions[3 * i],
            scene.positions[3 * i + 1],
            scene.positions[3 * i + 2],
        ];
        let s_w = scene.log_sizes[i].exp();
        let Some((_, rec)) = project_point(cam, x_w, s_w, cfg) else {
            continue; // culled points are fine: zero gradient on both sides
        };
        let mut ok = true;
        for l in [rec.sel.l_lo, rec.sel.l_hi] {
            let inv = 1.0 / (1u64 << l) as f64;
            for c in [rec.x * inv, rec.y * inv] {
                let frac = c - c.floor();
                if frac < margin || frac > 1.0 - margin {
                    ok = false;
                }
            }
        }
        let log2s = rec.s.log2();
        if (log2s - log2s.round()).abs() < margin {
            ok = false;
        }
        if (rec.s - 1.0).abs() < margin {
            ok = false;
        }
        if ok {
            keep.push(i);
        }
    }
    let nf = scene.n_features;
    let mut out = TestScene {
        positions: Vec::new(),
        log_sizes: Vec::new(),
        opacity_logits: Vec::new(),
        descriptors: Vec::new(),
        n_features: nf,
    };
    for &i in &keep {
        out.positions
            .extend_from_slice(&scene.positions[3 * i..3 * i + 3]);
        out.log_sizes.push(scene.log_sizes[i]);
        out.opacity_logits.push(scene.opacity_logits[i]);
        out.descriptors
            .extend_from_slice(&scene.descriptors[nf * i..nf * (i + 1)]);
    }
    *scene = out;
}

#[test]
fn forward_matches_reference_on_random_scenes() {
    let cfg = RasterConfig::default();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(100..1200);
        let scene = random_scene(&mut rng, n, 3);
        let cam = camera(48, 40);
        let env = EnvironmentMap::Constant(vec![0.2, 0.4, 0.1]);
        let (fast, _) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
        let naive = rasterize_reference(&scene.refs(), &cam, &env, &cfg).unwrap();
        assert_eq!(fast, naive, "seed {seed}: pyramids differ");
    }
}

#[test]
fn forward_matches_reference_with_equirect_environment() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scene = random_scene(&mut rng, 300, 2);
    let cam = camera(32, 32);
    let mut env = EnvironmentMap::equirect(2, 8);
    if let EnvironmentMap::Equirect { data, .. } = &mut env {
        for v in data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    let cfg = RasterConfig::default();
    let (fast, _) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
    let naive = rasterize_reference(&scene.refs(), &cam, &env, &cfg).unwrap();
    assert_eq!(fast, naive);
}

#[test]
fn zero_pyramid_gradient_gives_zero_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scene = random_scene(&mut rng, 50, 3);
    let cam = camera(32, 32);
    let env = EnvironmentMap::Constant(vec![0.0; 3]);
    let cfg = RasterConfig::default();
    let (pyr, saved) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
    let zero_grad = ImagePyramid {
        layers: pyr
            .layers
            .iter()
            .map(|l| LayerImage::zeros(l.w, l.h, l.channels))
            .collect(),
    };
    let grads = rasterize_backward(&saved, &scene.refs(), &cam, &env, &zero_grad).unwrap();
    assert!(grads.positions.iter().all(|&g| g == 0.0));
    assert!(grads.log_sizes.iter().all(|&g| g == 0.0));
    assert!(grads.opacity_logits.iter().all(|&g| g == 0.0));
    assert!(grads.descriptors.iter().all(|&g| g == 0.0));
    assert!(grads.pose_tangent.iter().all(|&g| g == 0.0));
}

#[test]
fn single_point_descriptor_gradient_is_gamma() {
    // loss = blended feature of the one touched pixel; d(loss)/d tau = T_1
    // * gamma_1 = gamma_1
    let scene = TestScene {
        positions: vec![0.013, -0.004, 1.0],
        log_sizes: vec![(1.3f64 / 60.0).ln()], // s ~ 1.3 px (focal ~62)
        opacity_logits: vec![0.3],
        descriptors: vec![0.7],
        n_features: 1,
    };
    let cam = camera(32, 32);
    let env = EnvironmentMap::Constant(vec![0.0]);
    let cfg = RasterConfig::default();
    let (pyr, saved) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
    // pick the strongest pixel of layer 0
    let l0 = &pyr.layers[0];
    let mut best = (0usize, 0usize, 0.0f64);
    for y in 0..l0.h {
        for x in 0..l0.w {
            let a = l0.at(1, y, x);
            if a > best.2 {
                best = (x, y, a);
            }
        }
    }
    let gamma = best.2; // single fragment: accumulated opacity == gamma
    let mut grad = ImagePyramid {
        layers: pyr
            .layers
            .iter()
            .map(|l| LayerImage::zeros(l.w, l.h, l.channels))
            .collect(),
    };
    let plane = l0.w * l0.h;
    grad.layers[0].data[best.1 * l0.w + best.0] = 1.0; // feature channel 0
    let _ = plane;
    let grads = rasterize_backward(&saved, &scene.refs(), &cam, &env, &grad).unwrap();
    assert!(
        (grads.descriptors[0] - gamma).abs() < 1e-12,
        "dtau {} vs gamma {}",
        grads.descriptors[0],
        gamma
    );
}

#[test]
fn backward_matches_finite_differences() {
    let cfg = RasterConfig::default();
    let cam = camera(32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut scene = random_scene(&mut rng, 90, 3);
    reject_kinks(&mut scene, &cam, &cfg, 6e-3);
    let n = scene.positions.len() / 3;
    assert!(n >= 40, "too few points survived kink rejection: {n}");

    let env = EnvironmentMap::Constant(vec![0.3, 0.1, 0.5]);
    // fixed pseudo-random pyramid weighting makes the scalar loss sensitive
    // to every channel including accumulated opacity
    let loss_weight = |l: usize, idx: usize| ((l * 131 + idx * 7919) % 23) as f64 / 11.0 - 1.0;
    let loss = |refs: &SceneRefs<'_, f64>, cam: &CameraView<f64>, env: &EnvironmentMap<f64>| {
        let (pyr, _) = rasterize_forward(refs, cam, env, &cfg).unwrap();
        let mut acc = 0.0;
        for (l, layer) in pyr.layers.iter().enumerate() {
            for (i, v) in layer.data.iter().enumerate() {
                acc += v * loss_weight(l, i);
            }
        }
        acc
    };

    let (pyr, saved) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
    let grad_pyr = ImagePyramid {
        layers: pyr
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerImage {
                w: layer.w,
                h: layer.h,
                channels: layer.channels,
                data: (0..layer.data.len()).map(|i| loss_weight(l, i)).collect(),
            })
            .collect(),
    };
    let grads = rasterize_backward(&saved, &scene.refs(), &cam, &env, &grad_pyr).unwrap();

    let mut max_rel: f64 = 0.0;
    let mut check = |analytic: f64, fd: f64, what: &str| {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-7);
        if rel > max_rel {
            max_rel = rel;
        }
        assert!(
            rel < 1e-4,
            "{what}: analytic {analytic} vs fd {fd} (rel {rel})"
        );
    };

    let h = 1e-5;
    for i in (0..3 * n).step_by(3 * n / 24 + 1) {
        let orig = scene.positions[i];
        scene.positions[i] = orig + h;
        let lp = loss(&scene.refs(), &cam, &env);
        scene.positions[i] = orig - h;
        let lm = loss(&scene.refs(), &cam, &env);
        scene.positions[i] = orig;
        check(grads.positions[i], (lp - lm) / (2.0 * h), &format!("position {i}"));
    }
    for i in (0..n).step_by(n / 12 + 1) {
        let orig = scene.log_sizes[i];
        scene.log_sizes[i] = orig + h;
        let lp = loss(&scene.refs(), &cam, &env);
        scene.log_sizes[i] = orig - h;
        let lm = loss(&scene.refs(), &cam, &env);
        scene.log_sizes[i] = orig;
        check(grads.log_sizes[i], (lp - lm) / (2.0 * h), &format!("log_size {i}"));
        let orig = scene.opacity_logits[i];
        scene.opacity_logits[i] = orig + h;
        let lp = loss(&scene.refs(), &cam, &env);
        scene.opacity_logits[i] = orig - h;
        let lm = loss(&scene.refs(), &cam, &env);
        scene.opacity_logits[i] = orig;
        check(
            grads.opacity_logits[i],
            (lp - lm) / (2.0 * h),
            &format!("opacity_logit {i}"),
        );
    }
    for i in (0..3 * n).step_by(3 * n / 12 + 1) {
        let orig = scene.descriptors[i];
        scene.descriptors[i] = orig + h;
        let lp = loss(&scene.refs(), &cam, &env);
        scene.descriptors[i] = orig - h;
        let lm = loss(&scene.refs(), &cam, &env);
        scene.descriptors[i] = orig;
        check(grads.descriptors[i], (lp - lm) / (2.0 * h), &format!("descriptor {i}"));
    }
    // pose tangent: rebuild the camera view from a base camera + tangent
    let base = trips_core::scene::Camera {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
        q: [1.0, 0.0, 0.0, 0.0],
        t: [0.0, 0.0, 0.0],
        exposure_ev: 0.0,
        wb_red: 1.0,
        wb_blue: 1.0,
    };
    let hp = 1e-6;
    for a in 0..6 {
        let mut tangent = [0.0f64; 6];
        tangent[a] = hp;
        let cam_p = CameraView::from_camera_with_tangent(&base, &tangent);
        let lp = loss(&scene.refs(), &cam_p, &env);
        tangent[a] = -hp;
        let cam_m = CameraView::from_camera_with_tangent(&base, &tangent);
        let lm = loss(&scene.refs(), &cam_m, &env);
        check(
            grads.pose_tangent[a],
            (lp - lm) / (2.0 * hp),
            &format!("pose tangent {a}"),
        );
    }
    // environment constant
    if let EnvironmentMap::Constant(bg) = &env {
        let eg = grads.env_constant.as_ref().unwrap();
        for f in 0..bg.len() {
            let mut envp = bg.clone();
            envp[f] += h;
            let lp = loss(&scene.refs(), &cam, &EnvironmentMap::Constant(envp.clone()));
            envp[f] = bg[f] - h;
            let lm = loss(&scene.refs(), &cam, &EnvironmentMap::Constant(envp));
            check(eg[f], (lp - lm) / (2.0 * h), &format!("env {f}"));
        }
    }
    eprintln!("raster fd max rel err: {max_rel:.3e}");
}

#[test]
fn backward_rejects_mismatched_saved_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = random_scene(&mut rng, 20, 2);
    let other = random_scene(&mut rng, 25, 2);
    let cam = camera(16, 16);
    let env = EnvironmentMap::Constant(vec![0.0; 2]);
    let cfg = RasterConfig::default();
    let (pyr, saved) = rasterize_forward(&scene.refs(), &cam, &env, &cfg).unwrap();
    let err = rasterize_backward(&saved, &other.refs(), &cam, &env, &pyr).unwrap_err();
    assert!(err.to_string().contains("point count"), "{err}");
}

#[test]
fn blending_stays_in_unit_range_for_unit_inputs() {
    // descriptors and background in [0,1] keep every blended channel and the
    // accumulated opacity in [0,1]
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let scene = random_scene(&mut rng, 400, 3);
        let cam = camera(24, 24);
        let env = EnvironmentMap::Constant(vec![0.9, 0.0, 0.5]);
        let (pyr, _) =
            rasterize_forward(&scene.refs(), &cam, &env, &RasterConfig::default()).unwrap();
        for layer in &pyr.layers {
            for &v in &layer.data {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v), "value {v} out of range");
            }
        }
    }
}

//! Synthetic scenes with exact analytic ground truth, plus the render
//! benchmark harness.
//!
//! Ground truth is generated by ray-geometry intersection with analytic
//! shading; it shares no rasterization code with the splatting renderer, so
//! it can serve as an independent oracle for end-to-end optimization.

pub mod bench;

use crate::error::{Error, Result};
use crate::scene::quat::{mat_tvec, normalize};
use crate::scene::{Camera, PointCloud};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Checkerboard-textured quad in the z=0 plane, x,y in [-1,1].
    Plane,
    /// Colored shell of radius 0.8 about the origin.
    Sphere,
    /// The plane scene with a disc of points removed; ground truth still
    /// shows the full surface.
    Hole,
}

impl SceneKind {
    pub fn parse(s: &str) -> Result<SceneKind> {
        match s {
            "plane" => Ok(SceneKind::Plane),
            "sphere" => Ok(SceneKind::Sphere),
            "hole" => Ok(SceneKind::Hole),
            other => Err(Error::data(format!("unknown scene kind {other}"))),
        }
    }
}

pub const SPHERE_RADIUS: f64 = 0.8;
pub const HOLE_RADIUS: f64 = 0.35;

/// Checkerboard cell size: four mean point spacings per cell, so texture
/// detail sits between the splat footprint and the pixel grid.
pub fn checker_cell(n_points: usize) -> f64 {
    let spacing = (4.0 / n_points as f64).sqrt();
    4.0 * spacing
}

fn checker_color(x: f64, y: f64, cell: f64) -> [f64; 3] {
    let k = ((x / cell).floor() + (y / cell).floor()) as i64;
    if k.rem_euclid(2) == 0 {
        [0.85, 0.35, 0.15]
    } else {
        [0.15, 0.55, 0.85]
    }
}

fn sphere_color(n: [f64; 3]) -> [f64; 3] {
    let phi = n[1].atan2(n[0]);
    let sin_theta = (n[0] * n[0] + n[1] * n[1]).sqrt();
    [
        0.55 + 0.35 * (4.0 * phi).cos() * sin_theta,
        0.55 + 0.35 * n[2],
        0.55 + 0.35 * (4.0 * phi).sin() * sin_theta,
    ]
}

/// Surface color at a plane hit for the given scene kind and cell size.
fn plane_point_color(kind: SceneKind, x: f64, y: f64, cell: f64) -> [f64; 3] {
    debug_assert!(kind != SceneKind::Sphere);
    checker_color(x, y, cell)
}

/// Sample the scene's point cloud: positions on the analytic surface with
/// per-point color seeded from the texture.
pub fn generate_cloud<S: Scalar>(
    kind: SceneKind,
    n_points: usize,
    n_features: usize,
    seed: u64,
) -> PointCloud<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = checker_cell(n_points);
    let mut positions = Vec::with_capacity(3 * n_points);
    let mut colors = Vec::with_capacity(3 * n_points);
    let mut produced = 0usize;
    while produced < n_points {
        match kind {
            SceneKind::Plane | SceneKind::Hole => {
                let x = rng.gen_range(-1.0..1.0);
                let y = rng.gen_range(-1.0..1.0);
                if kind == SceneKind::Hole && x * x + y * y < HOLE_RADIUS * HOLE_RADIUS {
                    // the hole: keep sampling, but count the draw so the
                    // remaining density matches the plane scene
                    produced += 1;
                    continue;
                }
                positions.extend([sc::<S>(x), sc::<S>(y), sc::<S>(0.0)]);
                colors.push(plane_point_color(kind, x, y, cell));
                produced += 1;
            }
            SceneKind::Sphere => {
                let z = rng.gen_range(-1.0..1.0f64);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                let n = [r * phi.cos(), r * phi.sin(), z];
                positions.extend([
                    sc::<S>(SPHERE_RADIUS * n[0]),
                    sc::<S>(SPHERE_RADIUS * n[1]),
                    sc::<S>(SPHERE_RADIUS * n[2]),
                ]);
                colors.push(sphere_color(n));
                produced += 1;
            }
        }
    }
    let n = positions.len() / 3;
    let normal = rand_distr::Normal::new(0.0f64, 0.25).expect("normal");
    let mut descriptors = Vec::with_capacity(n * n_features);
    for (_, c) in (0..n).zip(&colors) {
        for f in 0..n_features {
            if f < 3 {
                descriptors.push(sc::<S>(c[f]));
            } else {
                descriptors.push(sc::<S>(rand_distr::Distribution::sample(&normal, &mut rng)));
            }
        }
    }
    PointCloud {
        positions,
        log_sizes: vec![S::zero(); n],
        opacity_logits: vec![S::zero(); n],
        descriptors,
        n_features,
    }
}

/// Cameras on a ring around the scene, looking at the origin.
pub fn ring_cameras<S: Scalar>(kind: SceneKind, n_cameras: usize, resolution: usize) -> Vec<Camera<S>> {
    let (radius, height) = match kind {
        SceneKind::Plane | SceneKind::Hole => (1.6, 1.9),
        SceneKind::Sphere => (2.1, 0.9),
    };
    (0..n_cameras)
        .map(|k| {
            let phi = std::f64::consts::TAU * k as f64 / n_cameras as f64;
            let eye = [
                sc::<S>(radius * phi.cos()),
                sc::<S>(radius * phi.sin()),
                sc::<S>(height),
            ];
            let (q, t) = Camera::look_at(eye, [S::zero(); 3], [S::zero(), S::zero(), S::one()]);
            let f = sc::<S>(resolution as f64 * 0.95);
            let c = sc::<S>((resolution as f64 - 1.0) / 2.0);
            Camera {
                fx: f,
                fy: f,
                cx: c,
                cy: c,
                width: resolution,
                height: resolution,
                q,
                t,
                exposure_ev: S::zero(),
                wb_red: S::one(),
                wb_blue: S::one(),
            }
        })
        .collect()
}

fn trace_ray(kind: SceneKind, cell: f64, origin: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
    match kind {
        SceneKind::Plane | SceneKind::Hole => {
            if dir[2].abs() < 1e-12 {
                return [0.0; 3];
            }
            let t = -origin[2] / dir[2];
            if t <= 0.0 {
                return [0.0; 3];
            }
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            if x.abs() > 1.0 || y.abs() > 1.0 {
                return [0.0; 3];
            }
            plane_point_color(kind, x, y, cell)
        }
        SceneKind::Sphere => {
            let b = origin[0] * dir[0] + origin[1] * dir[1] + origin[2] * dir[2];
            let c = origin[0] * origin[0] + origin[1] * origin[1] + origin[2] * origin[2]
                - SPHERE_RADIUS * SPHERE_RADIUS;
            let disc = b * b - c;
            if disc < 0.0 {
                return [0.0; 3];
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return [0.0; 3];
            }
            let n = normalize([
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ]);
            sphere_color(n)
        }
    }
}

fn camera_rays<S: Scalar>(cam: &Camera<S>) -> ([f64; 3], crate::scene::quat::Mat3<f64>) {
    let rotf: crate::scene::quat::Mat3<f64> = {
        let r = cam.rotation();
        [
            [r[0][0].to_f64_s(), r[0][1].to_f64_s(), r[0][2].to_f64_s()],
            [r[1][0].to_f64_s(), r[1][1].to_f64_s(), r[1][2].to_f64_s()],
            [r[2][0].to_f64_s(), r[2][1].to_f64_s(), r[2][2].to_f64_s()],
        ]
    };
    let t = [
        cam.t[0].to_f64_s(),
        cam.t[1].to_f64_s(),
        cam.t[2].to_f64_s(),
    ];
    // camera center: -R^T t
    let center = mat_tvec(&rotf, [-t[0], -t[1], -t[2]]);
    (center, rotf)
}

/// Analytic ground-truth image, 2x2 supersampled.
pub fn ground_truth<S: Scalar>(kind: SceneKind, n_points: usize, cam: &Camera<S>) -> Tensor<S> {
    let cell = checker_cell(n_points);
    let (center, rot) = camera_rays(cam);
    let (w, h) = (cam.width, cam.height);
    let fx = cam.fx.to_f64_s();
    let fy = cam.fy.to_f64_s();
    let cx = cam.cx.to_f64_s();
    let cy = cam.cy.to_f64_s();
    let mut out = Tensor::zeros(vec![3, h, w]);
    let plane = h * w;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0f64; 3 * w];
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for sy in [-0.25, 0.25] {
                    for sx in [-0.25, 0.25] {
                        let dir_cam = normalize([
                            (x as f64 + sx - cx) / fx,
                            (y as f64 + sy - cy) / fy,
                            1.0,
                        ]);
                        let dir = mat_tvec(&rot, dir_cam);
                        let c = trace_ray(kind, cell, center, dir);
                        for a in 0..3 {
                            acc[a] += c[a];
                        }
                    }
                }
                for a in 0..3 {
                    row[3 * x + a] = acc[a] / 4.0;
                }
            }
            row
        })
        .collect_into_vec(&mut rows);
    for (y, row) in rows.iter().enumerate() {
        for x in 0..w {
            for a in 0..3 {
                out.data_mut()[a * plane + y * w + x] = sc::<S>(row[3 * x + a]);
            }
        }
    }
    out
}

/// Mask of pixels whose primary ray hits the removed disc of the hole scene.
pub fn hole_mask<S: Scalar>(cam: &Camera<S>) -> Vec<bool> {
    let (center, rot) = camera_rays(cam);
    let (w, h) = (cam.width, cam.height);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let dir_cam = normalize([
                (x as f64 - cam.cx.to_f64_s()) / cam.fx.to_f64_s(),
                (y as f64 - cam.cy.to_f64_s()) / cam.fy.to_f64_s(),
                1.0,
            ]);
            let dir = mat_tvec(&rot, dir_cam);
            if dir[2].abs() < 1e-12 {
                continue;
            }
            let t = -center[2] / dir[2];
            if t <= 0.0 {
                continue;
            }
            let px = center[0] + t * dir[0];
            let py = center[1] + t * dir[1];
            mask[y * w + x] = px * px + py * py < HOLE_RADIUS * HOLE_RADIUS;
        }
    }
    mask
}

/// Full synthetic scene: point cloud (sizes initialized), ring cameras, and
/// analytic ground-truth images.
pub fn make_synthetic_scene<S: Scalar>(
    kind: SceneKind,
    n_points: usize,
    n_cameras: usize,
    resolution: usize,
    n_features: usize,
    seed: u64,
) -> Result<(PointCloud<S>, Vec<Camera<S>>, Vec<Tensor<S>>)> {
    if n_points < 100 {
        return Err(Error::data("synthetic scenes need at least 100 points"));
    }
    if n_cameras < 9 {
        return Err(Error::data(
            "need at least 9 cameras so the 1-in-8 split has a test frame",
        ));
    }
    let mut cloud = generate_cloud(kind, n_points, n_features, seed);
    crate::scene::knn::init_point_sizes(&mut cloud)?;
    let cameras = ring_cameras(kind, n_cameras, resolution);
    let images = cameras
        .iter()
        .map(|cam| ground_truth(kind, n_points, cam))
        .collect();
    Ok((cloud, cameras, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_scene_has_expected_split() {
        let (cloud, cams, images) =
            make_synthetic_scene::<f32>(SceneKind::Plane, 500, 16, 32, 4, 3).unwrap();
        assert_eq!(cloud.n_points(), 500);
        assert_eq!(cams.len(), 16);
        assert_eq!(images.len(), 16);
        let frames = crate::scene::FrameSet {
            frames: cams
                .iter()
                .map(|c| crate::scene::Frame {
                    camera: c.clone(),
                    image_path: std::path::PathBuf::new(),
                })
                .collect(),
        };
        assert_eq!(frames.test_indices().len(), 2);
    }

    #[test]
    fn hole_scene_has_no_points_in_disc_but_surface_in_gt() {
        let (cloud, cams, _) =
            make_synthetic_scene::<f64>(SceneKind::Hole, 2000, 9, 48, 4, 5).unwrap();
        for i in 0..cloud.n_points() {
            let p = cloud.position(i);
            assert!(
                p[0] * p[0] + p[1] * p[1] >= HOLE_RADIUS * HOLE_RADIUS,
                "point {i} inside the hole"
            );
        }
        // a central ground-truth pixel still shows the checkerboard
        let cam = &cams[0];
        let gt = ground_truth(SceneKind::Hole, 2000, cam);
        let mask = hole_mask(cam);
        let plane = cam.width * cam.height;
        let hole_pixels: Vec<usize> = (0..plane).filter(|&p| mask[p]).collect();
        assert!(!hole_pixels.is_empty(), "camera does not see the hole");
        let lit = hole_pixels
            .iter()
            .filter(|&&p| (0..3).any(|c| gt.data()[c * plane + p] > 0.05))
            .count();
        assert!(lit > hole_pixels.len() / 2, "ground truth empty in the hole");
    }

    #[test]
    fn sphere_back_points_exist_but_are_occluded() {
        let (cloud, cams, _) =
            make_synthetic_scene::<f64>(SceneKind::Sphere, 1000, 9, 32, 4, 8).unwrap();
        let cam = &cams[0];
        let (center, _) = camera_rays(cam);
        // count points on the far hemisphere as seen from this camera
        let mut far = 0usize;
        for i in 0..cloud.n_points() {
            let p = cloud.position(i);
            let to_cam = [center[0] - p[0], center[1] - p[1], center[2] - p[2]];
            // outward normal is p / |p| for the sphere
            if p[0] * to_cam[0] + p[1] * to_cam[1] + p[2] * to_cam[2] < 0.0 {
                far += 1;
            }
        }
        assert!(far > 200, "sphere sampling missed the back side: {far}");
        // ground truth at the silhouette center never shows back colors:
        // probe the pixel that looks at the sphere center
        let gt = ground_truth(SceneKind::Sphere, 1000, cam);
        let front_n = normalize([center[0], center[1], center[2]]);
        let expect = sphere_color(front_n);
        let px = cam.cx.to_f64_s().round() as usize;
        let py = cam.cy.to_f64_s().round() as usize;
        let plane = cam.width * cam.height;
        for c in 0..3 {
            let got = gt.data()[c * plane + py * cam.width + px];
            assert!(
                (got - expect[c]).abs() < 0.15,
                "channel {c}: {got} vs {}",
                expect[c]
            );
        }
    }

    #[test]
    fn too_few_cameras_rejected() {
        let err = make_synthetic_scene::<f32>(SceneKind::Plane, 500, 8, 32, 4, 0).unwrap_err();
        assert!(err.to_string().contains("test frame"));
    }
}

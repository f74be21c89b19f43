//! The optimizable scene: point cloud, cameras, environment, and frame sets.

pub mod knn;
pub mod quat;

use crate::error::{Error, Result};
use crate::tensor::scalar::{sc, Scalar};
use quat::{mat_vec, quat_from_axis_angle, quat_mul, quat_norm, quat_normalize, quat_to_mat, Mat3};
use std::path::PathBuf;

/// Optimizable point cloud. Sizes are stored as log(s_w) and opacities as
/// logits so plain gradient steps cannot leave the valid ranges.
#[derive(Clone, Debug)]
pub struct PointCloud<S> {
    /// N*3 world positions.
    pub positions: Vec<S>,
    /// N log world sizes.
    pub log_sizes: Vec<S>,
    /// N opacity logits.
    pub opacity_logits: Vec<S>,
    /// N*F feature descriptors.
    pub descriptors: Vec<S>,
    pub n_features: usize,
}

impl<S: Scalar> PointCloud<S> {
    pub fn n_points(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn position(&self, i: usize) -> [S; 3] {
        [
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        ]
    }

    pub fn world_size(&self, i: usize) -> S {
        self.log_sizes[i].exp()
    }

    pub fn opacity(&self, i: usize) -> S {
        crate::tensor::ops::sigmoid(self.opacity_logits[i])
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bbox(&self) -> ([S; 3], [S; 3]) {
        let mut lo = [S::infinity(); 3];
        let mut hi = [S::neg_infinity(); 3];
        for i in 0..self.n_points() {
            for a in 0..3 {
                let v = self.positions[3 * i + a];
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        (lo, hi)
    }

    /// Largest bounding-box edge.
    pub fn extent(&self) -> S {
        let (lo, hi) = self.bbox();
        let mut e = S::zero();
        for a in 0..3 {
            e = e.max(hi[a] - lo[a]);
        }
        e
    }
}

/// Pinhole camera with pose (unit quaternion + translation, world -> view,
/// +z forward into the screen) and per-image capture parameters.
#[derive(Clone, Debug)]
pub struct Camera<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: usize,
    pub height: usize,
    /// Unit quaternion (w,x,y,z), world -> view.
    pub q: [S; 4],
    pub t: [S; 3],
    /// Exposure in log2 units.
    pub exposure_ev: S,
    /// White balance gains for red and blue (green fixed at 1).
    pub wb_red: S,
    pub wb_blue: S,
}

impl<S: Scalar> Camera<S> {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= S::zero() || self.fy <= S::zero() {
            return Err(Error::data("camera focal lengths must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::data("camera extent below 8 pixels"));
        }
        if (quat_norm(self.q) - S::one()).abs() > sc::<S>(1e-4) {
            return Err(Error::data("camera quaternion not unit"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3<S> {
        quat_to_mat(self.q)
    }

    /// Compose a 6-vector tangent increment (axis-angle, translation) onto
    /// the pose from the left and renormalize.
    pub fn apply_tangent(&mut self, tangent: &[S; 6]) {
        let dq = quat_from_axis_angle([tangent[0], tangent[1], tangent[2]]);
        self.q = quat_normalize(quat_mul(dq, self.q));
        let rot = quat_to_mat(dq);
        let rt = mat_vec(&rot, self.t);
        self.t = [rt[0] + tangent[3], rt[1] + tangent[4], rt[2] + tangent[5]];
    }

    /// Camera with intrinsics and extent scaled by `factor` (used for the
    /// half-resolution warm-up and zoom augmentation).
    pub fn scaled(&self, factor: f64) -> Camera<S> {
        let f = sc::<S>(factor);
        let mut cam = self.clone();
        cam.fx = cam.fx * f;
        cam.fy = cam.fy * f;
        cam.cx = cam.cx * f;
        cam.cy = cam.cy * f;
        cam.width = ((self.width as f64 * factor).round() as usize).max(1);
        cam.height = ((self.height as f64 * factor).round() as usize).max(1);
        cam
    }

    /// Geometric mean focal length, used for the screen-size projection when
    /// fx != fy.
    pub fn focal(&self) -> S {
        (self.fx * self.fy).sqrt()
    }

    /// Build a pose looking from `eye` towards `target` with the given world
    /// up vector.
    pub fn look_at(eye: [S; 3], target: [S; 3], up: [S; 3]) -> ([S; 4], [S; 3]) {
        use quat::{cross, normalize};
        let fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let right = normalize(cross(up, fwd));
        let down = cross(fwd, right);
        // rows of world->view rotation: x right, y down (image y grows
        // downward), z forward
        let m = [right, down, fwd];
        let q = mat_to_quat(&m);
        let t = [
            -(m[0][0] * eye[0] + m[0][1] * eye[1] + m[0][2] * eye[2]),
            -(m[1][0] * eye[0] + m[1][1] * eye[1] + m[1][2] * eye[2]),
            -(m[2][0] * eye[0] + m[2][1] * eye[1] + m[2][2] * eye[2]),
        ];
        (q, t)
    }
}

fn mat_to_quat<S: Scalar>(m: &Mat3<S>) -> [S; 4] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let half = sc::<S>(0.5);
    let quarter = sc::<S>(0.25);
    let q = if trace > S::zero() {
        let s = (trace + S::one()).sqrt() * sc::<S>(2.0);
        [
            quarter * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (S::one() + m[0][0] - m[1][1] - m[2][2]).sqrt() * sc::<S>(2.0);
        [
            (m[2][1] - m[1][2]) / s,
            quarter * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (S::one() + m[1][1] - m[0][0] - m[2][2]).sqrt() * sc::<S>(2.0);
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            quarter * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (S::one() + m[2][2] - m[0][0] - m[1][1]).sqrt() * sc::<S>(2.0);
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            quarter * s,
        ]
    };
    let _ = half;
    quat_normalize(q)
}

/// Background radiance source.
#[derive(Clone, Debug)]
pub enum EnvironmentMap<S> {
    /// Single learned feature vector (F entries).
    Constant(Vec<S>),
    /// Equirectangular texture, F x H_e x W_e with W_e = 2 H_e.
    Equirect {
        data: Vec<S>,
        features: usize,
        height: usize,
        width: usize,
    },
}

impl<S: Scalar> EnvironmentMap<S> {
    pub fn constant(n_features: usize) -> Self {
        EnvironmentMap::Constant(vec![S::zero(); n_features])
    }

    pub fn equirect(n_features: usize, height: usize) -> Self {
        let width = 2 * height;
        EnvironmentMap::Equirect {
            data: vec![S::zero(); n_features * height * width],
            features: n_features,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvironmentMap::Constant(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::data("environment constant is not finite"));
                }
            }
            EnvironmentMap::Equirect { data, height, width, .. } => {
                if *width != 2 * *height {
                    return Err(Error::data("equirect environment must have W = 2H"));
                }
                if data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::data("environment texture is not finite"));
                }
            }
        }
        Ok(())
    }
}

/// One training/test view: camera plus its ground-truth image.
#[derive(Clone, Debug)]
pub struct Frame<S> {
    pub camera: Camera<S>,
    pub image_path: PathBuf,
}

/// All views with the every-8th-frame test split.
#[derive(Clone, Debug)]
pub struct FrameSet<S> {
    pub frames: Vec<Frame<S>>,
}

impl<S: Scalar> FrameSet<S> {
    pub fn is_test(&self, index: usize) -> bool {
        index % 8 == 0
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|i| !self.is_test(*i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|i| self.is_test(*i)).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Check the scene for NaN/Inf fields, out-of-range opacities, and cameras
/// that see no points. NaN positions are fatal.
pub fn validate_scene<S: Scalar>(
    cloud: &PointCloud<S>,
    frames: &FrameSet<S>,
) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    if cloud.n_points() == 0 {
        return Err(Error::data("point cloud is empty"));
    }
    for i in 0..cloud.n_points() {
        for a in 0..3 {
            if !cloud.positions[3 * i + a].is_finite() {
                return Err(Error::NonFinite {
                    entry: format!("point position {i}"),
                    index: 3 * i + a,
                });
            }
        }
        if !cloud.log_sizes[i].is_finite() {
            report.warnings.push(format!("point {i}: non-finite log size"));
        }
        if !cloud.opacity_logits[i].is_finite() {
            report.warnings.push(format!("point {i}: non-finite opacity logit"));
        }
        let op = cloud.opacity(i);
        if op <= S::zero() || op >= S::one() {
            report
                .warnings
                .push(format!("point {i}: opacity {op} outside (0,1)"));
        }
    }
    for v in &cloud.descriptors {
        if !v.is_finite() {
            report.warnings.push("non-finite descriptor value".to_string());
            break;
        }
    }
    for (fi, frame) in frames.frames.iter().enumerate() {
        frame.camera.validate()?;
        let cam = &frame.camera;
        let rot = cam.rotation();
        let mut visible = 0usize;
        for i in 0..cloud.n_points() {
            let p = mat_vec(&rot, cloud.position(i));
            let z = p[2] + cam.t[2];
            if z <= sc::<S>(0.01) {
                continue;
            }
            let x = cam.fx * (p[0] + cam.t[0]) / z + cam.cx;
            let y = cam.fy * (p[1] + cam.t[1]) / z + cam.cy;
            if x >= -S::one()
                && x <= sc::<S>(cam.width as f64)
                && y >= -S::one()
                && y <= sc::<S>(cam.height as f64)
            {
                visible += 1;
                break;
            }
        }
        if visible == 0 {
            report
                .warnings
                .push(format!("frame {fi}: no points inside the view frustum"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cloud() -> PointCloud<f32> {
        PointCloud {
            positions: vec![0.0, 0.0, 2.0, 0.2, 0.1, 2.5],
            log_sizes: vec![0.0, 0.0],
            opacity_logits: vec![0.0, 0.0],
            descriptors: vec![0.5; 8],
            n_features: 4,
        }
    }

    fn front_camera() -> Camera<f32> {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0, 0.0, 0.0],
            exposure_ev: 0.0,
            wb_red: 1.0,
            wb_blue: 1.0,
        }
    }

    #[test]
    fn clean_scene_gives_empty_report() {
        let cloud = tiny_cloud();
        let frames = FrameSet {
            frames: vec![Frame {
                camera: front_camera(),
                image_path: PathBuf::new(),
            }],
        };
        let report = validate_scene(&cloud, &frames).unwrap();
        assert!(report.is_clean(), "{:?}", report.warnings);
    }

    #[test]
    fn nan_position_is_fatal_with_index() {
        let mut cloud = tiny_cloud();
        cloud.positions[4] = f32::NAN;
        let frames = FrameSet { frames: vec![] };
        match validate_scene(&cloud, &frames) {
            Err(Error::NonFinite { entry, .. }) => assert!(entry.contains('1'), "{entry}"),
            other => panic!("expected fatal NaN, got {other:?}"),
        }
    }

    #[test]
    fn camera_facing_away_warns_with_frame_index() {
        let cloud = tiny_cloud();
        let mut cam = front_camera();
        // rotate 180 degrees about y: points end up behind the camera
        cam.q = [0.0, 0.0, 1.0, 0.0];
        let frames = FrameSet {
            frames: vec![Frame {
                camera: cam,
                image_path: PathBuf::new(),
            }],
        };
        let report = validate_scene(&cloud, &frames).unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("frame 0"), "{:?}", report.warnings);
    }

    #[test]
    fn test_split_marks_every_eighth() {
        let frames = FrameSet::<f32> {
            frames: (0..16)
                .map(|_| Frame {
                    camera: front_camera(),
                    image_path: PathBuf::new(),
                })
                .collect(),
        };
        assert_eq!(frames.test_indices(), vec![0, 8]);
        assert_eq!(frames.train_indices().len(), 14);
    }

    #[test]
    fn tangent_composition_keeps_quaternion_unit() {
        let mut cam = front_camera();
        for i in 0..50 {
            let s = (i as f32 * 0.13).sin() * 0.1;
            cam.apply_tangent(&[s, -s, 0.05, 0.01, 0.0, -0.02]);
        }
        assert!((quat_norm(cam.q) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn look_at_projects_target_to_center() {
        let (q, t) = Camera::<f64>::look_at([1.8, 0.4, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let rot = quat_to_mat(q);
        let p = mat_vec(&rot, [0.0, 0.0, 0.0]);
        let v = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        // target on the optical axis, in front
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(v[2] > 0.0);
    }
}

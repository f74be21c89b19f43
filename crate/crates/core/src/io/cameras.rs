//! Camera JSON: a top-level array of frame records.

use crate::error::{Error, Result};
use crate::scene::quat::quat_norm;
use crate::scene::{Camera, Frame, FrameSet};
use crate::tensor::scalar::{sc, Scalar};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_wb() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Unit quaternion (w,x,y,z), world -> view.
    pub q: [f64; 4],
    pub t: [f64; 3],
    #[serde(default)]
    pub exposure_ev: f64,
    /// White balance gains (red, blue); green is fixed at 1.
    #[serde(default = "default_wb")]
    pub wb: [f64; 2],
}

/// Load a frame set. Quaternions are normalized; a deviation above 1e-3
/// produces a warning. Every 8th frame is held out for testing.
pub fn read_cameras<S: Scalar>(path: &Path) -> Result<(FrameSet<S>, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut warnings = Vec::new();
    let mut frames = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.fx <= 0.0 || r.fy <= 0.0 {
            return Err(Error::data(format!(
                "frame {i}: non-positive focal length ({}, {})",
                r.fx, r.fy
            )));
        }
        if r.width < 8 || r.height < 8 {
            return Err(Error::data(format!("frame {i}: extent below 8 pixels")));
        }
        let q: [S; 4] = std::array::from_fn(|a| sc::<S>(r.q[a]));
        let norm = quat_norm(q).to_f64_s();
        if (norm - 1.0).abs() > 1e-3 {
            warnings.push(format!(
                "frame {i}: quaternion norm {norm:.6} off unit; normalized"
            ));
        }
        let camera = Camera {
            fx: sc::<S>(r.fx),
            fy: sc::<S>(r.fy),
            cx: sc::<S>(r.cx),
            cy: sc::<S>(r.cy),
            width: r.width,
            height: r.height,
            q: crate::scene::quat::quat_normalize(q),
            t: std::array::from_fn(|a| sc::<S>(r.t[a])),
            exposure_ev: sc::<S>(r.exposure_ev),
            wb_red: sc::<S>(r.wb[0]),
            wb_blue: sc::<S>(r.wb[1]),
        };
        frames.push(Frame {
            camera,
            image_path: base.join(&r.image),
        });
    }
    Ok((FrameSet { frames }, warnings))
}

pub fn write_cameras<S: Scalar>(
    path: &Path,
    frames: &FrameSet<S>,
    image_names: &[String],
) -> Result<()> {
    let records: Vec<CameraRecord> = frames
        .frames
        .iter()
        .zip(image_names)
        .map(|(f, name)| {
            let c = &f.camera;
            CameraRecord {
                image: name.clone(),
                width: c.width,
                height: c.height,
                fx: c.fx.to_f64_s(),
                fy: c.fy.to_f64_s(),
                cx: c.cx.to_f64_s(),
                cy: c.cy.to_f64_s(),
                q: std::array::from_fn(|a| c.q[a].to_f64_s()),
                t: std::array::from_fn(|a| c.t[a].to_f64_s()),
                exposure_ev: c.exposure_ev.to_f64_s(),
                wb: [c.wb_red.to_f64_s(), c.wb_blue.to_f64_s()],
            }
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::quat::{mat_vec, quat_to_mat};

    fn identity_json() -> String {
        r#"[{"image":"a.png","width":64,"height":64,"fx":100.0,"fy":100.0,
            "cx":32.0,"cy":32.0,"q":[1.0,0.0,0.0,0.0],"t":[0.0,0.0,0.0]}]"#
            .to_string()
    }

    #[test]
    fn identity_camera_maps_world_to_view_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        std::fs::write(&path, identity_json()).unwrap();
        let (frames, warnings) = read_cameras::<f64>(&path).unwrap();
        assert!(warnings.is_empty());
        let cam = &frames.frames[0].camera;
        let rot = quat_to_mat(cam.q);
        let p = mat_vec(&rot, [0.3, -0.4, 2.0]);
        let v = [p[0] + cam.t[0], p[1] + cam.t[1], p[2] + cam.t[2]];
        assert_eq!(v, [0.3, -0.4, 2.0]);
    }

    #[test]
    fn sixteen_frames_split_to_two_test_views() {
        let mut records = Vec::new();
        for i in 0..16 {
            records.push(format!(
                r#"{{"image":"f{i}.png","width":32,"height":32,"fx":50.0,"fy":50.0,
                "cx":16.0,"cy":16.0,"q":[1.0,0.0,0.0,0.0],"t":[0.0,0.0,{i}.0]}}"#
            ));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        std::fs::write(&path, format!("[{}]", records.join(","))).unwrap();
        let (frames, _) = read_cameras::<f32>(&path).unwrap();
        assert_eq!(frames.test_indices(), vec![0, 8]);
    }

    #[test]
    fn non_positive_focal_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        std::fs::write(&path, identity_json().replace("\"fx\":100.0", "\"fx\":0.0")).unwrap();
        let err = read_cameras::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("focal"), "{err}");
    }

    #[test]
    fn off_unit_quaternion_warns_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        std::fs::write(
            &path,
            identity_json().replace("[1.0,0.0,0.0,0.0]", "[2.0,0.0,0.0,0.0]"),
        )
        .unwrap();
        let (frames, warnings) = read_cameras::<f64>(&path).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!((quat_norm(frames.frames[0].camera.q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roundtrip_preserves_fields_to_f64_precision() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let frames = FrameSet::<f64> {
            frames: (0..5)
                .map(|i| {
                    let q = crate::scene::quat::quat_normalize([
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]);
                    Frame {
                        camera: Camera {
                            fx: rng.gen_range(50.0..500.0),
                            fy: rng.gen_range(50.0..500.0),
                            cx: rng.gen_range(10.0..100.0),
                            cy: rng.gen_range(10.0..100.0),
                            width: 64,
                            height: 48,
                            q,
                            t: [rng.gen_range(-5.0..5.0), 0.25, 1.0 / 3.0],
                            exposure_ev: rng.gen_range(-1.0..1.0),
                            wb_red: 1.1,
                            wb_blue: 0.9,
                        },
                        image_path: format!("img{i}.png").into(),
                    }
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        let names: Vec<String> = (0..5).map(|i| format!("img{i}.png")).collect();
        write_cameras(&path, &frames, &names).unwrap();
        let (back, _) = read_cameras::<f64>(&path).unwrap();
        for (a, b) in frames.frames.iter().zip(&back.frames) {
            assert_eq!(a.camera.fx, b.camera.fx);
            assert_eq!(a.camera.fy, b.camera.fy);
            assert_eq!(a.camera.cx, b.camera.cx);
            assert_eq!(a.camera.cy, b.camera.cy);
            assert_eq!(a.camera.t, b.camera.t);
            assert_eq!(a.camera.exposure_ev, b.camera.exposure_ev);
            for i in 0..4 {
                assert!((a.camera.q[i] - b.camera.q[i]).abs() < 1e-15);
            }
        }
    }
}

//! Binary checkpoint container ("TRIPSCKPT"): scene tensors, decoder
//! weights, tone-map parameters, environment, composed camera poses, and the
//! epoch counter. Arrays are little-endian f32 with shape headers; a
//! trailing length field detects truncation. Round trips are bit-identical.

use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 9] = b"TRIPSCKPT";
pub const VERSION: u32 = 1;

fn push_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn push_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    push_str(out, name);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.to_f64_s() as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated while reading {what} (need {n} bytes at {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("non-utf8 {what}")))
    }
}

fn serialize<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let meta: Vec<(String, String)> = vec![
        ("epoch".into(), model.epoch.to_string()),
        ("n_layers".into(), model.cfg.n_layers.to_string()),
        ("n_features".into(), model.cfg.n_features.to_string()),
        ("sh".into(), (model.cfg.sh as u8).to_string()),
        ("env_latlong".into(), (model.cfg.env_latlong as u8).to_string()),
        ("env_height".into(), model.cfg.env_height.to_string()),
        ("n_points".into(), model.n_points().to_string()),
        ("n_frames".into(), model.cameras.len().to_string()),
    ];
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in &meta {
        push_str(&mut out, k);
        push_str(&mut out, v);
    }

    let names: Vec<&str> = model.store.names().collect();
    out.extend_from_slice(&((names.len() + 2) as u32).to_le_bytes());
    for name in names {
        push_tensor(&mut out, name, model.store.value(name));
    }
    let n = model.cameras.len();
    let q = Tensor::<S>::new(
        vec![n, 4],
        model.cameras.iter().flat_map(|c| c.q).collect(),
    )
    .expect("camera q");
    let t = Tensor::<S>::new(
        vec![n, 3],
        model.cameras.iter().flat_map(|c| c.t).collect(),
    )
    .expect("camera t");
    push_tensor(&mut out, "cameras.q", &q);
    push_tensor(&mut out, "cameras.t", &t);

    let total = out.len() as u64 + 8;
    out.extend_from_slice(&total.to_le_bytes());
    out
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &Model<S>) -> Result<()> {
    std::fs::write(path, serialize(model))?;
    Ok(())
}

/// Load a checkpoint into a model built with the same configuration and
/// point count; no partial state is applied on failure.
pub fn load_checkpoint<S: Scalar>(path: &Path, model: &mut Model<S>) -> Result<()> {
    let data = std::fs::read(path)?;
    if data.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short",
            path.display()
        )));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let trailer = u64::from_le_bytes(data[data.len() - 8..].try_into().unwrap());
    if trailer != data.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{}: truncated (trailer says {} bytes, file has {})",
            path.display(),
            trailer,
            data.len()
        )));
    }
    let mut cur = Cursor {
        data: &data[..data.len() - 8],
        pos: MAGIC.len(),
        path,
    };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} unsupported (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let n_meta = cur.u32("meta count")?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = cur.string("meta key")?;
        let v = cur.string("meta value")?;
        meta.insert(k, v);
    }
    let get = |k: &str| -> Result<u64> {
        meta.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta {k}")))
    };
    let ckpt_points = get("n_points")? as usize;
    if ckpt_points != model.n_points() {
        return Err(Error::Checkpoint(format!(
            "point count mismatch: checkpoint has {ckpt_points}, model has {}",
            model.n_points()
        )));
    }
    for (key, expect) in [
        ("n_layers", model.cfg.n_layers as u64),
        ("n_features", model.cfg.n_features as u64),
        ("sh", model.cfg.sh as u64),
        ("env_latlong", model.cfg.env_latlong as u64),
        ("n_frames", model.cameras.len() as u64),
    ] {
        let got = get(key)?;
        if got != expect {
            return Err(Error::Checkpoint(format!(
                "{key} mismatch: checkpoint has {got}, model has {expect}"
            )));
        }
    }

    // parse all tensors before touching the model
    let n_tensors = cur.u32("tensor count")?;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for _ in 0..n_tensors {
        let name = cur.string("tensor name")?;
        let ndim = cur.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel, &format!("tensor {name}"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, values));
    }
    for (name, shape, _) in &tensors {
        if name == "cameras.q" || name == "cameras.t" {
            continue;
        }
        if !model.store.contains(name) {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
        if model.store.value(name).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                shape,
                model.store.value(name).shape()
            )));
        }
    }
    for (name, _, values) in tensors {
        match name.as_str() {
            "cameras.q" => {
                for (i, cam) in model.cameras.iter_mut().enumerate() {
                    cam.q = std::array::from_fn(|a| sc::<S>(values[4 * i + a] as f64));
                }
            }
            "cameras.t" => {
                for (i, cam) in model.cameras.iter_mut().enumerate() {
                    cam.t = std::array::from_fn(|a| sc::<S>(values[3 * i + a] as f64));
                }
            }
            _ => {
                let dst = model.store.value_mut(&name);
                for (d, v) in dst.data_mut().iter_mut().zip(values) {
                    *d = sc::<S>(v as f64);
                }
            }
        }
    }
    model.epoch = get("epoch")? as u32;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{LearningRates, PipelineConfig};
    use crate::scene::{Camera, PointCloud};

    fn tiny_model(n: usize) -> Model<f32> {
        let cloud = PointCloud {
            positions: (0..3 * n).map(|i| i as f32 * 0.1).collect(),
            log_sizes: vec![-2.0; n],
            opacity_logits: vec![0.1; n],
            descriptors: (0..4 * n).map(|i| (i % 7) as f32 / 7.0).collect(),
            n_features: 4,
        };
        let cameras = vec![Camera {
            fx: 50.0,
            fy: 50.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0, 0.0, 0.0],
            exposure_ev: 0.0,
            wb_red: 1.0,
            wb_blue: 1.0,
        }];
        Model::build(
            &cloud,
            cameras,
            PipelineConfig::default(),
            &LearningRates::default(),
            7,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut model = tiny_model(10);
        model.epoch = 42;
        save_checkpoint(&p1, &model).unwrap();
        let mut fresh = tiny_model(10);
        load_checkpoint(&p1, &mut fresh).unwrap();
        assert_eq!(fresh.epoch, 42);
        save_checkpoint(&p2, &fresh).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_file_rejected_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = tiny_model(10);
        save_checkpoint(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 20);
        std::fs::write(&path, &bytes).unwrap();
        let mut target = tiny_model(10);
        let before = target.store.value("points.positions").clone();
        let err = load_checkpoint(&path, &mut target).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert_eq!(target.store.value("points.positions"), &before);
    }

    #[test]
    fn mismatched_point_count_rejected_with_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &tiny_model(10)).unwrap();
        let mut other = tiny_model(11);
        let err = load_checkpoint(&path, &mut other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10") && msg.contains("11"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTACKPT0000000000000000").unwrap();
        let err = load_checkpoint(&path, &mut tiny_model(10)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}

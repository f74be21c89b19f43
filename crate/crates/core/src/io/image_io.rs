//! 8-bit image output (PNG, with PPM fallback by extension) and loading.

use crate::error::{Error, Result};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

fn quantize<S: Scalar>(v: S) -> u8 {
    (v.to_f64_s().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a [3,H,W] image in [0,1]; .ppm extension selects binary PPM,
/// anything else is PNG. Bytes are deterministic for identical input.
pub fn write_image<S: Scalar>(path: &Path, rgb: &Tensor<S>) -> Result<()> {
    let shape = rgb.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("write_image", 0, 3, shape.first().copied().unwrap_or(0)));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(rgb.data()[c * plane + p]));
        }
    }
    if path.extension().is_some_and(|e| e == "ppm") {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{w} {h}\n255\n")?;
        f.write_all(&bytes)?;
        return Ok(());
    }
    image::save_buffer(
        path,
        &bytes,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Load an 8-bit image into a [3,H,W] tensor scaled to [0,1].
pub fn read_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    if path.extension().is_some_and(|e| e == "ppm") {
        return read_ppm(path);
    }
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut out = Tensor::zeros(vec![3, h, w]);
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out.data_mut()[c * plane + p] = sc::<S>(px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let data = std::fs::read(path)?;
    let err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        location: "header".into(),
        message: msg.into(),
    };
    let header_end = {
        let mut fields = 0;
        let mut i = 0;
        while fields < 4 && i < data.len() {
            while i < data.len() && data[i].is_ascii_whitespace() {
                i += 1;
            }
            while i < data.len() && !data[i].is_ascii_whitespace() {
                i += 1;
            }
            fields += 1;
        }
        i + 1
    };
    let header = std::str::from_utf8(&data[..header_end.min(data.len())])
        .map_err(|_| err("non-ascii header"))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("P6") {
        return Err(err("not a P6 ppm"));
    }
    let w: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad width"))?;
    let h: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad height"))?;
    let maxv: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad maxval"))?;
    if maxv != 255 {
        return Err(err("only maxval 255 supported"));
    }
    let body = &data[header_end..];
    if body.len() < 3 * w * h {
        return Err(err("truncated pixel data"));
    }
    let plane = w * h;
    let mut out = Tensor::zeros(vec![3, h, w]);
    for p in 0..plane {
        for c in 0..3 {
            out.data_mut()[c * plane + p] = sc::<S>(body[3 * p + c] as f64 / 255.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_writes_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.ppm");
        write_image(&path, &Tensor::<f32>::zeros(vec![3, 4, 4])).unwrap();
        let data = std::fs::read(&path).unwrap();
        let body = &data[data.len() - 48..];
        assert!(body.iter().all(|&b| b == 0));
    }

    #[test]
    fn half_rounds_up_to_128() {
        assert_eq!(quantize(0.5f32), 128);
        assert_eq!(quantize(0.0f32), 0);
        assert_eq!(quantize(1.0f32), 255);
        assert_eq!(quantize(1.7f32), 255);
        assert_eq!(quantize(-0.3f32), 0);
    }

    #[test]
    fn roundtrip_error_within_quantization_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(vec![3, 8, 8], |_| rng.gen_range(0.0..1.0f64));
        let dir = tempfile::tempdir().unwrap();
        for name in ["r.png", "r.ppm"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            let back: Tensor<f64> = read_image(&path).unwrap();
            assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let img = Tensor::from_fn(vec![3, 5, 7], |i| (i % 9) as f32 / 8.0);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_image(&p1, &img).unwrap();
        write_image(&p2, &img).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}

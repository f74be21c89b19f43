//! Naive single-threaded reference rasterizer.
//!
//! Builds full per-pixel fragment lists, fully sorts them by (depth, point
//! index), truncates to the 16-fragment cap, and blends. Shares only the
//! per-point math (projection, layer selection, bilinear weights) with the
//! staged rasterizer; the counting/scatter/selection machinery is
//! re-derived, which is what makes it a useful oracle for that machinery.

use super::*;
use crate::error::Result;
use crate::tensor::ops::sigmoid;

pub fn rasterize_reference<S: Scalar>(
    scene: &SceneRefs<'_, S>,
    cam: &CameraView<S>,
    env: &EnvironmentMap<S>,
    cfg: &RasterConfig,
) -> Result<ImagePyramid<S>> {
    let nf = scene.n_features;
    let mut dims = Vec::new();
    let mut lists: Vec<Vec<Vec<(S, S, u32)>>> = Vec::new();
    for l in 0..cfg.n_layers {
        let (w, h) = layer_dims(cam.width, cam.height, l);
        dims.push((w, h));
        lists.push(vec![Vec::new(); w * h]);
    }

    for i in 0..scene.n_points() {
        let x_w = [
            scene.positions[3 * i],
            scene.positions[3 * i + 1],
            scene.positions[3 * i + 2],
        ];
        let s_w = scene.log_sizes[i].exp();
        let Some((_, rec)) = project_point(cam, x_w, s_w, cfg) else {
            continue;
        };
        let alpha = sigmoid(scene.opacity_logits[i]);
        let z = rec.view[2];
        visit_fragments(&rec, alpha, cam.width, cam.height, |l, px, py, _, _, gamma| {
            let w = dims[l].0;
            lists[l][py * w + px].push((z, gamma, i as u32));
        });
    }

    let sampler = EnvSampler::new(env, cam);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut bg = vec![S::zero(); nf];
    let mut out = vec![S::zero(); nf + 1];
    for (l, &(w, h)) in dims.iter().enumerate() {
        let mut layer = LayerImage::zeros(w, h, nf + 1);
        for py in 0..h {
            for px in 0..w {
                let list = &mut lists[l][py * w + px];
                list.sort_by(|a, b| (a.0, a.2).partial_cmp(&(b.0, b.2)).unwrap());
                list.truncate(FRAGMENT_CAP);
                sampler.features_at(l, px, py, &mut bg);
                blend_pixel(list, scene.descriptors, nf, &bg, &mut out);
                let plane = w * h;
                for (c, v) in out.iter().enumerate() {
                    layer.data[c * plane + py * w + px] = *v;
                }
            }
        }
        layers.push(layer);
    }
    Ok(ImagePyramid { layers })
}

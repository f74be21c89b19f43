//! Forward rasterization in three stages: collecting (project + count +
//! offset scan), splatting (scatter fragments into one contiguous array for
//! all layers), and a combined per-pixel sort + blend pass.
//!
//! Deterministic across thread counts: scatter order within a pixel segment
//! is schedule-dependent, but the kept set and its order are fixed by the
//! (depth, point index) sort key, which is unique per list.

use super::*;
use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid;
use rayon::prelude::*;
use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Instant;

/// Slice wrapper for parallel writes to disjoint indices.
struct SyncSlice<'a, T>(&'a [UnsafeCell<T>]);

unsafe impl<T: Send + Sync> Sync for SyncSlice<'_, T> {}

impl<'a, T> SyncSlice<'a, T> {
    fn new(slice: &'a mut [T]) -> Self {
        // SAFETY: UnsafeCell<T> has the same layout as T
        let ptr = slice.as_mut_ptr() as *const UnsafeCell<T>;
        SyncSlice(unsafe { std::slice::from_raw_parts(ptr, slice.len()) })
    }

    /// SAFETY: callers must never write the same index from two threads.
    #[inline]
    unsafe fn write(&self, idx: usize, value: T) {
        *self.0[idx].get() = value;
    }
}

pub(crate) struct PixelLayout {
    pub layer_dims: Vec<(usize, usize)>,
    pub layer_pixel_offset: Vec<usize>,
    pub total_pixels: usize,
}

pub(crate) fn pixel_layout(width: usize, height: usize, n_layers: usize) -> PixelLayout {
    let mut layer_dims = Vec::with_capacity(n_layers);
    let mut layer_pixel_offset = Vec::with_capacity(n_layers);
    let mut total = 0usize;
    for l in 0..n_layers {
        let (w, h) = layer_dims_of(width, height, l);
        layer_pixel_offset.push(total);
        layer_dims.push((w, h));
        total += w * h;
    }
    PixelLayout {
        layer_dims,
        layer_pixel_offset,
        total_pixels: total,
    }
}

#[inline]
fn layer_dims_of(width: usize, height: usize, l: usize) -> (usize, usize) {
    super::layer_dims(width, height, l)
}

/// Rasterize the scene into an image pyramid, keeping the sorted per-pixel
/// lists (capped at 16) for backpropagation.
pub fn rasterize_forward<S: Scalar>(
    scene: &SceneRefs<'_, S>,
    cam: &CameraView<S>,
    env: &EnvironmentMap<S>,
    cfg: &RasterConfig,
) -> Result<(ImagePyramid<S>, RasterSavedState<S>)> {
    if !(3..=8).contains(&cfg.n_layers) {
        return Err(Error::data(format!(
            "layer count must be in [3,8], got {}",
            cfg.n_layers
        )));
    }
    let n_points = scene.n_points();
    let nf = scene.n_features;
    let sampler = EnvSampler::new(env, cam);
    if sampler.n_features() != nf {
        return Err(Error::shape(
            "environment features",
            0,
            nf,
            sampler.n_features(),
        ));
    }
    let layout = pixel_layout(cam.width, cam.height, cfg.n_layers);

    // stage 1: collect + count + offset scan
    let t0 = Instant::now();
    let recs: Vec<Option<ProjRec<S>>> = (0..n_points)
        .into_par_iter()
        .map(|i| {
            let x_w = [
                scene.positions[3 * i],
                scene.positions[3 * i + 1],
                scene.positions[3 * i + 2],
            ];
            let s_w = scene.log_sizes[i].exp();
            project_point(cam, x_w, s_w, cfg).map(|(_, rec)| rec)
        })
        .collect();

    let counters: Vec<AtomicU32> = (0..layout.total_pixels).map(|_| AtomicU32::new(0)).collect();
    recs.par_iter().enumerate().for_each(|(i, rec)| {
        let Some(rec) = rec else { return };
        let alpha = sigmoid(scene.opacity_logits[i]);
        visit_fragments(rec, alpha, cam.width, cam.height, |l, px, py, _, _, _| {
            let (lw, _) = layout.layer_dims[l];
            let pix = layout.layer_pixel_offset[l] + py * lw + px;
            counters[pix].fetch_add(1, Ordering::Relaxed);
        });
    });

    let mut offsets = vec![0u32; layout.total_pixels + 1];
    let mut kept_offsets = vec![0u32; layout.total_pixels + 1];
    let mut truncated_lists = 0usize;
    let mut occupied = 0usize;
    for p in 0..layout.total_pixels {
        let c = counters[p].load(Ordering::Relaxed);
        offsets[p + 1] = offsets[p] + c;
        kept_offsets[p + 1] = kept_offsets[p] + c.min(FRAGMENT_CAP as u32);
        if c > 0 {
            occupied += 1;
        }
        if c > FRAGMENT_CAP as u32 {
            truncated_lists += 1;
        }
    }
    let total_fragments = offsets[layout.total_pixels] as usize;
    let total_kept = kept_offsets[layout.total_pixels] as usize;
    let mut frag_buf: Vec<(S, S, u32)> = vec![(S::zero(), S::zero(), 0); total_fragments];
    let count_alloc_ms = t0.elapsed().as_secs_f64() * 1e3;

    // stage 2: scatter (depth, gamma, index) fragments
    let t1 = Instant::now();
    let cursors: Vec<AtomicU32> = (0..layout.total_pixels).map(|_| AtomicU32::new(0)).collect();
    {
        let sink = SyncSlice::new(&mut frag_buf);
        recs.par_iter().enumerate().for_each(|(i, rec)| {
            let Some(rec) = rec else { return };
            let alpha = sigmoid(scene.opacity_logits[i]);
            let z = rec.view[2];
            visit_fragments(rec, alpha, cam.width, cam.height, |l, px, py, _, _, gamma| {
                let (lw, _) = layout.layer_dims[l];
                let pix = layout.layer_pixel_offset[l] + py * lw + px;
                let slot = offsets[pix] + cursors[pix].fetch_add(1, Ordering::Relaxed);
                // SAFETY: slots are unique via per-pixel atomic cursors
                unsafe { sink.write(slot as usize, (z, gamma, i as u32)) };
            });
        });
    }
    let splat_ms = t1.elapsed().as_secs_f64() * 1e3;

    // stage 3: per-pixel bounded top-16 selection, then front-to-back blend
    let t2 = Instant::now();
    let mut kept: Vec<(S, S, u32)> = vec![(S::zero(), S::zero(), 0); total_kept];
    let mut pixel_kept: Vec<(u32, u8)> = vec![(0, 0); layout.total_pixels];
    let mut layers: Vec<LayerImage<S>> = layout
        .layer_dims
        .iter()
        .map(|&(w, h)| LayerImage::zeros(w, h, nf + 1))
        .collect();
    {
        let kept_sink = SyncSlice::new(&mut kept);
        let pixel_kept_sink = SyncSlice::new(&mut pixel_kept);
        let layer_sinks: Vec<SyncSlice<S>> =
            layers.iter_mut().map(|l| SyncSlice::new(&mut l.data)).collect();
        let frag_buf = &frag_buf;
        let layout_ref = &layout;
        (0..layout.total_pixels).into_par_iter().for_each(|pix| {
            let lo = offsets[pix] as usize;
            let hi = offsets[pix + 1] as usize;
            let l = match layout_ref.layer_pixel_offset.binary_search(&pix) {
                Ok(i) => i,
                Err(i) => i - 1,
            };
            let (lw, lh) = layout_ref.layer_dims[l];
            let local = pix - layout_ref.layer_pixel_offset[l];
            let (px, py) = (local % lw, local / lw);
            let mut bg = vec![S::zero(); nf];
            let sampler = EnvSampler::new(env, cam);
            sampler.features_at(l, px, py, &mut bg);
            let mut out = vec![S::zero(); nf + 1];
            let mut list: Vec<(S, S, u32)> = Vec::with_capacity(FRAGMENT_CAP.min(hi - lo));
            for f in &frag_buf[lo..hi] {
                bounded_insert(&mut list, *f);
            }
            blend_pixel(&list, scene.descriptors, nf, &bg, &mut out);
            let kept_lo = kept_offsets[pix] as usize;
            for (j, f) in list.iter().enumerate() {
                // SAFETY: kept ranges are disjoint per pixel
                unsafe { kept_sink.write(kept_lo + j, *f) };
            }
            // SAFETY: one writer per pixel
            unsafe { pixel_kept_sink.write(pix, (kept_lo as u32, list.len() as u8)) };
            let plane = lw * lh;
            for (c, v) in out.iter().enumerate() {
                // SAFETY: one writer per (channel, pixel) cell
                unsafe { layer_sinks[l].write(c * plane + py * lw + px, *v) };
            }
            let _ = lh;
        });
    }
    let sort_blend_ms = t2.elapsed().as_secs_f64() * 1e3;

    let stats = FragmentStats {
        total_fragments,
        pixel_lists: occupied,
        mean_list_len: if occupied > 0 {
            total_fragments as f64 / occupied as f64
        } else {
            0.0
        },
        truncated_lists,
        max_fragments_per_point: 8,
    };
    let saved = RasterSavedState {
        recs,
        kept,
        pixel_kept,
        layer_pixel_offset: layout.layer_pixel_offset,
        layer_dims: layout.layer_dims,
        n_points,
        n_features: nf,
        width: cam.width,
        height: cam.height,
        n_layers: cfg.n_layers,
        timings: StageTimings {
            count_alloc_ms,
            splat_ms,
            sort_blend_ms,
        },
        stats,
    };
    Ok((ImagePyramid { layers }, saved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::EnvironmentMap;

    fn simple_scene(n_features: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        // single point on the optical axis
        let positions = vec![0.0, 0.0, 1.0];
        let log_sizes = vec![(0.01f32).ln()]; // s = 100*0.01/1 = 1 pixel
        let opacity_logits = vec![10.0]; // alpha ~ 1
        let descriptors = vec![1.0; n_features];
        (positions, log_sizes, opacity_logits, descriptors)
    }

    fn cam() -> CameraView<f32> {
        CameraView {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn empty_cloud_gives_pure_background() {
        let env = EnvironmentMap::Constant(vec![0.25f32, 0.5]);
        let scene = SceneRefs {
            positions: &[],
            log_sizes: &[],
            opacity_logits: &[],
            descriptors: &[],
            n_features: 2,
        };
        let (pyr, saved) = rasterize_forward(&scene, &cam(), &env, &RasterConfig::default()).unwrap();
        assert_eq!(pyr.layers.len(), 4);
        for layer in &pyr.layers {
            for y in 0..layer.h {
                for x in 0..layer.w {
                    assert_eq!(layer.at(0, y, x), 0.25);
                    assert_eq!(layer.at(1, y, x), 0.5);
                    assert_eq!(layer.at(2, y, x), 0.0); // accumulated opacity
                }
            }
        }
        assert_eq!(saved.stats.total_fragments, 0);
    }

    #[test]
    fn single_unit_point_touches_only_layer0_footprint() {
        let (positions, log_sizes, opacity_logits, descriptors) = simple_scene(2);
        let env = EnvironmentMap::Constant(vec![0.0f32, 0.0]);
        let scene = SceneRefs {
            positions: &positions,
            log_sizes: &log_sizes,
            opacity_logits: &opacity_logits,
            descriptors: &descriptors,
            n_features: 2,
        };
        let (pyr, _) = rasterize_forward(&scene, &cam(), &env, &RasterConfig::default()).unwrap();
        // s = 1 is an exact power of two: single layer 0
        let l0 = &pyr.layers[0];
        let mut nonzero = Vec::new();
        for y in 0..l0.h {
            for x in 0..l0.w {
                if l0.at(2, y, x) > 0.0 {
                    nonzero.push((x, y));
                }
            }
        }
        // point lands exactly on pixel (32,32): single fragment
        assert_eq!(nonzero, vec![(32, 32)]);
        for layer in &pyr.layers[1..] {
            assert!(layer.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let n = 500;
        let positions: Vec<f32> = (0..n)
            .flat_map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.5..3.0),
                ]
            })
            .collect();
        let log_sizes: Vec<f32> = (0..n).map(|_| rng.gen_range(-5.0..-2.0f32)).collect();
        let opacity_logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let descriptors: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let env = EnvironmentMap::Constant(vec![0.1, 0.2, 0.3]);
        let scene = SceneRefs {
            positions: &positions,
            log_sizes: &log_sizes,
            opacity_logits: &opacity_logits,
            descriptors: &descriptors,
            n_features: 3,
        };
        let cam = cam();
        let cfg = RasterConfig::default();
        let run = |threads: usize| {
            crate::parallel::with_threads(threads, || {
                rasterize_forward(&scene, &cam, &env, &cfg).unwrap().0
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b, "pyramids differ across thread counts");
    }
}

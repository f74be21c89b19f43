//! Render benchmark harness: median per-stage wall times over repeated
//! frames, plus fragment statistics.

use crate::error::Result;
use crate::pipeline::{render_frame, FrameTimings, Model};
use crate::raster::FragmentStats;
use crate::tensor::scalar::Scalar;
use serde::Serialize;

pub const WARMUP_RUNS: usize = 3;

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct BenchRecord {
    pub count_alloc_ms: f64,
    pub splat_ms: f64,
    pub sort_blend_ms: f64,
    pub decode_ms: f64,
    pub shade_tonemap_ms: f64,
    pub total_ms: f64,
    pub fragments_per_point: f64,
    pub mean_list_len: f64,
    pub truncation_rate: f64,
}

impl BenchRecord {
    pub fn raster_ms(&self) -> f64 {
        self.count_alloc_ms + self.splat_ms + self.sort_blend_ms
    }

    pub fn csv_header() -> &'static str {
        "count_alloc_ms,splat_ms,sort_blend_ms,decode_ms,shade_tonemap_ms,total_ms,\
         fragments_per_point,mean_list_len,truncation_rate"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6}",
            self.count_alloc_ms,
            self.splat_ms,
            self.sort_blend_ms,
            self.decode_ms,
            self.shade_tonemap_ms,
            self.total_ms,
            self.fragments_per_point,
            self.mean_list_len,
            self.truncation_rate
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Render `repetitions` timed frames (after 3 discarded warm-up runs) and
/// report per-stage medians.
pub fn benchmark_render<S: Scalar>(
    model: &Model<S>,
    frame: usize,
    repetitions: usize,
) -> Result<BenchRecord> {
    let cam = model.cameras[frame].clone();
    let mut timings: Vec<FrameTimings> = Vec::with_capacity(repetitions);
    let mut stats = FragmentStats::default();
    for run in 0..WARMUP_RUNS + repetitions {
        let (_, saved, t) = render_frame(&model.store, &model.cfg, &cam, frame)?;
        if run >= WARMUP_RUNS {
            timings.push(t);
            stats = saved.raster.stats;
        }
    }
    let pick = |f: &dyn Fn(&FrameTimings) -> f64| median(timings.iter().map(f).collect());
    let rec = BenchRecord {
        count_alloc_ms: pick(&|t| t.raster.count_alloc_ms),
        splat_ms: pick(&|t| t.raster.splat_ms),
        sort_blend_ms: pick(&|t| t.raster.sort_blend_ms),
        decode_ms: pick(&|t| t.decode_ms),
        shade_tonemap_ms: pick(&|t| t.shade_tonemap_ms),
        total_ms: pick(&|t| t.total_ms()),
        fragments_per_point: stats.total_fragments as f64 / model.n_points().max(1) as f64,
        mean_list_len: stats.mean_list_len,
        truncation_rate: if stats.pixel_lists > 0 {
            stats.truncated_lists as f64 / stats.pixel_lists as f64
        } else {
            0.0
        },
    };
    Ok(rec)
}

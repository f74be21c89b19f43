//! Point size initialization: mean distance to the four nearest neighbors,
//! computed exactly with a uniform spatial hash grid.

use super::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::scalar::{sc, Scalar};
use rayon::prelude::*;
use std::collections::HashMap;

const K_NEIGHBORS: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Cell(i64, i64, i64);

struct HashGrid {
    cells: HashMap<Cell, Vec<u32>>,
    inv_cell: f64,
}

impl HashGrid {
    fn build<S: Scalar>(positions: &[S], cell_size: f64) -> Self {
        let inv_cell = 1.0 / cell_size;
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for i in 0..positions.len() / 3 {
            let c = Self::cell_of(positions, i, inv_cell);
            cells.entry(c).or_default().push(i as u32);
        }
        HashGrid { cells, inv_cell }
    }

    fn cell_of<S: Scalar>(positions: &[S], i: usize, inv_cell: f64) -> Cell {
        Cell(
            (positions[3 * i].to_f64_s() * inv_cell).floor() as i64,
            (positions[3 * i + 1].to_f64_s() * inv_cell).floor() as i64,
            (positions[3 * i + 2].to_f64_s() * inv_cell).floor() as i64,
        )
    }
}

/// Exact k-nearest-neighbor mean distance for one query point, searching
/// expanding shells of grid cells until the shell lower bound exceeds the
/// current k-th best distance.
fn knn_mean<S: Scalar>(grid: &HashGrid, positions: &[S], i: usize, k: usize) -> f64 {
    let q = [
        positions[3 * i].to_f64_s(),
        positions[3 * i + 1].to_f64_s(),
        positions[3 * i + 2].to_f64_s(),
    ];
    let home = HashGrid::cell_of(positions, i, grid.inv_cell);
    let cell_size = 1.0 / grid.inv_cell;
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    let mut ring = 0i64;
    loop {
        // lower bound on distance to any point in a cell of this ring
        let ring_min = (ring - 1).max(0) as f64 * cell_size;
        if best.len() == k && ring_min * ring_min > *best.last().unwrap() {
            break;
        }
        let mut any_cell = false;
        for dz in -ring..=ring {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    let cell = Cell(home.0 + dx, home.1 + dy, home.2 + dz);
                    let Some(members) = grid.cells.get(&cell) else {
                        continue;
                    };
                    any_cell = true;
                    for &j in members {
                        if j as usize == i {
                            continue;
                        }
                        let mut d2 = 0.0;
                        for a in 0..3 {
                            let d = positions[3 * j as usize + a].to_f64_s() - q[a];
                            d2 += d * d;
                        }
                        let pos = best.partition_point(|&b| b <= d2);
                        if pos < k {
                            best.insert(pos, d2);
                            best.truncate(k);
                        }
                    }
                }
            }
        }
        ring += 1;
        // safety stop: expanded beyond any occupied cell and found all we can
        if !any_cell && ring as f64 * cell_size > 1e12 {
            break;
        }
        if ring > 4 && best.len() == k {
            let ring_min = (ring - 1) as f64 * cell_size;
            if ring_min * ring_min > *best.last().unwrap() {
                break;
            }
        }
        // all points visited once the ring covers the whole occupied box
        if ring > 2_000 {
            break;
        }
    }
    let used = best.len().min(k);
    best.iter().take(used).map(|d2| d2.sqrt()).sum::<f64>() / used as f64
}

/// Initialize every world size to the mean distance to its min(4, N-1)
/// nearest neighbors. Duplicate points would give size 0; those are clamped
/// to 1e-6 of the scene extent.
pub fn init_point_sizes<S: Scalar>(cloud: &mut PointCloud<S>) -> Result<()> {
    let n = cloud.n_points();
    if n < 2 {
        return Err(Error::data("point size init needs at least 2 points"));
    }
    let extent = cloud.extent().to_f64_s().max(1e-12);
    let cell = (extent / (n as f64).cbrt()).max(1e-12);
    let grid = HashGrid::build(&cloud.positions, cell);
    let k = K_NEIGHBORS.min(n - 1);
    let positions = &cloud.positions;
    let sizes: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| knn_mean(&grid, positions, i, k))
        .collect();
    let floor = extent * 1e-6;
    for (i, s) in sizes.into_iter().enumerate() {
        cloud.log_sizes[i] = sc::<S>(s.max(floor).ln());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(positions: Vec<f64>) -> PointCloud<f64> {
        let n = positions.len() / 3;
        PointCloud {
            positions,
            log_sizes: vec![0.0; n],
            opacity_logits: vec![0.0; n],
            descriptors: vec![0.0; n * 4],
            n_features: 4,
        }
    }

    /// O(N^2) oracle: brute-force mean distance to the k nearest neighbors.
    fn brute_force_knn_mean(positions: &[f64], i: usize, k: usize) -> f64 {
        let n = positions.len() / 3;
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mut d2 = 0.0;
                for a in 0..3 {
                    let d = positions[3 * j + a] - positions[3 * i + a];
                    d2 += d * d;
                }
                d2.sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists.iter().take(k).sum::<f64>() / k.min(dists.len()) as f64
    }

    #[test]
    fn two_points_distance_one() {
        let mut cloud = cloud_from(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        init_point_sizes(&mut cloud).unwrap();
        assert!((cloud.world_size(0) - 1.0).abs() < 1e-9);
        assert!((cloud.world_size(1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_interior_point_has_size_one() {
        // 3x3x3 unit grid: the center point's four nearest neighbors all sit
        // at distance 1.
        let mut positions = Vec::new();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    positions.extend([x as f64, y as f64, z as f64]);
                }
            }
        }
        let mut cloud = cloud_from(positions);
        init_point_sizes(&mut cloud).unwrap();
        let center = 13; // (1,1,1)
        assert!((cloud.world_size(center) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_matches_brute_force_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 100;
        let positions: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cloud = cloud_from(positions.clone());
        init_point_sizes(&mut cloud).unwrap();
        for i in 0..n {
            let expect = brute_force_knn_mean(&positions, i, 4);
            let got = cloud.world_size(i);
            assert!(
                (got - expect).abs() < 1e-12 * (1.0 + expect),
                "point {i}: grid {got} vs brute {expect}"
            );
        }
    }

    #[test]
    fn duplicates_clamp_to_extent_fraction() {
        let mut cloud = cloud_from(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        init_point_sizes(&mut cloud).unwrap();
        // the two duplicates: nearest neighbors are each other (d=0) and the
        // far point; mean is positive but tiny sizes are floored
        assert!(cloud.world_size(0) >= 5.0 * 1e-6);
    }

    #[test]
    fn larger_random_set_still_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1500;
        // clustered distribution stresses the shell search
        let positions: Vec<f64> = (0..n)
            .flat_map(|i| {
                let c = if i % 3 == 0 { 0.0 } else { 3.0 };
                [
                    c + rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    c + rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let mut cloud = cloud_from(positions.clone());
        init_point_sizes(&mut cloud).unwrap();
        for i in (0..n).step_by(37) {
            let expect = brute_force_knn_mean(&positions, i, 4);
            let got = cloud.world_size(i);
            assert!(
                (got - expect).abs() < 1e-12 * (1.0 + expect),
                "point {i}: grid {got} vs brute {expect}"
            );
        }
    }
}

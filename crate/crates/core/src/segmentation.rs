//! Foreground/background split from t=0 masks, plus voxel resampling of
//! point clouds to a target size.

use crate::error::{Error, Result};
use crate::math::bounding_box;
use crate::scene_io::{Camera, Mask, PointCloud};
use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use std::collections::HashMap;

/// Foreground membership: a point is foreground iff every camera that
/// observes it (in frustum and inside image bounds) sees it inside the mask's
/// 1-region, and at least one camera observes it. Everything else, including
/// points no camera observes, is background.
pub fn split_indices(pc: &PointCloud, views: &[(&Camera, &Mask)]) -> Result<Vec<bool>> {
    if views.is_empty() {
        return Err(Error::Precondition(
            "split_point_cloud requires at least one mask".into(),
        ));
    }
    for (cam, mask) in views {
        if mask.width != cam.width || mask.height != cam.height {
            return Err(Error::MaskSize {
                mask_w: mask.width,
                mask_h: mask.height,
                cam_w: cam.width,
                cam_h: cam.height,
            });
        }
    }
    Ok(pc
        .positions
        .par_iter()
        .map(|p| {
            let mut observed = false;
            for (cam, mask) in views {
                let proj = cam.project_point(p);
                if !proj.in_frustum {
                    continue;
                }
                let (x, y) = (proj.u.floor(), proj.v.floor());
                if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
                    continue;
                }
                observed = true;
                if mask.get(x as usize, y as usize) == 0 {
                    return false;
                }
            }
            observed
        })
        .collect())
}

pub fn split_point_cloud(
    pc: &PointCloud,
    views: &[(&Camera, &Mask)],
) -> Result<(PointCloud, PointCloud)> {
    let is_fg = split_indices(pc, views)?;
    let mut fg = PointCloud::default();
    let mut bg = PointCloud::default();
    for (i, &keep) in is_fg.iter().enumerate() {
        let dst = if keep { &mut fg } else { &mut bg };
        dst.positions.push(pc.positions[i]);
        dst.colors.push(pc.colors[i]);
    }
    Ok((fg, bg))
}

fn voxel_downsample(pc: &PointCloud, lo: &Vector3<f64>, edge: f64) -> PointCloud {
    // one centroid per occupied voxel, in first-occurrence order
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, f64)> = HashMap::new();
    for (p, c) in pc.positions.iter().zip(pc.colors.iter()) {
        let key = (
            ((p.x - lo.x) / edge).floor() as i64,
            ((p.y - lo.y) / edge).floor() as i64,
            ((p.z - lo.z) / edge).floor() as i64,
        );
        let entry = cells.entry(key).or_insert_with(|| {
            order.push(key);
            (Vector3::zeros(), Vector3::zeros(), 0.0)
        });
        entry.0 += p;
        entry.1 += c;
        entry.2 += 1.0;
    }
    let mut out = PointCloud::default();
    for key in order {
        let (ps, cs, n) = cells[&key];
        out.positions.push(ps / n);
        out.colors.push(cs / n);
    }
    out
}

fn occupied_voxels(pc: &PointCloud, lo: &Vector3<f64>, edge: f64) -> usize {
    let mut cells = std::collections::HashSet::new();
    for p in &pc.positions {
        cells.insert((
            ((p.x - lo.x) / edge).floor() as i64,
            ((p.y - lo.y) / edge).floor() as i64,
            ((p.z - lo.z) / edge).floor() as i64,
        ));
    }
    cells.len()
}

/// Resample a point cloud to within ±5% of `target`. Oversized clouds are
/// voxel-grid downsampled (binary search on the voxel edge, one centroid per
/// occupied voxel); undersized clouds are upsampled by duplicating points
/// with uniform jitter of half a voxel edge.
pub fn voxel_resample<R: Rng>(
    pc: &PointCloud,
    target: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if target < 1 {
        return Err(Error::Precondition("voxel_resample target must be >= 1".into()));
    }
    let n = pc.positions.len();
    if n == 0 {
        return Err(Error::Precondition("voxel_resample on empty cloud".into()));
    }
    let lo_count = ((target as f64) * 0.95).ceil() as usize;
    let hi_count = ((target as f64) * 1.05).floor() as usize;
    let lo_count = lo_count.min(hi_count).max(1);
    if n >= lo_count && n <= hi_count {
        return Ok(pc.clone());
    }

    let (blo, bhi) = bounding_box(&pc.positions);
    let diag = (bhi - blo).norm();

    if n > hi_count {
        // larger edge -> fewer occupied voxels; bisect to land in range
        let mut e_lo = 0.0f64;
        let mut e_hi = diag.max(1e-9) * 2.0;
        for _ in 0..200 {
            let edge = 0.5 * (e_lo + e_hi);
            let count = occupied_voxels(pc, &blo, edge);
            if count > hi_count {
                e_lo = edge;
            } else if count < lo_count {
                e_hi = edge;
            } else {
                return Ok(voxel_downsample(pc, &blo, edge));
            }
        }
        return Err(Error::Precondition(format!(
            "voxel edge search failed to reach {target} +/-5% from {n} points"
        )));
    }

    // Upsample: each duplicate is jittered by half its parent's local voxel
    // edge (nearest-neighbor spacing). A single global edge misbehaves on
    // mixed-scale clouds — duplicates of a tight cluster would scatter
    // across the gap to a far shell, or shell duplicates would collapse onto
    // their parents.
    let _ = diag;
    let mut edges = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (pc.positions[i] - pc.positions[j]).norm();
            if d > 0.0 {
                edges[i] = edges[i].min(d);
                edges[j] = edges[j].min(d);
            }
        }
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::Precondition(
            "cannot upsample a degenerate point cloud (all points identical)".into(),
        ));
    }
    let mut out = pc.clone();
    let mut src = 0usize;
    while out.positions.len() < lo_count {
        let jitter = Vector3::new(
            rng.gen_range(-0.5..0.5) * edges[src],
            rng.gen_range(-0.5..0.5) * edges[src],
            rng.gen_range(-0.5..0.5) * edges[src],
        );
        out.positions.push(pc.positions[src] + jitter);
        out.colors.push(pc.colors[src]);
        src = (src + 1) % n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera_at(translation: Vector3<f64>, width: usize, height: usize) -> Camera {
        Camera {
            id: 0,
            width,
            height,
            fx: 10.0,
            fy: 10.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: Matrix3::identity(),
            translation,
        }
    }

    fn mask_full(width: usize, height: usize, on: bool) -> Mask {
        Mask {
            width,
            height,
            data: vec![if on { 1 } else { 0 }; width * height],
        }
    }

    #[test]
    fn no_masks_is_an_error() {
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 2.0)],
            colors: vec![Vector3::repeat(0.5)],
        };
        assert!(split_point_cloud(&pc, &[]).is_err());
    }

    #[test]
    fn point_in_all_masks_is_foreground() {
        let cam = camera_at(Vector3::zeros(), 16, 16);
        let mask = mask_full(16, 16, true);
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 2.0)],
            colors: vec![Vector3::repeat(0.5)],
        };
        let (fg, bg) = split_point_cloud(&pc, &[(&cam, &mask), (&cam, &mask)]).unwrap();
        assert_eq!(fg.positions.len(), 1);
        assert_eq!(bg.positions.len(), 0);
    }

    #[test]
    fn point_behind_every_camera_is_background() {
        let cam = camera_at(Vector3::zeros(), 16, 16);
        let mask = mask_full(16, 16, true);
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, -2.0)],
            colors: vec![Vector3::repeat(0.5)],
        };
        let (fg, bg) = split_point_cloud(&pc, &[(&cam, &mask)]).unwrap();
        assert_eq!(fg.positions.len(), 0);
        assert_eq!(bg.positions.len(), 1);
    }

    #[test]
    fn disagreeing_masks_send_point_to_background() {
        let cam_a = camera_at(Vector3::zeros(), 16, 16);
        let cam_b = camera_at(Vector3::new(0.1, 0.0, 0.0), 16, 16);
        let mask_on = mask_full(16, 16, true);
        let mask_off = mask_full(16, 16, false);
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 2.0)],
            colors: vec![Vector3::repeat(0.5)],
        };
        let (fg, bg) =
            split_point_cloud(&pc, &[(&cam_a, &mask_on), (&cam_b, &mask_off)]).unwrap();
        assert_eq!(fg.positions.len(), 0);
        assert_eq!(bg.positions.len(), 1);
    }

    #[test]
    fn split_is_a_partition_and_mask_growth_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cam = camera_at(Vector3::zeros(), 32, 32);
        let pc = PointCloud {
            positions: (0..200)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(0.5..5.0),
                    )
                })
                .collect(),
            colors: vec![Vector3::repeat(0.5); 200],
        };
        let mut small = mask_full(32, 32, false);
        for y in 8..24 {
            for x in 8..24 {
                small.data[y * 32 + x] = 1;
            }
        }
        let mut big = small.clone();
        for y in 4..28 {
            for x in 4..28 {
                big.data[y * 32 + x] = 1;
            }
        }
        let fg_small = split_indices(&pc, &[(&cam, &small)]).unwrap();
        let fg_big = split_indices(&pc, &[(&cam, &big)]).unwrap();
        let n_small = fg_small.iter().filter(|&&b| b).count();
        assert_eq!(
            n_small + fg_small.iter().filter(|&&b| !b).count(),
            pc.positions.len()
        );
        for (s, b) in fg_small.iter().zip(fg_big.iter()) {
            assert!(!s | b, "growing the mask must not shrink the foreground");
        }
    }

    #[test]
    fn mask_size_mismatch_is_an_error() {
        let cam = camera_at(Vector3::zeros(), 16, 16);
        let mask = mask_full(8, 8, true);
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 2.0)],
            colors: vec![Vector3::repeat(0.5)],
        };
        assert!(split_point_cloud(&pc, &[(&cam, &mask)]).is_err());
    }

    #[test]
    fn resample_is_identity_when_count_already_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pc = PointCloud {
            positions: (0..100)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
            colors: vec![Vector3::repeat(0.5); 100],
        };
        let out = voxel_resample(&pc, 100, &mut rng).unwrap();
        assert_eq!(out.positions, pc.positions);
    }

    #[test]
    fn eight_corners_to_one_centroid() {
        let mut positions = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    positions.push(Vector3::new(x, y, z));
                }
            }
        }
        let pc = PointCloud {
            colors: vec![Vector3::repeat(0.5); positions.len()],
            positions,
        };
        let (lo, _) = bounding_box(&pc.positions);
        let out = voxel_downsample(&pc, &lo, 3.0);
        assert_eq!(out.positions.len(), 1);
        assert!((out.positions[0] - Vector3::repeat(0.5)).norm() < 1e-12);
    }

    #[test]
    fn downsample_hits_target_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for &(n, target) in &[(1000usize, 100usize), (5000, 700), (200, 20)] {
            let pc = PointCloud {
                positions: (0..n)
                    .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                    .collect(),
                colors: vec![Vector3::repeat(0.5); n],
            };
            let out = voxel_resample(&pc, target, &mut rng).unwrap();
            let count = out.positions.len() as f64;
            assert!(
                count >= 0.95 * target as f64 && count <= 1.05 * target as f64,
                "{n} -> {count} not within 5% of {target}"
            );
        }
    }

    #[test]
    fn upsample_hits_target_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let pc = PointCloud {
            positions: (0..50)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
            colors: vec![Vector3::repeat(0.5); 50],
        };
        let out = voxel_resample(&pc, 500, &mut rng).unwrap();
        let count = out.positions.len() as f64;
        assert!(count >= 0.95 * 500.0 && count <= 1.05 * 500.0);
    }

    #[test]
    fn degenerate_cloud_upsample_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let pc = PointCloud {
            positions: vec![Vector3::repeat(1.0); 5],
            colors: vec![Vector3::repeat(0.5); 5],
        };
        assert!(voxel_resample(&pc, 50, &mut rng).is_err());
    }
}

//! Reference-free foreground densification. Points whose deformed positions
//! move most over time (top decile of mean displacement from their temporal
//! mean) are duplicated, and canonical-stage events duplicate everything.
//! Background sets are never densified.

use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::hexplane::DeformationField;
use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;

pub const DISPLACEMENT_TIME_SAMPLES: usize = 10;
/// Optional hygiene pruning threshold on realized peak opacity.
pub const PRUNE_OPACITY_THRESHOLD: f64 = 0.005;
/// Positional-gradient threshold for the legacy clone ablation.
pub const LEGACY_GRAD_THRESHOLD: f64 = 2e-4;

/// Per-point mean displacement of the deformed position from its temporal
/// mean, sampled at 10 uniform times in [0,1].
pub fn displacement_stats(field: &DeformationField, g: &GaussianSet) -> Result<Vec<f64>> {
    let params = g.realize();
    let n = params.len();
    let mut per_time = Vec::with_capacity(DISPLACEMENT_TIME_SAMPLES);
    for k in 0..DISPLACEMENT_TIME_SAMPLES {
        let t = k as f64 / (DISPLACEMENT_TIME_SAMPLES - 1) as f64;
        let (deformed, _) = field.deform(&params, g.tag, t)?;
        per_time.push(deformed.positions);
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut mean = Vector3::zeros();
            for pt in &per_time {
                mean += pt[i];
            }
            mean /= DISPLACEMENT_TIME_SAMPLES as f64;
            per_time.iter().map(|pt| (pt[i] - mean).norm()).sum::<f64>()
                / DISPLACEMENT_TIME_SAMPLES as f64
        })
        .collect())
}

fn duplicate_point<R: Rng>(g: &mut GaussianSet, i: usize, rng: &mut R) {
    // jitter stays within the parent's footprint: +/- exp(s)/2 per axis
    let s = g.log_scales[i];
    let jitter = Vector3::new(
        rng.gen_range(-0.5..0.5) * s.x.exp(),
        rng.gen_range(-0.5..0.5) * s.y.exp(),
        rng.gen_range(-0.5..0.5) * s.z.exp(),
    );
    g.positions.push(g.positions[i] + jitter);
    g.rotations.push(g.rotations[i]);
    g.log_scales.push(g.log_scales[i]);
    g.colors_raw.push(g.colors_raw[i]);
    g.opacity_raw.push(g.opacity_raw[i]);
    g.bandwidth.push(g.bandwidth[i]);
    g.temporal_center.push(g.temporal_center[i]);
}

/// Indices of the top ceil(0.1 N) points by displacement, ties broken by
/// lower index. Returned in ascending index order.
pub fn top_decile_indices(stats: &[f64]) -> Vec<usize> {
    let n = stats.len();
    let take = n.div_ceil(10);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        stats[b]
            .partial_cmp(&stats[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(take).collect();
    chosen.sort_unstable();
    chosen
}

/// Dynamic-stage densification: duplicate the top 10% most-displaced points.
/// N grows to N + ceil(0.1 N).
pub fn densify_dynamic<R: Rng>(
    g: &mut GaussianSet,
    stats: &[f64],
    rng: &mut R,
) -> Result<usize> {
    if g.len() < 10 {
        return Err(Error::Precondition(format!(
            "densify_dynamic needs at least 10 points, got {}",
            g.len()
        )));
    }
    if stats.len() != g.len() {
        return Err(Error::Shape("displacement stats length mismatch".into()));
    }
    let chosen = top_decile_indices(stats);
    for &i in &chosen {
        duplicate_point(g, i, rng);
    }
    Ok(chosen.len())
}

/// Canonical-stage densification: duplicate every point once. N doubles.
pub fn densify_canonical<R: Rng>(g: &mut GaussianSet, rng: &mut R) -> usize {
    let n = g.len();
    for i in 0..n {
        duplicate_point(g, i, rng);
    }
    n
}

/// Point count after a schedule of n_c canonical doublings followed by n_d
/// dynamic top-decile events. This is the mechanistic count realized by the
/// two densify operations: each dynamic event compounds by a factor ~1.1
/// (exactly N + ceil(N/10)), rather than raising the whole product to the
/// n_d-th power.
pub fn estimate_final_count(n_start: usize, n_c: u32, n_d: u32) -> usize {
    let mut n = n_start;
    for _ in 0..n_c {
        n *= 2;
    }
    for _ in 0..n_d {
        n += n.div_ceil(10);
    }
    n
}

/// Remove points with realized peak opacity below the threshold. Off by
/// default in training; returns the number of removed points.
pub fn prune_low_opacity(g: &mut GaussianSet, threshold: f64) -> usize {
    let keep: Vec<bool> = g
        .opacity_raw
        .iter()
        .map(|&raw| crate::math::sigmoid(raw) >= threshold)
        .collect();
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed == 0 {
        return 0;
    }
    let mut w = 0;
    for r in 0..g.len() {
        if keep[r] {
            g.positions[w] = g.positions[r];
            g.rotations[w] = g.rotations[r];
            g.log_scales[w] = g.log_scales[r];
            g.colors_raw[w] = g.colors_raw[r];
            g.opacity_raw[w] = g.opacity_raw[r];
            g.bandwidth[w] = g.bandwidth[r];
            g.temporal_center[w] = g.temporal_center[r];
            w += 1;
        }
    }
    g.positions.truncate(w);
    g.rotations.truncate(w);
    g.log_scales.truncate(w);
    g.colors_raw.truncate(w);
    g.opacity_raw.truncate(w);
    g.bandwidth.truncate(w);
    g.temporal_center.truncate(w);
    removed
}

/// Legacy clone rule kept for the ablation: duplicate every point whose
/// accumulated mean positional-gradient norm exceeds the threshold.
pub fn densify_legacy<R: Rng>(
    g: &mut GaussianSet,
    mean_grad_norms: &[f64],
    threshold: f64,
    rng: &mut R,
) -> Result<usize> {
    if mean_grad_norms.len() != g.len() {
        return Err(Error::Shape("gradient norm length mismatch".into()));
    }
    let chosen: Vec<usize> = (0..g.len())
        .filter(|&i| mean_grad_norms[i] > threshold)
        .collect();
    for &i in &chosen {
        duplicate_point(g, i, rng);
    }
    Ok(chosen.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::SetTag;
    use crate::hexplane::{DeformationField, FieldConfig, FieldVariant};
    use crate::math::bounding_box;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        let pc = crate::scene_io::PointCloud {
            positions: (0..n)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
            colors: vec![Vector3::repeat(0.5); n],
        };
        GaussianSet::from_point_cloud(&pc, SetTag::Foreground)
    }

    fn small_field(bbox: (Vector3<f64>, Vector3<f64>)) -> DeformationField {
        let cfg = FieldConfig {
            spatial_resolution: 8,
            temporal_resolution: 4,
            channels: 4,
            hidden: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        DeformationField::new(FieldVariant::Foreground, bbox.0, bbox.1, &cfg, &mut rng)
    }

    #[test]
    fn identity_field_has_zero_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let g = random_set(&mut rng, 20);
        let field = small_field(bounding_box(&g.positions));
        let stats = displacement_stats(&field, &g).unwrap();
        // mean of ten identical positions only matches to rounding error
        assert!(stats.iter().all(|&s| s < 1e-14));
    }

    #[test]
    fn linear_motion_matches_brute_force_oracle() {
        // a point moving linearly from origin to (1,0,0) across t in [0,1]:
        // mean distance from the temporal mean equals mean |t - 0.5| over the
        // ten sample times, = 0.2777...
        let ts: Vec<f64> = (0..10).map(|k| k as f64 / 9.0).collect();
        let oracle: f64 = ts.iter().map(|t| (t - 0.5).abs()).sum::<f64>() / 10.0;
        assert_relative_eq!(oracle, 0.2778, epsilon = 1e-4);

        // same number out of displacement_stats for positions x'(t) = x + t e1,
        // computed directly on the sampled trajectory
        let positions: Vec<Vector3<f64>> =
            ts.iter().map(|&t| Vector3::new(t, 0.0, 0.0)).collect();
        let mean = positions.iter().sum::<Vector3<f64>>() / 10.0;
        let stat = positions.iter().map(|p| (p - mean).norm()).sum::<f64>() / 10.0;
        assert_relative_eq!(stat, oracle, epsilon = 1e-12);
    }

    #[test]
    fn scaling_displacements_scales_stats_linearly() {
        // doubling all displacements doubles the statistic exactly; checked
        // on an analytic trajectory
        let ts: Vec<f64> = (0..10).map(|k| k as f64 / 9.0).collect();
        let stat = |amp: f64| {
            let positions: Vec<Vector3<f64>> = ts
                .iter()
                .map(|&t| Vector3::new(amp * t, 0.0, 0.0))
                .collect();
            let mean = positions.iter().sum::<Vector3<f64>>() / 10.0;
            positions.iter().map(|p| (p - mean).norm()).sum::<f64>() / 10.0
        };
        assert_relative_eq!(stat(2.0), 2.0 * stat(1.0), epsilon = 1e-12);
    }

    #[test]
    fn dynamic_densify_counts_and_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        // N=10 with one clear winner -> one duplicate
        let mut g = random_set(&mut rng, 10);
        let mut stats = vec![0.0; 10];
        stats[9] = 5.0;
        let added = densify_dynamic(&mut g, &stats, &mut rng).unwrap();
        assert_eq!(added, 1);
        assert_eq!(g.len(), 11);
        // the duplicate inherits point 9's non-positional parameters
        assert_eq!(g.colors_raw[10], g.colors_raw[9]);

        // all-equal stats: tie-break by index picks the first ceil(N/10)
        let mut g = random_set(&mut rng, 25);
        let added = densify_dynamic(&mut g, &vec![1.0; 25], &mut rng).unwrap();
        assert_eq!(added, 3);
        assert_eq!(g.len(), 28);
        assert_eq!(g.positions.len(), g.opacity_raw.len());

        // N=100 -> 110
        let mut g = random_set(&mut rng, 100);
        let stats: Vec<f64> = (0..100).map(|i| i as f64).collect();
        densify_dynamic(&mut g, &stats, &mut rng).unwrap();
        assert_eq!(g.len(), 110);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut g = random_set(&mut rng, 5);
        assert!(densify_dynamic(&mut g, &vec![0.0; 5], &mut rng).is_err());
    }

    #[test]
    fn canonical_densify_doubles_and_compounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut g = random_set(&mut rng, 500);
        densify_canonical(&mut g, &mut rng);
        assert_eq!(g.len(), 1000);
        densify_canonical(&mut g, &mut rng);
        assert_eq!(g.len(), 2000);
    }

    #[test]
    fn jitter_stays_within_half_scale_of_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut g = random_set(&mut rng, 50);
        let parents = g.positions.clone();
        let scales = g.log_scales.clone();
        densify_canonical(&mut g, &mut rng);
        for i in 0..50 {
            let child = g.positions[50 + i];
            for k in 0..3 {
                assert!((child[k] - parents[i][k]).abs() <= 0.5 * scales[i][k].exp() + 1e-12);
            }
        }
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(estimate_final_count(1234, 0, 0), 1234);
        assert_eq!(estimate_final_count(1000, 2, 0), 4000);
        assert_eq!(estimate_final_count(1000, 0, 1), 1100);
    }

    #[test]
    fn estimator_matches_simulated_schedule_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for n_c in 0..=2u32 {
            for n_d in 0..=3u32 {
                let mut g = random_set(&mut rng, 137);
                for _ in 0..n_c {
                    densify_canonical(&mut g, &mut rng);
                }
                for _ in 0..n_d {
                    let stats: Vec<f64> = (0..g.len()).map(|i| (i % 7) as f64).collect();
                    densify_dynamic(&mut g, &stats, &mut rng).unwrap();
                }
                assert_eq!(
                    g.len(),
                    estimate_final_count(137, n_c, n_d),
                    "schedule n_c={n_c} n_d={n_d}"
                );
            }
        }
    }

    #[test]
    fn pruning_removes_only_transparent_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut g = random_set(&mut rng, 30);
        g.opacity_raw[3] = crate::math::logit(0.001);
        g.opacity_raw[17] = crate::math::logit(0.0001);
        let removed = prune_low_opacity(&mut g, PRUNE_OPACITY_THRESHOLD);
        assert_eq!(removed, 2);
        assert_eq!(g.len(), 28);
        assert!(g
            .opacity_raw
            .iter()
            .all(|&raw| crate::math::sigmoid(raw) >= PRUNE_OPACITY_THRESHOLD));
    }

    #[test]
    fn legacy_rule_clones_by_gradient_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let mut g = random_set(&mut rng, 20);
        let mut norms = vec![1e-5; 20];
        norms[2] = 1e-3;
        norms[7] = 3e-4;
        let added = densify_legacy(&mut g, &norms, LEGACY_GRAD_THRESHOLD, &mut rng).unwrap();
        assert_eq!(added, 2);
        assert_eq!(g.len(), 22);
    }
}

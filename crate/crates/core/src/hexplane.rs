//! Hex-plane deformation fields: six 2-D feature grids (XY, XZ, YZ, XT, YT,
//! ZT) whose bilinearly sampled features multiply elementwise, followed by a
//! shallow decoder producing per-point parameter deltas.
//!
//! The foreground variant decodes (dx, dr, dc); the background variant owns a
//! single dx head, so rotation/color deltas structurally cannot exist for it.

use crate::error::{Error, Result};
use crate::gaussians::{ParamGrads, RenderParams, SetTag};
use nalgebra::Vector3;
use rand::Rng;

pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

// coordinate-pair index per plane, 0..2 = normalized xyz, 3 = t
const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (3, 0), (3, 1), (3, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldVariant {
    Foreground,
    Background,
    /// Single field over a merged foreground+background set (ablation).
    Unified,
}

impl FieldVariant {
    pub fn accepts(&self, tag: SetTag) -> bool {
        match self {
            FieldVariant::Foreground => tag == SetTag::Foreground,
            FieldVariant::Background => tag == SetTag::Background,
            FieldVariant::Unified => true,
        }
    }

    pub(crate) fn head_dims(&self) -> Vec<usize> {
        match self {
            FieldVariant::Foreground | FieldVariant::Unified => vec![3, 4, 3],
            FieldVariant::Background => vec![3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub spatial_resolution: usize,
    pub temporal_resolution: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            spatial_resolution: 64,
            temporal_resolution: 32,
            channels: 16,
            hidden: 64,
        }
    }
}

/// One 2-D feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// rows * cols * channels, row-major.
    pub values: Vec<f64>,
}

impl PlaneGrid {
    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        assert!(rows >= 2 && cols >= 2);
        PlaneGrid {
            rows,
            cols,
            channels,
            values: vec![value; rows * cols * channels],
        }
    }

    fn at(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.values[(i * self.cols + j) * self.channels + ch]
    }
}

/// Bilinear lookup state for one plane, kept for the adjoint.
#[derive(Debug, Clone)]
pub struct PlaneSample {
    pub i0: usize,
    pub j0: usize,
    pub fu: f64,
    pub fv: f64,
    /// Sampled L-vector for this plane.
    pub feature: Vec<f64>,
}

fn bilinear_sample(grid: &PlaneGrid, u: f64, v: f64) -> PlaneSample {
    let gu = u.clamp(0.0, 1.0) * (grid.rows - 1) as f64;
    let gv = v.clamp(0.0, 1.0) * (grid.cols - 1) as f64;
    let i0 = (gu.floor() as usize).min(grid.rows - 2);
    let j0 = (gv.floor() as usize).min(grid.cols - 2);
    let fu = gu - i0 as f64;
    let fv = gv - j0 as f64;
    let mut feature = Vec::with_capacity(grid.channels);
    for ch in 0..grid.channels {
        let v00 = grid.at(i0, j0, ch);
        let v01 = grid.at(i0, j0 + 1, ch);
        let v10 = grid.at(i0 + 1, j0, ch);
        let v11 = grid.at(i0 + 1, j0 + 1, ch);
        feature.push(
            (1.0 - fu) * (1.0 - fv) * v00
                + (1.0 - fu) * fv * v01
                + fu * (1.0 - fv) * v10
                + fu * fv * v11,
        );
    }
    PlaneSample {
        i0,
        j0,
        fu,
        fv,
        feature,
    }
}

/// Adjoint of `bilinear_sample`: accumulates grid gradients and returns
/// (d_u, d_v) in normalized [0,1] plane coordinates.
fn bilinear_sample_backward(
    grid: &PlaneGrid,
    sample: &PlaneSample,
    d_feature: &[f64],
    grid_grad: &mut [f64],
) -> (f64, f64) {
    let (i0, j0, fu, fv) = (sample.i0, sample.j0, sample.fu, sample.fv);
    let mut du = 0.0;
    let mut dv = 0.0;
    for ch in 0..grid.channels {
        let g = d_feature[ch];
        let idx = |i: usize, j: usize| (i * grid.cols + j) * grid.channels + ch;
        grid_grad[idx(i0, j0)] += (1.0 - fu) * (1.0 - fv) * g;
        grid_grad[idx(i0, j0 + 1)] += (1.0 - fu) * fv * g;
        grid_grad[idx(i0 + 1, j0)] += fu * (1.0 - fv) * g;
        grid_grad[idx(i0 + 1, j0 + 1)] += fu * fv * g;
        let v00 = grid.at(i0, j0, ch);
        let v01 = grid.at(i0, j0 + 1, ch);
        let v10 = grid.at(i0 + 1, j0, ch);
        let v11 = grid.at(i0 + 1, j0 + 1, ch);
        du += g * ((1.0 - fv) * (v10 - v00) + fv * (v11 - v01));
        dv += g * ((1.0 - fu) * (v01 - v00) + fu * (v11 - v10));
    }
    (du * (grid.rows - 1) as f64, dv * (grid.cols - 1) as f64)
}

/// Dense layer, weights row-major (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        LinearLayer {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            b: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            out[o] += row.iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    /// Accumulates dW/db into the given buffers and returns dL/dx.
    pub fn backward(
        &self,
        x: &[f64],
        d_out: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = d_out[o];
            db[o] += g;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Six feature planes, a shared hidden trunk, and one linear head per delta.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub planes: Vec<PlaneGrid>,
    pub trunk: LinearLayer,
    pub heads: Vec<LinearLayer>,
    pub bbox_lo: Vector3<f64>,
    pub bbox_hi: Vector3<f64>,
    pub variant: FieldVariant,
}

impl DeformationField {
    /// Spatial planes start at 1.0 (the multiplicative identity); the
    /// spatio-temporal planes get 1.0 plus small noise. Head output layers
    /// are zero so the field starts as the identity deformation.
    pub fn new(
        variant: FieldVariant,
        bbox_lo: Vector3<f64>,
        bbox_hi: Vector3<f64>,
        config: &FieldConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (s, t, l) = (
            config.spatial_resolution,
            config.temporal_resolution,
            config.channels,
        );
        let mut planes = Vec::with_capacity(6);
        for idx in 0..6 {
            let (rows, cols) = if idx < 3 { (s, s) } else { (t, s) };
            let mut grid = PlaneGrid::filled(rows, cols, l, 1.0);
            if idx >= 3 {
                for v in grid.values.iter_mut() {
                    *v += rng.gen_range(-1e-2..1e-2);
                }
            }
            planes.push(grid);
        }
        let trunk = LinearLayer::uniform(l, config.hidden, rng);
        let heads = variant
            .head_dims()
            .iter()
            .map(|&d| LinearLayer::zeros(config.hidden, d))
            .collect();
        DeformationField {
            planes,
            trunk,
            heads,
            bbox_lo,
            bbox_hi,
            variant,
        }
    }

    pub fn channels(&self) -> usize {
        self.planes[0].channels
    }

    /// Total trainable scalar count: 6*J*K*L plus decoder weights.
    pub fn num_parameters(&self) -> usize {
        self.planes.iter().map(|p| p.values.len()).sum::<usize>()
            + self.trunk.w.len()
            + self.trunk.b.len()
            + self
                .heads
                .iter()
                .map(|h| h.w.len() + h.b.len())
                .sum::<usize>()
    }

    fn normalize(&self, x: &Vector3<f64>) -> [f64; 4] {
        let mut q = [0.0; 4];
        for k in 0..3 {
            let span = self.bbox_hi[k] - self.bbox_lo[k];
            q[k] = ((x[k] - self.bbox_lo[k]) / span).clamp(0.0, 1.0);
        }
        q
    }

    /// Sample the multiplied hex-plane feature at (x, t). Out-of-box points
    /// clamp to the box surface.
    pub fn sample_feature(&self, x: &Vector3<f64>, t: f64) -> (Vec<f64>, FeatureCache) {
        let mut q = self.normalize(x);
        q[3] = t.clamp(0.0, 1.0);
        let l = self.channels();
        let mut samples = Vec::with_capacity(6);
        let mut feature = vec![1.0; l];
        for (pi, plane) in self.planes.iter().enumerate() {
            let (au, av) = PLANE_AXES[pi];
            let s = bilinear_sample(plane, q[au], q[av]);
            for ch in 0..l {
                feature[ch] *= s.feature[ch];
            }
            samples.push(s);
        }
        (feature, FeatureCache { q, samples })
    }

    /// Adjoint of `sample_feature`. Accumulates plane gradients and returns
    /// dL/dx (world space), zero along clamped axes.
    pub fn sample_feature_backward(
        &self,
        x: &Vector3<f64>,
        cache: &FeatureCache,
        d_feature: &[f64],
        plane_grads: &mut [Vec<f64>],
    ) -> Vector3<f64> {
        let l = self.channels();
        // prefix/suffix products so each plane sees the product of the others
        let mut prefix = vec![vec![1.0; l]; 7];
        for pi in 0..6 {
            for ch in 0..l {
                prefix[pi + 1][ch] = prefix[pi][ch] * cache.samples[pi].feature[ch];
            }
        }
        let mut suffix = vec![1.0; l];
        let mut dq = [0.0; 4];
        for pi in (0..6).rev() {
            let mut d_plane_feature = vec![0.0; l];
            for ch in 0..l {
                d_plane_feature[ch] = d_feature[ch] * prefix[pi][ch] * suffix[ch];
            }
            let (du, dv) = bilinear_sample_backward(
                &self.planes[pi],
                &cache.samples[pi],
                &d_plane_feature,
                &mut plane_grads[pi],
            );
            let (au, av) = PLANE_AXES[pi];
            dq[au] += du;
            dq[av] += dv;
            for ch in 0..l {
                suffix[ch] *= cache.samples[pi].feature[ch];
            }
        }
        let mut dx = Vector3::zeros();
        for k in 0..3 {
            let span = self.bbox_hi[k] - self.bbox_lo[k];
            let raw = (x[k] - self.bbox_lo[k]) / span;
            if (0.0..=1.0).contains(&raw) {
                dx[k] = dq[k] / span;
            }
        }
        dx
    }

    /// Deform realized parameters at time t. Foreground/unified heads apply
    /// (dx, dr, dc); the background variant applies dx only.
    pub fn deform(
        &self,
        params: &RenderParams,
        tag: SetTag,
        t: f64,
    ) -> Result<(RenderParams, DeformCache)> {
        if !self.variant.accepts(tag) {
            return Err(Error::Precondition(format!(
                "deformation field variant {:?} cannot deform a {:?} set",
                self.variant, tag
            )));
        }
        let n = params.len();
        let mut out = params.clone();
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let (feature, fcache) = self.sample_feature(&params.positions[i], t);
            let pre = self.trunk.forward(&feature);
            let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mut clamp_mask = [false; 3];
            let dx = self.heads[0].forward(&hidden);
            out.positions[i] += Vector3::new(dx[0], dx[1], dx[2]);
            if self.heads.len() > 1 {
                let dr = self.heads[1].forward(&hidden);
                for k in 0..4 {
                    out.rotations[i][k] += dr[k];
                }
                let dc = self.heads[2].forward(&hidden);
                for k in 0..3 {
                    let c = params.colors[i][k] + dc[k];
                    clamp_mask[k] = !(0.0..=1.0).contains(&c);
                    out.colors[i][k] = c.clamp(0.0, 1.0);
                }
            }
            points.push(PointCache {
                feature,
                fcache,
                pre,
                hidden,
                clamp_mask,
            });
        }
        Ok((out, DeformCache { t, points }))
    }

    /// Adjoint of `deform`: gradients w.r.t. the deformed parameters become
    /// gradients w.r.t. the canonical parameters plus field gradients.
    pub fn deform_backward(
        &self,
        params: &RenderParams,
        cache: &DeformCache,
        d_deformed: &ParamGrads,
    ) -> (ParamGrads, FieldGrads) {
        let n = params.len();
        assert_eq!(d_deformed.len(), n);
        let mut d_canon = d_deformed.clone();
        let mut fg = FieldGrads::zeros(self);
        for i in 0..n {
            let pc = &cache.points[i];
            // collect head output grads
            let mut d_hidden = vec![0.0; self.trunk.out_dim];
            let d_dx = d_deformed.positions[i];
            let (hw0, hb0) = &mut fg.heads[0];
            let dxh = self.heads[0].backward(&pc.hidden, d_dx.as_slice(), hw0, hb0);
            for (a, b) in d_hidden.iter_mut().zip(dxh.iter()) {
                *a += b;
            }
            if self.heads.len() > 1 {
                let d_dr = d_deformed.rotations[i];
                let (hw1, hb1) = &mut fg.heads[1];
                let drh = self.heads[1].backward(&pc.hidden, &d_dr, hw1, hb1);
                for (a, b) in d_hidden.iter_mut().zip(drh.iter()) {
                    *a += b;
                }
                let mut d_dc = [0.0; 3];
                for k in 0..3 {
                    d_dc[k] = if pc.clamp_mask[k] {
                        0.0
                    } else {
                        d_deformed.colors[i][k]
                    };
                    d_canon.colors[i][k] = d_dc[k];
                }
                let (hw2, hb2) = &mut fg.heads[2];
                let dch = self.heads[2].backward(&pc.hidden, &d_dc, hw2, hb2);
                for (a, b) in d_hidden.iter_mut().zip(dch.iter()) {
                    *a += b;
                }
            }
            // relu
            let d_pre: Vec<f64> = d_hidden
                .iter()
                .zip(pc.pre.iter())
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            let d_feature =
                self.trunk
                    .backward(&pc.feature, &d_pre, &mut fg.trunk_w, &mut fg.trunk_b);
            let dx_indirect = self.sample_feature_backward(
                &params.positions[i],
                &pc.fcache,
                &d_feature,
                &mut fg.planes,
            );
            d_canon.positions[i] += dx_indirect;
        }
        (d_canon, fg)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub q: [f64; 4],
    pub samples: Vec<PlaneSample>,
}

#[derive(Debug, Clone)]
struct PointCache {
    feature: Vec<f64>,
    fcache: FeatureCache,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    clamp_mask: [bool; 3],
}

#[derive(Debug, Clone)]
pub struct DeformCache {
    pub t: f64,
    points: Vec<PointCache>,
}

/// Gradient buffers matching a `DeformationField`.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub planes: Vec<Vec<f64>>,
    pub trunk_w: Vec<f64>,
    pub trunk_b: Vec<f64>,
    pub heads: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FieldGrads {
    pub fn zeros(field: &DeformationField) -> Self {
        FieldGrads {
            planes: field.planes.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            trunk_w: vec![0.0; field.trunk.w.len()],
            trunk_b: vec![0.0; field.trunk.b.len()],
            heads: field
                .heads
                .iter()
                .map(|h| (vec![0.0; h.w.len()], vec![0.0; h.b.len()]))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{GaussianSet, SetTag};
    use crate::scene_io::PointCloud;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            spatial_resolution: 4,
            temporal_resolution: 3,
            channels: 4,
            hidden: 8,
        }
    }

    fn unit_box_field(variant: FieldVariant, seed: u64) -> DeformationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DeformationField::new(
            variant,
            Vector3::zeros(),
            Vector3::repeat(1.0),
            &small_config(),
            &mut rng,
        )
    }

    #[test]
    fn all_ones_grids_give_unit_feature() {
        let mut field = unit_box_field(FieldVariant::Foreground, 1);
        for p in field.planes.iter_mut() {
            for v in p.values.iter_mut() {
                *v = 1.0;
            }
        }
        let (f, _) = field.sample_feature(&Vector3::new(0.3, 0.7, 0.2), 0.5);
        for v in f {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_plane_scales_product() {
        let mut field = unit_box_field(FieldVariant::Foreground, 2);
        for p in field.planes.iter_mut() {
            for v in p.values.iter_mut() {
                *v = 1.0;
            }
        }
        for v in field.planes[2].values.iter_mut() {
            *v = 2.0;
        }
        let (f, _) = field.sample_feature(&Vector3::new(0.5, 0.1, 0.9), 0.25);
        for v in f {
            assert_relative_eq!(v, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_node_matches_brute_force_interpolation() {
        // independent bilinear oracle over all six planes at an exact node
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut field = unit_box_field(FieldVariant::Foreground, 3);
        for p in field.planes.iter_mut() {
            for v in p.values.iter_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
        }
        // node (1,2,1) of a 4^3 spatial lattice, t at node 1 of 3
        let s = 3.0; // rows-1 for spatial
        let x = Vector3::new(1.0 / s, 2.0 / s, 1.0 / s);
        let t = 1.0 / 2.0;
        let (f, _) = field.sample_feature(&x, t);
        let q = [x.x, x.y, x.z, t];
        for ch in 0..field.channels() {
            let mut expect = 1.0;
            for (pi, plane) in field.planes.iter().enumerate() {
                let (au, av) = PLANE_AXES[pi];
                // brute-force bilinear interpolation from raw corner values
                let gu = q[au] * (plane.rows - 1) as f64;
                let gv = q[av] * (plane.cols - 1) as f64;
                let i0 = (gu.floor() as usize).min(plane.rows - 2);
                let j0 = (gv.floor() as usize).min(plane.cols - 2);
                let (fu, fv) = (gu - i0 as f64, gv - j0 as f64);
                let val = plane.at(i0, j0, ch) * (1.0 - fu) * (1.0 - fv)
                    + plane.at(i0, j0 + 1, ch) * (1.0 - fu) * fv
                    + plane.at(i0 + 1, j0, ch) * fu * (1.0 - fv)
                    + plane.at(i0 + 1, j0 + 1, ch) * fu * fv;
                expect *= val;
            }
            assert_relative_eq!(f[ch], expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn out_of_box_points_clamp() {
        let field = unit_box_field(FieldVariant::Foreground, 4);
        let inside = Vector3::new(1.0, 0.5, 0.0);
        let outside = Vector3::new(3.0, 0.5, -2.0);
        let (a, _) = field.sample_feature(&inside, 0.4);
        let (b, _) = field.sample_feature(&outside, 0.4);
        assert_eq!(a, b);
    }

    fn toy_params(n: usize, seed: u64) -> RenderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = PointCloud {
            positions: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    )
                })
                .collect(),
            colors: (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                    )
                })
                .collect(),
        };
        GaussianSet::from_point_cloud(&pc, SetTag::Foreground).realize()
    }

    #[test]
    fn zero_heads_give_identity_deformation() {
        let field = unit_box_field(FieldVariant::Foreground, 5);
        let params = toy_params(6, 6);
        let (out, _) = field.deform(&params, SetTag::Foreground, 0.37).unwrap();
        assert_eq!(out, params);
    }

    #[test]
    fn variant_tag_mismatch_is_error() {
        let field = unit_box_field(FieldVariant::Background, 7);
        let params = toy_params(2, 8);
        assert!(field.deform(&params, SetTag::Foreground, 0.0).is_err());
        assert!(field.deform(&params, SetTag::Background, 0.0).is_ok());
    }

    #[test]
    fn background_variant_has_single_head() {
        let field = unit_box_field(FieldVariant::Background, 9);
        assert_eq!(field.heads.len(), 1);
        let fg_field = unit_box_field(FieldVariant::Foreground, 9);
        assert_eq!(fg_field.heads.len(), 3);
    }

    #[test]
    fn parameter_count_arithmetic() {
        let field = unit_box_field(FieldVariant::Foreground, 10);
        let c = small_config();
        let planes = 3 * c.spatial_resolution * c.spatial_resolution * c.channels
            + 3 * c.temporal_resolution * c.spatial_resolution * c.channels;
        let trunk = c.channels * c.hidden + c.hidden;
        let heads = (c.hidden * 3 + 3) + (c.hidden * 4 + 4) + (c.hidden * 3 + 3);
        assert_eq!(field.num_parameters(), planes + trunk + heads);
    }

    /// Randomize heads so the deformation is non-trivial, then check every
    /// gradient path against central finite differences.
    #[test]
    fn deform_backward_matches_finite_differences() {
        for variant in [FieldVariant::Foreground, FieldVariant::Background] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut field = unit_box_field(variant, 11);
            for h in field.heads.iter_mut() {
                for w in h.w.iter_mut() {
                    *w = rng.gen_range(-0.3..0.3);
                }
                for b in h.b.iter_mut() {
                    *b = rng.gen_range(-0.05..0.05);
                }
            }
            for p in field.planes.iter_mut() {
                for v in p.values.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
            let params = toy_params(4, 12);
            let tag = match variant {
                FieldVariant::Background => SetTag::Background,
                _ => SetTag::Foreground,
            };
            let t = 0.43;

            // scalar probe loss over the deformed parameters
            let wx: Vec<Vector3<f64>> = (0..4)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let wr: Vec<[f64; 4]> = (0..4)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let wc: Vec<Vector3<f64>> = (0..4)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let loss = |f: &DeformationField, p: &RenderParams| -> f64 {
                let (out, _) = f.deform(p, tag, t).unwrap();
                let mut l = 0.0;
                for i in 0..out.len() {
                    l += out.positions[i].dot(&wx[i]);
                    for k in 0..4 {
                        l += out.rotations[i][k] * wr[i][k];
                    }
                    l += out.colors[i].dot(&wc[i]);
                }
                l
            };

            let (out, cache) = field.deform(&params, tag, t).unwrap();
            let mut d_def = ParamGrads::zeros(4);
            for i in 0..4 {
                d_def.positions[i] = wx[i];
                d_def.rotations[i] = wr[i];
                d_def.colors[i] = wc[i];
            }
            let _ = out;
            let (d_canon, fgrads) = field.deform_backward(&params, &cache, &d_def);

            let h = 1e-6;
            let check = |analytic: f64, fd: f64, what: &str| {
                let scale = analytic.abs().max(1e-2);
                assert!(
                    (analytic - fd).abs() / scale < 1e-3,
                    "{variant:?} {what}: analytic {analytic} vs fd {fd}"
                );
            };
            // positions (direct + indirect through plane sampling)
            for i in 0..4 {
                for k in 0..3 {
                    let mut pp = params.clone();
                    let mut pm = params.clone();
                    pp.positions[i][k] += h;
                    pm.positions[i][k] -= h;
                    check(
                        d_canon.positions[i][k],
                        (loss(&field, &pp) - loss(&field, &pm)) / (2.0 * h),
                        "position",
                    );
                }
            }
            // plane values (a scattering of entries)
            for pi in 0..6 {
                let step = (field.planes[pi].values.len() / 7).max(1);
                for vi in (0..field.planes[pi].values.len()).step_by(step) {
                    let mut fp = field.clone();
                    let mut fm = field.clone();
                    fp.planes[pi].values[vi] += h;
                    fm.planes[pi].values[vi] -= h;
                    let fd = (loss(&fp, &params) - loss(&fm, &params)) / (2.0 * h);
                    if fgrads.planes[pi][vi].abs() < 1e-9 && fd.abs() < 1e-6 {
                        continue;
                    }
                    check(fgrads.planes[pi][vi], fd, "plane value");
                }
            }
            // decoder weights
            for wi in (0..field.trunk.w.len()).step_by(11) {
                let mut fp = field.clone();
                let mut fm = field.clone();
                fp.trunk.w[wi] += h;
                fm.trunk.w[wi] -= h;
                check(
                    fgrads.trunk_w[wi],
                    (loss(&fp, &params) - loss(&fm, &params)) / (2.0 * h),
                    "trunk weight",
                );
            }
            for hi in 0..field.heads.len() {
                for wi in (0..field.heads[hi].w.len()).step_by(13) {
                    let mut fp = field.clone();
                    let mut fm = field.clone();
                    fp.heads[hi].w[wi] += h;
                    fm.heads[hi].w[wi] -= h;
                    check(
                        fgrads.heads[hi].0[wi],
                        (loss(&fp, &params) - loss(&fm, &params)) / (2.0 * h),
                        "head weight",
                    );
                }
            }
        }
    }
}

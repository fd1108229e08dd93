//! Gaussian point parameterization: raw (unconstrained) storage, realized
//! rendering parameters, covariance construction and screen-space projection,
//! and the temporal opacity curve. Every forward op here has a matching
//! adjoint used by the rasterizer backward pass.

use crate::error::{Error, Result};
use crate::math::{
    logit, quat_normalize, quat_normalize_backward, quat_to_rotation, quat_to_rotation_backward,
    sigmoid, sigmoid_grad_from_value,
};
use crate::scene_io::{Camera, PointCloud};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

/// Screen-space dilation added to the diagonal of every projected covariance.
pub const COV2D_DILATION: f64 = 0.3;
/// Per-splat alpha ceiling.
pub const ALPHA_CLAMP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetTag {
    Foreground,
    Background,
}

/// Temporal opacity form. `Squared` is the default sigma(t) = h exp(-w^2 |t-mu|^2);
/// `Legacy` is the unsquared ablation sigma(t) = h exp(w |t-mu|^2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpacityForm {
    Squared,
    Legacy,
}

// ---------------------------------------------------------------------------
// parameter storage

/// Columnar store of raw (unconstrained-domain) point parameters.
///
/// Scales live in log domain, colors and peak opacity behind a logistic
/// squash, so optimizer steps cannot leave the valid ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    /// Quaternions (w, x, y, z); normalized on use.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Pre-squash color; realized color = sigmoid(raw).
    pub colors_raw: Vec<Vector3<f64>>,
    /// Pre-squash peak opacity h; realized h = sigmoid(raw).
    pub opacity_raw: Vec<f64>,
    /// Bandwidth omega, unconstrained.
    pub bandwidth: Vec<f64>,
    /// Temporal center mu, clamped to [0,1] after optimizer steps.
    pub temporal_center: Vec<f64>,
    pub tag: SetTag,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Initialize from a point cloud: identity rotations, scales from local
    /// point spacing, h = 0.1, omega = 0 (time-invariant), mu = 0.5.
    pub fn from_point_cloud(pc: &PointCloud, tag: SetTag) -> Self {
        let n = pc.len();
        let scales = initial_log_scales(&pc.positions);
        GaussianSet {
            positions: pc.positions.clone(),
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
            log_scales: scales,
            colors_raw: pc
                .colors
                .iter()
                .map(|c| Vector3::new(logit(c.x), logit(c.y), logit(c.z)))
                .collect(),
            opacity_raw: vec![logit(0.1); n],
            bandwidth: vec![0.0; n],
            temporal_center: vec![0.5; n],
            tag,
        }
    }

    /// Realize rendering-domain parameters. Rotations stay raw (the renderer
    /// normalizes); scales stay in log domain (covariance exponentiates).
    pub fn realize(&self) -> RenderParams {
        RenderParams {
            positions: self.positions.clone(),
            rotations: self.rotations.clone(),
            log_scales: self.log_scales.clone(),
            colors: self
                .colors_raw
                .iter()
                .map(|c| Vector3::new(sigmoid(c.x), sigmoid(c.y), sigmoid(c.z)))
                .collect(),
            peak_opacity: self.opacity_raw.iter().map(|&h| sigmoid(h)).collect(),
            bandwidth: self.bandwidth.clone(),
            temporal_center: self.temporal_center.clone(),
        }
    }

    /// Chain realized-domain gradients back to raw storage domains.
    pub fn raw_grads(&self, g: &ParamGrads) -> ParamGrads {
        let mut out = g.clone();
        for i in 0..self.len() {
            for k in 0..3 {
                let c = sigmoid(self.colors_raw[i][k]);
                out.colors[i][k] = g.colors[i][k] * sigmoid_grad_from_value(c);
            }
            let h = sigmoid(self.opacity_raw[i]);
            out.peak_opacity[i] = g.peak_opacity[i] * sigmoid_grad_from_value(h);
        }
        out
    }
}

fn initial_log_scales(positions: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = positions.len();
    if n == 1 {
        return vec![Vector3::repeat(0.0_f64.max(-2.3))];
    }
    let (lo, hi) = crate::math::bounding_box(positions);
    let extent = (hi - lo).norm().max(1e-6);
    if n > 20_000 {
        // uniform spacing heuristic for large clouds
        let s = (extent / (n as f64).cbrt()).max(1e-6).ln();
        return vec![Vector3::repeat(s); n];
    }
    use rayon::prelude::*;
    positions
        .par_iter()
        .map(|p| {
            let mut best = [f64::INFINITY; 3];
            for q in positions {
                let d2 = (p - q).norm_squared();
                if d2 == 0.0 {
                    continue;
                }
                if d2 < best[2] {
                    best[2] = d2;
                    if best[2] < best[1] {
                        best.swap(1, 2);
                    }
                    if best[1] < best[0] {
                        best.swap(0, 1);
                    }
                }
            }
            let mean = best
                .iter()
                .filter(|d| d.is_finite())
                .map(|d| d.sqrt())
                .sum::<f64>()
                / best.iter().filter(|d| d.is_finite()).count().max(1) as f64;
            Vector3::repeat(mean.clamp(1e-6 * extent, 0.1 * extent).ln())
        })
        .collect()
}

/// Realized per-point parameters fed to the deformation field and renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Colors in [0,1].
    pub colors: Vec<Vector3<f64>>,
    /// Peak opacity h in (0,1).
    pub peak_opacity: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub temporal_center: Vec<f64>,
}

impl RenderParams {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn empty() -> Self {
        RenderParams {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            colors: Vec::new(),
            peak_opacity: Vec::new(),
            bandwidth: Vec::new(),
            temporal_center: Vec::new(),
        }
    }

    /// Concatenate two parameter sets (front set keeps its indices).
    pub fn concat(a: &RenderParams, b: &RenderParams) -> Self {
        let mut out = a.clone();
        out.positions.extend_from_slice(&b.positions);
        out.rotations.extend_from_slice(&b.rotations);
        out.log_scales.extend_from_slice(&b.log_scales);
        out.colors.extend_from_slice(&b.colors);
        out.peak_opacity.extend_from_slice(&b.peak_opacity);
        out.bandwidth.extend_from_slice(&b.bandwidth);
        out.temporal_center.extend_from_slice(&b.temporal_center);
        out
    }
}

/// Gradient buffers congruent in shape with `RenderParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub peak_opacity: Vec<f64>,
    pub bandwidth: Vec<f64>,
    pub temporal_center: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vector3::zeros(); n],
            colors: vec![Vector3::zeros(); n],
            peak_opacity: vec![0.0; n],
            bandwidth: vec![0.0; n],
            temporal_center: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Split merged-set gradients back into (front, back) halves.
    pub fn split_at(&self, n: usize) -> (ParamGrads, ParamGrads) {
        let take = |v: &Vec<Vector3<f64>>| (v[..n].to_vec(), v[n..].to_vec());
        let (pa, pb) = take(&self.positions);
        let (sa, sb) = take(&self.log_scales);
        let (ca, cb) = take(&self.colors);
        (
            ParamGrads {
                positions: pa,
                rotations: self.rotations[..n].to_vec(),
                log_scales: sa,
                colors: ca,
                peak_opacity: self.peak_opacity[..n].to_vec(),
                bandwidth: self.bandwidth[..n].to_vec(),
                temporal_center: self.temporal_center[..n].to_vec(),
            },
            ParamGrads {
                positions: pb,
                rotations: self.rotations[n..].to_vec(),
                log_scales: sb,
                colors: cb,
                peak_opacity: self.peak_opacity[n..].to_vec(),
                bandwidth: self.bandwidth[n..].to_vec(),
                temporal_center: self.temporal_center[n..].to_vec(),
            },
        )
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|q| q.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.peak_opacity.iter().all(|x| x.is_finite())
            && self.bandwidth.iter().all(|x| x.is_finite())
            && self.temporal_center.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// covariance

/// Sigma = R diag(exp(2s)) R^T from a (possibly unnormalized) quaternion and
/// log-scales.
pub fn build_covariance(q: &[f64; 4], log_s: &Vector3<f64>) -> Matrix3<f64> {
    let n = quat_normalize(q);
    let r = quat_to_rotation(&n);
    let d = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * log_s.x).exp(),
        (2.0 * log_s.y).exp(),
        (2.0 * log_s.z).exp(),
    ));
    r * d * r.transpose()
}

/// Adjoint of `build_covariance`: dL/dSigma -> (dL/dq, dL/dlog_s).
pub fn build_covariance_backward(
    q: &[f64; 4],
    log_s: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> ([f64; 4], Vector3<f64>) {
    let n = quat_normalize(q);
    let r = quat_to_rotation(&n);
    let diag = Vector3::new(
        (2.0 * log_s.x).exp(),
        (2.0 * log_s.y).exp(),
        (2.0 * log_s.z).exp(),
    );
    let d = Matrix3::from_diagonal(&diag);
    // L = sum(G .* R D R^T): dR = (G + G^T) R D, dD = R^T G R
    let d_rot = (d_cov + d_cov.transpose()) * r * d;
    let dd = r.transpose() * d_cov * r;
    let d_log_s = Vector3::new(
        dd[(0, 0)] * 2.0 * diag.x,
        dd[(1, 1)] * 2.0 * diag.y,
        dd[(2, 2)] * 2.0 * diag.z,
    );
    let dn = quat_to_rotation_backward(&n, &d_rot);
    let dq = quat_normalize_backward(q, &dn);
    (dq, d_log_s)
}

// ---------------------------------------------------------------------------
// screen-space projection

#[derive(Debug, Clone)]
pub struct ProjectedCov {
    pub cov2d: Matrix2<f64>,
    /// J * W, cached for the adjoint.
    pub m: Matrix2x3<f64>,
    pub x_cam: Vector3<f64>,
}

/// Sigma' = J W Sigma W^T J^T + dilation, with W the camera rotation.
/// Returns None when the point is out of frustum (splat skipped).
pub fn project_covariance(
    cam: &Camera,
    x: &Vector3<f64>,
    cov: &Matrix3<f64>,
) -> Option<ProjectedCov> {
    let x_cam = cam.world_to_camera(x);
    if x_cam.z <= crate::scene_io::NEAR_PLANE {
        return None;
    }
    let j = cam.projection_jacobian(&x_cam).ok()?;
    let m = j * cam.rotation;
    let mut cov2d = m * cov * m.transpose();
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;
    Some(ProjectedCov { cov2d, m, x_cam })
}

/// Adjoint of `project_covariance`: dL/dSigma' -> (dL/dSigma, dL/dx world).
pub fn project_covariance_backward(
    cam: &Camera,
    proj: &ProjectedCov,
    cov: &Matrix3<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let m = proj.m;
    let d_cov = m.transpose() * d_cov2d * m;
    // dM = (G + G^T) M Sigma; dJ = dM W^T
    let dm = (d_cov2d + d_cov2d.transpose()) * m * cov;
    let dj = dm * cam.rotation.transpose();
    let (xc, fx, fy) = (proj.x_cam, cam.fx, cam.fy);
    let (zx, z2) = (xc.z, xc.z * xc.z);
    let z3 = z2 * zx;
    // J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    let dxc = Vector3::new(
        dj[(0, 2)] * (-fx / z2),
        dj[(1, 2)] * (-fy / z2),
        dj[(0, 0)] * (-fx / z2)
            + dj[(1, 1)] * (-fy / z2)
            + dj[(0, 2)] * (2.0 * fx * xc.x / z3)
            + dj[(1, 2)] * (2.0 * fy * xc.y / z3),
    );
    let dx = cam.rotation.transpose() * dxc;
    (d_cov, dx)
}

// ---------------------------------------------------------------------------
// temporal opacity

pub fn temporal_opacity(h: f64, w: f64, mu: f64, t: f64, form: OpacityForm) -> f64 {
    let d2 = (t - mu) * (t - mu);
    match form {
        OpacityForm::Squared => h * (-w * w * d2).exp(),
        OpacityForm::Legacy => h * (w * d2).exp(),
    }
}

/// Adjoint of `temporal_opacity`: dL/dsigma -> (dL/dh, dL/dw, dL/dmu).
pub fn temporal_opacity_backward(
    h: f64,
    w: f64,
    mu: f64,
    t: f64,
    form: OpacityForm,
    d_sigma: f64,
) -> (f64, f64, f64) {
    let d = t - mu;
    let d2 = d * d;
    match form {
        OpacityForm::Squared => {
            let e = (-w * w * d2).exp();
            let dh = e * d_sigma;
            let dw = h * e * (-2.0 * w * d2) * d_sigma;
            let dmu = h * e * (2.0 * w * w * d) * d_sigma;
            (dh, dw, dmu)
        }
        OpacityForm::Legacy => {
            let e = (w * d2).exp();
            let dh = e * d_sigma;
            let dw = h * e * d2 * d_sigma;
            let dmu = h * e * (-2.0 * w * d) * d_sigma;
            (dh, dw, dmu)
        }
    }
}

// ---------------------------------------------------------------------------
// splat alpha

/// alpha = sigma_t * exp(-1/2 d^T Sigma'^-1 d), clamped to [0, 0.99].
pub fn splat_alpha(sigma_t: f64, cov2d: &Matrix2<f64>, d: &Vector2<f64>) -> Result<f64> {
    let inv = cov2d
        .try_inverse()
        .ok_or_else(|| Error::Precondition("singular 2-D covariance".into()))?;
    let m = (d.transpose() * inv * d)[(0, 0)];
    Ok((sigma_t * (-0.5 * m).exp()).min(ALPHA_CLAMP))
}

/// Adjoint of `splat_alpha` (zero when the clamp is active):
/// dL/dalpha -> (dL/dsigma_t, dL/dSigma', dL/dd).
pub fn splat_alpha_backward(
    sigma_t: f64,
    cov2d: &Matrix2<f64>,
    d: &Vector2<f64>,
    d_alpha: f64,
) -> Result<(f64, Matrix2<f64>, Vector2<f64>)> {
    let inv = cov2d
        .try_inverse()
        .ok_or_else(|| Error::Precondition("singular 2-D covariance".into()))?;
    let m = (d.transpose() * inv * d)[(0, 0)];
    let g = (-0.5 * m).exp();
    if sigma_t * g > ALPHA_CLAMP {
        return Ok((0.0, Matrix2::zeros(), Vector2::zeros()));
    }
    let d_sigma = g * d_alpha;
    let dm = -0.5 * sigma_t * g * d_alpha;
    let ad = inv * d;
    let dd = 2.0 * ad * dm;
    let d_cov = -(ad * ad.transpose()) * dm;
    Ok((d_sigma, d_cov, dd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    }

    #[test]
    fn covariance_identity_case() {
        let cov = build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::zeros());
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_anisotropic_scale() {
        let cov = build_covariance(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(2.0f64.ln(), 0.0, 0.0));
        assert_relative_eq!(
            cov,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_eigenvalues_equal_exp_2s() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let q = random_quat(&mut rng);
            let s = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let cov = build_covariance(&q, &s);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in eig.iter().zip(expect.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn covariance_quaternion_sign_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let nq = [-q[0], -q[1], -q[2], -q[3]];
            let s = Vector3::new(0.3, -0.2, 0.1);
            assert_eq!(build_covariance(&q, &s), build_covariance(&nq, &s));
        }
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let s = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let w = Matrix3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (dq, ds) = build_covariance_backward(&q, &s, &w);
            let f = |q: &[f64; 4], s: &Vector3<f64>| build_covariance(q, s).dot(&w);
            let h = 1e-5;
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                let fd = (f(&qp, &s) - f(&qm, &s)) / (2.0 * h);
                let scale = dq[k].abs().max(1e-3);
                assert!((fd - dq[k]).abs() / scale < 1e-4, "dq[{k}]");
            }
            for k in 0..3 {
                let mut sp = s;
                let mut sm = s;
                sp[k] += h;
                sm[k] -= h;
                let fd = (f(&q, &sp) - f(&q, &sm)) / (2.0 * h);
                let scale = ds[k].abs().max(1e-3);
                assert!((fd - ds[k]).abs() / scale < 1e-4, "ds[{k}]");
            }
        }
    }

    fn test_camera() -> Camera {
        Camera {
            id: 0,
            width: 64,
            height: 64,
            fx: 1.0,
            fy: 1.0,
            cx: 32.0,
            cy: 32.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[test]
    fn projected_covariance_identity_case() {
        let cam = test_camera();
        let p = project_covariance(&cam, &Vector3::new(0.0, 0.0, 1.0), &Matrix3::identity())
            .unwrap();
        assert_relative_eq!(
            p.cov2d,
            Matrix2::new(1.3, 0.0, 0.0, 1.3),
            epsilon = 1e-12
        );
    }

    #[test]
    fn projected_covariance_dilation_floor() {
        let cam = test_camera();
        let p = project_covariance(&cam, &Vector3::new(0.0, 0.0, 1.0), &Matrix3::zeros()).unwrap();
        assert_relative_eq!(p.cov2d, Matrix2::identity() * 0.3, epsilon = 1e-12);
    }

    #[test]
    fn projected_covariance_positive_definite_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cam = test_camera();
        cam.fx = 80.0;
        cam.fy = 90.0;
        for _ in 0..10_000 {
            let q = random_quat(&mut rng);
            let s = Vector3::new(
                rng.gen_range(-3.0..1.0),
                rng.gen_range(-3.0..1.0),
                rng.gen_range(-3.0..1.0),
            );
            let x = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..8.0),
            );
            let cov = build_covariance(&q, &s);
            let p = project_covariance(&cam, &x, &cov).unwrap();
            assert!(p.cov2d.determinant() > 0.0);
        }
    }

    #[test]
    fn projected_covariance_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let axis = Vector3::new(0.2, -0.4, 0.9);
        let rot = nalgebra::Rotation3::from_scaled_axis(axis * 0.7);
        let cam = Camera {
            id: 0,
            width: 64,
            height: 64,
            fx: 70.0,
            fy: 60.0,
            cx: 32.0,
            cy: 32.0,
            rotation: *rot.matrix(),
            translation: Vector3::new(0.1, -0.2, 0.3),
        };
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let s = Vector3::new(
                rng.gen_range(-1.0..0.0),
                rng.gen_range(-1.0..0.0),
                rng.gen_range(-1.0..0.0),
            );
            let cov = build_covariance(&q, &s);
            let xc = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(1.0..5.0),
            );
            let x = cam.rotation.transpose() * (xc - cam.translation);
            let w2 = Matrix2::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let proj = project_covariance(&cam, &x, &cov).unwrap();
            let (d_cov, dx) = project_covariance_backward(&cam, &proj, &cov, &w2);
            let f = |x: &Vector3<f64>, cov: &Matrix3<f64>| {
                project_covariance(&cam, x, cov).unwrap().cov2d.dot(&w2)
            };
            let h = 1e-5;
            for k in 0..3 {
                let mut dp = Vector3::zeros();
                dp[k] = h;
                let fd = (f(&(x + dp), &cov) - f(&(x - dp), &cov)) / (2.0 * h);
                let scale = dx[k].abs().max(1e-2);
                assert!((fd - dx[k]).abs() / scale < 1e-3, "dx[{k}]");
            }
            for r in 0..3 {
                for c in 0..3 {
                    let mut cp = cov;
                    let mut cm = cov;
                    cp[(r, c)] += h;
                    cm[(r, c)] -= h;
                    let fd = (f(&x, &cp) - f(&x, &cm)) / (2.0 * h);
                    let scale = d_cov[(r, c)].abs().max(1e-2);
                    assert!((fd - d_cov[(r, c)]).abs() / scale < 1e-3, "dcov[{r},{c}]");
                }
            }
        }
    }

    #[test]
    fn opacity_peaks_at_center() {
        assert_relative_eq!(
            temporal_opacity(0.8, 3.7, 0.4, 0.4, OpacityForm::Squared),
            0.8
        );
    }

    #[test]
    fn opacity_zero_bandwidth_is_constant() {
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert_relative_eq!(temporal_opacity(1.0, 0.0, 0.5, t, OpacityForm::Squared), 1.0);
        }
    }

    #[test]
    fn opacity_direct_evaluation() {
        let v = temporal_opacity(1.0, 2.0, 0.0, 0.5, OpacityForm::Squared);
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn opacity_symmetric_about_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let h = rng.gen_range(0.1..1.0);
            let w = rng.gen_range(-3.0..3.0);
            let mu = rng.gen_range(0.2..0.8);
            let d = rng.gen_range(0.0..0.2);
            let a = temporal_opacity(h, w, mu + d, mu, OpacityForm::Squared);
            let b = temporal_opacity(h, w, mu - d, mu, OpacityForm::Squared);
            // note: symmetric in t about mu
            let a2 = temporal_opacity(h, w, mu, mu + d, OpacityForm::Squared);
            let b2 = temporal_opacity(h, w, mu, mu - d, OpacityForm::Squared);
            assert!((a - b).abs() < 1e-12 && (a2 - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn legacy_opacity_grows_and_decays() {
        // legacy form: omega < 0 decays, omega > 0 grows past h
        let decay = temporal_opacity(1.0, -2.0, 0.0, 0.5, OpacityForm::Legacy);
        let grow = temporal_opacity(1.0, 2.0, 0.0, 0.5, OpacityForm::Legacy);
        assert!(decay < 1.0);
        assert!(grow > 1.0);
        // default form never exceeds h
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let h = rng.gen_range(0.0..1.0);
            let v = temporal_opacity(
                h,
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                OpacityForm::Squared,
            );
            assert!(v <= h + 1e-15);
        }
    }

    #[test]
    fn opacity_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for form in [OpacityForm::Squared, OpacityForm::Legacy] {
            for _ in 0..20 {
                let h = rng.gen_range(0.1..0.9);
                let w = rng.gen_range(-2.0..2.0);
                let mu = rng.gen_range(0.1..0.9);
                let t = rng.gen_range(0.0..1.0);
                let (dh, dw, dmu) = temporal_opacity_backward(h, w, mu, t, form, 1.0);
                let step = 1e-6;
                let fd_h = (temporal_opacity(h + step, w, mu, t, form)
                    - temporal_opacity(h - step, w, mu, t, form))
                    / (2.0 * step);
                let fd_w = (temporal_opacity(h, w + step, mu, t, form)
                    - temporal_opacity(h, w - step, mu, t, form))
                    / (2.0 * step);
                let fd_mu = (temporal_opacity(h, w, mu + step, t, form)
                    - temporal_opacity(h, w, mu - step, t, form))
                    / (2.0 * step);
                assert_relative_eq!(dh, fd_h, epsilon = 1e-6, max_relative = 1e-5);
                assert_relative_eq!(dw, fd_w, epsilon = 1e-6, max_relative = 1e-5);
                assert_relative_eq!(dmu, fd_mu, epsilon = 1e-6, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn alpha_at_center_is_clamped_sigma() {
        let cov = Matrix2::identity();
        let a = splat_alpha(0.5, &cov, &Vector2::zeros()).unwrap();
        assert_relative_eq!(a, 0.5);
        let a = splat_alpha(1.0, &cov, &Vector2::zeros()).unwrap();
        assert_relative_eq!(a, 0.99);
    }

    #[test]
    fn alpha_direct_evaluation() {
        let a = splat_alpha(1.0, &Matrix2::identity(), &Vector2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(a, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn alpha_monotone_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            // random SPD 2x2
            let a: f64 = rng.gen_range(0.5..3.0);
            let c: f64 = rng.gen_range(0.5..3.0);
            let b = rng.gen_range(-0.4..0.4) * (a * c).sqrt();
            let cov = Matrix2::new(a, b, b, c);
            let dir = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let mut prev = f64::INFINITY;
            for step in 0..20 {
                let d = dir * (step as f64 * 0.3);
                let alpha = splat_alpha(0.9, &cov, &d).unwrap();
                assert!(alpha <= prev + 1e-15);
                prev = alpha;
            }
        }
    }

    #[test]
    fn alpha_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.5..3.0);
            let c: f64 = rng.gen_range(0.5..3.0);
            let b = rng.gen_range(-0.4..0.4) * (a * c).sqrt();
            let cov = Matrix2::new(a, b, b, c);
            let d = Vector2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let sigma = rng.gen_range(0.1..0.8);
            let (d_sigma, d_cov, dd) = splat_alpha_backward(sigma, &cov, &d, 1.0).unwrap();
            let h = 1e-6;
            let fd_sigma = (splat_alpha(sigma + h, &cov, &d).unwrap()
                - splat_alpha(sigma - h, &cov, &d).unwrap())
                / (2.0 * h);
            assert_relative_eq!(d_sigma, fd_sigma, epsilon = 1e-6, max_relative = 1e-5);
            for k in 0..2 {
                let mut dp = d;
                let mut dm = d;
                dp[k] += h;
                dm[k] -= h;
                let fd = (splat_alpha(sigma, &cov, &dp).unwrap()
                    - splat_alpha(sigma, &cov, &dm).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(dd[k], fd, epsilon = 1e-6, max_relative = 1e-4);
            }
            for r in 0..2 {
                for cidx in 0..2 {
                    let mut cp = cov;
                    let mut cm = cov;
                    cp[(r, cidx)] += h;
                    cm[(r, cidx)] -= h;
                    let fd = (splat_alpha(sigma, &cp, &d).unwrap()
                        - splat_alpha(sigma, &cm, &d).unwrap())
                        / (2.0 * h);
                    assert_relative_eq!(d_cov[(r, cidx)], fd, epsilon = 1e-6, max_relative = 1e-4);
                }
            }
        }
    }

    #[test]
    fn realize_and_raw_grad_chain() {
        let pc = PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            colors: vec![Vector3::new(0.2, 0.5, 0.8), Vector3::new(0.9, 0.1, 0.4)],
        };
        let set = GaussianSet::from_point_cloud(&pc, SetTag::Foreground);
        let params = set.realize();
        for (c, want) in params.colors.iter().zip(pc.colors.iter()) {
            assert_relative_eq!(c, want, epsilon = 1e-7);
        }
        assert_relative_eq!(params.peak_opacity[0], 0.1, epsilon = 1e-7);
        // chain rule against finite difference of realize
        let mut g = ParamGrads::zeros(2);
        g.colors[0] = Vector3::new(1.0, 0.0, 0.0);
        g.peak_opacity[1] = 1.0;
        let raw = set.raw_grads(&g);
        let h = 1e-6;
        let mut set2 = set.clone();
        set2.colors_raw[0].x += h;
        let fd = (set2.realize().colors[0].x - params.colors[0].x) / h;
        assert_relative_eq!(raw.colors[0].x, fd, epsilon = 1e-5);
    }
}

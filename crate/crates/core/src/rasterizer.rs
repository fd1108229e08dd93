//! Differentiable forward rendering of Gaussian splats into RGB + alpha, and
//! the adjoint pass producing gradients for every point parameter.
//!
//! The production path bins splats into 16x16 pixel tiles, sorts per tile by
//! (depth, original index) and blends front-to-back with early termination.
//! `render_reference` is the brute-force oracle: global sort, every splat
//! evaluated at every pixel, no tiling, no termination.

use crate::error::{Error, Result};
use crate::gaussians::{
    build_covariance, build_covariance_backward, project_covariance,
    project_covariance_backward, temporal_opacity, temporal_opacity_backward, OpacityForm,
    ParamGrads, RenderParams, ALPHA_CLAMP,
};
use crate::math::sym2_max_eigenvalue;
use crate::scene_io::{Camera, ImageRgb};
use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Per-pixel alpha below this is skipped (same rule in the oracle).
    pub alpha_min: f64,
    /// Blending stops once transmittance drops below this.
    pub termination: f64,
    pub opacity_form: OpacityForm,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            tile_size: 16,
            alpha_min: 1e-5,
            termination: 1e-4,
            opacity_form: OpacityForm::Squared,
        }
    }
}

impl RenderOptions {
    /// Tile-binning radius multiplier on sqrt(max eigenvalue of Sigma').
    /// Chosen so any splat culled by the radius bound satisfies
    /// alpha < alpha_min at every culled pixel, which keeps the tiled render
    /// within the oracle-equivalence tolerance.
    pub fn radius_factor(&self) -> f64 {
        (2.0 * (1.0 / self.alpha_min).ln()).sqrt().max(3.0)
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index into the rendered parameter set.
    pub point: usize,
    pub center: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub cov_inv: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    /// Temporal opacity at the render time.
    pub sigma_t: f64,
    pub radius: f64,
}

/// Rendered image plus the state the backward pass needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: ImageRgb,
    /// H*W accumulated alpha in [0,1].
    pub alpha: Vec<f64>,
    pub splats: Vec<Splat2D>,
    /// Per-tile splat lists (indices into `splats`), depth sorted.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    pub time: f64,
}

pub type RenderGrads = ParamGrads;

fn prepare_splats(
    params: &RenderParams,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
) -> Vec<Splat2D> {
    let radius_factor = opts.radius_factor();
    let (w, h) = (cam.width as f64, cam.height as f64);
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let sigma_t = temporal_opacity(
                params.peak_opacity[i],
                params.bandwidth[i],
                params.temporal_center[i],
                t,
                opts.opacity_form,
            );
            if sigma_t < opts.alpha_min {
                return None;
            }
            let proj_point = cam.project_point(&params.positions[i]);
            if !proj_point.in_frustum {
                return None;
            }
            // cull centers well outside the frustum: the affine covariance
            // projection diverges for rays nearly perpendicular to the
            // optical axis and would smear such splats across the image
            let xc = cam.world_to_camera(&params.positions[i]);
            let lim_x = 1.3 * w / (2.0 * cam.fx);
            let lim_y = 1.3 * h / (2.0 * cam.fy);
            if (xc.x / xc.z).abs() > lim_x || (xc.y / xc.z).abs() > lim_y {
                return None;
            }
            let cov3d = build_covariance(&params.rotations[i], &params.log_scales[i]);
            let proj = project_covariance(cam, &params.positions[i], &cov3d)?;
            let cov2d = proj.cov2d;
            let cov_inv = cov2d.try_inverse()?;
            let radius = radius_factor
                * sym2_max_eigenvalue(cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]).sqrt();
            let center = Vector2::new(proj_point.u, proj_point.v);
            if center.x + radius < 0.0
                || center.x - radius > w
                || center.y + radius < 0.0
                || center.y - radius > h
            {
                return None;
            }
            Some(Splat2D {
                point: i,
                center,
                cov2d,
                cov_inv,
                depth: proj_point.depth,
                color: params.colors[i],
                sigma_t,
                radius,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn bin_tiles(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    tile_size: usize,
) -> (Vec<Vec<u32>>, usize, usize) {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.center.x - s.radius).floor().max(0.0) as usize) / tile_size;
        let y0 = ((s.center.y - s.radius).floor().max(0.0) as usize) / tile_size;
        let x1 = (((s.center.x + s.radius).ceil() as usize).min(width.saturating_sub(1)))
            / tile_size;
        let y1 = (((s.center.y + s.radius).ceil() as usize).min(height.saturating_sub(1)))
            / tile_size;
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    // depth sort, ties broken by original point index for determinism
    tiles.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth
                .partial_cmp(&sb.depth)
                .unwrap()
                .then(sa.point.cmp(&sb.point))
        });
    });
    (tiles, tiles_x, tiles_y)
}

#[inline]
fn eval_alpha(s: &Splat2D, px: f64, py: f64) -> (f64, f64, Vector2<f64>) {
    let d = Vector2::new(px - s.center.x, py - s.center.y);
    let m = s.cov_inv[(0, 0)] * d.x * d.x
        + 2.0 * s.cov_inv[(0, 1)] * d.x * d.y
        + s.cov_inv[(1, 1)] * d.y * d.y;
    let g = (-0.5 * m).exp();
    (s.sigma_t * g, g, d)
}

/// Tiled front-to-back alpha blending. An empty set renders black with zero
/// alpha. Two parameter sets are concatenated by the caller before rendering.
pub fn render(params: &RenderParams, cam: &Camera, t: f64, opts: &RenderOptions) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let splats = prepare_splats(params, cam, t, opts);
    let (tiles, tiles_x, tiles_y) = bin_tiles(&splats, width, height, opts.tile_size);
    let mut rgb = ImageRgb::zeros(width, height);
    let mut alpha = vec![0.0; width * height];

    let tile_results: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..tiles.len())
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let x_lo = tx * opts.tile_size;
            let y_lo = ty * opts.tile_size;
            let x_hi = (x_lo + opts.tile_size).min(width);
            let y_hi = (y_lo + opts.tile_size).min(height);
            let mut trgb = vec![0.0; (x_hi - x_lo) * (y_hi - y_lo) * 3];
            let mut talpha = vec![0.0; (x_hi - x_lo) * (y_hi - y_lo)];
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut color = Vector3::zeros();
                    let mut trans = 1.0;
                    for &si in &tiles[ti] {
                        let s = &splats[si as usize];
                        let (a, _, _) = eval_alpha(s, px, py);
                        if a < opts.alpha_min {
                            continue;
                        }
                        let a = a.min(ALPHA_CLAMP);
                        color += s.color * (a * trans);
                        trans *= 1.0 - a;
                        if trans < opts.termination {
                            break;
                        }
                    }
                    let li = (y - y_lo) * (x_hi - x_lo) + (x - x_lo);
                    trgb[li * 3] = color.x;
                    trgb[li * 3 + 1] = color.y;
                    trgb[li * 3 + 2] = color.z;
                    talpha[li] = 1.0 - trans;
                }
            }
            (ti, trgb, talpha)
        })
        .collect();

    for (ti, trgb, talpha) in tile_results {
        let (tx, ty) = (ti % tiles_x, ti / tiles_x);
        let x_lo = tx * opts.tile_size;
        let y_lo = ty * opts.tile_size;
        let x_hi = (x_lo + opts.tile_size).min(width);
        let y_hi = (y_lo + opts.tile_size).min(height);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let li = (y - y_lo) * (x_hi - x_lo) + (x - x_lo);
                let gi = y * width + x;
                rgb.data[gi * 3] = trgb[li * 3];
                rgb.data[gi * 3 + 1] = trgb[li * 3 + 1];
                rgb.data[gi * 3 + 2] = trgb[li * 3 + 2];
                alpha[gi] = talpha[li];
            }
        }
    }

    RenderOutput {
        rgb,
        alpha,
        splats,
        tiles,
        tiles_x,
        tiles_y,
        tile_size: opts.tile_size,
        time: t,
    }
}

/// Brute-force oracle: every splat evaluated at every pixel with a global
/// depth sort, no tiling, no early termination. Intended for tiny scenes.
pub fn render_reference(
    params: &RenderParams,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
) -> RenderOutput {
    let (width, height) = (cam.width, cam.height);
    let mut splats = prepare_splats(params, cam, t, opts);
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.point.cmp(&b.point)));
    let mut rgb = ImageRgb::zeros(width, height);
    let mut alpha = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = Vector3::zeros();
            let mut trans = 1.0f64;
            for s in &splats {
                let (a, _, _) = eval_alpha(s, px, py);
                if a < opts.alpha_min {
                    continue;
                }
                let a = a.min(ALPHA_CLAMP);
                color += s.color * (a * trans);
                trans *= 1.0 - a;
            }
            let gi = y * width + x;
            rgb.data[gi * 3] = color.x;
            rgb.data[gi * 3 + 1] = color.y;
            rgb.data[gi * 3 + 2] = color.z;
            alpha[gi] = 1.0 - trans;
        }
    }
    RenderOutput {
        rgb,
        alpha,
        splats,
        tiles: Vec::new(),
        tiles_x: 0,
        tiles_y: 0,
        tile_size: 0,
        time: t,
    }
}

#[derive(Clone, Copy)]
struct SplatAccum {
    d_color: Vector3<f64>,
    d_sigma: f64,
    d_center: Vector2<f64>,
    d_cov: Matrix2<f64>,
}

impl SplatAccum {
    fn zero() -> Self {
        SplatAccum {
            d_color: Vector3::zeros(),
            d_sigma: 0.0,
            d_center: Vector2::zeros(),
            d_cov: Matrix2::zeros(),
        }
    }
}

/// Adjoint of `render`: image-space gradients become gradients on every
/// contributing Gaussian's parameters (x, r, s, c, h, omega, mu).
/// Non-contributing Gaussians receive zero gradient.
pub fn render_backward(
    params: &RenderParams,
    cam: &Camera,
    out: &RenderOutput,
    d_rgb: &[f64],
    d_alpha: &[f64],
    opts: &RenderOptions,
) -> Result<RenderGrads> {
    let (width, height) = (cam.width, cam.height);
    if d_rgb.len() != width * height * 3 || d_alpha.len() != width * height {
        return Err(Error::Shape(format!(
            "render_backward: gradient buffers {}x{} do not match image {}x{}",
            d_rgb.len() / 3,
            d_alpha.len(),
            width * height,
            width * height
        )));
    }

    // per-tile accumulation, then a deterministic ordered reduction
    let tile_accums: Vec<Vec<SplatAccum>> = (0..out.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let list = &out.tiles[ti];
            let mut acc = vec![SplatAccum::zero(); list.len()];
            let (tx, ty) = (ti % out.tiles_x, ti / out.tiles_x);
            let x_lo = tx * out.tile_size;
            let y_lo = ty * out.tile_size;
            let x_hi = (x_lo + out.tile_size).min(width);
            let y_hi = (y_lo + out.tile_size).min(height);
            let mut contribs: Vec<(usize, f64, f64, f64)> = Vec::new(); // (list pos, alpha, g, T_before)
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let gi = y * width + x;
                    let dc_px = Vector3::new(d_rgb[gi * 3], d_rgb[gi * 3 + 1], d_rgb[gi * 3 + 2]);
                    let da_px = d_alpha[gi];
                    if dc_px == Vector3::zeros() && da_px == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // re-run the forward blend to recover contributor state
                    contribs.clear();
                    let mut trans = 1.0f64;
                    for (lp, &si) in list.iter().enumerate() {
                        let s = &out.splats[si as usize];
                        let (a, g, _) = eval_alpha(s, px, py);
                        if a < opts.alpha_min {
                            continue;
                        }
                        let a = a.min(ALPHA_CLAMP);
                        contribs.push((lp, a, g, trans));
                        trans *= 1.0 - a;
                        if trans < opts.termination {
                            break;
                        }
                    }
                    let t_end = trans;
                    let mut suffix = Vector3::zeros();
                    for &(lp, a, g, t_before) in contribs.iter().rev() {
                        let s = &out.splats[list[lp] as usize];
                        let one_minus = 1.0 - a;
                        acc[lp].d_color += dc_px * (a * t_before);
                        let mut d_a = da_px * t_end / one_minus;
                        for ch in 0..3 {
                            d_a += dc_px[ch] * (t_before * s.color[ch] - suffix[ch] / one_minus);
                        }
                        suffix += s.color * (a * t_before);
                        // clamped alpha has zero local derivative
                        if s.sigma_t * g > ALPHA_CLAMP {
                            continue;
                        }
                        acc[lp].d_sigma += g * d_a;
                        let dm = -0.5 * s.sigma_t * g * d_a;
                        let d = Vector2::new(px - s.center.x, py - s.center.y);
                        let ad = s.cov_inv * d;
                        acc[lp].d_center -= 2.0 * ad * dm;
                        acc[lp].d_cov -= (ad * ad.transpose()) * dm;
                    }
                }
            }
            acc
        })
        .collect();

    let mut per_splat = vec![SplatAccum::zero(); out.splats.len()];
    for (ti, acc) in tile_accums.iter().enumerate() {
        for (lp, a) in acc.iter().enumerate() {
            let si = out.tiles[ti][lp] as usize;
            let p = &mut per_splat[si];
            p.d_color += a.d_color;
            p.d_sigma += a.d_sigma;
            p.d_center += a.d_center;
            p.d_cov += a.d_cov;
        }
    }

    // chain per-splat screen-space grads back to point parameters
    struct PointGrad {
        point: usize,
        d_pos: Vector3<f64>,
        d_rot: [f64; 4],
        d_scale: Vector3<f64>,
        d_color: Vector3<f64>,
        d_h: f64,
        d_w: f64,
        d_mu: f64,
    }
    let point_grads: Vec<PointGrad> = out
        .splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, acc)| {
            let i = s.point;
            let (d_h, d_w, d_mu) = temporal_opacity_backward(
                params.peak_opacity[i],
                params.bandwidth[i],
                params.temporal_center[i],
                out.time,
                opts.opacity_form,
                acc.d_sigma,
            );
            let cov3d = build_covariance(&params.rotations[i], &params.log_scales[i]);
            let proj = project_covariance(cam, &params.positions[i], &cov3d)
                .expect("splat was prepared in-frustum");
            let (d_cov3d, mut d_pos) =
                project_covariance_backward(cam, &proj, &cov3d, &acc.d_cov);
            let (d_rot, d_scale) =
                build_covariance_backward(&params.rotations[i], &params.log_scales[i], &d_cov3d);
            // center = project_point(x): d_pos += R^T J^T d_center
            let j = cam.projection_jacobian(&proj.x_cam).expect("in frustum");
            d_pos += cam.rotation.transpose() * (j.transpose() * acc.d_center);
            PointGrad {
                point: i,
                d_pos,
                d_rot,
                d_scale,
                d_color: acc.d_color,
                d_h,
                d_w,
                d_mu,
            }
        })
        .collect();

    let mut grads = ParamGrads::zeros(params.len());
    for pg in point_grads {
        grads.positions[pg.point] += pg.d_pos;
        for k in 0..4 {
            grads.rotations[pg.point][k] += pg.d_rot[k];
        }
        grads.log_scales[pg.point] += pg.d_scale;
        grads.colors[pg.point] += pg.d_color;
        grads.peak_opacity[pg.point] += pg.d_h;
        grads.bandwidth[pg.point] += pg.d_w;
        grads.temporal_center[pg.point] += pg.d_mu;
    }
    Ok(grads)
}

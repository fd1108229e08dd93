//! Synthetic dynamic scenes with analytic ground truth: a handful of moving
//! or pulsing foreground blobs in front of a distant static shell, rendered
//! by the reference rasterizer from a ring of cameras. Everything needed for
//! end-to-end tests at desk scale, emitted in the same formats as real data.

use crate::error::{Error, Result};
use crate::gaussians::RenderParams;
use crate::rasterizer::{render_reference, RenderOptions};
use crate::scene_io::{
    write_point_cloud, Camera, CameraRecord, FrameRecord, ImageRgb, Mask, PointCloud,
};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

#[derive(Debug, Clone)]
pub enum MotionPath {
    Static(Vector3<f64>),
    /// Full revolution in the horizontal plane over t in [0,1].
    Orbit {
        center: Vector3<f64>,
        radius: f64,
        phase: f64,
    },
    Line {
        from: Vector3<f64>,
        to: Vector3<f64>,
    },
}

impl MotionPath {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        match self {
            MotionPath::Static(p) => *p,
            MotionPath::Orbit {
                center,
                radius,
                phase,
            } => {
                let a = std::f64::consts::TAU * t + phase;
                center + Vector3::new(radius * a.cos(), 0.0, radius * a.sin())
            }
            MotionPath::Line { from, to } => from + (to - from) * t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Blob {
    pub path: MotionPath,
    pub color: Vector3<f64>,
    pub log_scale: f64,
    pub peak_opacity: f64,
    pub bandwidth: f64,
    pub temporal_center: f64,
}

#[derive(Debug, Clone)]
pub struct SceneRecipe {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub train_cameras: usize,
    pub frames: usize,
    pub camera_radius: f64,
    pub focal: f64,
    pub fg_blobs: Vec<Blob>,
    pub bg_points: usize,
    pub bg_radius: f64,
    pub bg_log_scale: f64,
}

impl SceneRecipe {
    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Precondition("recipe: images must be >= 16x16".into()));
        }
        if self.train_cameras == 0 || self.frames == 0 {
            return Err(Error::Precondition(
                "recipe: need at least one camera and one frame".into(),
            ));
        }
        // a shell too close to the ring puts its side splats in front of the
        // cameras, where they curtain off the foreground
        if self.bg_radius < 3.0 * self.camera_radius {
            return Err(Error::Precondition(
                "recipe: background shell must sit well outside the camera ring (>= 3x radius)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// The orbit recipe: one blob circling a small static cluster. Exercises
/// motion reconstruction and displacement-based densification.
pub fn orbit_recipe() -> SceneRecipe {
    let blob = |p: Vector3<f64>, c: (f64, f64, f64)| Blob {
        path: MotionPath::Static(p),
        color: Vector3::new(c.0, c.1, c.2),
        log_scale: (0.22_f64).ln(),
        peak_opacity: 0.9,
        bandwidth: 0.0,
        temporal_center: 0.5,
    };
    // a chunky overlapping cluster: fat blobs give the masks real area, so a
    // jittered init point stays inside its own silhouette from every camera
    let mut fg_blobs = vec![
        blob(Vector3::new(0.25, 0.2, 0.0), (0.9, 0.2, 0.2)),
        blob(Vector3::new(-0.25, 0.2, 0.1), (0.2, 0.9, 0.2)),
        blob(Vector3::new(0.0, -0.25, -0.1), (0.2, 0.3, 0.9)),
        blob(Vector3::new(0.0, 0.35, 0.0), (0.9, 0.9, 0.2)),
        blob(Vector3::new(0.2, -0.1, 0.2), (0.8, 0.3, 0.8)),
        blob(Vector3::new(-0.2, -0.05, -0.2), (0.3, 0.8, 0.8)),
        blob(Vector3::new(0.05, 0.05, 0.0), (0.95, 0.95, 0.9)),
        blob(Vector3::new(-0.1, 0.3, -0.15), (0.5, 0.5, 0.1)),
    ];
    fg_blobs.push(Blob {
        path: MotionPath::Orbit {
            center: Vector3::new(0.0, 0.0, 0.0),
            radius: 0.5,
            phase: 0.0,
        },
        color: Vector3::new(0.95, 0.5, 0.1),
        log_scale: (0.2_f64).ln(),
        peak_opacity: 0.9,
        bandwidth: 0.0,
        temporal_center: 0.5,
    });
    SceneRecipe {
        name: "orbit".into(),
        width: 64,
        height: 64,
        train_cameras: 8,
        frames: 30,
        camera_radius: 4.0,
        focal: 80.0,
        fg_blobs,
        bg_points: 96,
        bg_radius: 30.0,
        bg_log_scale: (8.0_f64).ln(),
    }
}

/// The flame recipe: short-lived opacity pulses above a static pan, the
/// desk-scale stand-in for fire-like dynamic textures.
pub fn flame_recipe() -> SceneRecipe {
    let mut fg_blobs = Vec::new();
    // static pan
    for i in 0..5 {
        fg_blobs.push(Blob {
            path: MotionPath::Static(Vector3::new(-0.4 + 0.2 * i as f64, -0.45, 0.0)),
            color: Vector3::new(0.45, 0.45, 0.5),
            log_scale: (0.12_f64).ln(),
            peak_opacity: 0.9,
            bandwidth: 0.0,
            temporal_center: 0.5,
        });
    }
    // pulses with short lifetimes: large bandwidth, staggered centers
    for i in 0..10 {
        let u = i as f64 / 9.0;
        fg_blobs.push(Blob {
            path: MotionPath::Line {
                from: Vector3::new(-0.25 + 0.5 * u, -0.2, 0.05 * (i % 3) as f64 - 0.05),
                to: Vector3::new(-0.25 + 0.5 * u, 0.35, 0.05 * (i % 3) as f64 - 0.05),
            },
            color: Vector3::new(0.95, 0.45 + 0.3 * u, 0.1),
            log_scale: (0.18_f64).ln(),
            peak_opacity: 0.95,
            bandwidth: 7.0,
            // lifetimes cluster mid-sequence so early/late frames go dark
            temporal_center: 0.35 + 0.3 * u,
        });
    }
    SceneRecipe {
        name: "flame".into(),
        width: 64,
        height: 64,
        train_cameras: 8,
        frames: 30,
        camera_radius: 4.0,
        focal: 80.0,
        fg_blobs,
        bg_points: 96,
        bg_radius: 30.0,
        bg_log_scale: (8.0_f64).ln(),
    }
}

pub fn recipe_by_name(name: &str) -> Result<SceneRecipe> {
    match name {
        "orbit" => Ok(orbit_recipe()),
        "flame" => Ok(flame_recipe()),
        other => Err(Error::Config(format!(
            "unknown recipe '{other}' (available: orbit, flame)"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub recipe: SceneRecipe,
    /// Train cameras first, the held-out test camera last.
    pub cameras: Vec<Camera>,
    pub is_test: Vec<bool>,
    pub times: Vec<f64>,
    /// frames[cam][frame]
    pub frames: Vec<Vec<ImageRgb>>,
    /// Exact foreground masks per camera and frame (alpha > 0.5 of the
    /// foreground-only reference render).
    pub gt_masks: Vec<Vec<Mask>>,
    /// Noisy initialization cloud: ground truth + jitter + spurious points.
    pub init_cloud: PointCloud,
    /// Static background shell ground truth.
    pub bg_params: RenderParams,
}

impl SynthScene {
    /// Ground-truth foreground parameters at time t.
    pub fn fg_params(&self, t: f64) -> RenderParams {
        blob_params(&self.recipe.fg_blobs, t)
    }

    pub fn train_camera_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_camera_index(&self) -> usize {
        self.cameras.len() - 1
    }
}

fn blob_params(blobs: &[Blob], t: f64) -> RenderParams {
    RenderParams {
        positions: blobs.iter().map(|b| b.path.at(t)).collect(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; blobs.len()],
        log_scales: blobs.iter().map(|b| Vector3::repeat(b.log_scale)).collect(),
        colors: blobs.iter().map(|b| b.color).collect(),
        peak_opacity: blobs.iter().map(|b| b.peak_opacity).collect(),
        bandwidth: blobs.iter().map(|b| b.bandwidth).collect(),
        temporal_center: blobs.iter().map(|b| b.temporal_center).collect(),
    }
}

/// World-to-camera extrinsics looking from `eye` at `target`.
fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let fwd = (target - eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let mut right = up.cross(&fwd);
    if right.norm() < 1e-9 {
        right = Vector3::new(1.0, 0.0, 0.0);
    }
    let right = right.normalize();
    let down = fwd.cross(&right);
    let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    (rot, -rot * eye)
}

fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let a = golden * i as f64;
            Vector3::new(r * a.cos(), y, r * a.sin()) * radius
        })
        .collect()
}

pub fn make_scene(recipe: &SceneRecipe, seed: u64) -> Result<SynthScene> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Static background shell outside the camera ring, so it never occludes.
    // The band near the ring plane is left empty: a shell point there can sit
    // on the extension of a camera->blob ray while no other camera observes
    // it, and the mask conjunction rule would then classify it as foreground.
    // The splats are wide enough to still paint the backdrop across the gap.
    let bg_positions: Vec<Vector3<f64>> =
        fibonacci_sphere(recipe.bg_points * 2, recipe.bg_radius)
            .into_iter()
            .filter(|p| p.y.abs() > 0.4 * recipe.bg_radius)
            .take(recipe.bg_points)
            .collect();
    let bg_points = bg_positions.len();
    assert_eq!(bg_points, recipe.bg_points);
    // A gently varying backdrop: each shell splat is seen by few cameras, so a
    // high-contrast backdrop rewards view memorization and punishes held-out
    // views. A base tone with small per-splat variation keeps the background
    // learnable from sparse coverage while still being non-trivial.
    let bg_base = Vector3::new(
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
        rng.gen_range(0.35..0.6),
    );
    let bg_colors: Vec<Vector3<f64>> = (0..recipe.bg_points)
        .map(|_| {
            Vector3::new(
                (bg_base.x + rng.gen_range(-0.08..0.08_f64)).clamp(0.0, 1.0),
                (bg_base.y + rng.gen_range(-0.08..0.08_f64)).clamp(0.0, 1.0),
                (bg_base.z + rng.gen_range(-0.08..0.08_f64)).clamp(0.0, 1.0),
            )
        })
        .collect();
    let bg_params = RenderParams {
        positions: bg_positions,
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; recipe.bg_points],
        log_scales: vec![Vector3::repeat(recipe.bg_log_scale); recipe.bg_points],
        colors: bg_colors,
        peak_opacity: vec![0.9; recipe.bg_points],
        bandwidth: vec![0.0; recipe.bg_points],
        temporal_center: vec![0.5; recipe.bg_points],
    };

    // camera ring: train cameras evenly spaced, test camera between two
    let mut cameras = Vec::new();
    let mut is_test = Vec::new();
    let total = recipe.train_cameras + 1;
    for i in 0..total {
        let test = i == total - 1;
        let azimuth = if test {
            std::f64::consts::TAU * 0.5 / recipe.train_cameras as f64
        } else {
            std::f64::consts::TAU * i as f64 / recipe.train_cameras as f64
        };
        let elevation = if test { 0.25 } else { 0.4 * ((i % 3) as f64 - 1.0) };
        let eye = Vector3::new(
            recipe.camera_radius * azimuth.cos(),
            elevation,
            recipe.camera_radius * azimuth.sin(),
        );
        let (rotation, translation) = look_at(eye, Vector3::zeros());
        let cam = Camera {
            id: i,
            width: recipe.width,
            height: recipe.height,
            fx: recipe.focal,
            fy: recipe.focal,
            cx: recipe.width as f64 / 2.0,
            cy: recipe.height as f64 / 2.0,
            rotation,
            translation,
        };
        cam.validate()?;
        cameras.push(cam);
        is_test.push(test);
    }

    let times: Vec<f64> = if recipe.frames == 1 {
        vec![0.0]
    } else {
        (0..recipe.frames)
            .map(|j| j as f64 / (recipe.frames - 1) as f64)
            .collect()
    };

    let opts = RenderOptions::default();
    let jobs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|c| (0..times.len()).map(move |f| (c, f)))
        .collect();
    let rendered: Vec<(ImageRgb, Mask)> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let t = times[f];
            let fg = blob_params(&recipe.fg_blobs, t);
            let merged = RenderParams::concat(&fg, &bg_params);
            let rgb = render_reference(&merged, &cameras[c], t, &opts).rgb;
            let fg_only = render_reference(&fg, &cameras[c], t, &opts);
            let mask = Mask {
                width: recipe.width,
                height: recipe.height,
                data: fg_only.alpha.iter().map(|&a| (a > 0.5) as u8).collect(),
            };
            (rgb, mask)
        })
        .collect();
    let mut frames = vec![Vec::new(); cameras.len()];
    let mut gt_masks = vec![Vec::new(); cameras.len()];
    for ((c, _), (rgb, mask)) in jobs.into_iter().zip(rendered) {
        frames[c].push(rgb);
        gt_masks[c].push(mask);
    }

    // noisy init cloud: ground truth at t=0 plus jitter scaled by the
    // foreground extent, plus 20% spurious points in the scene bounds
    let fg0 = blob_params(&recipe.fg_blobs, 0.0);
    let mut gt_positions = fg0.positions.clone();
    let mut gt_colors = fg0.colors.clone();
    gt_positions.extend_from_slice(&bg_params.positions);
    gt_colors.extend_from_slice(&bg_params.colors);
    let noise = if fg0.positions.is_empty() {
        0.0
    } else {
        let (fg_lo, fg_hi) = crate::math::bounding_box(&fg0.positions);
        0.05 * (fg_hi - fg_lo).norm()
    };
    let mut init_cloud = PointCloud::default();
    for (p, c) in gt_positions.iter().zip(gt_colors.iter()) {
        let jitter = if noise > 0.0 {
            Vector3::new(
                rng.gen_range(-noise..noise),
                rng.gen_range(-noise..noise),
                rng.gen_range(-noise..noise),
            )
        } else {
            Vector3::zeros()
        };
        init_cloud.positions.push(p + jitter);
        init_cloud.colors.push(*c);
    }
    // Spurious points cluster tightly on the foreground blobs (as SfM junk
    // does around textured surfaces), deep enough inside the silhouettes
    // that every camera agrees they are foreground. Junk that lands in the
    // background set with a random vivid color is poison: near the object it
    // paints a view-inconsistent ghost, at the shell it forces aggressive
    // background retraining that only covers the training views. Foreground
    // junk is harmless — that set is supervised from every camera.
    let n_spurious = if recipe.fg_blobs.is_empty() {
        0
    } else {
        gt_positions.len() / 5
    };
    for _ in 0..n_spurious {
        let blob = &recipe.fg_blobs[rng.gen_range(0..recipe.fg_blobs.len())];
        let r = 0.5 * blob.log_scale.exp();
        let offset = Vector3::new(
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
            rng.gen_range(-r..r),
        );
        init_cloud.positions.push(blob.path.at(0.0) + offset);
        init_cloud
            .colors
            .push(Vector3::new(rng.gen(), rng.gen(), rng.gen()));
    }

    Ok(SynthScene {
        recipe: recipe.clone(),
        cameras,
        is_test,
        times,
        frames,
        gt_masks,
        init_cloud,
        bg_params,
    })
}

/// Write the scene in the on-disk formats the rest of the pipeline loads:
/// cameras.json, frame PNGs, t=0 mask PNGs, per-frame ground-truth masks
/// (masks_gt/, used only by evaluation), and the initial point cloud.
pub fn write_scene(scene: &SynthScene, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    mkdir(dir)?;
    mkdir(&dir.join("images"))?;
    mkdir(&dir.join("masks"))?;
    mkdir(&dir.join("masks_gt"))?;

    let mut records = Vec::new();
    for (c, cam) in scene.cameras.iter().enumerate() {
        let mut frame_records = Vec::new();
        for (f, t) in scene.times.iter().enumerate() {
            let image_rel = format!("images/cam{c:02}_f{f:03}.png");
            scene.frames[c][f].save_png(&dir.join(&image_rel))?;
            let gt_rel = format!("masks_gt/cam{c:02}_f{f:03}.png");
            scene.gt_masks[c][f].save_png(&dir.join(&gt_rel))?;
            let mask = if f == 0 {
                let mask_rel = format!("masks/cam{c:02}.png");
                scene.gt_masks[c][0].save_png(&dir.join(&mask_rel))?;
                Some(mask_rel)
            } else {
                None
            };
            frame_records.push(FrameRecord {
                t: *t,
                image: image_rel,
                mask,
            });
        }
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = cam.rotation[(i, j)];
            }
        }
        records.push(CameraRecord {
            id: cam.id,
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            r,
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            test: scene.is_test[c],
            frames: frame_records,
        });
    }
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Config(format!("serializing cameras.json: {e}")))?;
    std::fs::write(dir.join("cameras.json"), json).map_err(|e| Error::Io {
        path: dir.join("cameras.json"),
        source: e,
    })?;
    write_point_cloud(&scene.init_cloud, &dir.join("points.ply"))
}

/// Load the per-frame ground-truth masks written by `write_scene`.
pub fn load_gt_masks(dir: &Path, cam: usize, frames: usize, width: usize, height: usize) -> Result<Vec<Mask>> {
    (0..frames)
        .map(|f| {
            crate::scene_io::load_mask(
                &dir.join(format!("masks_gt/cam{cam:02}_f{f:03}.png")),
                width,
                height,
            )
        })
        .collect()
}

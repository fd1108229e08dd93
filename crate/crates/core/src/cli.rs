//! Command-line pipeline: scene synthesis, segmentation, the two training
//! stages, rendering, and evaluation, all behind one binary. Every
//! subcommand is deterministic for a fixed `--seed` and `--threads`.

use crate::error::{Error, Result};
use crate::scene_io::{Camera, LoadedScene, Mask};
use crate::trainer::{self, TrainConfig, TrainState};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "svsplat", version, about = "Sparse-view dynamic Gaussian splatting on the CPU")]
pub struct Cli {
    /// Worker thread cap (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. --set dynamic_iters=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Overrides the config seed when given.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            cfg.apply_set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene directory from a named recipe.
    Synth {
        /// Recipe name: orbit | flame.
        #[arg(long)]
        recipe: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split the initial point cloud with the t=0 masks; writes fg.ply/bg.ply.
    Segment {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: fit the canonical representations at t=0.
    TrainCanonical {
        #[arg(long)]
        scene: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage two: joint training of points and deformation fields.
    TrainDynamic {
        #[arg(long)]
        scene: PathBuf,
        /// Checkpoint produced by train-canonical.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one (camera, t) view from a checkpoint to a PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory supplying the camera definitions.
        #[arg(long)]
        scene: PathBuf,
        /// Camera id from cameras.json.
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame and mean metrics on the held-out cameras, as CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // ignore the error if a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { recipe, out, seed } => {
            let recipe = crate::synth::recipe_by_name(&recipe)?;
            let scene = crate::synth::make_scene(&recipe, seed)?;
            crate::synth::write_scene(&scene, &out)?;
            println!(
                "wrote scene '{}' to {} ({} cameras, {} frames)",
                recipe.name,
                out.display(),
                scene.cameras.len(),
                recipe.frames
            );
            Ok(())
        }
        Command::Segment { scene, out } => {
            let loaded = LoadedScene::load(&scene)?;
            let cloud = crate::scene_io::load_point_cloud(&scene.join("points.ply"))?;
            let views = mask_views(&loaded)?;
            let (fg, bg) = crate::segmentation::split_point_cloud(&cloud, &views)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            crate::scene_io::write_point_cloud(&fg, &out.join("fg.ply"))?;
            crate::scene_io::write_point_cloud(&bg, &out.join("bg.ply"))?;
            println!("foreground {} points, background {} points", fg.len(), bg.len());
            Ok(())
        }
        Command::TrainCanonical { scene, out, config } => {
            let cfg = config.build()?;
            let loaded = LoadedScene::load(&scene)?;
            let cloud = crate::scene_io::load_point_cloud(&scene.join("points.ply"))?;
            let mut state = trainer::init_state(&loaded, &cloud, cfg)?;
            trainer::train_canonical(&mut state, &loaded, &mut print_metric)?;
            trainer::to_checkpoint(&state).save(&out)?;
            println!("saved checkpoint to {}", out.display());
            Ok(())
        }
        Command::TrainDynamic { scene, checkpoint, out } => {
            let loaded = LoadedScene::load(&scene)?;
            let ck = crate::checkpoint::Checkpoint::load(&checkpoint)?;
            let mut state = trainer::from_checkpoint(&ck)?;
            trainer::train_dynamic(&mut state, &loaded, &mut print_metric)?;
            trainer::to_checkpoint(&state).save(&out)?;
            println!("saved checkpoint to {}", out.display());
            Ok(())
        }
        Command::Render { checkpoint, scene, camera, t, out } => {
            let loaded = LoadedScene::load(&scene)?;
            let ck = crate::checkpoint::Checkpoint::load(&checkpoint)?;
            let state = trainer::from_checkpoint(&ck)?;
            let idx = loaded
                .camera_by_id(camera)
                .ok_or_else(|| Error::Precondition(format!("no camera with id {camera}")))?;
            let rendered = trainer::render_state(&state, &loaded.cameras[idx], t)?;
            rendered.rgb.save_png(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, scene, out } => {
            let loaded = LoadedScene::load(&scene)?;
            let ck = crate::checkpoint::Checkpoint::load(&checkpoint)?;
            let state = trainer::from_checkpoint(&ck)?;
            let csv = evaluate_csv(&state, &loaded)?;
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io {
                    path,
                    source: e,
                })?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn print_metric(m: &trainer::MetricLine) {
    println!("{}", m.render_tsv());
}

fn mask_views(scene: &LoadedScene) -> Result<Vec<(&Camera, &Mask)>> {
    let mut views = Vec::new();
    for c in scene.train_camera_indices() {
        if let Some(first) = scene.frames[c].first() {
            if first.t == 0.0 {
                if let Some(mask) = &first.mask {
                    views.push((&scene.cameras[c], mask));
                }
            }
        }
    }
    if views.is_empty() {
        return Err(Error::Precondition("scene has no t=0 masks".into()));
    }
    Ok(views)
}

/// Held-out-view metrics. Masked columns use per-frame ground-truth masks
/// when the scene provides them (masks_gt/); otherwise the t=0 mask stands
/// in for every frame.
pub fn evaluate_csv(state: &TrainState, scene: &LoadedScene) -> Result<String> {
    let mut rows = String::from("frame,camera,psnr,ssim,psnr_mask,ssim_mask\n");
    let mut sums = [0.0; 4];
    let mut count = 0usize;
    for c in scene.test_camera_indices() {
        let cam = &scene.cameras[c];
        let n_frames = scene.frames[c].len();
        let gt_masks =
            crate::synth::load_gt_masks(&scene.root, c, n_frames, cam.width, cam.height).ok();
        let fallback = scene.frames[c].first().and_then(|f| f.mask.clone());
        for (f, frame) in scene.frames[c].iter().enumerate() {
            let rendered = trainer::render_state(state, cam, frame.t)?;
            let psnr = crate::eval::psnr(&frame.image, &rendered.rgb)?;
            let ssim = crate::eval::ssim(&frame.image, &rendered.rgb)?;
            let mask = gt_masks
                .as_ref()
                .map(|m| &m[f])
                .or(fallback.as_ref())
                .ok_or_else(|| {
                    Error::Precondition(format!("camera {}: no mask for masked metrics", cam.id))
                })?;
            let (pm, sm) = crate::eval::masked_metrics(&frame.image, &rendered.rgb, mask)?;
            rows.push_str(&format!(
                "{f},{},{psnr:.4},{ssim:.6},{pm:.4},{sm:.6}\n",
                cam.id
            ));
            sums[0] += psnr;
            sums[1] += ssim;
            sums[2] += pm;
            sums[3] += sm;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Precondition("scene has no held-out cameras".into()));
    }
    let n = count as f64;
    rows.push_str(&format!(
        "mean,,{:.4},{:.6},{:.4},{:.6}\n",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    ));
    Ok(rows)
}

/// Segmentation quality of a trained state: IoU between the thresholded
/// foreground alpha (> 0.5) and the ground-truth mask at (camera, t).
pub fn foreground_iou(state: &TrainState, cam: &Camera, t: f64, gt: &Mask) -> Result<f64> {
    let out = trainer::render_state_foreground(state, cam, t)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let pred = out.alpha[y * cam.width + x] > 0.5;
            let truth = gt.get(x, y) != 0;
            if pred && truth {
                inter += 1;
            }
            if pred || truth {
                union += 1;
            }
        }
    }
    if union == 0 {
        return Err(Error::Precondition("empty prediction and mask".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        let err = Cli::try_parse_from(["svsplat"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = Cli::try_parse_from(["svsplat", "synth", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_args_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 5, "canonical_iters": 10}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            sets: vec!["dynamic_iters=20".into()],
            seed: Some(9),
        };
        let cfg = args.build().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.canonical_iters, 10);
        assert_eq!(cfg.dynamic_iters, 20);

        let bad = ConfigArgs {
            config: None,
            sets: vec!["nonsense".into()],
            seed: None,
        };
        assert!(bad.build().is_err());
    }
}

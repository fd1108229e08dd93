//! Two-stage optimization: canonical pre-training anchored at t=0 (separate
//! foreground and background objectives), then joint dynamic training of the
//! point sets and deformation fields. Adam with per-group learning rates,
//! densification schedules, checkpointing, and the four ablation switches.

use crate::checkpoint::Checkpoint;
use crate::densify;
use crate::error::{Error, Result};
use crate::gaussians::{GaussianSet, OpacityForm, ParamGrads, SetTag};
use crate::hexplane::{DeformationField, FieldConfig, FieldVariant};
use crate::losses::{
    background_loss, background_target, background_blur_radius, foreground_loss,
    opacity_regularizer_with, panoptic_loss, LossNorm,
};
use crate::rasterizer::{render, render_backward, RenderOptions};
use crate::scene_io::{Camera, ImageRgb, LoadedScene, Mask, PointCloud};
use crate::segmentation::{split_point_cloud, voxel_resample};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// configuration

fn d_seed() -> u64 { 0 }
fn d_canonical_iters() -> usize { 3000 }
fn d_dynamic_iters() -> usize { 7000 }
fn d_fg_target() -> usize { 500 }
fn d_bg_target() -> usize { 500 }
fn d_lr_positions() -> f64 { 1.6e-4 }
fn d_lr_rotations() -> f64 { 1e-3 }
fn d_lr_scales() -> f64 { 5e-3 }
fn d_lr_colors() -> f64 { 2.5e-3 }
fn d_lr_opacity() -> f64 { 5e-2 }
fn d_lr_planes() -> f64 { 1.6e-2 }
fn d_lr_heads() -> f64 { 1.6e-3 }
fn d_lambda_h() -> f64 { crate::losses::LAMBDA_H }
fn d_lambda_omega() -> f64 { crate::losses::LAMBDA_OMEGA }
fn d_n_canonical_densify() -> u32 { 2 }
fn d_n_dynamic_densify() -> u32 { 3 }
fn d_loss_norm() -> LossNorm { LossNorm::L1 }
fn d_field() -> FieldConfig { FieldConfig::default() }
fn d_log_every() -> usize { 100 }
fn d_false() -> bool { false }

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_canonical_iters")]
    pub canonical_iters: usize,
    #[serde(default = "d_dynamic_iters")]
    pub dynamic_iters: usize,
    /// Voxel-resampling targets for the split point clouds.
    #[serde(default = "d_fg_target")]
    pub fg_target: usize,
    #[serde(default = "d_bg_target")]
    pub bg_target: usize,
    /// Base position rate; multiplied by the scene extent and decayed
    /// exponentially to 1% over each stage.
    #[serde(default = "d_lr_positions")]
    pub lr_positions: f64,
    #[serde(default = "d_lr_rotations")]
    pub lr_rotations: f64,
    #[serde(default = "d_lr_scales")]
    pub lr_scales: f64,
    #[serde(default = "d_lr_colors")]
    pub lr_colors: f64,
    /// Shared rate for the temporal opacity triplet (h, omega, mu).
    #[serde(default = "d_lr_opacity")]
    pub lr_opacity: f64,
    #[serde(default = "d_lr_planes")]
    pub lr_planes: f64,
    #[serde(default = "d_lr_heads")]
    pub lr_heads: f64,
    #[serde(default = "d_lambda_h")]
    pub lambda_h: f64,
    #[serde(default = "d_lambda_omega")]
    pub lambda_omega: f64,
    #[serde(default = "d_n_canonical_densify")]
    pub n_canonical_densify: u32,
    #[serde(default = "d_n_dynamic_densify")]
    pub n_dynamic_densify: u32,
    #[serde(default = "d_false")]
    pub prune_low_opacity: bool,
    #[serde(default = "d_loss_norm")]
    pub loss_norm: LossNorm,
    #[serde(default = "d_field")]
    pub field: FieldConfig,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    // ablation switches
    #[serde(default = "d_false")]
    pub unified_field: bool,
    #[serde(default = "d_false")]
    pub legacy_canonical: bool,
    #[serde(default = "d_false")]
    pub legacy_densify: bool,
    #[serde(default = "d_false")]
    pub legacy_opacity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_positions", self.lr_positions),
            ("lr_rotations", self.lr_rotations),
            ("lr_scales", self.lr_scales),
            ("lr_colors", self.lr_colors),
            ("lr_opacity", self.lr_opacity),
            ("lr_planes", self.lr_planes),
            ("lr_heads", self.lr_heads),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.fg_target == 0 || self.bg_target == 0 {
            return Err(Error::Config("resampling targets must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply one `--set key=value` override by round-tripping through JSON.
    pub fn apply_set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&self.to_json()).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        match key.split_once('.') {
            None => {
                if !map.contains_key(key) {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
                map.insert(key.to_string(), parsed);
            }
            Some((outer, inner)) => {
                let nested = map
                    .get_mut(outer)
                    .and_then(|v| v.as_object_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                if !nested.contains_key(inner) {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
                nested.insert(inner.to_string(), parsed);
            }
        }
        let updated: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("invalid value for '{key}': {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn opacity_form(&self) -> OpacityForm {
        if self.legacy_opacity {
            OpacityForm::Legacy
        } else {
            OpacityForm::Squared
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            opacity_form: self.opacity_form(),
            ..RenderOptions::default()
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Adaptive moment estimation over a flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Fresh zero state for parameters appended by densification.
    pub fn extend(&mut self, n_new: usize) {
        self.m.resize(self.m.len() + n_new, 0.0);
        self.v.resize(self.v.len() + n_new, 0.0);
    }

    pub fn begin(&mut self) {
        self.t += 1;
    }

    /// Update slot i with gradient g; returns the step to subtract.
    #[inline]
    pub fn update(&mut self, i: usize, lr: f64, g: f64) -> f64 {
        self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
        self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = self.m[i] / (1.0 - ADAM_BETA1.powi(self.t as i32));
        let vh = self.v[i] / (1.0 - ADAM_BETA2.powi(self.t as i32));
        lr * mh / (vh.sqrt() + ADAM_EPS)
    }

    /// Step a whole slice at once.
    pub fn step_slice(&mut self, lr: f64, params: &mut [f64], grads: &[f64]) {
        self.begin();
        for i in 0..params.len() {
            params[i] -= self.update(i, lr, grads[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SetOpt {
    pos: Adam,
    rot: Adam,
    scale: Adam,
    color: Adam,
    h: Adam,
    omega: Adam,
    mu: Adam,
}

impl SetOpt {
    fn new(n: usize) -> Self {
        SetOpt {
            pos: Adam::new(3 * n),
            rot: Adam::new(4 * n),
            scale: Adam::new(3 * n),
            color: Adam::new(3 * n),
            h: Adam::new(n),
            omega: Adam::new(n),
            mu: Adam::new(n),
        }
    }

    fn extend(&mut self, n_new: usize) {
        self.pos.extend(3 * n_new);
        self.rot.extend(4 * n_new);
        self.scale.extend(3 * n_new);
        self.color.extend(3 * n_new);
        self.h.extend(n_new);
        self.omega.extend(n_new);
        self.mu.extend(n_new);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FieldOpt {
    planes: Vec<Adam>,
    trunk_w: Adam,
    trunk_b: Adam,
    heads: Vec<(Adam, Adam)>,
}

impl FieldOpt {
    fn new(field: &DeformationField) -> Self {
        FieldOpt {
            planes: field.planes.iter().map(|p| Adam::new(p.values.len())).collect(),
            trunk_w: Adam::new(field.trunk.w.len()),
            trunk_b: Adam::new(field.trunk.b.len()),
            heads: field
                .heads
                .iter()
                .map(|h| (Adam::new(h.w.len()), Adam::new(h.b.len())))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// state

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub fg: GaussianSet,
    pub bg: GaussianSet,
    /// Split mode: [foreground field, background field]. Unified: one field.
    pub fields: Vec<DeformationField>,
    pub iteration: u64,
    pub scene_extent: f64,
    fg_opt: SetOpt,
    bg_opt: SetOpt,
    field_opts: Vec<FieldOpt>,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricLine {
    pub iter: u64,
    pub loss: f64,
    pub psnr: f64,
    pub n_fg: usize,
    pub n_bg: usize,
}

impl MetricLine {
    pub fn render_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.3}\t{}\t{}",
            self.iter, self.loss, self.psnr, self.n_fg, self.n_bg
        )
    }
}

impl TrainState {
    pub fn field_index(&self, tag: SetTag) -> usize {
        if self.config.unified_field {
            0
        } else {
            match tag {
                SetTag::Foreground => 0,
                SetTag::Background => 1,
            }
        }
    }

    pub fn field_for(&self, tag: SetTag) -> &DeformationField {
        &self.fields[self.field_index(tag)]
    }
}

/// Segment the initial cloud with the t=0 masks, resample both halves, and
/// build fresh representations and optimizer state.
pub fn init_state(
    scene: &LoadedScene,
    cloud: &PointCloud,
    config: TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut views: Vec<(&Camera, &Mask)> = Vec::new();
    for c in scene.train_camera_indices() {
        if let Some(first) = scene.frames[c].first() {
            if let Some(mask) = &first.mask {
                if first.t == 0.0 {
                    views.push((&scene.cameras[c], mask));
                }
            }
        }
    }
    if views.is_empty() {
        return Err(Error::Precondition(
            "training requires t=0 masks on the training cameras".into(),
        ));
    }
    let (fg_cloud, bg_cloud) = split_point_cloud(cloud, &views)?;
    if fg_cloud.is_empty() {
        return Err(Error::Precondition("segmentation produced no foreground points".into()));
    }
    if bg_cloud.is_empty() {
        return Err(Error::Precondition("segmentation produced no background points".into()));
    }
    let fg_cloud = voxel_resample(&fg_cloud, config.fg_target, &mut rng)?;
    let bg_cloud = voxel_resample(&bg_cloud, config.bg_target, &mut rng)?;
    let fg = GaussianSet::from_point_cloud(&fg_cloud, SetTag::Foreground);
    let bg = GaussianSet::from_point_cloud(&bg_cloud, SetTag::Background);

    // position steps scale with the camera rig's extent, not the point
    // cloud's: distant backdrop points would inflate the rate far past what
    // the observed object can tolerate
    let centers: Vec<Vector3<f64>> = scene
        .cameras
        .iter()
        .map(|c| -(c.rotation.transpose() * c.translation))
        .collect();
    let (lo, hi) = crate::math::bounding_box(&centers);
    let scene_extent = (hi - lo).norm().max(1e-6);

    let field_bbox = |positions: &[Vector3<f64>]| {
        let (lo, hi) = crate::math::bounding_box(positions);
        let margin = ((hi - lo).norm() * 0.5).max(0.1 * scene_extent);
        (lo - Vector3::repeat(margin), hi + Vector3::repeat(margin))
    };
    let mut fields = Vec::new();
    let mut field_opts = Vec::new();
    if config.unified_field {
        let all: Vec<Vector3<f64>> = fg
            .positions
            .iter()
            .chain(bg.positions.iter())
            .cloned()
            .collect();
        let (lo, hi) = field_bbox(&all);
        let f = DeformationField::new(FieldVariant::Unified, lo, hi, &config.field, &mut rng);
        field_opts.push(FieldOpt::new(&f));
        fields.push(f);
    } else {
        let (lo, hi) = field_bbox(&fg.positions);
        let f = DeformationField::new(FieldVariant::Foreground, lo, hi, &config.field, &mut rng);
        field_opts.push(FieldOpt::new(&f));
        fields.push(f);
        let (lo, hi) = field_bbox(&bg.positions);
        let b = DeformationField::new(FieldVariant::Background, lo, hi, &config.field, &mut rng);
        field_opts.push(FieldOpt::new(&b));
        fields.push(b);
    }

    let fg_opt = SetOpt::new(fg.len());
    let bg_opt = SetOpt::new(bg.len());
    Ok(TrainState {
        config,
        fg,
        bg,
        fields,
        iteration: 0,
        scene_extent,
        fg_opt,
        bg_opt,
        field_opts,
    })
}

// ---------------------------------------------------------------------------
// gradient application

/// Position learning-rate decay: exponential from 1x to 0.01x across a stage.
fn pos_lr(base: f64, extent: f64, progress: f64) -> f64 {
    base * extent * (0.01_f64).powf(progress.clamp(0.0, 1.0))
}

fn step_set(
    set: &mut GaussianSet,
    opt: &mut SetOpt,
    raw: &ParamGrads,
    cfg: &TrainConfig,
    extent: f64,
    progress: f64,
    train_mu: bool,
) {
    let n = set.len();
    let lr_pos = pos_lr(cfg.lr_positions, extent, progress);
    opt.pos.begin();
    opt.rot.begin();
    opt.scale.begin();
    opt.color.begin();
    opt.h.begin();
    opt.omega.begin();
    if train_mu {
        opt.mu.begin();
    }
    let max_log_scale = (0.5 * extent).ln();
    let min_log_scale = (1e-5 * extent).ln();
    for i in 0..n {
        for k in 0..3 {
            set.positions[i][k] -= opt.pos.update(3 * i + k, lr_pos, raw.positions[i][k]);
            let s = set.log_scales[i][k]
                - opt.scale.update(3 * i + k, cfg.lr_scales, raw.log_scales[i][k]);
            set.log_scales[i][k] = s.clamp(min_log_scale, max_log_scale);
            set.colors_raw[i][k] -= opt.color.update(3 * i + k, cfg.lr_colors, raw.colors[i][k]);
        }
        for k in 0..4 {
            set.rotations[i][k] -= opt.rot.update(4 * i + k, cfg.lr_rotations, raw.rotations[i][k]);
        }
        set.opacity_raw[i] -= opt.h.update(i, cfg.lr_opacity, raw.peak_opacity[i]);
        set.bandwidth[i] -= opt.omega.update(i, cfg.lr_opacity, raw.bandwidth[i]);
        if train_mu {
            let mu = set.temporal_center[i]
                - opt.mu.update(i, cfg.lr_opacity, raw.temporal_center[i]);
            set.temporal_center[i] = mu.clamp(0.0, 1.0);
        }
    }
}

fn step_field(field: &mut DeformationField, opt: &mut FieldOpt, g: &crate::hexplane::FieldGrads, cfg: &TrainConfig) {
    for (p, (adam, grads)) in field
        .planes
        .iter_mut()
        .zip(opt.planes.iter_mut().zip(g.planes.iter()))
    {
        adam.step_slice(cfg.lr_planes, &mut p.values, grads);
    }
    opt.trunk_w.step_slice(cfg.lr_heads, &mut field.trunk.w, &g.trunk_w);
    opt.trunk_b.step_slice(cfg.lr_heads, &mut field.trunk.b, &g.trunk_b);
    for (h, ((aw, ab), (gw, gb))) in field
        .heads
        .iter_mut()
        .zip(opt.heads.iter_mut().zip(g.heads.iter()))
    {
        aw.step_slice(cfg.lr_heads, &mut h.w, gw);
        ab.step_slice(cfg.lr_heads, &mut h.b, gb);
    }
}

/// Add Eq.-style regularizer gradients (on realized h and raw omega) into
/// realized-domain gradients, then convert everything to raw domain.
fn raw_grads_with_reg(
    set: &GaussianSet,
    mut realized: ParamGrads,
    cfg: &TrainConfig,
) -> (f64, ParamGrads) {
    let h: Vec<f64> = set.opacity_raw.iter().map(|&r| crate::math::sigmoid(r)).collect();
    let (reg, dh, dw) = opacity_regularizer_with(&h, &set.bandwidth, cfg.lambda_h, cfg.lambda_omega);
    for i in 0..set.len() {
        realized.peak_opacity[i] += dh[i];
        realized.bandwidth[i] += dw[i];
    }
    (reg, set.raw_grads(&realized))
}

// ---------------------------------------------------------------------------
// canonical stage

fn densify_schedule(total: usize, events: u32, canonical: bool) -> Vec<usize> {
    // canonical events at 40%/80% style fractions; dynamic events evenly
    // spaced strictly inside the stage
    (0..events)
        .map(|k| {
            let f = if canonical {
                0.8 * (k + 1) as f64 / events as f64
            } else {
                (k + 1) as f64 / (events + 1) as f64
            };
            ((total as f64 * f) as usize).min(total.saturating_sub(1))
        })
        .collect()
}

/// Stage one: anchor both representations to t=0. Foreground trains against
/// the mask-blended objective, background against the edge-bled target;
/// the deformation fields are untouched.
pub fn train_canonical(
    state: &mut TrainState,
    scene: &LoadedScene,
    log: &mut dyn FnMut(&MetricLine),
) -> Result<()> {
    let cfg = state.config.clone();
    let opts = cfg.render_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xCA50_0001);
    let train_cams = scene.train_camera_indices();
    // every training camera must supply a t=0 frame + mask
    let mut targets = Vec::new();
    for &c in &train_cams {
        let frame = scene.frames[c]
            .first()
            .filter(|f| f.t == 0.0)
            .ok_or_else(|| Error::Precondition(format!("camera {c}: no t=0 frame", c = c)))?;
        let mask = frame.mask.as_ref().ok_or_else(|| {
            Error::Precondition(format!("camera {c}: missing t=0 mask", c = c))
        })?;
        let radius = background_blur_radius(scene.cameras[c].width);
        let bg_tgt = background_target(&frame.image, mask, radius)?;
        targets.push((c, &frame.image, mask, bg_tgt));
    }
    let events = densify_schedule(cfg.canonical_iters, cfg.n_canonical_densify, true);

    for it in 0..cfg.canonical_iters {
        let &(c, image, mask, ref bg_tgt) = &targets[it % targets.len()];
        let cam = &scene.cameras[c];
        let progress = it as f64 / cfg.canonical_iters.max(1) as f64;
        let loss_total;

        if cfg.legacy_canonical {
            // ablation: joint L1 on the merged full-frame render
            let fg_params = state.fg.realize();
            let bg_params = state.bg.realize();
            let merged = crate::gaussians::RenderParams::concat(&fg_params, &bg_params);
            let out = render(&merged, cam, 0.0, &opts);
            let (loss, d_rgb) = panoptic_loss(image, &out.rgb, cfg.loss_norm)?;
            let d_alpha = vec![0.0; out.alpha.len()];
            let g = render_backward(&merged, cam, &out, &d_rgb, &d_alpha, &opts)?;
            let (g_fg, g_bg) = g.split_at(fg_params.len());
            let (reg_f, mut raw_fg) = raw_grads_with_reg(&state.fg, g_fg, &cfg);
            let (reg_b, mut raw_bg) = raw_grads_with_reg(&state.bg, g_bg, &cfg);
            raw_fg.temporal_center.iter_mut().for_each(|v| *v = 0.0);
            raw_bg.temporal_center.iter_mut().for_each(|v| *v = 0.0);
            step_set(&mut state.fg, &mut state.fg_opt, &raw_fg, &cfg, state.scene_extent, progress, false);
            step_set(&mut state.bg, &mut state.bg_opt, &raw_bg, &cfg, state.scene_extent, progress, false);
            loss_total = loss + reg_f + reg_b;
        } else {
            // foreground against the blended target with a fresh random B
            let fg_params = state.fg.realize();
            let out = render(&fg_params, cam, 0.0, &opts);
            let b = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let (loss_f, d_rgb, d_alpha) =
                foreground_loss(image, mask, &out.rgb, &out.alpha, &b, cfg.loss_norm)?;
            let g = render_backward(&fg_params, cam, &out, &d_rgb, &d_alpha, &opts)?;
            let (reg_f, mut raw_fg) = raw_grads_with_reg(&state.fg, g, &cfg);
            raw_fg.temporal_center.iter_mut().for_each(|v| *v = 0.0);
            step_set(&mut state.fg, &mut state.fg_opt, &raw_fg, &cfg, state.scene_extent, progress, false);

            // background against the edge-bled target
            let bg_params = state.bg.realize();
            let out_b = render(&bg_params, cam, 0.0, &opts);
            let (loss_b, d_rgb_b) = background_loss(bg_tgt, &out_b.rgb, cfg.loss_norm)?;
            let d_alpha_b = vec![0.0; out_b.alpha.len()];
            let g_b = render_backward(&bg_params, cam, &out_b, &d_rgb_b, &d_alpha_b, &opts)?;
            let (reg_b, mut raw_bg) = raw_grads_with_reg(&state.bg, g_b, &cfg);
            raw_bg.temporal_center.iter_mut().for_each(|v| *v = 0.0);
            step_set(&mut state.bg, &mut state.bg_opt, &raw_bg, &cfg, state.scene_extent, progress, false);
            loss_total = loss_f + loss_b + reg_f + reg_b;
        }

        if events.contains(&it) {
            let before = state.fg.len();
            let added = densify::densify_canonical(&mut state.fg, &mut rng);
            state.fg_opt.extend(added);
            debug_assert_eq!(state.fg.len(), 2 * before);
        }

        state.iteration += 1;
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.canonical_iters) {
            let psnr = merged_psnr(state, cam, image, 0.0, &opts)?;
            log(&MetricLine {
                iter: state.iteration,
                loss: loss_total,
                psnr,
                n_fg: state.fg.len(),
                n_bg: state.bg.len(),
            });
        }
    }
    Ok(())
}

fn merged_psnr(
    state: &TrainState,
    cam: &Camera,
    target: &ImageRgb,
    t: f64,
    opts: &RenderOptions,
) -> Result<f64> {
    let fg_params = state.fg.realize();
    let bg_params = state.bg.realize();
    let (fg_def, _) = state.field_for(SetTag::Foreground).deform(&fg_params, SetTag::Foreground, t)?;
    let (bg_def, _) = state.field_for(SetTag::Background).deform(&bg_params, SetTag::Background, t)?;
    let merged = crate::gaussians::RenderParams::concat(&fg_def, &bg_def);
    let out = render(&merged, cam, t, opts);
    crate::eval::psnr(target, &out.rgb)
}

// ---------------------------------------------------------------------------
// dynamic stage

/// Stage two: joint training of both sets and deformation fields on the
/// panoptic loss, sampled over (training camera, frame) pairs shuffled per
/// epoch. Foreground densifies on schedule; the background never does.
pub fn train_dynamic(
    state: &mut TrainState,
    scene: &LoadedScene,
    log: &mut dyn FnMut(&MetricLine),
) -> Result<()> {
    let cfg = state.config.clone();
    let opts = cfg.render_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1AA_0002);
    let train_cams = scene.train_camera_indices();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &c in &train_cams {
        for f in 0..scene.frames[c].len() {
            pairs.push((c, f));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Precondition("no training frames".into()));
    }
    let events = densify_schedule(cfg.dynamic_iters, cfg.n_dynamic_densify, false);
    let mut epoch: Vec<(usize, usize)> = Vec::new();
    // accumulated positional-gradient norms for the legacy densify ablation
    let mut grad_accum = vec![0.0; state.fg.len()];
    let mut grad_count = 0u64;

    for it in 0..cfg.dynamic_iters {
        if epoch.is_empty() {
            epoch = pairs.clone();
            epoch.shuffle(&mut rng);
        }
        let (c, f) = epoch.pop().unwrap();
        let cam = &scene.cameras[c];
        let frame = &scene.frames[c][f];
        let t = frame.t;
        let progress = it as f64 / cfg.dynamic_iters.max(1) as f64;

        let fg_params = state.fg.realize();
        let bg_params = state.bg.realize();
        let fgi = state.field_index(SetTag::Foreground);
        let bgi = state.field_index(SetTag::Background);
        let (fg_def, fg_cache) = state.fields[fgi].deform(&fg_params, SetTag::Foreground, t)?;
        let (bg_def, bg_cache) = state.fields[bgi].deform(&bg_params, SetTag::Background, t)?;
        let merged = crate::gaussians::RenderParams::concat(&fg_def, &bg_def);
        let out = render(&merged, cam, t, &opts);
        let (loss, d_rgb) = panoptic_loss(&frame.image, &out.rgb, cfg.loss_norm)?;
        let d_alpha = vec![0.0; out.alpha.len()];
        let g = render_backward(&merged, cam, &out, &d_rgb, &d_alpha, &opts)?;
        let (g_fg_def, g_bg_def) = g.split_at(fg_params.len());
        let (g_fg, field_g_fg) =
            state.fields[fgi].deform_backward(&fg_params, &fg_cache, &g_fg_def);
        let (g_bg, field_g_bg) =
            state.fields[bgi].deform_backward(&bg_params, &bg_cache, &g_bg_def);

        for (a, pg) in grad_accum.iter_mut().zip(g_fg.positions.iter()) {
            *a += pg.norm();
        }
        grad_count += 1;

        let (reg_f, raw_fg) = raw_grads_with_reg(&state.fg, g_fg, &cfg);
        let (reg_b, raw_bg) = raw_grads_with_reg(&state.bg, g_bg, &cfg);
        step_set(&mut state.fg, &mut state.fg_opt, &raw_fg, &cfg, state.scene_extent, progress, true);
        step_set(&mut state.bg, &mut state.bg_opt, &raw_bg, &cfg, state.scene_extent, progress, true);
        if fgi == bgi {
            let mut combined = field_g_fg;
            for (a, b) in combined.planes.iter_mut().zip(field_g_bg.planes.iter()) {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
            for (x, y) in combined.trunk_w.iter_mut().zip(field_g_bg.trunk_w.iter()) {
                *x += y;
            }
            for (x, y) in combined.trunk_b.iter_mut().zip(field_g_bg.trunk_b.iter()) {
                *x += y;
            }
            for ((aw, ab), (bw, bb)) in combined.heads.iter_mut().zip(field_g_bg.heads.iter()) {
                for (x, y) in aw.iter_mut().zip(bw.iter()) {
                    *x += y;
                }
                for (x, y) in ab.iter_mut().zip(bb.iter()) {
                    *x += y;
                }
            }
            step_field(&mut state.fields[fgi], &mut state.field_opts[fgi], &combined, &cfg);
        } else {
            step_field(&mut state.fields[fgi], &mut state.field_opts[fgi], &field_g_fg, &cfg);
            step_field(&mut state.fields[bgi], &mut state.field_opts[bgi], &field_g_bg, &cfg);
        }

        if events.contains(&it) && state.fg.len() >= 10 {
            let added = if cfg.legacy_densify {
                let norms: Vec<f64> = grad_accum
                    .iter()
                    .map(|&a| a / grad_count.max(1) as f64)
                    .collect();
                densify::densify_legacy(
                    &mut state.fg,
                    &norms,
                    densify::LEGACY_GRAD_THRESHOLD,
                    &mut rng,
                )?
            } else {
                let stats = densify::displacement_stats(&state.fields[fgi], &state.fg)?;
                densify::densify_dynamic(&mut state.fg, &stats, &mut rng)?
            };
            state.fg_opt.extend(added);
            grad_accum = vec![0.0; state.fg.len()];
            grad_count = 0;
            if cfg.prune_low_opacity {
                // rebuilding optimizer state keeps indices aligned after a prune
                let removed =
                    densify::prune_low_opacity(&mut state.fg, densify::PRUNE_OPACITY_THRESHOLD);
                if removed > 0 {
                    state.fg_opt = SetOpt::new(state.fg.len());
                    grad_accum = vec![0.0; state.fg.len()];
                }
            }
        }

        state.iteration += 1;
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.dynamic_iters) {
            let psnr = merged_psnr(state, cam, &frame.image, t, &opts)?;
            log(&MetricLine {
                iter: state.iteration,
                loss: loss + reg_f + reg_b,
                psnr,
                n_fg: state.fg.len(),
                n_bg: state.bg.len(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpointing

fn push_set(ck: &mut Checkpoint, prefix: &str, set: &GaussianSet) {
    let n = set.len();
    ck.push(
        &format!("{prefix}.positions"),
        vec![n, 3],
        set.positions.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
    );
    ck.push(
        &format!("{prefix}.rotations"),
        vec![n, 4],
        set.rotations.iter().flatten().copied().collect(),
    );
    ck.push(
        &format!("{prefix}.log_scales"),
        vec![n, 3],
        set.log_scales.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
    );
    ck.push(
        &format!("{prefix}.colors_raw"),
        vec![n, 3],
        set.colors_raw.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
    );
    ck.push(&format!("{prefix}.opacity_raw"), vec![n], set.opacity_raw.clone());
    ck.push(&format!("{prefix}.bandwidth"), vec![n], set.bandwidth.clone());
    ck.push(
        &format!("{prefix}.temporal_center"),
        vec![n],
        set.temporal_center.clone(),
    );
}

fn get_set(ck: &Checkpoint, prefix: &str, tag: SetTag) -> Result<GaussianSet> {
    let pos = ck.get(&format!("{prefix}.positions"))?;
    let n = *pos.shape.first().unwrap_or(&0);
    let vec3 = |name: &str| -> Result<Vec<Vector3<f64>>> {
        let a = ck.get(&format!("{prefix}.{name}"))?;
        if a.data.len() != 3 * n {
            return Err(Error::Checkpoint(format!("{prefix}.{name}: bad length")));
        }
        Ok(a.data.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    };
    let scalar = |name: &str| -> Result<Vec<f64>> {
        let a = ck.get(&format!("{prefix}.{name}"))?;
        if a.data.len() != n {
            return Err(Error::Checkpoint(format!("{prefix}.{name}: bad length")));
        }
        Ok(a.data.clone())
    };
    let rot = ck.get(&format!("{prefix}.rotations"))?;
    if rot.data.len() != 4 * n {
        return Err(Error::Checkpoint(format!("{prefix}.rotations: bad length")));
    }
    Ok(GaussianSet {
        positions: vec3("positions")?,
        rotations: rot.data.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        log_scales: vec3("log_scales")?,
        colors_raw: vec3("colors_raw")?,
        opacity_raw: scalar("opacity_raw")?,
        bandwidth: scalar("bandwidth")?,
        temporal_center: scalar("temporal_center")?,
        tag,
    })
}

fn push_adam(ck: &mut Checkpoint, name: &str, adam: &Adam) {
    ck.push(&format!("{name}.m"), vec![adam.m.len()], adam.m.clone());
    ck.push(&format!("{name}.v"), vec![adam.v.len()], adam.v.clone());
    ck.push(&format!("{name}.t"), vec![1], vec![adam.t as f64]);
}

fn get_adam(ck: &Checkpoint, name: &str) -> Result<Adam> {
    Ok(Adam {
        m: ck.get(&format!("{name}.m"))?.data.clone(),
        v: ck.get(&format!("{name}.v"))?.data.clone(),
        t: ck.get(&format!("{name}.t"))?.data[0] as u64,
    })
}

fn push_field(ck: &mut Checkpoint, prefix: &str, field: &DeformationField) {
    for (i, p) in field.planes.iter().enumerate() {
        ck.push(
            &format!("{prefix}.plane{i}"),
            vec![p.rows, p.cols, p.channels],
            p.values.clone(),
        );
    }
    ck.push(
        &format!("{prefix}.trunk.w"),
        vec![field.trunk.out_dim, field.trunk.in_dim],
        field.trunk.w.clone(),
    );
    ck.push(&format!("{prefix}.trunk.b"), vec![field.trunk.out_dim], field.trunk.b.clone());
    for (j, h) in field.heads.iter().enumerate() {
        ck.push(
            &format!("{prefix}.head{j}.w"),
            vec![h.out_dim, h.in_dim],
            h.w.clone(),
        );
        ck.push(&format!("{prefix}.head{j}.b"), vec![h.out_dim], h.b.clone());
    }
    ck.push(
        &format!("{prefix}.bbox"),
        vec![2, 3],
        vec![
            field.bbox_lo.x,
            field.bbox_lo.y,
            field.bbox_lo.z,
            field.bbox_hi.x,
            field.bbox_hi.y,
            field.bbox_hi.z,
        ],
    );
}

fn get_field(ck: &Checkpoint, prefix: &str, variant: FieldVariant) -> Result<DeformationField> {
    use crate::hexplane::{LinearLayer, PlaneGrid};
    let mut planes = Vec::with_capacity(6);
    for i in 0..6 {
        let a = ck.get(&format!("{prefix}.plane{i}"))?;
        if a.shape.len() != 3 {
            return Err(Error::Checkpoint(format!("{prefix}.plane{i}: bad shape")));
        }
        planes.push(PlaneGrid {
            rows: a.shape[0],
            cols: a.shape[1],
            channels: a.shape[2],
            values: a.data.clone(),
        });
    }
    let layer = |name: String| -> Result<LinearLayer> {
        let w = ck.get(&format!("{name}.w"))?;
        let b = ck.get(&format!("{name}.b"))?;
        if w.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("{name}.w: bad shape")));
        }
        Ok(LinearLayer {
            out_dim: w.shape[0],
            in_dim: w.shape[1],
            w: w.data.clone(),
            b: b.data.clone(),
        })
    };
    let trunk = layer(format!("{prefix}.trunk"))?;
    let n_heads = variant.head_dims().len();
    let mut heads = Vec::with_capacity(n_heads);
    for j in 0..n_heads {
        heads.push(layer(format!("{prefix}.head{j}"))?);
    }
    let bbox = ck.get(&format!("{prefix}.bbox"))?;
    if bbox.data.len() != 6 {
        return Err(Error::Checkpoint(format!("{prefix}.bbox: bad length")));
    }
    Ok(DeformationField {
        planes,
        trunk,
        heads,
        bbox_lo: Vector3::new(bbox.data[0], bbox.data[1], bbox.data[2]),
        bbox_hi: Vector3::new(bbox.data[3], bbox.data[4], bbox.data[5]),
        variant,
    })
}

pub fn to_checkpoint(state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::new(state.iteration, state.config.to_json());
    ck.push("scene_extent", vec![1], vec![state.scene_extent]);
    push_set(&mut ck, "fg", &state.fg);
    push_set(&mut ck, "bg", &state.bg);
    for (i, f) in state.fields.iter().enumerate() {
        push_field(&mut ck, &format!("field{i}"), f);
    }
    for (prefix, opt) in [("fg", &state.fg_opt), ("bg", &state.bg_opt)] {
        push_adam(&mut ck, &format!("adam.{prefix}.pos"), &opt.pos);
        push_adam(&mut ck, &format!("adam.{prefix}.rot"), &opt.rot);
        push_adam(&mut ck, &format!("adam.{prefix}.scale"), &opt.scale);
        push_adam(&mut ck, &format!("adam.{prefix}.color"), &opt.color);
        push_adam(&mut ck, &format!("adam.{prefix}.h"), &opt.h);
        push_adam(&mut ck, &format!("adam.{prefix}.omega"), &opt.omega);
        push_adam(&mut ck, &format!("adam.{prefix}.mu"), &opt.mu);
    }
    for (i, fo) in state.field_opts.iter().enumerate() {
        for (j, a) in fo.planes.iter().enumerate() {
            push_adam(&mut ck, &format!("adam.field{i}.plane{j}"), a);
        }
        push_adam(&mut ck, &format!("adam.field{i}.trunk.w"), &fo.trunk_w);
        push_adam(&mut ck, &format!("adam.field{i}.trunk.b"), &fo.trunk_b);
        for (j, (aw, ab)) in fo.heads.iter().enumerate() {
            push_adam(&mut ck, &format!("adam.field{i}.head{j}.w"), aw);
            push_adam(&mut ck, &format!("adam.field{i}.head{j}.b"), ab);
        }
    }
    ck
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<TrainState> {
    let config = TrainConfig::from_json(&ck.config_json)?;
    let scene_extent = ck.get("scene_extent")?.data[0];
    let fg = get_set(ck, "fg", SetTag::Foreground)?;
    let bg = get_set(ck, "bg", SetTag::Background)?;
    let mut fields = Vec::new();
    if config.unified_field {
        fields.push(get_field(ck, "field0", FieldVariant::Unified)?);
    } else {
        fields.push(get_field(ck, "field0", FieldVariant::Foreground)?);
        fields.push(get_field(ck, "field1", FieldVariant::Background)?);
    }
    let set_opt = |prefix: &str| -> Result<SetOpt> {
        Ok(SetOpt {
            pos: get_adam(ck, &format!("adam.{prefix}.pos"))?,
            rot: get_adam(ck, &format!("adam.{prefix}.rot"))?,
            scale: get_adam(ck, &format!("adam.{prefix}.scale"))?,
            color: get_adam(ck, &format!("adam.{prefix}.color"))?,
            h: get_adam(ck, &format!("adam.{prefix}.h"))?,
            omega: get_adam(ck, &format!("adam.{prefix}.omega"))?,
            mu: get_adam(ck, &format!("adam.{prefix}.mu"))?,
        })
    };
    let fg_opt = set_opt("fg")?;
    let bg_opt = set_opt("bg")?;
    let mut field_opts = Vec::new();
    for (i, f) in fields.iter().enumerate() {
        let mut planes = Vec::new();
        for j in 0..f.planes.len() {
            planes.push(get_adam(ck, &format!("adam.field{i}.plane{j}"))?);
        }
        let mut heads = Vec::new();
        for j in 0..f.heads.len() {
            heads.push((
                get_adam(ck, &format!("adam.field{i}.head{j}.w"))?,
                get_adam(ck, &format!("adam.field{i}.head{j}.b"))?,
            ));
        }
        field_opts.push(FieldOpt {
            planes,
            trunk_w: get_adam(ck, &format!("adam.field{i}.trunk.w"))?,
            trunk_b: get_adam(ck, &format!("adam.field{i}.trunk.b"))?,
            heads,
        });
    }
    Ok(TrainState {
        config,
        fg,
        bg,
        fields,
        iteration: ck.iteration,
        scene_extent,
        fg_opt,
        bg_opt,
        field_opts,
    })
}

/// Render the merged scene from a trained state at (camera, t).
pub fn render_state(
    state: &TrainState,
    cam: &Camera,
    t: f64,
) -> Result<crate::rasterizer::RenderOutput> {
    let opts = state.config.render_options();
    let fg_params = state.fg.realize();
    let bg_params = state.bg.realize();
    let (fg_def, _) = state.field_for(SetTag::Foreground).deform(&fg_params, SetTag::Foreground, t)?;
    let (bg_def, _) = state.field_for(SetTag::Background).deform(&bg_params, SetTag::Background, t)?;
    let merged = crate::gaussians::RenderParams::concat(&fg_def, &bg_def);
    Ok(render(&merged, cam, t, &opts))
}

/// Foreground-only render (used for segmentation IoU and masked metrics).
pub fn render_state_foreground(
    state: &TrainState,
    cam: &Camera,
    t: f64,
) -> Result<crate::rasterizer::RenderOutput> {
    let opts = state.config.render_options();
    let fg_params = state.fg.realize();
    let (fg_def, _) = state.field_for(SetTag::Foreground).deform(&fg_params, SetTag::Foreground, t)?;
    Ok(render(&fg_def, cam, t, &opts))
}

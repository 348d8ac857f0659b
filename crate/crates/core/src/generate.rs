//! Dataset generation: seeded colon scenes rendered by the raster renderer
//! or the cinematic path tracer.

use rand::Rng;
use rayon::prelude::*;

use crate::cinematic::{render_style_set, PathTracerConfig, RenderStyle};
use crate::config::{RunConfig, SplitConfig};
use crate::dataset::Split;
use crate::endoscope::{make_trajectory, TrajectoryJitter};
use crate::error::{param, Result};
use crate::frame::{Frame, FrameMeta, Renderer};
use crate::raster::render_raster_frame;
use crate::seed::{mix, rng_for};
use crate::volume::{make_colon_volume, ColonParams, DensityVolume};

/// Scene-id namespaces, so that datasets generated with the same seed never
/// share scenes.
pub const SYNTHETIC_TAG: u64 = 0x5EED_0001;
pub const CINEMATIC_TAG: u64 = 0x5EED_0002;

pub fn scene_id(seed: u64, tag: u64, index: usize) -> u64 {
    mix(&[seed, tag, index as u64])
}

/// Colon geometry of a scene, drawn from the configured ranges.
pub fn scene_params(cfg: &RunConfig, scene_id: u64) -> ColonParams {
    let s = &cfg.scenes;
    let mut rng = rng_for(&[scene_id, 0x5CE7E]);
    let mut draw = |r: [f64; 2]| if r[0] < r[1] { rng.random_range(r[0]..=r[1]) } else { r[0] };
    ColonParams {
        radius_mm: draw(s.radius_mm),
        fold_amplitude_mm: draw(s.fold_amplitude_mm),
        fold_period_mm: draw(s.fold_period_mm),
        centerline_curvature: draw(s.centerline_curvature),
        length_mm: s.length_mm,
        wall_thickness_mm: s.wall_thickness_mm,
        seed: scene_id,
    }
}

pub fn scene_volume(cfg: &RunConfig, params: &ColonParams) -> Result<DensityVolume> {
    make_colon_volume(params, params.required_dims(cfg.scenes.spacing_mm), cfg.scenes.spacing_mm)
}

/// Split of scene `index` out of `n`: the last scenes go to test, the ones
/// before them to validation.
pub fn assign_split(index: usize, n: usize, splits: &SplitConfig) -> Split {
    let n_test = (n as f64 * splits.test_fraction).round() as usize;
    let n_val = (n as f64 * splits.val_fraction).round() as usize;
    if index + n_test >= n {
        Split::Test
    } else if index + n_test + n_val >= n {
        Split::Val
    } else {
        Split::Train
    }
}

/// `count` raster frames, `poses_per_scene` per scene along jittered
/// trajectories, with splits assigned per scene.
pub fn generate_synthetic(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<(Frame, Split)>> {
    if count == 0 {
        return Err(param("count must be >= 1"));
    }
    let cam = cfg.camera.build()?;
    let rig = cfg.rig()?;
    let per = cfg.scenes.poses_per_scene;
    let n_scenes = count.div_ceil(per);
    let scenes: Vec<Vec<(Frame, Split)>> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let id = scene_id(seed, SYNTHETIC_TAG, i);
            let params = scene_params(cfg, id);
            let vol = scene_volume(cfg, &params)?;
            let jitter = TrajectoryJitter { seed, max_angle_deg: cfg.scenes.jitter_deg };
            let poses = make_trajectory(&params, per, Some(jitter))?;
            let n_here = per.min(count - i * per);
            let split = assign_split(i, n_scenes, &cfg.splits);
            poses[..n_here]
                .iter()
                .enumerate()
                .map(|(p, pose)| {
                    let meta =
                        FrameMeta { scene_id: id, style_id: 0, pose_index: p as u32, renderer: Renderer::Raster, seed };
                    Ok((render_raster_frame(&vol, &cam, &rig, pose, &cfg.raster, meta)?, split))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(scenes.into_iter().flatten().collect())
}

/// Renders one view of each of `n_scenes` scenes in every given style. The
/// styles of a scene share its depth map. Scene ids come from `(seed, tag)`.
pub fn cinematic_scenes(
    cfg: &RunConfig,
    seed: u64,
    tag: u64,
    n_scenes: usize,
    styles: &[RenderStyle],
    tracer: &PathTracerConfig,
) -> Result<Vec<Vec<Frame>>> {
    tracer.validate()?;
    if styles.is_empty() {
        return Err(param("at least one style is required"));
    }
    let cam = cfg.camera.build()?;
    let rig = cfg.rig()?;
    (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let id = scene_id(seed, tag, i);
            let params = scene_params(cfg, id);
            let vol = scene_volume(cfg, &params)?;
            let jitter = TrajectoryJitter { seed, max_angle_deg: cfg.scenes.jitter_deg };
            let poses = make_trajectory(&params, cfg.scenes.poses_per_scene, Some(jitter))?;
            let p = (rng_for(&[id, 0x905E]).random::<u64>() % poses.len() as u64) as usize;
            let meta =
                FrameMeta { scene_id: id, style_id: 0, pose_index: p as u32, renderer: Renderer::Cinematic, seed };
            let (frames, stats) = render_style_set(&vol, &cam, &rig, &poses[p], styles, tracer, meta)?;
            if stats.rejected > 0 {
                log::warn!("scene {id:016x}: {} of {} path samples were non-finite", stats.rejected, stats.samples);
            }
            Ok(frames)
        })
        .collect()
}

/// Cinematic dataset of `n_scenes` scenes in the first `n_styles` configured
/// styles at `spp` samples per pixel, with splits assigned per scene.
pub fn generate_cinematic(
    cfg: &RunConfig,
    n_scenes: usize,
    n_styles: usize,
    spp: u32,
    seed: u64,
) -> Result<Vec<(Frame, Split)>> {
    if n_scenes == 0 {
        return Err(param("scene count must be >= 1"));
    }
    if n_styles == 0 || n_styles > cfg.styles.len() {
        return Err(param(format!("styles must be in 1..={}, got {n_styles}", cfg.styles.len())));
    }
    let styles = &cfg.render_styles()?[..n_styles];
    let tracer = PathTracerConfig { spp, seed, ..cfg.path_tracer };
    let scenes = cinematic_scenes(cfg, seed, CINEMATIC_TAG, n_scenes, styles, &tracer)?;
    Ok(scenes
        .into_iter()
        .enumerate()
        .flat_map(|(i, frames)| {
            let split = assign_split(i, n_scenes, &cfg.splits);
            frames.into_iter().map(move |f| (f, split))
        })
        .collect())
}

//! Monte Carlo volumetric path tracer for photorealistic renderings.
//!
//! Radiance is estimated with delta tracking against a macrocell majorant
//! grid, next-event estimation toward every tip light and Russian roulette.
//! Where a path reaches tissue at or above the surface iso-density it reflects
//! off a Lambertian plus normalized Blinn-Phong surface instead of scattering
//! in the volume. Lights are the only emitters.
//!
//! Depth is not taken from the random paths: every pixel gets the
//! deterministic distance at which the primary ray's accumulated opacity
//! reaches a threshold, so several styles that share extinction share one
//! depth map.

pub mod medium;
pub mod phase;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::endoscope::{EndoscopeCamera, LightRig, Pose};
use crate::error::{param, Error, Result};
use crate::frame::{tone_map, DepthMap, Frame, FrameMeta, ImageRgb, Renderer};
use crate::seed::rng_for;
use crate::volume::{DensityVolume, TransferFunction};
use crate::{Ray, Vec3};

pub use medium::{optical_depth, transmittance, MajorantGrid, Medium};
pub use phase::{hg_pdf, hg_sample, PhaseSample};

const BISECTION_STEPS: usize = 30;
const MIN_ROUGHNESS: f64 = 0.02;

/// One set of rendering parameters. Styles of the same scene may differ in
/// color, reflectance and lighting but must share extinction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub style_id: u32,
    pub transfer: TransferFunction,
    pub light_color: [f64; 3],
    pub surface_roughness: f64,
    pub specular_weight: f64,
    pub exposure: f64,
}

impl RenderStyle {
    pub fn validate(&self) -> Result<()> {
        if self.light_color.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(param("light_color components must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.surface_roughness) {
            return Err(param(format!("surface_roughness must be in [0, 1], got {}", self.surface_roughness)));
        }
        if !(0.0..=1.0).contains(&self.specular_weight) {
            return Err(param(format!("specular_weight must be in [0, 1], got {}", self.specular_weight)));
        }
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return Err(param(format!("exposure must be positive, got {}", self.exposure)));
        }
        Ok(())
    }

    /// Surface BRDF for unit normal `n`, outgoing `wo` and incident `wi`
    /// (both pointing away from the surface), per channel.
    pub fn brdf(&self, albedo: &[f64; 3], n: &Vec3, wo: &Vec3, wi: &Vec3) -> [f64; 3] {
        let s = self.specular_weight;
        let diffuse = albedo.map(|a| (1.0 - s) * a / PI);
        let h = wo + wi;
        let spec = if s > 0.0 && h.norm() > 1e-12 {
            let r = self.surface_roughness.max(MIN_ROUGHNESS);
            let e = 2.0 / (r * r) - 2.0;
            let nh = n.dot(&h.normalize()).max(0.0);
            s * (e + 2.0) / (8.0 * PI) * nh.powf(e)
        } else {
            0.0
        };
        diffuse.map(|d| d + spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathTracerConfig {
    pub spp: u32,
    /// Maximum number of scattering or reflection events per path.
    pub max_bounces: u32,
    pub rr_start_bounce: u32,
    pub opacity_threshold: f64,
    pub seed: u64,
    /// Longest free segment considered, mm. The volume diagonal when `None`;
    /// also the depth written where opacity never reaches the threshold.
    pub max_distance_mm: Option<f64>,
    /// Density at which the surface model replaces volume scattering.
    pub iso: f64,
    /// Marching step for shadow rays and depth, mm. Half the voxel spacing
    /// when `None`.
    pub step_mm: Option<f64>,
}

impl Default for PathTracerConfig {
    fn default() -> Self {
        Self {
            spp: 16,
            max_bounces: 6,
            rr_start_bounce: 3,
            opacity_threshold: 0.95,
            seed: 0,
            max_distance_mm: None,
            iso: 0.5,
            step_mm: None,
        }
    }
}

impl PathTracerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spp < 1 {
            return Err(param("spp must be >= 1"));
        }
        if self.max_bounces < 1 {
            return Err(param("max_bounces must be >= 1"));
        }
        if !(self.opacity_threshold > 0.0 && self.opacity_threshold < 1.0) {
            return Err(param(format!("opacity_threshold must be in (0, 1), got {}", self.opacity_threshold)));
        }
        if !(self.iso > 0.0 && self.iso < 1.0) {
            return Err(param(format!("iso must be in (0, 1), got {}", self.iso)));
        }
        if let Some(d) = self.max_distance_mm {
            if !(d > 0.0) {
                return Err(param("max_distance_mm must be positive"));
            }
        }
        if let Some(s) = self.step_mm {
            if !(s > 0.0) {
                return Err(param("step_mm must be positive"));
            }
        }
        Ok(())
    }

    fn step(&self, vol: &DensityVolume) -> f64 {
        self.step_mm.unwrap_or(0.5 * vol.spacing())
    }

    fn max_distance(&self, vol: &DensityVolume) -> f64 {
        self.max_distance_mm.unwrap_or_else(|| vol.diagonal())
    }
}

/// Sample counts of a render. Non-finite path samples are dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub samples: u64,
    pub rejected: u64,
}

impl RenderStats {
    pub fn rejected_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.rejected as f64 / self.samples as f64
        }
    }

    fn add(self, other: Self) -> Self {
        Self { samples: self.samples + other.samples, rejected: self.rejected + other.rejected }
    }
}

/// Everything a path needs that does not change between samples.
pub struct Scene<'a> {
    pub medium: Medium<'a>,
    pub style: &'a RenderStyle,
    pub rig: &'a LightRig,
    pub pose: &'a Pose,
}

impl<'a> Scene<'a> {
    pub fn new(vol: &'a DensityVolume, style: &'a RenderStyle, rig: &'a LightRig, pose: &'a Pose) -> Self {
        Self { medium: Medium::new(vol, &style.transfer), style, rig, pose }
    }
}

enum Event {
    Escape,
    Volume { t: f64, density: f64 },
    Surface { t: f64 },
}

fn mul(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

fn add_scaled(acc: &mut [f64; 3], a: [f64; 3], s: f64) {
    for c in 0..3 {
        acc[c] += a[c] * s;
    }
}

/// Delta tracking along `ray` from `t_start` to `t_end`.
fn track(medium: &Medium, ray: &Ray, t_start: f64, t_end: f64, iso: f64, rng: &mut ChaCha8Rng) -> Event {
    let mut event = Event::Escape;
    let mut t_below = t_start;
    let mut hit = None;
    medium.grid.traverse(ray, t_start, t_end, |a, b, majorant| {
        if majorant <= 0.0 {
            return true;
        }
        let mut t = a;
        loop {
            t -= (1.0 - rng.random::<f64>()).ln() / majorant;
            if t >= b {
                return true;
            }
            let density = medium.vol.sample(&ray.at(t));
            if density >= iso {
                hit = Some(t);
                return false;
            }
            t_below = t;
            if rng.random::<f64>() * majorant < medium.tf.sigma_t(density) {
                event = Event::Volume { t, density };
                return false;
            }
        }
    });
    if let Some(t_hit) = hit {
        // Step back to the nearest sub-iso point before the hit, then bisect.
        let half = 0.5 * medium.vol.spacing();
        let mut hi = t_hit;
        let mut lo = (hi - half).max(t_below);
        while lo > t_below && medium.vol.sample(&ray.at(lo)) >= iso {
            hi = lo;
            lo = (lo - half).max(t_below);
        }
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if medium.vol.sample(&ray.at(mid)) >= iso {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        event = Event::Surface { t: hi };
    }
    event
}

/// Shadow transmittance from `p` to a light position.
fn shadow(medium: &Medium, p: &Vec3, light: &Vec3, step: f64) -> f64 {
    (-medium.optical_depth(p, light, step)).exp()
}

/// One radiance sample along `ray`, linear RGB before exposure.
pub fn trace_path(scene: &Scene, ray: &Ray, config: &PathTracerConfig, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let medium = &scene.medium;
    let vol = medium.vol;
    let step = config.step(vol);
    let max_distance = config.max_distance(vol);
    let offset = 0.5 * vol.spacing();
    let mut radiance = [0.0; 3];
    let mut throughput = [1.0; 3];
    let mut ray = *ray;
    let mut bounces = 0;
    while let Some((t0, t1)) = vol.clip_ray(&ray.origin, &ray.dir) {
        let t_start = t0.max(0.0);
        if vol.sample(&ray.at(t_start)) >= config.iso {
            break;
        }
        let event = track(medium, &ray, t_start, t1.min(max_distance), config.iso, rng);
        let lights = |p: &Vec3| scene.rig.irradiance(scene.pose, p);
        match event {
            Event::Escape => break,
            Event::Surface { t } => {
                let p = ray.at(t);
                let g = vol.gradient(&p);
                let mut n = if g.norm() > 1e-12 { -g.normalize() } else { -ray.dir };
                if n.dot(&ray.dir) > 0.0 {
                    n = -n;
                }
                let wo = -ray.dir;
                let albedo = scene.style.transfer.apply(config.iso).albedo_color;
                let origin = p + n * offset;
                for l in lights(&p) {
                    let cos = n.dot(&l.direction);
                    if cos <= 0.0 {
                        continue;
                    }
                    let f = scene.style.brdf(&albedo, &n, &wo, &l.direction);
                    let tr = shadow(medium, &origin, &l.position, step);
                    let light = mul(l.color, scene.style.light_color);
                    add_scaled(&mut radiance, mul(mul(throughput, f), light), cos * l.irradiance * tr);
                }
                bounces += 1;
                if bounces >= config.max_bounces {
                    break;
                }
                let wi = phase::around(&n, rng.random::<f64>().sqrt(), 2.0 * PI * rng.random::<f64>());
                let f = scene.style.brdf(&albedo, &n, &wo, &wi);
                throughput = mul(throughput, f.map(|v| v * PI));
                ray = Ray { origin, dir: wi };
            }
            Event::Volume { t, density } => {
                let p = ray.at(t);
                let props = medium.tf.apply(density);
                let weight = props.albedo_color.map(|a| a * props.sigma_s / props.sigma_t());
                let beta = mul(throughput, weight);
                for l in lights(&p) {
                    let phase = phase::hg_eval(props.phase_g, ray.dir.dot(&l.direction).clamp(-1.0, 1.0));
                    let tr = shadow(medium, &p, &l.position, step);
                    let light = mul(l.color, scene.style.light_color);
                    add_scaled(&mut radiance, mul(beta, light), phase * l.irradiance * tr);
                }
                bounces += 1;
                if bounces >= config.max_bounces {
                    break;
                }
                throughput = beta;
                let s = phase::hg_sample_unchecked(props.phase_g, &ray.dir, rng);
                ray = Ray { origin: p, dir: s.direction };
            }
        }
        if bounces >= config.rr_start_bounce {
            let q = throughput.iter().cloned().fold(0.0, f64::max).clamp(0.05, 0.95);
            if rng.random::<f64>() >= q {
                break;
            }
            throughput = throughput.map(|v| v / q);
        }
    }
    radiance
}

/// Mean of `spp` path samples for one camera ray; non-finite samples are
/// dropped and counted.
pub fn estimate_pixel(scene: &Scene, ray: &Ray, config: &PathTracerConfig, rng: &mut ChaCha8Rng) -> ([f64; 3], RenderStats) {
    let mut sum = [0.0; 3];
    let mut stats = RenderStats::default();
    for _ in 0..config.spp {
        let s = trace_path(scene, ray, config, rng);
        stats.samples += 1;
        if s.iter().all(|v| v.is_finite()) {
            add_scaled(&mut sum, s, 1.0);
        } else {
            stats.rejected += 1;
        }
    }
    let accepted = (stats.samples - stats.rejected).max(1) as f64;
    (sum.map(|v| v / accepted), stats)
}

/// Opacity-threshold depth of every pixel's primary ray; `sentinel` where the
/// threshold is never reached.
pub fn opacity_depth_map(
    vol: &DensityVolume,
    tf: &TransferFunction,
    cam: &EndoscopeCamera,
    pose: &Pose,
    config: &PathTracerConfig,
) -> Result<DepthMap> {
    config.validate()?;
    cam.validate()?;
    let max_distance = config.max_distance(vol);
    let step = config.step(vol);
    let medium = Medium::new(vol, tf);
    let (w, h) = (cam.width, cam.height);
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = cam.pixel_ray(pose, i % w, i / w)?;
            Ok(medium
                .opacity_depth(&ray, config.opacity_threshold, step, max_distance)
                .map_or(max_distance as f32, |d| d as f32))
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(DepthMap { width: w, height: h, sentinel: max_distance as f32, data })
}

fn render_image(
    vol: &DensityVolume,
    cam: &EndoscopeCamera,
    rig: &LightRig,
    pose: &Pose,
    style: &RenderStyle,
    config: &PathTracerConfig,
    meta: &FrameMeta,
) -> Result<(ImageRgb, RenderStats)> {
    let scene = Scene::new(vol, style, rig, pose);
    let (w, h) = (cam.width, cam.height);
    let pixels = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = cam.pixel_ray(pose, i % w, i / w)?;
            let mut rng =
                rng_for(&[config.seed, meta.scene_id, meta.pose_index as u64, style.style_id as u64, i as u64]);
            Ok(estimate_pixel(&scene, &ray, config, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut image = ImageRgb::new(w, h);
    let mut stats = RenderStats::default();
    for (i, (rgb, s)) in pixels.into_iter().enumerate() {
        image.set(i % w, i / w, rgb.map(|v| tone_map(style.exposure * v) as f32));
        stats = stats.add(s);
    }
    Ok((image, stats))
}

/// Renders one style. The image averages `spp` paths per pixel; the depth map
/// is the deterministic opacity-threshold depth.
pub fn render_cinematic_frame(
    vol: &DensityVolume,
    cam: &EndoscopeCamera,
    rig: &LightRig,
    pose: &Pose,
    style: &RenderStyle,
    config: &PathTracerConfig,
    meta: FrameMeta,
) -> Result<(Frame, RenderStats)> {
    let (mut frames, stats) = render_style_set(vol, cam, rig, pose, std::slice::from_ref(style), config, meta)?;
    Ok((frames.remove(0), stats))
}

/// Renders every style of one scene view. Depth is computed once and copied
/// into each frame; all frames carry the scene id from `meta`.
pub fn render_style_set(
    vol: &DensityVolume,
    cam: &EndoscopeCamera,
    rig: &LightRig,
    pose: &Pose,
    styles: &[RenderStyle],
    config: &PathTracerConfig,
    meta: FrameMeta,
) -> Result<(Vec<Frame>, RenderStats)> {
    let first = styles.first().ok_or_else(|| param("at least one render style is required"))?;
    for s in styles {
        s.validate()?;
        if !s.transfer.same_extinction(&first.transfer) {
            return Err(Error::Consistency(format!(
                "style {} has a different extinction profile than style {}",
                s.style_id, first.style_id
            )));
        }
    }
    let depth = opacity_depth_map(vol, &first.transfer, cam, pose, config)?;
    let mut frames = Vec::with_capacity(styles.len());
    let mut stats = RenderStats::default();
    for style in styles {
        let meta = FrameMeta { renderer: Renderer::Cinematic, style_id: style.style_id, seed: config.seed, ..meta };
        let (image, s) = render_image(vol, cam, rig, pose, style, config, &meta)?;
        stats = stats.add(s);
        frames.push(Frame::new(image, depth.clone(), meta)?);
    }
    Ok((frames, stats))
}

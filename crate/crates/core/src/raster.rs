//! First-surface renderer for the grayscale training set.
//!
//! Each pixel marches its camera ray to the first iso-density crossing and
//! shades it with single-bounce Lambertian lighting from the tip lights. There
//! are no shadows, no scattering and no randomness: the depth written for a
//! pixel is exactly the distance the march found.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::endoscope::{EndoscopeCamera, LightRig, Pose};
use crate::error::{param, Result};
use crate::frame::{tone_map, DepthMap, Frame, FrameMeta, ImageRgb, Renderer};
use crate::volume::DensityVolume;
use crate::{Ray, Vec3};

const BISECTION_STEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub distance: f64,
    pub point: Vec3,
    /// Unit normal pointing out of the tissue (against the density gradient).
    pub normal: Vec3,
}

/// Finds the first crossing of `density = iso` along `ray`, marching at half
/// the voxel spacing and refining the bracket by bisection. Returns `None`
/// when the ray leaves the volume or passes `max_distance` first.
pub fn march_first_surface(
    vol: &DensityVolume,
    ray: &Ray,
    iso: f64,
    max_distance: f64,
) -> Option<SurfaceHit> {
    let (_, t_exit) = vol.clip_ray(&ray.origin, &ray.dir)?;
    let t_end = t_exit.min(max_distance);
    let step = 0.5 * vol.spacing();
    let density = |t: f64| vol.sample(&ray.at(t));
    let mut t_prev = 0.0;
    if density(0.0) >= iso {
        return Some(hit_at(vol, ray, 0.0));
    }
    loop {
        let t = (t_prev + step).min(t_end);
        if density(t) >= iso {
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if density(mid) >= iso {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hit_at(vol, ray, hi));
        }
        if t >= t_end {
            return None;
        }
        t_prev = t;
    }
}

fn hit_at(vol: &DensityVolume, ray: &Ray, t: f64) -> SurfaceHit {
    let point = ray.at(t);
    let g = vol.gradient(&point);
    let normal = if g.norm() > 1e-12 { -g.normalize() } else { -ray.dir };
    SurfaceHit { distance: t, point, normal }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSettings {
    pub iso: f64,
    pub albedo: f64,
    /// Depth written for missed pixels; the volume diagonal when `None`.
    pub max_depth: Option<f64>,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self { iso: 0.5, albedo: 0.8, max_depth: None }
    }
}

/// Linear (pre-tone-map) Lambertian radiance at a surface hit.
pub fn shade(rig: &LightRig, pose: &Pose, hit: &SurfaceHit, albedo: f64) -> f64 {
    rig.irradiance(pose, &hit.point)
        .iter()
        .map(|l| albedo * hit.normal.dot(&l.direction).max(0.0) * l.irradiance)
        .sum()
}

/// Per-pixel result before tone mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSample {
    pub radiance: f64,
    pub hit: Option<SurfaceHit>,
}

pub fn render_pixel(
    vol: &DensityVolume,
    cam: &EndoscopeCamera,
    rig: &LightRig,
    pose: &Pose,
    settings: &RasterSettings,
    x: usize,
    y: usize,
) -> Result<RasterSample> {
    let ray = cam.pixel_ray(pose, x, y)?;
    let sentinel = settings.max_depth.unwrap_or_else(|| vol.diagonal());
    let hit = march_first_surface(vol, &ray, settings.iso, sentinel);
    Ok(RasterSample { radiance: hit.map_or(0.0, |h| shade(rig, pose, &h, settings.albedo)), hit })
}

pub fn render_raster_frame(
    vol: &DensityVolume,
    cam: &EndoscopeCamera,
    rig: &LightRig,
    pose: &Pose,
    settings: &RasterSettings,
    meta: FrameMeta,
) -> Result<Frame> {
    cam.validate()?;
    if !(settings.iso > 0.0 && settings.iso < 1.0) {
        return Err(param(format!("iso must be in (0, 1), got {}", settings.iso)));
    }
    if !(0.0..=1.0).contains(&settings.albedo) {
        return Err(param("albedo must be in [0, 1]"));
    }
    let sentinel = settings.max_depth.unwrap_or_else(|| vol.diagonal()) as f32;
    let (w, h) = (cam.width, cam.height);
    let pixels: Vec<(f32, f32)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let s = render_pixel(vol, cam, rig, pose, settings, i % w, i / w)?;
            Ok(match s.hit {
                Some(hit) => (tone_map(s.radiance) as f32, hit.distance as f32),
                None => (0.0, sentinel),
            })
        })
        .collect::<Result<_>>()?;
    let gray: Vec<f32> = pixels.iter().map(|p| p.0).collect();
    let mut depth = DepthMap::filled(w, h, sentinel);
    for (d, p) in depth.data.iter_mut().zip(&pixels) {
        *d = p.1;
    }
    let meta = FrameMeta { renderer: Renderer::Raster, style_id: 0, ..meta };
    Frame::new(ImageRgb::from_gray(w, h, &gray)?, depth, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endoscope::Light;
    use crate::volume::{make_colon_volume, smoothstep, ColonParams};

    fn meta() -> FrameMeta {
        FrameMeta { scene_id: 1, style_id: 0, pose_index: 0, renderer: Renderer::Raster, seed: 0 }
    }

    fn straight_tube() -> (ColonParams, DensityVolume) {
        let p = ColonParams { fold_amplitude_mm: 0.0, centerline_curvature: 0.0, ..Default::default() };
        let vol = make_colon_volume(&p, p.required_dims(0.4), 0.4).unwrap();
        (p, vol)
    }

    /// Density ramps linearly in z from 0 at z = 3 to 1 at z = 5, so the 0.5
    /// crossing is exactly z = 4 and trilinear interpolation is exact.
    fn wall_at_4mm() -> DensityVolume {
        DensityVolume::from_fn([41, 41, 41], 0.25, Vec3::new(-5.0, -5.0, -1.0), |p| {
            ((p.z - 3.0) / 2.0).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn radial_march_hits_cylinder_wall() {
        let (p, vol) = straight_tube();
        for a in [0.3f64, 1.9, 3.3] {
            let ray = Ray { origin: Vec3::new(0.0, 0.0, 30.0), dir: Vec3::new(a.cos(), a.sin(), 0.0) };
            let hit = march_first_surface(&vol, &ray, 0.5, 100.0).unwrap();
            assert!((hit.distance - p.radius_mm).abs() <= vol.spacing() / 2.0);
            assert!(hit.normal.dot(&ray.dir) < -0.99);
            assert!((vol.sample(&hit.point) - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn axial_ray_misses_open_tube() {
        let (_, vol) = straight_tube();
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 1.0), dir: Vec3::z() };
        assert!(march_first_surface(&vol, &ray, 0.5, 1e3).is_none());
    }

    #[test]
    fn flat_wall_center_radiance_matches_inverse_square() {
        let vol = wall_at_4mm();
        let power = 10.0;
        let rig = LightRig::new(vec![
            Light { offset: Vec3::zeros(), power: power / 2.0, color: [1.0; 3] },
            Light { offset: Vec3::zeros(), power: power / 2.0, color: [1.0; 3] },
        ])
        .unwrap();
        let cam = EndoscopeCamera::new(32, 32, 90.0, 0.0).unwrap();
        let pose = Pose::identity();
        let ray = cam.generate_ray(&pose, 16.0, 16.0).unwrap();
        let hit = march_first_surface(&vol, &ray, 0.5, 100.0).unwrap();
        assert!((hit.distance - 4.0).abs() < 1e-7);
        let albedo = 0.7;
        let expected = albedo * power / (4.0 * std::f64::consts::PI * 16.0);
        let got = shade(&rig, &pose, &hit, albedo);
        assert!(((got - expected) / expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn sphere_center_depth() {
        let spacing = 0.1;
        let vol = DensityVolume::from_fn([41, 41, 81], spacing, Vec3::new(-2.0, -2.0, 2.0), |p| {
            let sd = (p - Vec3::new(0.0, 0.0, 5.0)).norm() - 1.0;
            1.0 - smoothstep((sd + 0.25) / 0.5)
        })
        .unwrap();
        let cam = EndoscopeCamera::new(33, 33, 60.0, 0.0).unwrap();
        let rig = LightRig::symmetric_pair(0.5, 10.0).unwrap();
        let frame = render_raster_frame(&vol, &cam, &rig, &Pose::identity(), &RasterSettings::default(), meta())
            .unwrap();
        // The camera sits outside the grid; the ray enters it at z = 2.
        assert!((frame.depth.get(16, 16) - 4.0).abs() as f64 <= spacing / 2.0);
    }

    #[test]
    fn empty_scene_is_black_with_sentinel_depth() {
        let vol = DensityVolume::constant([8, 8, 8], 1.0, Vec3::new(-3.5, -3.5, 0.0), 0.0).unwrap();
        let cam = EndoscopeCamera::new(16, 16, 90.0, 0.0).unwrap();
        let rig = LightRig::symmetric_pair(1.0, 5.0).unwrap();
        let f = render_raster_frame(&vol, &cam, &rig, &Pose::identity(), &RasterSettings::default(), meta())
            .unwrap();
        assert!(f.image.data.iter().all(|&v| v == 0.0));
        assert!(f.depth.data.iter().all(|&d| d == vol.diagonal() as f32));
        assert_eq!(f.depth.valid_count(), 0);
    }

    #[test]
    fn frame_depth_is_reproducible_ground_truth() {
        let p = ColonParams { seed: 3, ..Default::default() };
        let vol = make_colon_volume(&p, p.required_dims(0.5), 0.5).unwrap();
        let pose = crate::endoscope::make_trajectory(&p, 3, None).unwrap()[1];
        let cam = EndoscopeCamera::new(24, 20, 120.0, 0.18).unwrap();
        let rig = LightRig::symmetric_pair(1.5, 200.0).unwrap();
        let settings = RasterSettings::default();
        let f = render_raster_frame(&vol, &cam, &rig, &pose, &settings, meta()).unwrap();
        let again = render_raster_frame(&vol, &cam, &rig, &pose, &settings, meta()).unwrap();
        assert_eq!(f, again);
        assert!(f.depth.valid_count() > 0);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let rgb = f.image.get(x, y);
                assert!(rgb[0] == rgb[1] && rgb[1] == rgb[2]);
                assert!((0.0..=1.0).contains(&rgb[0]));
                let i = y * cam.width + x;
                if f.depth.is_valid(i) {
                    let ray = cam.pixel_ray(&pose, x, y).unwrap();
                    let hit = march_first_surface(&vol, &ray, 0.5, vol.diagonal()).unwrap();
                    assert_eq!(hit.distance as f32, f.depth.data[i]);
                }
            }
        }
    }

    #[test]
    fn iso_is_validated() {
        let vol = wall_at_4mm();
        let cam = EndoscopeCamera::new(16, 16, 90.0, 0.0).unwrap();
        let rig = LightRig::symmetric_pair(1.0, 5.0).unwrap();
        let bad = RasterSettings { iso: 1.0, ..Default::default() };
        assert!(render_raster_frame(&vol, &cam, &rig, &Pose::identity(), &bad, meta()).is_err());
    }
}

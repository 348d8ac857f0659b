//! Virtual endoscope: a wide-angle camera, tip-mounted point lights and pose
//! trajectories along the colon centerline.
//!
//! Camera frame: +x right, +y down (image rows), +z along the optical axis.

use nalgebra::{Quaternion, Unit, UnitQuaternion};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::volume::ColonParams;
use crate::{seed, Ray, Vec3};

/// Irradiance clamp distance for points that nearly touch a light.
pub const MIN_LIGHT_DISTANCE_MM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndoscopeCamera {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view of the undistorted pinhole, degrees.
    pub fov_deg: f64,
    pub principal_point: (f64, f64),
    /// Radial term applied when mapping pixels to rays:
    /// `r_ray = r_pix * (1 + k1 * r_pix^2)` with `r_pix` normalized so the
    /// horizontal image edge is at 1. Positive values widen the periphery.
    pub k1: f64,
}

impl EndoscopeCamera {
    pub fn new(width: usize, height: usize, fov_deg: f64, k1: f64) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fov_deg,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            k1,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(param(format!(
                "camera must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(param(format!("fov_deg must be in (0, 180), got {}", self.fov_deg)));
        }
        if !self.k1.is_finite() {
            return Err(param("k1 must be finite"));
        }
        Ok(())
    }

    /// Camera-frame unit direction through subpixel `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Result<Vec3> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::Domain(format!(
                "pixel ({u}, {v}) outside {}x{} sensor",
                self.width, self.height
            )));
        }
        let half = self.width as f64 / 2.0;
        let xn = (u - self.principal_point.0) / half;
        let yn = (v - self.principal_point.1) / half;
        let radial = 1.0 + self.k1 * (xn * xn + yn * yn);
        let t = (self.fov_deg.to_radians() / 2.0).tan();
        Ok(Vec3::new(xn * radial * t, yn * radial * t, 1.0).normalize())
    }

    /// World-space ray through subpixel `(u, v)`.
    pub fn generate_ray(&self, pose: &Pose, u: f64, v: f64) -> Result<Ray> {
        let d = self.direction(u, v)?;
        Ok(Ray { origin: pose.position, dir: (pose.orientation * d).normalize() })
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, pose: &Pose, x: usize, y: usize) -> Result<Ray> {
        self.generate_ray(pose, x as f64 + 0.5, y as f64 + 0.5)
    }
}

/// Camera position and orientation (camera frame to world).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    /// Builds a pose from a raw quaternion, which must already be unit-norm.
    pub fn new(position: Vec3, q: Quaternion<f64>) -> Result<Self> {
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(param(format!("orientation quaternion norm {} is not 1", q.norm())));
        }
        Ok(Self { position, orientation: UnitQuaternion::new_unchecked(q) })
    }

    pub fn identity() -> Self {
        Self { position: Vec3::zeros(), orientation: UnitQuaternion::identity() }
    }

    pub fn looking_along(position: Vec3, forward: Vec3) -> Self {
        let orientation = UnitQuaternion::rotation_between(&Vec3::z(), &forward)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI));
        Self { position, orientation }
    }

    pub fn forward(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Offset from the camera center, camera frame, mm.
    pub offset: Vec3,
    /// Radiant power, W.
    pub power: f64,
    pub color: [f64; 3],
}

/// Two or three point lights rigidly attached to the endoscope tip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightRig {
    lights: Vec<Light>,
}

/// Irradiance from one light at a surface or medium point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSample {
    /// W/mm^2.
    pub irradiance: f64,
    /// Unit vector from the point toward the light.
    pub direction: Vec3,
    pub distance: f64,
    pub position: Vec3,
    /// Radiant intensity, W/sr.
    pub intensity: f64,
    pub color: [f64; 3],
}

impl LightRig {
    pub fn new(lights: Vec<Light>) -> Result<Self> {
        if !(2..=3).contains(&lights.len()) {
            return Err(param(format!("light rig needs 2 or 3 lights, got {}", lights.len())));
        }
        if let Some(l) = lights.iter().find(|l| !(l.power > 0.0 && l.power.is_finite())) {
            return Err(param(format!("light power must be positive, got {}", l.power)));
        }
        Ok(Self { lights })
    }

    /// Two white lights at +-`lateral_mm` along camera x.
    pub fn symmetric_pair(lateral_mm: f64, power: f64) -> Result<Self> {
        Self::new(vec![
            Light { offset: Vec3::new(-lateral_mm, 0.0, 0.0), power, color: [1.0; 3] },
            Light { offset: Vec3::new(lateral_mm, 0.0, 0.0), power, color: [1.0; 3] },
        ])
    }

    pub fn lights(&self) -> &[Light] {
        &self.lights
    }

    pub fn world_positions(&self, pose: &Pose) -> Vec<Vec3> {
        self.lights.iter().map(|l| pose.position + pose.orientation * l.offset).collect()
    }

    /// Inverse-square irradiance `P / (4 pi max(d, d_min)^2)` from each light.
    pub fn irradiance(&self, pose: &Pose, point: &Vec3) -> Vec<LightSample> {
        self.lights
            .iter()
            .map(|l| {
                let position = pose.position + pose.orientation * l.offset;
                let delta = position - point;
                let distance = delta.norm();
                let direction = if distance > 1e-12 { delta / distance } else { -pose.forward() };
                let d = distance.max(MIN_LIGHT_DISTANCE_MM);
                let intensity = l.power / (4.0 * std::f64::consts::PI);
                LightSample {
                    irradiance: intensity / (d * d),
                    direction,
                    distance,
                    position,
                    intensity,
                    color: l.color,
                }
            })
            .collect()
    }
}

/// Limits of the random perturbation applied to trajectory poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryJitter {
    pub seed: u64,
    /// Maximum tilt of the view direction away from the tangent, degrees.
    pub max_angle_deg: f64,
}

impl TrajectoryJitter {
    pub fn new(seed: u64) -> Self {
        Self { seed, max_angle_deg: 30.0 }
    }
}

/// Fraction of the tube length where trajectories start and end.
const TRAJECTORY_SPAN: (f64, f64) = (0.1, 0.55);

/// Poses along the centerline looking down the lumen. Without jitter the
/// poses sit exactly on the centerline facing along the tangent.
pub fn make_trajectory(
    params: &ColonParams,
    n_poses: usize,
    jitter: Option<TrajectoryJitter>,
) -> Result<Vec<Pose>> {
    params.validate()?;
    if n_poses < 1 {
        return Err(param("trajectory needs at least one pose"));
    }
    if let Some(j) = &jitter {
        if !(0.0..=30.0).contains(&j.max_angle_deg) {
            return Err(param("jitter angle must be within [0, 30] degrees"));
        }
    }
    let (z0, z1) = (TRAJECTORY_SPAN.0 * params.length_mm, TRAJECTORY_SPAN.1 * params.length_mm);
    let max_offset = (params.radius_mm / 2.0).min(0.5 * params.min_radius());
    let mut rng = jitter.map(|j| seed::rng_for(&[j.seed, params.seed, 0x7A7E_u64]));
    let poses = (0..n_poses)
        .map(|i| {
            let z = if n_poses == 1 { z0 } else { z0 + (z1 - z0) * i as f64 / (n_poses - 1) as f64 };
            let center = params.centerline(z);
            let tangent = params.tangent(z);
            let base = Pose::looking_along(center, tangent);
            match (&mut rng, &jitter) {
                (Some(rng), Some(j)) => {
                    let (u, w) = perpendicular_basis(&tangent);
                    let max = j.max_angle_deg.to_radians();
                    let tilt_axis_angle = rng.random::<f64>() * std::f64::consts::TAU;
                    let tilt = rng.random::<f64>() * max;
                    let roll = (rng.random::<f64>() * 2.0 - 1.0) * max;
                    let r = max_offset * rng.random::<f64>().sqrt();
                    let phi = rng.random::<f64>() * std::f64::consts::TAU;
                    let axis = Unit::new_normalize(u * tilt_axis_angle.cos() + w * tilt_axis_angle.sin());
                    let tilt_q = UnitQuaternion::from_axis_angle(&axis, tilt);
                    let roll_q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(tangent), roll);
                    Pose {
                        position: center + (u * phi.cos() + w * phi.sin()) * r,
                        orientation: tilt_q * roll_q * base.orientation,
                    }
                }
                _ => base,
            }
        })
        .collect();
    Ok(poses)
}

fn perpendicular_basis(t: &Vec3) -> (Vec3, Vec3) {
    let helper = if t.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = t.cross(&helper).normalize();
    (u, t.cross(&u).normalize())
}

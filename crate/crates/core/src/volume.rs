//! Procedural colon density volumes and density-to-optics transfer functions.
//!
//! World units are millimeters. Grids are stored with x varying fastest:
//! `index = (z * ny + y) * nx + x`. Voxel `(i, j, k)` sits at
//! `world_origin + spacing * (i, j, k)`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::{seed, Vec3};

/// Scalar tissue density on a regular grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    dims: [usize; 3],
    spacing: f64,
    origin: Vec3,
    data: Vec<f32>,
}

impl DensityVolume {
    pub fn new(dims: [usize; 3], spacing: f64, origin: Vec3, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(param(format!("volume dims must be >= 2 per axis, got {dims:?}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(param(format!("spacing must be positive, got {spacing}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "volume data has {} samples, dims {dims:?} need {}",
                data.len(),
                dims[0] * dims[1] * dims[2]
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param(format!("density sample {v} outside [0, 1]")));
        }
        Ok(Self { dims, spacing, origin, data })
    }

    /// Builds a volume by evaluating `f` at every voxel position. Values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: f64,
        origin: Vec3,
        f: impl Fn(Vec3) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + Vec3::new(i as f64, j as f64, k as f64) * spacing;
                    data.push(f(p).clamp(0.0, 1.0) as f32);
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    /// A volume with every voxel equal to `value`.
    pub fn constant(dims: [usize; 3], spacing: f64, origin: Vec3, value: f64) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, origin, vec![value.clamp(0.0, 1.0) as f32; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Upper corner of the sampled region (the last voxel center).
    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.spacing
    }

    /// Length of the bounding-box diagonal; used as the miss sentinel depth.
    pub fn diagonal(&self) -> f64 {
        (self.max_corner() - self.origin).norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }

    /// Parametric interval `[t0, t1]` over which `origin + t * dir` lies in the
    /// bounding box, clipped to `t >= 0`.
    pub fn clip_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let hi = self.max_corner();
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.origin[a] || origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.origin[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Trilinear interpolation of the eight surrounding voxels. Points outside
    /// the volume read as vacuum (density 0).
    pub fn sample(&self, p: &Vec3) -> f64 {
        let mut idx = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let g = (p[a] - self.origin[a]) / self.spacing;
            let max = (self.dims[a] - 1) as f64;
            if !(g >= 0.0 && g <= max) {
                return 0.0;
            }
            let i = (g.floor() as usize).min(self.dims[a] - 2);
            idx[a] = i;
            frac[a] = g - i as f64;
        }
        let [nx, ny, _] = self.dims;
        let base = (idx[2] * ny + idx[1]) * nx + idx[0];
        let d = &self.data;
        let c = |o: usize| d[base + o] as f64;
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(c(0), c(1), fx);
        let c10 = lerp(c(nx), c(nx + 1), fx);
        let c01 = lerp(c(nx * ny), c(nx * ny + 1), fx);
        let c11 = lerp(c(nx * ny + nx), c(nx * ny + nx + 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Central-difference density gradient with half-voxel offsets.
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let h = 0.5 * self.spacing;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = (self.sample(&(p + e)) - self.sample(&(p - e))) / (2.0 * h);
        }
        g
    }

    /// Writes the raw grid: a header line `DVOL nx ny nz spacing_mm` followed
    /// by little-endian `f32` samples in storage order.
    pub fn write_raw(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "DVOL {} {} {} {}",
            self.dims[0], self.dims[1], self.dims[2], self.spacing
        )?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a grid written by [`write_raw`](Self::write_raw). The header
    /// carries no origin, so the tube-centered convention of
    /// [`centered_origin`] is applied.
    pub fn read_raw(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("DVOL header line missing".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("DVOL header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "DVOL" {
            return Err(Error::Format(format!("bad DVOL header {header:?}")));
        }
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dimension {s:?}")))
        };
        let dims = [parse_dim(fields[1])?, parse_dim(fields[2])?, parse_dim(fields[3])?];
        let spacing: f64 = fields[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad spacing {:?}", fields[4])))?;
        let payload = &bytes[nl + 1..];
        let n = dims[0] * dims[1] * dims[2];
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "DVOL payload has {} bytes, expected {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, spacing, centered_origin(dims, spacing), data)
    }
}

/// Origin that centers the grid on the z axis in x/y and starts it at z = 0.
pub fn centered_origin(dims: [usize; 3], spacing: f64) -> Vec3 {
    Vec3::new(
        -((dims[0] - 1) as f64) * spacing / 2.0,
        -((dims[1] - 1) as f64) * spacing / 2.0,
        0.0,
    )
}

/// Geometry of a procedural colon segment running along +z from z = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColonParams {
    pub radius_mm: f64,
    pub length_mm: f64,
    pub fold_amplitude_mm: f64,
    pub fold_period_mm: f64,
    /// Peak curvature of the sinusoidal centerline, in 1/mm.
    pub centerline_curvature: f64,
    /// Width of the lumen-to-wall density transition.
    pub wall_thickness_mm: f64,
    pub seed: u64,
}

impl Default for ColonParams {
    fn default() -> Self {
        Self {
            radius_mm: 5.0,
            length_mm: 60.0,
            fold_amplitude_mm: 1.2,
            fold_period_mm: 9.0,
            centerline_curvature: 0.01,
            wall_thickness_mm: 1.5,
            seed: 0,
        }
    }
}

/// Seed-derived phases of a colon geometry.
#[derive(Debug, Clone, Copy)]
struct ColonPhases {
    bend_plane: f64,
    bend_phase: f64,
    fold_phase: f64,
    lobe_phase: f64,
}

impl ColonParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radius_mm", self.radius_mm),
            ("length_mm", self.length_mm),
            ("fold_period_mm", self.fold_period_mm),
            ("wall_thickness_mm", self.wall_thickness_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fold_amplitude_mm >= 0.0 && self.fold_amplitude_mm < self.radius_mm) {
            return Err(param(format!(
                "fold_amplitude_mm must be in [0, radius_mm), got {}",
                self.fold_amplitude_mm
            )));
        }
        if !(self.centerline_curvature >= 0.0 && self.centerline_curvature.is_finite()) {
            return Err(param("centerline_curvature must be >= 0"));
        }
        Ok(())
    }

    fn phases(&self) -> ColonPhases {
        let mut rng = seed::rng_for(&[self.seed, 0xC010]);
        let tau = std::f64::consts::TAU;
        ColonPhases {
            bend_plane: rng.random::<f64>() * tau,
            bend_phase: rng.random::<f64>() * tau,
            fold_phase: rng.random::<f64>() * tau,
            lobe_phase: rng.random::<f64>() * tau,
        }
    }

    fn bend_frequency(&self) -> f64 {
        std::f64::consts::TAU / self.length_mm
    }

    /// Lateral amplitude of the centerline sine.
    pub fn bend_amplitude(&self) -> f64 {
        self.centerline_curvature / self.bend_frequency().powi(2)
    }

    /// Centerline position at axial coordinate `z`.
    pub fn centerline(&self, z: f64) -> Vec3 {
        let ph = self.phases();
        let s = self.bend_amplitude() * (self.bend_frequency() * z + ph.bend_phase).sin();
        Vec3::new(s * ph.bend_plane.cos(), s * ph.bend_plane.sin(), z)
    }

    /// Unit tangent of the centerline at `z`.
    pub fn tangent(&self, z: f64) -> Vec3 {
        let ph = self.phases();
        let w = self.bend_frequency();
        let ds = self.bend_amplitude() * w * (w * z + ph.bend_phase).cos();
        Vec3::new(ds * ph.bend_plane.cos(), ds * ph.bend_plane.sin(), 1.0).normalize()
    }

    /// Smallest wall radius anywhere along the tube.
    pub fn min_radius(&self) -> f64 {
        self.radius_mm - self.fold_amplitude_mm
    }

    /// Approximate signed distance to the lumen wall: negative inside the lumen.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.signed_distance_with(p, &self.phases())
    }

    fn signed_distance_with(&self, p: &Vec3, ph: &ColonPhases) -> f64 {
        let w = self.bend_frequency();
        let s = self.bend_amplitude() * (w * p.z + ph.bend_phase).sin();
        let dx = p.x - s * ph.bend_plane.cos();
        let dy = p.y - s * ph.bend_plane.sin();
        let r = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        // Haustral folds: narrow ridges along z with a three-lobed cross-section.
        let ridge = (0.5
            + 0.5 * (std::f64::consts::TAU * p.z / self.fold_period_mm + ph.fold_phase).cos())
        .powi(4);
        let lobes = (1.0 + 0.3 * (3.0 * theta + ph.lobe_phase).cos()) / 1.3;
        let wall = self.radius_mm - self.fold_amplitude_mm * ridge * lobes;
        r - wall
    }

    /// Density at a world point: 0 in the lumen, 1 in tissue, with a
    /// smoothstep transition of width `wall_thickness_mm` centered on the wall.
    pub fn density(&self, p: &Vec3) -> f64 {
        let sd = self.signed_distance(p);
        smoothstep((sd + 0.5 * self.wall_thickness_mm) / self.wall_thickness_mm)
    }

    /// Grid dimensions that contain the tube at the given spacing.
    pub fn required_dims(&self, spacing: f64) -> [usize; 3] {
        let half = self.radius_mm + self.bend_amplitude() + self.wall_thickness_mm;
        let nxy = (2.0 * half / spacing).ceil() as usize + 3;
        let nz = (self.length_mm / spacing).ceil() as usize + 1;
        [nxy, nxy, nz]
    }
}

pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Rasterizes the colon geometry onto a grid centered on the tube axis.
pub fn make_colon_volume(params: &ColonParams, dims: [usize; 3], spacing: f64) -> Result<DensityVolume> {
    params.validate()?;
    if !(spacing > 0.0) {
        return Err(param(format!("spacing must be positive, got {spacing}")));
    }
    if dims.iter().any(|&n| n < 2) {
        return Err(param(format!("volume dims must be >= 2 per axis, got {dims:?}")));
    }
    let half_x = (dims[0] - 1) as f64 * spacing / 2.0;
    let half_y = (dims[1] - 1) as f64 * spacing / 2.0;
    let needed = params.radius_mm + params.bend_amplitude() + 0.5 * params.wall_thickness_mm;
    if half_x.min(half_y) < needed {
        return Err(Error::Geometry(format!(
            "cross-section half-extent {:.3} mm < tube extent {needed:.3} mm",
            half_x.min(half_y)
        )));
    }
    let z_extent = (dims[2] - 1) as f64 * spacing;
    if z_extent < params.length_mm {
        return Err(Error::Geometry(format!(
            "axial extent {z_extent:.3} mm < tube length {} mm",
            params.length_mm
        )));
    }
    let ph = params.phases();
    let w = params.wall_thickness_mm;
    DensityVolume::from_fn(dims, spacing, centered_origin(dims, spacing), |p| {
        smoothstep((params.signed_distance_with(&p, &ph) + 0.5 * w) / w)
    })
}

/// Optical coefficients of tissue at one density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalProperties {
    /// Scattering coefficient, 1/mm.
    pub sigma_s: f64,
    /// Absorption coefficient, 1/mm.
    pub sigma_a: f64,
    /// Henyey-Greenstein anisotropy.
    pub phase_g: f64,
    pub albedo_color: [f64; 3],
}

impl OpticalProperties {
    pub fn sigma_t(&self) -> f64 {
        self.sigma_s + self.sigma_a
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s >= 0.0 && self.sigma_a >= 0.0) {
            return Err(param("sigma_s and sigma_a must be >= 0"));
        }
        if !(self.phase_g > -1.0 && self.phase_g < 1.0) {
            return Err(param(format!("phase_g must be in (-1, 1), got {}", self.phase_g)));
        }
        if self.albedo_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(param("albedo_color components must be in [0, 1]"));
        }
        Ok(())
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * t;
        Self {
            sigma_s: l(self.sigma_s, other.sigma_s),
            sigma_a: l(self.sigma_a, other.sigma_a),
            phase_g: l(self.phase_g, other.phase_g),
            albedo_color: [
                l(self.albedo_color[0], other.albedo_color[0]),
                l(self.albedo_color[1], other.albedo_color[1]),
                l(self.albedo_color[2], other.albedo_color[2]),
            ],
        }
    }
}

/// Piecewise-linear map from density to optical properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    breakpoints: Vec<(f64, OpticalProperties)>,
}

impl TransferFunction {
    pub fn new(breakpoints: Vec<(f64, OpticalProperties)>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(param("transfer function needs at least 2 breakpoints"));
        }
        if breakpoints[0].0 != 0.0 || breakpoints[breakpoints.len() - 1].0 != 1.0 {
            return Err(param("transfer function must span densities 0 to 1"));
        }
        if breakpoints.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(param("breakpoint densities must be strictly increasing"));
        }
        for (_, p) in &breakpoints {
            p.validate()?;
        }
        Ok(Self { breakpoints })
    }

    pub fn breakpoints(&self) -> &[(f64, OpticalProperties)] {
        &self.breakpoints
    }

    fn segment(&self, density: f64) -> (usize, f64) {
        let d = density.clamp(0.0, 1.0);
        let bp = &self.breakpoints;
        let i = bp.partition_point(|(x, _)| *x <= d).clamp(1, bp.len() - 1) - 1;
        let (x0, x1) = (bp[i].0, bp[i + 1].0);
        (i, (d - x0) / (x1 - x0))
    }

    /// Properties at `density`, which is clamped into `[0, 1]` first.
    pub fn apply(&self, density: f64) -> OpticalProperties {
        let (i, t) = self.segment(density);
        self.breakpoints[i].1.lerp(&self.breakpoints[i + 1].1, t)
    }

    pub fn sigma_t(&self, density: f64) -> f64 {
        let (i, t) = self.segment(density);
        let a = self.breakpoints[i].1.sigma_t();
        let b = self.breakpoints[i + 1].1.sigma_t();
        a + (b - a) * t
    }

    /// Upper bound of `sigma_t` over densities in `[lo, hi]`.
    pub fn max_sigma_t(&self, lo: f64, hi: f64) -> f64 {
        let (lo, hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
        self.breakpoints
            .iter()
            .filter(|(d, _)| *d > lo && *d < hi)
            .map(|(_, p)| p.sigma_t())
            .fold(self.sigma_t(lo).max(self.sigma_t(hi)), f64::max)
    }

    /// True when both functions produce the same `sigma_t` at every density.
    pub fn same_extinction(&self, other: &Self) -> bool {
        let knots = self.breakpoints.iter().chain(&other.breakpoints).map(|(d, _)| *d);
        knots.into_iter().all(|d| {
            let (a, b) = (self.sigma_t(d), other.sigma_t(d));
            (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
        })
    }
}

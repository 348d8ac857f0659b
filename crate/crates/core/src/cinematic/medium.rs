//! Extinction field of a density volume seen through a transfer function,
//! with a macrocell majorant grid for delta tracking.

use crate::volume::{DensityVolume, TransferFunction};
use crate::{Ray, Vec3};

/// Voxels per macrocell edge.
const BLOCK: usize = 4;

/// Upper bounds of `sigma_t` over blocks of voxels.
#[derive(Debug, Clone)]
pub struct MajorantGrid {
    cells: [usize; 3],
    cell_size: f64,
    origin: Vec3,
    majorant: Vec<f64>,
}

impl MajorantGrid {
    pub fn new(vol: &DensityVolume, tf: &TransferFunction) -> Self {
        let dims = vol.dims();
        let cells = dims.map(|n| (n - 1).div_ceil(BLOCK));
        let mut majorant = Vec::with_capacity(cells[0] * cells[1] * cells[2]);
        for cz in 0..cells[2] {
            for cy in 0..cells[1] {
                for cx in 0..cells[0] {
                    let range = |c: usize, n: usize| (c * BLOCK)..=((c + 1) * BLOCK).min(n - 1);
                    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                    for k in range(cz, dims[2]) {
                        for j in range(cy, dims[1]) {
                            for i in range(cx, dims[0]) {
                                let v = vol.voxel(i, j, k);
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    majorant.push(tf.max_sigma_t(lo as f64, hi as f64));
                }
            }
        }
        Self { cells, cell_size: BLOCK as f64 * vol.spacing(), origin: vol.origin(), majorant }
    }

    fn at(&self, c: [usize; 3]) -> f64 {
        self.majorant[(c[2] * self.cells[1] + c[1]) * self.cells[0] + c[0]]
    }

    /// Calls `f(t0, t1, majorant)` for consecutive macrocell segments covering
    /// `[t_start, t_end]` along `ray`. Stops early when `f` returns `false`.
    pub fn traverse(&self, ray: &Ray, t_start: f64, t_end: f64, mut f: impl FnMut(f64, f64, f64) -> bool) {
        if !(t_end > t_start) {
            return;
        }
        let p = ray.at(t_start);
        let mut cell = [0usize; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0isize; 3];
        for a in 0..3 {
            let g = (p[a] - self.origin[a]) / self.cell_size;
            let c = (g.floor().max(0.0) as usize).min(self.cells[a] - 1);
            cell[a] = c;
            let d = ray.dir[a];
            if d > 1e-15 {
                step[a] = 1;
                t_delta[a] = self.cell_size / d;
                t_next[a] = t_start + ((c + 1) as f64 * self.cell_size + self.origin[a] - p[a]) / d;
            } else if d < -1e-15 {
                step[a] = -1;
                t_delta[a] = -self.cell_size / d;
                t_next[a] = t_start + (c as f64 * self.cell_size + self.origin[a] - p[a]) / d;
            }
        }
        let mut t = t_start;
        loop {
            let axis = if t_next[0] < t_next[1] {
                if t_next[0] < t_next[2] { 0 } else { 2 }
            } else if t_next[1] < t_next[2] {
                1
            } else {
                2
            };
            let t_exit = t_next[axis].min(t_end).max(t);
            if !f(t, t_exit, self.at(cell)) || t_exit >= t_end {
                return;
            }
            t = t_exit;
            let next = cell[axis] as isize + step[axis];
            if next < 0 || next >= self.cells[axis] as isize {
                return;
            }
            cell[axis] = next as usize;
            t_next[axis] += t_delta[axis];
        }
    }
}

/// A participating medium: density volume plus transfer function. Outside the
/// volume bounds the medium is vacuum.
pub struct Medium<'a> {
    pub vol: &'a DensityVolume,
    pub tf: &'a TransferFunction,
    pub grid: MajorantGrid,
}

impl<'a> Medium<'a> {
    pub fn new(vol: &'a DensityVolume, tf: &'a TransferFunction) -> Self {
        Self { vol, tf, grid: MajorantGrid::new(vol, tf) }
    }

    /// Density at `p`, or `None` outside the volume.
    #[inline]
    pub fn density(&self, p: &Vec3) -> Option<f64> {
        self.vol.contains(p).then(|| self.vol.sample(p))
    }

    #[inline]
    pub fn sigma_t(&self, p: &Vec3) -> f64 {
        sigma_t(self.vol, self.tf, p)
    }

    pub fn optical_depth(&self, a: &Vec3, b: &Vec3, step: f64) -> f64 {
        optical_depth(self.vol, self.tf, a, b, step)
    }

    /// Distance along `ray` where accumulated opacity `1 - exp(-tau)` first
    /// reaches `threshold`, marching at `step` up to `max_distance`.
    pub fn opacity_depth(&self, ray: &Ray, threshold: f64, step: f64, max_distance: f64) -> Option<f64> {
        let target = -(1.0 - threshold).ln();
        let t_end = match self.vol.clip_ray(&ray.origin, &ray.dir) {
            Some((_, t1)) => t1.min(max_distance),
            None => return None,
        };
        let mut tau = 0.0;
        let mut t = 0.0;
        while t < t_end {
            let h = step.min(t_end - t);
            let sigma = self.sigma_t(&ray.at(t + 0.5 * h));
            if tau + sigma * h >= target {
                return Some(t + (target - tau) / sigma);
            }
            tau += sigma * h;
            t += h;
        }
        None
    }
}

#[inline]
fn sigma_t(vol: &DensityVolume, tf: &TransferFunction, p: &Vec3) -> f64 {
    if vol.contains(p) {
        tf.sigma_t(vol.sample(p))
    } else {
        0.0
    }
}

/// Optical depth between `a` and `b` by midpoint marching at `step`.
pub fn optical_depth(vol: &DensityVolume, tf: &TransferFunction, a: &Vec3, b: &Vec3, step: f64) -> f64 {
    let delta = b - a;
    let len = delta.norm();
    if len == 0.0 {
        return 0.0;
    }
    let n = (len / step).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let dir = delta / len;
    (0..n).map(|i| sigma_t(vol, tf, &(a + dir * ((i as f64 + 0.5) * h)))).sum::<f64>() * h
}

/// `exp(-tau(x, x'))` by midpoint marching.
pub fn transmittance(vol: &DensityVolume, tf: &TransferFunction, x: &Vec3, x_prime: &Vec3, step: f64) -> f64 {
    (-optical_depth(vol, tf, x, x_prime, step)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::OpticalProperties;

    fn tf_linear(max_sigma: f64) -> TransferFunction {
        let p = |s: f64| OpticalProperties { sigma_s: s, sigma_a: 0.0, phase_g: 0.0, albedo_color: [1.0; 3] };
        TransferFunction::new(vec![(0.0, p(0.0)), (1.0, p(max_sigma))]).unwrap()
    }

    fn homogeneous(value: f64) -> DensityVolume {
        DensityVolume::constant([11, 11, 11], 1.0, Vec3::new(-5.0, -5.0, 0.0), value).unwrap()
    }

    #[test]
    fn empty_volume_is_transparent() {
        let vol = homogeneous(0.0);
        let t = transmittance(&vol, &tf_linear(5.0), &Vec3::new(0.0, 0.0, 1.0), &Vec3::new(2.0, 1.0, 9.0), 0.1);
        assert_eq!(t, 1.0);
    }

    #[test]
    fn homogeneous_slab_matches_beer_lambert() {
        let vol = homogeneous(0.5);
        let tf = tf_linear(1.0); // sigma_t = 0.5 / mm
        let t = transmittance(&vol, &tf, &Vec3::new(0.0, 0.0, 3.0), &Vec3::new(0.0, 0.0, 5.0), 0.05);
        assert!((t - (-1.0f64).exp()).abs() / (-1.0f64).exp() < 0.01);
    }

    #[test]
    fn transmittance_is_symmetric_and_monotone() {
        let vol = DensityVolume::from_fn([11, 11, 11], 1.0, Vec3::new(-5.0, -5.0, 0.0), |p| {
            (0.5 + 0.4 * (p.x * 0.7).sin() * (p.z * 0.3).cos()).clamp(0.0, 1.0)
        })
        .unwrap();
        let tf = tf_linear(0.8);
        let a = Vec3::new(-3.0, 1.0, 1.0);
        let b = Vec3::new(3.5, -2.0, 8.0);
        let ab = transmittance(&vol, &tf, &a, &b, 0.1);
        let ba = transmittance(&vol, &tf, &b, &a, 0.1);
        assert!((ab - ba).abs() <= 1e-12 * ab.max(1e-300));
        let dir = (b - a).normalize();
        let mut last = 1.0;
        for i in 1..20 {
            let t = transmittance(&vol, &tf, &a, &(a + dir * (i as f64 * 0.5)), 0.1);
            assert!(t <= last + 1e-15);
            last = t;
        }
    }

    #[test]
    fn majorants_bound_extinction() {
        let vol = DensityVolume::from_fn([13, 9, 17], 0.5, Vec3::new(-3.0, -2.0, 0.0), |p| {
            (0.5 + 0.5 * (p.x * 1.3 + p.y * 0.4).sin() * (p.z * 0.9).cos()).clamp(0.0, 1.0)
        })
        .unwrap();
        let tf = tf_linear(7.0);
        let medium = Medium::new(&vol, &tf);
        let ray = Ray { origin: Vec3::new(-2.9, -1.9, 0.1), dir: Vec3::new(0.6, 0.35, 0.9).normalize() };
        let (_, t_end) = vol.clip_ray(&ray.origin, &ray.dir).unwrap();
        let mut covered = 0.0;
        let mut last_end = 0.0;
        medium.grid.traverse(&ray, 0.0, t_end, |t0, t1, maj| {
            assert!((t0 - last_end).abs() < 1e-9);
            last_end = t1;
            covered += t1 - t0;
            let mut t = t0;
            while t <= t1 {
                assert!(medium.sigma_t(&ray.at(t)) <= maj + 1e-9, "sigma above majorant at t={t}");
                t += 0.01;
            }
            true
        });
        assert!((covered - t_end).abs() < 1e-9);
    }

    #[test]
    fn opacity_depth_in_homogeneous_medium() {
        let vol = homogeneous(0.5);
        let tf = tf_linear(2.0); // sigma_t = 1 / mm
        let medium = Medium::new(&vol, &tf);
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 0.0), dir: Vec3::z() };
        let d = medium.opacity_depth(&ray, 0.95, 0.1, 100.0).unwrap();
        assert!((d - 20f64.ln()).abs() < 1e-9);
        let shallower = medium.opacity_depth(&ray, 0.5, 0.1, 100.0).unwrap();
        assert!(shallower < d);
        assert!(medium.opacity_depth(&ray, 0.99999, 0.1, 100.0).is_none());
    }
}

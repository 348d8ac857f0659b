//! Declarative run configuration read from TOML.
//!
//! One file fixes the camera, lights, scene distribution, render styles,
//! network, superpixels and training hyperparameters. Its hash, the first 16
//! hex digits of the SHA-256 of the canonical re-serialization, is embedded
//! in every manifest and checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cinematic::{PathTracerConfig, RenderStyle};
use crate::crf::CrfParams;
use crate::endoscope::{EndoscopeCamera, Light, LightRig};
use crate::error::{param, Error, Result};
use crate::network::{NetworkSpec, TrainHyper};
use crate::raster::RasterSettings;
use crate::superpixels::SuperpixelParams;
use crate::training::TrainSettings;
use crate::volume::{OpticalProperties, TransferFunction};
use crate::Vec3;

/// Density below which the medium has lumen coefficients.
pub const LUMEN_EDGE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub k1: f64,
}

impl CameraConfig {
    pub fn build(&self) -> Result<EndoscopeCamera> {
        EndoscopeCamera::new(self.width, self.height, self.fov_deg, self.k1)
    }
}

/// Ranges from which each scene's colon geometry is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub spacing_mm: f64,
    pub length_mm: f64,
    pub wall_thickness_mm: f64,
    pub radius_mm: [f64; 2],
    pub fold_amplitude_mm: [f64; 2],
    pub fold_period_mm: [f64; 2],
    pub centerline_curvature: [f64; 2],
    /// Frames rendered along each synthetic scene's trajectory.
    pub poses_per_scene: usize,
    pub jitter_deg: f64,
}

/// Fractions of scenes assigned to validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub sigma_s: f64,
    pub sigma_a: f64,
    pub phase_g: f64,
}

/// Extinction shared by every style: lumen at density 0, tissue at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    pub lumen: Coefficients,
    pub tissue: Coefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    pub albedo: [f64; 3],
    pub light_color: [f64; 3],
    pub surface_roughness: f64,
    pub specular_weight: f64,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Start the network's output bias at the mean training depth.
    pub init_bias_to_mean_depth: bool,
    pub camera: CameraConfig,
    pub lights: Vec<Light>,
    pub scenes: SceneConfig,
    pub splits: SplitConfig,
    pub raster: RasterSettings,
    pub path_tracer: PathTracerConfig,
    pub medium: MediumConfig,
    pub styles: Vec<StyleConfig>,
    pub superpixels: SuperpixelParams,
    pub network: NetworkSpec,
    pub train: TrainHyper,
    pub finetune: TrainHyper,
    pub crf: CrfParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainHyper::default();
        Self {
            name: "default".into(),
            seed: 0,
            init_bias_to_mean_depth: true,
            camera: CameraConfig { width: 128, height: 128, fov_deg: 120.0, k1: 0.18 },
            lights: vec![
                Light { offset: Vec3::new(-1.5, 0.0, 0.0), power: 100.0, color: [1.0; 3] },
                Light { offset: Vec3::new(1.5, 0.0, 0.0), power: 100.0, color: [1.0; 3] },
            ],
            scenes: SceneConfig {
                spacing_mm: 0.25,
                length_mm: 60.0,
                wall_thickness_mm: 1.5,
                radius_mm: [4.0, 6.5],
                fold_amplitude_mm: [0.5, 2.0],
                fold_period_mm: [7.0, 12.0],
                centerline_curvature: [0.0, 0.02],
                poses_per_scene: 20,
                jitter_deg: 20.0,
            },
            splits: SplitConfig { val_fraction: 0.1, test_fraction: 0.1 },
            raster: RasterSettings::default(),
            path_tracer: PathTracerConfig::default(),
            medium: MediumConfig {
                lumen: Coefficients { sigma_s: 0.01, sigma_a: 0.002, phase_g: 0.8 },
                tissue: Coefficients { sigma_s: 30.0, sigma_a: 3.0, phase_g: 0.8 },
            },
            styles: default_styles(),
            superpixels: SuperpixelParams::default(),
            network: NetworkSpec::default(),
            finetune: TrainHyper { lr0: train.lr0 / 10.0, epochs: 50, lr_decay_start_epoch: 5, ..train },
            train,
            crf: CrfParams::default(),
        }
    }
}

/// Four looks of the same tissue: neutral, warm, cool and glossy.
pub fn default_styles() -> Vec<StyleConfig> {
    vec![
        StyleConfig {
            albedo: [0.85, 0.55, 0.5],
            light_color: [1.0, 1.0, 1.0],
            surface_roughness: 0.5,
            specular_weight: 0.1,
            exposure: 3.0,
        },
        StyleConfig {
            albedo: [0.9, 0.45, 0.35],
            light_color: [1.0, 0.9, 0.75],
            surface_roughness: 0.35,
            specular_weight: 0.2,
            exposure: 3.5,
        },
        StyleConfig {
            albedo: [0.75, 0.6, 0.6],
            light_color: [0.85, 0.95, 1.0],
            surface_roughness: 0.7,
            specular_weight: 0.05,
            exposure: 2.5,
        },
        StyleConfig {
            albedo: [0.8, 0.5, 0.45],
            light_color: [1.0, 0.95, 0.9],
            surface_roughness: 0.2,
            specular_weight: 0.35,
            exposure: 3.0,
        },
    ]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("a validated configuration serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_u64(&self) -> u64 {
        u64::from_str_radix(&self.hash(), 16).expect("hash is hex")
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.build()?;
        self.rig()?;
        let s = &self.scenes;
        if !(s.spacing_mm > 0.0 && s.length_mm > 0.0 && s.wall_thickness_mm > 0.0) {
            return Err(param("scene spacing, length and wall thickness must be positive"));
        }
        for (name, r) in [
            ("radius_mm", s.radius_mm),
            ("fold_amplitude_mm", s.fold_amplitude_mm),
            ("fold_period_mm", s.fold_period_mm),
            ("centerline_curvature", s.centerline_curvature),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= 0.0) {
                return Err(param(format!("scenes.{name} must be an ordered non-negative range, got {r:?}")));
            }
        }
        if s.fold_amplitude_mm[1] >= s.radius_mm[0] {
            return Err(param("scenes.fold_amplitude_mm must stay below the smallest radius"));
        }
        if s.poses_per_scene < 1 {
            return Err(param("scenes.poses_per_scene must be >= 1"));
        }
        if !(0.0..=30.0).contains(&s.jitter_deg) {
            return Err(param("scenes.jitter_deg must be within [0, 30]"));
        }
        let sp = &self.splits;
        if !(sp.val_fraction >= 0.0 && sp.test_fraction >= 0.0 && sp.val_fraction + sp.test_fraction < 1.0) {
            return Err(param("split fractions must be >= 0 and sum below 1"));
        }
        self.path_tracer.validate()?;
        if self.styles.is_empty() {
            return Err(param("at least one style is required"));
        }
        self.render_styles()?;
        self.superpixels.validate()?;
        self.network.validate()?;
        if self.network.input_channels != 3 {
            return Err(param("network.input_channels must be 3"));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        self.crf.validate()
    }

    pub fn rig(&self) -> Result<LightRig> {
        LightRig::new(self.lights.clone())
    }

    /// Shared-extinction transfer function with the given albedo. Lumen
    /// coefficients hold up to [`LUMEN_EDGE`] and ramp to tissue at the
    /// surface iso value, so the lumen side of the wall stays clear.
    pub fn transfer(&self, albedo: [f64; 3]) -> Result<TransferFunction> {
        let props = |c: &Coefficients| OpticalProperties {
            sigma_s: c.sigma_s,
            sigma_a: c.sigma_a,
            phase_g: c.phase_g,
            albedo_color: albedo,
        };
        let (lumen, tissue) = (props(&self.medium.lumen), props(&self.medium.tissue));
        let iso = self.path_tracer.iso;
        if !(iso > LUMEN_EDGE && iso < 1.0) {
            return Err(param(format!("path_tracer.iso must be in ({LUMEN_EDGE}, 1), got {iso}")));
        }
        TransferFunction::new(vec![(0.0, lumen), (LUMEN_EDGE, lumen), (iso, tissue), (1.0, tissue)])
    }

    pub fn render_styles(&self) -> Result<Vec<RenderStyle>> {
        self.styles
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let style = RenderStyle {
                    style_id: i as u32,
                    transfer: self.transfer(s.albedo)?,
                    light_color: s.light_color,
                    surface_roughness: s.surface_roughness,
                    specular_weight: s.specular_weight,
                    exposure: s.exposure,
                };
                style.validate()?;
                Ok(style)
            })
            .collect()
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            network: self.network.clone(),
            hyper: self.train,
            crf: self.crf.clone(),
            superpixels: self.superpixels,
            init_bias_to_mean_depth: self.init_bias_to_mean_depth,
            config_hash: self.hash_u64(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        assert!(cfg.hash().chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let text = RunConfig::default().to_toml().unwrap();
        assert!(matches!(RunConfig::from_toml(&format!("bogus = 1\n{text}")), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.path_tracer.spp = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.splits.test_fraction = 0.95;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn styles_share_extinction() {
        let styles = RunConfig::default().render_styles().unwrap();
        assert_eq!(styles.len(), 4);
        for s in &styles[1..] {
            assert!(s.transfer.same_extinction(&styles[0].transfer));
        }
    }
}

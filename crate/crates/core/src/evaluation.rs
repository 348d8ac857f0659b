//! Depth error metrics pooled over all valid pixels of a test split.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Frame, FrameMeta};
use crate::training::{predict_depth, CrfModel};

/// Estimates below this are raised to it before taking logarithms.
pub const MIN_ESTIMATE: f64 = 1e-6;

/// Mean relative error, mean absolute log10 error and root mean square error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub n_samples: usize,
    /// Estimates raised to [`MIN_ESTIMATE`].
    pub clamped: usize,
    pub dataset_id: String,
    pub model_id: String,
}

/// Running sums that can be merged before taking means.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    sum_rel: f64,
    sum_log10: f64,
    sum_sq: f64,
    n: usize,
    clamped: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, gt: f64, est: f64) -> Result<()> {
        if !(gt.is_finite() && gt > 0.0) {
            return Err(Error::Input(format!("ground-truth depth must be positive and finite, got {gt}")));
        }
        if est.is_nan() {
            return Err(Error::Input("estimated depth is NaN".into()));
        }
        let e = if est < MIN_ESTIMATE {
            self.clamped += 1;
            MIN_ESTIMATE
        } else {
            est
        };
        self.sum_rel += (e - gt).abs() / gt;
        self.sum_log10 += (e.log10() - gt.log10()).abs();
        self.sum_sq += (e - gt) * (e - gt);
        self.n += 1;
        Ok(())
    }

    /// Adds the valid pixels of `gt` paired with `est`.
    pub fn add_maps(&mut self, gt: &DepthMap, est: &DepthMap) -> Result<()> {
        if (gt.width, gt.height) != (est.width, est.height) {
            return Err(Error::Input(format!(
                "depth maps differ in size: {}x{} vs {}x{}",
                gt.width, gt.height, est.width, est.height
            )));
        }
        for i in 0..gt.data.len() {
            if gt.is_valid(i) {
                self.add(gt.data[i] as f64, est.data[i] as f64)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum_rel += other.sum_rel;
        self.sum_log10 += other.sum_log10;
        self.sum_sq += other.sum_sq;
        self.n += other.n;
        self.clamped += other.clamped;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self, dataset_id: &str, model_id: &str) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::Input("no valid pixels to evaluate".into()));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            rel: self.sum_rel / n,
            log10: self.sum_log10 / n,
            rms: (self.sum_sq / n).sqrt(),
            n_samples: self.n,
            clamped: self.clamped,
            dataset_id: dataset_id.into(),
            model_id: model_id.into(),
        })
    }
}

/// Metrics over paired ground-truth and estimated depths.
pub fn compute_metrics(gt: &[f64], est: &[f64]) -> Result<MetricsReport> {
    if gt.len() != est.len() {
        return Err(Error::Input(format!("{} ground-truth values but {} estimates", gt.len(), est.len())));
    }
    let mut acc = MetricsAccumulator::default();
    for (&g, &e) in gt.iter().zip(est) {
        acc.add(g, e)?;
    }
    acc.finish("", "")
}

/// Metrics for one frame of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub meta: FrameMeta,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub pooled: MetricsReport,
    pub frames: Vec<FrameMetrics>,
}

/// Pools metrics over pairs of ground-truth and predicted depth maps.
/// Frames without valid pixels are skipped in the breakdown.
pub fn pool_predictions(
    pairs: &[(FrameMeta, &DepthMap, &DepthMap)],
    dataset_id: &str,
    model_id: &str,
) -> Result<DatasetReport> {
    let mut total = MetricsAccumulator::default();
    let mut frames = Vec::new();
    for (meta, gt, est) in pairs {
        let mut acc = MetricsAccumulator::default();
        acc.add_maps(gt, est)?;
        if !acc.is_empty() {
            frames.push(FrameMetrics { meta: *meta, report: acc.finish(dataset_id, model_id)? });
        }
        total.merge(&acc);
    }
    Ok(DatasetReport { pooled: total.finish(dataset_id, model_id)?, frames })
}

/// Predicts every frame with `model` and pools the errors. Fails with a
/// leakage error if any frame's scene was used to train the model.
pub fn evaluate_dataset(model: &CrfModel, frames: &[Frame], dataset_id: &str, model_id: &str) -> Result<DatasetReport> {
    if frames.is_empty() {
        return Err(Error::Input(format!("dataset '{dataset_id}' has no test frames")));
    }
    let leaked: BTreeSet<u64> =
        frames.iter().map(|f| f.meta.scene_id).filter(|id| model.trained_scene_ids.contains(id)).collect();
    if !leaked.is_empty() {
        return Err(Error::Leakage(format!(
            "{} test scene(s) of '{dataset_id}' were used in training, e.g. {}",
            leaked.len(),
            leaked.iter().next().unwrap()
        )));
    }
    let preds: Vec<DepthMap> = frames.par_iter().map(|f| predict_depth(model, &f.image)).collect::<Result<_>>()?;
    let pairs: Vec<_> = frames.iter().zip(&preds).map(|(f, p)| (f.meta, &f.depth, p)).collect();
    pool_predictions(&pairs, dataset_id, model_id)
}

/// Header of the results table.
pub fn table_header() -> String {
    "| Method | Training | Fine-Tuning | rel | log10 | rms |\n|---|---|---|---|---|---|".into()
}

pub fn table_row(method: &str, training: &str, fine_tuning: &str, r: &MetricsReport) -> String {
    format!("| {method} | {training} | {fine_tuning} | {:.3} | {:.3} | {:.2} |", r.rel, r.log10, r.rms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Renderer;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_values() {
        let r = compute_metrics(&[1.0, 3.0], &[5.0, 3.0]).unwrap();
        assert!((r.rel - 2.0).abs() < 1e-12);
        assert!((r.log10 - 5f64.log10() / 2.0).abs() < 1e-12);
        assert!((r.rms - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.n_samples, 2);

        let perfect = compute_metrics(&[2.0, 7.5], &[2.0, 7.5]).unwrap();
        assert_eq!((perfect.rel, perfect.log10, perfect.rms), (0.0, 0.0, 0.0));
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(compute_metrics(&[], &[]), Err(Error::Input(_))));
        assert!(matches!(compute_metrics(&[1.0], &[1.0, 2.0]), Err(Error::Input(_))));
        assert!(matches!(compute_metrics(&[0.0], &[1.0]), Err(Error::Input(_))));
        assert!(matches!(compute_metrics(&[1.0], &[f64::NAN]), Err(Error::Input(_))));
    }

    #[test]
    fn non_positive_estimates_are_clamped_and_counted() {
        let r = compute_metrics(&[1.0, 1.0], &[0.0, -2.0]).unwrap();
        assert_eq!(r.clamped, 2);
        assert!((r.log10 - 6.0).abs() < 1e-9);
        assert!((r.rel - (1.0 - MIN_ESTIMATE)).abs() < 1e-12);
    }

    fn meta(scene_id: u64) -> FrameMeta {
        FrameMeta { scene_id, style_id: 0, pose_index: 0, renderer: Renderer::Raster, seed: 0 }
    }

    #[test]
    fn pooling_weights_pixels_equally() {
        let gt = DepthMap { width: 2, height: 2, sentinel: -1.0, data: vec![10.0; 4] };
        let a = DepthMap { data: vec![12.0; 4], ..gt.clone() };
        let b = DepthMap { data: vec![14.0; 4], ..gt.clone() };
        let r = pool_predictions(&[(meta(1), &gt, &a), (meta(2), &gt, &b)], "d", "m").unwrap();
        assert!((r.frames[0].report.rel - 0.2).abs() < 1e-6);
        assert!((r.frames[1].report.rel - 0.4).abs() < 1e-6);
        assert!((r.pooled.rel - 0.3).abs() < 1e-6);
        assert_eq!(r.pooled.n_samples, 8);

        let mut partial = gt.clone();
        partial.data[..3].fill(-1.0);
        let r = pool_predictions(&[(meta(1), &gt, &a), (meta(2), &partial, &b)], "d", "m").unwrap();
        assert!((r.pooled.rel - (4.0 * 0.2 + 0.4) / 5.0).abs() < 1e-6);
    }

    #[test]
    fn table_formatting() {
        let r = compute_metrics(&[1.0, 3.0], &[5.0, 3.0]).unwrap();
        assert_eq!(table_row("CNN-CRF", "2000 synthetic", "none", &r), "| CNN-CRF | 2000 synthetic | none | 2.000 | 0.349 | 2.83 |");
        assert!(table_header().starts_with("| Method | Training | Fine-Tuning | rel | log10 | rms |"));
    }

    proptest! {
        #[test]
        fn scaling_properties(
            gt in prop::collection::vec(0.5f64..50.0, 1..40),
            f in prop::collection::vec(0.2f64..5.0, 40),
            c in 0.1f64..10.0,
        ) {
            let est: Vec<f64> = gt.iter().zip(&f).map(|(g, f)| g * f).collect();
            let r = compute_metrics(&gt, &est).unwrap();
            prop_assert!(r.rel >= 0.0 && r.log10 >= 0.0 && r.rms >= 0.0);
            let sg: Vec<f64> = gt.iter().map(|g| g * c).collect();
            let se: Vec<f64> = est.iter().map(|e| e * c).collect();
            let s = compute_metrics(&sg, &se).unwrap();
            prop_assert!((s.rel - r.rel).abs() <= 1e-9 * (1.0 + r.rel));
            prop_assert!((s.log10 - r.log10).abs() <= 1e-9 * (1.0 + r.log10));
            prop_assert!((s.rms - c * r.rms).abs() <= 1e-9 * (1.0 + c * r.rms));
        }
    }
}

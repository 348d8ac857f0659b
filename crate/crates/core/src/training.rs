//! Joint CNN-CRF training, fully-connected fine-tuning and depth prediction.
//!
//! Each frame is segmented into superpixels; every superpixel with valid
//! ground truth contributes a patch, a pooled depth and its edges to the CRF
//! negative log-likelihood. The gradient of a mini-batch is the sum of the
//! per-image gradients divided by the number of superpixels in the batch.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{map_infer, nll_grad, regularizer, CrfGraph, CrfParams};
use crate::error::{param, Error, Result};
use crate::frame::{DepthMap, Frame, ImageRgb};
use crate::network::{
    accumulate, learning_rate, read_exact, sgd_step, Gradients, NetworkSpec, NetworkWeights, TrainHyper, TrainablePattern,
    Velocity,
};
use crate::seed::rng_for;
use crate::superpixels::{extract_patch, pool_depth, superpixel_graph, Patch, SuperpixelGraph, SuperpixelParams};

const MAGIC: &[u8; 4] = b"EDCK";
const VERSION: u32 = 1;

/// Depth written for pixels a prediction does not cover. Predictions are
/// clamped to be non-negative, so this value never collides with one.
pub const PREDICTION_SENTINEL: f32 = -1.0;

/// A trained estimator: unary network, CRF parameters and the superpixel
/// settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    pub network: NetworkWeights,
    pub crf: CrfParams,
    pub superpixels: SuperpixelParams,
    pub config_hash: u64,
    /// Scenes seen in training or fine-tuning; evaluation refuses them.
    pub trained_scene_ids: BTreeSet<u64>,
}

impl CrfModel {
    pub fn patch_size(&self) -> usize {
        self.network.spec().input_size
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        let sp = &self.superpixels;
        w.write_all(&(sp.target_count as u32).to_le_bytes())?;
        w.write_all(&sp.compactness.to_le_bytes())?;
        w.write_all(&(sp.hist_bins as u32).to_le_bytes())?;
        for g in sp.gamma {
            w.write_all(&g.to_le_bytes())?;
        }
        w.write_all(&(self.crf.beta.len() as u32).to_le_bytes())?;
        for b in &self.crf.beta {
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&self.crf.lambda_theta.to_le_bytes())?;
        w.write_all(&self.crf.lambda_beta.to_le_bytes())?;
        w.write_all(&(self.trained_scene_ids.len() as u32).to_le_bytes())?;
        for id in &self.trained_scene_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        self.network.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = u64::from_le_bytes(read_exact(r)?);
        let u32_ = |r: &mut dyn Read| -> Result<usize> { Ok(u32::from_le_bytes(read_exact(&mut &mut *r)?) as usize) };
        let f64_ = |r: &mut dyn Read| -> Result<f64> { Ok(f64::from_le_bytes(read_exact(&mut &mut *r)?)) };
        let target_count = u32_(r)?;
        let compactness = f64_(r)?;
        let hist_bins = u32_(r)?;
        let gamma = [f64_(r)?, f64_(r)?];
        let superpixels = SuperpixelParams { target_count, compactness, hist_bins, gamma };
        superpixels.validate().map_err(|e| Error::Format(e.to_string()))?;
        let kinds = u32_(r)?;
        if kinds != gamma.len() {
            return Err(Error::Format(format!("checkpoint has {kinds} pairwise weights, expected {}", gamma.len())));
        }
        let beta = (0..kinds).map(|_| f64_(r)).collect::<Result<Vec<_>>>()?;
        let crf = CrfParams { beta, lambda_theta: f64_(r)?, lambda_beta: f64_(r)? };
        crf.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n_ids = u32_(r)?;
        if n_ids > 1 << 24 {
            return Err(Error::Format(format!("implausible scene count {n_ids}")));
        }
        let trained_scene_ids =
            (0..n_ids).map(|_| Ok(u64::from_le_bytes(read_exact(r)?))).collect::<Result<BTreeSet<u64>>>()?;
        let network = NetworkWeights::read_from(r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        Ok(Self { network, crf, superpixels, config_hash, trained_scene_ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Everything fixed before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub network: NetworkSpec,
    pub hyper: TrainHyper,
    pub crf: CrfParams,
    pub superpixels: SuperpixelParams,
    /// Start the output bias at the mean training depth.
    pub init_bias_to_mean_depth: bool,
    pub config_hash: u64,
}

/// One frame reduced to its superpixels with valid ground truth.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub scene_id: u64,
    pub patches: Vec<Patch>,
    pub y: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub similarities: Vec<Vec<f64>>,
    /// Conv features of each patch, filled when the conv stack is frozen.
    features: Option<Vec<Vec<f64>>>,
}

impl PreparedFrame {
    pub fn graph(&self) -> CrfGraph<'_> {
        CrfGraph { nodes: self.y.len(), edges: &self.edges, similarities: &self.similarities }
    }
}

fn patches_for(image: &ImageRgb, graph: &SuperpixelGraph, patch_size: usize) -> Result<Vec<Patch>> {
    (0..graph.len()).map(|i| extract_patch(image, graph, i, patch_size)).collect()
}

/// Segments a frame, pools its depth and keeps the subgraph of superpixels
/// with valid depth.
pub fn prepare_frame(frame: &Frame, sp: &SuperpixelParams, patch_size: usize) -> Result<PreparedFrame> {
    let graph = superpixel_graph(&frame.image, sp)?;
    let pooled = pool_depth(&graph.labels, &frame.depth)?;
    let mut index = vec![usize::MAX; graph.len()];
    let mut y = Vec::new();
    let mut patches = Vec::new();
    for (i, d) in pooled.iter().enumerate() {
        if let Some(d) = d {
            index[i] = y.len();
            y.push(*d);
            patches.push(extract_patch(&frame.image, &graph, i, patch_size)?);
        }
    }
    let mut edges = Vec::new();
    let mut similarities = vec![Vec::new(); graph.similarities.len()];
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        if index[i] != usize::MAX && index[j] != usize::MAX {
            edges.push((index[i], index[j]));
            for (k, s) in graph.similarities.iter().enumerate() {
                similarities[k].push(s[e]);
            }
        }
    }
    Ok(PreparedFrame { scene_id: frame.meta.scene_id, patches, y, edges, similarities, features: None })
}

pub fn prepare_frames(frames: &[Frame], sp: &SuperpixelParams, patch_size: usize) -> Result<Vec<PreparedFrame>> {
    frames.par_iter().map(|f| prepare_frame(f, sp, patch_size)).collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean NLL per superpixel plus regularizers; NaN on validation lines.
    pub objective: f64,
    /// Superpixel-level relative error of the MAP depths. On training lines
    /// it is accumulated over the epoch as the parameters change.
    pub rel: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CrfModel,
    pub log: Vec<EpochRecord>,
}

struct ImageTerms {
    nll: f64,
    /// Summed relative error of the MAP depths under the current parameters.
    rel: f64,
    grads: Gradients,
    d_beta: Vec<f64>,
    nodes: usize,
}

fn unary(network: &NetworkWeights, frame: &PreparedFrame, i: usize) -> Result<(f64, crate::network::ForwardCache)> {
    match &frame.features {
        Some(f) => network.forward_from(network.conv_layer_count(), f[i].clone()),
        None => network.forward(&frame.patches[i]),
    }
}

fn image_terms(network: &NetworkWeights, crf: &CrfParams, frame: &PreparedFrame) -> Result<ImageTerms> {
    let mut h = Vec::with_capacity(frame.y.len());
    let mut caches = Vec::with_capacity(frame.y.len());
    for i in 0..frame.y.len() {
        let (v, c) = unary(network, frame, i)?;
        h.push(v);
        caches.push(c);
    }
    let g = nll_grad(&frame.y, &h, frame.graph(), &crf.beta)?;
    let mut grads: Gradients = vec![None; network.layers().len()];
    for (cache, d) in caches.iter().zip(&g.d_h) {
        accumulate(&mut grads, &network.backward(cache, *d)?, 1.0);
    }
    // The gradient with respect to h is 2 (m - y), where m is the MAP solution.
    let rel = frame.y.iter().zip(&g.d_h).map(|(y, d)| ((y + 0.5 * d).max(0.0) - y).abs() / y).sum();
    Ok(ImageTerms { nll: g.value, rel, grads, d_beta: g.d_beta, nodes: frame.y.len() })
}

/// Mean superpixel relative error of MAP predictions.
fn map_rel(network: &NetworkWeights, crf: &CrfParams, frames: &[PreparedFrame]) -> Result<f64> {
    let per_frame: Vec<(f64, usize)> = frames
        .par_iter()
        .map(|f| {
            let h = (0..f.y.len()).map(|i| unary(network, f, i).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
            let y = map_infer(&h, f.graph(), &crf.beta)?;
            let rel: f64 = y.iter().zip(&f.y).map(|(p, t)| (p.max(0.0) - t).abs() / t).sum();
            Ok((rel, f.y.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per_frame.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Trains `network` and `crf` on prepared frames. Keeps the parameters of
/// the epoch with the lowest validation error when validation frames exist.
fn run_training(
    mut network: NetworkWeights,
    mut crf: CrfParams,
    hyper: &TrainHyper,
    train: &mut [PreparedFrame],
    val: &mut [PreparedFrame],
) -> Result<(NetworkWeights, CrfParams, Vec<EpochRecord>)> {
    hyper.validate()?;
    crf.validate()?;
    let usable: Vec<usize> = (0..train.len()).filter(|&i| !train[i].y.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Input("no training frame has valid depth".into()));
    }
    let conv_frozen = network.layers()[..network.conv_layer_count()].iter().all(|l| !l.trainable);
    for f in train.iter_mut().chain(val.iter_mut()) {
        f.features = if conv_frozen {
            Some(f.patches.iter().map(|p| network.conv_features(p)).collect::<Result<_>>()?)
        } else {
            None
        };
    }
    let mut velocity = Velocity::zeros(&network);
    let mut beta_velocity = vec![0.0; crf.beta.len()];
    let mut log = Vec::new();
    let mut best: Option<(f64, NetworkWeights, CrfParams)> = None;
    for epoch in 1..=hyper.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng_for(&[hyper.seed, epoch as u64, 0x5A]));
        let lr = learning_rate(hyper, epoch);
        let (mut nll_sum, mut rel_sum, mut node_sum) = (0.0, 0.0, 0usize);
        for batch in order.chunks(hyper.batch_size) {
            let terms: Vec<ImageTerms> =
                batch.par_iter().map(|&i| image_terms(&network, &crf, &train[i])).collect::<Result<_>>()?;
            let nodes: usize = terms.iter().map(|t| t.nodes).sum();
            let scale = 1.0 / nodes as f64;
            let mut grads: Gradients = vec![None; network.layers().len()];
            let mut d_beta = vec![0.0; crf.beta.len()];
            for t in &terms {
                accumulate(&mut grads, &t.grads, scale);
                d_beta.iter_mut().zip(&t.d_beta).for_each(|(a, b)| *a += scale * b);
                nll_sum += t.nll;
                rel_sum += t.rel;
            }
            node_sum += nodes;
            if !nll_sum.is_finite() {
                return Err(Error::Divergence(format!("objective became non-finite in epoch {epoch}")));
            }
            for (g, p) in grads.iter_mut().zip(network.layers()) {
                if let Some(g) = g {
                    g.weights.iter_mut().zip(&p.weights).for_each(|(g, w)| *g += crf.lambda_theta * w);
                    g.bias.iter_mut().zip(&p.bias).for_each(|(g, w)| *g += crf.lambda_theta * w);
                }
            }
            sgd_step(&mut network, &grads, hyper, &mut velocity, epoch)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
            for ((b, v), g) in crf.beta.iter_mut().zip(&mut beta_velocity).zip(&d_beta) {
                *v = hyper.momentum * *v - lr * (g + crf.lambda_beta * *b);
                *b += *v;
            }
            crf.project();
            if !crf.beta.iter().all(|b| b.is_finite()) {
                return Err(Error::Divergence(format!("pairwise weights became non-finite in epoch {epoch}")));
            }
        }
        let objective = nll_sum / node_sum as f64 + regularizer(network.trainable_norm_sq(), &crf);
        let train_rel = rel_sum / node_sum as f64;
        log::info!("epoch {epoch}: objective {objective:.5}, train rel {train_rel:.4}");
        log.push(EpochRecord { epoch, split: "train".into(), objective, rel: train_rel });
        if !val.is_empty() {
            let val_rel = map_rel(&network, &crf, val)?;
            log.push(EpochRecord { epoch, split: "val".into(), objective: f64::NAN, rel: val_rel });
            if best.as_ref().is_none_or(|b| val_rel < b.0) {
                best = Some((val_rel, network.clone(), crf.clone()));
            }
        }
    }
    if let Some((_, n, c)) = best {
        network = n;
        crf = c;
    }
    network.round_to_f32();
    Ok((network, crf, log))
}

/// Trains the unary network and pairwise weights from scratch on synthetic
/// frames. `val` must not share scenes with `train`.
pub fn train_joint(train: &[Frame], val: &[Frame], settings: &TrainSettings) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    check_disjoint(train, val)?;
    settings.superpixels.validate()?;
    if settings.network.input_channels != 3 {
        return Err(param("the unary network must take 3-channel patches"));
    }
    let patch = settings.network.input_size;
    let mut train_p = prepare_frames(train, &settings.superpixels, patch)?;
    let mut val_p = prepare_frames(val, &settings.superpixels, patch)?;
    let mut network = NetworkWeights::init(&settings.network, settings.hyper.seed)?;
    if settings.init_bias_to_mean_depth {
        let (sum, n) = train_p.iter().flat_map(|f| &f.y).fold((0.0, 0usize), |a, y| (a.0 + y, a.1 + 1));
        if n > 0 {
            let last = network.layers().len() - 1;
            network.layer_mut(last).bias[0] = sum / n as f64;
        }
    }
    let (network, crf, log) = run_training(network, settings.crf.clone(), &settings.hyper, &mut train_p, &mut val_p)?;
    let model = CrfModel {
        network,
        crf,
        superpixels: settings.superpixels,
        config_hash: settings.config_hash,
        trained_scene_ids: train.iter().chain(val).map(|f| f.meta.scene_id).collect(),
    };
    Ok(TrainOutcome { model, log })
}

fn check_disjoint(train: &[Frame], val: &[Frame]) -> Result<()> {
    let train_ids: BTreeSet<u64> = train.iter().map(|f| f.meta.scene_id).collect();
    if let Some(f) = val.iter().find(|f| train_ids.contains(&f.meta.scene_id)) {
        return Err(Error::Leakage(format!("scene {} is in both training and validation", f.meta.scene_id)));
    }
    Ok(())
}

/// Frames of one scene view must share a single depth map.
pub fn check_depth_groups(frames: &[Frame]) -> Result<()> {
    let mut groups: BTreeMap<(u64, u32), &DepthMap> = BTreeMap::new();
    for f in frames {
        let key = (f.meta.scene_id, f.meta.pose_index);
        match groups.get(&key) {
            Some(d) if **d != f.depth => {
                return Err(Error::Input(format!(
                    "frames of scene {} pose {} carry different depth maps",
                    key.0, key.1
                )));
            }
            Some(_) => {}
            None => {
                groups.insert(key, &f.depth);
            }
        }
    }
    Ok(())
}

/// Fine-tunes the fully connected layers and pairwise weights of `base` on
/// cinematic frames; convolutional layers stay bit-identical.
pub fn finetune(base: &CrfModel, train: &[Frame], val: &[Frame], hyper: &TrainHyper) -> Result<TrainOutcome> {
    check_depth_groups(train)?;
    check_disjoint(train, val)?;
    let mut network = base.network.clone();
    network.set_trainable(TrainablePattern::FcOnly);
    let mut model = CrfModel { network, ..base.clone() };
    if hyper.epochs == 0 {
        return Ok(TrainOutcome { model, log: Vec::new() });
    }
    if train.is_empty() {
        return Err(Error::Input("empty fine-tuning set".into()));
    }
    let patch = base.patch_size();
    let mut train_p = prepare_frames(train, &base.superpixels, patch)?;
    let mut val_p = prepare_frames(val, &base.superpixels, patch)?;
    let (network, crf, log) = run_training(model.network, model.crf, hyper, &mut train_p, &mut val_p)?;
    model.network = network;
    model.crf = crf;
    model.trained_scene_ids.extend(train.iter().chain(val).map(|f| f.meta.scene_id));
    Ok(TrainOutcome { model, log })
}

/// Per-superpixel unary outputs and MAP depths of one image, with its graph.
pub struct Prediction {
    pub graph: SuperpixelGraph,
    pub unary: Vec<f64>,
    pub map: Vec<f64>,
    pub depth: DepthMap,
}

/// Segments `image`, evaluates the unary network on every superpixel, solves
/// the CRF and broadcasts the clamped MAP depths to pixels.
pub fn predict(model: &CrfModel, image: &ImageRgb) -> Result<Prediction> {
    let graph = superpixel_graph(image, &model.superpixels)?;
    let patches = patches_for(image, &graph, model.patch_size())?;
    let unary = patches.iter().map(|p| model.network.predict(p)).collect::<Result<Vec<_>>>()?;
    let crf_graph = CrfGraph { nodes: graph.len(), edges: &graph.edges, similarities: &graph.similarities };
    let map = map_infer(&unary, crf_graph, &model.crf.beta)?;
    let data = graph.labels.labels.iter().map(|&l| map[l as usize].max(0.0) as f32).collect();
    let depth = DepthMap { width: image.width, height: image.height, sentinel: PREDICTION_SENTINEL, data };
    Ok(Prediction { graph, unary, map, depth })
}

pub fn predict_depth(model: &CrfModel, image: &ImageRgb) -> Result<DepthMap> {
    Ok(predict(model, image)?.depth)
}

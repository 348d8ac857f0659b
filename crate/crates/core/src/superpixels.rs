//! SLIC superpixels, the superpixel adjacency graph with pairwise
//! similarities, depth pooling and per-superpixel image patches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::frame::{DepthMap, ImageRgb};

const SLIC_ITERATIONS: usize = 10;

/// Number of pairwise similarity kinds: mean intensity and histogram.
pub const SIMILARITY_KINDS: usize = 2;

/// Per-pixel superpixel index, row-major, with indices `0..count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Pixel count of every superpixel.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelParams {
    pub target_count: usize,
    pub compactness: f64,
    pub hist_bins: usize,
    pub gamma: [f64; SIMILARITY_KINDS],
}

impl Default for SuperpixelParams {
    fn default() -> Self {
        Self { target_count: 200, compactness: 0.1, hist_bins: 16, gamma: [10.0, 5.0] }
    }
}

impl SuperpixelParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_count < 1 {
            return Err(param("superpixel target_count must be >= 1"));
        }
        if !(self.compactness >= 0.0 && self.compactness.is_finite()) {
            return Err(param("compactness must be finite and >= 0"));
        }
        if self.hist_bins < 1 {
            return Err(param("hist_bins must be >= 1"));
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(param("similarity gamma must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    intensity: f64,
    x: f64,
    y: f64,
}

/// SLIC clustering of the channel-mean intensity in (intensity, x, y) space.
///
/// Seeds sit on a regular grid of roughly `target_count` cells. The spatial
/// term is `compactness * distance / grid_step`, added in quadrature to the
/// intensity difference. After the iterations every label is made 4-connected
/// by merging stray fragments into their largest neighbor, then labels are
/// renumbered in scan order.
pub fn segment_slic(image: &ImageRgb, target_count: usize, compactness: f64) -> Result<LabelMap> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(Error::Input("cannot segment an empty image".into()));
    }
    if target_count < 1 || target_count > w * h {
        return Err(param(format!("target_count {target_count} must be in 1..={}", w * h)));
    }
    let intensity = image.intensity();
    let nx = ((target_count as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((target_count as f64 / nx as f64).round() as usize).clamp(1, h);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let grid_step = (sx * sy).sqrt();
    let radius = sx.max(sy).ceil();

    let mut centers: Vec<Center> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| ((i as f64 + 0.5) * sx, (j as f64 + 0.5) * sy)))
        .map(|(x, y)| {
            let px = (x as usize).min(w - 1);
            let py = (y as usize).min(h - 1);
            Center { intensity: intensity[py * w + px], x, y }
        })
        .collect();

    let mut labels = vec![0u32; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    let spatial = compactness / grid_step;
    for _ in 0..SLIC_ITERATIONS {
        best.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c.x - radius).floor().max(0.0) as usize;
            let x1 = ((c.x + radius).ceil() as usize).min(w);
            let y0 = (c.y - radius).floor().max(0.0) as usize;
            let y1 = ((c.y + radius).ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * w + x;
                    let di = intensity[i] - c.intensity;
                    let dx = x as f64 + 0.5 - c.x;
                    let dy = y as f64 + 0.5 - c.y;
                    let d = di * di + spatial * spatial * (dx * dx + dy * dy);
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            a.0 += intensity[i];
            a.1 += (i % w) as f64 + 0.5;
            a.2 += (i / w) as f64 + 0.5;
            a.3 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *c = Center { intensity: a.0 / n, x: a.1 / n, y: a.2 / n };
            }
        }
    }
    enforce_connectivity(&mut labels, w, h);
    let count = relabel(&mut labels);
    Ok(LabelMap { width: w, height: h, count, labels })
}

/// 4-connected components; returns per-pixel component ids and sizes.
fn components(labels: &[u32], w: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == label {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn for_each_neighbor_pair(w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                f(i, i + 1);
            }
            if y + 1 < h {
                f(i, i + w);
            }
        }
    }
}

fn enforce_connectivity(labels: &mut [u32], w: usize, h: usize) {
    loop {
        let (comp, sizes) = components(labels, w, h);
        // The largest component of each label keeps it; the others are orphans.
        let mut keeper: BTreeMap<u32, usize> = BTreeMap::new();
        let mut comp_label = vec![0u32; sizes.len()];
        for (i, &c) in comp.iter().enumerate() {
            comp_label[c] = labels[i];
        }
        for (c, &l) in comp_label.iter().enumerate() {
            let k = keeper.entry(l).or_insert(c);
            if sizes[c] > sizes[*k] {
                *k = c;
            }
        }
        let orphan: Vec<bool> = (0..sizes.len()).map(|c| keeper[&comp_label[c]] != c).collect();
        if !orphan.iter().any(|&o| o) {
            return;
        }
        let mut adjacent: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); sizes.len()];
        for_each_neighbor_pair(w, h, |i, j| {
            let (a, b) = (comp[i], comp[j]);
            if a != b {
                adjacent[a].insert(b);
                adjacent[b].insert(a);
            }
        });
        let mut target = comp_label.clone();
        for c in (0..sizes.len()).filter(|&c| orphan[c]) {
            // Ties go to the lowest component id for determinism.
            if let Some(&n) = adjacent[c].iter().max_by_key(|&&n| (sizes[n], std::cmp::Reverse(n))) {
                target[c] = comp_label[n];
            }
        }
        for (i, l) in labels.iter_mut().enumerate() {
            *l = target[comp[i]];
        }
    }
}

fn relabel(labels: &mut [u32]) -> usize {
    let mut map: BTreeMap<u32, u32> = BTreeMap::new();
    let mut next = 0;
    for l in labels.iter_mut() {
        *l = *map.entry(*l).or_insert_with(|| {
            next += 1;
            next - 1
        });
    }
    next as usize
}

/// Pixel-space extent of one superpixel. Centroids use pixel-center
/// coordinates, so pixel `(x, y)` sits at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub size: usize,
    pub centroid: (f64, f64),
    /// Inclusive pixel bounds `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
}

/// Superpixels of one image with their neighbor edges and similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGraph {
    pub labels: LabelMap,
    /// Unordered neighbor pairs stored as `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `similarities[k][e]` is the kind-`k` similarity on edge `e`.
    pub similarities: Vec<Vec<f64>>,
    pub regions: Vec<Region>,
    pub mean_intensity: Vec<f64>,
    pub histograms: Vec<Vec<f64>>,
}

impl SuperpixelGraph {
    pub fn len(&self) -> usize {
        self.labels.count
    }

    pub fn is_empty(&self) -> bool {
        self.labels.count == 0
    }
}

pub fn regions(labels: &LabelMap) -> Vec<Region> {
    let mut acc = vec![(0usize, 0.0, 0.0, usize::MAX, usize::MAX, 0usize, 0usize); labels.count];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let a = &mut acc[labels.get(x, y)];
            a.0 += 1;
            a.1 += x as f64 + 0.5;
            a.2 += y as f64 + 0.5;
            a.3 = a.3.min(x);
            a.4 = a.4.min(y);
            a.5 = a.5.max(x);
            a.6 = a.6.max(y);
        }
    }
    acc.into_iter()
        .map(|a| Region {
            size: a.0,
            centroid: (a.1 / a.0 as f64, a.2 / a.0 as f64),
            bbox: (a.3, a.4, a.5, a.6),
        })
        .collect()
}

/// Builds 4-connectivity neighbor edges and the two similarity kinds:
/// `exp(-gamma_k * |f_i - f_j|^2)` over mean intensity and over the
/// normalized `hist_bins`-bin intensity histogram.
pub fn build_graph(labels: LabelMap, image: &ImageRgb, hist_bins: usize, gamma: [f64; SIMILARITY_KINDS]) -> Result<SuperpixelGraph> {
    if image.width != labels.width || image.height != labels.height {
        return Err(Error::Shape(format!(
            "labels {}x{} vs image {}x{}",
            labels.width, labels.height, image.width, image.height
        )));
    }
    if hist_bins < 1 {
        return Err(param("hist_bins must be >= 1"));
    }
    let (w, h) = (labels.width, labels.height);
    let p = labels.count;
    let intensity = image.intensity();
    let mut sums = vec![0.0; p];
    let mut histograms = vec![vec![0.0; hist_bins]; p];
    for (i, &l) in labels.labels.iter().enumerate() {
        let v = intensity[i].clamp(0.0, 1.0);
        sums[l as usize] += v;
        let bin = ((v * hist_bins as f64) as usize).min(hist_bins - 1);
        histograms[l as usize][bin] += 1.0;
    }
    let regions = regions(&labels);
    let mean_intensity: Vec<f64> = sums.iter().zip(&regions).map(|(s, r)| s / r.size as f64).collect();
    for (hist, r) in histograms.iter_mut().zip(&regions) {
        hist.iter_mut().for_each(|v| *v /= r.size as f64);
    }

    let mut edge_set = BTreeSet::new();
    for_each_neighbor_pair(w, h, |i, j| {
        let (a, b) = (labels.labels[i] as usize, labels.labels[j] as usize);
        if a != b {
            edge_set.insert((a.min(b), a.max(b)));
        }
    });
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
    let intensity_sim = edges
        .iter()
        .map(|&(i, j)| (-gamma[0] * (mean_intensity[i] - mean_intensity[j]).powi(2)).exp())
        .collect();
    let hist_sim = edges
        .iter()
        .map(|&(i, j)| {
            let d2: f64 = histograms[i].iter().zip(&histograms[j]).map(|(a, b)| (a - b).powi(2)).sum();
            (-gamma[1] * d2).exp()
        })
        .collect();
    Ok(SuperpixelGraph {
        labels,
        edges,
        similarities: vec![intensity_sim, hist_sim],
        regions,
        mean_intensity,
        histograms,
    })
}

/// Segments `image` and builds its graph with `params`.
pub fn superpixel_graph(image: &ImageRgb, params: &SuperpixelParams) -> Result<SuperpixelGraph> {
    params.validate()?;
    let labels = segment_slic(image, params.target_count, params.compactness)?;
    build_graph(labels, image, params.hist_bins, params.gamma)
}

/// Mean valid depth per superpixel; `None` where every pixel is sentinel.
pub fn pool_depth(labels: &LabelMap, depth: &DepthMap) -> Result<Vec<Option<f64>>> {
    if depth.width != labels.width || depth.height != labels.height {
        return Err(Error::Shape(format!(
            "labels {}x{} vs depth {}x{}",
            labels.width, labels.height, depth.width, depth.height
        )));
    }
    let mut acc = vec![(0.0, 0usize); labels.count];
    for (i, &l) in labels.labels.iter().enumerate() {
        if depth.is_valid(i) {
            acc[l as usize].0 += depth.data[i] as f64;
            acc[l as usize].1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
}

/// Square RGB patch stored channel-major (`3 x size x size`).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

/// Square crop around superpixel `i`, resized bilinearly to `patch_size`.
///
/// The crop side is 1.2 times the long side of the superpixel's bounding box,
/// centered on its centroid. Pixels outside the image replicate the nearest
/// edge pixel.
pub fn extract_patch(image: &ImageRgb, graph: &SuperpixelGraph, i: usize, patch_size: usize) -> Result<Patch> {
    let region = graph
        .regions
        .get(i)
        .ok_or_else(|| Error::Domain(format!("superpixel {i} out of range 0..{}", graph.len())))?;
    if patch_size < 1 {
        return Err(param("patch_size must be >= 1"));
    }
    let (bx0, by0, bx1, by1) = region.bbox;
    let long = (bx1 - bx0 + 1).max(by1 - by0 + 1) as f64;
    let side = (1.2 * long).round().max(1.0);
    let x0 = (region.centroid.0 - side / 2.0).round();
    let y0 = (region.centroid.1 - side / 2.0).round();
    let scale = side / patch_size as f64;
    let (w, h) = (image.width as isize, image.height as isize);
    let texel = |x: isize, y: isize, c: usize| -> f64 {
        let xi = x.clamp(0, w - 1) as usize;
        let yi = y.clamp(0, h - 1) as usize;
        image.data[3 * (yi * image.width + xi) + c] as f64
    };
    let n = patch_size;
    let mut data = vec![0f32; 3 * n * n];
    for py in 0..n {
        let sy = y0 + ((py as f64 + 0.5) * scale - 0.5).clamp(0.0, side - 1.0);
        let (yf, ty) = (sy.floor(), sy - sy.floor());
        for px in 0..n {
            let sx = x0 + ((px as f64 + 0.5) * scale - 0.5).clamp(0.0, side - 1.0);
            let (xf, tx) = (sx.floor(), sx - sx.floor());
            let (xa, ya) = (xf as isize, yf as isize);
            for c in 0..3 {
                let top = texel(xa, ya, c) * (1.0 - tx) + texel(xa + 1, ya, c) * tx;
                let bottom = texel(xa, ya + 1, c) * (1.0 - tx) + texel(xa + 1, ya + 1, c) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                data[(c * n + py) * n + px] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Patch { size: n, data })
}

//! On-disk datasets.
//!
//! A dataset directory holds `frames/` with 8-bit RGB PNG images, `depth/`
//! with depth rasters and a `manifest.jsonl` listing every frame.
//!
//! Depth raster layout, all little-endian:
//!
//! | offset | size | content            |
//! |--------|------|--------------------|
//! | 0      | 4    | magic `DEP1`       |
//! | 4      | 4    | width, `u32`       |
//! | 8      | 4    | height, `u32`      |
//! | 12     | 4    | sentinel, `f32`    |
//! | 16     | 4·wh | depth in mm, `f32` |
//!
//! The manifest's first line is a [`ManifestHeader`]; each following line is
//! one [`FrameRecord`]. Frames of one scene view rendered in several styles
//! point at the same depth file.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Frame, FrameMeta, ImageRgb, Renderer};

const DEPTH_MAGIC: &[u8; 3] = b"DEP";
const DEPTH_VERSION: u8 = b'1';
const MANIFEST_FORMAT: &str = "endodepth-manifest";
const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_depth_to(depth: &DepthMap, w: &mut impl Write) -> Result<()> {
    if depth.data.len() != depth.width * depth.height {
        return Err(Error::Shape(format!(
            "depth map has {} values for {}x{}",
            depth.data.len(),
            depth.width,
            depth.height
        )));
    }
    let mut buf = Vec::with_capacity(16 + 4 * depth.data.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.push(DEPTH_VERSION);
    buf.extend_from_slice(&(depth.width as u32).to_le_bytes());
    buf.extend_from_slice(&(depth.height as u32).to_le_bytes());
    buf.extend_from_slice(&depth.sentinel.to_le_bytes());
    for d in &depth.data {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_depth_from(r: &mut impl Read) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("depth raster header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..3] != DEPTH_MAGIC {
        return Err(Error::Format("not a depth raster (bad magic)".into()));
    }
    if bytes[3] != DEPTH_VERSION {
        return Err(Error::Format(format!("unsupported depth raster version '{}'", bytes[3] as char)));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let width = u32::from_le_bytes(word(4)) as usize;
    let height = u32::from_le_bytes(word(8)) as usize;
    let sentinel = f32::from_le_bytes(word(12));
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format(format!("implausible depth raster size {width}x{height}")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "depth raster {width}x{height} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DepthMap { width, height, sentinel, data })
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut buf = Vec::new();
    write_depth_to(depth, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    read_depth_from(&mut std::fs::File::open(path)?)
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_image(path: &Path, img: &ImageRgb) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer does not match its size".into()))?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(e) => Error::Io(e),
        e => Error::Format(e.to_string()),
    })
}

pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(e) => Error::Io(e),
        e => Error::Format(format!("{}: {e}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    Ok(ImageRgb {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub units: String,
    pub sentinel: f32,
    /// Hash of the configuration that generated the dataset.
    pub config_hash: String,
}

impl ManifestHeader {
    pub fn new(name: &str, sentinel: f32, config_hash: &str) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            name: name.into(),
            units: "mm".into(),
            sentinel,
            config_hash: config_hash.into(),
        }
    }
}

/// One frame; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub depth: String,
    pub scene_id: u64,
    pub style_id: u32,
    pub pose_index: u32,
    pub renderer: Renderer,
    pub seed: u64,
    pub split: Split,
}

impl FrameRecord {
    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            scene_id: self.scene_id,
            style_id: self.style_id,
            pose_index: self.pose_index,
            renderer: self.renderer,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<FrameRecord>,
}

impl Manifest {
    /// Checks that no scene appears in two splits and that each scene view
    /// references a single depth file.
    pub fn validate(&self) -> Result<()> {
        let mut split_of: BTreeMap<u64, Split> = BTreeMap::new();
        let mut depth_of: BTreeMap<(u64, u32), &str> = BTreeMap::new();
        for r in &self.records {
            match split_of.insert(r.scene_id, r.split) {
                Some(s) if s != r.split => {
                    return Err(Error::Leakage(format!("scene {} appears in both {s} and {}", r.scene_id, r.split)));
                }
                _ => {}
            }
            match depth_of.insert((r.scene_id, r.pose_index), &r.depth) {
                Some(d) if d != r.depth => {
                    return Err(Error::Input(format!(
                        "scene {} pose {} references depth files {d} and {}",
                        r.scene_id, r.pose_index, r.depth
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn scene_ids(&self, split: Split) -> BTreeSet<u64> {
        self.split(split).map(|r| r.scene_id).collect()
    }
}

pub fn write_manifest_to(manifest: &Manifest, w: &mut impl Write) -> Result<()> {
    manifest.validate()?;
    let mut out = serde_json::to_string(&manifest.header).map_err(|e| Error::Internal(e.to_string()))?;
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?);
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest_from(r: &mut impl Read) -> Result<Manifest> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))??;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unknown manifest format '{}'", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", header.version)));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 2)))?,
        );
    }
    let m = Manifest { header, records };
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest_to(manifest, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_manifest_from(&mut std::fs::File::open(path)?)
}

/// Relative image and depth paths for a frame.
pub fn frame_paths(meta: &FrameMeta) -> (String, String) {
    let view = format!("s{:016x}_p{:04}", meta.scene_id, meta.pose_index);
    (format!("frames/{view}_st{}.png", meta.style_id), format!("depth/{view}.dep1"))
}

/// Writes one frame's image and depth under `dir` and returns its record.
pub fn save_frame(frame: &Frame, dir: &Path, split: Split) -> Result<FrameRecord> {
    let rec = frame_record(frame, split);
    save_image(&dir.join(&rec.image), &frame.image)?;
    write_depth(&dir.join(&rec.depth), &frame.depth)?;
    Ok(rec)
}

fn frame_record(frame: &Frame, split: Split) -> FrameRecord {
    let (image, depth) = frame_paths(&frame.meta);
    let m = frame.meta;
    FrameRecord {
        image,
        depth,
        scene_id: m.scene_id,
        style_id: m.style_id,
        pose_index: m.pose_index,
        renderer: m.renderer,
        seed: m.seed,
        split,
    }
}

pub fn load_frame(record: &FrameRecord, dir: &Path) -> Result<Frame> {
    let image = load_image(&dir.join(&record.image))?;
    let depth = read_depth(&dir.join(&record.depth))?;
    if (image.width, image.height) != (depth.width, depth.height) {
        return Err(Error::Format(format!(
            "{}: image {}x{} but depth {}x{}",
            record.image, image.width, image.height, depth.width, depth.height
        )));
    }
    Frame::new(image, depth, record.meta())
}

/// Writes a complete dataset: frames in parallel, then the manifest.
pub fn write_dataset(dir: &Path, header: ManifestHeader, frames: &[(Frame, Split)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let records: Vec<FrameRecord> = frames.iter().map(|(f, s)| frame_record(f, *s)).collect();
    let manifest = Manifest { header, records };
    manifest.validate()?;
    let mut depth_writers: BTreeMap<&str, &DepthMap> = BTreeMap::new();
    for (r, (f, _)) in manifest.records.iter().zip(frames) {
        if let Some(d) = depth_writers.insert(&r.depth, &f.depth) {
            if d != &f.depth {
                return Err(Error::Input(format!("frames sharing {} carry different depth maps", r.depth)));
            }
        }
    }
    manifest
        .records
        .par_iter()
        .zip(frames)
        .try_for_each(|(r, (f, _))| save_image(&dir.join(&r.image), &f.image))?;
    depth_writers.into_par_iter().try_for_each(|(p, d)| write_depth(&dir.join(p), d))?;
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads the manifest of `dir` and the frames of the requested splits.
pub fn load_dataset(dir: &Path, splits: &[Split]) -> Result<(Manifest, Vec<Frame>)> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let wanted: Vec<&FrameRecord> = manifest.records.iter().filter(|r| splits.contains(&r.split)).collect();
    let frames = wanted.par_iter().map(|r| load_frame(r, dir)).collect::<Result<_>>()?;
    Ok((manifest, frames))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_frame(scene_id: u64, style_id: u32) -> Frame {
        let image = ImageRgb::from_fn(20, 17, |x, y| [x as f32 / 19.0, y as f32 / 16.0, 0.3]);
        let mut depth = DepthMap::filled(20, 17, 1e9);
        for (i, d) in depth.data.iter_mut().enumerate().skip(5) {
            *d = 3.0 + (i as f32).sqrt() * 0.37;
        }
        let meta = FrameMeta { scene_id, style_id, pose_index: 2, renderer: Renderer::Cinematic, seed: 11 };
        Frame::new(image, depth, meta).unwrap()
    }

    #[test]
    fn frame_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("frames")).unwrap();
        std::fs::create_dir_all(dir.path().join("depth")).unwrap();
        let f = sample_frame(7, 1);
        let rec = save_frame(&f, dir.path(), Split::Train).unwrap();
        let g = load_frame(&rec, dir.path()).unwrap();
        assert_eq!(g.meta, f.meta);
        assert_eq!(g.depth.sentinel.to_bits(), f.depth.sentinel.to_bits());
        assert!(g.depth.data.iter().zip(&f.depth.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g.image.data.iter().zip(&f.image.data).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
        assert_eq!((g.image.width, g.image.height), (20, 17));
    }

    #[test]
    fn depth_format_errors() {
        let mut buf = Vec::new();
        write_depth_to(&sample_frame(1, 0).depth, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 20 * 17);
        assert_eq!(&buf[..4], b"DEP1");
        for cut in [3, 15, 16, buf.len() - 1] {
            assert!(matches!(read_depth_from(&mut &buf[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_depth_from(&mut extra.as_slice()), Err(Error::Format(_))));
        let mut v2 = buf.clone();
        v2[3] = b'2';
        assert!(matches!(read_depth_from(&mut v2.as_slice()), Err(Error::Format(_))));
        let mut bad = buf;
        bad[0] = b'X';
        assert!(matches!(read_depth_from(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn sentinel_only_depth_is_all_invalid() {
        let d = DepthMap::filled(4, 3, -1.0);
        let mut buf = Vec::new();
        write_depth_to(&d, &mut buf).unwrap();
        let r = read_depth_from(&mut buf.as_slice()).unwrap();
        assert_eq!(r.valid_count(), 0);
        assert_eq!(r, d);
    }

    fn record(scene_id: u64, style_id: u32, split: Split) -> FrameRecord {
        let meta = FrameMeta { scene_id, style_id, pose_index: 0, renderer: Renderer::Cinematic, seed: 1 };
        let (image, depth) = frame_paths(&meta);
        FrameRecord { image, depth, scene_id, style_id, pose_index: 0, renderer: Renderer::Cinematic, seed: 1, split }
    }

    #[test]
    fn manifest_round_trip_and_grouping() {
        let mut records = Vec::new();
        for s in 0..30 {
            for st in 0..4 {
                records.push(record(100 + s, st, if s < 25 { Split::Train } else { Split::Test }));
            }
        }
        let m = Manifest { header: ManifestHeader::new("cin", 1e9, "00ff00ff00ff00ff"), records };
        let mut buf = Vec::new();
        write_manifest_to(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 121);
        let back = read_manifest_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let depths: BTreeSet<&str> = back.records.iter().map(|r| r.depth.as_str()).collect();
        assert_eq!(back.records.len(), 120);
        assert_eq!(depths.len(), 30);
        assert_eq!(back.scene_ids(Split::Test).len(), 5);
    }

    #[test]
    fn manifest_leakage_on_write_and_read() {
        let m = Manifest {
            header: ManifestHeader::new("x", 0.0, ""),
            records: vec![record(7, 0, Split::Train), record(7, 1, Split::Test)],
        };
        assert!(matches!(write_manifest_to(&m, &mut Vec::new()), Err(Error::Leakage(_))));
        let mut text = serde_json::to_string(&m.header).unwrap() + "\n";
        for r in &m.records {
            text += &(serde_json::to_string(r).unwrap() + "\n");
        }
        assert!(matches!(read_manifest_from(&mut text.as_bytes()), Err(Error::Leakage(_))));
    }

    #[test]
    fn manifest_rejects_unknown_versions_and_split_depths() {
        let mut h = ManifestHeader::new("x", 0.0, "");
        h.version = 2;
        let text = serde_json::to_string(&h).unwrap() + "\n";
        assert!(matches!(read_manifest_from(&mut text.as_bytes()), Err(Error::Format(_))));

        let mut r = record(3, 1, Split::Train);
        r.depth = "depth/other.dep1".into();
        let m = Manifest { header: ManifestHeader::new("x", 0.0, ""), records: vec![record(3, 0, Split::Train), r] };
        assert!(matches!(write_manifest_to(&m, &mut Vec::new()), Err(Error::Input(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<(Frame, Split)> = (0..4)
            .map(|st| (sample_frame(5, st), Split::Train))
            .chain([(sample_frame(6, 0), Split::Test)])
            .collect();
        let m = write_dataset(dir.path(), ManifestHeader::new("d", 1e9, "abc"), &frames).unwrap();
        assert_eq!(std::fs::read_dir(dir.path().join("depth")).unwrap().count(), 2);
        let (m2, test) = load_dataset(dir.path(), &[Split::Test]).unwrap();
        assert_eq!(m, m2);
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].depth, frames[4].0.depth);
    }

    proptest! {
        #[test]
        fn depth_round_trip_is_bit_exact(
            w in 1usize..9, h in 1usize..9,
            vals in prop::collection::vec(any::<u32>(), 64),
            sentinel in any::<u32>(),
        ) {
            let d = DepthMap {
                width: w,
                height: h,
                sentinel: f32::from_bits(sentinel),
                data: vals[..w * h].iter().map(|&b| f32::from_bits(b)).collect(),
            };
            let mut buf = Vec::new();
            write_depth_to(&d, &mut buf).unwrap();
            let r = read_depth_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(r.sentinel.to_bits(), d.sentinel.to_bits());
            prop_assert!(r.data.iter().zip(&d.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

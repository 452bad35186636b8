//! Dataset ingestion: preprocessing, manifests, annotations, flow pairing and batching.
//!
//! A dataset root holds:
//! - `manifest.txt`: one image path per line, relative to the root (`#` starts a comment);
//! - optionally `annotations.json` (see [`Annotations`]);
//! - optionally `pairs.txt`: `first second flow` per line, naming two manifest
//!   entries and a flow sidecar (see [`flow`]), all relative to the root.

pub mod flow;
pub mod mnist;
mod validate;

pub use validate::{validate_root, ValidationReport};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FlowField;
use crate::raster::Image;

pub const MANIFEST: &str = "manifest.txt";
pub const ANNOTATIONS: &str = "annotations.json";
pub const PAIRS: &str = "pairs.txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum PadMode {
    /// Replicate border pixels.
    Edge,
    /// Fill with a constant (before the value-range remap).
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Image files listed in a manifest under `root`.
    Folder,
    /// The bundled MNIST subset; `digit` selects one class.
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub source: Source,
    pub root: PathBuf,
    pub digit: Option<u8>,
    /// Size the raw image is resized to, `[height, width]`.
    pub image_size: [usize; 2],
    /// Size after padding.
    pub padded_size: [usize; 2],
    pub pad: PadMode,
    /// Output value range; `[0, 1]` leaves values unchanged.
    pub value_range: [f32; 2],
    pub channels: usize,
    /// Use frame pairs with flow sidecars from `pairs.txt`.
    pub use_flow: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: Source::Folder,
            root: PathBuf::from("."),
            digit: None,
            image_size: [80, 80],
            padded_size: [96, 96],
            pad: PadMode::Edge,
            value_range: [0.0, 1.0],
            channels: 3,
            use_flow: false,
        }
    }
}

impl DatasetSpec {
    /// Bundled MNIST, 28×28 digits padded to 56×56.
    pub fn mnist(digit: Option<u8>) -> Self {
        Self {
            source: Source::Mnist,
            digit,
            image_size: [28, 28],
            padded_size: [56, 56],
            channels: 1,
            ..Self::default()
        }
    }

    /// 80×80 faces padded to 96×96 with edge replication.
    pub fn faces(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), ..Self::default() }
    }

    /// 64×64 shoes padded to 80×80 with white, values remapped to `[0.1, 0.9]`.
    pub fn shoes(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            image_size: [64, 64],
            padded_size: [80, 80],
            pad: PadMode::Constant(1.0),
            value_range: [0.1, 0.9],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let [ph, pw] = self.padded_size;
        if h == 0 || w == 0 || ph < h || pw < w {
            return Err(Error::Config(format!("padded size {ph}x{pw} must contain image size {h}x{w}")));
        }
        if (ph - h) % 2 != 0 || (pw - w) % 2 != 0 {
            return Err(Error::Config("padding must split evenly between the two sides".into()));
        }
        if h * pw != w * ph {
            return Err(Error::Config("padded size must keep the image aspect ratio".into()));
        }
        let [lo, hi] = self.value_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!("value range [{lo}, {hi}] must lie within [0, 1]")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.source == Source::Mnist && self.channels != 1 {
            return Err(Error::Config("MNIST is single-channel".into()));
        }
        Ok(())
    }

    fn pad_offsets(&self) -> (usize, usize) {
        ((self.padded_size[0] - self.image_size[0]) / 2, (self.padded_size[1] - self.image_size[1]) / 2)
    }

    /// Maps a 1-based pixel coordinate of a raw `(height, width)` image to the
    /// preprocessed image.
    pub fn map_point(&self, raw_size: (usize, usize), p: [f64; 2]) -> [f64; 2] {
        let (top, left) = self.pad_offsets();
        let sx = self.image_size[1] as f64 / raw_size.1 as f64;
        let sy = self.image_size[0] as f64 / raw_size.0 as f64;
        [(p[0] - 0.5) * sx + 0.5 + left as f64, (p[1] - 0.5) * sy + 0.5 + top as f64]
    }

    /// Resizes, pads and remaps a raw image. An input already at the padded
    /// size is only clamped into the value range.
    pub fn preprocess(&self, raw: &Image) -> Result<Image> {
        if raw.channels() != self.channels {
            return Err(Error::Dataset(format!("expected {} channels, got {}", self.channels, raw.channels())));
        }
        let [lo, hi] = self.value_range;
        if (raw.height(), raw.width()) == (self.padded_size[0], self.padded_size[1]) {
            return Ok(Image { data: raw.data.mapv(|v| v.clamp(lo, hi)) });
        }
        let sized = if (raw.height(), raw.width()) == (self.image_size[0], self.image_size[1]) {
            raw.clone()
        } else {
            let d = raw.to_dynamic().resize_exact(
                self.image_size[1] as u32,
                self.image_size[0] as u32,
                FilterType::Triangle,
            );
            Image::from_dynamic(&d, self.channels)?
        };
        let (top, left) = self.pad_offsets();
        let [ph, pw] = self.padded_size;
        let [h, w] = self.image_size;
        let data = Array3::from_shape_fn((self.channels, ph, pw), |(c, i, j)| {
            let inside = i >= top && i < top + h && j >= left && j < left + w;
            let v = match (inside, self.pad) {
                (true, _) => sized.data[[c, i - top, j - left]],
                (false, PadMode::Constant(v)) => v,
                (false, PadMode::Edge) => {
                    let si = i.clamp(top, top + h - 1) - top;
                    let sj = j.clamp(left, left + w - 1) - left;
                    sized.data[[c, si, sj]]
                }
            };
            lo + (hi - lo) * v.clamp(0.0, 1.0)
        });
        Ok(Image { data })
    }

    pub fn preprocess_dynamic(&self, raw: &DynamicImage) -> Result<Image> {
        self.preprocess(&Image::from_dynamic(raw, self.channels)?)
    }
}

/// Landmark annotations for evaluation. Points are 1-based pixel coordinates
/// in the raw image files, keyed by manifest path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    /// Landmark names, fixing the order of each point list.
    pub landmarks: Vec<String>,
    /// Left/right counterparts, as indices into `landmarks`.
    #[serde(default)]
    pub left_right_pairs: Vec<[usize; 2]>,
    /// Indices whose distance normalizes errors (eye centers or wheel centers).
    #[serde(default)]
    pub normalizer_pair: Option<[usize; 2]>,
    pub points: BTreeMap<String, Vec<[f64; 2]>>,
    /// Raw image size `[height, width]` per entry, when it differs from the
    /// dataset's `image_size`.
    #[serde(default)]
    pub raw_sizes: BTreeMap<String, [usize; 2]>,
    /// Entries held out for testing the regressor.
    #[serde(default)]
    pub test: Vec<String>,
}

impl Annotations {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        a.check()?;
        Ok(a)
    }

    pub fn check(&self) -> Result<()> {
        let l = self.landmarks.len();
        for (name, pts) in &self.points {
            if pts.len() != l {
                return Err(Error::Dataset(format!("{name}: {} points but {l} landmark names", pts.len())));
            }
        }
        let in_range = |p: &[usize; 2]| p[0] < l && p[1] < l;
        if !self.left_right_pairs.iter().all(in_range) || !self.normalizer_pair.iter().all(in_range) {
            return Err(Error::Dataset("landmark pair index out of range".into()));
        }
        Ok(())
    }
}

/// Two manifest entries joined by a flow sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub first: usize,
    pub second: usize,
    pub flow: PathBuf,
}

#[derive(Clone, Debug)]
enum Storage {
    Memory(Vec<Image>),
    Files(Vec<PathBuf>),
}

/// Preprocessed images addressed by index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub names: Vec<String>,
    storage: Storage,
    pub pairs: Vec<FramePair>,
    /// Flow triples dropped because the sidecar was missing.
    pub missing_flows: usize,
}

pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        match spec.source {
            Source::Mnist => {
                let digits = mnist::load_bundled(spec.digit)?;
                let names = (0..digits.len()).map(|i| format!("mnist/{i:04}")).collect();
                let images = digits.iter().map(|d| spec.preprocess(&d.image)).collect::<Result<_>>()?;
                Ok(Self { spec, names, storage: Storage::Memory(images), pairs: vec![], missing_flows: 0 })
            }
            Source::Folder => {
                let names = read_manifest(&spec.root)?;
                let paths: Vec<PathBuf> = names.iter().map(|n| spec.root.join(n)).collect();
                let (pairs, missing_flows) =
                    if spec.use_flow { read_pairs(&spec.root, &names)? } else { (vec![], 0) };
                if missing_flows > 0 {
                    log::warn!("{missing_flows} frame pairs skipped: flow sidecar missing");
                }
                Ok(Self { spec, names, storage: Storage::Files(paths), pairs, missing_flows })
            }
        }
    }

    /// In-memory dataset from already preprocessed images.
    pub fn from_images(spec: DatasetSpec, names: Vec<String>, images: Vec<Image>) -> Self {
        Self { spec, names, storage: Storage::Memory(images), pairs: vec![], missing_flows: 0 }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<Image> {
        match &self.storage {
            Storage::Memory(v) => Ok(v[i].clone()),
            Storage::Files(p) => {
                let raw = image::open(&p[i]).map_err(|e| Error::Dataset(format!("{}: {e}", p[i].display())))?;
                self.spec.preprocess_dynamic(&raw)
            }
        }
    }

    /// Raw `(height, width)` of entry `i` before preprocessing.
    pub fn raw_size(&self, i: usize) -> Result<(usize, usize)> {
        match &self.storage {
            Storage::Memory(_) => Ok((self.spec.image_size[0], self.spec.image_size[1])),
            Storage::Files(p) => {
                let (w, h) = image::image_dimensions(&p[i])?;
                Ok((h as usize, w as usize))
            }
        }
    }

    pub fn load_flow(&self, pair: &FramePair) -> Result<FlowField> {
        flow::read_flow(&pair.flow)
    }

    /// Loads images at `indices`, skipping undecodable entries with a log line.
    pub fn load_batch(&self, indices: &[usize]) -> Vec<(usize, Image)> {
        indices
            .iter()
            .filter_map(|&i| match self.get(i) {
                Ok(img) => Some((i, img)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", self.names[i]);
                    None
                }
            })
            .collect()
    }

    /// One shuffled epoch of image batches.
    pub fn iterate_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Vec<(usize, Image)>> + '_ {
        let order = epoch_order(self.len(), seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.load_batch(&c))
    }

    /// One shuffled epoch of `(first, second, flow)` triples.
    pub fn iterate_flow_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> impl Iterator<Item = Vec<(Image, Image, FlowField)>> + '_ {
        let order = epoch_order(self.pairs.len(), seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.load_flow_batch(&c))
    }

    /// Loads the pairs at `indices`, skipping any triple that fails to load.
    pub fn load_flow_batch(&self, indices: &[usize]) -> Vec<(Image, Image, FlowField)> {
        indices
            .iter()
            .filter_map(|&k| {
                let p = &self.pairs[k];
                let r = (|| Ok::<_, Error>((self.get(p.first)?, self.get(p.second)?, self.load_flow(p)?)))();
                r.map_err(|e| log::warn!("skipping pair {k}: {e}")).ok()
            })
            .collect()
    }
}

fn read_pairs(root: &Path, names: &[String]) -> Result<(Vec<FramePair>, usize)> {
    let path = root.join(PAIRS);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut pairs = Vec::new();
    let mut missing = 0;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Dataset(format!("{}:{}: expected `first second flow`", path.display(), ln + 1)));
        }
        let lookup = |n: &str| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("{}:{}: {n} is not in the manifest", path.display(), ln + 1)))
        };
        let flow = root.join(f[2]);
        if !flow.exists() {
            missing += 1;
            continue;
        }
        pairs.push(FramePair { first: lookup(f[0])?, second: lookup(f[1])?, flow });
    }
    Ok((pairs, missing))
}

/// Deterministic permutation of `0..n` for `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Position within the endless shuffled stream of batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: usize,
}

/// Endless batch index stream over `n` items, resumable from a [`SamplerState`].
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    state: SamplerState,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self::resume(n, batch_size, seed, SamplerState::default())
    }

    pub fn resume(n: usize, batch_size: usize, seed: u64, state: SamplerState) -> Self {
        let order = epoch_order(n, seed, state.epoch);
        Self { n, batch_size: batch_size.max(1), seed, state, order }
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    /// Next full batch, wrapping into a freshly shuffled epoch as needed.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        if self.n == 0 {
            return out;
        }
        while out.len() < self.batch_size {
            if self.state.pos >= self.n {
                self.state.epoch += 1;
                self.state.pos = 0;
                self.order = epoch_order(self.n, self.seed, self.state.epoch);
            }
            let take = (self.batch_size - out.len()).min(self.n - self.state.pos);
            out.extend_from_slice(&self.order[self.state.pos..self.state.pos + take]);
            self.state.pos += take;
        }
        out
    }
}

/// Writes images as PNG files plus a manifest under `root`.
pub fn export_folder(root: &Path, names: &[String], images: &[Image]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for (name, img) in names.iter().zip(images) {
        let path = root.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        img.save_png(&path)?;
        manifest.push_str(name);
        manifest.push('\n');
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// Writes a synthetic translating-digit video set: frames, flow sidecars,
/// manifest and `pairs.txt`. Returns the true per-pair shifts.
pub fn export_synthetic_video<R: rand::Rng + ?Sized>(
    root: &Path,
    bases: &[Image],
    max_step: f64,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut pairs = String::new();
    let mut shifts = Vec::new();
    fs::create_dir_all(root.join("flow"))?;
    for (i, base) in bases.iter().enumerate() {
        let p = flow::synthetic_translation_pair(base, max_step, rng);
        let (a, b, f) = (format!("frames/{i:04}_a.png"), format!("frames/{i:04}_b.png"), format!("flow/{i:04}.flo"));
        flow::write_flow(root.join(&f), &p.flow)?;
        pairs.push_str(&format!("{a} {b} {f}\n"));
        names.extend([a, b]);
        images.extend([p.first, p.second]);
        shifts.push(p.shift);
    }
    export_folder(root, &names, &images)?;
    fs::write(root.join(PAIRS), pairs)?;
    Ok(shifts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_padding() {
        let spec = DatasetSpec::mnist(Some(1));
        let ds = Dataset::open(spec).unwrap();
        assert_eq!(ds.len(), 500);
        let img = ds.get(0).unwrap();
        assert_eq!(img.data.dim(), (1, 56, 56));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn edge_pad_keeps_constant_images_constant() {
        let spec = DatasetSpec::faces(".");
        let raw = Image::filled(3, 80, 80, 0.37);
        let out = spec.preprocess(&raw).unwrap();
        assert_eq!(out.data.dim(), (3, 96, 96));
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        assert_eq!(spec.preprocess(&out).unwrap(), out);
    }

    #[test]
    fn shoes_remap_and_white_pad() {
        let spec = DatasetSpec::shoes(".");
        let out = spec.preprocess(&Image::filled(3, 64, 64, 0.0)).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.9);
        assert!((out.data[[0, 40, 40]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn map_point_follows_padding() {
        let spec = DatasetSpec::faces(".");
        assert_eq!(spec.map_point((80, 80), [1.0, 1.0]), [9.0, 9.0]);
        let p = spec.map_point((160, 160), [1.5, 1.5]);
        assert_eq!(p, [9.0 + 0.0, 9.0]);
    }

    #[test]
    fn epoch_covers_each_image_once() {
        let images: Vec<Image> = (0..37).map(|i| Image::filled(1, 2, 2, i as f32 / 40.0)).collect();
        let names = (0..37).map(|i| i.to_string()).collect();
        let ds = Dataset::from_images(DatasetSpec::mnist(None), names, images);
        let batches: Vec<_> = ds.iterate_batches(16, 1, 0).collect();
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.iter().flatten().map(|(i, _)| *i).collect();
        seen.sort();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        let again: Vec<Vec<usize>> = ds.iterate_batches(16, 1, 0).map(|b| b.iter().map(|p| p.0).collect()).collect();
        let first: Vec<Vec<usize>> = batches.iter().map(|b| b.iter().map(|p| p.0).collect()).collect();
        assert_eq!(again, first);
    }

    #[test]
    fn sampler_resumes() {
        let mut a = BatchSampler::new(10, 4, 3);
        for _ in 0..5 {
            a.next_batch();
        }
        let mut b = BatchSampler::resume(10, 4, 3, a.state());
        for _ in 0..7 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}

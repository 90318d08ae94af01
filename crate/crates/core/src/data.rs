//! ReID datasets: manifests, the synthetic generator, Market-style directory
//! ingestion, and the two batch samplers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_normalize, Image};
use crate::rng::{substream, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    /// Conventional Market-1501 subdirectory.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "bounding_box_train",
            Split::Query => "query",
            Split::Gallery => "bounding_box_test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReidSample {
    /// Path relative to the dataset root.
    pub file: String,
    pub id: u32,
    pub cam: u32,
    pub split: Split,
}

/// Train identities are always `0..identities`. Query and gallery samples
/// share those labels when the identity also occurs in training; any other
/// identity gets a label at or above `identities`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub identities: usize,
    pub samples: Vec<ReidSample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.split(Split::Train).map(|(_, s)| s.id).collect();
        if train.len() != self.identities || train.iter().enumerate().any(|(i, &id)| i as u32 != id) {
            return Err(Error::Dataset(format!(
                "train identities must be exactly 0..{}, found {} distinct",
                self.identities,
                train.len()
            )));
        }
        Ok(())
    }

    /// `(index, sample)` pairs of one split, in manifest order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ReidSample)> {
        self.samples.iter().enumerate().filter(move |(_, s)| s.split == split)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        Split::ALL.iter().map(|&s| (s, self.count(s))).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A manifest with its decoded images, all resized to common extents.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    /// Per-sample occluder flags, known only for generated data.
    pub occluded: Vec<bool>,
}

impl Dataset {
    /// Reads `<root>/manifest.json` when present, otherwise scans the Market
    /// layout, then decodes every image at `height x width`.
    pub fn open(root: &Path, height: usize, width: usize) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let manifest = if mpath.exists() { DatasetManifest::load(&mpath)? } else { parse_reid_dir(root)?.manifest };
        let images = manifest
            .samples
            .iter()
            .map(|s| resize_normalize(&Image::load(&root.join(&s.file))?, height, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images, occluded: Vec::new() })
    }

    /// Writes every image as PNG under its manifest path plus `manifest.json`.
    pub fn export(&self, root: &Path) -> Result<()> {
        for split in Split::ALL {
            fs::create_dir_all(root.join(split.dir_name()))?;
        }
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            img.save_png(&root.join(&s.file))?;
        }
        self.manifest.save(&root.join(MANIFEST_FILE))
    }

    /// Mean pixel of the train split, used as the erase fill.
    pub fn train_mean_pixel(&self) -> [f32; 3] {
        Image::mean_pixel(self.manifest.split(Split::Train).map(|(i, _)| &self.images[i]))
    }

    pub fn images_of(&self, split: Split) -> Vec<&Image> {
        self.manifest.split(split).map(|(i, _)| &self.images[i]).collect()
    }
}

/// Raw fields of a Market-style filename.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParsedName {
    pub id: i32,
    pub cam: u32,
    pub seq: u32,
    pub frame: u32,
    pub index: u32,
}

/// Parses `<id>_c<cam>s<seq>_<frame>_<idx>.<jpg|jpeg|png>`.
pub fn parse_filename(name: &str) -> Option<ParsedName> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png") {
        return None;
    }
    let mut parts = stem.split('_');
    let id: i32 = parts.next()?.parse().ok()?;
    let cs = parts.next()?.strip_prefix('c')?;
    let (cam, seq) = cs.split_once('s')?;
    let frame: u32 = parts.next()?.parse().ok()?;
    let index: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || id < -1 {
        return None;
    }
    Some(ParsedName { id, cam: cam.parse().ok()?, seq: seq.parse().ok()?, frame, index })
}

#[derive(Clone, Debug)]
pub struct ParseReport {
    pub manifest: DatasetManifest,
    /// Files whose names do not follow the grammar.
    pub skipped: Vec<PathBuf>,
    /// Images with identity -1.
    pub junk: usize,
}

/// Scans `bounding_box_train`, `query` and `bounding_box_test` under `root`.
///
/// Junk images (identity -1) are dropped, distractors (identity 0) stay in
/// the gallery, and train identities are relabeled to `0..N` in ascending
/// order of their raw ids.
pub fn parse_reid_dir(root: &Path) -> Result<ParseReport> {
    let mut raw: Vec<(Split, String, ParsedName)> = Vec::new();
    let mut skipped = Vec::new();
    let mut junk = 0;
    for split in Split::ALL {
        let dir = root.join(split.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        for name in names {
            match parse_filename(&name) {
                Some(p) if p.id == -1 => junk += 1,
                Some(p) => raw.push((split, name, p)),
                None => {
                    log::warn!("skipping unparseable file {}", dir.join(&name).display());
                    skipped.push(dir.join(&name));
                }
            }
        }
    }
    if raw.iter().all(|(s, _, _)| *s != Split::Train) {
        return Err(Error::Dataset(format!("no train images under {}", root.display())));
    }
    let train_ids: BTreeSet<i32> = raw.iter().filter(|(s, _, _)| *s == Split::Train).map(|(_, _, p)| p.id).collect();
    let other_ids: BTreeSet<i32> = raw.iter().map(|(_, _, p)| p.id).filter(|id| !train_ids.contains(id)).collect();
    let labels: BTreeMap<i32, u32> =
        train_ids.iter().chain(other_ids.iter()).enumerate().map(|(l, &id)| (id, l as u32)).collect();
    let samples = raw
        .into_iter()
        .map(|(split, name, p)| ReidSample { file: format!("{}/{}", split.dir_name(), name), id: labels[&p.id], cam: p.cam, split })
        .collect();
    let manifest = DatasetManifest { identities: train_ids.len(), samples };
    manifest.validate()?;
    Ok(ParseReport { manifest, skipped, junk })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub train_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Strength of random background blobs, in `[0, 1]`.
    pub clutter: f64,
    /// Strength of per-camera and per-image color casts, in `[0, 1]`.
    pub illumination: f64,
    pub occluder_prob: f64,
    /// Filled from the run seed when part of a run config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 20,
            train_per_id: 8,
            query_per_id: 4,
            gallery_per_id: 8,
            cameras: 2,
            height: 64,
            width: 32,
            clutter: 0.3,
            illumination: 0.3,
            occluder_prob: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Same geometry with every nuisance switched off.
    pub fn noiseless(self) -> Self {
        Self { clutter: 0.0, illumination: 0.0, occluder_prob: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.train_per_id == 0 || self.cameras == 0 {
            return Err(Error::InvalidArgument("identity, train image and camera counts must be at least 1".into()));
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::InvalidArgument(format!("image {}x{} too small", self.height, self.width)));
        }
        for (name, v) in [("clutter", self.clutter), ("illumination", self.illumination), ("occluder_prob", self.occluder_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.query_per_id > 0 && (self.cameras < 2 || self.gallery_per_id < 2) {
            return Err(Error::Dataset(
                "query images need a gallery match on another camera: use at least 2 cameras and 2 gallery images per identity"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Latent appearance of one identity.
#[derive(Clone, Debug)]
struct Appearance {
    skin: [f32; 3],
    hair: [f32; 3],
    top: [f32; 3],
    bottom: [f32; 3],
    accent: [f32; 3],
    stripes: usize,
    belt: f32,
    bag_left: bool,
    width: f32,
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

impl Appearance {
    fn draw(rng: &mut Rng) -> Self {
        let tone = rng.gen_range(0.45..0.85f32);
        Self {
            skin: [tone, tone * 0.8, tone * 0.65],
            hair: random_color(rng).map(|c| c * 0.5),
            top: random_color(rng),
            bottom: random_color(rng),
            accent: random_color(rng),
            stripes: rng.gen_range(0..4),
            belt: rng.gen_range(0.45..0.6),
            bag_left: rng.gen(),
            width: rng.gen_range(0.45..0.7),
        }
    }

    fn paint(&self, img: &mut Image) {
        let (h, w) = (img.height() as f32, img.width() as f32);
        let cx = w / 2.0;
        let half = self.width * w / 2.0;
        for y in 0..img.height() {
            let fy = (y as f32 + 0.5) / h;
            for x in 0..img.width() {
                let fx = x as f32 + 0.5;
                let dx = fx - cx;
                let color = if fy < 0.2 {
                    let (ry, rx) = ((fy - 0.11) / 0.09, dx / (0.18 * w));
                    if ry * ry + rx * rx <= 1.0 {
                        Some(if fy < 0.07 { self.hair } else { self.skin })
                    } else {
                        None
                    }
                } else if fy < self.belt && dx.abs() <= half {
                    let band = ((fy - 0.2) / (self.belt - 0.2) * (2 * self.stripes + 1) as f32) as usize;
                    Some(if self.stripes > 0 && band % 2 == 1 { self.accent } else { self.top })
                } else if fy < 0.95 && fy >= self.belt && dx.abs() <= half * 0.8 && dx.abs() >= half * 0.08 {
                    Some(self.bottom)
                } else {
                    None
                };
                let bag = fy > 0.3 && fy < 0.45 && {
                    let edge = if self.bag_left { cx - half } else { cx + half };
                    (fx - edge).abs() < 0.1 * w
                };
                if let Some(c) = if bag { Some(self.accent) } else { color } {
                    img.set_pixel(y, x, c);
                }
            }
        }
    }
}

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

fn render(spec: &SyntheticSpec, look: &Appearance, cam_gain: &[f32; 3], rng: &mut Rng) -> (Image, bool) {
    let mut img = Image::filled(spec.height, spec.width, BACKGROUND);
    let (h, w) = (spec.height, spec.width);
    if spec.clutter > 0.0 {
        for _ in 0..6 {
            let (bh, bw) = (rng.gen_range(2..=h / 3), rng.gen_range(2..=w / 2));
            let (top, left) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
            let tint = random_color(rng);
            let a = spec.clutter as f32;
            for y in top..top + bh {
                for x in left..left + bw {
                    let p = img.pixel(y, x);
                    img.set_pixel(y, x, [0, 1, 2].map(|c| p[c] * (1.0 - a) + tint[c] * a));
                }
            }
        }
    }
    look.paint(&mut img);
    if spec.illumination > 0.0 {
        let s = spec.illumination as f32;
        let jitter: [f32; 3] = [0, 1, 2].map(|_| rng.gen_range(-0.1..0.1f32) * s);
        let brightness = 1.0 + rng.gen_range(-0.2..0.2f32) * s;
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(y, x);
                img.set_pixel(y, x, [0, 1, 2].map(|c| p[c] * brightness * cam_gain[c] + jitter[c]));
            }
        }
    }
    let occluded = spec.occluder_prob > 0.0 && rng.gen_bool(spec.occluder_prob);
    if occluded {
        let (oh, ow) = (rng.gen_range(h / 6..=h / 3), rng.gen_range(w / 3..=w * 2 / 3));
        let top = rng.gen_range(h / 5..=h - oh);
        let left = rng.gen_range(0..=w - ow);
        let color = random_color(rng);
        for y in top..top + oh {
            for x in left..left + ow {
                img.set_pixel(y, x, color);
            }
        }
    }
    (img, occluded)
}

/// Renders a synthetic dataset: each identity has a fixed appearance, each
/// image adds a camera color cast, background clutter and maybe an occluder.
///
/// Samples follow the order [`parse_reid_dir`] would produce for the exported
/// directory, so exporting then parsing yields the same manifest.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let looks: Vec<Appearance> =
        (0..spec.identities).map(|id| Appearance::draw(&mut substream(spec.seed, "synthetic.identity", &[id as u64]))).collect();
    let gains: Vec<[f32; 3]> = (0..spec.cameras)
        .map(|c| {
            let mut rng = substream(spec.seed, "synthetic.camera", &[c as u64]);
            [0, 1, 2].map(|_| 1.0 + rng.gen_range(-0.3..0.3f32) * spec.illumination as f32)
        })
        .collect();
    let mut entries: Vec<(ReidSample, (Image, bool))> = Vec::new();
    let mut frame = 0u64;
    for (split, per_id) in [(Split::Train, spec.train_per_id), (Split::Query, spec.query_per_id), (Split::Gallery, spec.gallery_per_id)] {
        // Query and gallery start on different cameras so every query has
        // cross-camera matches.
        let offset = usize::from(split == Split::Gallery);
        for (id, look) in looks.iter().enumerate() {
            for k in 0..per_id {
                let cam = (k + offset) % spec.cameras;
                let mut rng = substream(spec.seed, "synthetic.image", &[frame]);
                let rendered = render(spec, look, &gains[cam], &mut rng);
                let file = format!("{}/{:04}_c{}s1_{:06}_00.png", split.dir_name(), id + 1, cam + 1, frame);
                entries.push((ReidSample { file, id: id as u32, cam: cam as u32 + 1, split }, rendered));
                frame += 1;
            }
        }
    }
    entries.sort_by(|a, b| (a.0.split, &a.0.file).cmp(&(b.0.split, &b.0.file)));
    let (samples, rendered): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
    let (images, occluded) = rendered.into_iter().unzip();
    let manifest = DatasetManifest { identities: spec.identities, samples };
    manifest.validate()?;
    Ok(Dataset { manifest, images, occluded })
}

/// One epoch of stage-1 batches: a uniform permutation of the train split
/// cut into batches of `batch`, dropping the short remainder. Entries are
/// manifest indices.
pub fn stage1_batches(manifest: &DatasetManifest, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut train = manifest.indices(Split::Train);
    if batch == 0 || batch > train.len() {
        return Err(Error::InvalidArgument(format!("batch size {batch} for {} train images", train.len())));
    }
    train.shuffle(&mut substream(seed, "stage1.batches", &[epoch]));
    Ok(train.chunks_exact(batch).map(|c| c.to_vec()).collect())
}

/// One epoch of identity-balanced batches: `P` distinct identities with `K`
/// images each, drawn without replacement when an identity has at least `K`
/// images. An epoch has `max(1, train / (P*K))` batches.
pub fn pk_batches(manifest: &DatasetManifest, p: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k == 0 {
        return Err(Error::InvalidArgument(format!("identity batches need P >= 2 and K >= 1, got P={p} K={k}")));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.split(Split::Train) {
        by_id.entry(s.id).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Dataset(format!("P = {p} exceeds the {} train identities", by_id.len())));
    }
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let total: usize = ids.iter().map(|v| v.len()).sum();
    let batches = (total / (p * k)).max(1);
    Ok((0..batches)
        .map(|b| {
            let mut rng = substream(seed, "stage2.batches", &[epoch, b as u64]);
            let chosen = rand::seq::index::sample(&mut rng, ids.len(), p);
            let mut out = Vec::with_capacity(p * k);
            for c in chosen.iter() {
                let pool = ids[c];
                if pool.len() >= k {
                    out.extend(pool.choose_multiple(&mut rng, k).copied());
                } else {
                    out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
                }
            }
            out
        })
        .collect())
}

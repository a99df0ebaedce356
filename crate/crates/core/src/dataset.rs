//! Dataset indexing, the synthetic toy generator and batch assembly.
//!
//! Layout: `<root>/<split>/{exocentric,egocentric}/<interaction>/<object>/*.png`
//! with optional `<root>/<split>/GT/<interaction>/<object>/<stem>.png` masks
//! for egocentric images. Underscores in directory names read as spaces
//! (`cut_with` is the label `cut with`). Split directories may be named
//! `train`/`trainset` and `test`/`testset`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{GrayMap, RgbImage};

/// Interaction vocabulary of the AGD20K Seen split.
pub const AGD20K_INTERACTIONS: [&str; 36] = [
    "beat", "boxing", "brush with", "carry", "catch", "cut", "cut with", "drag", "drink with", "eat", "hit",
    "hold", "jump", "kick", "lie on", "lift", "look out", "open", "pack", "peel", "pick up", "pour", "push",
    "ride", "sip", "sit on", "stick", "stir", "swing", "take photo", "talk on", "text on", "throw", "type on",
    "wash", "write",
];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Exocentric,
    Egocentric,
}

impl View {
    fn dir(&self) -> &'static str {
        match self {
            View::Exocentric => "exocentric",
            View::Egocentric => "egocentric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub split: Split,
    pub view: View,
    pub interaction: String,
    pub object: String,
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub interactions: Vec<String>,
    pub objects: Vec<String>,
    pub samples: Vec<Sample>,
    /// Egocentric image path -> GT mask path.
    pub gt_masks: BTreeMap<PathBuf, PathBuf>,
}

pub fn label_from_dir(name: &str) -> String {
    name.replace('_', " ")
}

pub fn dir_from_label(label: &str) -> String {
    label.replace(' ', "_")
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).at(path)? {
        let p = entry.at(path)?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_images(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).at(path)? {
        let p = entry.at(path)?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_split(root: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| root.join(n)).find(|p| p.is_dir())
}

fn scan_view(split_dir: &Path, split: Split, view: View, out: &mut Vec<Sample>) -> Result<()> {
    let view_dir = split_dir.join(view.dir());
    if !view_dir.is_dir() {
        return Ok(());
    }
    for idir in sorted_dirs(&view_dir)? {
        let objects = sorted_dirs(&idir)?;
        if objects.is_empty() {
            return Err(Error::EmptyClassDir(file_name(&idir)));
        }
        for odir in objects {
            let images = sorted_images(&odir)?;
            if images.is_empty() {
                return Err(Error::EmptyClassDir(format!("{}/{}", file_name(&idir), file_name(&odir))));
            }
            for image_path in images {
                out.push(Sample {
                    split,
                    view,
                    interaction: label_from_dir(&file_name(&idir)),
                    object: label_from_dir(&file_name(&odir)),
                    image_path,
                });
            }
        }
    }
    Ok(())
}

/// Builds a deterministic index of a dataset tree.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut samples = Vec::new();
    let mut gt_masks = BTreeMap::new();
    let splits = [(Split::Train, ["train", "trainset"]), (Split::Test, ["test", "testset"])];
    for (split, names) in splits {
        let Some(dir) = find_split(root, &names) else { continue };
        scan_view(&dir, split, View::Exocentric, &mut samples)?;
        let before = samples.len();
        scan_view(&dir, split, View::Egocentric, &mut samples)?;
        let gt_root = dir.join("GT");
        for s in &samples[before..] {
            let rel_dir = gt_root.join(dir_from_label(&s.interaction)).join(dir_from_label(&s.object));
            let stem = s.image_path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(mask) = IMAGE_EXTENSIONS.iter().map(|e| rel_dir.join(format!("{stem}.{e}"))).find(|p| p.is_file()) {
                gt_masks.insert(s.image_path.clone(), mask);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::validation(format!("no images found under {}", root.display())));
    }
    samples.sort();
    let interactions: Vec<String> = samples.iter().map(|s| s.interaction.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let objects: Vec<String> = samples.iter().map(|s| s.object.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let index = DatasetIndex {
        root: root.to_path_buf(),
        interactions,
        objects,
        samples,
        gt_masks,
    };
    index.validate()?;
    Ok(index)
}

impl DatasetIndex {
    /// Test-split interactions must be trained on when a train split exists.
    /// Objects may be unseen.
    pub fn validate(&self) -> Result<()> {
        let trained: BTreeSet<&str> = self.train_samples().map(|s| s.interaction.as_str()).collect();
        if trained.is_empty() {
            return Ok(());
        }
        if let Some(s) = self.samples.iter().find(|s| !trained.contains(s.interaction.as_str())) {
            return Err(Error::validation(format!(
                "interaction `{}` has no exocentric training images",
                s.interaction
            )));
        }
        Ok(())
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == Split::Train && s.view == View::Exocentric)
    }

    pub fn interaction_id(&self, label: &str) -> Option<usize> {
        self.interactions.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn object_id(&self, label: &str) -> Option<usize> {
        self.objects.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Egocentric test samples paired with their GT mask paths.
    pub fn eval_samples(&self) -> Vec<(&Sample, &Path)> {
        self.samples
            .iter()
            .filter(|s| s.view == View::Egocentric && s.split == Split::Test)
            .filter_map(|s| self.gt_masks.get(&s.image_path).map(|m| (s, m.as_path())))
            .collect()
    }

    /// Image path relative to the dataset root, used as a stable id.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

/// Loads a GT heatmap and rescales it to max 1 when it has positive mass.
pub fn load_gt_mask(path: &Path) -> Result<GrayMap> {
    let mut m = GrayMap::load(path)?;
    let max = m.data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.data.iter_mut().for_each(|v| *v /= max);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Toy generator

const TOY_INTERACTIONS: [&str; 8] = ["grip", "tap", "lift", "push", "pull", "twist", "press", "pour"];
const TOY_OBJECTS: [&str; 6] = ["stick", "cup", "box", "lamp", "knife", "ball"];
/// Object parts: the four image quadrants.
pub const TOY_SLOTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub interactions: Vec<String>,
    pub objects: Vec<String>,
    /// Exocentric training images per (interaction, object).
    pub images_per_pair: usize,
    /// Egocentric test images per pair; defaults to `max(2, images_per_pair / 4)`.
    #[serde(default)]
    pub test_images_per_pair: Option<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn with_counts(interactions: usize, objects: usize, images_per_pair: usize, image_size: usize, seed: u64) -> Self {
        let name = |pool: &[&str], prefix: &str, i: usize| {
            pool.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}{i}"))
        };
        ToySpec {
            interactions: (0..interactions).map(|i| name(&TOY_INTERACTIONS, "act", i)).collect(),
            objects: (0..objects).map(|i| name(&TOY_OBJECTS, "obj", i)).collect(),
            images_per_pair,
            test_images_per_pair: None,
            image_size,
            seed,
        }
    }

    pub fn test_count(&self) -> usize {
        self.test_images_per_pair.unwrap_or((self.images_per_pair / 4).max(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_pair == 0 || self.test_count() == 0 {
            return Err(Error::validation("toy spec needs at least one image per pair"));
        }
        if self.interactions.len() < 2 {
            return Err(Error::validation("toy spec needs at least two interactions"));
        }
        if self.objects.is_empty() {
            return Err(Error::validation("toy spec needs at least one object"));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::validation("toy image size must be even and at least 8"));
        }
        for list in [&self.interactions, &self.objects] {
            let set: BTreeSet<&String> = list.iter().collect();
            if set.len() != list.len() || list.iter().any(|l| l.trim().is_empty()) {
                return Err(Error::validation("toy labels must be unique and non-empty"));
            }
        }
        Ok(())
    }

    /// Quadrant where interaction `i` acts on object `o`.
    pub fn slot(&self, interaction: usize, object: usize) -> usize {
        (interaction + object) % TOY_SLOTS
    }

    pub fn region(&self, slot: usize) -> [usize; 4] {
        let half = self.image_size / 2;
        let (qx, qy) = (slot % 2, slot / 2);
        [qx * half, qy * half, (qx + 1) * half, (qy + 1) * half]
    }

    /// Interaction whose part sits in `slot` of `object`, if any.
    pub fn part_at(&self, object: usize, slot: usize) -> Option<usize> {
        (0..self.interactions.len()).find(|&i| self.slot(i, object) == slot)
    }

    /// Part color: the hue identifies the interaction (shared across
    /// objects), saturation and value identify the object.
    pub fn part_color(&self, interaction: usize, object: usize) -> [f64; 3] {
        let hue = (interaction as f64 + 0.5) / self.interactions.len() as f64;
        let (s, v) = object_tone(object);
        hsv(hue, s, v)
    }

    fn body_color(&self, object: usize) -> [f64; 3] {
        let (_, v) = object_tone(object);
        hsv(0.0, 0.0, 0.35 * v)
    }
}

fn object_tone(object: usize) -> (f64, f64) {
    const TONES: [(f64, f64); 4] = [(0.85, 0.9), (0.45, 0.95), (0.85, 0.55), (0.4, 0.6)];
    let (s, v) = TONES[object % TONES.len()];
    let shift = (object / TONES.len()) as f64 * 0.07;
    (s - shift, v - shift)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub interaction: String,
    pub object: String,
    /// Path relative to the dataset root.
    pub image: String,
    /// Planted region `[x0, y0, x1, y1)` in pixels.
    pub region: [usize; 4],
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}

/// Independent RNG stream for `(seed, tag)`.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn fill_rect(img: &mut RgbImage, region: [usize; 4], color: [f64; 3], rng: &mut ChaCha8Rng, noise: f64) {
    for y in region[1]..region[3].min(img.height) {
        for x in region[0]..region[2].min(img.width) {
            let jitter: f64 = rng.random_range(-noise..=noise);
            img.put(x, y, color.map(|c| (c + jitter).clamp(0.0, 1.0)));
        }
    }
}

struct ToyImageJob {
    split: Split,
    interaction: usize,
    object: usize,
    k: usize,
}

fn render_toy(spec: &ToySpec, job: &ToyImageJob) -> RgbImage {
    let size = spec.image_size;
    let tag = format!("{:?}/{}/{}/{}", job.split, job.interaction, job.object, job.k);
    let mut rng = rng_for(spec.seed, &tag);
    let mut img = RgbImage::new(size, size);
    for v in img.data.iter_mut() {
        *v = (0.5 + rng.random_range(-0.04..=0.04f64)).clamp(0.0, 1.0);
    }
    let target = spec.slot(job.interaction, job.object);
    let exo = job.split == Split::Train;
    let gain: f64 = if exo { rng.random_range(0.9..=1.1) } else { 1.0 };

    if exo {
        // Distractor patches in random colors.
        for _ in 0..rng.random_range(1..=2) {
            let w = rng.random_range(size / 10..=size / 4).max(1);
            let h = rng.random_range(size / 10..=size / 4).max(1);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            let color = [rng.random(), rng.random(), rng.random()];
            fill_rect(&mut img, [x0, y0, x0 + w, y0 + h], color, &mut rng, 0.03);
        }
    }
    for slot in 0..TOY_SLOTS {
        let draw = slot == target || !exo || rng.random_bool(0.6);
        if draw {
            let color = match spec.part_at(job.object, slot) {
                Some(i) => spec.part_color(i, job.object),
                None => spec.body_color(job.object),
            };
            let color = color.map(|c| (c * gain).min(1.0));
            fill_rect(&mut img, spec.region(slot), color, &mut rng, 0.03);
        }
    }
    if exo {
        // A hand touching the part being interacted with.
        let r = spec.region(target);
        let radius = (size as f64 / 12.0).max(1.0);
        let cx = rng.random_range(r[0] as f64 + radius..=r[2] as f64 - radius);
        let cy = rng.random_range(r[1] as f64 + radius..=r[3] as f64 - radius);
        let skin = [0.87, 0.68, 0.56];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, (y as f64 + 0.5 - cy) * 1.3);
                if dx * dx + dy * dy <= radius * radius {
                    img.put(x, y, skin);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub manifest: Vec<ManifestEntry>,
}

/// Writes a reproducible toy dataset under `out` (train exocentric images,
/// test egocentric images with binary GT masks, and `manifest.json`).
pub fn generate_toy_dataset(spec: &ToySpec, out: &Path) -> Result<ToyDataset> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for (split, count) in [(Split::Train, spec.images_per_pair), (Split::Test, spec.test_count())] {
        for interaction in 0..spec.interactions.len() {
            for object in 0..spec.objects.len() {
                for k in 0..count {
                    jobs.push(ToyImageJob {
                        split,
                        interaction,
                        object,
                        k,
                    });
                }
            }
        }
    }
    let manifest = crate::par::try_map(&jobs, |job| {
        let (split_dir, view) = match job.split {
            Split::Train => ("train", View::Exocentric),
            Split::Test => ("test", View::Egocentric),
        };
        let ilabel = &spec.interactions[job.interaction];
        let olabel = &spec.objects[job.object];
        let rel_dir = format!("{split_dir}/{}/{}/{}", view.dir(), dir_from_label(ilabel), dir_from_label(olabel));
        let name = format!("{}_{}_{:03}.png", dir_from_label(ilabel), dir_from_label(olabel), job.k);
        let dir = out.join(&rel_dir);
        fs::create_dir_all(&dir).at(&dir)?;
        render_toy(spec, job).save_png(&dir.join(&name))?;
        let region = spec.region(spec.slot(job.interaction, job.object));
        if job.split == Split::Test {
            let gt_dir = out.join(format!("test/GT/{}/{}", dir_from_label(ilabel), dir_from_label(olabel)));
            fs::create_dir_all(&gt_dir).at(&gt_dir)?;
            let size = spec.image_size;
            let mask: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (x, y) = (i % size, i / size);
                    f64::from(x >= region[0] && x < region[2] && y >= region[1] && y < region[3])
                })
                .collect();
            GrayMap::new(size, size, mask)?.save_png8(&gt_dir.join(&name))?;
        }
        Ok(ManifestEntry {
            interaction: ilabel.clone(),
            object: olabel.clone(),
            image: format!("{rel_dir}/{name}"),
            region,
        })
    })?;
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).at(&path)?;
    fs::write(&path, text).at(&path)?;
    Ok(ToyDataset {
        root: out.to_path_buf(),
        manifest,
    })
}

/// Grid cells (row-major) whose centers fall inside `region`, for an image
/// of `image_w x image_h` divided into `grid_w x grid_h` cells.
pub fn region_cells(region: [usize; 4], image_w: usize, image_h: usize, grid_w: usize, grid_h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let cx = (gx as f64 + 0.5) * image_w as f64 / grid_w as f64;
            let cy = (gy as f64 + 0.5) * image_h as f64 / grid_h as f64;
            out.push(cx >= region[0] as f64 && cx < region[2] as f64 && cy >= region[1] as f64 && cy < region[3] as f64);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Batches

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub base_size: usize,
    pub crop_size: usize,
    #[serde(default)]
    pub hflip: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            base_size: 384,
            crop_size: 336,
            hflip: false,
        }
    }
}

impl AugmentPolicy {
    pub fn toy() -> Self {
        AugmentPolicy {
            base_size: 96,
            crop_size: 84,
            hflip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.base_size {
            return Err(Error::validation(format!(
                "crop size {} must be in 1..={}",
                self.crop_size, self.base_size
            )));
        }
        Ok(())
    }

    pub fn center_offset(&self) -> usize {
        (self.base_size - self.crop_size) / 2
    }

    pub fn apply(&self, img: &RgbImage, x0: usize, y0: usize, flip: bool) -> Result<RgbImage> {
        let base = img.resize(self.base_size, self.base_size);
        let mut out = base.crop(x0, y0, self.crop_size, self.crop_size)?;
        if flip {
            let w = out.width;
            for y in 0..out.height {
                for x in 0..w / 2 {
                    let (a, b) = (out.pixel(x, y), out.pixel(w - 1 - x, y));
                    out.put(x, y, b);
                    out.put(w - 1 - x, y, a);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Uniform over (interaction, object) pairs, then over images of the pair.
    #[default]
    PairUniform,
    /// Seeded permutation of the training samples per epoch.
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    /// Center crop, one view, samples in index order.
    Eval,
}

/// Crop parameters for one view; recorded so runs can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub flipped: bool,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Sample-major: views of sample `s` are at `s * views .. (s + 1) * views`.
    pub images: Vec<RgbImage>,
    pub interaction_ids: Vec<usize>,
    pub object_ids: Vec<usize>,
    pub sample_indices: Vec<usize>,
    pub crops: Vec<CropBox>,
    pub views: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Random-access, seeded batch source; batch `k` depends only on
/// `(seed, k)` so training can resume at any step.
pub struct BatchStream<'a> {
    index: &'a DatasetIndex,
    pool: Vec<usize>,
    groups: Vec<Vec<usize>>,
    batch_size: usize,
    views: usize,
    augment: AugmentPolicy,
    seed: u64,
    sampler: Sampler,
    mode: Mode,
    next: usize,
}

pub fn make_batches<'a>(
    index: &'a DatasetIndex,
    batch_size_samples: usize,
    views: usize,
    augment: AugmentPolicy,
    rng_seed: u64,
    sampler: Sampler,
    mode: Mode,
) -> Result<BatchStream<'a>> {
    augment.validate()?;
    let views = if mode == Mode::Eval { 1 } else { views };
    if views == 0 {
        return Err(Error::validation("views must be at least 1"));
    }
    let pool: Vec<usize> = match mode {
        Mode::Train => (0..index.samples.len())
            .filter(|&i| index.samples[i].split == Split::Train && index.samples[i].view == View::Exocentric)
            .collect(),
        Mode::Eval => (0..index.samples.len()).collect(),
    };
    if mode == Mode::Train && batch_size_samples < 2 {
        return Err(Error::validation("batch size must be at least 2 samples"));
    }
    if batch_size_samples == 0 || batch_size_samples > pool.len() {
        return Err(Error::validation(format!(
            "batch size {batch_size_samples} exceeds the {} available samples",
            pool.len()
        )));
    }
    let mut by_pair: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for &i in &pool {
        let s = &index.samples[i];
        by_pair.entry((&s.interaction, &s.object)).or_default().push(i);
    }
    Ok(BatchStream {
        index,
        pool,
        groups: by_pair.into_values().collect(),
        batch_size: batch_size_samples,
        views,
        augment,
        seed: rng_seed,
        sampler,
        mode,
        next: 0,
    })
}

impl BatchStream<'_> {
    /// Batches per pass over the pool (incomplete tail dropped in train mode).
    pub fn batches_per_epoch(&self) -> usize {
        match self.mode {
            Mode::Train => self.pool.len() / self.batch_size,
            Mode::Eval => self.pool.len().div_ceil(self.batch_size),
        }
    }

    fn pick_pair_uniform(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut chosen = BTreeSet::new();
        let mut order = Vec::with_capacity(self.batch_size);
        while order.len() < self.batch_size {
            let group = &self.groups[rng.random_range(0..self.groups.len())];
            let s = group[rng.random_range(0..group.len())];
            if chosen.insert(s) {
                order.push(s);
            }
        }
        // Guarantee two interaction classes whenever the pool has them.
        let first = &self.index.samples[order[0]].interaction;
        if order.iter().all(|&s| &self.index.samples[s].interaction == first) {
            let others: Vec<usize> = self.pool.iter().copied().filter(|&s| &self.index.samples[s].interaction != first).collect();
            if !others.is_empty() {
                let last = order.len() - 1;
                order[last] = others[rng.random_range(0..others.len())];
            }
        }
        order
    }

    fn pick_permutation(&self, k: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch().max(1);
        let (epoch, pos) = (k / per_epoch, k % per_epoch);
        let mut perm = self.pool.clone();
        perm.shuffle(&mut rng_for(self.seed, &format!("epoch/{epoch}")));
        perm[pos * self.batch_size..((pos + 1) * self.batch_size).min(perm.len())].to_vec()
    }

    /// Batch number `k` (0-based).
    pub fn batch(&self, k: usize) -> Result<Batch> {
        let mut rng = rng_for(self.seed, &format!("batch/{k}"));
        let chosen = match (self.mode, self.sampler) {
            (Mode::Eval, _) => {
                let start = k * self.batch_size;
                if start >= self.pool.len() {
                    return Err(Error::validation(format!("eval batch {k} is past the end")));
                }
                self.pool[start..(start + self.batch_size).min(self.pool.len())].to_vec()
            }
            (Mode::Train, Sampler::PairUniform) => self.pick_pair_uniform(&mut rng),
            (Mode::Train, Sampler::Permutation) => self.pick_permutation(k),
        };
        let max_off = self.augment.base_size - self.augment.crop_size;
        let mut plan = Vec::with_capacity(chosen.len() * self.views);
        for &s in &chosen {
            for _ in 0..self.views {
                let crop = match self.mode {
                    Mode::Eval => CropBox {
                        x0: self.augment.center_offset(),
                        y0: self.augment.center_offset(),
                        size: self.augment.crop_size,
                        flipped: false,
                    },
                    Mode::Train => CropBox {
                        x0: rng.random_range(0..=max_off),
                        y0: rng.random_range(0..=max_off),
                        size: self.augment.crop_size,
                        flipped: self.augment.hflip && rng.random_bool(0.5),
                    },
                };
                plan.push((s, crop));
            }
        }
        let images = crate::par::try_map(&plan, |(s, crop)| {
            let img = RgbImage::load(&self.index.samples[*s].image_path)?;
            self.augment.apply(&img, crop.x0, crop.y0, crop.flipped)
        })?;
        let ids = |f: &dyn Fn(&Sample) -> Option<usize>| -> Result<Vec<usize>> {
            plan.iter()
                .map(|(s, _)| {
                    let sample = &self.index.samples[*s];
                    f(sample).ok_or_else(|| Error::UnknownLabel(sample.interaction.clone()))
                })
                .collect()
        };
        Ok(Batch {
            images,
            interaction_ids: ids(&|s| self.index.interaction_id(&s.interaction))?,
            object_ids: ids(&|s| self.index.object_id(&s.object))?,
            sample_indices: plan.iter().map(|(s, _)| *s).collect(),
            crops: plan.iter().map(|(_, c)| *c).collect(),
            views: self.views,
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.mode == Mode::Eval && self.next >= self.batches_per_epoch() {
            return None;
        }
        let k = self.next;
        self.next += 1;
        Some(self.batch(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agd20k_vocabulary_is_sorted_and_unique() {
        assert_eq!(AGD20K_INTERACTIONS.len(), 36);
        let mut sorted = AGD20K_INTERACTIONS.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, AGD20K_INTERACTIONS.to_vec());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-9);
    }

    #[test]
    fn regions_tile_the_image() {
        let spec = ToySpec::with_counts(4, 3, 1, 84, 0);
        let mut cover = vec![0; 84 * 84];
        for s in 0..TOY_SLOTS {
            let r = spec.region(s);
            for y in r[1]..r[3] {
                for x in r[0]..r[2] {
                    cover[y * 84 + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|c| *c == 1));
        let cells = region_cells(spec.region(0), 84, 84, 6, 6);
        assert_eq!(cells.iter().filter(|c| **c).count(), 9);
        assert!(cells[0] && cells[14] && !cells[3]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ToySpec::with_counts(2, 1, 0, 64, 7);
        assert!(spec.validate().is_err());
        spec.images_per_pair = 2;
        assert!(spec.validate().is_ok());
        spec.interactions.truncate(1);
        assert!(spec.validate().is_err());
    }
}

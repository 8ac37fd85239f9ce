//! Procedural instance-ReID corpus with controllable identity cues and
//! nuisance variation, plus base/novel splits and the episode samplers.
//!
//! Every category is a shape family with its own hue. Instances of a category
//! share the silhouette and one of a few body-colour variants (`shape_class`),
//! so they can only be told apart by three micro-cues drawn on the body:
//!
//! * a small glyph (position and kind),
//! * a stripe texture (orientation, frequency and phase),
//! * a constellation of three dots (positions).
//!
//! A category's *cue profile* names the cue that carries identity. The other
//! two cues are redrawn for every view and act as distractors, so which cue
//! matters can only be read off labelled pairs from that category.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// RGB image stored channel-major (`[3 × H × W]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mirror along the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..Self::CHANNELS {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        out
    }

    fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    img.set(c, y, x, bytes[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        img
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "{}: expected 8-bit RGB",
                path.display()
            )));
        }
        Ok(Self::from_rgb8(
            info.height as usize,
            info.width as usize,
            &buf[..info.buffer_size()],
        ))
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Identity-bearing micro-cue kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    Glyph,
    Stripes,
    Dots,
}

impl Cue {
    pub const ALL: [Cue; 3] = [Cue::Glyph, Cue::Stripes, Cue::Dots];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Diamond,
    Hexagon,
    Triangle,
    Pentagon,
    Octagon,
    Ellipse,
    Star,
    Cross,
    Squircle,
    Capsule,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Diamond,
        ShapeFamily::Hexagon,
        ShapeFamily::Triangle,
        ShapeFamily::Pentagon,
        ShapeFamily::Octagon,
        ShapeFamily::Ellipse,
        ShapeFamily::Star,
        ShapeFamily::Cross,
        ShapeFamily::Squircle,
        ShapeFamily::Capsule,
    ];

    /// Whether the object-frame point `(u, v)` (circumradius 1) lies on the body.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let polygon = |n: f64, rot: f64| {
            // distance to a regular n-gon boundary along `theta`
            let sector = 2.0 * PI / n;
            let a = (theta - rot).rem_euclid(sector) - sector / 2.0;
            r * a.cos() <= (PI / n).cos()
        };
        match self {
            ShapeFamily::Circle => r <= 1.0,
            ShapeFamily::Square => u.abs().max(v.abs()) <= 0.82,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.05,
            ShapeFamily::Hexagon => polygon(6.0, 0.0),
            ShapeFamily::Triangle => {
                // scaled up so the inscribed disc still holds the cues
                let s = 0.72;
                let (u, v) = (u * s, v * s + 0.12);
                let r = (u * u + v * v).sqrt();
                let th = v.atan2(u);
                let sector = 2.0 * PI / 3.0;
                let a = (th + PI / 2.0).rem_euclid(sector) - sector / 2.0;
                r * a.cos() <= 0.5
            }
            ShapeFamily::Pentagon => polygon(5.0, -PI / 2.0),
            ShapeFamily::Octagon => polygon(8.0, PI / 8.0),
            ShapeFamily::Ellipse => (u / 1.0).powi(2) + (v / 0.72).powi(2) <= 1.0,
            ShapeFamily::Star => {
                let k = (5.0 * (theta + PI / 2.0)).cos();
                r <= 0.72 + 0.28 * k
            }
            ShapeFamily::Cross => {
                (u.abs() <= 0.55 && v.abs() <= 1.0) || (v.abs() <= 0.55 && u.abs() <= 1.0)
            }
            ShapeFamily::Squircle => u.powi(4) + v.powi(4) <= 0.62,
            ShapeFamily::Capsule => {
                let cu = u.abs().min(0.35);
                ((u.abs() - cu).powi(2) + v * v).sqrt() <= 0.68
            }
        }
    }
}

/// Per-view nuisance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub lighting_scale: f64,
    pub rotation_deg: f64,
    pub background_seed: u64,
    pub occlusion_fraction: f64,
    /// Seeds the per-view values of the category's distractor cues.
    pub distractor_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub file: String,
    pub nuisance: Nuisance,
}

/// Identity parameters of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    /// Parameters of the category's identity cues, each scaled to `[0, 1]`.
    pub identity_features: Vec<f64>,
    /// Body-colour variant; shared by many instances of the category.
    pub shape_class: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub instance_id: u32,
    #[serde(flatten)]
    pub identity: IdentitySpec,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category_id: u32,
    pub shape_family: ShapeFamily,
    pub hue: f64,
    pub identity_cues: Vec<Cue>,
    pub role: SplitRole,
    /// Instances usable for support sets (and, for base categories, training).
    pub support_pool: Vec<u32>,
    /// Instances whose views form the query/gallery pool.
    pub test_instances: Vec<u32>,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
}

/// The corpus manifest: everything except pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub config: GenerationConfig,
    pub categories: Vec<CategoryEntry>,
    pub splits: Splits,
}

impl SplitManifest {
    pub fn category(&self, category_id: u32) -> Result<&CategoryEntry> {
        self.categories
            .iter()
            .find(|c| c.category_id == category_id)
            .ok_or_else(|| Error::Sampling {
                category: category_id,
                reason: "unknown category".into(),
            })
    }

    pub fn is_base(&self, category_id: u32) -> bool {
        self.splits.base.contains(&category_id)
    }

    pub fn is_novel(&self, category_id: u32) -> bool {
        self.splits.novel.contains(&category_id)
    }

    /// All record references of a category, in manifest order.
    pub fn records_of(&self, category_id: u32) -> Result<Vec<RecordRef>> {
        let cat = self.category(category_id)?;
        Ok(cat
            .instances
            .iter()
            .flat_map(|inst| {
                (0..inst.views.len() as u32).map(move |v| RecordRef {
                    category_id,
                    instance_id: inst.instance_id,
                    view_index: v,
                })
            })
            .collect())
    }

    /// Query/gallery pool of a category: every view of its test instances.
    pub fn test_records(&self, category_id: u32) -> Result<Vec<RecordRef>> {
        let cat = self.category(category_id)?;
        let test: BTreeSet<u32> = cat.test_instances.iter().copied().collect();
        Ok(self
            .records_of(category_id)?
            .into_iter()
            .filter(|r| test.contains(&r.instance_id))
            .collect())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks the split and instance invariants.
    pub fn validate(&self) -> Result<()> {
        let base: BTreeSet<_> = self.splits.base.iter().collect();
        if self.splits.novel.iter().any(|c| base.contains(c)) {
            return Err(Error::Protocol("base and novel splits overlap".into()));
        }
        for cat in &self.categories {
            for inst in &cat.instances {
                if inst.views.len() < 3 {
                    return Err(Error::Protocol(format!(
                        "instance {} of category {} has {} views",
                        inst.instance_id,
                        cat.category_id,
                        inst.views.len()
                    )));
                }
            }
            let pool: BTreeSet<_> = cat.support_pool.iter().collect();
            if cat.test_instances.iter().any(|i| pool.contains(i)) && cat.role == SplitRole::Novel {
                return Err(Error::Protocol(format!(
                    "category {} reuses support instances for testing",
                    cat.category_id
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: SplitManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Protocol(format!(
                "manifest schema {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Stable handle to one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub category_id: u32,
    pub instance_id: u32,
    pub view_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image: Image,
    pub instance_id: u32,
    pub category_id: u32,
    pub view_index: u32,
    pub nuisance: Nuisance,
}

impl InstanceRecord {
    pub fn reference(&self) -> RecordRef {
        RecordRef {
            category_id: self.category_id,
            instance_id: self.instance_id,
            view_index: self.view_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_categories: usize,
    /// Number of base categories; `None` keeps the 7-of-34 ratio.
    pub n_base: Option<usize>,
    pub instances_per_category: usize,
    pub views_per_instance: usize,
    pub image_size: usize,
    /// Share of each novel category's instances reserved for support sets.
    pub support_fraction: f64,
    pub shape_classes_per_category: u32,
    pub min_identity_distance: f64,
    pub lighting_range: [f64; 2],
    pub max_rotation_deg: f64,
    pub occlusion_probability: f64,
    pub max_occlusion_fraction: f64,
    pub background_noise: f64,
    /// Cue kinds (0 to 2) per category that are redrawn per view instead of
    /// carrying identity. Which kinds are distractors cycles across categories.
    pub distractor_cues: usize,
    /// Multiplies glyph and dot radii and the stripe contrast.
    pub cue_scale: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_categories: 34,
            n_base: None,
            instances_per_category: 24,
            views_per_instance: 4,
            image_size: 64,
            support_fraction: 1.0 / 3.0,
            shape_classes_per_category: 3,
            min_identity_distance: 0.25,
            lighting_range: [0.7, 1.3],
            max_rotation_deg: 20.0,
            occlusion_probability: 0.25,
            max_occlusion_fraction: 0.12,
            background_noise: 0.06,
            distractor_cues: 1,
            cue_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn base_count(&self) -> usize {
        self.n_base.unwrap_or_else(|| {
            ((self.n_categories as f64 * 7.0 / 34.0).round() as usize).clamp(1, self.n_categories.saturating_sub(1).max(1))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_categories < 2 {
            return bad("n_categories must be at least 2");
        }
        if self.instances_per_category < 2 {
            return bad("instances_per_category must be at least 2");
        }
        if self.views_per_instance < 3 {
            return bad("views_per_instance must be at least 3");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        let nb = self.base_count();
        if nb == 0 || nb >= self.n_categories {
            return bad("n_base must leave at least one base and one novel category");
        }
        if !(0.0..1.0).contains(&self.support_fraction) {
            return bad("support_fraction must lie in [0, 1)");
        }
        if self.shape_classes_per_category == 0 {
            return bad("shape_classes_per_category must be positive");
        }
        if self.lighting_range[0] <= 0.0 || self.lighting_range[0] > self.lighting_range[1] {
            return bad("lighting_range must be a positive, ordered interval");
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability)
            || !(0.0..=1.0).contains(&self.max_occlusion_fraction)
        {
            return bad("occlusion parameters must lie in [0, 1]");
        }
        if self.min_identity_distance < 0.0 {
            return bad("min_identity_distance must be non-negative");
        }
        if self.distractor_cues >= Cue::ALL.len() {
            return bad("distractor_cues must leave at least one identity cue");
        }
        if !(self.cue_scale > 0.0 && self.cue_scale <= 3.0) {
            return bad("cue_scale must lie in (0, 3]");
        }
        Ok(())
    }
}

/// In-memory corpus: the manifest plus decoded images.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: SplitManifest,
    pub records: Vec<InstanceRecord>,
    index: HashMap<RecordRef, usize>,
}

impl Corpus {
    fn from_parts(manifest: SplitManifest, records: Vec<InstanceRecord>) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.reference(), i))
            .collect();
        Self {
            manifest,
            records,
            index,
        }
    }

    pub fn record(&self, r: RecordRef) -> Result<&InstanceRecord> {
        self.index
            .get(&r)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::Protocol(format!("record {r:?} is not in the corpus")))
    }

    pub fn image(&self, r: RecordRef) -> Result<&Image> {
        Ok(&self.record(r)?.image)
    }

    pub fn index_of(&self, r: RecordRef) -> Option<usize> {
        self.index.get(&r).copied()
    }

    /// Writes PNGs and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for cat in &self.manifest.categories {
            for inst in &cat.instances {
                for (v, view) in inst.views.iter().enumerate() {
                    let r = RecordRef {
                        category_id: cat.category_id,
                        instance_id: inst.instance_id,
                        view_index: v as u32,
                    };
                    let path = dir.join(&view.file);
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    self.image(r)?.write_png(&path)?;
                }
            }
        }
        self.manifest.write(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = SplitManifest::read(dir)?;
        manifest.validate()?;
        let mut records = Vec::new();
        for cat in &manifest.categories {
            for inst in &cat.instances {
                for (v, view) in inst.views.iter().enumerate() {
                    let image = Image::read_png(&dir.join(&view.file))?;
                    if image.height != manifest.image_size || image.width != manifest.image_size {
                        return Err(Error::shape(format!(
                            "{} is {}x{}, manifest says {}",
                            view.file, image.height, image.width, manifest.image_size
                        )));
                    }
                    records.push(InstanceRecord {
                        image,
                        instance_id: inst.instance_id,
                        category_id: cat.category_id,
                        view_index: v as u32,
                        nuisance: view.nuisance.clone(),
                    });
                }
            }
        }
        Ok(Self::from_parts(manifest, records))
    }
}

/// Glyph cue: position in the object frame and one of four marks.
#[derive(Clone, Copy, Debug)]
struct GlyphCue {
    x: f64,
    y: f64,
    kind: u32,
}

#[derive(Clone, Copy, Debug)]
struct StripeCue {
    angle: f64,
    freq: f64,
    phase: f64,
}

#[derive(Clone, Copy, Debug)]
struct DotsCue {
    pos: [(f64, f64); 3],
}

const CUE_EXTENT: f64 = 0.42;

fn sample_glyph(rng: &mut impl Rng) -> GlyphCue {
    GlyphCue {
        x: rng.random_range(-CUE_EXTENT..CUE_EXTENT),
        y: rng.random_range(-CUE_EXTENT..CUE_EXTENT),
        kind: rng.random_range(0..4),
    }
}

fn sample_stripes(rng: &mut impl Rng) -> StripeCue {
    StripeCue {
        angle: rng.random_range(0.0..PI),
        freq: rng.random_range(1.5..4.0),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

fn sample_dots(rng: &mut impl Rng) -> DotsCue {
    let mut pos = [(0.0, 0.0); 3];
    for p in &mut pos {
        *p = (
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
    }
    DotsCue { pos }
}

#[derive(Clone, Copy, Debug)]
struct CueValues {
    glyph: GlyphCue,
    stripes: StripeCue,
    dots: DotsCue,
}

impl CueValues {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            glyph: sample_glyph(rng),
            stripes: sample_stripes(rng),
            dots: sample_dots(rng),
        }
    }

    fn features(&self, cues: &[Cue]) -> Vec<f64> {
        let mut f = Vec::new();
        let norm = |v: f64| (v + 0.5).clamp(0.0, 1.0);
        for cue in cues {
            match cue {
                Cue::Glyph => {
                    f.push(norm(self.glyph.x));
                    f.push(norm(self.glyph.y));
                    f.push(self.glyph.kind as f64 / 3.0);
                }
                Cue::Stripes => {
                    f.push(self.stripes.angle / PI);
                    f.push((self.stripes.freq - 1.5) / 2.5);
                    f.push(self.stripes.phase / (2.0 * PI));
                }
                Cue::Dots => {
                    for (x, y) in self.dots.pos {
                        f.push(norm(x));
                        f.push(norm(y));
                    }
                }
            }
        }
        f
    }

    fn from_features(cues: &[Cue], features: &[f64], fill: CueValues) -> Self {
        let mut out = fill;
        let mut it = features.iter().copied();
        let mut next = || it.next().unwrap_or(0.0);
        for cue in cues {
            match cue {
                Cue::Glyph => {
                    out.glyph.x = next() - 0.5;
                    out.glyph.y = next() - 0.5;
                    out.glyph.kind = (next() * 3.0).round() as u32;
                }
                Cue::Stripes => {
                    out.stripes.angle = next() * PI;
                    out.stripes.freq = next() * 2.5 + 1.5;
                    out.stripes.phase = next() * 2.0 * PI;
                }
                Cue::Dots => {
                    for p in &mut out.dots.pos {
                        *p = (next() - 0.5, next() - 0.5);
                    }
                }
            }
        }
        out
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn glyph_contains(kind: u32, du: f64, dv: f64, r: f64) -> bool {
    let (a, b) = (du / r, dv / r);
    match kind {
        0 => a.abs().max(b.abs()) <= 1.0,
        1 => a * a + b * b <= 1.0,
        2 => (a.abs() <= 0.38 && b.abs() <= 1.0) || (b.abs() <= 0.38 && a.abs() <= 1.0),
        _ => b >= -0.9 && b <= 1.0 && a.abs() <= (1.0 - b) * 0.55,
    }
}

struct ViewParams<'a> {
    family: ShapeFamily,
    body: [f64; 3],
    cues: &'a CueValues,
    nuisance: &'a Nuisance,
    background_noise: f64,
    cue_scale: f64,
}

fn render(size: usize, p: &ViewParams<'_>) -> Image {
    let mut img = Image::new(size, size);
    let mut bg_rng = seed::rng(p.nuisance.background_seed);
    let bg_base = hsv_to_rgb(bg_rng.random::<f64>(), bg_rng.random_range(0.0..0.35), bg_rng.random_range(0.35..0.8));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                bg_rng.random_range(0.5..3.0),
                bg_rng.random_range(0.0..PI),
                bg_rng.random_range(0.0..2.0 * PI),
                bg_rng.random_range(0.03..0.12),
            )
        })
        .collect();
    let theta = -p.nuisance.rotation_deg.to_radians();
    let (ct, st) = (theta.cos(), theta.sin());
    let half = size as f64 / 2.0;
    let obj_radius = 0.42 * size as f64;
    let light = p.nuisance.lighting_scale;
    let glyph_r = 0.16 * p.cue_scale;
    let dot_r = 0.085 * p.cue_scale;
    let stripe_amp = (0.3 * p.cue_scale).min(0.9);
    for py in 0..size {
        for px in 0..size {
            let fx = (px as f64 + 0.5 - half) / obj_radius;
            let fy = (py as f64 + 0.5 - half) / obj_radius;
            // object frame (inverse rotation)
            let u = ct * fx - st * fy;
            let v = st * fx + ct * fy;
            let mut rgb;
            if p.family.contains(u, v) {
                rgb = p.body;
                let s = &p.cues.stripes;
                let proj = u * s.angle.cos() + v * s.angle.sin();
                let m = 1.0 + stripe_amp * (2.0 * PI * s.freq * proj + s.phase).sin();
                for c in &mut rgb {
                    *c *= m;
                }
                for &(dx, dy) in &p.cues.dots.pos {
                    if (u - dx).powi(2) + (v - dy).powi(2) <= dot_r * dot_r {
                        rgb = [0.96, 0.96, 0.92];
                    }
                }
                let gl = &p.cues.glyph;
                if glyph_contains(gl.kind, u - gl.x, v - gl.y, glyph_r) {
                    rgb = [0.06, 0.05, 0.08];
                }
            } else {
                let (nx, ny) = (px as f64 / size as f64, py as f64 / size as f64);
                let mut w = 0.0;
                for &(f, a, ph, amp) in &waves {
                    w += amp * (2.0 * PI * f * (nx * a.cos() + ny * a.sin()) + ph).sin();
                }
                rgb = [bg_base[0] + w, bg_base[1] + w * 0.8, bg_base[2] + w * 0.6];
            }
            for (c, val) in rgb.iter().enumerate() {
                let noise = p.background_noise * (bg_rng.random::<f64>() * 2.0 - 1.0);
                img.set(c, py, px, ((val * light + noise).clamp(0.0, 1.0)) as f32);
            }
        }
    }
    if p.nuisance.occlusion_fraction > 0.0 {
        let side = ((p.nuisance.occlusion_fraction * (size * size) as f64).sqrt().round() as usize).clamp(1, size);
        let ox = bg_rng.random_range(0..=size - side);
        let oy = bg_rng.random_range(0..=size - side);
        let shade = bg_rng.random_range(0.3..0.7) as f32;
        for y in oy..oy + side {
            for x in ox..ox + side {
                for c in 0..Image::CHANNELS {
                    img.set(c, y, x, shade);
                }
            }
        }
    }
    // quantise so in-memory and PNG round-tripped corpora agree exactly
    for v in &mut img.data {
        *v = quantize(*v) as f32 / 255.0;
    }
    img
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct GeneratedCategory {
    entry: CategoryEntry,
    records: Vec<InstanceRecord>,
}

fn generate_category(
    config: &GenerationConfig,
    category_id: u32,
    role: SplitRole,
    identity_cues: Vec<Cue>,
) -> Result<GeneratedCategory> {
    let mut rng = seed::rng_for(config.seed, "category", category_id as u64);
    let family = ShapeFamily::ALL[category_id as usize % ShapeFamily::ALL.len()];
    // golden-ratio hue walk keeps neighbouring categories apart
    let hue = (category_id as f64 * 0.618_033_988_75 + 0.11).rem_euclid(1.0);
    let body_colors: Vec<[f64; 3]> = (0..config.shape_classes_per_category)
        .map(|k| {
            let t = if config.shape_classes_per_category > 1 {
                k as f64 / (config.shape_classes_per_category - 1) as f64
            } else {
                0.5
            };
            hsv_to_rgb(hue, 0.45 + 0.35 * t, 0.85 - 0.25 * t)
        })
        .collect();

    let mut identities: Vec<(IdentitySpec, CueValues)> = Vec::new();
    for inst in 0..config.instances_per_category {
        let mut attempts = 0;
        let (features, values) = loop {
            let values = CueValues::sample(&mut rng);
            let features = values.features(&identity_cues);
            let ok = identities
                .iter()
                .all(|(s, _)| feature_distance(&s.identity_features, &features) >= config.min_identity_distance);
            if ok {
                break (features, values);
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot place instance {inst} of category {category_id} at identity distance {}",
                    config.min_identity_distance
                )));
            }
        };
        let shape_class = rng.random_range(0..config.shape_classes_per_category);
        identities.push((
            IdentitySpec {
                identity_features: features,
                shape_class,
            },
            values,
        ));
    }

    let mut instances = Vec::new();
    let mut records = Vec::new();
    for (inst, (spec, values)) in identities.into_iter().enumerate() {
        let mut views = Vec::new();
        for view in 0..config.views_per_instance {
            let occluded = rng.random::<f64>() < config.occlusion_probability;
            let nuisance = Nuisance {
                lighting_scale: rng.random_range(config.lighting_range[0]..=config.lighting_range[1]),
                rotation_deg: rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg),
                background_seed: rng.random(),
                occlusion_fraction: if occluded {
                    rng.random_range(0.0..=config.max_occlusion_fraction)
                } else {
                    0.0
                },
                distractor_seed: rng.random(),
            };
            let view_values = if identity_cues.len() < Cue::ALL.len() {
                let fill = CueValues::sample(&mut seed::rng(nuisance.distractor_seed));
                CueValues::from_features(&identity_cues, &spec.identity_features, fill)
            } else {
                values
            };
            let image = render(
                config.image_size,
                &ViewParams {
                    family,
                    body: body_colors[spec.shape_class as usize],
                    cues: &view_values,
                    nuisance: &nuisance,
                    background_noise: config.background_noise,
                    cue_scale: config.cue_scale,
                },
            );
            records.push(InstanceRecord {
                image,
                instance_id: inst as u32,
                category_id,
                view_index: view as u32,
                nuisance: nuisance.clone(),
            });
            views.push(ViewEntry {
                file: format!("images/c{category_id:03}/i{inst:04}_v{view:02}.png"),
                nuisance,
            });
        }
        instances.push(InstanceEntry {
            instance_id: inst as u32,
            identity: spec,
            views,
        });
    }

    let all: Vec<u32> = (0..config.instances_per_category as u32).collect();
    let (support_pool, test_instances) = match role {
        SplitRole::Base => (all.clone(), all),
        SplitRole::Novel => {
            let n = all.len();
            let k = if n >= 4 {
                ((n as f64 * config.support_fraction).round() as usize).clamp(2, n - 2)
            } else {
                0
            };
            (all[..k].to_vec(), all[k..].to_vec())
        }
    };
    Ok(GeneratedCategory {
        entry: CategoryEntry {
            category_id,
            shape_family: family,
            hue,
            identity_cues,
            role,
            support_pool,
            test_instances,
            instances,
        },
        records,
    })
}

/// Generates the corpus in memory. Deterministic in `config` (including its seed),
/// independent of thread count.
pub fn generate_corpus(config: &GenerationConfig) -> Result<Corpus> {
    config.validate()?;
    let mut order: Vec<u32> = (0..config.n_categories as u32).collect();
    order.shuffle(&mut seed::rng_for(config.seed, "split", 0));
    let nb = config.base_count();
    let mut base: Vec<u32> = order[..nb].to_vec();
    let mut novel: Vec<u32> = order[nb..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();

    // cue profiles cycle within each split so base training covers every cue
    let mut plan: BTreeMap<u32, (SplitRole, Vec<Cue>)> = BTreeMap::new();
    for (role, ids) in [(SplitRole::Base, &base), (SplitRole::Novel, &novel)] {
        for (rank, &c) in ids.iter().enumerate() {
            let cues: Vec<Cue> = (config.distractor_cues..Cue::ALL.len())
                .map(|j| Cue::ALL[(rank + j) % Cue::ALL.len()])
                .collect();
            plan.insert(c, (role, cues));
        }
    }

    let generated: Vec<GeneratedCategory> = plan
        .into_par_iter()
        .map(|(c, (role, cues))| generate_category(config, c, role, cues))
        .collect::<Result<_>>()?;

    let mut categories = Vec::new();
    let mut records = Vec::new();
    for g in generated {
        categories.push(g.entry);
        records.extend(g.records);
    }
    let manifest = SplitManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: config.seed,
        image_size: config.image_size,
        config: config.clone(),
        categories,
        splits: Splits { base, novel },
    };
    manifest.validate()?;
    Ok(Corpus::from_parts(manifest, records))
}

/// Generates the corpus and writes images plus manifest under `dir`.
pub fn generate_corpus_to(config: &GenerationConfig, dir: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(config)?;
    corpus.write(dir)?;
    Ok(corpus)
}

/// One labelled pair of a support set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupportPair {
    pub a: RecordRef,
    pub b: RecordRef,
    pub label: bool,
}

/// K labelled image pairs from one category, in sampling order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub category_id: u32,
    pub k: usize,
    pub seed: u64,
    pub pairs: Vec<SupportPair>,
}

impl SupportSet {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label).count()
    }

    pub fn negatives(&self) -> usize {
        self.pairs.len() - self.positives()
    }

    /// Distinct records used by the set, sorted.
    pub fn records(&self) -> BTreeSet<RecordRef> {
        self.pairs.iter().flat_map(|p| [p.a, p.b]).collect()
    }

    /// Same set with pairs reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> SupportSet {
        SupportSet {
            pairs: perm.iter().map(|&i| self.pairs[i]).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: RecordRef,
    pub positive: RecordRef,
    pub negative: RecordRef,
}

/// Instances a sampler may draw from: the support pool of novel categories,
/// every instance of base categories.
fn sampling_pool(manifest: &SplitManifest, category_id: u32) -> Result<Vec<(u32, u32)>> {
    let cat = manifest.category(category_id)?;
    let pool: BTreeSet<u32> = cat.support_pool.iter().copied().collect();
    Ok(cat
        .instances
        .iter()
        .filter(|i| pool.contains(&i.instance_id))
        .map(|i| (i.instance_id, i.views.len() as u32))
        .collect())
}

fn distinct_pair(rng: &mut impl Rng, n: u32) -> (u32, u32) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Samples `ceil(k/2)` positive and `floor(k/2)` negative pairs, shuffled.
pub fn sample_support_set(manifest: &SplitManifest, category_id: u32, k: usize, seed_value: u64) -> Result<SupportSet> {
    let err = |reason: &str| Error::Sampling {
        category: category_id,
        reason: reason.to_string(),
    };
    if k == 0 {
        return Err(err("support set size must be positive"));
    }
    let pool = sampling_pool(manifest, category_id)?;
    let multi: Vec<(u32, u32)> = pool.iter().copied().filter(|&(_, v)| v >= 2).collect();
    if pool.len() < 2 || multi.is_empty() {
        return Err(err("needs at least 2 instances with 2 views each"));
    }
    let mut rng = seed::rng_for(seed_value, "support", category_id as u64);
    let n_pos = k.div_ceil(2);
    let mut pairs = Vec::with_capacity(k);
    let rr = |inst: u32, view: u32| RecordRef {
        category_id,
        instance_id: inst,
        view_index: view,
    };
    for _ in 0..n_pos {
        let (inst, views) = multi[rng.random_range(0..multi.len())];
        let (va, vb) = distinct_pair(&mut rng, views);
        pairs.push(SupportPair {
            a: rr(inst, va),
            b: rr(inst, vb),
            label: true,
        });
    }
    for _ in n_pos..k {
        let (ia, ib) = distinct_pair(&mut rng, pool.len() as u32);
        let (ia, na) = pool[ia as usize];
        let (ib, nb) = pool[ib as usize];
        pairs.push(SupportPair {
            a: rr(ia, rng.random_range(0..na)),
            b: rr(ib, rng.random_range(0..nb)),
            label: false,
        });
    }
    pairs.shuffle(&mut rng);
    Ok(SupportSet {
        category_id,
        k,
        seed: seed_value,
        pairs,
    })
}

/// Samples `b` within-category triplets.
pub fn sample_triplets(manifest: &SplitManifest, category_id: u32, b: usize, seed_value: u64) -> Result<Vec<Triplet>> {
    let err = |reason: &str| Error::Sampling {
        category: category_id,
        reason: reason.to_string(),
    };
    if b == 0 {
        return Err(err("triplet count must be positive"));
    }
    let pool = sampling_pool(manifest, category_id)?;
    let multi: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].1 >= 2).collect();
    if pool.len() < 2 || multi.is_empty() {
        return Err(err("needs at least 2 instances, one with 2 views"));
    }
    let mut rng = seed::rng_for(seed_value, "triplets", category_id as u64);
    let rr = |inst: u32, view: u32| RecordRef {
        category_id,
        instance_id: inst,
        view_index: view,
    };
    Ok((0..b)
        .map(|_| {
            let ai = multi[rng.random_range(0..multi.len())];
            let (inst, views) = pool[ai];
            let (va, vp) = distinct_pair(&mut rng, views);
            let mut ni = rng.random_range(0..pool.len() - 1);
            if ni >= ai {
                ni += 1;
            }
            let (neg, nviews) = pool[ni];
            Triplet {
                anchor: rr(inst, va),
                positive: rr(inst, vp),
                negative: rr(neg, rng.random_range(0..nviews)),
            }
        })
        .collect())
}

/// Shuffles a slice with a fresh stream; used for per-step pair order.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenerationConfig {
        GenerationConfig {
            n_categories: 3,
            n_base: Some(1),
            instances_per_category: 6,
            views_per_instance: 3,
            image_size: 32,
            seed: 11,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn counts_follow_the_config() {
        let cfg = GenerationConfig {
            n_categories: 2,
            instances_per_category: 2,
            views_per_instance: 3,
            seed: 7,
            ..GenerationConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.records.len(), 12);
        assert_eq!(corpus.manifest.categories.len(), 2);
        let identities: usize = corpus.manifest.categories.iter().map(|c| c.instances.len()).sum();
        assert_eq!(identities, 4);
        assert_eq!(corpus.manifest.splits.base.len() + corpus.manifest.splits.novel.len(), 2);
    }

    #[test]
    fn default_split_mirrors_seven_of_thirty_four() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.base_count(), 7);
        assert_eq!(cfg.n_categories - cfg.base_count(), 27);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GenerationConfig { views_per_instance: 2, ..tiny() },
            GenerationConfig { n_categories: 1, ..tiny() },
            GenerationConfig { instances_per_category: 0, ..tiny() },
            GenerationConfig { n_base: Some(3), ..tiny() },
        ] {
            assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny()).unwrap();
        let b = generate_corpus(&tiny()).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.manifest).unwrap(),
            serde_json::to_vec(&b.manifest).unwrap()
        );
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn views_share_identity_but_not_pixels() {
        let c = generate_corpus(&tiny()).unwrap();
        let cat = &c.manifest.categories[0];
        let inst = &cat.instances[0];
        let img = |v: u32| {
            c.image(RecordRef {
                category_id: cat.category_id,
                instance_id: inst.instance_id,
                view_index: v,
            })
            .unwrap()
            .clone()
        };
        assert_ne!(img(0), img(1));
        for r in &c.records {
            assert_eq!(r.image.height, 32);
            assert_eq!(r.image.width, 32);
            assert!(r.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identities_are_separated() {
        let cfg = tiny();
        let c = generate_corpus(&cfg).unwrap();
        for cat in &c.manifest.categories {
            for (i, a) in cat.instances.iter().enumerate() {
                for b in &cat.instances[i + 1..] {
                    let d = feature_distance(&a.identity.identity_features, &b.identity.identity_features);
                    assert!(d >= cfg.min_identity_distance);
                }
            }
        }
    }

    #[test]
    fn support_sets_are_balanced_and_within_category() {
        let c = generate_corpus(&tiny()).unwrap();
        let cat = c.manifest.splits.novel[0];
        for k in [1usize, 2, 7, 32, 64, 128] {
            let s = sample_support_set(&c.manifest, cat, k, 3).unwrap();
            assert_eq!(s.pairs.len(), k);
            assert_eq!(s.positives(), k.div_ceil(2));
            assert_eq!(s.negatives(), k / 2);
            for p in &s.pairs {
                assert_eq!(p.a.category_id, cat);
                assert_eq!(p.b.category_id, cat);
                assert_eq!(p.label, p.a.instance_id == p.b.instance_id);
                assert_ne!(p.a, p.b);
            }
        }
        assert_eq!(
            sample_support_set(&c.manifest, cat, 8, 5).unwrap(),
            sample_support_set(&c.manifest, cat, 8, 5).unwrap()
        );
    }

    #[test]
    fn support_sampling_fails_on_small_pools() {
        let cfg = GenerationConfig {
            n_categories: 2,
            instances_per_category: 2,
            views_per_instance: 3,
            seed: 7,
            ..GenerationConfig::default()
        };
        let c = generate_corpus(&cfg).unwrap();
        let novel = c.manifest.splits.novel[0];
        let err = sample_support_set(&c.manifest, novel, 4, 0).unwrap_err();
        assert!(matches!(err, Error::Sampling { category, .. } if category == novel));
        // base categories draw from every instance
        let base = c.manifest.splits.base[0];
        let s = sample_support_set(&c.manifest, base, 2, 0).unwrap();
        assert_eq!((s.positives(), s.negatives()), (1, 1));
    }

    #[test]
    fn triplets_respect_identity() {
        let c = generate_corpus(&tiny()).unwrap();
        let base = c.manifest.splits.base[0];
        let t = sample_triplets(&c.manifest, base, 8, 1).unwrap();
        assert_eq!(t.len(), 8);
        for tr in &t {
            assert_eq!(tr.anchor.instance_id, tr.positive.instance_id);
            assert_ne!(tr.anchor, tr.positive);
            assert_ne!(tr.anchor.instance_id, tr.negative.instance_id);
            for r in [tr.anchor, tr.positive, tr.negative] {
                assert_eq!(r.category_id, base);
            }
        }
        assert!(sample_triplets(&c.manifest, base, 0, 1).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let c = generate_corpus(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        assert_eq!(back.records, c.records);
    }

    #[test]
    fn identity_features_solve_the_task() {
        // nearest neighbour on stored identity vectors retrieves the right instance
        let c = generate_corpus(&tiny()).unwrap();
        for cat in &c.manifest.categories {
            let rows: Vec<(u32, &Vec<f64>)> = cat
                .instances
                .iter()
                .flat_map(|i| i.views.iter().map(move |_| (i.instance_id, &i.identity.identity_features)))
                .collect();
            for (qi, (qid, qf)) in rows.iter().enumerate() {
                let best = rows
                    .iter()
                    .enumerate()
                    .filter(|(gi, _)| *gi != qi)
                    .min_by(|a, b| {
                        feature_distance(qf, a.1 .1)
                            .partial_cmp(&feature_distance(qf, b.1 .1))
                            .unwrap()
                    })
                    .unwrap();
                assert_eq!(best.1 .0, *qid);
            }
        }
    }
}

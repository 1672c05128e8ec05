//! Procedural two-domain scenes, COCO-style manifests, augmentation and batching.
//!
//! Images are RGB, stored as 8-bit PNG and held in memory as channel-major `f32`
//! values in `[0, 1]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::{BBox, BoxAnnotation};
use crate::tensor::{Scalar, Tensor};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// Boxes narrower or shorter than this after augmentation are dropped.
pub const MIN_BOX_EXTENT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path}: invalid JSON: {detail}")]
    Json { path: PathBuf, detail: String },
    #[error("{record}: {detail}")]
    Parse { record: String, detail: String },
    #[error("duplicate image id {0}")]
    DuplicateImageId(u64),
    #[error("manifest {0} has no images")]
    Empty(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("batch size must be at least 1")]
    BatchSize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    #[default]
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?} (expected source or target)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Disc,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::Disc,
        Primitive::Square,
        Primitive::Triangle,
        Primitive::Ring,
        Primitive::Bar,
        Primitive::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Disc => "disc",
            Primitive::Square => "square",
            Primitive::Triangle => "triangle",
            Primitive::Ring => "ring",
            Primitive::Bar => "bar",
            Primitive::Cross => "cross",
        }
    }

    /// Whether the point `(u, v)` in box-normalised coordinates is painted.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Primitive::Disc => r2 <= 0.25,
            Primitive::Square | Primitive::Bar => true,
            Primitive::Triangle => du.abs() <= v / 2.0,
            Primitive::Ring => (0.09..=0.25).contains(&r2),
            Primitive::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
        }
    }
}

/// Appearance degradations applied to target-domain images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetStyle {
    /// Maximum absolute additive intensity shift per image.
    pub intensity_shift: f64,
    /// Per-image contrast factor is drawn from `[1 − contrast_jitter, 1]`.
    pub contrast_jitter: f64,
    pub noise_sigma: f64,
    /// Box-blur radius in pixels, applied once horizontally and once vertically.
    pub blur_radius: usize,
    /// Amplitude of the sinusoidal background texture.
    pub texture_amplitude: f64,
}

impl Default for TargetStyle {
    fn default() -> Self {
        Self {
            intensity_shift: 0.15,
            contrast_jitter: 0.4,
            noise_sigma: 0.06,
            blur_radius: 1,
            texture_amplitude: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Primitive drawn for each class id.
    pub classes: Vec<Primitive>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the shorter box side in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum pixel gap between any two boxes.
    pub spacing: f64,
    pub target_style: TargetStyle,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            classes: Primitive::ALL.to_vec(),
            min_objects: 1,
            max_objects: 5,
            min_size: 12.0,
            max_size: 36.0,
            spacing: 2.0,
            target_style: TargetStyle::default(),
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|p| p.name().to_string()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return fail("image size must be positive");
        }
        if self.classes.is_empty() {
            return fail("at least one class is required");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects");
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return fail("size range must satisfy 1 <= min_size <= max_size");
        }
        // bars are three times longer than wide
        if self.max_size * 3.0 > self.height.min(self.width) as f64 {
            return fail("max_size too large for the image (bars need 3x max_size)");
        }
        Ok(())
    }
}

/// Channel-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; Self::CHANNELS * width * height],
        }
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
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

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        let mut img = Self::filled(width, height, 0.0);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    let i = img.idx(c, y, x);
                    img.data[i] = rgb[(y * width + x) * Self::CHANNELS + c] as f32 / 255.0;
                }
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DataError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8()).expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self, DataError> {
        let img = image::open(path).map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()))
    }
}

/// `[0, 1] → [0, 255]`, rounding half away from zero (0.5 → 128).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    /// Path relative to the manifest directory, as written in the JSON.
    pub file_name: String,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub domain: Domain,
    /// False for target images whose labels are not used (or do not exist).
    pub labeled: bool,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_annotations(&self) -> usize {
        self.images.iter().map(|r| r.annotations.len()).sum()
    }

    pub fn to_coco_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|r| json!({"id": r.id, "file_name": r.file_name, "width": r.width, "height": r.height}))
            .collect();
        let mut annotations = Vec::new();
        for r in &self.images {
            for a in &r.annotations {
                let b = a.bbox;
                annotations.push(json!({
                    "id": annotations.len(),
                    "image_id": r.id,
                    "category_id": a.class_id,
                    "bbox": [b.x1, b.y1, b.width(), b.height()],
                    "area": b.area(),
                    "iscrowd": 0,
                }));
            }
        }
        let categories: Vec<Value> = self.class_names.iter().enumerate().map(|(i, n)| json!({"id": i, "name": n})).collect();
        json!({
            "info": {"split": self.split, "domain": self.domain.to_string(), "labeled": self.labeled},
            "images": images,
            "annotations": annotations,
            "categories": categories,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let path = dir.join(ANNOTATION_FILE);
        let text = serde_json::to_string_pretty(&self.to_coco_json()).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Renders the source and target versions of scene `index`. Both share the same
/// object layout; only appearance differs.
///
/// `spec` must pass [`SceneSpec::validate`]; otherwise this may panic.
pub fn render_scene(spec: &SceneSpec, seed: u64, index: u64, domain: Domain) -> (Image, Vec<BoxAnnotation>) {
    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
    layout_rng.set_stream(2 * index);
    let (background, objects) = sample_layout(spec, &mut layout_rng);

    let mut img = Image::filled(spec.width, spec.height, 0.0);
    for c in 0..Image::CHANNELS {
        for i in 0..spec.width * spec.height {
            img.data[c * spec.width * spec.height + i] = background[c];
        }
    }
    if domain == Domain::Target {
        let mut style_rng = ChaCha8Rng::seed_from_u64(seed);
        style_rng.set_stream(2 * index + 1);
        add_texture(&mut img, &spec.target_style, &mut style_rng);
        paint_objects(&mut img, spec, &objects);
        degrade(&mut img, &spec.target_style, &mut style_rng);
    } else {
        paint_objects(&mut img, spec, &objects);
    }
    let boxes = objects.iter().map(|o| o.annotation).collect();
    (img, boxes)
}

struct PlacedObject {
    annotation: BoxAnnotation,
    color: [f32; 3],
}

fn sample_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> ([f32; 3], Vec<PlacedObject>) {
    let base: f32 = rng.gen_range(0.05..0.3);
    let background = [base, base, base];
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.classes.len());
        let side = rng.gen_range(spec.min_size..=spec.max_size).round();
        let (w, h) = match spec.classes[class_id] {
            Primitive::Bar if rng.gen_bool(0.5) => (3.0 * side, side),
            Primitive::Bar => (side, 3.0 * side),
            _ => (side, side),
        };
        let gray: f32 = rng.gen_range(0.55..0.95);
        let mut color = [gray; 3];
        for ch in &mut color {
            *ch = (*ch + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        // rejection sampling keeps boxes apart so every object has its own center cell
        for _ in 0..50 {
            let x1 = rng.gen_range(0.0..=(spec.width as f64 - w)).round();
            let y1 = rng.gen_range(0.0..=(spec.height as f64 - h)).round();
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            let clear = placed.iter().all(|p| {
                let o = p.annotation.bbox;
                bbox.x1 >= o.x2 + spec.spacing || o.x1 >= bbox.x2 + spec.spacing || bbox.y1 >= o.y2 + spec.spacing || o.y1 >= bbox.y2 + spec.spacing
            });
            if clear {
                placed.push(PlacedObject {
                    annotation: BoxAnnotation { bbox, class_id },
                    color,
                });
                break;
            }
        }
    }
    (background, placed)
}

fn paint_objects(img: &mut Image, spec: &SceneSpec, objects: &[PlacedObject]) {
    let plane = img.width * img.height;
    for obj in objects {
        let b = obj.annotation.bbox;
        let shape = spec.classes[obj.annotation.class_id];
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                let u = (x as f64 + 0.5 - b.x1) / b.width();
                let v = (y as f64 + 0.5 - b.y1) / b.height();
                if shape.covers(u, v) {
                    for (c, &val) in obj.color.iter().enumerate() {
                        img.data[c * plane + y * img.width + x] = val;
                    }
                }
            }
        }
    }
}

fn add_texture(img: &mut Image, style: &TargetStyle, rng: &mut ChaCha8Rng) {
    if style.texture_amplitude <= 0.0 {
        return;
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = style.texture_amplitude * rng.gen_range(0.3..1.0) / 3.0;
            let fx = rng.gen_range(0.02..0.25);
            let fy = rng.gen_range(0.02..0.25);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (amp, fx, fy, phase)
        })
        .collect();
    let plane = img.width * img.height;
    for y in 0..img.height {
        for x in 0..img.width {
            let t: f64 = waves.iter().map(|&(a, fx, fy, ph)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for c in 0..Image::CHANNELS {
                let i = c * plane + y * img.width + x;
                img.data[i] = (img.data[i] as f64 + t).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn degrade(img: &mut Image, style: &TargetStyle, rng: &mut ChaCha8Rng) {
    box_blur(img, style.blur_radius);
    let contrast = 1.0 - rng.gen_range(0.0..=style.contrast_jitter.max(0.0));
    let shift = if style.intensity_shift > 0.0 {
        rng.gen_range(-style.intensity_shift..=style.intensity_shift)
    } else {
        0.0
    };
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    for v in &mut img.data {
        let n = if style.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = ((*v as f64 - 0.5) * contrast + 0.5 + shift + n).clamp(0.0, 1.0) as f32;
    }
}

fn box_blur(img: &mut Image, radius: usize) {
    if radius == 0 {
        return;
    }
    let (w, h) = (img.width, img.height);
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = vec![0f32; w * h];
    for c in 0..Image::CHANNELS {
        let plane = &mut img.data[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (-r..=r).map(|d| plane[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize]).sum();
                tmp[y * w + x] = s * norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let s: f32 = (-r..=r).map(|d| tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x]).sum();
                plane[y * w + x] = s * norm;
            }
        }
    }
}

/// Writes `count` scenes to `<out_dir>/images` plus `<out_dir>/annotations.json`.
///
/// Unlabeled sets are written without annotations. Output is a pure function of
/// `(spec, domain, count, seed)`.
pub fn generate_dataset(spec: &SceneSpec, domain: Domain, count: usize, seed: u64, labeled: bool, split: &str, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let (img, boxes) = render_scene(spec, seed, i as u64, domain);
        let file_name = format!("{IMAGE_DIR}/{i:05}.png");
        let path = out_dir.join(&file_name);
        img.save_png(&path)?;
        images.push(ImageRecord {
            id: i as u64,
            file_name,
            path,
            width: spec.width,
            height: spec.height,
            annotations: if labeled { boxes } else { Vec::new() },
        });
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        domain,
        labeled,
        class_names: spec.class_names(),
        images,
    };
    manifest.write(out_dir)?;
    log::info!("wrote {count} {domain} images to {}", out_dir.display());
    Ok(manifest)
}

fn parse_err(record: impl Into<String>, detail: impl Into<String>) -> DataError {
    DataError::Parse {
        record: record.into(),
        detail: detail.into(),
    }
}

fn field<'a>(obj: &'a Value, key: &str, record: &str) -> Result<&'a Value, DataError> {
    obj.get(key).ok_or_else(|| parse_err(record, format!("missing key {key:?}")))
}

fn as_u64(v: &Value, key: &str, record: &str) -> Result<u64, DataError> {
    field(v, key, record)?
        .as_u64()
        .ok_or_else(|| parse_err(record, format!("{key:?} must be a non-negative integer")))
}

fn array<'a>(root: &'a Value, key: &str) -> Result<&'a Vec<Value>, DataError> {
    field(root, key, "manifest")?
        .as_array()
        .ok_or_else(|| parse_err("manifest", format!("{key:?} must be an array")))
}

/// Reads a COCO-style manifest. Boxes become corner form and category ids are
/// remapped to `0..C` in ascending id order.
pub fn load_coco(manifest_path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    parse_coco(&root, base)
}

pub fn parse_coco(root: &Value, base: &Path) -> Result<DatasetManifest, DataError> {
    let raw_images = array(root, "images")?;
    let raw_annotations = array(root, "annotations")?;
    let raw_categories = array(root, "categories")?;

    let mut categories = BTreeMap::new();
    for (i, c) in raw_categories.iter().enumerate() {
        let rec = format!("categories[{i}]");
        let id = as_u64(c, "id", &rec)?;
        let name = field(c, "name", &rec)?.as_str().ok_or_else(|| parse_err(&rec, "\"name\" must be a string"))?;
        if categories.insert(id, name.to_string()).is_some() {
            return Err(parse_err(rec, format!("duplicate category id {id}")));
        }
    }
    let dense: BTreeMap<u64, usize> = categories.keys().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut images = Vec::with_capacity(raw_images.len());
    let mut position = BTreeMap::new();
    for (i, im) in raw_images.iter().enumerate() {
        let rec = format!("images[{i}]");
        let id = as_u64(im, "id", &rec)?;
        if position.insert(id, images.len()).is_some() {
            return Err(DataError::DuplicateImageId(id));
        }
        let file_name = field(im, "file_name", &rec)?
            .as_str()
            .ok_or_else(|| parse_err(&rec, "\"file_name\" must be a string"))?
            .to_string();
        images.push(ImageRecord {
            id,
            path: base.join(&file_name),
            file_name,
            width: as_u64(im, "width", &rec)? as usize,
            height: as_u64(im, "height", &rec)? as usize,
            annotations: Vec::new(),
        });
    }

    for (i, an) in raw_annotations.iter().enumerate() {
        let rec = format!("annotations[{i}]");
        let image_id = as_u64(an, "image_id", &rec)?;
        let slot = *position.get(&image_id).ok_or_else(|| parse_err(&rec, format!("unknown image_id {image_id}")))?;
        let cat = as_u64(an, "category_id", &rec)?;
        let class_id = *dense.get(&cat).ok_or_else(|| parse_err(&rec, format!("unknown category_id {cat}")))?;
        let bbox: Vec<f64> = field(an, "bbox", &rec)?
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if bbox.len() != 4 {
            return Err(parse_err(rec, "\"bbox\" must be four numbers [x, y, width, height]"));
        }
        let [x, y, w, h] = [bbox[0], bbox[1], bbox[2], bbox[3]];
        if !(w > 0.0 && h > 0.0) {
            return Err(parse_err(rec, format!("malformed bbox: width {w} and height {h} must be positive")));
        }
        images[slot].annotations.push(BoxAnnotation::new(x, y, x + w, y + h, class_id));
    }

    let info = root.get("info");
    let domain = match info.and_then(|i| i.get("domain")).and_then(Value::as_str) {
        Some(d) => d.parse().map_err(|e: String| parse_err("info", e))?,
        None => Domain::Source,
    };
    let labeled = info
        .and_then(|i| i.get("labeled"))
        .and_then(Value::as_bool)
        .unwrap_or(!raw_annotations.is_empty());
    let split = info.and_then(|i| i.get("split")).and_then(Value::as_str).unwrap_or("").to_string();
    Ok(DatasetManifest {
        split,
        domain,
        labeled,
        class_names: categories.into_values().collect(),
        images,
    })
}

/// Checks that every referenced image exists and every class id is in range.
pub fn verify_manifest(manifest: &DatasetManifest) -> Result<(), DataError> {
    let c = manifest.num_classes();
    for (i, r) in manifest.images.iter().enumerate() {
        if !r.path.is_file() {
            return Err(parse_err(format!("images[{i}]"), format!("missing file {}", r.path.display())));
        }
        if let Some(a) = r.annotations.iter().find(|a| a.class_id >= c) {
            return Err(parse_err(format!("images[{i}]"), format!("class id {} out of range for {c} classes", a.class_id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Rotate by a uniformly drawn multiple of 90°.
    pub rot90: bool,
    /// Maximum translation as a fraction of the image side.
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            rot90: false,
            max_translate: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            brightness: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn standard() -> Self {
        Self {
            hflip_prob: 0.5,
            rot90: true,
            max_translate: 0.1,
            scale_min: 0.85,
            scale_max: 1.15,
            brightness: 0.1,
            noise_sigma: 0.02,
        }
    }
}

pub fn hflip(img: &Image, boxes: &[BoxAnnotation]) -> (Image, Vec<BoxAnnotation>) {
    let mut out = img.clone();
    let w = img.width;
    for c in 0..Image::CHANNELS {
        for y in 0..img.height {
            for x in 0..w {
                let i = out.idx(c, y, x);
                out.data[i] = img.get(c, y, w - 1 - x);
            }
        }
    }
    let wf = w as f64;
    let boxes = boxes
        .iter()
        .map(|a| BoxAnnotation {
            bbox: BBox::new(wf - a.bbox.x2, a.bbox.y1, wf - a.bbox.x1, a.bbox.y2),
            class_id: a.class_id,
        })
        .collect();
    (out, boxes)
}

/// Rotates counter-clockwise by `k · 90°`. Odd `k` swaps width and height.
pub fn rot90(img: &Image, boxes: &[BoxAnnotation], k: usize) -> (Image, Vec<BoxAnnotation>) {
    let mut img = img.clone();
    let mut boxes = boxes.to_vec();
    for _ in 0..k % 4 {
        let (w, h) = (img.width, img.height);
        let mut out = Image::filled(h, w, 0.0);
        // source (x, y) lands at (y, w − 1 − x)
        for c in 0..Image::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let i = out.idx(c, w - 1 - x, y);
                    out.data[i] = img.get(c, y, x);
                }
            }
        }
        let wf = w as f64;
        for a in &mut boxes {
            let b = a.bbox;
            a.bbox = BBox::new(b.y1, wf - b.x2, b.y2, wf - b.x1);
        }
        img = out;
    }
    (img, boxes)
}

fn scale_translate(img: &Image, boxes: &[BoxAnnotation], scale: f64, tx: f64, ty: f64) -> (Image, Vec<BoxAnnotation>) {
    let (w, h) = (img.width, img.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Image::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let sx = ((x as f64 + 0.5 - cx - tx) / scale + cx).floor().clamp(0.0, w as f64 - 1.0) as usize;
            let sy = ((y as f64 + 0.5 - cy - ty) / scale + cy).floor().clamp(0.0, h as f64 - 1.0) as usize;
            for c in 0..Image::CHANNELS {
                let i = out.idx(c, y, x);
                out.data[i] = img.get(c, sy, sx);
            }
        }
    }
    let map = |v: f64, c: f64, t: f64| (v - c) * scale + c + t;
    let boxes = boxes
        .iter()
        .map(|a| BoxAnnotation {
            bbox: BBox::new(map(a.bbox.x1, cx, tx), map(a.bbox.y1, cy, ty), map(a.bbox.x2, cx, tx), map(a.bbox.y2, cy, ty)),
            class_id: a.class_id,
        })
        .collect();
    (out, boxes)
}

/// Random photometric and geometric augmentation. Boxes follow the image, are
/// clipped to it, and are dropped once either side is under [`MIN_BOX_EXTENT`].
pub fn augment(img: &Image, boxes: &[BoxAnnotation], cfg: &AugmentConfig, seed: u64) -> (Image, Vec<BoxAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = img.clone();
    let mut boxes = boxes.to_vec();
    if cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob.min(1.0)) {
        (img, boxes) = hflip(&img, &boxes);
    }
    if cfg.rot90 {
        let k = rng.gen_range(0..4);
        (img, boxes) = rot90(&img, &boxes, k);
    }
    let scale = if cfg.scale_max > cfg.scale_min { rng.gen_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let (tx, ty) = if cfg.max_translate > 0.0 {
        let m = cfg.max_translate;
        (rng.gen_range(-m..=m) * img.width as f64, rng.gen_range(-m..=m) * img.height as f64)
    } else {
        (0.0, 0.0)
    };
    if scale != 1.0 || tx != 0.0 || ty != 0.0 {
        (img, boxes) = scale_translate(&img, &boxes, scale, tx, ty);
    }
    if cfg.brightness > 0.0 {
        let b = rng.gen_range(-cfg.brightness..=cfg.brightness) as f32;
        img.data.iter_mut().for_each(|v| *v = (*v + b).clamp(0.0, 1.0));
    }
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma as f32).expect("finite sigma");
        img.data.iter_mut().for_each(|v| *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    boxes = boxes
        .into_iter()
        .map(|a| BoxAnnotation {
            bbox: a.bbox.clip(w, h),
            class_id: a.class_id,
        })
        .filter(|a| a.bbox.width() >= MIN_BOX_EXTENT && a.bbox.height() >= MIN_BOX_EXTENT)
        .collect();
    (img, boxes)
}

/// Image indices of one optimisation step. `target` is empty when no target
/// stream is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedStep {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

fn shuffled(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Batches of the longer stream, ending in a possibly short batch; the shorter
/// stream cycles through its own shuffled order in full batches.
fn stream_batches(order: &[usize], batch: usize, steps: usize, longest: bool) -> Vec<Vec<usize>> {
    if order.is_empty() {
        return vec![Vec::new(); steps];
    }
    if longest {
        return order.chunks(batch).map(<[usize]>::to_vec).collect();
    }
    order.iter().copied().cycle().take(steps * batch).collect::<Vec<_>>().chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Deterministic per-epoch schedule pairing one source batch with one target batch.
///
/// The epoch has `max(⌈S/b_s⌉, ⌈T/b_t⌉)` steps; pass `target_len = 0` for
/// source-only training.
pub fn epoch_plan(source_len: usize, target_len: usize, source_batch: usize, target_batch: usize, seed: u64, epoch: usize) -> Result<Vec<PairedStep>, DataError> {
    if source_batch == 0 || target_batch == 0 {
        return Err(DataError::BatchSize);
    }
    if source_len == 0 {
        return Err(DataError::Empty("source".into()));
    }
    let src_steps = source_len.div_ceil(source_batch);
    let tgt_steps = target_len.div_ceil(target_batch);
    let steps = src_steps.max(tgt_steps);
    let src = stream_batches(&shuffled(source_len, seed, 2 * epoch as u64), source_batch, steps, src_steps >= tgt_steps);
    let tgt = stream_batches(&shuffled(target_len, seed, 2 * epoch as u64 + 1), target_batch, steps, tgt_steps > src_steps);
    Ok(src.into_iter().zip(tgt).map(|(source, target)| PairedStep { source, target }).collect())
}

/// Loads every image of a manifest.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<Image>, DataError> {
    manifest.images.iter().map(|r| Image::load_png(&r.path)).collect()
}

/// Stacks equally sized images into an `N×3×H×W` tensor.
pub fn stack_images<T: Scalar>(images: &[Image]) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * Image::CHANNELS * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "images in a batch must share one size");
        data.extend(img.data.iter().map(|&v| T::from_f32(v).expect("finite pixel")));
    }
    Tensor::new(vec![images.len(), Image::CHANNELS, h, w], data).expect("length matches shape")
}

/// Distinct class ids present in the annotations of a manifest.
pub fn classes_present(manifest: &DatasetManifest) -> HashSet<usize> {
    manifest.images.iter().flat_map(|r| r.annotations.iter().map(|a| a.class_id)).collect()
}

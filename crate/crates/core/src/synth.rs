//! Synthetic shapes dataset, the JSON manifest that indexes it on disk, and
//! image-derived class prototypes.
//!
//! Class 0 is always the background. Every other class is a flat-coloured
//! shape; images hold one to three of them, never overlapping, over a softly
//! textured background.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::recognizer::ClassEmbeddings;
use crate::tensor::{Float, Tape, Tensor};

pub const IGNORE_LABEL: u8 = 255;
pub const NOISE_STD: f64 = 0.05;
pub const PLACEMENT_ATTEMPTS: usize = 100;
/// Peak deviation of the background texture from its base colour.
pub const TEXTURE_AMPLITUDE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Background,
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    /// Base RGB colour in `[0, 1]`.
    pub color: [f64; 3],
}

impl ClassSpec {
    pub fn new(name: &str, shape: Shape, color: [f64; 3]) -> Self {
        ClassSpec {
            name: name.to_string(),
            shape,
            color,
        }
    }
}

/// Background plus a red disk, a green square and a blue triangle.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec::new("background", Shape::Background, [0.5, 0.5, 0.5]),
        ClassSpec::new("disk", Shape::Disk, [0.85, 0.2, 0.2]),
        ClassSpec::new("square", Shape::Square, [0.2, 0.8, 0.25]),
        ClassSpec::new("triangle", Shape::Triangle, [0.2, 0.3, 0.9]),
    ]
}

fn validate_classes(classes: &[ClassSpec]) -> Result<()> {
    match classes.first() {
        Some(c) if c.shape == Shape::Background => {}
        _ => return Err(Error::config("class 0 must be the background")),
    }
    if classes.len() > IGNORE_LABEL as usize {
        return Err(Error::config(format!(
            "{} classes do not fit in 8-bit labels",
            classes.len()
        )));
    }
    for (i, c) in classes.iter().enumerate() {
        if i > 0 && c.shape == Shape::Background {
            return Err(Error::config(format!("class {i} ({}) is a second background", c.name)));
        }
        if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("class {} has a colour outside [0, 1]", c.name)));
        }
    }
    Ok(())
}

/// One placed shape: centre and half-extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Placement {
    /// Whether the centre of pixel `(x, y)` lies inside the shape.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5 - self.cx;
        let py = y as f64 + 0.5 - self.cy;
        match self.shape {
            Shape::Background => false,
            Shape::Disk => px * px + py * py <= self.r * self.r,
            Shape::Square => px.abs() <= self.r && py.abs() <= self.r,
            // Apex up, base along y = +r.
            Shape::Triangle => py <= self.r && 2.0 * px.abs() <= py + self.r,
        }
    }

    pub fn rasterize(&self, side: usize) -> Vec<bool> {
        (0..side * side).map(|i| self.contains(i % side, i / side)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub side: usize,
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: (usize, usize),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(16) {
            return Err(Error::config(format!(
                "image side {} is not a positive multiple of 16",
                self.side
            )));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "shapes per image must be a range 1 <= lo <= hi, got {lo}..={hi}"
            )));
        }
        validate_classes(&self.classes)
    }
}

/// One generated image with its exact label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: GrayImage,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn noise(rng: &mut impl Rng) -> f64 {
    let n = Normal::new(0.0, NOISE_STD).expect("valid std");
    n.sample(rng).clamp(-3.0 * NOISE_STD, 3.0 * NOISE_STD)
}

fn background(rng: &mut impl Rng, side: usize, base: [f64; 3]) -> Vec<[f64; 3]> {
    let fx = rng.random_range(1..=3) as f64;
    let fy = rng.random_range(1..=3) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let w = std::f64::consts::TAU / side as f64;
    (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            let t = TEXTURE_AMPLITUDE * (w * (fx * x + fy * y) + phase).sin();
            [base[0] + t, base[1] + t, base[2] + t]
        })
        .collect()
}

/// Paints `placements` (with their class indices) over a textured background
/// and adds clamped per-channel noise.
pub fn render(rng: &mut impl Rng, side: usize, classes: &[ClassSpec], placements: &[(usize, Placement)]) -> Sample {
    let mut colors = background(rng, side, classes[0].color);
    let mut labels = vec![0u8; side * side];
    for &(class, p) in placements {
        for (i, inside) in p.rasterize(side).into_iter().enumerate() {
            if inside {
                colors[i] = classes[class].color;
                labels[i] = class as u8;
            }
        }
    }
    let mut data = Vec::with_capacity(side * side * 3);
    for c in &colors {
        for &v in c {
            data.push(to_byte(v + noise(rng)));
        }
    }
    Sample {
        image: RgbImage {
            width: side,
            height: side,
            data,
        },
        label: GrayImage {
            width: side,
            height: side,
            data: labels,
        },
    }
}

/// Independent stream per image so any single image can be regenerated alone.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn place(rng: &mut impl Rng, side: usize, shape: Shape, taken: &[bool]) -> Option<Placement> {
    let s = side as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = rng.random_range(s / 8.0..=s / 4.0);
        let cx = rng.random_range(r..=s - r);
        let cy = rng.random_range(r..=s - r);
        let p = Placement { shape, cx, cy, r };
        let mask = p.rasterize(side);
        if mask.iter().any(|&m| m) && !mask.iter().zip(taken).any(|(&a, &b)| a && b) {
            return Some(p);
        }
    }
    None
}

/// Image `index` of the dataset described by `config`.
pub fn generate_image(config: &SynthConfig, index: u64) -> Result<Sample> {
    let mut rng = image_rng(config.seed, index);
    let side = config.side;
    let mut placements = Vec::new();
    if config.classes.len() > 1 {
        let (lo, hi) = config.shapes_per_image;
        let k = rng.random_range(lo..=hi);
        let mut taken = vec![false; side * side];
        for _ in 0..k {
            let class = rng.random_range(1..config.classes.len());
            let p = place(&mut rng, side, config.classes[class].shape, &taken).ok_or_else(|| {
                Error::Generation(format!(
                    "image {index}: no free spot for a {} after {PLACEMENT_ATTEMPTS} attempts",
                    config.classes[class].name
                ))
            })?;
            for (t, m) in taken.iter_mut().zip(p.rasterize(side)) {
                *t |= m;
            }
            placements.push((class, p));
        }
    }
    Ok(render(&mut rng, side, &config.classes, &placements))
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.n_images as u64).map(|i| generate_image(config, i)).collect()
}

/// Single centred shape of `class`; later samples jitter position and size.
pub fn canonical_image(classes: &[ClassSpec], class: usize, side: usize, sample: usize, rng: &mut impl Rng) -> Sample {
    let s = side as f64;
    let placements = match classes[class].shape {
        Shape::Background => vec![],
        shape => {
            let (dx, dy, dr) = if sample == 0 {
                (0.0, 0.0, 0.0)
            } else {
                (
                    rng.random_range(-s / 16.0..=s / 16.0),
                    rng.random_range(-s / 16.0..=s / 16.0),
                    rng.random_range(-s / 16.0..=s / 16.0),
                )
            };
            vec![(
                class,
                Placement {
                    shape,
                    cx: s / 2.0 + dx,
                    cy: s / 2.0 + dy,
                    r: s * 0.3 + dr,
                },
            )]
        }
    };
    render(rng, side, classes, &placements)
}

/// Class bank built from the frozen backbone: mean projected `[CLS]`
/// embedding of `samples` canonical renderings per class, L2-normalised.
/// Every class replays the same random stream, so classes differ only by
/// their shape and colour.
pub fn generate_prototypes<T: Float>(
    backbone: &Backbone<T>,
    classes: &[ClassSpec],
    input_side: usize,
    samples: usize,
    seed: u64,
) -> Result<ClassEmbeddings<T>> {
    validate_classes(classes)?;
    if samples == 0 {
        return Err(Error::usage("prototypes need at least one sample per class"));
    }
    let d = backbone.config.embed_dim;
    let mut bank = Vec::with_capacity(classes.len() * d);
    for class in 0..classes.len() {
        let mut rng = image_rng(seed, 0);
        let mut acc = vec![0.0f64; d];
        for k in 0..samples {
            let img = canonical_image(classes, class, input_side, k, &mut rng);
            let tape = Tape::new();
            let e = backbone.encode_image(&tape, &img.image.to_tensor::<T>(input_side)?)?;
            let v: Vec<f64> = e.value().iter().map(|x| x.as_f64()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x / norm);
        }
        bank.extend(acc);
    }
    ClassEmbeddings::new(
        Tensor::from_f64([classes.len(), d], &bank)?,
        classes.iter().map(|c| c.name.clone()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// On-disk index of a dataset; item paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<ClassSpec>,
    pub ignore_label: u8,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Writes `samples` as `images/{stem}_NNNN.ppm` and
    /// `labels/{stem}_NNNN.pgm` under `dir`, plus the manifest at `dir/name`.
    pub fn write(dir: &Path, name: &str, classes: &[ClassSpec], samples: &[Sample]) -> Result<Self> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let stem = name.trim_end_matches(".json");
        let mut items = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let item = ManifestItem {
                image: PathBuf::from(format!("images/{stem}_{i:04}.ppm")),
                label: PathBuf::from(format!("labels/{stem}_{i:04}.pgm")),
            };
            s.image.save(dir.join(&item.image))?;
            s.label.save(dir.join(&item.label))?;
            items.push(item);
        }
        let manifest = DatasetManifest {
            classes: classes.to_vec(),
            ignore_label: IGNORE_LABEL,
            items,
        };
        let path = dir.join(name);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        validate_classes(&m.classes)?;
        Ok(m)
    }

    /// Reads every pair, checking sizes and label range.
    pub fn read_samples(&self, manifest_path: &Path) -> Result<Vec<Sample>> {
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let c = self.classes.len();
        self.items
            .iter()
            .map(|item| {
                let image = RgbImage::load(root.join(&item.image))?;
                let label = GrayImage::load(root.join(&item.label))?;
                if (image.width, image.height) != (label.width, label.height) {
                    return Err(Error::dim(format!(
                        "{} is {}x{} but its label map is {}x{}",
                        item.image.display(),
                        image.width,
                        image.height,
                        label.width,
                        label.height
                    )));
                }
                if let Some(&bad) = label.data.iter().find(|&&v| v != self.ignore_label && v as usize >= c) {
                    return Err(Error::usage(format!(
                        "{} holds label {bad} but only {c} classes exist",
                        item.label.display()
                    )));
                }
                Ok(Sample { image, label })
            })
            .collect()
    }
}

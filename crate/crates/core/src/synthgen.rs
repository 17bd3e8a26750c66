//! Procedural sprite renderer and biased ("unfair") dataset sampler.
//!
//! Latents follow the sprite benchmark layout: three shapes, six scales in
//! `[0.5, 1.0]`, forty orientations in `[0, 2pi)` and a 32x32 position grid.
//! The label is the shape; the spurious attribute is the horizontal segment
//! (left / middle / right third) the sprite sits in.

use std::f64::consts::PI;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::midt::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const N_SCALES: u8 = 6;
pub const N_ORIENTATIONS: u8 = 40;
pub const N_POSITIONS: u8 = 32;
pub const N_CLASSES: usize = 3;
pub const N_GROUPS: usize = 9;

/// Pixel coordinate of the sprite center for position 0; position 1 maps to
/// `IMAGE_SIZE - POSITION_MARGIN`.
const POSITION_MARGIN: f64 = 16.0;
/// Half-width in pixels of a unit-scale sprite.
const BASE_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Oval,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Oval, Shape::Heart];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("shape index {i} out of range")))
    }

    /// The segment the shortcut associates with this shape.
    pub fn canonical_segment(self) -> Segment {
        match self {
            Shape::Square => Segment::Left,
            Shape::Oval => Segment::Middle,
            Shape::Heart => Segment::Right,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Oval => "oval",
            Shape::Heart => "heart",
        }
    }
}

/// Horizontal third of the image; the spurious attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Left,
    Middle,
    Right,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Left, Segment::Middle, Segment::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("segment index {i} out of range")))
    }

    /// Inclusive range of `pos_x_idx` values belonging to this segment.
    pub fn position_range(self) -> (u8, u8) {
        match self {
            Segment::Left => (0, 10),
            Segment::Middle => (11, 20),
            Segment::Right => (21, 31),
        }
    }
}

/// Group identity `(label, spurious attribute)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub label: usize,
    pub spurious: Segment,
}

impl Group {
    pub fn new(label: usize, spurious: Segment) -> Self {
        Self { label, spurious }
    }

    /// Dense index `3 * label + segment`.
    pub fn index(self) -> usize {
        self.label * 3 + self.spurious.index()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= N_GROUPS {
            return Err(invalid(format!("group index {i} out of range")));
        }
        Ok(Self::new(i / 3, Segment::from_index(i % 3)?))
    }

    /// Minority groups break the shortcut: the segment is not the one the
    /// shortcut associates with the label.
    pub fn is_minority(self) -> bool {
        match Shape::from_index(self.label) {
            Ok(shape) => shape.canonical_segment() != self.spurious,
            Err(_) => true,
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(y={}, s={:?})", self.label, self.spurious)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentPoint {
    pub shape: Shape,
    pub scale_idx: u8,
    pub orientation_idx: u8,
    pub pos_x_idx: u8,
    pub pos_y_idx: u8,
}

impl LatentPoint {
    pub fn new(shape: Shape, scale_idx: u8, orientation_idx: u8, pos_x_idx: u8, pos_y_idx: u8) -> Result<Self> {
        let p = Self { shape, scale_idx, orientation_idx, pos_x_idx, pos_y_idx };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_idx >= N_SCALES
            || self.orientation_idx >= N_ORIENTATIONS
            || self.pos_x_idx >= N_POSITIONS
            || self.pos_y_idx >= N_POSITIONS
        {
            return Err(invalid(format!("latent index out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        0.5 + 0.5 * self.scale_idx as f64 / (N_SCALES - 1) as f64
    }

    pub fn orientation(&self) -> f64 {
        2.0 * PI * self.orientation_idx as f64 / N_ORIENTATIONS as f64
    }

    pub fn pos_x(&self) -> f64 {
        self.pos_x_idx as f64 / (N_POSITIONS - 1) as f64
    }

    pub fn pos_y(&self) -> f64 {
        self.pos_y_idx as f64 / (N_POSITIONS - 1) as f64
    }

    fn sample_uniform<R: Rng>(rng: &mut R) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..3)],
            scale_idx: rng.random_range(0..N_SCALES),
            orientation_idx: rng.random_range(0..N_ORIENTATIONS),
            pos_x_idx: rng.random_range(0..N_POSITIONS),
            pos_y_idx: rng.random_range(0..N_POSITIONS),
        }
    }

    fn sample_shortcut<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape::ALL[rng.random_range(0..3)];
        let (lo, hi) = shape.canonical_segment().position_range();
        Self {
            shape,
            scale_idx: rng.random_range(0..N_SCALES),
            orientation_idx: rng.random_range(0..N_ORIENTATIONS),
            pos_x_idx: rng.random_range(lo..=hi),
            pos_y_idx: rng.random_range(0..N_POSITIONS),
        }
    }
}

/// Binary 64x64 image, one `u64` bitmask per row (bit `x` = column `x`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SpriteImage {
    rows: [u64; IMAGE_SIZE],
}

impl std::fmt::Debug for SpriteImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SpriteImage({} px)", self.foreground_count())
    }
}

impl SpriteImage {
    pub fn blank() -> Self {
        Self { rows: [0; IMAGE_SIZE] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        (self.rows[y] >> x) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        if on {
            self.rows[y] |= 1 << x;
        } else {
            self.rows[y] &= !(1 << x);
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.rows.iter().map(|r| r.count_ones() as usize).sum()
    }

    /// Mean `(x, y)` pixel index of the foreground.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (n > 0.0).then(|| (sx / n, sy / n))
    }

    /// Row-major 0/1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                out.push(self.get(x, y) as u8);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", IMAGE_SIZE * IMAGE_SIZE),
                actual: format!("{} pixels", bytes.len()),
            });
        }
        let mut img = Self::blank();
        for (i, &b) in bytes.iter().enumerate() {
            if b > 1 {
                return Err(invalid(format!("pixel value {b} is not binary")));
            }
            img.set(i % IMAGE_SIZE, i / IMAGE_SIZE, b == 1);
        }
        Ok(img)
    }

    /// Writes pixel intensities into `out` at `side x side` resolution.
    /// `side` must be 64 or 32; the 32 mode averages 2x2 blocks.
    pub fn write_pixels<T: num_traits::Float>(&self, side: usize, out: &mut [T]) {
        debug_assert_eq!(out.len(), side * side);
        match side {
            IMAGE_SIZE => {
                for y in 0..IMAGE_SIZE {
                    let row = self.rows[y];
                    for x in 0..IMAGE_SIZE {
                        out[y * IMAGE_SIZE + x] = if (row >> x) & 1 == 1 { T::one() } else { T::zero() };
                    }
                }
            }
            32 => {
                let quarter = T::from(0.25).unwrap();
                for y in 0..32 {
                    for x in 0..32 {
                        let n = self.get(2 * x, 2 * y) as u8
                            + self.get(2 * x + 1, 2 * y) as u8
                            + self.get(2 * x, 2 * y + 1) as u8
                            + self.get(2 * x + 1, 2 * y + 1) as u8;
                        out[y * 32 + x] = T::from(n).unwrap() * quarter;
                    }
                }
            }
            other => panic!("unsupported input side {other}"),
        }
    }

    /// Encodes the image as an 8-bit grayscale PNG.
    pub fn to_png(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.to_bytes().into_iter().map(|b| b * 255).collect();
        encode_gray_png(IMAGE_SIZE as u32, IMAGE_SIZE as u32, &pixels, &[])
    }
}

/// Encodes 8-bit grayscale pixels as PNG with optional tEXt metadata.
pub fn encode_gray_png(width: u32, height: u32, pixels: &[u8], text: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.clone(), v.clone()).expect("valid tEXt chunk");
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(pixels).expect("in-memory PNG data");
    }
    out
}

fn inside_shape(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        // 2:3 axis ratio
        Shape::Oval => u * u + (v / (2.0 / 3.0)).powi(2) <= 1.0,
        Shape::Heart => {
            // Implicit heart curve scaled so its lobes fit the unit box.
            let (x, y) = (u * 1.2, -v * 1.2 + 0.1);
            let r = x * x + y * y - 1.0;
            r * r * r - x * x * y * y * y <= 0.0
        }
    }
}

/// Renders a sprite: white shape on black, centered at the latent position.
pub fn render_sprite(latents: &LatentPoint) -> SpriteImage {
    let half = latents.scale() * BASE_HALF_WIDTH;
    let span = IMAGE_SIZE as f64 - 2.0 * POSITION_MARGIN;
    let cx = POSITION_MARGIN + latents.pos_x() * span;
    let cy = POSITION_MARGIN + latents.pos_y() * span;
    let (sin, cos) = latents.orientation().sin_cos();

    let mut img = SpriteImage::blank();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (cos * dx + sin * dy) / half;
            let v = (-sin * dx + cos * dy) / half;
            if inside_shape(latents.shape, u, v) {
                img.set(x, y, true);
            }
        }
    }
    img
}

/// Segment of a horizontal position index: left iff `idx/31 < 1/3`, middle
/// iff `idx/31` is in `[1/3, 2/3)`, right otherwise.
pub fn spurious_attribute_of(pos_x_idx: u8) -> Result<Segment> {
    if pos_x_idx >= N_POSITIONS {
        return Err(invalid(format!("pos_x_idx {pos_x_idx} out of range 0..=31")));
    }
    // Integer form of the thresholds avoids rounding at the boundaries.
    let scaled = 3 * pos_x_idx as u32;
    let denom = (N_POSITIONS - 1) as u32;
    Ok(if scaled < denom {
        Segment::Left
    } else if scaled < 2 * denom {
        Segment::Middle
    } else {
        Segment::Right
    })
}

/// Expected fraction of samples obeying the shortcut at bias level `b`.
pub fn effective_shortcut_fraction(b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&b) {
        return Err(invalid(format!("bias level {b} outside [0, 1]")));
    }
    Ok(b + (1.0 - b) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub bias: f64,
    pub n_samples: usize,
    pub rng_seed: u64,
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(invalid(format!("bias level {} outside [0, 1]", self.bias)));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples must be positive"));
        }
        Ok(())
    }

    /// Number of samples drawn from the shortcut-obeying stratum.
    pub fn n_biased(&self) -> usize {
        (self.bias * self.n_samples as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub latents: LatentPoint,
    pub image: SpriteImage,
    pub label: usize,
    pub spurious: Segment,
}

impl LabeledSample {
    pub fn new(id: u64, latents: LatentPoint) -> Self {
        let spurious = spurious_attribute_of(latents.pos_x_idx).expect("validated latents");
        Self {
            id,
            image: render_sprite(&latents),
            label: latents.shape.index(),
            latents,
            spurious,
        }
    }

    pub fn group(&self) -> Group {
        Group::new(self.label, self.spurious)
    }

    pub fn obeys_shortcut(&self) -> bool {
        !self.group().is_minority()
    }
}

/// One row of the JSON-lines dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub shape: Shape,
    pub scale_idx: u8,
    pub orientation_idx: u8,
    pub pos_x_idx: u8,
    pub pos_y_idx: u8,
    pub label: usize,
    pub spurious: Segment,
    pub group: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.samples.iter().map(LabeledSample::group).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let index = self.index_by_id();
        let samples = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.samples[i].clone())
                    .ok_or_else(|| invalid(format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn index_by_id(&self) -> std::collections::HashMap<u64, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    pub fn shortcut_fraction(&self) -> f64 {
        let n = self.samples.iter().filter(|s| s.obeys_shortcut()).count();
        n as f64 / self.samples.len().max(1) as f64
    }

    pub fn manifest_records(&self) -> Vec<ManifestRecord> {
        self.samples
            .iter()
            .map(|s| ManifestRecord {
                id: s.id,
                shape: s.latents.shape,
                scale_idx: s.latents.scale_idx,
                orientation_idx: s.latents.orientation_idx,
                pos_x_idx: s.latents.pos_x_idx,
                pos_y_idx: s.latents.pos_y_idx,
                label: s.label,
                spurious: s.spurious,
                group: s.group().index(),
            })
            .collect()
    }

    /// Rebuilds a dataset from manifest rows, re-rendering images from latents.
    pub fn from_manifest(records: &[ManifestRecord]) -> Result<Dataset> {
        let samples = records
            .iter()
            .map(|r| {
                let latents = LatentPoint::new(r.shape, r.scale_idx, r.orientation_idx, r.pos_x_idx, r.pos_y_idx)?;
                let mut s = LabeledSample::new(r.id, latents);
                if r.label >= N_CLASSES {
                    return Err(invalid(format!("sample {}: label {} out of range", r.id, r.label)));
                }
                s.label = r.label;
                if s.spurious != r.spurious || s.group().index() != r.group {
                    return Err(invalid(format!("sample {}: inconsistent spurious/group fields", r.id)));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    /// Writes the manifest as JSON lines.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_jsonl()?)?;
        Ok(())
    }

    pub fn manifest_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.manifest_records() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
        Self::parse_manifest(&std::fs::read_to_string(path)?)
    }

    /// Parses JSON-lines manifest text; blank lines are skipped.
    pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Malformed { line: i + 1, reason: e.to_string() })
            })
            .collect()
    }

    /// All images as a `[n, 64, 64]` u8 tensor.
    pub fn images_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * IMAGE_SIZE * IMAGE_SIZE);
        for s in &self.samples {
            data.extend(s.image.to_bytes());
        }
        Tensor::u8(vec![self.len() as u64, IMAGE_SIZE as u64, IMAGE_SIZE as u64], data)
            .expect("consistent image tensor dims")
    }
}

/// Draws a dataset in which `floor(b * n)` samples obey the shortcut
/// (square-left, oval-middle, heart-right) and the rest are uniform.
///
/// Sample `k` of the generation order draws its latents from its own ChaCha
/// stream, so the result does not depend on generation order. The final
/// order is a seeded shuffle and ids are assigned after shuffling.
pub fn sample_unfair(cfg: &BiasConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n_biased = cfg.n_biased();
    let mut latents: Vec<LatentPoint> = (0..cfg.n_samples)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(k as u64);
            if k < n_biased {
                LatentPoint::sample_shortcut(&mut rng)
            } else {
                LatentPoint::sample_uniform(&mut rng)
            }
        })
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    order_rng.set_stream(u64::MAX);
    latents.shuffle(&mut order_rng);
    let samples = latents
        .into_iter()
        .enumerate()
        .map(|(i, l)| LabeledSample::new(i as u64, l))
        .collect();
    Ok(Dataset { samples })
}

/// Flips the label of a seeded random `fraction` of samples to a different
/// class; returns the sorted flipped ids. Latents keep the true shape.
pub fn inject_label_flips(dataset: &mut Dataset, fraction: f64, seed: u64) -> Result<Vec<u64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let n_flip = (fraction * dataset.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let mut flipped = Vec::with_capacity(n_flip);
    for &i in &idx[..n_flip] {
        let s = &mut dataset.samples[i];
        s.label = (s.label + rng.random_range(1..N_CLASSES)) % N_CLASSES;
        flipped.push(s.id);
    }
    flipped.sort_unstable();
    Ok(flipped)
}

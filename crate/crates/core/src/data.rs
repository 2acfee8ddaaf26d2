//! Procedural factor-based image dataset.
//!
//! Images are rendered deterministically from a tuple of factor values
//! (background hue, object hue, shape, size); the factor indices double as
//! the per-task class labels. Salt-and-pepper corruption is applied once at
//! generation time so a (spec, seed) pair pins the dataset bitwise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::model::TaskSpec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MTLD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid factor spec: {0}")]
    Spec(String),
    #[error("unsupported factor: {0}")]
    UnsupportedFactor(String),
    #[error("split leaves one side empty (ratio {ratio}, {total} samples)")]
    DegenerateSplit { ratio: f64, total: usize },
    #[error("dataset file has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("spec JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The four generative factors an image can vary over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    #[serde(rename = "background-hue")]
    BackgroundHue,
    #[serde(rename = "object-hue")]
    ObjectHue,
    #[serde(rename = "object-shape")]
    ObjectShape,
    #[serde(rename = "object-size")]
    ObjectSize,
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::BackgroundHue => "background-hue",
            FactorKind::ObjectHue => "object-hue",
            FactorKind::ObjectShape => "object-shape",
            FactorKind::ObjectSize => "object-size",
        }
    }
}

/// One varying factor and how many discrete values it takes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub kind: FactorKind,
    pub n_values: usize,
}

/// Generative description of a dataset. Every factor combination appears
/// exactly `samples_per_combination` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    /// (width, height); channels are always 3.
    pub image_size: (usize, usize),
    pub factors: Vec<Factor>,
    pub samples_per_combination: usize,
}

impl FactorSpec {
    /// Default benchmark: object hue x shape x size at 16x16, 20 samples
    /// per combination (K = 1920).
    pub fn default_benchmark() -> Self {
        FactorSpec {
            image_size: (16, 16),
            factors: vec![
                Factor {
                    kind: FactorKind::ObjectHue,
                    n_values: 6,
                },
                Factor {
                    kind: FactorKind::ObjectShape,
                    n_values: 4,
                },
                Factor {
                    kind: FactorKind::ObjectSize,
                    n_values: 4,
                },
            ],
            samples_per_combination: 20,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (w, h) = self.image_size;
        if w < 8 || h < 8 {
            return Err(DataError::Spec(format!(
                "image size {w}x{h} is below the 8x8 minimum"
            )));
        }
        if self.factors.is_empty() {
            return Err(DataError::Spec("at least one factor is required".into()));
        }
        if self.samples_per_combination == 0 {
            return Err(DataError::Spec(
                "samples_per_combination must be positive".into(),
            ));
        }
        for f in &self.factors {
            if f.n_values == 0 {
                return Err(DataError::Spec(format!(
                    "factor {} has zero values",
                    f.kind.name()
                )));
            }
            if f.kind == FactorKind::ObjectShape && f.n_values > SHAPES.len() {
                return Err(DataError::UnsupportedFactor(format!(
                    "object-shape supports at most {} values, got {}",
                    SHAPES.len(),
                    f.n_values
                )));
            }
        }
        let mut seen = Vec::new();
        for f in &self.factors {
            if seen.contains(&f.kind) {
                return Err(DataError::Spec(format!(
                    "factor {} appears twice",
                    f.kind.name()
                )));
            }
            seen.push(f.kind);
        }
        Ok(())
    }

    /// Total dataset size `K`.
    pub fn total_samples(&self) -> usize {
        self.samples_per_combination * self.factors.iter().map(|f| f.n_values).product::<usize>()
    }

    pub fn n_tasks(&self) -> usize {
        self.factors.len()
    }

    /// One classification task per factor.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.factors
            .iter()
            .map(|f| TaskSpec {
                name: f.kind.name().to_string(),
                n_classes: f.n_values,
            })
            .collect()
    }

    /// Index of the factor (= label position) with the given task name.
    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.kind.name() == name)
    }
}

/// Pixels in `[0,1]` with one class label per factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: FactorSpec,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

/// Fixed HSV to RGB with S = V = 1.
pub fn hue_to_rgb(hue_degrees: f64) -> [f32; 3] {
    let h = hue_degrees.rem_euclid(360.0) / 60.0;
    let x = (1.0 - (h.rem_euclid(2.0) - 1.0).abs()) as f32;
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

const DEFAULT_BACKGROUND: [f32; 3] = [0.2, 0.2, 0.2];
const DEFAULT_OBJECT: [f32; 3] = [1.0, 1.0, 1.0];
const DEFAULT_SIZE_SCALE: f64 = 0.6;

fn render(spec: &FactorSpec, assignment: &[usize]) -> Tensor {
    let (w, h) = spec.image_size;
    let mut background = DEFAULT_BACKGROUND;
    let mut object = DEFAULT_OBJECT;
    let mut shape = Shape::Square;
    let mut scale = DEFAULT_SIZE_SCALE;
    for (factor, &value) in spec.factors.iter().zip(assignment) {
        match factor.kind {
            FactorKind::BackgroundHue => {
                // Offset by half a step so it never collides with the
                // object hue wheel.
                background = hue_to_rgb(360.0 * (value as f64 + 0.5) / factor.n_values as f64);
            }
            FactorKind::ObjectHue => {
                object = hue_to_rgb(360.0 * value as f64 / factor.n_values as f64);
            }
            FactorKind::ObjectShape => shape = SHAPES[value],
            FactorKind::ObjectSize => {
                scale = 0.3 + 0.6 * (value as f64 + 0.5) / factor.n_values as f64;
            }
        }
    }

    let radius = scale * (w.min(h) as f64 / 2.0 - 0.5);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut data = vec![0.0f32; w * h * 3];
    for x in 0..w {
        for y in 0..h {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match shape {
                Shape::Square => dx.abs() <= radius * 0.8 && dy.abs() <= radius * 0.8,
                Shape::Circle => dx * dx + dy * dy <= radius * radius,
                Shape::Triangle => dy >= -radius && dy <= radius && dx.abs() <= (dy + radius) / 2.0,
                Shape::Cross => {
                    (dx.abs() <= radius * 0.35 && dy.abs() <= radius)
                        || (dy.abs() <= radius * 0.35 && dx.abs() <= radius)
                }
            };
            let color = if inside { &object } else { &background };
            let offset = (x * h + y) * 3;
            data[offset..offset + 3].copy_from_slice(color);
        }
    }
    Tensor::new(vec![w, h, 3], data).expect("render buffer matches shape")
}

/// Render the full dataset in canonical combination order. `seed` is
/// reserved for sample-level variation; the clean render is deterministic.
pub fn generate(spec: &FactorSpec, _seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let counts: Vec<usize> = spec.factors.iter().map(|f| f.n_values).collect();
    let mut images = Vec::with_capacity(spec.total_samples());
    let mut assignment = vec![0usize; counts.len()];
    loop {
        let pixels = render(spec, &assignment);
        let labels: Vec<u16> = assignment.iter().map(|&v| v as u16).collect();
        for _ in 0..spec.samples_per_combination {
            images.push(LabeledImage {
                pixels: pixels.clone(),
                labels: labels.clone(),
            });
        }
        // Odometer increment, last factor fastest.
        let mut pos = counts.len();
        loop {
            if pos == 0 {
                return Ok(Dataset {
                    spec: spec.clone(),
                    images,
                });
            }
            pos -= 1;
            assignment[pos] += 1;
            if assignment[pos] < counts[pos] {
                break;
            }
            assignment[pos] = 0;
        }
    }
}

/// Render and then corrupt every sample with salt-and-pepper noise drawn
/// from a single sub-stream of `seed`.
pub fn generate_noisy(
    spec: &FactorSpec,
    noise_fraction: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut dataset = generate(spec, seed)?;
    if noise_fraction > 0.0 {
        let mut rng = Rng::for_purpose(seed, "salt-pepper");
        for image in &mut dataset.images {
            salt_pepper_in_place(image, noise_fraction, &mut rng);
        }
    }
    Ok(dataset)
}

/// Set exactly `round(fraction * w * h)` pixels to pure black or pure white
/// (all channels), chosen without replacement. Labels are untouched.
pub fn add_salt_pepper(image: &LabeledImage, fraction: f64, seed: u64) -> LabeledImage {
    let mut out = image.clone();
    let mut rng = Rng::seed_from_u64(seed);
    salt_pepper_in_place(&mut out, fraction, &mut rng);
    out
}

fn salt_pepper_in_place(image: &mut LabeledImage, fraction: f64, rng: &mut Rng) {
    assert!(
        (0.0..=1.0).contains(&fraction),
        "noise fraction {fraction} outside [0,1]"
    );
    let shape = image.pixels.shape().to_vec();
    let (w, h) = (shape[0], shape[1]);
    let count = (fraction * (w * h) as f64).round() as usize;
    let chosen = rng.choose_indices(w * h, count);
    let data = image.pixels.data_mut();
    for pixel in chosen {
        let value = if rng.coin() { 1.0 } else { 0.0 };
        let offset = pixel * 3;
        data[offset..offset + 3].fill(value);
    }
}

/// Seeded shuffle then split; the two sides are disjoint and exhaustive.
pub fn split_train_test(
    dataset: &Dataset,
    ratio: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if ratio <= 0.0 || ratio >= 1.0 {
        return Err(DataError::Spec(format!("split ratio {ratio} outside (0,1)")));
    }
    let total = dataset.len();
    let n_train = (ratio * total as f64).round() as usize;
    if n_train == 0 || n_train == total {
        return Err(DataError::DegenerateSplit { ratio, total });
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = Rng::for_purpose(seed, "train-test-split");
    rng.shuffle(&mut order);
    let pick = |indices: &[usize]| Dataset {
        spec: dataset.spec.clone(),
        images: indices.iter().map(|&i| dataset.images[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Stack images into a `[batch, w, h, 3]` tensor plus per-sample labels.
pub fn stack_images(images: &[&LabeledImage]) -> (Tensor, Vec<Vec<u16>>) {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let shape = images[0].pixels.shape().to_vec();
    let per = images[0].pixels.len();
    let mut data = Vec::with_capacity(images.len() * per);
    let mut labels = Vec::with_capacity(images.len());
    for image in images {
        assert_eq!(image.pixels.shape(), shape.as_slice());
        data.extend_from_slice(image.pixels.data());
        labels.push(image.labels.clone());
    }
    let mut batch_shape = vec![images.len()];
    batch_shape.extend_from_slice(&shape);
    (
        Tensor::new(batch_shape, data).expect("stacked batch is shape-consistent"),
        labels,
    )
}

// ── Dataset file container ───────────────────────────────────────────

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let spec = canonical::to_canonical_json(&dataset.spec)?;
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for image in &dataset.images {
        for &label in &image.labels {
            out.extend_from_slice(&label.to_le_bytes());
        }
        for &v in image.pixels.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

fn parse_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], DataError> {
        if *pos + n > bytes.len() {
            return Err(DataError::Corrupt(format!(
                "truncated at offset {} (wanted {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
    if &magic != DATASET_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let spec_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let spec: FactorSpec = serde_json::from_slice(take(&mut pos, spec_len)?)?;
    spec.validate().map_err(|e| DataError::Corrupt(e.to_string()))?;
    let k = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let (w, h) = spec.image_size;
    let n_tasks = spec.n_tasks();
    let pixel_count = w * h * 3;
    let mut images = Vec::with_capacity(k);
    for _ in 0..k {
        let mut labels = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            labels.push(u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()));
        }
        let raw = take(&mut pos, pixel_count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(LabeledImage {
            pixels: Tensor::new(vec![w, h, 3], data)
                .map_err(|e| DataError::Corrupt(e.to_string()))?,
            labels,
        });
    }
    if pos != bytes.len() {
        return Err(DataError::Corrupt(format!(
            "{} trailing bytes after {k} samples",
            bytes.len() - pos
        )));
    }
    Ok(Dataset { spec, images })
}

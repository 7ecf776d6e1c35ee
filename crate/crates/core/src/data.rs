//! Image batches, attack hyperparameters, score records and dataset I/O.
//!
//! Pixels live in `[0, 1]` everywhere. Budgets quoted in 0..255 units are
//! divided by 255 before they get here.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MANIFEST_NAME: &str = "manifest.csv";

/// A batch of RGB images with ground-truth labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Array4<f64>,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        let (b, c, h, w) = pixels.dim();
        if c != CHANNELS {
            return Err(Error::InvalidBatch(format!(
                "expected {CHANNELS} channels, got {c}"
            )));
        }
        if h != w {
            return Err(Error::InvalidBatch(format!(
                "images must be square, got {h}x{w}"
            )));
        }
        if labels.len() != b || ids.len() != b {
            return Err(Error::InvalidBatch(format!(
                "batch of {b} images has {} labels and {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidBatch(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            labels,
            ids,
        })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            pixels: Array4::zeros((0, CHANNELS, size, size)),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    /// Replace the pixels, keeping labels and ids.
    pub fn with_pixels(&self, pixels: Array4<f64>) -> Result<Self> {
        if pixels.dim().0 != self.len() {
            return Err(Error::Shape(format!(
                "replacement has {} images, batch has {}",
                pixels.dim().0,
                self.len()
            )));
        }
        Self::new(pixels, self.labels.clone(), self.ids.clone())
    }

    /// Same as [`with_pixels`](Self::with_pixels) for values the caller has
    /// already clamped into `[0, 1]`.
    pub(crate) fn with_pixels_unchecked(&self, pixels: Array4<f64>) -> Self {
        debug_assert_eq!(pixels.dim().0, self.len());
        Self {
            pixels,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn pixels(&self) -> &Array4<f64> {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Side length of the (square) images.
    pub fn size(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f64> {
        self.pixels.index_axis(Axis(0), index)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// First `n` images (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels.slice(s![..n, .., .., ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
        }
    }

    /// Snap every pixel to the 8-bit grid used by [`save_images`].
    pub fn quantized(&self) -> Self {
        self.with_pixels_unchecked(self.pixels.mapv(|v| f64::from(to_byte(v)) / 255.0))
    }

    /// Largest per-image L∞ distance to `other`.
    pub fn linf_distances(&self, other: &ImageBatch) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.image(i)
                    .iter()
                    .zip(other.image(i).iter())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .collect()
    }
}

/// An additive L∞-bounded perturbation.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta: Array4<f64>,
    pub epsilon: f64,
}

impl Perturbation {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn between(original: &ImageBatch, adversarial: &ImageBatch, epsilon: f64) -> Result<Self> {
        if original.pixels.dim() != adversarial.pixels.dim() {
            return Err(Error::Shape(
                "perturbation endpoints differ in shape".into(),
            ));
        }
        let delta = &adversarial.pixels - &original.pixels;
        let p = Self { delta, epsilon };
        if p.max_abs() > epsilon + Self::TOLERANCE {
            return Err(Error::InvalidBatch(format!(
                "perturbation {} exceeds budget {epsilon}",
                p.max_abs()
            )));
        }
        Ok(p)
    }

    pub fn max_abs(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        batch.with_pixels(&batch.pixels + &self.delta)
    }
}

/// Which competition attack to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Tdmi,
    EpsSearch,
    Perceptual,
    Rdti,
    Rotation,
    Frequency,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Tdmi => "tdmi",
            AttackMethod::EpsSearch => "eps-search",
            AttackMethod::Perceptual => "perceptual",
            AttackMethod::Rdti => "rdti",
            AttackMethod::Rotation => "rotation",
            AttackMethod::Frequency => "frequency",
        }
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tdmi" => AttackMethod::Tdmi,
            "eps-search" => AttackMethod::EpsSearch,
            "perceptual" => AttackMethod::Perceptual,
            "rdti" => AttackMethod::Rdti,
            "rotation" => AttackMethod::Rotation,
            "frequency" => AttackMethod::Frequency,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown attack method {other}"
                )))
            }
        })
    }
}

/// Knobs of the Fourier attention-map attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyParams {
    pub steps: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Gaussian width of the learning-rate field; `None` means `min(M, N) / 4`.
    pub sigma: Option<f64>,
    pub kappa: f64,
}

impl Default for FrequencyParams {
    fn default() -> Self {
        Self {
            steps: 100,
            lr_min: 0.01,
            lr_max: 0.2,
            sigma: None,
            kappa: 0.0,
        }
    }
}

/// Every hyperparameter of one attack run. Distances are in `[0, 1]` pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub momentum_decay: f64,
    pub di_probability: f64,
    pub ti_kernel_size: usize,
    pub refine_count: usize,
    pub lpips_weight: f64,
    pub mse_weight: f64,
    pub validation_threshold: f64,
    pub epsilon_set: Vec<f64>,
    pub rotation_max: f64,
    pub seed: u64,
    /// Resize-and-pad stage of the rotation attack's input transform.
    pub rotation_resize: bool,
    /// Final iterations run at `tail_step_size` (perceptual attack schedule).
    pub tail_iterations: usize,
    pub tail_step_size: f64,
    /// Sobel suppression strength; 0 disables the edge mask.
    pub edge_beta: f64,
    /// Neighbourhood samples for the variance-reduced gradient; 0 disables it.
    pub variance_samples: usize,
    /// Neighbourhood radius as a multiple of `step_size`.
    pub variance_radius_factor: f64,
    /// Random resize/pad plus rectangular excision in the perceptual attack.
    pub input_diversity: bool,
    pub frequency: FrequencyParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::preset(AttackMethod::Tdmi)
    }
}

impl AttackConfig {
    /// Published settings of each team, rescaled to `[0, 1]`.
    pub fn preset(method: AttackMethod) -> Self {
        let base = Self {
            epsilon: 16.0 / 255.0,
            step_size: 1.6 / 255.0,
            iterations: 10,
            momentum_decay: 0.8,
            di_probability: 0.7,
            ti_kernel_size: 5,
            refine_count: 1,
            lpips_weight: 0.0,
            mse_weight: 0.0,
            validation_threshold: 0.01,
            epsilon_set: [4.0, 6.0, 8.0, 12.0, 16.0, 32.0, 64.0]
                .iter()
                .map(|v| v / 255.0)
                .collect(),
            rotation_max: 0.0,
            seed: 0,
            rotation_resize: true,
            tail_iterations: 0,
            tail_step_size: 0.0,
            edge_beta: 0.0,
            variance_samples: 0,
            variance_radius_factor: 1.5,
            input_diversity: false,
            frequency: FrequencyParams::default(),
        };
        match method {
            AttackMethod::Tdmi | AttackMethod::EpsSearch => base,
            AttackMethod::Perceptual => Self {
                epsilon: 16.0 / 255.0,
                step_size: 0.36 / 255.0,
                iterations: 50,
                momentum_decay: 1.0,
                tail_iterations: 5,
                tail_step_size: 0.072 / 255.0,
                lpips_weight: 1.0,
                mse_weight: 1.0,
                edge_beta: 0.3,
                variance_samples: 5,
                input_diversity: true,
                ..base
            },
            AttackMethod::Rdti => Self {
                epsilon: 32.0 / 255.0,
                step_size: 1.0 / 255.0,
                iterations: 40,
                momentum_decay: 0.0,
                refine_count: 9,
                ..base
            },
            AttackMethod::Rotation => Self {
                epsilon: 16.0 / 255.0,
                step_size: 0.16 / 255.0,
                iterations: 100,
                momentum_decay: 1.0,
                di_probability: 1.0,
                rotation_max: std::f64::consts::FRAC_PI_6,
                ..base
            },
            AttackMethod::Frequency => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon {} must be non-negative", self.epsilon));
        }
        if !(self.step_size >= 0.0) || !(self.tail_step_size >= 0.0) {
            return bad("step sizes must be non-negative".into());
        }
        if !(self.momentum_decay >= 0.0) {
            return bad("momentum decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.di_probability) {
            return bad(format!(
                "di probability {} outside [0, 1]",
                self.di_probability
            ));
        }
        if self.ti_kernel_size == 0 || self.ti_kernel_size % 2 == 0 {
            return bad(format!(
                "ti kernel size {} must be odd",
                self.ti_kernel_size
            ));
        }
        if self.refine_count == 0 {
            return bad("refine count must be at least 1".into());
        }
        if !(self.lpips_weight >= 0.0) || !(self.mse_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.validation_threshold) {
            return bad(format!(
                "validation threshold {} outside [0, 1]",
                self.validation_threshold
            ));
        }
        if self.epsilon_set.iter().any(|e| !(*e > 0.0))
            || self.epsilon_set.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("epsilon set must be positive and strictly ascending".into());
        }
        if !(self.rotation_max >= 0.0) {
            return bad("rotation angle must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.edge_beta) {
            return bad(format!("edge beta {} outside [0, 1]", self.edge_beta));
        }
        if self.tail_iterations > self.iterations {
            return bad("tail iterations exceed total iterations".into());
        }
        let f = &self.frequency;
        if !(f.lr_min >= 0.0 && f.lr_min <= f.lr_max) {
            return bad("frequency learning rates must satisfy 0 <= lr_min <= lr_max".into());
        }
        if f.sigma.is_some_and(|s| !(s > 0.0)) || !(f.kappa >= 0.0) {
            return bad("frequency sigma must be positive and kappa non-negative".into());
        }
        Ok(())
    }

    /// Step size to use at iteration `t` (0-based).
    pub fn step_at(&self, t: usize) -> f64 {
        if t + self.tail_iterations >= self.iterations && self.tail_iterations > 0 {
            self.tail_step_size
        } else {
            self.step_size
        }
    }
}

/// Per-image line of a [`ScoreReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub attacked_successfully: bool,
    pub lpips: f64,
}

/// Machine-score breakdown of one submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub asr: f64,
    pub fid_raw: f64,
    pub fid_score: f64,
    pub lpips_raw: f64,
    pub lpips_score: f64,
    pub s_sub: f64,
    pub per_image: Vec<ImageScore>,
}

/// Byte stored for a `[0, 1]` pixel: round half up of `v * 255`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    filename: String,
    label: usize,
    id: String,
}

/// Read the images listed in `manifest` (paths relative to `root`).
pub fn load_dataset(root: &Path, manifest: &Path, num_classes: usize) -> Result<ImageBatch> {
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::Manifest {
        path: manifest.to_path_buf(),
        message: e.to_string(),
    })?;
    let rows = reader
        .deserialize::<ManifestRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Manifest {
            path: manifest.to_path_buf(),
            message: e.to_string(),
        })?;
    if rows.is_empty() {
        return Ok(ImageBatch::empty(0));
    }

    let mut images = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.label >= num_classes {
            return Err(Error::LabelOutOfRange {
                id: row.id.clone(),
                label: row.label,
                num_classes,
            });
        }
        let path = root.join(&row.filename);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let img = image::open(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?
            .to_rgb8();
        images.push((path, img));
    }

    let (w0, h0) = images[0].1.dimensions();
    let mut pixels = Array4::zeros((rows.len(), CHANNELS, h0 as usize, w0 as usize));
    for (b, (path, img)) in images.iter().enumerate() {
        if img.dimensions() != (w0, h0) {
            return Err(Error::Image {
                path: path.clone(),
                message: format!("size {:?} differs from {:?}", img.dimensions(), (w0, h0)),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                pixels[[b, c, y as usize, x as usize]] = f64::from(px[c]) / 255.0;
            }
        }
    }
    ImageBatch::new(
        pixels,
        rows.iter().map(|r| r.label).collect(),
        rows.into_iter().map(|r| r.id).collect(),
    )
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidBatch(format!(
            "image id {id:?} is not a safe file name"
        )))
    }
}

/// Write `<id>.png` for every image plus a `manifest.csv`; returns the manifest path.
pub fn save_images(batch: &ImageBatch, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = root.join(MANIFEST_NAME);
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&manifest)
        .map_err(|e| Error::Manifest {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
    writer
        .write_record(["filename", "label", "id"])
        .map_err(|e| Error::Manifest {
            path: manifest.clone(),
            message: e.to_string(),
        })?;

    let size = batch.size() as u32;
    for i in 0..batch.len() {
        let id = &batch.ids[i];
        check_id(id)?;
        let view = batch.image(i);
        let img = image::RgbImage::from_fn(size, size, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                to_byte(view[[0, y, x]]),
                to_byte(view[[1, y, x]]),
                to_byte(view[[2, y, x]]),
            ])
        });
        let filename = format!("{id}.png");
        let path = root.join(&filename);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        writer
            .serialize(ManifestRow {
                filename,
                label: batch.labels[i],
                id: id.clone(),
            })
            .map_err(|e| Error::Manifest {
                path: manifest.clone(),
                message: e.to_string(),
            })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

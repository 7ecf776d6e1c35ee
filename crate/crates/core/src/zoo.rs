//! Classifiers, logit-fused ensembles, the scorer's preprocessing defense and
//! the fixed feature extractors behind FID and LPIPS.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{self, Layer, Network, Shape, TrainOptions};
use crate::synth::{self, NUM_CLASSES};

/// Iterate over the images of a `(B, C, H, W)` tensor as flat slices.
pub(crate) fn per_image<R: Send>(
    pixels: &Array4<f64>,
    f: impl Fn(usize, &[f64]) -> R + Sync + Send,
) -> Vec<R> {
    let (_, c, h, w) = pixels.dim();
    let len = c * h * w;
    let standard = pixels.as_standard_layout();
    let flat = standard.as_slice().expect("standard layout is contiguous");
    if len == 0 {
        return (0..pixels.dim().0).map(|i| f(i, &[])).collect();
    }
    flat.par_chunks(len)
        .enumerate()
        .map(|(i, img)| f(i, img))
        .collect()
}

pub(crate) fn stack_images(images: Vec<Vec<f64>>, shape: (usize, usize, usize)) -> Array4<f64> {
    let b = images.len();
    let flat: Vec<f64> = images.into_iter().flatten().collect();
    Array4::from_shape_vec((b, shape.0, shape.1, shape.2), flat).expect("consistent image sizes")
}

/// Anything that maps a pixel batch to logits.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, pixels: &Array4<f64>) -> Array2<f64>;
}

/// A trained classifier together with an access counter.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    id: String,
    net: Arc<Network>,
    supports_gradients: bool,
    queries: Arc<AtomicU64>,
}

impl ModelHandle {
    pub fn new(id: impl Into<String>, net: Arc<Network>) -> Self {
        Self {
            id: id.into(),
            net,
            supports_gradients: true,
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Expose the model as a label-only black box.
    pub fn without_gradients(mut self) -> Self {
        self.supports_gradients = false;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn supports_gradients(&self) -> bool {
        self.supports_gradients
    }

    /// Number of images this handle has been evaluated on.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn record(&self, images: usize) {
        self.queries.fetch_add(images as u64, Ordering::Relaxed);
    }
}

impl Classifier for ModelHandle {
    fn num_classes(&self) -> usize {
        self.net.output_len()
    }

    fn logits(&self, pixels: &Array4<f64>) -> Array2<f64> {
        self.record(pixels.dim().0);
        let rows = per_image(pixels, |_, img| self.net.forward(img));
        let k = self.num_classes();
        Array2::from_shape_vec((rows.len(), k), rows.into_iter().flatten().collect())
            .expect("fixed logit width")
    }
}

/// Weighted logit fusion of several classifiers.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<ModelHandle>,
    weights: Vec<f64>,
}

impl Ensemble {
    /// Equal weights.
    pub fn new(members: Vec<ModelHandle>) -> Result<Self> {
        let n = members.len();
        Self::weighted(members, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn weighted(members: Vec<ModelHandle>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one member".into(),
            ));
        }
        if weights.len() != members.len() {
            return Err(Error::InvalidConfig(
                "one weight per ensemble member".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(
                "ensemble weights must be >= 0 and sum to 1".into(),
            ));
        }
        let k = members[0].num_classes();
        for m in &members[1..] {
            if m.num_classes() != k {
                return Err(Error::ClassCountMismatch(k, m.num_classes()));
            }
        }
        Ok(Self { members, weights })
    }

    pub fn single(member: ModelHandle) -> Self {
        Self::new(vec![member]).expect("one member is a valid ensemble")
    }

    pub fn members(&self) -> &[ModelHandle] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ensure_differentiable(&self) -> Result<()> {
        match self.members.iter().find(|m| !m.supports_gradients()) {
            Some(m) => Err(Error::NotDifferentiable(m.id().to_string())),
            None => Ok(()),
        }
    }

    /// Per-image loss and its gradient w.r.t. the input pixels, where `loss`
    /// maps fused logits and a label to `(value, d value / d logits)`.
    pub fn loss_gradient<F>(
        &self,
        pixels: &Array4<f64>,
        labels: &[usize],
        loss: F,
    ) -> Result<(Vec<f64>, Array4<f64>)>
    where
        F: Fn(&[f64], usize) -> (f64, Vec<f64>) + Sync,
    {
        self.ensure_differentiable()?;
        let (b, c, h, w) = pixels.dim();
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{b} images but {} labels",
                labels.len()
            )));
        }
        for m in &self.members {
            m.record(b);
        }
        let k = self.num_classes();
        let results = per_image(pixels, |i, img| {
            let traces: Vec<_> = self.members.iter().map(|m| m.net.trace(img)).collect();
            let mut fused = vec![0.0; k];
            for (t, wt) in traces.iter().zip(&self.weights) {
                for (f, z) in fused.iter_mut().zip(t.output()) {
                    *f += wt * z;
                }
            }
            let (value, dlogits) = loss(&fused, labels[i]);
            let mut grad = vec![0.0; img.len()];
            for ((m, t), wt) in self.members.iter().zip(&traces).zip(&self.weights) {
                let scaled: Vec<f64> = dlogits.iter().map(|d| d * wt).collect();
                let g = m.net.backward(t, Some(&scaled), &[], None);
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            (value, grad)
        });
        let (values, grads): (Vec<f64>, Vec<Vec<f64>>) = results.into_iter().unzip();
        Ok((values, stack_images(grads, (c, h, w))))
    }

    /// Cross-entropy of the fused logits.
    pub fn cross_entropy_gradient(
        &self,
        pixels: &Array4<f64>,
        labels: &[usize],
    ) -> Result<(Vec<f64>, Array4<f64>)> {
        self.loss_gradient(pixels, labels, nn::cross_entropy)
    }
}

impl Classifier for Ensemble {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn logits(&self, pixels: &Array4<f64>) -> Array2<f64> {
        ensemble_logits(self, pixels)
    }
}

/// Weighted sum of member logits.
pub fn ensemble_logits(ens: &Ensemble, pixels: &Array4<f64>) -> Array2<f64> {
    let mut fused = Array2::zeros((pixels.dim().0, ens.num_classes()));
    for (m, w) in ens.members.iter().zip(&ens.weights) {
        fused.scaled_add(*w, &m.logits(pixels));
    }
    fused
}

/// Softmax probability of each image's true class.
pub fn true_class_probability(
    model: &impl Classifier,
    pixels: &Array4<f64>,
    labels: &[usize],
) -> Vec<f64> {
    model
        .logits(pixels)
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| nn::softmax(row.as_slice().expect("row is contiguous"))[y])
        .collect()
}

pub fn predictions(model: &impl Classifier, pixels: &Array4<f64>) -> Vec<usize> {
    model
        .logits(pixels)
        .outer_iter()
        .map(|row| nn::argmax(row.as_slice().expect("row is contiguous")))
        .collect()
}

/// Preprocessing applied by the scorer before the target model sees an image:
/// reflect padding, gaussian blur, then a center crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub pad_pixels: usize,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    /// Output side length; `None` crops back to the input size.
    pub crop: Option<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            pad_pixels: 4,
            blur_sigma: 0.5,
            blur_kernel: 3,
            crop: None,
        }
    }
}

impl DefenseConfig {
    pub fn identity() -> Self {
        Self {
            pad_pixels: 0,
            blur_sigma: 0.0,
            blur_kernel: 1,
            crop: None,
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.blur_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("blur kernel must be odd".into()));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "blur sigma must be non-negative".into(),
            ));
        }
        if size > 0 && self.pad_pixels >= size {
            return Err(Error::InvalidConfig(format!(
                "reflect padding {} needs images wider than the pad",
                self.pad_pixels
            )));
        }
        let padded = size + 2 * self.pad_pixels;
        if self.crop.unwrap_or(size) > padded {
            return Err(Error::InvalidConfig("crop exceeds padded size".into()));
        }
        Ok(())
    }

    /// Normalized 1-D gaussian taps; σ = 0 gives a unit impulse.
    pub fn blur_taps(&self) -> Vec<f64> {
        let k = self.blur_kernel;
        let mid = (k / 2) as f64;
        if self.blur_sigma == 0.0 {
            return (0..k)
                .map(|i| if i as f64 == mid { 1.0 } else { 0.0 })
                .collect();
        }
        let raw: Vec<f64> = (0..k)
            .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * self.blur_sigma.powi(2))).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn defend_plane(
    plane: &[f64],
    size: usize,
    cfg: &DefenseConfig,
    taps: &[f64],
    out: usize,
) -> Vec<f64> {
    let pad = cfg.pad_pixels;
    let p = size + 2 * pad;
    let padded: Vec<f64> = (0..p * p)
        .map(|j| {
            let (y, x) = (
                (j / p) as isize - pad as isize,
                (j % p) as isize - pad as isize,
            );
            plane[reflect(y, size) * size + reflect(x, size)]
        })
        .collect();
    let r = (taps.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, p as isize - 1) as usize;
    let mut horiz = vec![0.0; p * p];
    for y in 0..p {
        for x in 0..p {
            horiz[y * p + x] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * padded[y * p + clamp(x as isize + t as isize - r)])
                .sum();
        }
    }
    let off = (p - out) / 2;
    let mut result = Vec::with_capacity(out * out);
    for y in off..off + out {
        for x in off..off + out {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * horiz[clamp(y as isize + t as isize - r) * p + x])
                .sum();
            result.push(v.clamp(0.0, 1.0));
        }
    }
    result
}

/// Pad (reflect), blur (gaussian, edge-replicated borders), center-crop.
pub fn apply_defense(cfg: &DefenseConfig, batch: &ImageBatch) -> Result<ImageBatch> {
    let size = batch.size();
    cfg.validate(size)?;
    let out = cfg.crop.unwrap_or(size);
    let taps = cfg.blur_taps();
    let plane = size * size;
    let c = batch.pixels().dim().1;
    let images = per_image(batch.pixels(), |_, img| {
        (0..c)
            .flat_map(|ch| defend_plane(&img[ch * plane..(ch + 1) * plane], size, cfg, &taps, out))
            .collect::<Vec<f64>>()
    });
    ImageBatch::new(
        stack_images(images, (c, out, out)),
        batch.labels().to_vec(),
        batch.ids().to_vec(),
    )
}

/// Fixed network whose intermediate activations serve as perceptual features.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    id: String,
    net: Arc<Network>,
    taps: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(id: impl Into<String>, net: Arc<Network>, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|&t| t >= net.layers().len()) {
            return Err(Error::InvalidConfig(
                "feature taps must name existing layers".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            net,
            taps,
        })
    }

    /// Single tap at the global-pooling layer.
    pub fn pooled(id: impl Into<String>, net: Arc<Network>) -> Result<Self> {
        let tap = net
            .layers()
            .iter()
            .position(|l| *l == Layer::GlobalAvgPool)
            .ok_or_else(|| Error::InvalidConfig("network has no global pooling layer".into()))?;
        Self::new(id, net, vec![tap])
    }

    /// One tap after every ReLU.
    pub fn relu_taps(id: impl Into<String>, net: Arc<Network>) -> Result<Self> {
        let taps = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Layer::Relu)
            .map(|(i, _)| i)
            .collect();
        Self::new(id, net, taps)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn tap_shapes(&self) -> Vec<Shape> {
        self.taps.iter().map(|&t| self.net.shape_after(t)).collect()
    }

    /// Activations at each tap for one flat image.
    pub fn forward_features(&self, image: &[f64]) -> Vec<Vec<f64>> {
        let trace = self.net.trace(image);
        self.taps
            .iter()
            .map(|&t| trace.activation(t).to_vec())
            .collect()
    }
}

/// Pooled feature vector per image, `(B, D)`.
pub fn fid_features(extractor: &FeatureExtractor, batch: &ImageBatch) -> Result<Array2<f64>> {
    if extractor.taps.len() != 1 {
        return Err(Error::InvalidConfig(
            "FID features need exactly one pooled tap".into(),
        ));
    }
    let d = extractor.tap_shapes()[0].len();
    let rows = per_image(batch.pixels(), |_, img| {
        extractor.forward_features(img).pop().expect("one tap")
    });
    Ok(
        Array2::from_shape_vec((rows.len(), d), rows.into_iter().flatten().collect())
            .expect("fixed feature width"),
    )
}

/// Role a zoo network plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZooRole {
    Classifier,
    FidFeatures,
    LpipsFeatures,
}

/// One entry of the desk-scale zoo.
#[derive(Clone, Debug)]
pub struct ZooMember {
    pub id: &'static str,
    pub role: ZooRole,
    pub layers: Vec<Layer>,
}

fn conv(i: usize, o: usize, k: usize) -> Layer {
    Layer::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
    }
}

fn linear(i: usize, o: usize) -> Layer {
    Layer::Linear {
        inputs: i,
        outputs: o,
    }
}

/// Architectures of the default zoo for `size`x`size` inputs (size divisible by 8).
#[rustfmt::skip]
pub fn default_zoo(size: usize) -> Vec<ZooMember> {
    use Layer::*;
    let k = NUM_CLASSES;
    let flat = 48 * (size / 8) * (size / 8);
    vec![
        ZooMember {
            id: "s0",
            role: ZooRole::Classifier,
            layers: vec![
                conv(3, 16, 3), Relu, MaxPool,
                conv(16, 32, 3), Relu, MaxPool,
                conv(32, 32, 3), Relu, GlobalAvgPool, Flatten, linear(32, k),
            ],
        },
        ZooMember {
            id: "s1",
            role: ZooRole::Classifier,
            layers: vec![
                conv(3, 12, 5), Relu, AvgPool,
                conv(12, 24, 3), Relu, MaxPool,
                conv(24, 32, 3), Relu, GlobalAvgPool, Flatten, linear(32, k),
            ],
        },
        ZooMember {
            id: "s2",
            role: ZooRole::Classifier,
            layers: vec![
                conv(3, 12, 3), Relu, conv(12, 12, 3), Relu, MaxPool,
                conv(12, 24, 3), Relu, MaxPool,
                conv(24, 32, 3), Relu, GlobalAvgPool, Flatten, linear(32, k),
            ],
        },
        ZooMember {
            id: "v0",
            role: ZooRole::Classifier,
            layers: vec![
                conv(3, 16, 3), Relu, MaxPool,
                conv(16, 24, 3), Relu, MaxPool,
                conv(24, 48, 3), Relu, GlobalAvgPool, Flatten, linear(48, k),
            ],
        },
        ZooMember {
            id: "t0",
            role: ZooRole::Classifier,
            layers: vec![
                conv(3, 20, 3), Relu, MaxPool,
                conv(20, 32, 3), Relu, AvgPool,
                conv(32, 48, 3), Relu, MaxPool, Flatten, linear(flat, k),
            ],
        },
        ZooMember {
            id: "fid",
            role: ZooRole::FidFeatures,
            layers: vec![
                conv(3, 16, 3), Relu, MaxPool,
                conv(16, 32, 3), Relu, MaxPool,
                conv(32, 64, 3), Relu, GlobalAvgPool, Flatten, linear(64, k),
            ],
        },
        ZooMember {
            id: "lpips",
            role: ZooRole::LpipsFeatures,
            layers: vec![
                conv(3, 16, 3), Relu, MaxPool,
                conv(16, 32, 3), Relu, MaxPool,
                conv(32, 32, 3), Relu, GlobalAvgPool, Flatten, linear(32, k),
            ],
        },
    ]
}

/// Row of the zoo manifest `zoo.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZooEntry {
    pub model_id: String,
    pub file: String,
    pub sha256: String,
}

pub const ZOO_MANIFEST: &str = "zoo.csv";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loaded, checksum-verified zoo.
#[derive(Clone, Debug)]
pub struct Zoo {
    dir: PathBuf,
    entries: Vec<ZooEntry>,
    nets: BTreeMap<String, Arc<Network>>,
}

impl Zoo {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(ZOO_MANIFEST);
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| Error::Manifest {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
        let entries = reader
            .deserialize::<ZooEntry>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Manifest {
                path: manifest.clone(),
                message: e.to_string(),
            })?;
        let mut nets = BTreeMap::new();
        for e in &entries {
            let path = dir.join(&e.file);
            let digest = sha256_file(&path)?;
            if digest != e.sha256 {
                return Err(Error::Weights {
                    path,
                    message: format!("checksum {digest} does not match manifest {}", e.sha256),
                });
            }
            nets.insert(e.model_id.clone(), Arc::new(Network::load(&path)?));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            nets,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[ZooEntry] {
        &self.entries
    }

    pub fn network(&self, id: &str) -> Result<Arc<Network>> {
        self.nets
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    /// A fresh handle (with its own query counter).
    pub fn handle(&self, id: &str) -> Result<ModelHandle> {
        Ok(ModelHandle::new(id, self.network(id)?))
    }

    pub fn ensemble(&self, ids: &[String]) -> Result<Ensemble> {
        Ensemble::new(
            ids.iter()
                .map(|id| self.handle(id))
                .collect::<Result<_>>()?,
        )
    }

    pub fn fid_extractor(&self, id: &str) -> Result<FeatureExtractor> {
        FeatureExtractor::pooled(id, self.network(id)?)
    }

    pub fn lpips_extractor(&self, id: &str) -> Result<FeatureExtractor> {
        FeatureExtractor::relu_taps(id, self.network(id)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooTrainOptions {
    pub seed: u64,
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub train: TrainOptions,
}

impl Default for ZooTrainOptions {
    fn default() -> Self {
        Self {
            seed: 2021,
            image_size: 32,
            train_images: 4000,
            test_images: 500,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooTrainSummary {
    pub model_id: String,
    pub final_loss: f64,
    pub test_accuracy: f64,
}

/// Train every zoo member from scratch and write weights plus `zoo.csv`.
///
/// Each member sees its own synthetic training draw so surrogates and the
/// held-out target do not share data.
pub fn train_zoo(
    out: &Path,
    members: &[ZooMember],
    opts: &ZooTrainOptions,
    mut progress: impl FnMut(&ZooTrainSummary),
) -> Result<Vec<ZooTrainSummary>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let size = opts.image_size;
    let test = synth::synthetic_batch(opts.test_images, size, opts.seed ^ 0x7e57, "test");
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (idx, member) in members.iter().enumerate() {
        let data_seed = crate::seed_of!(opts.seed, "data", member.id);
        let data = synth::synthetic_batch(opts.train_images, size, data_seed, member.id);
        let mut net = Network::new(
            Shape::new(3, size, size),
            member.layers.clone(),
            crate::seed_of!(opts.seed, "init", idx),
        )?;
        let train_opts = TrainOptions {
            seed: crate::seed_of!(opts.seed, "train", member.id),
            ..opts.train.clone()
        };
        let history = nn::train(&mut net, &data, &train_opts);
        let handle = ModelHandle::new(member.id, Arc::new(net.clone()));
        let preds = predictions(&handle, test.pixels());
        let correct = preds
            .iter()
            .zip(test.labels())
            .filter(|(p, y)| p == y)
            .count();
        let file = format!("{}.weights", member.id);
        let path = out.join(&file);
        net.save(&path)?;
        rows.push(ZooEntry {
            model_id: member.id.to_string(),
            file,
            sha256: sha256_file(&path)?,
        });
        let summary = ZooTrainSummary {
            model_id: member.id.to_string(),
            final_loss: history.last().copied().unwrap_or(f64::NAN),
            test_accuracy: correct as f64 / test.len().max(1) as f64,
        };
        progress(&summary);
        summaries.push(summary);
    }
    let manifest = out.join(ZOO_MANIFEST);
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::Manifest {
        path: manifest.clone(),
        message: e.to_string(),
    })?;
    for row in &rows {
        writer.serialize(row).map_err(|e| Error::Manifest {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(summaries)
}

/// The first `n` synthetic images (drawn from `seed`) that `target`, seen
/// through `defense`, classifies correctly.
pub fn correctly_classified_fixture(
    target: &ModelHandle,
    defense: &DefenseConfig,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<ImageBatch> {
    let pool = synth::synthetic_batch(n * 3 + 30, size, seed, "fx");
    let defended = apply_defense(defense, &pool)?;
    let preds = predictions(target, defended.pixels());
    let keep: Vec<usize> = (0..pool.len())
        .filter(|&i| preds[i] == pool.labels()[i])
        .take(n)
        .collect();
    if keep.len() < n {
        return Err(Error::InvalidConfig(format!(
            "target classified only {} of {} candidates correctly",
            keep.len(),
            pool.len()
        )));
    }
    Ok(pool.select(&keep))
}

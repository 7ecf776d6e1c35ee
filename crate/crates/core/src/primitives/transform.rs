//! Random input transforms (diverse inputs, rotation, excision) expressed as
//! sparse linear resampling maps, so gradients flow back through their adjoint.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::rng::rng_from;
use crate::zoo::{per_image, stack_images};

const TAPS: usize = 4;

/// Each output pixel is a weighted sum of up to four input pixels of the
/// same channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    size: usize,
    src: Vec<[u32; TAPS]>,
    wts: Vec<[f64; TAPS]>,
}

impl SpatialMap {
    fn empty(size: usize) -> Self {
        Self {
            size,
            src: vec![[0; TAPS]; size * size],
            wts: vec![[0.0; TAPS]; size * size],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut map = Self::empty(size);
        for (p, (s, w)) in map.src.iter_mut().zip(map.wts.iter_mut()).enumerate() {
            s[0] = p as u32;
            w[0] = 1.0;
        }
        map
    }

    /// Nearest-neighbour resize to `inner`x`inner`, placed at `(top, left)`
    /// on a zero canvas of the original size.
    pub fn resize_pad(size: usize, inner: usize, top: usize, left: usize) -> Self {
        assert!(inner >= 1 && inner <= size && top + inner <= size && left + inner <= size);
        let mut map = Self::empty(size);
        for i in 0..inner {
            let sy = (((i as f64 + 0.5) * size as f64 / inner as f64) as usize).min(size - 1);
            for j in 0..inner {
                let sx = (((j as f64 + 0.5) * size as f64 / inner as f64) as usize).min(size - 1);
                let p = (top + i) * size + left + j;
                map.src[p][0] = (sy * size + sx) as u32;
                map.wts[p][0] = 1.0;
            }
        }
        map
    }

    /// Rotation by `angle` radians about the image center, bilinear
    /// resampling, zeros outside the source.
    pub fn rotation(size: usize, angle: f64) -> Self {
        let mut map = Self::empty(size);
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = angle.sin_cos();
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = (i as f64 - c, j as f64 - c);
                let sx = co * dx + s * dy + c;
                let sy = -s * dx + co * dy + c;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let p = i * size + j;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (t, (y, x, wt)) in corners.into_iter().enumerate() {
                    if y >= 0.0 && x >= 0.0 && y < size as f64 && x < size as f64 {
                        map.src[p][t] = (y as usize * size + x as usize) as u32;
                        map.wts[p][t] = wt;
                    }
                }
            }
        }
        map
    }

    /// Identity except for a zeroed `h`x`w` rectangle at `(top, left)`.
    pub fn cutout(size: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut map = Self::identity(size);
        for y in top..(top + h).min(size) {
            for x in left..(left + w).min(size) {
                map.wts[y * size + x] = [0.0; TAPS];
            }
        }
        map
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn apply(&self, plane: &[f64], out: &mut [f64]) {
        for (o, (s, w)) in out.iter_mut().zip(self.src.iter().zip(&self.wts)) {
            *o = (0..TAPS).map(|t| w[t] * plane[s[t] as usize]).sum();
        }
    }

    fn apply_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        grad_in.fill(0.0);
        for (g, (s, w)) in grad_out.iter().zip(self.src.iter().zip(&self.wts)) {
            for t in 0..TAPS {
                grad_in[s[t] as usize] += w[t] * g;
            }
        }
    }
}

/// A chain of spatial maps applied in order to every channel of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTransform {
    stages: Vec<SpatialMap>,
}

impl ImageTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn then(mut self, map: SpatialMap) -> Self {
        self.stages.push(map);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn forward(&self, image: &[f64], channels: usize) -> Vec<f64> {
        self.run(image, channels, false)
    }

    /// Transpose of [`forward`](Self::forward): maps a gradient w.r.t. the
    /// transformed image back to the original.
    pub fn adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        self.run(grad, channels, true)
    }

    fn run(&self, image: &[f64], channels: usize, adjoint: bool) -> Vec<f64> {
        let mut cur = image.to_vec();
        if self.stages.is_empty() {
            return cur;
        }
        let plane = image.len() / channels;
        let mut next = vec![0.0; image.len()];
        let order: Box<dyn Iterator<Item = &SpatialMap>> = if adjoint {
            Box::new(self.stages.iter().rev())
        } else {
            Box::new(self.stages.iter())
        };
        for map in order {
            for c in 0..channels {
                let (src, dst) = (
                    &cur[c * plane..(c + 1) * plane],
                    &mut next[c * plane..(c + 1) * plane],
                );
                if adjoint {
                    map.apply_adjoint(src, dst);
                } else {
                    map.apply(src, dst);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

/// One transform per image of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTransform {
    per_image: Vec<ImageTransform>,
}

impl BatchTransform {
    pub fn identity(n: usize) -> Self {
        Self {
            per_image: vec![ImageTransform::identity(); n],
        }
    }

    pub fn from_images(per_image: Vec<ImageTransform>) -> Self {
        Self { per_image }
    }

    pub fn is_identity(&self) -> bool {
        self.per_image.iter().all(ImageTransform::is_identity)
    }

    pub fn forward(&self, pixels: &Array4<f64>) -> Array4<f64> {
        self.run(pixels, false)
    }

    pub fn adjoint(&self, grad: &Array4<f64>) -> Array4<f64> {
        self.run(grad, true)
    }

    fn run(&self, pixels: &Array4<f64>, adjoint: bool) -> Array4<f64> {
        if self.is_identity() {
            return pixels.clone();
        }
        let (b, c, h, w) = pixels.dim();
        assert_eq!(b, self.per_image.len(), "one transform per image");
        let out = per_image(pixels, |i, img| {
            if adjoint {
                self.per_image[i].adjoint(img, c)
            } else {
                self.per_image[i].forward(img, c)
            }
        });
        stack_images(out, (c, h, w))
    }
}

/// How inputs are randomly varied before each gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDiversity {
    None,
    /// Random resize to `[0.9 H, H]` then random zero padding back to `H`,
    /// applied with the given probability.
    ResizePad {
        probability: f64,
    },
    /// Optional resize/pad followed by a uniform rotation in
    /// `[-max_angle, max_angle]`, applied with the given probability.
    ResizePadRotate {
        probability: f64,
        max_angle: f64,
        resize: bool,
    },
    /// Resize/pad plus a random rectangular excision, each with the given
    /// probability.
    ResizePadCutout {
        probability: f64,
    },
}

pub const MIN_RESIZE_FRACTION: f64 = 0.9;

fn sample_resize_pad(size: usize, rng: &mut ChaCha8Rng) -> SpatialMap {
    let lo = ((MIN_RESIZE_FRACTION * size as f64).ceil() as usize).clamp(1, size);
    let inner = rng.random_range(lo..=size);
    let top = rng.random_range(0..=size - inner);
    let left = rng.random_range(0..=size - inner);
    if inner == size {
        SpatialMap::identity(size)
    } else {
        SpatialMap::resize_pad(size, inner, top, left)
    }
}

impl InputDiversity {
    /// Transform for one image; depends only on `(seed, id)`.
    pub fn sample_one(&self, size: usize, seed: u64, id: &str) -> ImageTransform {
        let mut rng = rng_from(seed_of!(seed, id));
        let mut t = ImageTransform::identity();
        match *self {
            InputDiversity::None => {}
            InputDiversity::ResizePad { probability } => {
                if rng.random::<f64>() < probability {
                    t = t.then(sample_resize_pad(size, &mut rng));
                }
            }
            InputDiversity::ResizePadRotate {
                probability,
                max_angle,
                resize,
            } => {
                if rng.random::<f64>() < probability {
                    if resize {
                        t = t.then(sample_resize_pad(size, &mut rng));
                    }
                    let angle = rng.random_range(-1.0..=1.0) * max_angle;
                    if angle != 0.0 {
                        t = t.then(SpatialMap::rotation(size, angle));
                    }
                }
            }
            InputDiversity::ResizePadCutout { probability } => {
                if rng.random::<f64>() < probability {
                    t = t.then(sample_resize_pad(size, &mut rng));
                }
                if rng.random::<f64>() < probability {
                    let side_lo = (size / 8).max(1);
                    let side_hi = (size / 4).max(side_lo);
                    let h = rng.random_range(side_lo..=side_hi);
                    let w = rng.random_range(side_lo..=side_hi);
                    let top = rng.random_range(0..=size - h);
                    let left = rng.random_range(0..=size - w);
                    t = t.then(SpatialMap::cutout(size, top, left, h, w));
                }
            }
        }
        t
    }

    pub fn sample(&self, batch: &ImageBatch, seed: u64) -> BatchTransform {
        if *self == InputDiversity::None {
            return BatchTransform::identity(batch.len());
        }
        BatchTransform::from_images(
            batch
                .ids()
                .iter()
                .map(|id| self.sample_one(batch.size(), seed, id))
                .collect(),
        )
    }
}

/// Diverse-input transform with probability `p` per image.
pub fn di_transform(batch: &ImageBatch, p: f64, seed: u64) -> ImageBatch {
    let t = InputDiversity::ResizePad { probability: p }.sample(batch, seed);
    batch.with_pixels_unchecked(t.forward(batch.pixels()))
}

/// Random resize, random padding and a random rotation in
/// `[-max_angle, max_angle]`, applied to every image.
pub fn rotation_transform(batch: &ImageBatch, max_angle: f64, seed: u64) -> ImageBatch {
    let t = InputDiversity::ResizePadRotate {
        probability: 1.0,
        max_angle,
        resize: true,
    }
    .sample(batch, seed);
    batch.with_pixels_unchecked(t.forward(batch.pixels()).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Rotate every image by the same fixed angle.
pub fn rotate_batch(batch: &ImageBatch, angle: f64) -> ImageBatch {
    let t = ImageTransform::identity().then(SpatialMap::rotation(batch.size(), angle));
    let bt = BatchTransform::from_images(vec![t; batch.len()]);
    batch.with_pixels_unchecked(bt.forward(batch.pixels()).mapv(|v| v.clamp(0.0, 1.0)))
}

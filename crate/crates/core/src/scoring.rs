//! Machine score (attack success rate, FID, LPIPS) and aggregation of human
//! annotations into the subjective score.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageScore, ScoreReport};
use crate::error::{Error, Result};
use crate::zoo::{
    apply_defense, fid_features, per_image, predictions, stack_images, Classifier, DefenseConfig,
    FeatureExtractor,
};

pub const FID_CAP: f64 = 200.0;
pub const LPIPS_FLOOR: f64 = 0.2;
pub const LPIPS_CEIL: f64 = 0.7;
pub const VOTES_PER_IMAGE: usize = 5;
pub const QUALITY_LEVELS: std::ops::RangeInclusive<u8> = 1..=5;
/// Denominator scale of the quality score.
pub const QUALITY_SCALE: f64 = 1000.0;
const NORM_EPS: f64 = 1e-10;

/// Fraction of `adv` the target misclassifies after the defense.
pub fn attack_success_rate(
    target: &impl Classifier,
    defense: &DefenseConfig,
    adv: &ImageBatch,
) -> Result<f64> {
    Ok(success_flags(target, defense, adv)?
        .iter()
        .filter(|s| **s)
        .count() as f64
        / adv.len() as f64)
}

/// Per image: does the defended target misclassify it?
pub fn success_flags(
    target: &impl Classifier,
    defense: &DefenseConfig,
    adv: &ImageBatch,
) -> Result<Vec<bool>> {
    if adv.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let defended = apply_defense(defense, adv)?;
    let preds = predictions(target, defended.pixels());
    Ok(preds
        .iter()
        .zip(adv.labels())
        .map(|(p, y)| p != y)
        .collect())
}

fn mean_and_covariance(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.outer_iter() {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between gaussians fitted to two feature sets.
pub fn fid(features_clean: &Array2<f64>, features_adv: &Array2<f64>) -> Result<f64> {
    let rows = features_clean.nrows().min(features_adv.nrows());
    if rows < 2 {
        return Err(Error::TooFewSamples(rows));
    }
    if features_clean.ncols() != features_adv.ncols() {
        return Err(Error::Shape(format!(
            "feature widths {} and {} differ",
            features_clean.ncols(),
            features_adv.ncols()
        )));
    }
    let (m1, c1) = mean_and_covariance(features_clean);
    let (m2, c2) = mean_and_covariance(features_adv);
    let mean_term: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
    let s1 = symmetric_sqrt(&c1);
    let mut inner = &s1 * &c2 * &s1;
    // symmetrize away round-off before the eigensolve
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

pub fn fid_score(fid_value: f64) -> f64 {
    (1.0 - fid_value.clamp(0.0, FID_CAP) / FID_CAP).sqrt()
}

/// Unit-normalize the channel vector at every spatial site of a `(C, H, W)` map.
fn normalized_sites(feat: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let sites = feat.len() / channels;
    let mut norms = vec![0.0; sites];
    for c in 0..channels {
        for (s, n) in norms.iter_mut().enumerate() {
            *n += feat[c * sites + s].powi(2);
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let unit = feat
        .iter()
        .enumerate()
        .map(|(i, v)| v / (norms[i % sites] + NORM_EPS))
        .collect();
    (unit, norms)
}

fn lpips_pair(extractor: &FeatureExtractor, a: &[f64], b: &[f64]) -> f64 {
    let fa = extractor.forward_features(a);
    let fb = extractor.forward_features(b);
    let mut total = 0.0;
    for ((xa, xb), shape) in fa.iter().zip(&fb).zip(extractor.tap_shapes()) {
        let (na, _) = normalized_sites(xa, shape.c);
        let (nb, _) = normalized_sites(xb, shape.c);
        let sq: f64 = na.iter().zip(&nb).map(|(p, q)| (p - q).powi(2)).sum();
        total += sq / (shape.h * shape.w) as f64;
    }
    total
}

/// Per-image perceptual distance between `x` and `x_adv`.
pub fn lpips(extractor: &FeatureExtractor, x: &ImageBatch, x_adv: &ImageBatch) -> Result<Vec<f64>> {
    if x.pixels().dim() != x_adv.pixels().dim() {
        return Err(Error::Shape("LPIPS inputs differ in shape".into()));
    }
    Ok(lpips_distances(extractor, x_adv.pixels(), x.pixels()))
}

pub(crate) fn lpips_distances(
    extractor: &FeatureExtractor,
    x: &Array4<f64>,
    reference: &Array4<f64>,
) -> Vec<f64> {
    let (_, c, h, w) = reference.dim();
    let refs = reference.as_standard_layout();
    let refs = refs.as_slice().expect("standard layout");
    let len = c * h * w;
    per_image(x, |i, img| {
        lpips_pair(extractor, img, &refs[i * len..(i + 1) * len])
    })
}

/// Per-image LPIPS to `reference` and its gradient w.r.t. `x`.
pub fn lpips_gradient(
    extractor: &FeatureExtractor,
    x: &Array4<f64>,
    reference: &Array4<f64>,
) -> (Vec<f64>, Array4<f64>) {
    let (_, c, h, w) = x.dim();
    let reference_features: Vec<Vec<Vec<f64>>> =
        per_image(reference, |_, img| extractor.forward_features(img));
    let shapes = extractor.tap_shapes();
    let net = extractor.network();
    let out = per_image(x, |i, img| {
        let trace = net.trace(img);
        let mut value = 0.0;
        let mut injected = Vec::with_capacity(shapes.len());
        for (k, (&tap, shape)) in extractor.taps().iter().zip(&shapes).enumerate() {
            let f = trace.activation(tap);
            let (n, norms) = normalized_sites(f, shape.c);
            let (r, _) = normalized_sites(&reference_features[i][k], shape.c);
            let sites = shape.h * shape.w;
            let scale = 1.0 / sites as f64;
            let gn: Vec<f64> = n
                .iter()
                .zip(&r)
                .map(|(a, b)| 2.0 * (a - b) * scale)
                .collect();
            value += n.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * scale;
            // back through f / (‖f‖ + eps), site by site
            let mut dot = vec![0.0; sites];
            for ch in 0..shape.c {
                for s in 0..sites {
                    dot[s] += f[ch * sites + s] * gn[ch * sites + s];
                }
            }
            let gf: Vec<f64> = (0..f.len())
                .map(|j| {
                    let s = j % sites;
                    let norm = norms[s];
                    if norm == 0.0 {
                        0.0
                    } else {
                        let d = norm + NORM_EPS;
                        gn[j] / d - f[j] * dot[s] / (norm * d * d)
                    }
                })
                .collect();
            injected.push((tap, gf));
        }
        let taps: Vec<(usize, &[f64])> = injected.iter().map(|(t, g)| (*t, g.as_slice())).collect();
        (value, net.backward(&trace, None, &taps, None))
    });
    let (values, grads): (Vec<f64>, Vec<Vec<f64>>) = out.into_iter().unzip();
    (values, stack_images(grads, (c, h, w)))
}

pub fn lpips_score(s_lpips: f64) -> f64 {
    if s_lpips >= LPIPS_CEIL {
        return 0.0;
    }
    let clipped = s_lpips.max(LPIPS_FLOOR);
    (1.0 - 2.0 * (clipped - LPIPS_FLOOR)).max(0.0).sqrt()
}

pub fn machine_score(asr: f64, fid_score: f64, lpips_score: f64) -> f64 {
    100.0 * asr * fid_score * lpips_score
}

/// Everything the organizer computes from a clean/adversarial pair.
pub fn score_submission(
    clean: &ImageBatch,
    adv: &ImageBatch,
    target: &impl Classifier,
    defense: &DefenseConfig,
    fid_extractor: &FeatureExtractor,
    lpips_extractor: &FeatureExtractor,
) -> Result<ScoreReport> {
    if clean.ids() != adv.ids() || clean.labels() != adv.labels() {
        return Err(Error::InvalidBatch(
            "clean and adversarial sets must list the same images in the same order".into(),
        ));
    }
    let flags = success_flags(target, defense, adv)?;
    let asr = flags.iter().filter(|s| **s).count() as f64 / flags.len() as f64;
    let fid_raw = fid(
        &fid_features(fid_extractor, clean)?,
        &fid_features(fid_extractor, adv)?,
    )?;
    let per_lpips = lpips(lpips_extractor, clean, adv)?;
    let lpips_raw = per_lpips.iter().sum::<f64>() / per_lpips.len() as f64;
    let fid_s = fid_score(fid_raw);
    let lpips_s = lpips_score(lpips_raw);
    Ok(ScoreReport {
        asr,
        fid_raw,
        fid_score: fid_s,
        lpips_raw,
        lpips_score: lpips_s,
        s_sub: machine_score(asr, fid_s, lpips_s),
        per_image: adv
            .ids()
            .iter()
            .zip(&flags)
            .zip(&per_lpips)
            .map(|((id, &s), &l)| ImageScore {
                id: id.clone(),
                attacked_successfully: s,
                lpips: l,
            })
            .collect(),
    })
}

/// One annotator's judgement of one adversarial image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator_id: String,
    pub semantic_preserved: bool,
    pub quality_level: u8,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if !QUALITY_LEVELS.contains(&self.quality_level) {
            return Err(Error::InvalidAnnotation(format!(
                "quality level {} outside 1..=5",
                self.quality_level
            )));
        }
        if self.image_id.is_empty() || self.annotator_id.is_empty() {
            return Err(Error::InvalidAnnotation(
                "image and annotator ids are required".into(),
            ));
        }
        Ok(())
    }
}

/// Majority of exactly five votes.
pub fn aggregate_semantic(votes: &[bool]) -> Result<u8> {
    if votes.len() != VOTES_PER_IMAGE {
        return Err(Error::InvalidAnnotation(format!(
            "expected {VOTES_PER_IMAGE} semantic votes, got {}",
            votes.len()
        )));
    }
    Ok(u8::from(
        votes.iter().filter(|v| **v).count() * 2 > VOTES_PER_IMAGE,
    ))
}

pub fn aggregate_quality(levels: &[u8]) -> Result<f64> {
    if levels.len() != VOTES_PER_IMAGE {
        return Err(Error::InvalidAnnotation(format!(
            "expected {VOTES_PER_IMAGE} quality levels, got {}",
            levels.len()
        )));
    }
    if let Some(l) = levels.iter().find(|l| !QUALITY_LEVELS.contains(l)) {
        return Err(Error::InvalidAnnotation(format!(
            "quality level {l} outside 1..=5"
        )));
    }
    Ok(levels.iter().map(|&l| f64::from(l)).sum::<f64>() / levels.len() as f64)
}

/// `Σ s_s · s_q / 5` over successfully attacked images.
pub fn subjective_score(per_image: &[(bool, u8, f64)]) -> f64 {
    per_image
        .iter()
        .filter(|(attacked, _, _)| *attacked)
        .map(|&(_, s_s, s_q)| f64::from(s_s) * s_q / 5.0)
        .sum()
}

/// `s_obj / (1000 · asr)`; absent when no attack succeeded.
pub fn quality_score(s_obj: f64, asr: f64) -> Option<f64> {
    quality_score_with_scale(s_obj, asr, QUALITY_SCALE)
}

pub fn quality_score_with_scale(s_obj: f64, asr: f64, scale: f64) -> Option<f64> {
    (asr > 0.0).then(|| s_obj / (scale * asr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveImage {
    pub id: String,
    pub votes: usize,
    pub s_s: Option<u8>,
    pub s_q_mean: Option<f64>,
    pub attacked_successfully: bool,
    /// Contributes to `s_obj`: attacked successfully with a complete vote.
    pub counted: bool,
    pub incomplete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveReport {
    pub s_obj: f64,
    pub s_quality: Option<f64>,
    /// Upper bound of `s_quality` (the top quality level).
    pub s_quality_upper_bound: f64,
    pub per_image: Vec<SubjectiveImage>,
}

/// How images without exactly five votes are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncompletePolicy {
    /// Left out of `s_obj` and flagged.
    #[default]
    Exclude,
    /// Counted with `s_s = 0` and flagged.
    SemanticZero,
}

/// Aggregate raw records into the subjective score.
///
/// `images` lists every image in manifest order with its attack outcome;
/// duplicate `(annotator, image)` records keep the first, records for unknown
/// images are ignored. `asr` feeds the quality score.
pub fn aggregate_annotations(
    records: &[AnnotationRecord],
    images: &[(String, bool)],
    asr: Option<f64>,
    policy: IncompletePolicy,
) -> Result<SubjectiveReport> {
    let mut seen = BTreeSet::new();
    let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        if seen.insert((r.annotator_id.as_str(), r.image_id.as_str())) {
            by_image.entry(r.image_id.as_str()).or_default().push(r);
        }
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut contributions = Vec::new();
    for (id, attacked) in images {
        let votes = by_image.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let complete = votes.len() == VOTES_PER_IMAGE;
        let (s_s, s_q) = if complete {
            let sem: Vec<bool> = votes.iter().map(|r| r.semantic_preserved).collect();
            let lv: Vec<u8> = votes.iter().map(|r| r.quality_level).collect();
            (
                Some(aggregate_semantic(&sem)?),
                Some(aggregate_quality(&lv)?),
            )
        } else {
            (None, None)
        };
        let counted = *attacked && (complete || policy == IncompletePolicy::SemanticZero);
        if counted {
            contributions.push((true, s_s.unwrap_or(0), s_q.unwrap_or(0.0)));
        }
        per_image.push(SubjectiveImage {
            id: id.clone(),
            votes: votes.len(),
            s_s,
            s_q_mean: s_q,
            attacked_successfully: *attacked,
            counted,
            incomplete: !complete,
        });
    }
    let s_obj = subjective_score(&contributions);
    Ok(SubjectiveReport {
        s_obj,
        s_quality: asr.and_then(|a| quality_score(s_obj, a)),
        s_quality_upper_bound: f64::from(*QUALITY_LEVELS.end()),
        per_image,
    })
}

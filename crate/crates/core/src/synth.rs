//! Synthetic stand-ins for encoder outputs: Gaussian-mixture image embeddings,
//! a caption corpus aligned with the image classes, and labelled/unlabelled splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::store::{EmbeddingBundle, Modality, SampleRecord};

pub const TRUTH_FILE: &str = "truth.json";
pub const OLD_CLASSES_FILE: &str = "old_classes.json";

/// Class identifiers are zero-padded so lexical order matches numeric order.
pub fn class_id(c: usize) -> String {
    format!("c{c:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub samples_per_class: usize,
    /// Distance between any two class means, in units of the per-coordinate noise std.
    pub class_separation: f64,
    /// Norm of the perturbation added to a caption's unit class anchor (expected value).
    pub text_noise: f64,
    pub captions_per_class: usize,
    /// Extra low-quality captions per class.
    #[serde(default)]
    pub distractors_per_class: usize,
    #[serde(default)]
    pub distractor_noise: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("d_img", self.d_img),
            ("d_txt", self.d_txt),
            ("samples_per_class", self.samples_per_class),
            ("captions_per_class", self.captions_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be positive".into()));
        }
        if !(self.text_noise >= 0.0 && self.text_noise.is_finite()) {
            return Err(Error::Config("text_noise must be non-negative".into()));
        }
        if !(self.distractor_noise >= 0.0 && self.distractor_noise.is_finite()) {
            return Err(Error::Config("distractor_noise must be non-negative".into()));
        }
        Ok(())
    }
}

pub struct Mixture {
    pub images: EmbeddingBundle,
    pub corpus: EmbeddingBundle,
    /// Sample id to generating class, for images and captions alike.
    pub truth: BTreeMap<String, String>,
}

/// `count` points with all pairwise distances equal to `separation` when
/// `count <= dim` (a centered regular simplex on the first `count` axes);
/// otherwise i.i.d. Gaussian points whose expected pairwise distance is `separation`.
fn class_means(rng: &mut SplitMix64, count: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if count <= dim {
        let scale = separation / std::f64::consts::SQRT_2;
        let shift = if count > 1 { scale / count as f64 } else { 0.0 };
        (0..count)
            .map(|c| {
                (0..dim)
                    .map(|j| {
                        let base = if j == c { scale } else { 0.0 };
                        if j < count {
                            base - shift
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    } else {
        let sd = separation / (2.0 * dim as f64).sqrt();
        (0..count).map(|_| (0..dim).map(|_| rng.normal() * sd).collect()).collect()
    }
}

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

fn noisy(rng: &mut SplitMix64, center: &[f64], sd: f64) -> Vec<f64> {
    center.iter().map(|c| c + sd * rng.normal()).collect()
}

pub fn generate_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let means = class_means(&mut rng, spec.num_classes, spec.d_img, spec.class_separation);

    // Caption anchors share directions with the image means when the spaces coincide.
    let anchors: Vec<Vec<f64>> = if spec.d_txt == spec.d_img && spec.num_classes > 1 {
        means.clone()
    } else {
        class_means(&mut rng, spec.num_classes, spec.d_txt, 1.0)
    };
    let anchors: Vec<Vec<f64>> = anchors
        .into_iter()
        .map(|a| {
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let mut truth = BTreeMap::new();
    let mut image_rows = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut image_recs = Vec::with_capacity(image_rows.capacity());
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let row = image_rows.len();
            image_rows.push(unit(noisy(&mut rng, mean, 1.0)));
            let mut rec = SampleRecord::new(format!("img{row:06}"), row, Modality::Image);
            rec.class_truth = Some(class_id(c));
            truth.insert(rec.id.clone(), class_id(c));
            image_recs.push(rec);
        }
    }

    let text_sd = spec.text_noise / (spec.d_txt as f64).sqrt();
    let distractor_sd = spec.distractor_noise / (spec.d_txt as f64).sqrt();
    let mut caption_rows = Vec::new();
    let mut caption_recs = Vec::new();
    for (c, anchor) in anchors.iter().enumerate() {
        let plan = std::iter::repeat_n(text_sd, spec.captions_per_class)
            .chain(std::iter::repeat_n(distractor_sd, spec.distractors_per_class));
        for sd in plan {
            let row = caption_rows.len();
            caption_rows.push(unit(noisy(&mut rng, anchor, sd)));
            let mut rec = SampleRecord::new(format!("cap{row:06}"), row, Modality::Text);
            rec.class_truth = Some(class_id(c));
            truth.insert(rec.id.clone(), class_id(c));
            caption_recs.push(rec);
        }
    }

    Ok(Mixture {
        images: EmbeddingBundle::from_rows(spec.d_img, &image_rows, image_recs, true)?,
        corpus: EmbeddingBundle::from_rows(spec.d_txt, &caption_rows, caption_recs, true)?,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub known_classes: BTreeSet<String>,
    /// Fraction of each known class's rows that become labelled.
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The first `known` classes (by id) are known.
    pub fn first_classes(known: usize, labeled_fraction: f64, seed: u64) -> Self {
        Self {
            known_classes: (0..known).map(class_id).collect(),
            labeled_fraction,
            seed,
        }
    }
}

/// Marks which rows are labelled. Known classes are visited in sorted order;
/// each one's rows are shuffled and the first `round(fraction * n)` (at least 1) kept.
fn labelled_mask(bundle: &EmbeddingBundle, spec: &SplitSpec) -> Result<Vec<bool>> {
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(Error::Config("labeled_fraction must be in (0, 1]".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in bundle.records() {
        if let Some(c) = &r.class_truth {
            by_class.entry(c.as_str()).or_default().push(r.row);
        }
    }
    if spec.known_classes.is_empty() {
        return Err(Error::Config("known class set is empty".into()));
    }
    if spec.known_classes.len() >= by_class.len() {
        return Err(Error::Config(
            "known classes must be a strict subset of all classes".into(),
        ));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let mut mask = vec![false; bundle.count()];
    for class in &spec.known_classes {
        let rows = by_class
            .get(class.as_str())
            .ok_or_else(|| Error::Config(format!("known class {class:?} is not in the bundle")))?;
        if rows.len() < 2 {
            return Err(Error::Config(format!(
                "known class {class:?} has {} sample(s); need at least 2",
                rows.len()
            )));
        }
        let take = ((spec.labeled_fraction * rows.len() as f64).round() as usize).clamp(1, rows.len());
        let mut shuffled = rows.clone();
        rng.shuffle(&mut shuffled);
        for &r in &shuffled[..take] {
            mask[r] = true;
        }
    }
    Ok(mask)
}

/// The whole bundle with labels set on the labelled rows and stripped elsewhere.
pub fn apply_split(bundle: &EmbeddingBundle, spec: &SplitSpec) -> Result<EmbeddingBundle> {
    let mask = labelled_mask(bundle, spec)?;
    bundle.map_records(|r| {
        let mut r = r.clone();
        r.label = if mask[r.row] { r.class_truth.clone() } else { None };
        r
    })
}

/// `(D_L, D_U)`: disjoint, jointly exhaustive, rows in original order.
pub fn build_split(bundle: &EmbeddingBundle, spec: &SplitSpec) -> Result<(EmbeddingBundle, EmbeddingBundle)> {
    let marked = apply_split(bundle, spec)?;
    let (lab, unl): (Vec<usize>, Vec<usize>) = (0..marked.count()).partition(|&i| marked.record(i).is_labelled());
    Ok((marked.select(&lab)?, marked.select(&unl)?))
}

pub fn write_truth(truth: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(truth).expect("truth serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_old_classes(classes: &BTreeSet<String>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(classes).expect("classes serialize") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_old_classes(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, "class list", e))
}

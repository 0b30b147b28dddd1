//! Image/text view fusion: mean-pool retrieved captions into a text view and
//! concatenate it after the image view.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;
use crate::store::{l2_normalize, EmbeddingBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct FusedView {
    pub sample_id: String,
    /// Image view in `[..d_img]`, text view in `[d_img..]`.
    pub vector: Vec<f64>,
    pub d_img: usize,
    pub d_txt: usize,
}

impl FusedView {
    pub fn image_part(&self) -> &[f64] {
        &self.vector[..self.d_img]
    }

    pub fn text_part(&self) -> &[f64] {
        &self.vector[self.d_img..]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionOptions {
    /// Also scale the concatenated vector to unit norm.
    pub renormalize_joint: bool,
}

/// Componentwise mean of equal-length vectors.
pub fn mean_pool<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::Empty("empty text view"))?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                expected: acc.len(),
                found: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `concat(normalize(image), normalize(mean_pool(captions)))`.
pub fn fuse<V: AsRef<[f64]>>(image: &[f64], captions: &[V]) -> Result<FusedView> {
    let text = mean_pool(captions)?;
    let mut vector = l2_normalize(image)?;
    vector.extend(l2_normalize(&text)?);
    Ok(FusedView {
        sample_id: String::new(),
        vector,
        d_img: image.len(),
        d_txt: text.len(),
    })
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Fuses every image row with the captions retrieved for it. Output records are
/// copied from `images`, so labels and ground truth pass through unchanged.
pub fn fuse_dataset(
    images: &EmbeddingBundle,
    retrievals: &[RetrievalResult],
    corpus: &EmbeddingBundle,
    opts: FusionOptions,
) -> Result<EmbeddingBundle> {
    let by_query: HashMap<&str, &RetrievalResult> =
        retrievals.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let captions = corpus.id_index();

    let rows: Vec<Vec<f32>> = (0..images.count())
        .into_par_iter()
        .map(|i| {
            let id = &images.record(i).id;
            let retrieved = by_query.get(id.as_str()).ok_or_else(|| Error::MissingRetrieval(id.clone()))?;
            let wrap = |e: Error| Error::Sample {
                id: id.clone(),
                source: Box::new(e),
            };
            let caption_vecs = retrieved
                .hits
                .iter()
                .map(|h| {
                    captions
                        .get(h.caption_id.as_str())
                        .map(|&r| widen(corpus.row(r)))
                        .ok_or_else(|| Error::UnknownCaption(h.caption_id.clone()))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            let fused = fuse(&widen(images.row(i)), &caption_vecs).map_err(wrap)?;
            let v = if opts.renormalize_joint {
                l2_normalize(&fused.vector).map_err(wrap)?
            } else {
                fused.vector
            };
            Ok(v.into_iter().map(|x| x as f32).collect())
        })
        .collect::<Result<_>>()?;

    let dim = images.dim() + corpus.dim();
    EmbeddingBundle::from_rows(dim, &rows, images.records().to_vec(), opts.renormalize_joint)
}

/// Image-only representation: each image row scaled to unit norm.
pub fn image_only(images: &EmbeddingBundle) -> Result<EmbeddingBundle> {
    let rows = images
        .rows()
        .map(|r| Ok(l2_normalize(&widen(r))?.into_iter().map(|x| x as f32).collect()))
        .collect::<Result<Vec<Vec<f32>>>>()?;
    EmbeddingBundle::from_rows(images.dim(), &rows, images.records().to_vec(), true)
}

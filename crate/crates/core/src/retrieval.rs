//! Exhaustive cross-modal top-k retrieval by cosine similarity.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{l2_norm, l2_norm_f32, EmbeddingBundle};

/// Cosine similarity of two nonzero vectors of equal length, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub caption_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Best first; equal scores ordered by ascending corpus row.
    pub hits: Vec<Hit>,
    pub k: usize,
}

/// A text corpus prepared for scanning: per-row inverse norms are computed once
/// so each score is a dot product times two scalars.
pub struct CaptionIndex<'a> {
    corpus: &'a EmbeddingBundle,
    inv_norms: Vec<f64>,
}

impl<'a> CaptionIndex<'a> {
    pub fn new(corpus: &'a EmbeddingBundle) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("empty corpus"));
        }
        let inv_norms = corpus
            .rows()
            .map(|r| {
                if corpus.normalized() {
                    Ok(1.0)
                } else {
                    match l2_norm_f32(r) {
                        n if n > 0.0 => Ok(1.0 / n),
                        _ => Err(Error::ZeroVector),
                    }
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { corpus, inv_norms })
    }

    pub fn corpus(&self) -> &EmbeddingBundle {
        self.corpus
    }

    /// Scores of `query` against every corpus row, in row order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.corpus.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.corpus.dim(),
                found: query.len(),
            });
        }
        let qn = l2_norm_f32(query);
        if qn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let q_inv = 1.0 / qn;
        Ok(self
            .corpus
            .rows()
            .zip(&self.inv_norms)
            .map(|(row, inv)| {
                let dot: f64 = row.iter().zip(query).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                (dot * inv * q_inv).clamp(-1.0, 1.0)
            })
            .collect())
    }

    pub fn topk(&self, query_id: &str, query: &[f32], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let by_rank = |a: &usize, b: &usize| -> Ordering {
            scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
        };
        let take = k.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, by_rank);
            order.truncate(take);
        }
        order.sort_unstable_by(by_rank);
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            hits: order
                .into_iter()
                .map(|i| Hit {
                    caption_id: self.corpus.record(i).id.clone(),
                    score: scores[i],
                })
                .collect(),
            k,
        })
    }
}

/// Top-k captions for one query vector.
pub fn retrieve_topk(query: &[f32], corpus: &EmbeddingBundle, k: usize) -> Result<RetrievalResult> {
    CaptionIndex::new(corpus)?.topk("", query, k)
}

/// Top-k captions for every query row, in query row order. Queries run in parallel;
/// each query's scan is sequential, so the output does not depend on scheduling.
pub fn batch_retrieve(queries: &EmbeddingBundle, corpus: &EmbeddingBundle, k: usize) -> Result<Vec<RetrievalResult>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let index = CaptionIndex::new(corpus)?;
    (0..queries.count())
        .into_par_iter()
        .map(|i| index.topk(&queries.record(i).id, queries.row(i), k))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    query_id: String,
    hits: Vec<(String, f64)>,
}

/// Writes results as JSON Lines: `{"query_id": ..., "hits": [[caption_id, score], ...]}`.
pub fn write_retrievals(results: &[RetrievalResult], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let line = DumpLine {
            query_id: r.query_id.clone(),
            hits: r.hits.iter().map(|h| (h.caption_id.clone(), h.score)).collect(),
        };
        serde_json::to_writer(&mut w, &line).expect("retrieval serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_retrievals(path: &Path) -> Result<Vec<RetrievalResult>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DumpLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, "retrieval dump", format!("line {}: {e}", lineno + 1)))?;
        let k = d.hits.len();
        out.push(RetrievalResult {
            query_id: d.query_id,
            hits: d
                .hits
                .into_iter()
                .map(|(caption_id, score)| Hit { caption_id, score })
                .collect(),
            k,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::store::{Modality, SampleRecord};
    use proptest::prelude::*;

    fn corpus_from(rows: &[Vec<f32>]) -> EmbeddingBundle {
        let recs = (0..rows.len())
            .map(|i| SampleRecord::new(format!("cap{i}"), i, Modality::Text))
            .collect();
        EmbeddingBundle::from_rows(rows[0].len(), rows, recs, false).unwrap()
    }

    fn random_rows(rng: &mut SplitMix64, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal() as f32).collect()).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[2.0, 2.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.707_106_781_186_547_5).abs() < 1e-7);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn self_retrieval() {
        let mut rng = SplitMix64::new(1);
        let rows = random_rows(&mut rng, 20, 8);
        let corpus = corpus_from(&rows);
        let r = retrieve_topk(&rows[7], &corpus, 1).unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.hits[0].caption_id, "cap7");
        assert!((r.hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_beyond_corpus_returns_all_sorted_with_index_ties() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        let corpus = corpus_from(&rows);
        let r = retrieve_topk(&[1.0, 0.0], &corpus, 10).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.caption_id.as_str()).collect();
        assert_eq!(ids, ["cap0", "cap2", "cap3", "cap1"]);
    }

    #[test]
    fn errors() {
        let corpus = corpus_from(&[vec![1.0, 0.0]]);
        assert!(matches!(
            retrieve_topk(&[1.0, 0.0, 0.0], &corpus, 1),
            Err(Error::DimensionMismatch { .. })
        ));
        let empty = EmbeddingBundle::new(2, vec![], vec![], false).unwrap();
        assert!(matches!(retrieve_topk(&[1.0, 0.0], &empty, 1), Err(Error::Empty(_))));
        assert!(batch_retrieve(&empty, &corpus, 1).unwrap().is_empty());
    }

    #[test]
    fn batch_duplicates_find_themselves() {
        let mut rng = SplitMix64::new(5);
        let mut rows = random_rows(&mut rng, 30, 6);
        let queries = rows[..3].to_vec();
        rows.rotate_left(3);
        let corpus = corpus_from(&rows);
        let q_recs = (0..3).map(|i| SampleRecord::new(format!("img{i}"), i, Modality::Image)).collect();
        let qb = EmbeddingBundle::from_rows(6, &queries, q_recs, false).unwrap();
        let res = batch_retrieve(&qb, &corpus, 1).unwrap();
        for (i, r) in res.iter().enumerate() {
            assert_eq!(r.query_id, format!("img{i}"));
            assert_eq!(r.hits[0].caption_id, format!("cap{}", 27 + i));
            assert!((r.hits[0].score - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dump_round_trip() {
        let res = vec![RetrievalResult {
            query_id: "q".into(),
            hits: vec![
                Hit { caption_id: "a".into(), score: 0.5 },
                Hit { caption_id: "b".into(), score: 0.25 },
            ],
            k: 2,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_retrievals(&res, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"query_id\":\"q\",\"hits\":[[\"a\",0.5],[\"b\",0.25]]}\n");
        assert_eq!(read_retrievals(&p).unwrap(), res);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_invariant_and_prefix_monotone(seed in any::<u64>(), c in 0.01f32..100.0, k in 1usize..10) {
            let mut rng = SplitMix64::new(seed);
            let corpus = corpus_from(&random_rows(&mut rng, 25, 5));
            let q: Vec<f32> = (0..5).map(|_| rng.normal() as f32).collect();
            let scaled: Vec<f32> = q.iter().map(|x| x * c).collect();
            let a = retrieve_topk(&q, &corpus, k).unwrap();
            let b = retrieve_topk(&scaled, &corpus, k).unwrap();
            let ids = |r: &RetrievalResult| r.hits.iter().map(|h| h.caption_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
            let longer = retrieve_topk(&q, &corpus, k + 1).unwrap();
            prop_assert_eq!(&longer.hits[..a.hits.len()], &a.hits[..]);
            for w in a.hits.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}

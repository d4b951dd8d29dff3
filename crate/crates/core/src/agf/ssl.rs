//! Explanations for self-supervised feature extractors.
//!
//! A latent vector carries no class, so the neighbour most similar to the
//! query is subtracted first. The difference keeps the features unique to the
//! query; a classifier head then names a pseudo-class, which is explained
//! through the concatenated feature-extractor/head network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{explain_trace, AgfConfig, Explanation};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One gallery line: `{"id": …, "latent": […], "logits": […]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub latent: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslGallery {
    entries: Vec<GalleryEntry>,
}

impl SslGallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Gallery("gallery is empty".into()));
        };
        let dim = first.latent.len();
        for e in &entries {
            if e.latent.len() != dim {
                return Err(Error::Gallery(format!(
                    "entry `{}` has latent length {}, expected {dim}",
                    e.id,
                    e.latent.len()
                )));
            }
            if e.latent.iter().chain(&e.logits).any(|v| !v.is_finite()) {
                return Err(Error::Gallery(format!("entry `{}` has non-finite values", e.id)));
            }
        }
        Ok(Self { entries })
    }

    /// Reads a JSON-lines file; blank lines are skipped.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Gallery(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<GalleryEntry>>>()?;
        Self::new(entries)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("gallery entries serialize") + "\n")
            .collect()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn latent_len(&self) -> usize {
        self.entries[0].latent.len()
    }

    /// Index of the closest latent in Euclidean distance, skipping entries at
    /// distance exactly zero. Ties go to the earlier entry.
    pub fn nearest(&self, latent: &[f64]) -> Result<usize> {
        if latent.len() != self.latent_len() {
            return Err(Error::Gallery(format!(
                "query latent has length {}, gallery uses {}",
                latent.len(),
                self.latent_len()
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d2: f64 = e.latent.iter().zip(latent).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 == 0.0 {
                continue;
            }
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| Error::Gallery("every gallery entry coincides with the query".into()))
    }
}

/// How the neighbour latent enters the head input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeighborFusion {
    /// `L_I − L_N`
    #[default]
    Subtract,
    /// `L_I + L_N`
    Add,
    /// `L_I` alone; the neighbour is still looked up and reported.
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslExplanation<T> {
    pub neighbor: usize,
    pub neighbor_id: String,
    /// Head input after fusion.
    pub fused_latent: Vec<f64>,
    pub head_logits: Vec<f64>,
    pub explanation: Explanation<T>,
}

pub fn ssl_explain<T: Scalar>(
    features: &Model<T>,
    head: &Model<T>,
    image: &Tensor<T>,
    gallery: &SslGallery,
    cfg: &AgfConfig,
    fusion: NeighborFusion,
) -> Result<SslExplanation<T>> {
    let feat_trace = features.forward(image)?;
    let query: Vec<f64> = feat_trace.logits().data().iter().map(|v| v.as_f64()).collect();
    let neighbor = gallery.nearest(&query)?;
    let ln = &gallery.entries()[neighbor].latent;
    let fused: Vec<f64> = match fusion {
        NeighborFusion::Subtract => query.iter().zip(ln).map(|(a, b)| a - b).collect(),
        NeighborFusion::Add => query.iter().zip(ln).map(|(a, b)| a + b).collect(),
        NeighborFusion::Ignore => query.clone(),
    };
    let s = Tensor::new(head.input_shape().to_vec(), fused.iter().map(|&v| T::of(v)).collect())?;
    let head_trace = head.forward(&s)?;
    let t = head_trace.logits().argmax();
    let head_logits = head_trace.logits().data().iter().map(|v| v.as_f64()).collect();

    let combined = Model::chain(features, head)?;
    let (mut inputs, _) = feat_trace.into_parts();
    let (head_inputs, logits) = head_trace.into_parts();
    inputs.extend(head_inputs);
    let trace = ForwardTrace::from_parts(&combined, inputs, logits)?;
    let explanation = explain_trace(&combined, &trace, t, cfg)?;
    Ok(SslExplanation {
        neighbor,
        neighbor_id: gallery.entries()[neighbor].id.clone(),
        fused_latent: fused,
        head_logits,
        explanation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, latent: &[f64]) -> GalleryEntry {
        GalleryEntry {
            id: id.into(),
            latent: latent.to_vec(),
            logits: vec![0.0],
        }
    }

    #[test]
    fn single_distinct_entry_is_chosen() {
        let g = SslGallery::new(vec![entry("a", &[1.0, 2.0])]).unwrap();
        assert_eq!(g.nearest(&[5.0, 5.0]).unwrap(), 0);
    }

    #[test]
    fn self_match_is_skipped() {
        let g = SslGallery::new(vec![
            entry("self", &[1.0, 1.0]),
            entry("far", &[4.0, 4.0]),
            entry("near", &[1.5, 1.0]),
        ])
        .unwrap();
        assert_eq!(g.nearest(&[1.0, 1.0]).unwrap(), 2);
        let only_self = SslGallery::new(vec![entry("self", &[1.0, 1.0])]).unwrap();
        assert!(only_self.nearest(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let entries: Vec<_> = (0..8)
                .map(|i| {
                    entry(
                        &i.to_string(),
                        &(0..5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dists: Vec<f64> = entries
                .iter()
                .map(|e| {
                    e.latent
                        .iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let want = (0..8)
                .min_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap())
                .unwrap();
            assert_eq!(SslGallery::new(entries).unwrap().nearest(&q).unwrap(), want);
        }
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let g = SslGallery::new(vec![entry("a", &[1.0, 2.0]), entry("b", &[0.5, -1.0])]).unwrap();
        assert_eq!(SslGallery::parse_jsonl(&g.to_jsonl()).unwrap(), g);
        assert!(SslGallery::parse_jsonl("").is_err());
        assert!(SslGallery::parse_jsonl(
            "{\"id\":\"a\",\"latent\":[1],\"logits\":[]}\n{\"id\":\"b\",\"latent\":[1,2],\"logits\":[]}"
        )
        .is_err());
        assert!(SslGallery::parse_jsonl("not json").is_err());
    }
}

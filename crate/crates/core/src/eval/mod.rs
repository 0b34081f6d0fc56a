//! Ranking, retrieval metrics and the ablation variants.

mod report;
mod variants;

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::PartFeatureSet;
use crate::linalg;

pub use report::{write_csv, CmcPoint, EvalReport, NeighborhoodStats, QueryResult, CSV_HEADER, REPORT_SCHEMA};
pub use variants::{representations, run_variant, run_variant_with, EvalOptions, Representations, Variant, VariantParams};

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub similarity: f64,
}

/// Hook applied to each ranked list before metrics (e.g. a re-ranking
/// stage). The default does nothing.
pub trait PostProcess: Sync {
    fn apply(&self, _query: usize, _ranked: &mut Vec<Ranked>) {}
}

pub struct NoPostProcess;

impl PostProcess for NoPostProcess {}

fn by_similarity(a: &Ranked, b: &Ranked) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.index.cmp(&b.index))
}

/// Orders `n` gallery entries by descending `similarity(j)`, ties by index.
pub fn rank_by(n: usize, similarity: impl Fn(usize) -> f64) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = (0..n)
        .map(|index| Ranked {
            index,
            similarity: similarity(index),
        })
        .collect();
    out.sort_by(by_similarity);
    out
}

/// Descending cosine similarity of `query` to every gallery vector.
pub fn rank(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<Ranked>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != query.len()) {
        return Err(Error::Shape(format!(
            "query has dimension {}, gallery entry {}",
            query.len(),
            g.len()
        )));
    }
    Ok(rank_by(gallery.len(), |j| linalg::cosine(query, &gallery[j])))
}

/// Mean per-part cosine over the parts visible in both images; −1 when they
/// share no visible part.
pub fn visible_similarity(a: &PartFeatureSet, b: &PartFeatureSet) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.parts() {
        if a.is_visible(p) && b.is_visible(p) {
            sum += linalg::cosine(&a.part_f64(p), &b.part_f64(p));
            n += 1;
        }
    }
    if n == 0 {
        -1.0
    } else {
        sum / n as f64
    }
}

/// Mean over relevant positions `i` (1-based) of precision at `i`. `None`
/// when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// 1-based rank of the first relevant item.
pub fn first_hit(relevant: &[bool]) -> Option<usize> {
    relevant.iter().position(|&r| r).map(|i| i + 1)
}

/// Fraction of queries whose first hit is within rank `r`, for each `r`.
pub fn cmc(first_hits: &[Option<usize>], ranks: &[usize]) -> Vec<f64> {
    let n = first_hits.len().max(1) as f64;
    ranks
        .iter()
        .map(|&r| first_hits.iter().filter(|h| h.is_some_and(|h| h <= r)).count() as f64 / n)
        .collect()
}

/// Per-query relevance lists scored in parallel; mean AP over the queries
/// with at least one relevant item, whose first hits also feed CMC.
pub struct Scores {
    pub ap: Vec<Option<f64>>,
    pub first_hits: Vec<Option<usize>>,
    pub map: f64,
    pub cmc: Vec<f64>,
}

pub fn score(relevance: &[Vec<bool>], ranks: &[usize]) -> Scores {
    let ap: Vec<Option<f64>> = relevance.par_iter().map(|r| average_precision(r)).collect();
    let first_hits: Vec<Option<usize>> = relevance.iter().map(|r| first_hit(r)).collect();
    let evaluated: Vec<f64> = ap.iter().flatten().copied().collect();
    let valid_hits: Vec<Option<usize>> = ap
        .iter()
        .zip(&first_hits)
        .filter(|(a, _)| a.is_some())
        .map(|(_, h)| *h)
        .collect();
    let map = if evaluated.is_empty() {
        0.0
    } else {
        evaluated.iter().sum::<f64>() / evaluated.len() as f64
    };
    Scores {
        cmc: cmc(&valid_hits, ranks),
        ap,
        first_hits,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_average_precision() {
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true]), Some(1.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn irrelevant_prefix_gives_zero_cmc() {
        let c = cmc(&[Some(3)], &[1, 2, 3]);
        assert_eq!(c, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn exact_copy_ranks_first() {
        let q = vec![0.2, 0.7, 0.1];
        let g = vec![vec![0.9, 0.1, 0.0], q.clone(), vec![0.1, 0.9, 0.3]];
        assert_eq!(rank(&q, &g).unwrap()[0].index, 1);
    }

    #[test]
    fn two_item_order_forced() {
        let r = rank_by(2, |j| [0.2, 0.9][j]);
        assert_eq!(r.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn empty_gallery_rejected() {
        assert!(matches!(rank(&[1.0], &[]), Err(Error::EmptyGallery)));
    }

    #[test]
    fn visible_similarity_without_shared_parts() {
        let a = PartFeatureSet::new("a", None, None, 2, 1, vec![1.0, 1.0], vec![1.0, 0.0]).unwrap();
        let b = PartFeatureSet::new("b", None, None, 2, 1, vec![1.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(visible_similarity(&a, &b), -1.0);
        assert_eq!(visible_similarity(&a, &a), 1.0);
    }
}

//! Gallery index and neighborhood search.
//!
//! For every visible part of a query, the `K` most similar gallery entries
//! (cosine ≥ θ, same part, part visible in the gallery entry) form a
//! candidate set; the neighborhood is the intersection of those sets. Search
//! is an exact linear scan.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{Dataset, PartFeatureSet};
use crate::linalg;

struct PartRows {
    /// Item index of each row.
    items: Vec<usize>,
    /// Row-major unit vectors.
    data: Vec<f64>,
}

/// Immutable per-part feature matrices over a gallery.
pub struct GalleryIndex {
    parts: usize,
    dim: usize,
    items: Vec<PartFeatureSet>,
    by_id: HashMap<String, usize>,
    rows: Vec<PartRows>,
}

/// A scored gallery entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub item: usize,
    pub similarity: f64,
}

/// Builds the index. Items are L2-normalized on the way in; an entry lands in
/// part `p`'s matrix iff its part `p` is visible.
pub fn build_index(gallery: &Dataset) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let items = gallery.normalized()?.items().to_vec();
    let (parts, dim) = (gallery.parts(), gallery.dim());
    let mut rows: Vec<PartRows> = (0..parts)
        .map(|_| PartRows {
            items: Vec::new(),
            data: Vec::new(),
        })
        .collect();
    for (i, it) in items.iter().enumerate() {
        for p in it.visible_parts() {
            rows[p].items.push(i);
            rows[p].data.extend(it.part(p).iter().map(|&v| f64::from(v)));
        }
    }
    let by_id = items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.image_id.clone(), i))
        .collect();
    Ok(GalleryIndex {
        parts,
        dim,
        items,
        by_id,
        rows,
    })
}

fn by_score_then_id(items: &[PartFeatureSet]) -> impl Fn(&Hit, &Hit) -> Ordering + '_ {
    move |a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| items[a.item].image_id.cmp(&items[b.item].image_id))
    }
}

impl GalleryIndex {
    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[PartFeatureSet] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    /// Number of gallery rows indexed for part `p`.
    pub fn part_rows(&self, p: usize) -> usize {
        self.rows[p].items.len()
    }

    /// Up to `k` entries with similarity ≥ `theta` on part `p`, by descending
    /// similarity then ascending image id. `exclude` drops one item before
    /// selection.
    pub fn part_hits(&self, p: usize, query: &[f64], k: usize, theta: f64, exclude: Option<usize>) -> Vec<Hit> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let rows = &self.rows[p];
        let mut hits: Vec<Hit> = rows
            .items
            .iter()
            .enumerate()
            .filter(|&(_, &item)| Some(item) != exclude)
            .map(|(r, &item)| Hit {
                item,
                similarity: linalg::dot(query, &rows.data[r * self.dim..(r + 1) * self.dim]),
            })
            .filter(|h| h.similarity >= theta)
            .collect();
        hits.sort_by(by_score_then_id(&self.items));
        hits.truncate(k);
        hits
    }

    /// Image ids of [`GalleryIndex::part_hits`].
    pub fn part_neighbors(&self, p: usize, query: &[f64], k: usize, theta: f64) -> Vec<String> {
        self.part_hits(p, query, k, theta, None)
            .into_iter()
            .map(|h| self.items[h.item].image_id.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Member {
    pub image_id: String,
    #[serde(skip)]
    pub item: usize,
    /// Minimum similarity over the query's visible parts.
    pub min_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborSet {
    pub target: String,
    #[serde(skip)]
    pub target_person: Option<i64>,
    pub members: Vec<Member>,
    /// Candidate ids per part; `None` for parts not visible in the target.
    pub per_part: Vec<Option<Vec<String>>>,
    pub fallback: bool,
}

impl NeighborSet {
    pub fn member_ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.image_id.as_str()).collect()
    }
}

/// Intersection of per-part neighbor lists over the query's visible parts.
/// A query that is itself in the gallery is excluded from its own
/// candidates. An empty intersection sets `fallback`.
pub fn image_neighborhood(index: &GalleryIndex, query: &PartFeatureSet, k: usize, theta: f64) -> Result<NeighborSet> {
    if query.num_visible() == 0 {
        return Err(Error::FullyOccluded(query.image_id.clone()));
    }
    if query.parts() != index.parts || query.dim() != index.dim {
        return Err(Error::Shape(format!(
            "{}: query is M={} D={}, index is M={} D={}",
            query.image_id,
            query.parts(),
            query.dim(),
            index.parts,
            index.dim
        )));
    }
    let exclude = index.position(&query.image_id);
    let mut per_part = vec![None; index.parts];
    // item -> (parts hit, min similarity)
    let mut tally: HashMap<usize, (usize, f64)> = HashMap::new();
    let visible: Vec<usize> = query.visible_parts().collect();
    for &p in &visible {
        let hits = index.part_hits(p, &query.part_f64(p), k, theta, exclude);
        for h in &hits {
            let e = tally.entry(h.item).or_insert((0, f64::INFINITY));
            e.0 += 1;
            e.1 = e.1.min(h.similarity);
        }
        per_part[p] = Some(hits.iter().map(|h| index.items[h.item].image_id.clone()).collect());
    }
    let mut members: Vec<Hit> = tally
        .into_iter()
        .filter(|(_, (count, _))| *count == visible.len())
        .map(|(item, (_, sim))| Hit {
            item,
            similarity: sim,
        })
        .collect();
    members.sort_by(by_score_then_id(&index.items));
    let members: Vec<Member> = members
        .into_iter()
        .map(|h| Member {
            image_id: index.items[h.item].image_id.clone(),
            item: h.item,
            min_similarity: h.similarity,
        })
        .collect();
    Ok(NeighborSet {
        target: query.image_id.clone(),
        target_person: query.person_id,
        fallback: members.is_empty(),
        members,
        per_part,
    })
}

/// Drops members whose identity differs from the target's.
pub fn oracle_filter(ns: &NeighborSet, index: &GalleryIndex) -> Result<NeighborSet> {
    let target = ns
        .target_person
        .ok_or_else(|| Error::MissingLabel(format!("target {} has no person_id", ns.target)))?;
    let mut members = Vec::with_capacity(ns.members.len());
    for m in &ns.members {
        let pid = index.items[m.item]
            .person_id
            .ok_or_else(|| Error::MissingLabel(format!("neighbor {} has no person_id", m.image_id)))?;
        if pid == target {
            members.push(m.clone());
        }
    }
    Ok(NeighborSet {
        fallback: members.is_empty(),
        members,
        ..ns.clone()
    })
}

/// Fraction of members whose identity differs from the target's, when both
/// are labelled.
pub fn outlier_rate(ns: &NeighborSet, index: &GalleryIndex) -> Option<f64> {
    let target = ns.target_person?;
    if ns.members.is_empty() {
        return None;
    }
    let mut wrong = 0usize;
    for m in &ns.members {
        if index.items[m.item].person_id? != target {
            wrong += 1;
        }
    }
    Some(wrong as f64 / ns.members.len() as f64)
}

/// Plain set of member ids, for comparisons in tests and diagnostics.
pub fn member_set(ns: &NeighborSet) -> HashSet<String> {
    ns.members.iter().map(|m| m.image_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Split;

    fn item(id: &str, person: i64, parts: &[[f32; 2]], vis: &[f64]) -> PartFeatureSet {
        PartFeatureSet::new(
            id,
            Some(person),
            None,
            parts.len(),
            2,
            parts.iter().flatten().copied().collect(),
            vis.to_vec(),
        )
        .unwrap()
    }

    fn unit(angle: f64) -> [f32; 2] {
        [angle.cos() as f32, angle.sin() as f32]
    }

    #[test]
    fn occluded_parts_are_not_indexed() {
        let ds = Dataset::new(
            Split::Gallery,
            2,
            2,
            vec![
                item("A", 1, &[unit(0.0), unit(0.0)], &[1.0, 1.0]),
                item("B", 2, &[unit(0.1), unit(0.1)], &[1.0, 0.0]),
                item("C", 3, &[unit(0.2), unit(0.2)], &[1.0, 1.0]),
            ],
        )
        .unwrap();
        let idx = build_index(&ds).unwrap();
        assert_eq!(idx.part_rows(0), 3);
        assert_eq!(idx.part_rows(1), 2);
    }

    #[test]
    fn empty_gallery_rejected() {
        let ds = Dataset::new(Split::Gallery, 1, 2, vec![]).unwrap();
        assert!(matches!(build_index(&ds), Err(Error::EmptyGallery)));
    }

    #[test]
    fn threshold_and_k_select_expected_ids() {
        // similarities 0.9, 0.75, 0.6 against the query (1, 0)
        let g: Vec<_> = [("A", 0.9f64), ("B", 0.75), ("C", 0.6)]
            .iter()
            .enumerate()
            .map(|(i, (id, s))| item(id, i as i64, &[unit(s.acos())], &[1.0]))
            .collect();
        let idx = build_index(&Dataset::new(Split::Gallery, 1, 2, g).unwrap()).unwrap();
        assert_eq!(idx.part_neighbors(0, &[1.0, 0.0], 10, 0.7), vec!["A", "B"]);
        assert_eq!(idx.part_neighbors(0, &[1.0, 0.0], 1, 0.0), vec!["A"]);
        assert!(idx.part_neighbors(0, &[1.0, 0.0], 10, 0.95).is_empty());
    }

    #[test]
    fn self_is_top_hit_and_excluded_from_own_neighborhood() {
        let g = vec![
            item("A", 1, &[unit(0.0)], &[1.0]),
            item("B", 1, &[unit(0.2)], &[1.0]),
        ];
        let ds = Dataset::new(Split::Gallery, 1, 2, g).unwrap();
        let idx = build_index(&ds).unwrap();
        let hits = idx.part_hits(0, &[1.0, 0.0], 5, -1.0, None);
        assert_eq!(hits[0].item, 0);
        assert!((hits[0].similarity - 1.0).abs() < 1e-7);
        let ns = image_neighborhood(&idx, &ds.items()[0], 5, -1.0).unwrap();
        assert_eq!(ns.member_ids(), vec!["B"]);
    }

    #[test]
    fn intersection_over_visible_parts() {
        // part 0 neighbors {A, B}; part 1 neighbors {B, C}
        let g = vec![
            item("A", 1, &[unit(0.0), unit(3.0)], &[1.0, 1.0]),
            item("B", 2, &[unit(0.1), unit(0.1)], &[1.0, 1.0]),
            item("C", 3, &[unit(3.0), unit(0.0)], &[1.0, 1.0]),
        ];
        let idx = build_index(&Dataset::new(Split::Gallery, 2, 2, g).unwrap()).unwrap();
        let q = item("q", 9, &[unit(0.0), unit(0.0)], &[1.0, 1.0]);
        let ns = image_neighborhood(&idx, &q, 10, 0.5).unwrap();
        assert_eq!(ns.member_ids(), vec!["B"]);
        assert!(!ns.fallback);
        // with part 1 occluded only part 0 counts
        let q1 = item("q", 9, &[unit(0.0), unit(0.0)], &[1.0, 0.0]);
        let ns1 = image_neighborhood(&idx, &q1, 10, 0.5).unwrap();
        assert_eq!(ns1.member_ids(), vec!["A", "B"]);
        assert_eq!(ns1.per_part[1], None);
    }

    #[test]
    fn disjoint_parts_fall_back() {
        let g = vec![
            item("A", 1, &[unit(0.0), unit(3.0)], &[1.0, 1.0]),
            item("C", 3, &[unit(3.0), unit(0.0)], &[1.0, 1.0]),
        ];
        let idx = build_index(&Dataset::new(Split::Gallery, 2, 2, g).unwrap()).unwrap();
        let q = item("q", 9, &[unit(0.0), unit(0.0)], &[1.0, 1.0]);
        let ns = image_neighborhood(&idx, &q, 10, 0.5).unwrap();
        assert!(ns.members.is_empty() && ns.fallback);
    }

    #[test]
    fn fully_occluded_query_is_error() {
        let g = vec![item("A", 1, &[unit(0.0)], &[1.0])];
        let idx = build_index(&Dataset::new(Split::Gallery, 1, 2, g).unwrap()).unwrap();
        let q = item("q", 9, &[unit(0.0)], &[0.2]);
        assert!(matches!(image_neighborhood(&idx, &q, 5, 0.0), Err(Error::FullyOccluded(_))));
    }

    #[test]
    fn oracle_filter_keeps_same_identity() {
        let g = vec![
            item("A", 1, &[unit(0.0)], &[1.0]),
            item("B", 1, &[unit(0.05)], &[1.0]),
            item("C", 2, &[unit(0.1)], &[1.0]),
        ];
        let idx = build_index(&Dataset::new(Split::Gallery, 1, 2, g).unwrap()).unwrap();
        let q = item("q", 1, &[unit(0.0)], &[1.0]);
        let ns = image_neighborhood(&idx, &q, 10, 0.0).unwrap();
        assert_eq!(ns.members.len(), 3);
        assert!((outlier_rate(&ns, &idx).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let f = oracle_filter(&ns, &idx).unwrap();
        assert_eq!(f.member_ids(), vec!["A", "B"]);
        assert_eq!(oracle_filter(&f, &idx).unwrap(), f);

        let q2 = item("q2", 7, &[unit(0.0)], &[1.0]);
        let wrong = oracle_filter(&image_neighborhood(&idx, &q2, 10, 0.0).unwrap(), &idx).unwrap();
        assert!(wrong.members.is_empty() && wrong.fallback);

        let mut unlabeled = ns.clone();
        unlabeled.target_person = None;
        assert!(matches!(oracle_filter(&unlabeled, &idx), Err(Error::MissingLabel(_))));
    }
}

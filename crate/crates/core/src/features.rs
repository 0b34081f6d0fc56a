//! Per-image part features and the datasets built from them.
//!
//! Parts are stored in a fixed global order: the horizontal stripes from top
//! to bottom, then the vertical stripes from left to right. With the default
//! layout that is `h1 h2 h3 h4 v1 v2`.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const HORIZONTAL_PARTS: usize = 4;
pub const VERTICAL_PARTS: usize = 2;
pub const DEFAULT_PARTS: usize = HORIZONTAL_PARTS + VERTICAL_PARTS;
/// Scores at or above this are visible.
pub const VISIBILITY_THRESHOLD: f64 = 0.5;

/// Display name of part `p` (`h1`..`h4`, `v1`, `v2` for the default layout).
pub fn part_name(p: usize, parts: usize) -> String {
    if parts == DEFAULT_PARTS {
        if p < HORIZONTAL_PARTS {
            format!("h{}", p + 1)
        } else {
            format!("v{}", p - HORIZONTAL_PARTS + 1)
        }
    } else {
        format!("p{}", p + 1)
    }
}

/// One image: `parts` sub-features of dimension `dim` plus per-part visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatureSet {
    pub image_id: String,
    pub person_id: Option<i64>,
    pub camera_id: Option<i64>,
    parts: usize,
    dim: usize,
    features: Vec<f32>,
    visibility_scores: Vec<f64>,
    visibility_mask: Vec<bool>,
}

impl PartFeatureSet {
    /// Builds a feature set; the mask is derived from the scores.
    pub fn new(
        image_id: impl Into<String>,
        person_id: Option<i64>,
        camera_id: Option<i64>,
        parts: usize,
        dim: usize,
        features: Vec<f32>,
        visibility_scores: Vec<f64>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if parts == 0 || dim == 0 {
            return Err(Error::Shape(format!("{image_id}: M and D must be positive")));
        }
        if features.len() != parts * dim {
            return Err(Error::Shape(format!(
                "{image_id}: expected {} feature values, got {}",
                parts * dim,
                features.len()
            )));
        }
        if visibility_scores.len() != parts {
            return Err(Error::Shape(format!(
                "{image_id}: expected {parts} visibility scores, got {}",
                visibility_scores.len()
            )));
        }
        if let Some(s) = visibility_scores
            .iter()
            .find(|s| !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Shape(format!(
                "{image_id}: visibility score {s} outside [0, 1]"
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                image_id,
                part: i / dim,
            });
        }
        let visibility_mask = visibility_scores
            .iter()
            .map(|&s| s >= VISIBILITY_THRESHOLD)
            .collect();
        Ok(Self {
            image_id,
            person_id,
            camera_id,
            parts,
            dim,
            features,
            visibility_scores,
            visibility_mask,
        })
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn part(&self, p: usize) -> &[f32] {
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    pub fn part_f64(&self, p: usize) -> Vec<f64> {
        self.part(p).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn visibility_scores(&self) -> &[f64] {
        &self.visibility_scores
    }

    pub fn visibility_mask(&self) -> &[bool] {
        &self.visibility_mask
    }

    pub fn is_visible(&self, p: usize) -> bool {
        self.visibility_mask[p]
    }

    pub fn visible_parts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.parts).filter(|&p| self.visibility_mask[p])
    }

    pub fn num_visible(&self) -> usize {
        self.visibility_mask.iter().filter(|&&v| v).count()
    }

    /// Copy with every part marked visible (score 1). Used by the ablations
    /// that ignore occlusion state.
    pub fn with_all_visible(&self) -> Self {
        let mut out = self.clone();
        out.visibility_scores.iter_mut().for_each(|s| *s = 1.0);
        out.visibility_mask.iter_mut().for_each(|m| *m = true);
        out
    }

    fn force_occluded(&mut self, p: usize) {
        self.visibility_scores[p] = 0.0;
        self.visibility_mask[p] = false;
    }
}

/// Scales every part to unit L2 norm. All-zero parts stay zero and are
/// marked occluded. Vectors already at unit norm (to f32 precision) are left
/// untouched, so the operation is exactly idempotent.
pub fn l2_normalize_parts(fs: &PartFeatureSet) -> Result<PartFeatureSet> {
    let mut out = fs.clone();
    for p in 0..fs.parts {
        let part = &mut out.features[p * fs.dim..(p + 1) * fs.dim];
        if part.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                image_id: fs.image_id.clone(),
                part: p,
            });
        }
        let sq: f64 = part.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        if sq == 0.0 {
            out.force_occluded(p);
            continue;
        }
        if (sq - 1.0).abs() <= 4.0 * f64::from(f32::EPSILON) {
            continue;
        }
        let n = sq.sqrt();
        for v in part.iter_mut() {
            *v = (f64::from(*v) / n) as f32;
        }
    }
    Ok(out)
}

/// Concatenation of all part vectors in part order.
pub fn baseline_representation(fs: &PartFeatureSet) -> Vec<f64> {
    fs.features.iter().map(|&v| f64::from(v)).collect()
}

/// Concatenation with visible parts unit-normalized and occluded parts
/// zero-filled.
pub fn visible_representation(fs: &PartFeatureSet) -> Vec<f64> {
    let mut out = vec![0.0; fs.parts * fs.dim];
    for p in fs.visible_parts() {
        let v = linalg::normalized(&fs.part_f64(p));
        out[p * fs.dim..(p + 1) * fs.dim].copy_from_slice(&v);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    parts: usize,
    dim: usize,
    items: Vec<PartFeatureSet>,
}

impl Dataset {
    pub fn new(split: Split, parts: usize, dim: usize, items: Vec<PartFeatureSet>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if it.parts != parts || it.dim != dim {
                return Err(Error::Shape(format!(
                    "{}: has M={} D={}, dataset expects M={parts} D={dim}",
                    it.image_id, it.parts, it.dim
                )));
            }
            if split == Split::Train && it.person_id.is_none() {
                return Err(Error::MissingLabel(format!(
                    "train image {} has no person_id",
                    it.image_id
                )));
            }
            if !seen.insert(it.image_id.as_str()) {
                return Err(Error::DuplicateImage(it.image_id.clone()));
            }
        }
        Ok(Self {
            split,
            parts,
            dim,
            items,
        })
    }

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

    pub fn has_labels(&self) -> bool {
        self.items.iter().all(|i| i.person_id.is_some())
    }

    /// Sorted distinct person ids.
    pub fn identities(&self) -> Vec<i64> {
        self.items
            .iter()
            .filter_map(|i| i.person_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }

    /// Normalizes every item with [`l2_normalize_parts`].
    pub fn normalized(&self) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(l2_normalize_parts)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, ..self.clone() })
    }

    pub fn map_items(&self, f: impl Fn(&PartFeatureSet) -> PartFeatureSet) -> Self {
        Self {
            items: self.items.iter().map(f).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs(parts: usize, dim: usize, feats: Vec<f32>) -> PartFeatureSet {
        PartFeatureSet::new("a", Some(1), None, parts, dim, feats, vec![1.0; parts]).unwrap()
    }

    #[test]
    fn normalizes_three_four() {
        let out = l2_normalize_parts(&fs(1, 2, vec![3.0, 4.0])).unwrap();
        assert_eq!(out.part(0), &[0.6, 0.8]);
        assert!(out.is_visible(0));
    }

    #[test]
    fn zero_part_becomes_occluded() {
        let out = l2_normalize_parts(&fs(2, 2, vec![0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.part(0), &[0.0, 0.0]);
        assert!(!out.is_visible(0));
        assert_eq!(out.visibility_scores()[0], 0.0);
        assert!(out.is_visible(1));
    }

    #[test]
    fn non_finite_rejected() {
        let err = PartFeatureSet::new("x", None, None, 1, 2, vec![f32::NAN, 0.0], vec![1.0]);
        assert!(matches!(err, Err(Error::NonFiniteFeature { .. })));
    }

    #[test]
    fn mask_follows_threshold() {
        let f = PartFeatureSet::new("x", None, None, 3, 1, vec![1.0; 3], vec![0.49, 0.5, 0.9])
            .unwrap();
        assert_eq!(f.visibility_mask(), &[false, true, true]);
    }

    #[test]
    fn baseline_concatenates_in_part_order() {
        let f = fs(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(baseline_representation(&f), vec![1.0, 0.0, 0.0, 1.0]);
        let g = PartFeatureSet { image_id: "b".into(), ..f.clone() };
        assert_eq!(baseline_representation(&f), baseline_representation(&g));
    }

    #[test]
    fn default_part_names() {
        let names: Vec<_> = (0..6).map(|p| part_name(p, 6)).collect();
        assert_eq!(names, ["h1", "h2", "h3", "h4", "v1", "v2"]);
    }

    #[test]
    fn train_split_requires_labels() {
        let item = PartFeatureSet::new("x", None, None, 1, 1, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            Dataset::new(Split::Train, 1, 1, vec![item.clone()]),
            Err(Error::MissingLabel(_))
        ));
        assert!(Dataset::new(Split::Gallery, 1, 1, vec![item]).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let item = fs(1, 1, vec![1.0]);
        assert!(matches!(
            Dataset::new(Split::Gallery, 1, 1, vec![item.clone(), item]),
            Err(Error::DuplicateImage(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalization_is_idempotent(v in proptest::collection::vec(-100f32..100f32, 12)) {
                prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
                let once = l2_normalize_parts(&fs(3, 4, v)).unwrap();
                let twice = l2_normalize_parts(&once).unwrap();
                prop_assert_eq!(once.features(), twice.features());
                for p in once.visible_parts() {
                    let n = linalg::norm(&once.part_f64(p));
                    prop_assert!((n - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn output_dimension_is_m_times_d(m in 1usize..7, d in 1usize..9) {
                let f = fs(m, d, vec![0.5; m * d]);
                prop_assert_eq!(baseline_representation(&f).len(), m * d);
            }
        }
    }
}

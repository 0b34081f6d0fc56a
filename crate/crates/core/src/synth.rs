//! Seed-deterministic synthetic occluded-retrieval data.
//!
//! Each identity has one non-negative unit prototype per part, drawn around
//! one of a few appearance centres shared across identities. A visible part
//! is the prototype plus identity noise plus a per-camera offset; an occluded
//! part is drawn around one of a few obstacle centres shared by everybody, so
//! occluded parts of different people look alike.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, PartFeatureSet, Split, DEFAULT_PARTS, HORIZONTAL_PARTS};
use crate::linalg::{self, Matrix};
use crate::occlusion::{BodyMask, PartLayout, Rect};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub d_raw: usize,
    pub d: usize,
    pub m: usize,
    pub occlusion_rate: f64,
    /// Norm scale of the per-image identity noise.
    pub intra_identity_noise: f64,
    pub num_obstacle_clusters: usize,
    pub obstacle_noise: f64,
    pub camera_count: usize,
    /// Norm scale of the per-camera offsets.
    pub camera_noise: f64,
    /// Dimension of the per-part nuisance subspace holding camera offsets
    /// and per-image clutter.
    pub nuisance_rank: usize,
    /// Norm scale of the per-image clutter inside the nuisance subspace.
    pub clutter_noise: f64,
    /// Shared appearance centres per part ("garments"); identities drawing
    /// the same centre look alike on that part.
    pub garments_per_part: usize,
    /// Norm scale of an identity's deviation from its garment centre.
    pub identity_spread: f64,
    /// Fraction of identities assigned to the training split.
    pub train_fraction: f64,
    /// Occluded images per test identity placed in the query split.
    pub queries_per_identity: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_identities: 200,
            images_per_identity: 20,
            d_raw: 64,
            d: 32,
            m: DEFAULT_PARTS,
            occlusion_rate: 0.5,
            intra_identity_noise: 0.15,
            num_obstacle_clusters: 5,
            obstacle_noise: 0.3,
            camera_count: 4,
            camera_noise: 0.4,
            nuisance_rank: 3,
            clutter_noise: 0.5,
            garments_per_part: 20,
            identity_spread: 0.6,
            train_fraction: 0.5,
            queries_per_identity: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Synth(m.to_string()));
        if self.num_identities < 2 {
            return bad("num_identities must be at least 2");
        }
        if self.images_per_identity < 2 {
            return bad("images_per_identity must be at least 2");
        }
        if self.d == 0 || self.d_raw == 0 || self.m == 0 {
            return bad("d, d_raw and m must be positive");
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate must lie in [0, 1)");
        }
        if self.m < 2 && self.occlusion_rate > 0.0 {
            return bad("occlusion needs at least 2 parts");
        }
        if self.num_obstacle_clusters == 0 || self.camera_count == 0 || self.garments_per_part == 0 {
            return bad("need at least one obstacle cluster, camera and garment");
        }
        for (name, v) in [
            ("intra_identity_noise", self.intra_identity_noise),
            ("obstacle_noise", self.obstacle_noise),
            ("camera_noise", self.camera_noise),
            ("clutter_noise", self.clutter_noise),
            ("identity_spread", self.identity_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Synth(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.queries_per_identity >= self.images_per_identity {
            return bad("queries_per_identity leaves no gallery images");
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        ((self.num_identities as f64 * self.train_fraction).round() as usize).clamp(1, self.num_identities - 1)
    }
}

/// Ground truth for one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: String,
    pub split: Split,
    pub person_id: i64,
    pub camera_id: i64,
    pub visible: Vec<bool>,
    /// Obstacle cluster covering the occluded parts.
    pub obstacle: Option<usize>,
}

/// Same- versus different-identity cosine over visible parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub same_identity: f64,
    pub different_identity: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    pub separation: SeparationStats,
    pub records: Vec<TruthRecord>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
    pub truth: Truth,
}

fn relu_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let unit = Normal::<f64>::new(0.0, 1.0).expect("valid sigma");
    loop {
        let v: Vec<f64> = (0..d).map(|_| unit.sample(rng).max(0.0)).collect();
        if linalg::norm(&v) > 0.0 {
            return linalg::normalized(&v);
        }
    }
}

fn noise<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    let n = Normal::new(0.0, scale / (d as f64).sqrt()).expect("valid sigma");
    (0..d).map(|_| n.sample(rng)).collect()
}

/// `Σ coeffs[k] · basis[k]`.
fn combine(basis: &[Vec<f64>], coeffs: &[f64], d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for (b, &c) in basis.iter().zip(coeffs) {
        linalg::axpy(c, b, &mut v);
    }
    v
}

/// `normalize(relu(v))`, or `fallback` if nothing survives the ReLU.
fn rectify(v: &[f64], fallback: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    if linalg::norm(&r) > 0.0 {
        linalg::normalized(&r)
    } else {
        fallback.to_vec()
    }
}

/// Occlusion patterns as sets of occluded parts. With the default layout
/// they match the mask fixtures: bottom one, two or three stripes, the top
/// stripe, or either vertical half.
pub fn occlusion_patterns(m: usize) -> Vec<Vec<usize>> {
    if m == DEFAULT_PARTS {
        let h = HORIZONTAL_PARTS;
        return vec![
            vec![h - 1],
            vec![h - 2, h - 1],
            vec![h - 3, h - 2, h - 1, h, h + 1],
            vec![0],
            vec![h],
            vec![h + 1],
        ];
    }
    (1..=(m / 2).max(1)).map(|len| ((m - len)..m).collect()).collect()
}

/// Generates the train, query and gallery splits plus ground truth. The
/// first `num_train_identities` identities form the training split; each
/// remaining identity contributes up to `queries_per_identity` occluded
/// images as queries and the rest to the gallery.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, d) = (spec.m, spec.d);
    let obstacles: Vec<Vec<Vec<f64>>> = (0..spec.num_obstacle_clusters)
        .map(|_| (0..m).map(|_| relu_unit(&mut rng, d)).collect())
        .collect();
    let nuisance: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| (0..spec.nuisance_rank).map(|_| linalg::normalized(&noise(&mut rng, d, 1.0))).collect())
        .collect();
    // camera and clutter coefficients are shared by all parts of an image
    let cameras: Vec<Vec<f64>> = (0..spec.camera_count)
        .map(|_| noise(&mut rng, spec.nuisance_rank, spec.camera_noise))
        .collect();
    let garments: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| (0..spec.garments_per_part).map(|_| relu_unit(&mut rng, d)).collect())
        .collect();
    let patterns = occlusion_patterns(m);
    let n_train = spec.num_train_identities();

    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut records = Vec::new();
    for pid in 0..spec.num_identities {
        let prototypes: Vec<Vec<f64>> = (0..m)
            .map(|p| {
                let g = &garments[p][rng.random_range(0..spec.garments_per_part)];
                let mut v = g.clone();
                linalg::axpy(spec.identity_spread, &relu_unit(&mut rng, d), &mut v);
                linalg::normalized(&v)
            })
            .collect();
        let mut images = Vec::with_capacity(spec.images_per_identity);
        for k in 0..spec.images_per_identity {
            let camera = rng.random_range(0..spec.camera_count);
            let mut visible = vec![true; m];
            let mut obstacle = None;
            if rng.random::<f64>() < spec.occlusion_rate {
                let pattern = &patterns[rng.random_range(0..patterns.len())];
                pattern.iter().for_each(|&p| visible[p] = false);
                obstacle = Some(rng.random_range(0..spec.num_obstacle_clusters));
            }
            let clutter = noise(&mut rng, spec.nuisance_rank, spec.clutter_noise);
            let mut features = Vec::with_capacity(m * d);
            let mut scores = Vec::with_capacity(m);
            for p in 0..m {
                let v = match obstacle {
                    Some(o) if !visible[p] => {
                        let mut v = obstacles[o][p].clone();
                        linalg::axpy(1.0, &noise(&mut rng, d, spec.obstacle_noise), &mut v);
                        rectify(&v, &obstacles[o][p])
                    }
                    _ => {
                        let mut v = prototypes[p].clone();
                        linalg::axpy(1.0, &noise(&mut rng, d, spec.intra_identity_noise), &mut v);
                        linalg::axpy(1.0, &combine(&nuisance[p], &cameras[camera], d), &mut v);
                        linalg::axpy(1.0, &combine(&nuisance[p], &clutter, d), &mut v);
                        rectify(&v, &prototypes[p])
                    }
                };
                features.extend(v.iter().map(|&x| x as f32));
                let u: f64 = rng.random();
                scores.push(if visible[p] { 0.75 + 0.25 * u } else { 0.25 * u });
            }
            let image_id = format!("{pid:04}_c{camera}_{k:02}");
            let item = PartFeatureSet::new(
                image_id.clone(),
                Some(pid as i64),
                Some(camera as i64),
                m,
                d,
                features,
                scores,
            )?;
            images.push((item, TruthRecord {
                image_id,
                split: Split::Train,
                person_id: pid as i64,
                camera_id: camera as i64,
                visible,
                obstacle,
            }));
        }
        if pid < n_train {
            for (item, rec) in images {
                train.push(item);
                records.push(rec);
            }
            continue;
        }
        let mut occluded: Vec<usize> = (0..images.len()).filter(|&i| images[i].1.obstacle.is_some()).collect();
        occluded.shuffle(&mut rng);
        occluded.truncate(spec.queries_per_identity);
        let mut in_gallery = 0;
        for (i, (item, mut rec)) in images.into_iter().enumerate() {
            if occluded.contains(&i) {
                rec.split = Split::Query;
                query.push(item);
            } else {
                rec.split = Split::Gallery;
                gallery.push(item);
                in_gallery += 1;
            }
            records.push(rec);
        }
        if in_gallery == 0 {
            return Err(Error::Synth(format!("identity {pid} has no gallery image")));
        }
    }
    let train = Dataset::new(Split::Train, m, d, train)?;
    let query = Dataset::new(Split::Query, m, d, query)?;
    let gallery = Dataset::new(Split::Gallery, m, d, gallery)?;
    let separation = separation_stats(&[&train, &gallery]);
    tracing::info!(
        same = separation.same_identity,
        different = separation.different_identity,
        "synthetic identity separation"
    );
    Ok(SynthData {
        train,
        query,
        gallery,
        truth: Truth {
            spec: spec.clone(),
            separation,
            records,
        },
    })
}

/// Mean cosine between visible parts of images of the same identity versus
/// images of consecutive identities (first four images of each).
pub fn separation_stats(sets: &[&Dataset]) -> SeparationStats {
    let mut by_id: BTreeMap<i64, Vec<&PartFeatureSet>> = BTreeMap::new();
    for ds in sets {
        for it in ds.items() {
            if let Some(pid) = it.person_id {
                let v = by_id.entry(pid).or_default();
                if v.len() < 4 {
                    v.push(it);
                }
            }
        }
    }
    let pair = |a: &PartFeatureSet, b: &PartFeatureSet, acc: &mut (f64, usize)| {
        for p in 0..a.parts() {
            if a.is_visible(p) && b.is_visible(p) {
                acc.0 += linalg::cosine(&a.part_f64(p), &b.part_f64(p));
                acc.1 += 1;
            }
        }
    };
    let mut same = (0.0, 0);
    let mut diff = (0.0, 0);
    let groups: Vec<&Vec<&PartFeatureSet>> = by_id.values().collect();
    for (g, members) in groups.iter().enumerate() {
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                pair(members[i], members[j], &mut same);
            }
            if let Some(next) = groups.get(g + 1) {
                for other in next.iter() {
                    pair(members[i], other, &mut diff);
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let (s, df) = (mean(same), mean(diff));
    SeparationStats {
        same_identity: s,
        different_identity: df,
        margin: s - df,
    }
}

/// Per-part random linear maps `D → D_raw` (entries `N(0, 1/D_raw)`) plus
/// small noise: raw inputs for the encoder stand-in.
pub fn raw_view(spec: &SynthSpec, data: &SynthData) -> Result<(Dataset, Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    let n = Normal::new(0.0, 1.0 / (spec.d_raw as f64).sqrt()).expect("valid sigma");
    let maps: Vec<Matrix> = (0..spec.m)
        .map(|_| {
            Matrix::from_vec(
                spec.d_raw,
                spec.d,
                (0..spec.d_raw * spec.d).map(|_| n.sample(&mut rng)).collect(),
            )
        })
        .collect();
    let mut lift = |ds: &Dataset| -> Result<Dataset> {
        let items = ds
            .items()
            .iter()
            .map(|it| {
                let mut raw = Vec::with_capacity(spec.m * spec.d_raw);
                for (p, map) in maps.iter().enumerate() {
                    let mut v = map.matvec(&it.part_f64(p));
                    linalg::axpy(1.0, &noise(&mut rng, spec.d_raw, 0.05), &mut v);
                    raw.extend(v.iter().map(|&x| x as f32));
                }
                PartFeatureSet::new(
                    it.image_id.clone(),
                    it.person_id,
                    it.camera_id,
                    spec.m,
                    spec.d_raw,
                    raw,
                    it.visibility_scores().to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(ds.split, spec.m, spec.d_raw, items)
    };
    Ok((lift(&data.train)?, lift(&data.query)?, lift(&data.gallery)?))
}

/// A body mask with the occluders that produced it and the per-part ground
/// truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFixture {
    pub id: String,
    pub mask: BodyMask,
    pub silhouette: Rect,
    pub occluders: Vec<Rect>,
    pub truth: Vec<bool>,
}

pub const MASK_HEIGHT: usize = 64;
pub const MASK_WIDTH: usize = 32;

/// Draws the silhouette, erases the occluders and labels each part visible
/// when at least half of its silhouette pixels survive.
pub fn mask_fixture(id: impl Into<String>, layout: &PartLayout, silhouette: Rect, occluders: Vec<Rect>) -> Result<MaskFixture> {
    let (h, w) = (
        layout.regions().iter().map(|r| r.bottom).max().unwrap_or(0),
        layout.regions().iter().map(|r| r.right).max().unwrap_or(0),
    );
    let mut body = BodyMask::empty(h, w);
    body.fill(silhouette, true);
    let mut mask = body.clone();
    for &o in &occluders {
        mask.fill(o, false);
    }
    let truth = layout
        .regions()
        .iter()
        .map(|&r| {
            let total = body.count_in(r);
            total > 0 && 2 * mask.count_in(r) >= total
        })
        .collect();
    Ok(MaskFixture {
        id: id.into(),
        mask,
        silhouette,
        occluders,
        truth,
    })
}

/// Stripe-aligned occluders for the standard layout: bottom one, two or
/// three stripes, the top stripe, or either vertical half.
pub fn stripe_occluders(kind: usize, h: usize, w: usize) -> Vec<Rect> {
    let stripe = |i: usize| i * h / HORIZONTAL_PARTS;
    let band = |top, bottom, left, right| Rect { top, bottom, left, right };
    match kind {
        0 => vec![band(stripe(3), h, 0, w)],
        1 => vec![band(stripe(2), h, 0, w)],
        2 => vec![band(stripe(1), h, 0, w)],
        3 => vec![band(0, stripe(1), 0, w)],
        4 => vec![band(0, h, 0, w / 2)],
        _ => vec![band(0, h, w / 2, w)],
    }
}

/// Rectangular torso silhouettes with random margins; a fraction
/// `occlusion_rate` of them get one stripe-aligned occluder.
pub fn generate_masks(count: usize, occlusion_rate: f64, seed: u64) -> Result<Vec<MaskFixture>> {
    let (h, w) = (MASK_HEIGHT, MASK_WIDTH);
    let layout = PartLayout::standard(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let top = if rng.random::<f64>() < 0.25 { rng.random_range(1..=2) } else { 0 };
            let side = rng.random_range(1..=w / 8);
            let silhouette = Rect {
                top,
                bottom: h,
                left: side,
                right: w - side,
            };
            let occluders = if rng.random::<f64>() < occlusion_rate {
                stripe_occluders(rng.random_range(0..6), h, w)
            } else {
                Vec::new()
            };
            mask_fixture(format!("mask{i:04}"), &layout, silhouette, occluders)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_identities: 10,
            images_per_identity: 6,
            d: 8,
            d_raw: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_occlusion_rate_gives_full_visibility() {
        let data = generate(&SynthSpec {
            occlusion_rate: 0.0,
            ..small()
        })
        .unwrap();
        assert!(data.truth.records.iter().all(|r| r.visible.iter().all(|&v| v)));
        assert!(data.query.is_empty());
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.query, b.query);
        assert_eq!(a.gallery, b.gallery);
        let c = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.gallery, c.gallery);
    }

    #[test]
    fn splits_are_disjoint_and_queries_occluded() {
        let data = generate(&small()).unwrap();
        let train_ids = data.train.identities();
        for it in data.query.items().iter().chain(data.gallery.items()) {
            assert!(!train_ids.contains(&it.person_id.unwrap()));
        }
        for it in data.query.items() {
            assert!(it.num_visible() < it.parts());
        }
        for ds in [&data.train, &data.query, &data.gallery] {
            assert!(ds.items().iter().all(|it| it.num_visible() >= 1));
        }
    }

    #[test]
    fn identities_separate() {
        let data = generate(&small()).unwrap();
        assert!(data.truth.separation.margin > 0.1, "{:?}", data.truth.separation);
    }

    #[test]
    fn bottom_two_stripes_occluded() {
        let layout = PartLayout::standard(MASK_HEIGHT, MASK_WIDTH).unwrap();
        let sil = Rect { top: 0, bottom: MASK_HEIGHT, left: 2, right: MASK_WIDTH - 2 };
        let f = mask_fixture("x", &layout, sil, stripe_occluders(1, MASK_HEIGHT, MASK_WIDTH)).unwrap();
        assert_eq!(&f.truth[..4], &[true, true, false, false]);
        let clear = mask_fixture("y", &layout, sil, Vec::new()).unwrap();
        assert!(clear.truth.iter().all(|&v| v));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&SynthSpec { occlusion_rate: 1.0, ..small() }).is_err());
        assert!(generate(&SynthSpec { images_per_identity: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { queries_per_identity: 6, ..small() }).is_err());
    }
}

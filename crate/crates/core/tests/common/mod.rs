//! Independent brute-force oracles and random instance builders shared by the
//! integration tests and the acceptance harness. Nothing here calls the code
//! under test except to build inputs.
#![allow(dead_code)]

use std::collections::BTreeSet;

use occrec::{Dataset, PartFeatureSet, Split};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| unit.sample(rng)).collect()
}

fn naive_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (naive_norm(a), naive_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine of each row to the arithmetic mean of the other rows.
pub fn naive_confidences(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let d = rows[i].len();
            let mut mean = vec![0.0; d];
            for (j, r) in rows.iter().enumerate() {
                if j != i {
                    for k in 0..d {
                        mean[k] += r[k] / (n - 1) as f64;
                    }
                }
            }
            naive_cos(&rows[i], &mean)
        })
        .collect()
}

pub fn naive_affinity(xi: &[f64], xj: &[f64], v: &[f64], b: f64) -> f64 {
    let mut z = b;
    for k in 0..xi.len() {
        let diff = xi[k] - xj[k];
        z += v[k] * diff * diff;
    }
    1.0 / (1.0 + (-z).exp())
}

/// Per-part thresholded top-K by linear scan over the gallery entries whose
/// part is visible, intersected over the query's visible parts. Inputs must
/// already be part-normalized.
pub fn brute_neighborhood(gallery: &Dataset, query: &PartFeatureSet, k: usize, theta: f64) -> BTreeSet<String> {
    let mut result: Option<BTreeSet<String>> = None;
    for p in 0..query.parts() {
        if !query.is_visible(p) {
            continue;
        }
        let q = query.part_f64(p);
        let mut scored: Vec<(f64, &str)> = gallery
            .items()
            .iter()
            .filter(|g| g.is_visible(p) && g.image_id != query.image_id)
            .map(|g| {
                let s: f64 = q.iter().zip(g.part_f64(p)).map(|(a, b)| a * b).sum();
                (s, g.image_id.as_str())
            })
            .filter(|&(s, _)| s >= theta)
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let set: BTreeSet<String> = scored.iter().take(k).map(|(_, id)| id.to_string()).collect();
        result = Some(match result {
            None => set,
            Some(acc) => acc.intersection(&set).cloned().collect(),
        });
    }
    result.unwrap_or_default()
}

/// Average precision straight from its definition: for every relevant
/// position, count the relevant items in the prefix ending there.
pub fn brute_ap(relevant: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = (0..relevant.len()).filter(|&i| relevant[i]).collect();
    if positions.is_empty() {
        return None;
    }
    let total: f64 = positions
        .iter()
        .map(|&i| relevant[..=i].iter().filter(|&&r| r).count() as f64 / (i + 1) as f64)
        .sum();
    Some(total / positions.len() as f64)
}

/// CMC@r: share of queries with any relevant item among their first r.
pub fn brute_cmc(lists: &[Vec<bool>], r: usize) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .filter(|l| l.iter().take(r).any(|&x| x))
        .count();
    hits as f64 / lists.len() as f64
}

/// Random labelled dataset: `n` images over `ids` identities sharing a
/// per-identity centre, each part occluded with probability `occ` (at least
/// one part always visible). Rows are non-negative.
pub fn random_dataset<R: Rng>(rng: &mut R, split: Split, n: usize, ids: usize, m: usize, d: usize, occ: f64) -> Dataset {
    let centres: Vec<Vec<f64>> = (0..ids * m).map(|_| gaussian(rng, d)).collect();
    let items = (0..n)
        .map(|i| {
            let pid = rng.random_range(0..ids);
            let mut vis: Vec<f64> = (0..m)
                .map(|_| if rng.random_bool(occ) { 0.1 } else { 0.9 })
                .collect();
            if vis.iter().all(|&v| v < 0.5) {
                vis[rng.random_range(0..m)] = 0.9;
            }
            let mut feats = Vec::with_capacity(m * d);
            for p in 0..m {
                let noise = gaussian(rng, d);
                for k in 0..d {
                    feats.push((centres[pid * m + p][k] + 0.7 * noise[k]).abs() as f32);
                }
            }
            PartFeatureSet::new(
                format!("{}_{i:04}", split.as_str()),
                Some(pid as i64),
                Some(rng.random_range(0..3)),
                m,
                d,
                feats,
                vis,
            )
            .unwrap()
        })
        .collect();
    Dataset::new(split, m, d, items).unwrap()
}

/// Neighbor rows for one part graph: `inliers` around a shared direction and
/// `outliers` around a direction orthogonal to it. Returns the rows (inliers
/// first) and the outlier flags.
pub fn outlier_graph<R: Rng>(rng: &mut R, d: usize, inliers: usize, outliers: usize, noise: f64) -> (Vec<Vec<f64>>, Vec<bool>) {
    assert!(d >= 2 && d % 2 == 0);
    let half = d / 2;
    // disjoint supports make the two centres exactly orthogonal
    let centre = |rng: &mut R, lo: usize| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for k in lo..lo + half {
            c[k] = rng.random_range(0.5..1.5);
        }
        let n = naive_norm(&c);
        c.iter().map(|v| v / n).collect()
    };
    let u = centre(rng, 0);
    let w = centre(rng, half);
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for (c, count, flag) in [(&u, inliers, false), (&w, outliers, true)] {
        for _ in 0..count {
            let e = gaussian(rng, d);
            rows.push(c.iter().zip(&e).map(|(a, b)| a + noise * b / (d as f64).sqrt()).collect());
            flags.push(flag);
        }
    }
    (rows, flags)
}

/// Seeded property checks: each draws its own instance from `seed` and
/// returns a description of the first violation.
pub mod props {
    use occrec::eval::{cmc, first_hit, score};
    use occrec::linalg::Matrix;
    use occrec::neighborhood::{build_index, image_neighborhood, member_set};
    use occrec::orgnn::{forward_part, initial_nodes, reconstruct, GnnOptions, LayerParams, OrgnnParams};
    use occrec::{PartFeatureSet, Split};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{gaussian, random_dataset};

    pub type Check = Result<(), String>;

    macro_rules! ensure {
        ($cond:expr, $($msg:tt)+) => {
            if !$cond {
                return Err(format!($($msg)+));
            }
        };
    }

    pub fn random_layers(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Vec<LayerParams> {
        (0..t)
            .map(|_| {
                let mut l = LayerParams::identity(d);
                for w in l.w.as_mut_slice() {
                    *w += 0.3 * gaussian(rng, 1)[0];
                }
                l.v = gaussian(rng, d).iter().map(|v| 0.5 * v).collect();
                l.b = gaussian(rng, 1)[0];
                l
            })
            .collect()
    }

    fn random_nodes(rng: &mut ChaCha8Rng) -> Matrix {
        let (n, d) = (rng.random_range(2..8), rng.random_range(2..9));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| gaussian(rng, d).iter().map(|v| v.abs()).collect())
            .collect();
        initial_nodes(&rows).unwrap()
    }

    pub fn reconstruct_permutation(seed: u64) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..8);
        let ds = random_dataset(&mut rng, Split::Gallery, n, 3, 2, 6, 0.3);
        let mut params = OrgnnParams::init(2, 6, 2, 3, seed);
        for p in &mut params.parts {
            p.layers = random_layers(&mut rng, 6, 2);
        }
        let mut refs: Vec<&PartFeatureSet> = ds.items().iter().collect();
        let a = reconstruct(&refs, &params, 2, &GnnOptions::OUTLIER_REMOVABLE).map_err(|e| e.to_string())?;
        refs.shuffle(&mut rng);
        let b = reconstruct(&refs, &params, 2, &GnnOptions::OUTLIER_REMOVABLE).map_err(|e| e.to_string())?;
        ensure!(a == b, "reconstruction changed under a neighbor permutation");
        Ok(())
    }

    pub fn affinity_symmetry(seed: u64) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = random_nodes(&mut rng);
        let layers = random_layers(&mut rng, nodes.cols(), 2);
        for (t, tape) in forward_part(&nodes, &layers, &GnnOptions::OUTLIER_REMOVABLE).iter().enumerate() {
            let a = &tape.affinity;
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    ensure!(a[(i, j)] == a[(j, i)], "layer {t}: a({i},{j}) != a({j},{i})");
                    ensure!(a[(i, j)] > 0.0 && a[(i, j)] < 1.0, "layer {t}: a({i},{j}) = {}", a[(i, j)]);
                }
            }
        }
        Ok(())
    }

    pub fn convex_weights(seed: u64) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = random_nodes(&mut rng);
        let layers = random_layers(&mut rng, nodes.cols(), 2);
        for opts in [GnnOptions::OUTLIER_REMOVABLE, GnnOptions::PLAIN, GnnOptions::AVERAGE] {
            for tape in forward_part(&nodes, &layers, &opts) {
                for i in 0..tape.input.rows() {
                    let Some(w) = tape.aggregation_weights(i) else {
                        ensure!(tape.denominators[i] <= 0.0, "weights missing with positive denominator");
                        continue;
                    };
                    ensure!(w.iter().all(|&x| x >= 0.0), "negative weight {w:?}");
                    let s: f64 = w.iter().sum();
                    ensure!((s - 1.0).abs() < 1e-12, "weights sum to {s}");
                    for k in 0..tape.input.cols() {
                        let expect: f64 = (0..w.len()).map(|j| w[j] * tape.input[(j, k)]).sum();
                        ensure!((tape.aggregated[(i, k)] - expect).abs() < 1e-12, "aggregate is not the combination");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn knn_monotone(seed: u64) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..12);
        let dk = rng.random_range(0..6);
        let theta = rng.random_range(0.3..0.95);
        let dtheta = rng.random_range(0.0..0.3);
        let gallery = random_dataset(&mut rng, Split::Gallery, 40, 5, 3, 8, 0.3).normalized().unwrap();
        let query = random_dataset(&mut rng, Split::Query, 1, 5, 3, 8, 0.3).normalized().unwrap();
        let q = &query.items()[0];
        let index = build_index(&gallery).map_err(|e| e.to_string())?;
        let tight = image_neighborhood(&index, q, k, theta).map_err(|e| e.to_string())?;
        let loose = image_neighborhood(&index, q, k + dk, theta - dtheta).map_err(|e| e.to_string())?;
        ensure!(
            member_set(&tight).is_subset(&member_set(&loose)),
            "K={k} θ={theta} not contained in K={} θ={}",
            k + dk,
            theta - dtheta
        );
        for m in &tight.members {
            let g = &gallery.items()[index.position(&m.image_id).unwrap()];
            for p in q.visible_parts() {
                ensure!(g.is_visible(p), "member {} occluded on query part {p}", m.image_id);
                let s: f64 = q.part_f64(p).iter().zip(g.part_f64(p)).map(|(a, b)| a * b).sum();
                ensure!(s >= theta - 1e-9, "member {} below θ on part {p}", m.image_id);
            }
        }
        let again = image_neighborhood(&index, q, k, theta).map_err(|e| e.to_string())?;
        ensure!(again == tight, "neighborhood not deterministic");
        Ok(())
    }

    pub fn cmc_monotone(seed: u64) -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (queries, len) = (rng.random_range(1..20), rng.random_range(1..30));
        let lists: Vec<Vec<bool>> = (0..queries)
            .map(|_| (0..len).map(|_| rng.random_bool(0.2)).collect())
            .collect();
        let ranks: Vec<usize> = (1..=len + 2).collect();
        let hits: Vec<Option<usize>> = lists.iter().map(|l| first_hit(l)).collect();
        let curve = cmc(&hits, &ranks);
        ensure!(curve.windows(2).all(|w| w[0] <= w[1]), "cmc decreases: {curve:?}");
        ensure!(curve.iter().all(|&c| (0.0..=1.0).contains(&c)), "cmc outside [0,1]");
        let s = score(&lists, &ranks);
        ensure!(s.cmc.windows(2).all(|w| w[0] <= w[1]), "scored cmc decreases");
        ensure!((0.0..=1.0).contains(&s.map), "mAP {} outside [0,1]", s.map);
        Ok(())
    }
}

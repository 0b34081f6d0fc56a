//! Per-part linear encoder trained with identification + batch-hard triplet
//! losses. Stands in for the convolutional feature extractor: each part's raw
//! vector is projected to `D` dimensions and L2-normalized.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{Dataset, PartFeatureSet};
use crate::io;
use crate::linalg::{self, Matrix};
use crate::training::{group_by_label, pk_batches, Adam, StepSchedule};

pub const ENCODER_MAGIC: &str = "OCCENC1";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// Per part, `D_raw × D`.
    pub projections: Vec<Matrix>,
    /// Per part, `num_ids × D`.
    pub classifiers: Vec<Matrix>,
}

impl EncoderParams {
    /// Gaussian projections scaled by `1/sqrt(D_raw)`, small classifiers.
    pub fn init(parts: usize, d_raw: usize, d: usize, num_ids: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0, 1.0 / (d_raw as f64).sqrt()).expect("valid sigma");
        let cls = Normal::new(0.0, 0.01).expect("valid sigma");
        let mut sample = |rows: usize, cols: usize, dist: &Normal<f64>| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
        };
        let projections = (0..parts).map(|_| sample(d_raw, d, &proj)).collect();
        let classifiers = (0..parts).map(|_| sample(num_ids, d, &cls)).collect();
        Self {
            projections,
            classifiers,
        }
    }

    pub fn parts(&self) -> usize {
        self.projections.len()
    }

    pub fn d_raw(&self) -> usize {
        self.projections[0].rows()
    }

    pub fn d(&self) -> usize {
        self.projections[0].cols()
    }

    pub fn num_ids(&self) -> usize {
        self.classifiers[0].rows()
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            projections: self.projections.iter().map(z).collect(),
            classifiers: self.classifiers.iter().map(z).collect(),
        }
    }

    /// Parts-major flat view: projection then classifier for each part.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (p, c) in self.projections.iter().zip(&self.classifiers) {
            out.extend_from_slice(p.as_slice());
            out.extend_from_slice(c.as_slice());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (p, c) in self.projections.iter_mut().zip(self.classifiers.iter_mut()) {
            for m in [p, c] {
                let n = m.as_slice().len();
                m.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        assert_eq!(pos, flat.len());
    }

    /// `OCCENC1 <M> <D_raw> <D> <num_ids>` checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<f32> = self.flatten().iter().map(|&v| v as f32).collect();
        io::write_container(
            path,
            ENCODER_MAGIC,
            &[self.parts(), self.d_raw(), self.d(), self.num_ids()],
            &payload,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (f, payload) = io::read_container(path, ENCODER_MAGIC, 4, |f| {
            f[0] * (f[1] * f[2] + f[3] * f[2])
        })?;
        let (m, d_raw, d, ids) = (f[0], f[1], f[2], f[3]);
        if m == 0 || d_raw == 0 || d == 0 || ids == 0 {
            return Err(Error::format(path, "zero dimension in encoder header"));
        }
        let mut params = Self {
            projections: vec![Matrix::zeros(d_raw, d); m],
            classifiers: vec![Matrix::zeros(ids, d); m],
        };
        let flat: Vec<f64> = payload.iter().map(|&v| f64::from(v)).collect();
        params.load_flat(&flat);
        Ok(params)
    }
}

/// Projects each part and L2-normalizes it. Visibility is carried over.
pub fn encode(raw: &PartFeatureSet, params: &EncoderParams) -> Result<PartFeatureSet> {
    if raw.parts() != params.parts() || raw.dim() != params.d_raw() {
        return Err(Error::Shape(format!(
            "{}: raw input is M={} D={}, encoder expects M={} D_raw={}",
            raw.image_id,
            raw.parts(),
            raw.dim(),
            params.parts(),
            params.d_raw()
        )));
    }
    let mut feats = Vec::with_capacity(raw.parts() * params.d());
    for p in 0..raw.parts() {
        let f = params.projections[p].matvec_t(&raw.part_f64(p));
        feats.extend(linalg::normalized(&f).into_iter().map(|v| v as f32));
    }
    PartFeatureSet::new(
        raw.image_id.clone(),
        raw.person_id,
        raw.camera_id,
        raw.parts(),
        params.d(),
        feats,
        raw.visibility_scores().to_vec(),
    )
}

pub fn encode_dataset(raw: &Dataset, params: &EncoderParams) -> Result<Dataset> {
    let items = raw
        .items()
        .par_iter()
        .map(|it| encode(it, params))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(raw.split, raw.parts(), params.d(), items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdLoss {
    pub loss: f64,
    pub grad_features: Matrix,
    pub grad_classifier: Matrix,
}

/// Softmax cross-entropy of `classifier · feature` averaged over rows.
pub fn identification_loss(features: &Matrix, labels: &[usize], classifier: &Matrix) -> Result<IdLoss> {
    if features.rows() != labels.len() || features.cols() != classifier.cols() {
        return Err(Error::Shape(format!(
            "{} features of dim {} vs {} labels, classifier dim {}",
            features.rows(),
            features.cols(),
            labels.len(),
            classifier.cols()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classifier.rows()) {
        return Err(Error::Shape(format!(
            "label {l} outside classifier range {}",
            classifier.rows()
        )));
    }
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad_features = Matrix::zeros(features.rows(), features.cols());
    let mut grad_classifier = Matrix::zeros(classifier.rows(), classifier.cols());
    for (i, &label) in labels.iter().enumerate() {
        let x = features.row(i);
        let logits = classifier.matvec(x);
        loss += linalg::cross_entropy(&logits, label);
        let mut delta = linalg::softmax(&logits);
        delta[label] -= 1.0;
        delta.iter_mut().for_each(|d| *d /= n);
        grad_features
            .row_mut(i)
            .copy_from_slice(&classifier.matvec_t(&delta));
        grad_classifier.add_outer(1.0, &delta, x);
    }
    Ok(IdLoss {
        loss: loss / n,
        grad_features,
        grad_classifier,
    })
}

/// Features and labels for batch-hard triplet mining. Distances are
/// Euclidean.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    /// Farthest in-batch positive.
    pub positive: usize,
    /// Nearest in-batch negative.
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

impl MinedTriplet {
    /// `d_ap − d_an + margin`; the hinge is active when positive.
    pub fn preactivation(&self, margin: f64) -> f64 {
        self.d_ap - self.d_an + margin
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl TripletBatch<'_> {
    /// Hardest positive and negative per anchor; ties go to the lower index.
    /// Anchors lacking a positive or a negative are skipped.
    pub fn mine(&self) -> Vec<MinedTriplet> {
        let n = self.labels.len();
        let mut out = Vec::with_capacity(n);
        for a in 0..n {
            let xa = self.features.row(a);
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = euclidean(xa, self.features.row(j));
                if self.labels[j] == self.labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            match (pos, neg) {
                (Some((p, d_ap)), Some((q, d_an))) => out.push(MinedTriplet {
                    anchor: a,
                    positive: p,
                    negative: q,
                    d_ap,
                    d_an,
                }),
                _ => tracing::debug!(anchor = a, "triplet anchor without positive or negative; skipped"),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad: Matrix,
    pub triplets: Vec<MinedTriplet>,
}

/// Batch-hard triplet loss, mean over usable anchors. The hinge subgradient
/// at exactly zero is taken as 0.
pub fn triplet_loss(batch: &TripletBatch) -> TripletLoss {
    let triplets = batch.mine();
    let x = batch.features;
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    if triplets.is_empty() {
        return TripletLoss {
            loss: 0.0,
            grad,
            triplets,
        };
    }
    let n = triplets.len() as f64;
    let mut loss = 0.0;
    for t in &triplets {
        let pre = t.preactivation(batch.margin);
        if pre <= 0.0 {
            continue;
        }
        loss += pre;
        let (xa, xp, xn) = (x.row(t.anchor), x.row(t.positive), x.row(t.negative));
        let mut ga = vec![0.0; x.cols()];
        if t.d_ap > 0.0 {
            let dir: Vec<f64> = xa.iter().zip(xp).map(|(a, p)| (a - p) / t.d_ap).collect();
            linalg::axpy(1.0 / n, &dir, &mut ga);
            linalg::axpy(-1.0 / n, &dir, grad.row_mut(t.positive));
        }
        if t.d_an > 0.0 {
            let dir: Vec<f64> = xa.iter().zip(xn).map(|(a, q)| (a - q) / t.d_an).collect();
            linalg::axpy(-1.0 / n, &dir, &mut ga);
            linalg::axpy(1.0 / n, &dir, grad.row_mut(t.negative));
        }
        linalg::axpy(1.0, &ga, grad.row_mut(t.anchor));
    }
    TripletLoss {
        loss: loss / n,
        grad,
        triplets,
    }
}

/// Parameters plus the mean training loss of every epoch.
#[derive(Clone, Debug)]
pub struct EncoderTraining {
    pub params: EncoderParams,
    pub epoch_losses: Vec<f64>,
}

struct PartBatch {
    loss: f64,
    grad_projection: Matrix,
    grad_classifier: Matrix,
}

fn project_rows(raw_rows: &[Vec<f64>], projection: &Matrix) -> (Matrix, Vec<f64>) {
    let mut feats = Matrix::zeros(raw_rows.len(), projection.cols());
    let mut norms = Vec::with_capacity(raw_rows.len());
    for (i, r) in raw_rows.iter().enumerate() {
        let f = projection.matvec_t(r);
        norms.push(linalg::norm(&f));
        feats.row_mut(i).copy_from_slice(&linalg::normalized(&f));
    }
    (feats, norms)
}

fn visible_rows(
    train: &Dataset,
    batch: &[usize],
    p: usize,
    label_index: &(dyn Fn(i64) -> usize + Sync),
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &i in batch {
        let it = &train.items()[i];
        if it.is_visible(p) {
            rows.push(it.part_f64(p));
            labels.push(label_index(it.person_id.expect("train items are labelled")));
        }
    }
    (rows, labels)
}

/// Mined triplets and hinge activity per part: the piece of the batch loss
/// a parameter point lies on.
pub fn batch_signature(
    train: &Dataset,
    batch: &[usize],
    label_index: &(dyn Fn(i64) -> usize + Sync),
    params: &EncoderParams,
    margin: f64,
) -> Vec<(usize, usize, usize, bool)> {
    let mut out = Vec::new();
    for p in 0..params.parts() {
        let (rows, labels) = visible_rows(train, batch, p, label_index);
        if rows.len() < 2 {
            continue;
        }
        let (feats, _) = project_rows(&rows, &params.projections[p]);
        let mined = TripletBatch {
            features: &feats,
            labels: &labels,
            margin,
        }
        .mine();
        out.extend(
            mined
                .iter()
                .map(|t| (t.anchor, t.positive, t.negative, t.preactivation(margin) > 0.0)),
        );
    }
    out
}

/// Loss of one part over the given raw rows: identification + triplet on the
/// normalized projections, back-propagated to the projection.
fn part_loss(
    raw_rows: &[Vec<f64>],
    labels: &[usize],
    projection: &Matrix,
    classifier: &Matrix,
    margin: f64,
) -> Result<PartBatch> {
    let d = projection.cols();
    let (feats, norms) = project_rows(raw_rows, projection);
    let id = identification_loss(&feats, labels, classifier)?;
    let tri = triplet_loss(&TripletBatch {
        features: &feats,
        labels,
        margin,
    });
    let mut grad_projection = Matrix::zeros(projection.rows(), d);
    for (i, r) in raw_rows.iter().enumerate() {
        if norms[i] == 0.0 {
            continue;
        }
        let x = feats.row(i);
        let gx: Vec<f64> = id
            .grad_features
            .row(i)
            .iter()
            .zip(tri.grad.row(i))
            .map(|(a, b)| a + b)
            .collect();
        let proj = linalg::dot(x, &gx);
        let gf: Vec<f64> = gx
            .iter()
            .zip(x)
            .map(|(g, xi)| (g - xi * proj) / norms[i])
            .collect();
        grad_projection.add_outer(1.0, r, &gf);
    }
    Ok(PartBatch {
        loss: id.loss + tri.loss,
        grad_projection,
        grad_classifier: id.grad_classifier,
    })
}

/// Joint loss of one batch: mean over parts of (identification + triplet),
/// each part using only the batch images where that part is visible.
/// Returns the loss and the gradient with respect to every parameter.
pub fn batch_loss(
    train: &Dataset,
    batch: &[usize],
    label_index: &(dyn Fn(i64) -> usize + Sync),
    params: &EncoderParams,
    margin: f64,
) -> Result<(f64, EncoderParams)> {
    let per_part = (0..params.parts())
        .into_par_iter()
        .map(|p| {
            let (rows, labels) = visible_rows(train, batch, p, label_index);
            if rows.len() < 2 {
                return Ok(None);
            }
            part_loss(&rows, &labels, &params.projections[p], &params.classifiers[p], margin)
                .map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let used = per_part.iter().filter(|b| b.is_some()).count().max(1) as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (p, b) in per_part.into_iter().enumerate() {
        if let Some(b) = b {
            loss += b.loss / used;
            linalg::axpy(1.0 / used, b.grad_projection.as_slice(), grads.projections[p].as_mut_slice());
            linalg::axpy(1.0 / used, b.grad_classifier.as_slice(), grads.classifiers[p].as_mut_slice());
        }
    }
    Ok((loss, grads))
}

/// Adam training over identity-balanced batches. Deterministic given
/// `cfg.seed`; zero epochs returns the initialization.
pub fn train_encoder(train: &Dataset, d: usize, cfg: &PipelineConfig) -> Result<EncoderTraining> {
    cfg.validate()?;
    let ids = train.identities();
    if ids.len() < 2 {
        return Err(Error::Config("encoder training needs at least 2 identities".into()));
    }
    let groups = group_by_label(
        train
            .items()
            .iter()
            .enumerate()
            .map(|(i, it)| (i, it.person_id.expect("train items are labelled"))),
    );
    if let Some((id, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Config(format!("identity {id} has fewer than 2 training images")));
    }
    let label_index = |pid: i64| ids.binary_search(&pid).expect("known identity");
    let mut params = EncoderParams::init(train.parts(), train.dim(), d, ids.len(), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let schedule = StepSchedule::from_config(cfg);
    let mut adam = Adam::new(params.flatten().len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let batches = pk_batches(&groups, cfg.encoder_batch_persons, cfg.encoder_images_per_person, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = batch_loss(train, batch, &label_index, &params, cfg.eta)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            let mut flat = params.flatten();
            adam.step(&mut flat, &grads.flatten(), lr);
            params.load_flat(&flat);
        }
        let mean = total / batches.len() as f64;
        tracing::debug!(epoch, loss = mean, lr, "encoder epoch");
        epoch_losses.push(mean);
    }
    Ok(EncoderTraining {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_projection_keeps_unit_vector() {
        let mut params = EncoderParams::init(1, 3, 3, 2, 0);
        params.projections[0] = Matrix::identity(3);
        let raw = PartFeatureSet::new("a", None, None, 1, 3, vec![0.6, 0.0, 0.8], vec![1.0]).unwrap();
        let out = encode(&raw, &params).unwrap();
        assert_eq!(out.features(), raw.features());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let params = EncoderParams::init(6, 8, 4, 3, 1);
        let raw = PartFeatureSet::new("a", None, None, 6, 8, (0..48).map(|v| v as f32).collect(), vec![1.0; 6]).unwrap();
        let a = encode(&raw, &params).unwrap();
        assert_eq!((a.parts(), a.dim()), (6, 4));
        assert_eq!(a, encode(&raw, &params).unwrap());
        let wrong = PartFeatureSet::new("b", None, None, 6, 7, vec![1.0; 42], vec![1.0; 6]).unwrap();
        assert!(encode(&wrong, &params).is_err());
    }

    #[test]
    fn triplet_inactive_when_margin_satisfied() {
        // anchor at origin, positive at distance 1.0, negative at distance 1.5
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.5], vec![0.0, 1.6]]);
        let labels = [0, 0, 1, 1];
        let mined = TripletBatch { features: &f, labels: &labels, margin: 0.3 }.mine();
        let t0 = mined[0];
        assert_eq!((t0.positive, t0.negative), (1, 2));
        assert!((t0.d_ap - 1.0).abs() < 1e-12 && (t0.d_an - 1.5).abs() < 1e-12);
        assert_eq!(t0.preactivation(0.3).max(0.0), 0.0);
    }

    #[test]
    fn triplet_equal_distances_give_margin() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = [0, 0, 1];
        let batch = TripletBatch { features: &f, labels: &labels, margin: 0.3 };
        let mined = batch.mine();
        assert!((mined[0].preactivation(0.3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn anchor_without_positive_is_skipped() {
        let f = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        let labels = [0, 0, 1];
        let out = triplet_loss(&TripletBatch { features: &f, labels: &labels, margin: 0.3 });
        assert_eq!(out.triplets.len(), 2);
        assert!(out.triplets.iter().all(|t| t.anchor != 2));
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let out = identification_loss(&f, &[0, 3], &c).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_gives_zero_loss() {
        let f = Matrix::from_rows(&[vec![1.0]]);
        let c = Matrix::from_rows(&[vec![100.0], vec![-100.0]]);
        let out = identification_loss(&f, &[0], &c).unwrap();
        assert!(out.loss < 1e-12);
        assert!(identification_loss(&f, &[2], &c).is_err());
    }
}

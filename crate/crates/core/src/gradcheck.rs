//! Central finite-difference checks of the hand-written gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::encoder::{batch_loss, batch_signature, EncoderParams};
use crate::error::Result;
use crate::features::{Dataset, PartFeatureSet, Split};
use crate::linalg::{self, Matrix};
use crate::orgnn::{forward_part, initial_nodes, layer_backward, orgnn_loss, GnnOptions, GraphInput, LayerParams, OrgnnParams, PartParams};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crosses a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: Option<usize>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` against central differences of `eval` around `x`.
/// `eval` returns the loss and an activation signature; a coordinate is
/// skipped when either perturbed point has a different signature from the
/// base point.
pub fn check_coordinates<S: PartialEq>(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, S)>,
) -> Result<CheckReport> {
    let (_, base) = eval(x)?;
    let mut report = CheckReport::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let (fp, sp) = eval(&probe)?;
        probe[i] = x[i] - h;
        let (fm, sm) = eval(&probe)?;
        probe[i] = x[i];
        if sp != base || sm != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(i);
        }
    }
    Ok(report)
}

/// A random small OR-GNN problem: `m` parts, `n` neighbors of dimension `d`
/// per part, parameters perturbed well away from the identity so every term
/// of the gradient is exercised.
#[derive(Clone, Debug)]
pub struct GnnInstance {
    pub input: GraphInput,
    pub label: usize,
    pub params: OrgnnParams,
}

pub fn random_gnn_instance<R: Rng>(rng: &mut R, d: usize, n: usize, m: usize, layers: usize, num_ids: usize) -> GnnInstance {
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut params = OrgnnParams::identity(m, d, layers, num_ids);
    for part in &mut params.parts {
        for l in &mut part.layers {
            l.w.as_mut_slice().iter_mut().for_each(|v| *v += 0.3 * unit.sample(rng));
            l.v.iter_mut().for_each(|v| *v = 0.5 * unit.sample(rng));
            l.b = 0.5 * unit.sample(rng);
        }
        part.classifier
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = unit.sample(rng));
    }
    let parts = (0..m)
        .map(|_| {
            // a shared positive direction plus noise keeps confidences mixed
            let centre: Vec<f64> = (0..d).map(|_| unit.sample(rng).abs()).collect();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| centre.iter().map(|c| c + 0.8 * unit.sample(rng)).collect())
                .collect();
            Some(initial_nodes(&rows).expect("non-empty"))
        })
        .collect();
    GnnInstance {
        input: GraphInput { parts },
        label: rng.random_range(0..num_ids),
        params,
    }
}

/// Gradient check of the full OR-GNN loss with respect to every parameter.
pub fn check_gnn(inst: &GnnInstance, opts: &GnnOptions, h: f64) -> Result<CheckReport> {
    let analytic = orgnn_loss(&inst.input, inst.label, &inst.params, opts)?.grad.flatten();
    let mut probe = inst.params.clone();
    check_coordinates(&inst.params.flatten(), &analytic, h, |flat| {
        probe.load_flat(flat);
        let out = orgnn_loss(&inst.input, inst.label, &probe, opts)?;
        Ok((out.loss, out.signature))
    })
}

/// Gradient check with respect to the input node features of one part
/// graph; exercises the backward pass into `x` that parameter checks only
/// reach through earlier layers.
pub fn check_gnn_inputs(inst: &GnnInstance, part: usize, opts: &GnnOptions, h: f64) -> Result<CheckReport> {
    let Some(nodes) = inst.input.parts[part].as_ref() else {
        return Ok(CheckReport::default());
    };
    let (rows, cols) = (nodes.rows(), nodes.cols());
    let pp = &inst.params.parts[part];
    let single = OrgnnParams {
        parts: vec![pp.clone()],
    };
    let analytic = input_gradient(nodes, inst.label, pp, opts);
    check_coordinates(nodes.as_slice(), &analytic, h, |x| {
        let input = GraphInput {
            parts: vec![Some(Matrix::from_vec(rows, cols, x.to_vec()))],
        };
        let out = orgnn_loss(&input, inst.label, &single, opts)?;
        Ok((out.loss, out.signature))
    })
}

fn input_gradient(nodes: &Matrix, label: usize, pp: &PartParams, opts: &GnnOptions) -> Vec<f64> {
    let tapes = forward_part(nodes, &pp.layers, opts);
    let out = tapes.last().map_or(nodes, |t| &t.output);
    let logits = pp.classifier.matvec(out.row(0));
    let mut delta = linalg::softmax(&logits);
    delta[label] -= 1.0;
    let mut d = Matrix::zeros(out.rows(), out.cols());
    d.row_mut(0).copy_from_slice(&pp.classifier.matvec_t(&delta));
    let mut scratch: Vec<LayerParams> = pp.layers.iter().map(|l| LayerParams::zeros(l.v.len())).collect();
    for (t, tape) in tapes.iter().enumerate().rev() {
        d = layer_backward(tape, &pp.layers[t], opts, &d, &mut scratch[t]);
    }
    d.as_slice().to_vec()
}

/// A small labelled raw-feature batch for checking the encoder loss: three
/// persons with three images each and a rotating occluded part.
pub fn random_encoder_batch<R: Rng>(rng: &mut R, parts: usize, d_raw: usize) -> Result<Dataset> {
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut items = Vec::new();
    for person in 0..3i64 {
        for k in 0..3 {
            let feats: Vec<f32> = (0..parts * d_raw).map(|_| unit.sample(rng) as f32).collect();
            let vis = (0..parts).map(|p| if (p + k) % 4 == 3 { 0.1 } else { 0.9 }).collect();
            items.push(PartFeatureSet::new(
                format!("p{person}_{k}"),
                Some(person),
                Some(0),
                parts,
                d_raw,
                feats,
                vis,
            )?);
        }
    }
    Dataset::new(Split::Train, parts, d_raw, items)
}

/// Gradient check of the encoder's identification plus triplet loss over
/// the whole of `train` as one batch. Person ids must be `0..num_ids`.
pub fn check_encoder(train: &Dataset, params: &EncoderParams, margin: f64, h: f64) -> Result<CheckReport> {
    let batch: Vec<usize> = (0..train.len()).collect();
    let label = |pid: i64| pid as usize;
    let (_, grads) = batch_loss(train, &batch, &label, params, margin)?;
    let mut probe = params.clone();
    check_coordinates(&params.flatten(), &grads.flatten(), h, |flat| {
        probe.load_flat(flat);
        let (loss, _) = batch_loss(train, &batch, &label, &probe, margin)?;
        Ok((loss, batch_signature(train, &batch, &label, &probe, margin)))
    })
}

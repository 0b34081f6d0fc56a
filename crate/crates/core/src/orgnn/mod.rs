//! Outlier-removable graph network.
//!
//! For each part, the target and its neighbors form a complete graph. The
//! target row starts as the mean of the neighbor rows. Every layer scores
//! each node by its cosine to the mean of the others (a parameter-free
//! outlier score), computes pairwise affinities from the squared feature
//! difference, and replaces each node by a ReLU-transformed weighted average
//! of the other nodes. After `T` layers the target row is the reconstructed
//! sub-feature. Each part has its own parameters and classifier head.

mod layer;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::PartFeatureSet;
use crate::io;
use crate::linalg::{self, Matrix};

pub use layer::{
    affinity_matrix, edge_affinity, kink_margin, kink_signature, layer_backward, layer_forward,
    node_confidences, LayerTape,
};
pub use train::{
    batch_gradient, build_training_graphs, imprint_classifiers, mean_loss, train_orgnn, OrgnnTraining, TrainingGraph,
    IMPRINT_SCALE,
};

pub const GNN_MAGIC: &str = "OCCGNN1";

/// Which parts of a layer are active. The ablation variants switch pieces
/// off rather than using separate code paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GnnOptions {
    /// Weight sources by their clamped confidence; otherwise weight 1.
    pub confidence: bool,
    /// Learned affinities; otherwise 1.
    pub affinity: bool,
    /// Apply `W`; otherwise identity.
    pub transform: bool,
    pub relu: bool,
}

impl GnnOptions {
    /// The full network.
    pub const OUTLIER_REMOVABLE: Self = Self {
        confidence: true,
        affinity: true,
        transform: true,
        relu: true,
    };
    /// No outlier module: every confidence is 1.
    pub const PLAIN: Self = Self {
        confidence: false,
        ..Self::OUTLIER_REMOVABLE
    };
    /// Uniform averaging with no learned parts.
    pub const AVERAGE: Self = Self {
        confidence: false,
        affinity: false,
        transform: false,
        relu: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `D × D` transform.
    pub w: Matrix,
    /// Affinity projection.
    pub v: Vec<f64>,
    pub b: f64,
}

impl LayerParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Matrix::zeros(d, d),
            v: vec![0.0; d],
            b: 0.0,
        }
    }

    /// `W = I`, `V = 0`, `b = 0`.
    pub fn identity(d: usize) -> Self {
        Self {
            w: Matrix::identity(d),
            ..Self::zeros(d)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartParams {
    pub layers: Vec<LayerParams>,
    /// `num_ids × D`.
    pub classifier: Matrix,
}

/// Independent parameters for every part.
#[derive(Clone, Debug, PartialEq)]
pub struct OrgnnParams {
    pub parts: Vec<PartParams>,
}

impl OrgnnParams {
    /// `W = I + N(0, 0.01²)`, `V ~ N(0, 0.01²)`, `b = 0`, classifier
    /// `N(0, 0.01²)`.
    pub fn init(parts: usize, d: usize, layers: usize, num_ids: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).expect("valid sigma");
        let parts = (0..parts)
            .map(|_| {
                let layers = (0..layers)
                    .map(|_| {
                        let mut w = Matrix::identity(d);
                        w.as_mut_slice().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
                        LayerParams {
                            w,
                            v: (0..d).map(|_| noise.sample(&mut rng)).collect(),
                            b: 0.0,
                        }
                    })
                    .collect();
                let classifier = Matrix::from_vec(
                    num_ids,
                    d,
                    (0..num_ids * d).map(|_| noise.sample(&mut rng)).collect(),
                );
                PartParams { layers, classifier }
            })
            .collect();
        Self { parts }
    }

    /// Exact identity layers (the averaging starting point) with zero
    /// classifiers.
    pub fn identity(parts: usize, d: usize, layers: usize, num_ids: usize) -> Self {
        Self {
            parts: (0..parts)
                .map(|_| PartParams {
                    layers: (0..layers).map(|_| LayerParams::identity(d)).collect(),
                    classifier: Matrix::zeros(num_ids, d),
                })
                .collect(),
        }
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn num_layers(&self) -> usize {
        self.parts[0].layers.len()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].classifier.cols()
    }

    pub fn num_ids(&self) -> usize {
        self.parts[0].classifier.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            parts: self
                .parts
                .iter()
                .map(|p| PartParams {
                    layers: p.layers.iter().map(|l| LayerParams::zeros(l.v.len())).collect(),
                    classifier: Matrix::zeros(p.classifier.rows(), p.classifier.cols()),
                })
                .collect(),
        }
    }

    /// Parts-major, layers-major: `W, V, b` per layer, then the classifier.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.parts {
            for l in &p.layers {
                out.extend_from_slice(l.w.as_slice());
                out.extend_from_slice(&l.v);
                out.push(l.b);
            }
            out.extend_from_slice(p.classifier.as_slice());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for p in &mut self.parts {
            for l in &mut p.layers {
                take(l.w.as_mut_slice());
                take(&mut l.v);
                take(std::slice::from_mut(&mut l.b));
            }
            take(p.classifier.as_mut_slice());
        }
        assert_eq!(pos, flat.len());
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let mut flat = self.flatten();
        linalg::axpy(alpha, &other.flatten(), &mut flat);
        self.load_flat(&flat);
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// `OCCGNN1 <M> <D> <T> <num_ids>` checkpoint with an f32 payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<f32> = self.flatten().iter().map(|&v| v as f32).collect();
        io::write_container(
            path,
            GNN_MAGIC,
            &[self.num_parts(), self.dim(), self.num_layers(), self.num_ids()],
            &payload,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (f, payload) = io::read_container(path, GNN_MAGIC, 4, |f| {
            let (m, d, t, ids) = (f[0], f[1], f[2], f[3]);
            m * (t * (d * d + d + 1) + ids * d)
        })?;
        let (m, d, t, ids) = (f[0], f[1], f[2], f[3]);
        if m == 0 || d == 0 || t == 0 || ids == 0 {
            return Err(Error::format(path, "zero dimension in OR-GNN header"));
        }
        let mut params = Self::identity(m, d, t, ids);
        let flat: Vec<f64> = payload.iter().map(|&v| f64::from(v)).collect();
        params.load_flat(&flat);
        Ok(params)
    }
}

/// One part's graph at some layer: row 0 is the target.
#[derive(Clone, Debug)]
pub struct GraphState {
    pub part: usize,
    pub nodes: Matrix,
    pub confidences: Vec<f64>,
    pub affinities: Matrix,
}

impl GraphState {
    /// Target row initialized to the mean of the neighbor rows, then
    /// confidences and affinities computed for `layer`.
    pub fn new(part: usize, neighbors: &[Vec<f64>], layer: &LayerParams) -> Result<Self> {
        let nodes = initial_nodes(neighbors)?;
        let confidences = node_confidences(&nodes);
        let affinities = affinity_matrix(&nodes, layer);
        Ok(Self {
            part,
            nodes,
            confidences,
            affinities,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.rows()
    }
}

/// Confidence of node `i` (cosine to the mean of all other nodes).
pub fn node_confidence(state: &GraphState, i: usize) -> f64 {
    state.confidences[i]
}

/// Node matrix with the neighbor mean prepended as the target row.
pub fn initial_nodes(neighbors: &[Vec<f64>]) -> Result<Matrix> {
    let first = neighbors
        .first()
        .ok_or_else(|| Error::EmptyNeighborhood("graph".into()))?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for n in neighbors {
        if n.len() != d {
            return Err(Error::Shape("neighbor feature dimensions differ".into()));
        }
        linalg::axpy(1.0, n, &mut mean);
    }
    let k = neighbors.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);
    let mut rows = Vec::with_capacity(neighbors.len() + 1);
    rows.push(mean);
    rows.extend(neighbors.iter().cloned());
    Ok(Matrix::from_rows(&rows))
}

/// Runs `layers` over a part graph, returning every layer's tape.
pub fn forward_part(nodes: &Matrix, layers: &[LayerParams], opts: &GnnOptions) -> Vec<LayerTape> {
    let mut tapes: Vec<LayerTape> = Vec::with_capacity(layers.len());
    for l in layers {
        let input = tapes.last().map_or(nodes, |t| &t.output);
        let tape = layer_forward(input, l, opts);
        tapes.push(tape);
    }
    tapes
}

/// Target row after all layers (the initialization when there are none).
pub fn reconstruct_part(nodes: &Matrix, layers: &[LayerParams], opts: &GnnOptions) -> Vec<f64> {
    match forward_part(nodes, layers, opts).last() {
        Some(t) => t.output.row(0).to_vec(),
        None => nodes.row(0).to_vec(),
    }
}

/// Per-part graph inputs for one target: the neighbors' part features,
/// restricted to neighbors whose part is visible, in canonical (image id)
/// order. `None` where no neighbor shows the part.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub parts: Vec<Option<Matrix>>,
}

impl GraphInput {
    pub fn build(neighbors: &[&PartFeatureSet]) -> Result<Self> {
        let first = neighbors
            .first()
            .ok_or_else(|| Error::EmptyNeighborhood("reconstruction".into()))?;
        let mut sorted: Vec<&PartFeatureSet> = neighbors.to_vec();
        sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let parts = (0..first.parts())
            .map(|p| {
                let rows: Vec<Vec<f64>> = sorted
                    .iter()
                    .filter(|n| n.is_visible(p))
                    .map(|n| n.part_f64(p))
                    .collect();
                if rows.is_empty() {
                    Ok(None)
                } else {
                    initial_nodes(&rows).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { parts })
    }
}

/// Reconstructed sub-features (unnormalized) per part; `None` where no
/// neighbor shows the part.
pub fn reconstruct(
    neighbors: &[&PartFeatureSet],
    params: &OrgnnParams,
    layers: usize,
    opts: &GnnOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    let input = GraphInput::build(neighbors)?;
    if input.parts.len() != params.num_parts() {
        return Err(Error::Shape(format!(
            "{} parts vs {} parameter sets",
            input.parts.len(),
            params.num_parts()
        )));
    }
    let layers = layers.min(params.num_layers());
    Ok(input
        .parts
        .iter()
        .zip(&params.parts)
        .map(|(nodes, pp)| {
            nodes
                .as_ref()
                .map(|n| reconstruct_part(n, &pp.layers[..layers], opts))
        })
        .collect())
}

/// Final retrieval representation: every reconstructed part L2-normalized
/// and concatenated. Parts with no reconstruction use the target's own
/// feature if visible, zeros otherwise.
pub fn representation(target: &PartFeatureSet, reconstructed: &[Option<Vec<f64>>]) -> Vec<f64> {
    let d = target.dim();
    let mut out = vec![0.0; target.parts() * d];
    for (p, r) in reconstructed.iter().enumerate() {
        let v = match r {
            Some(v) => linalg::normalized(v),
            None if target.is_visible(p) => linalg::normalized(&target.part_f64(p)),
            None => continue,
        };
        out[p * d..(p + 1) * d].copy_from_slice(&v);
    }
    out
}

/// Loss and parameter gradients for one target.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: OrgnnParams,
    /// Activation pattern of the forward pass.
    pub signature: Vec<bool>,
    /// Distance of the nearest ReLU/clamp variable from its kink.
    pub kink_margin: f64,
}

/// Mean over parts (those with a graph) of the softmax cross-entropy of
/// `C_k · x_k^T(target)`, with gradients through every layer.
pub fn orgnn_loss(input: &GraphInput, label: usize, params: &OrgnnParams, opts: &GnnOptions) -> Result<LossGrad> {
    if label >= params.num_ids() {
        return Err(Error::Shape(format!(
            "label {label} outside classifier range {}",
            params.num_ids()
        )));
    }
    let used = input.parts.iter().filter(|p| p.is_some()).count();
    let mut grad = params.zeros_like();
    let mut signature = Vec::new();
    let mut margin = f64::INFINITY;
    if used == 0 {
        return Ok(LossGrad {
            loss: 0.0,
            grad,
            signature,
            kink_margin: margin,
        });
    }
    let scale = 1.0 / used as f64;
    let mut loss = 0.0;
    for (k, nodes) in input.parts.iter().enumerate() {
        let Some(nodes) = nodes else { continue };
        let pp = &params.parts[k];
        let tapes = forward_part(nodes, &pp.layers, opts);
        for t in &tapes {
            kink_signature(t, opts, &mut signature);
            margin = margin.min(kink_margin(t, opts));
        }
        let out = tapes.last().map_or(nodes, |t| &t.output);
        let x = out.row(0);
        let logits = pp.classifier.matvec(x);
        loss += scale * linalg::cross_entropy(&logits, label);
        let mut delta = linalg::softmax(&logits);
        delta[label] -= 1.0;
        delta.iter_mut().for_each(|v| *v *= scale);
        let gp = &mut grad.parts[k];
        gp.classifier.add_outer(1.0, &delta, x);
        let mut d_out = Matrix::zeros(out.rows(), out.cols());
        d_out.row_mut(0).copy_from_slice(&pp.classifier.matvec_t(&delta));
        for (t, tape) in tapes.iter().enumerate().rev() {
            d_out = layer_backward(tape, &pp.layers[t], opts, &d_out, &mut gp.layers[t]);
        }
    }
    Ok(LossGrad {
        loss,
        grad,
        signature,
        kink_margin: margin,
    })
}

/// Loss only, for finite-difference checks.
pub fn orgnn_loss_value(input: &GraphInput, label: usize, params: &OrgnnParams, opts: &GnnOptions) -> Result<(f64, Vec<bool>)> {
    let out = orgnn_loss(input, label, params, opts)?;
    Ok((out.loss, out.signature))
}

//! Training on neighbor sets of the labelled training split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::linalg;
use crate::neighborhood::{build_index, image_neighborhood};
use crate::training::{group_by_label, pk_batches, Adam, StepSchedule};

use super::{orgnn_loss, GnnOptions, GraphInput, OrgnnParams};

/// One training target: its identity class and its per-part graphs.
#[derive(Clone, Debug)]
pub struct TrainingGraph {
    pub image_id: String,
    pub person_id: i64,
    pub label: usize,
    pub input: GraphInput,
}

/// Neighborhoods of every training image within the training split (each
/// image excluding itself), using `k_train` and `theta_train`. Images whose
/// neighborhood is empty are dropped.
pub fn build_training_graphs(train: &Dataset, cfg: &PipelineConfig) -> Result<Vec<TrainingGraph>> {
    if !train.has_labels() {
        return Err(Error::MissingLabel("training split has unlabelled items".into()));
    }
    let train = train.normalized()?;
    let index = build_index(&train)?;
    let ids = train.identities();
    let graphs = train
        .items()
        .par_iter()
        .map(|it| {
            if it.num_visible() == 0 {
                return Ok(None);
            }
            let ns = image_neighborhood(&index, it, cfg.k_train, cfg.theta_train)?;
            if ns.fallback {
                return Ok(None);
            }
            let members: Vec<_> = ns.members.iter().map(|m| &index.items()[m.item]).collect();
            let person_id = it.person_id.expect("labelled");
            Ok(Some(TrainingGraph {
                image_id: it.image_id.clone(),
                person_id,
                label: ids.binary_search(&person_id).expect("known identity"),
                input: GraphInput::build(&members)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let graphs: Vec<TrainingGraph> = graphs.into_iter().flatten().collect();
    tracing::info!(graphs = graphs.len(), of = train.len(), "training neighborhoods");
    Ok(graphs)
}

#[derive(Clone, Debug)]
pub struct OrgnnTraining {
    pub params: OrgnnParams,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub num_graphs: usize,
}

/// Mean loss and gradient over a set of graphs. Per-graph work runs in
/// parallel; the reduction is sequential in batch order.
pub fn batch_gradient(
    graphs: &[TrainingGraph],
    batch: &[usize],
    params: &OrgnnParams,
    opts: &GnnOptions,
) -> Result<(f64, OrgnnParams)> {
    let per_graph = batch
        .par_iter()
        .map(|&g| orgnn_loss(&graphs[g].input, graphs[g].label, params, opts))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for out in &per_graph {
        loss += scale * out.loss;
        grad.add_scaled(scale, &out.grad);
    }
    Ok((loss, grad))
}

/// Mean loss over all graphs, for monitoring.
pub fn mean_loss(graphs: &[TrainingGraph], params: &OrgnnParams, opts: &GnnOptions) -> Result<f64> {
    let all: Vec<usize> = (0..graphs.len()).collect();
    let losses = all
        .par_iter()
        .map(|&g| orgnn_loss(&graphs[g].input, graphs[g].label, params, opts).map(|o| o.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Adam training with `batch_persons × sets_per_person` neighbor sets per
/// step. Classifier heads start imprinted from the class means. `on_epoch` sees the parameters after every completed epoch, so a
/// caller can keep the last good checkpoint if a later epoch diverges.
pub fn train_orgnn(
    train: &Dataset,
    cfg: &PipelineConfig,
    opts: &GnnOptions,
    mut on_epoch: impl FnMut(usize, f64, &OrgnnParams) -> Result<()>,
) -> Result<OrgnnTraining> {
    cfg.validate()?;
    if train.parts() != cfg.m {
        return Err(Error::Config(format!("m={} but training features have {} parts", cfg.m, train.parts())));
    }
    let graphs = build_training_graphs(train, cfg)?;
    let ids = train.identities();
    let mut params = OrgnnParams::init(train.parts(), train.dim(), cfg.t, ids.len(), cfg.seed);
    imprint_classifiers(&mut params, &graphs, IMPRINT_SCALE);
    if cfg.epochs == 0 {
        return Ok(OrgnnTraining {
            params,
            epoch_losses: Vec::new(),
            num_graphs: graphs.len(),
        });
    }
    if graphs.is_empty() {
        return Err(Error::EmptyNeighborhood("no training image has a non-empty neighborhood".into()));
    }
    let groups = group_by_label(graphs.iter().enumerate().map(|(i, g)| (i, g.person_id)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let schedule = StepSchedule::from_config(cfg);
    let mut adam = Adam::new(params.flatten().len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        let batches = pk_batches(&groups, cfg.batch_persons, cfg.sets_per_person, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grad) = batch_gradient(&graphs, batch, &params, opts)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            let mut flat = params.flatten();
            adam.step(&mut flat, &grad.flatten(), lr);
            params.load_flat(&flat);
        }
        let mean = total / batches.len() as f64;
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        tracing::debug!(epoch, loss = mean, lr, "or-gnn epoch");
        epoch_losses.push(mean);
        on_epoch(epoch, mean, &params)?;
    }
    Ok(OrgnnTraining {
        params,
        epoch_losses,
        num_graphs: graphs.len(),
    })
}

/// Logit scale of imprinted classifier rows.
pub const IMPRINT_SCALE: f64 = 10.0;

/// Sets each classifier row to `scale` times the normalized mean target
/// initialization (neighbor mean) of its class. Classes with no graph on a
/// part keep their random row.
pub fn imprint_classifiers(params: &mut OrgnnParams, graphs: &[TrainingGraph], scale: f64) {
    for (k, pp) in params.parts.iter_mut().enumerate() {
        let mut sums = vec![vec![0.0; pp.classifier.cols()]; pp.classifier.rows()];
        for g in graphs {
            if let Some(nodes) = &g.input.parts[k] {
                linalg::axpy(1.0, nodes.row(0), &mut sums[g.label]);
            }
        }
        for (c, s) in sums.iter().enumerate() {
            if linalg::norm(s) > 0.0 {
                let row = pp.classifier.row_mut(c);
                for (r, v) in row.iter_mut().zip(linalg::normalized(s)) {
                    *r = scale * v;
                }
            }
        }
    }
}

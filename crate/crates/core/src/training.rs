//! Shared training machinery: Adam, the step learning-rate schedule, and
//! identity-balanced (P persons × K samples) batch sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::config::PipelineConfig;

/// Adam with bias correction, operating on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Multiplies the base rate by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            base: cfg.learning_rate,
            milestones: cfg.lr_decay_epochs.clone(),
            factor: cfg.lr_decay_factor,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

/// Groups candidate indices by label (sorted by label for determinism).
pub fn group_by_label(labels: impl IntoIterator<Item = (usize, i64)>) -> BTreeMap<i64, Vec<usize>> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (idx, label) in labels {
        groups.entry(label).or_default().push(idx);
    }
    groups
}

/// One epoch of identity-balanced batches: identities are shuffled and taken
/// `persons` at a time; each contributes `per_person` indices, sampled
/// without replacement when it has enough and with replacement otherwise.
pub fn pk_batches<R: Rng>(
    groups: &BTreeMap<i64, Vec<usize>>,
    persons: usize,
    per_person: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut ids: Vec<&i64> = groups.keys().collect();
    ids.shuffle(rng);
    ids.chunks(persons)
        .map(|chunk| {
            let mut batch = Vec::with_capacity(chunk.len() * per_person);
            for id in chunk {
                let members = &groups[*id];
                if members.len() >= per_person {
                    batch.extend(members.choose_multiple(rng, per_person).copied());
                } else {
                    for _ in 0..per_person {
                        batch.push(*members.choose(rng).expect("non-empty group"));
                    }
                }
            }
            batch
        })
        .collect()
}

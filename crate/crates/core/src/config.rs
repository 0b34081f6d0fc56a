//! Pipeline hyperparameters and the flat `key=value` config format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Parts per image.
    pub m: usize,
    /// Feature dimension per part.
    pub d: usize,
    pub k_train: usize,
    pub k_infer: usize,
    pub theta_train: f64,
    pub theta_infer: f64,
    /// OR-GNN layers.
    pub t: usize,
    /// Triplet margin.
    pub eta: f64,
    pub learning_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    /// Graph-training batch: persons per batch.
    pub batch_persons: usize,
    /// Graph-training batch: neighbor sets per person.
    pub sets_per_person: usize,
    /// Encoder batch: persons per batch.
    pub encoder_batch_persons: usize,
    /// Encoder batch: images per person.
    pub encoder_images_per_person: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m: 6,
            d: 256,
            k_train: 30,
            k_infer: 10,
            theta_train: 0.7,
            theta_infer: 0.7,
            t: 2,
            eta: 0.3,
            learning_rate: 3.5e-4,
            lr_decay_epochs: vec![40, 70],
            lr_decay_factor: 0.1,
            epochs: 120,
            batch_persons: 16,
            sets_per_person: 4,
            encoder_batch_persons: 8,
            encoder_images_per_person: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Settings for desk-scale synthetic runs: `D = 32`, a shorter schedule
    /// with the decay points kept at the same fractions of training, and a
    /// larger step so the shortened schedule still converges.
    pub fn desk() -> Self {
        Self {
            d: 32,
            learning_rate: 1e-2,
            epochs: 30,
            lr_decay_epochs: vec![10, 18],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.m == 0 || self.d == 0 {
            return bad("m and d must be >= 1");
        }
        if self.k_train == 0 || self.k_infer == 0 {
            return bad("k_train and k_infer must be >= 1");
        }
        for theta in [self.theta_train, self.theta_infer] {
            if !(-1.0..=1.0).contains(&theta) {
                return bad("theta must lie in [-1, 1]");
            }
        }
        if self.t == 0 {
            return bad("t must be >= 1");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_persons == 0
            || self.sets_per_person == 0
            || self.encoder_batch_persons < 2
            || self.encoder_images_per_person < 2
        {
            return bad("batch sizes must be positive (encoder batches need >= 2 persons x 2 images)");
        }
        Ok(())
    }

    /// Sets one field from its textual value. Keys are the field names; a
    /// leading `--` and kebab-case are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let value = value.trim();
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key.as_str() {
            "m" => self.m = parse(&key, value)?,
            "d" => self.d = parse(&key, value)?,
            "k_train" => self.k_train = parse(&key, value)?,
            "k_infer" => self.k_infer = parse(&key, value)?,
            "theta_train" => self.theta_train = parse(&key, value)?,
            "theta_infer" => self.theta_infer = parse(&key, value)?,
            "t" => self.t = parse(&key, value)?,
            "eta" => self.eta = parse(&key, value)?,
            "learning_rate" => self.learning_rate = parse(&key, value)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(&key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "lr_decay_factor" => self.lr_decay_factor = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_persons" => self.batch_persons = parse(&key, value)?,
            "sets_per_person" => self.sets_per_person = parse(&key, value)?,
            "encoder_batch_persons" => self.encoder_batch_persons = parse(&key, value)?,
            "encoder_images_per_person" => self.encoder_images_per_person = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` document on top of `self`. Blank lines and
    /// `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let decay = self
            .lr_decay_epochs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "m={}", self.m);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "k_train={}", self.k_train);
        let _ = writeln!(s, "k_infer={}", self.k_infer);
        let _ = writeln!(s, "theta_train={}", self.theta_train);
        let _ = writeln!(s, "theta_infer={}", self.theta_infer);
        let _ = writeln!(s, "t={}", self.t);
        let _ = writeln!(s, "eta={}", self.eta);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "lr_decay_epochs={decay}");
        let _ = writeln!(s, "lr_decay_factor={}", self.lr_decay_factor);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_persons={}", self.batch_persons);
        let _ = writeln!(s, "sets_per_person={}", self.sets_per_person);
        let _ = writeln!(s, "encoder_batch_persons={}", self.encoder_batch_persons);
        let _ = writeln!(s, "encoder_images_per_person={}", self.encoder_images_per_person);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.k_train, c.theta_train), (30, 0.7));
        assert_eq!((c.k_infer, c.theta_infer), (10, 0.7));
        assert_eq!(c.t, 2);
        assert_eq!(c.eta, 0.3);
        assert_eq!(c.learning_rate, 3.5e-4);
        assert_eq!(c.lr_decay_epochs, vec![40, 70]);
        assert_eq!(c.epochs, 120);
        assert_eq!((c.batch_persons, c.sets_per_person), (16, 4));
        assert_eq!((c.encoder_batch_persons, c.encoder_images_per_person), (8, 4));
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = PipelineConfig::desk();
        c.seed = 99;
        c.lr_decay_epochs = vec![3];
        let mut back = PipelineConfig::default();
        back.apply_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn kebab_flags_accepted() {
        let mut c = PipelineConfig::default();
        c.set("--k-infer", "4").unwrap();
        c.set("theta-infer", "0.8").unwrap();
        assert_eq!((c.k_infer, c.theta_infer), (4, 0.8));
        assert!(c.set("bogus", "1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = PipelineConfig::default();
        c.theta_infer = 1.5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.eta = 0.0;
        assert!(c.validate().is_err());
    }
}

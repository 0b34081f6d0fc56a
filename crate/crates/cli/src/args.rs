//! Command-line surface. Pipeline settings resolve as: profile defaults,
//! then `OCCREC_SEED`, then the `--config` file, then explicit flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use occrec::PipelineConfig;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "occrec", version, about = "Neighborhood-guided feature reconstruction for occluded person retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Published hyperparameters (D = 256, 120 epochs).
    Paper,
    /// Desk-scale synthetic runs (D = 32, 30 epochs).
    Desk,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Default hyperparameter set the config file and flags apply on top of.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Paper)]
    pub profile: Profile,
    /// Flat key=value file with PipelineConfig field names.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap on worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Log filter, e.g. `info` or `occrec=debug`; RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

/// One flag per PipelineConfig field.
#[derive(Debug, Default, Args)]
#[command(next_help_heading = "Pipeline config")]
pub struct ConfigOverrides {
    /// Parts per image.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Feature dimension per part.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Per-part neighbors when building training graphs.
    #[arg(long, global = true)]
    pub k_train: Option<usize>,
    /// Per-part neighbors at inference.
    #[arg(long, global = true)]
    pub k_infer: Option<usize>,
    /// Similarity threshold when building training graphs.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub theta_train: Option<f64>,
    /// Similarity threshold at inference.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub theta_infer: Option<f64>,
    /// Graph layers.
    #[arg(long, global = true)]
    pub t: Option<usize>,
    /// Triplet margin.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long, global = true, value_name = "E1,E2,..")]
    pub lr_decay_epochs: Option<String>,
    #[arg(long, global = true)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Persons per graph-training batch.
    #[arg(long, global = true)]
    pub batch_persons: Option<usize>,
    /// Neighbor sets per person in a graph-training batch.
    #[arg(long, global = true)]
    pub sets_per_person: Option<usize>,
    /// Persons per encoder batch.
    #[arg(long, global = true)]
    pub encoder_batch_persons: Option<usize>,
    /// Images per person in an encoder batch.
    #[arg(long, global = true)]
    pub encoder_images_per_person: Option<usize>,
    /// Master seed (falls back to OCCREC_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ConfigOverrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    out.push((stringify!($f), v.to_string()));
                }
            )*};
        }
        push!(
            m,
            d,
            k_train,
            k_infer,
            theta_train,
            theta_infer,
            t,
            eta,
            learning_rate,
            lr_decay_epochs,
            lr_decay_factor,
            epochs,
            batch_persons,
            sets_per_person,
            encoder_batch_persons,
            encoder_images_per_person,
            seed
        );
        out
    }
}

impl GlobalArgs {
    pub fn resolve_config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match self.profile {
            Profile::Paper => PipelineConfig::default(),
            Profile::Desk => PipelineConfig::desk(),
        };
        if let Ok(seed) = std::env::var("OCCREC_SEED") {
            cfg.set("seed", &seed)
                .map_err(|_| CliError::usage(format!("OCCREC_SEED={seed:?} is not an unsigned integer")))?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_kv(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        }
        for (k, v) in self.overrides.pairs() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic occluded benchmark (train/query/gallery feature files and truth.json).
    Gen(GenArgs),
    /// Generate body-mask fixtures (PGM) with per-part visibility truth.
    Masks(MasksArgs),
    /// Project raw part features through a trained encoder.
    Encode(EncodeArgs),
    /// Estimate per-part visibility from body masks.
    Occlusion(OcclusionArgs),
    /// Normalize a gallery and report per-part index sizes.
    Index(IndexArgs),
    /// Compute image neighborhoods of every query over the gallery (JSON lines).
    Neighbors(NeighborsArgs),
    /// Train the part encoder with identification and batch-hard triplet losses.
    TrainEncoder(TrainEncoderArgs),
    /// Train graph reconstruction parameters on neighborhood graphs.
    TrainGnn(TrainGnnArgs),
    /// Write reconstructed part features for a probe set.
    Reconstruct(ReconstructArgs),
    /// Score one variant and write its report.
    Eval(EvalArgs),
    /// Train what is missing and evaluate every variant into one CSV.
    Ablate(AblateArgs),
    /// Finite-difference checks of the hand-written gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic spec; fields not given keep their defaults.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub images_per_identity: Option<usize>,
    /// Fraction of test images that are occluded.
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    #[arg(long)]
    pub obstacle_clusters: Option<usize>,
    /// Feature dimension per part.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Also write raw_{train,query,gallery}.feat for the encoder path.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub occlusion_rate: f64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Raw feature file.
    #[arg(long)]
    pub input: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OcclusionArgs {
    /// Mask files (PGM or run-length JSON) or directories of them.
    #[arg(required = true)]
    pub masks: Vec<PathBuf>,
    /// JSON-lines visibility estimates, one per mask.
    #[arg(long)]
    pub out: PathBuf,
    /// Feature file whose visibility scores should be replaced; masks match
    /// images by file stem.
    #[arg(long, requires = "apply_out")]
    pub apply: Option<PathBuf>,
    /// Where the updated feature file goes.
    #[arg(long)]
    pub apply_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Normalized gallery feature file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use k_train/theta_train instead of the inference settings.
    #[arg(long)]
    pub training: bool,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    /// Labelled raw training features.
    #[arg(long)]
    pub train: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GnnKind {
    /// Confidence-weighted aggregation.
    Orgnn,
    /// Plain GNN without confidences.
    Gnn,
}

#[derive(Debug, Args)]
pub struct TrainGnnArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Checkpoint; rewritten after every epoch so the last good one survives.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = GnnKind::Orgnn)]
    pub kind: GnnKind,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Checkpoint from train-gnn.
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    #[arg(long, default_value = "oan+orgnn")]
    pub variant: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Keep gallery features as they are instead of reconstructing them.
    #[arg(long)]
    pub no_reconstruct_gallery: bool,
    /// Ignore gallery images sharing identity and camera with the query.
    #[arg(long)]
    pub junk_filter: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// baseline, oan, gnn_no_oan, oan+avgagg, oan+gnn, oan+orgnn or oan+orgnn+ub.
    #[arg(long, default_value = "oan+orgnn")]
    pub variant: String,
    /// OR-GNN checkpoint.
    #[arg(long)]
    pub orgnn: Option<PathBuf>,
    /// Plain GNN checkpoint.
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub flags: EvalFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Existing OR-GNN checkpoint; trained from --train when absent.
    #[arg(long)]
    pub orgnn: Option<PathBuf>,
    /// Existing plain GNN checkpoint; trained from --train when absent.
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    /// Directory for per-variant reports and ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: EvalFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = occrec::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = occrec::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Feature dimension of the graph instances.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Neighbors per graph.
    #[arg(long, default_value_t = 4)]
    pub neighbors: usize,
    /// Parts per graph.
    #[arg(long, default_value_t = 2)]
    pub parts: usize,
    /// JSON summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Default manifest location: inside an output directory, or beside an
/// output file.
pub fn manifest_path(global: &GlobalArgs, out: &Path, out_is_dir: bool) -> PathBuf {
    if let Some(p) = &global.manifest {
        return p.clone();
    }
    if out_is_dir {
        return out.join("manifest.json");
    }
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

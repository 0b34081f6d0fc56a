use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{baseline_representation, visible_representation, Dataset, PartFeatureSet};
use crate::neighborhood::{build_index, image_neighborhood, oracle_filter, outlier_rate, GalleryIndex};
use crate::orgnn::{reconstruct, representation, GnnOptions, OrgnnParams};

use super::report::{CmcPoint, EvalReport, NeighborhoodStats, QueryResult};
use super::{rank, rank_by, score, visible_similarity, NoPostProcess, PostProcess, Ranked, CMC_RANKS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cosine on the concatenation of every part, occluded or not.
    Baseline,
    /// Mean cosine over the parts visible in both images.
    Oan,
    OanAvgAgg,
    OanGnn,
    OanOrgnn,
    /// Full pipeline with other identities removed from every neighborhood.
    OanOrgnnUb,
    /// Plain GNN with occlusion ignored (every part treated as visible).
    GnnNoOan,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Oan,
        Variant::GnnNoOan,
        Variant::OanAvgAgg,
        Variant::OanGnn,
        Variant::OanOrgnn,
        Variant::OanOrgnnUb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Oan => "oan",
            Variant::OanAvgAgg => "oan+avgagg",
            Variant::OanGnn => "oan+gnn",
            Variant::OanOrgnn => "oan+orgnn",
            Variant::OanOrgnnUb => "oan+orgnn+ub",
            Variant::GnnNoOan => "gnn_no_oan",
        }
    }

    /// Graph options for the variants that reconstruct.
    pub fn gnn_options(self) -> Option<GnnOptions> {
        match self {
            Variant::Baseline | Variant::Oan => None,
            Variant::OanAvgAgg => Some(GnnOptions::AVERAGE),
            Variant::OanGnn | Variant::GnnNoOan => Some(GnnOptions::PLAIN),
            Variant::OanOrgnn | Variant::OanOrgnnUb => Some(GnnOptions::OUTLIER_REMOVABLE),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Trained graph parameters. `gnn` (trained without confidences) serves the
/// plain-GNN variants, `orgnn` the outlier-removable ones.
#[derive(Clone, Debug, Default)]
pub struct VariantParams {
    pub orgnn: Option<OrgnnParams>,
    pub gnn: Option<OrgnnParams>,
}

impl VariantParams {
    fn for_variant(&self, v: Variant, parts: usize, dim: usize, layers: usize) -> Result<OrgnnParams> {
        let missing = |what: &str| Error::Config(format!("variant {v} needs {what} parameters"));
        match v {
            Variant::OanAvgAgg => Ok(OrgnnParams::identity(parts, dim, layers, 1)),
            Variant::OanGnn | Variant::GnnNoOan => self.gnn.clone().ok_or_else(|| missing("plain GNN")),
            _ => self.orgnn.clone().ok_or_else(|| missing("OR-GNN")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Reconstruct gallery entries from the rest of the gallery too.
    pub reconstruct_gallery: bool,
    /// Drop gallery entries sharing both identity and camera with the query.
    pub junk_filter: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            reconstruct_gallery: true,
            junk_filter: false,
        }
    }
}

struct Recon {
    rep: Vec<f64>,
    fallback: bool,
    size: usize,
    outliers: Option<f64>,
}

fn reconstruct_one(
    target: &PartFeatureSet,
    index: &GalleryIndex,
    params: &OrgnnParams,
    opts: &GnnOptions,
    cfg: &PipelineConfig,
    oracle: bool,
) -> Result<Recon> {
    if target.num_visible() == 0 {
        tracing::warn!(image = %target.image_id, "fully occluded; no neighborhood");
        return Ok(Recon {
            rep: visible_representation(target),
            fallback: true,
            size: 0,
            outliers: None,
        });
    }
    let mut ns = image_neighborhood(index, target, cfg.k_infer, cfg.theta_infer)?;
    if oracle {
        ns = oracle_filter(&ns, index)?;
    }
    if ns.members.is_empty() {
        return Ok(Recon {
            rep: visible_representation(target),
            fallback: true,
            size: 0,
            outliers: None,
        });
    }
    let members: Vec<&PartFeatureSet> = ns.members.iter().map(|m| &index.items()[m.item]).collect();
    let parts = reconstruct(&members, params, cfg.t, opts)?;
    Ok(Recon {
        rep: representation(target, &parts),
        fallback: false,
        size: ns.members.len(),
        outliers: outlier_rate(&ns, index),
    })
}

/// Retrieval vectors for queries and gallery under a reconstructing or
/// baseline variant.
#[derive(Clone, Debug)]
pub struct Representations {
    pub query: Vec<Vec<f64>>,
    pub gallery: Vec<Vec<f64>>,
    pub query_fallback: Vec<bool>,
    pub stats: Option<NeighborhoodStats>,
}

pub fn representations(
    variant: Variant,
    query: &Dataset,
    gallery: &Dataset,
    params: &VariantParams,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<Representations> {
    if query.parts() != gallery.parts() || query.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query is M={} D={}, gallery is M={} D={}",
            query.parts(),
            query.dim(),
            gallery.parts(),
            gallery.dim()
        )));
    }
    let query = query.normalized()?;
    let gallery = gallery.normalized()?;
    let Some(gnn_opts) = variant.gnn_options() else {
        if variant != Variant::Baseline {
            return Err(Error::Config(format!("variant {variant} has no vector representation")));
        }
        let all = |ds: &Dataset| ds.items().iter().map(baseline_representation).collect();
        return Ok(Representations {
            query: all(&query),
            query_fallback: vec![false; query.len()],
            gallery: all(&gallery),
            stats: None,
        });
    };
    let (query, gallery) = if variant == Variant::GnnNoOan {
        (query.map_items(PartFeatureSet::with_all_visible), gallery.map_items(PartFeatureSet::with_all_visible))
    } else {
        (query, gallery)
    };
    let oracle = variant == Variant::OanOrgnnUb;
    if oracle && !(query.has_labels() && gallery.has_labels()) {
        return Err(Error::MissingLabel(format!("variant {variant} needs person ids on query and gallery")));
    }
    let p = params.for_variant(variant, query.parts(), query.dim(), cfg.t)?;
    if p.num_parts() != query.parts() || p.dim() != query.dim() {
        return Err(Error::Shape(format!(
            "parameters are M={} D={}, features are M={} D={}",
            p.num_parts(),
            p.dim(),
            query.parts(),
            query.dim()
        )));
    }
    let index = build_index(&gallery)?;
    let run = |items: &[PartFeatureSet]| -> Result<Vec<Recon>> {
        items
            .par_iter()
            .map(|it| reconstruct_one(it, &index, &p, &gnn_opts, cfg, oracle))
            .collect()
    };
    let q = run(query.items())?;
    let g = if opts.reconstruct_gallery {
        run(gallery.items())?
    } else {
        gallery
            .items()
            .iter()
            .map(|it| Recon {
                rep: visible_representation(it),
                fallback: false,
                size: 0,
                outliers: None,
            })
            .collect()
    };
    let sizes: Vec<usize> = q.iter().filter(|r| !r.fallback).map(|r| r.size).collect();
    let rates: Vec<f64> = q.iter().filter_map(|r| r.outliers).collect();
    let stats = NeighborhoodStats {
        mean_size: if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        },
        outlier_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        query_fallbacks: q.iter().filter(|r| r.fallback).count(),
        gallery_fallbacks: if opts.reconstruct_gallery {
            g.iter().filter(|r| r.fallback).count()
        } else {
            0
        },
        reconstruct_gallery: opts.reconstruct_gallery,
    };
    Ok(Representations {
        query_fallback: q.iter().map(|r| r.fallback).collect(),
        query: q.into_iter().map(|r| r.rep).collect(),
        gallery: g.into_iter().map(|r| r.rep).collect(),
        stats: Some(stats),
    })
}

/// Runs one variant end to end and scores it.
pub fn run_variant(
    variant: Variant,
    query: &Dataset,
    gallery: &Dataset,
    params: &VariantParams,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    run_variant_with(variant, query, gallery, params, cfg, opts, &NoPostProcess)
}

pub fn run_variant_with(
    variant: Variant,
    query: &Dataset,
    gallery: &Dataset,
    params: &VariantParams,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
    post: &dyn PostProcess,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if !(query.has_labels() && gallery.has_labels()) {
        return Err(Error::MissingLabel("evaluation needs person ids on query and gallery".into()));
    }
    let (ranked, fallback, stats): (Vec<Vec<Ranked>>, Vec<bool>, Option<NeighborhoodStats>) = if variant == Variant::Oan {
        let q = query.normalized()?;
        let g = gallery.normalized()?;
        let ranked = q
            .items()
            .par_iter()
            .map(|qi| rank_by(g.len(), |j| visible_similarity(qi, &g.items()[j])))
            .collect();
        (ranked, vec![false; q.len()], None)
    } else {
        let reps = representations(variant, query, gallery, params, cfg, opts)?;
        let ranked = reps
            .query
            .par_iter()
            .map(|q| rank(q, &reps.gallery))
            .collect::<Result<Vec<_>>>()?;
        (ranked, reps.query_fallback, reps.stats)
    };
    let relevance: Vec<Vec<bool>> = ranked
        .into_iter()
        .enumerate()
        .map(|(qi, mut list)| {
            post.apply(qi, &mut list);
            let q = &query.items()[qi];
            list.iter()
                .filter(|r| {
                    let g = &gallery.items()[r.index];
                    !(opts.junk_filter && g.person_id == q.person_id && g.camera_id == q.camera_id)
                })
                .map(|r| gallery.items()[r.index].person_id == q.person_id)
                .collect()
        })
        .collect();
    let scores = score(&relevance, &CMC_RANKS);
    let skipped = scores.ap.iter().filter(|a| a.is_none()).count();
    if skipped > 0 {
        tracing::warn!(skipped, "queries without a gallery match skipped");
    }
    let per_query = query
        .items()
        .iter()
        .enumerate()
        .map(|(i, q)| QueryResult {
            query: q.image_id.clone(),
            ap: scores.ap[i],
            first_hit: scores.first_hits[i],
            fallback: fallback[i],
        })
        .collect();
    Ok(EvalReport {
        variant: variant.as_str().to_string(),
        map: scores.map,
        cmc: CMC_RANKS
            .iter()
            .zip(&scores.cmc)
            .map(|(&rank, &value)| CmcPoint { rank, value })
            .collect(),
        num_queries: query.len(),
        skipped_queries: skipped,
        fallbacks: fallback.iter().filter(|&&f| f).count(),
        neighborhood: stats,
        junk_filter: opts.junk_filter,
        per_query,
        config: cfg.clone(),
    })
}

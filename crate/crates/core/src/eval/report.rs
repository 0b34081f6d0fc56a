use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// `None` when the gallery holds no match for the query.
    pub ap: Option<f64>,
    pub first_hit: Option<usize>,
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodStats {
    /// Mean member count over non-fallback queries.
    pub mean_size: f64,
    /// Mean fraction of members from another identity, where labels allow.
    pub outlier_rate: Option<f64>,
    pub query_fallbacks: usize,
    pub gallery_fallbacks: usize,
    pub reconstruct_gallery: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub map: f64,
    pub cmc: Vec<CmcPoint>,
    pub num_queries: usize,
    /// Queries without any match in the gallery (excluded from metrics).
    pub skipped_queries: usize,
    /// Queries whose neighborhood was empty and used their own visible parts.
    pub fallbacks: usize,
    pub neighborhood: Option<NeighborhoodStats>,
    pub junk_filter: bool,
    pub per_query: Vec<QueryResult>,
    pub config: PipelineConfig,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.rank == rank).map(|p| p.value)
    }

    pub fn csv_row(&self) -> String {
        let at = |r| self.cmc_at(r).unwrap_or(0.0);
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.variant,
            self.map,
            at(1),
            at(5),
            at(10),
            self.fallbacks
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

pub const CSV_HEADER: &str = "variant,map,rank1,rank5,rank10,fallbacks";

pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    io::write_atomic(path, s.as_bytes())
}

/// JSON Schema (draft 2020-12) of a serialized [`EvalReport`].
pub const REPORT_SCHEMA: &str = r##"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "EvalReport",
  "type": "object",
  "required": ["variant", "map", "cmc", "num_queries", "skipped_queries", "fallbacks",
               "neighborhood", "junk_filter", "per_query", "config"],
  "properties": {
    "variant": {"enum": ["baseline", "oan", "oan+avgagg", "oan+gnn", "oan+orgnn", "oan+orgnn+ub", "gnn_no_oan"]},
    "map": {"type": "number", "minimum": 0, "maximum": 1},
    "cmc": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["rank", "value"],
        "properties": {
          "rank": {"type": "integer", "minimum": 1},
          "value": {"type": "number", "minimum": 0, "maximum": 1}
        }
      }
    },
    "num_queries": {"type": "integer", "minimum": 0},
    "skipped_queries": {"type": "integer", "minimum": 0},
    "fallbacks": {"type": "integer", "minimum": 0},
    "neighborhood": {
      "oneOf": [
        {"type": "null"},
        {
          "type": "object",
          "required": ["mean_size", "outlier_rate", "query_fallbacks", "gallery_fallbacks", "reconstruct_gallery"],
          "properties": {
            "mean_size": {"type": "number", "minimum": 0},
            "outlier_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            "query_fallbacks": {"type": "integer", "minimum": 0},
            "gallery_fallbacks": {"type": "integer", "minimum": 0},
            "reconstruct_gallery": {"type": "boolean"}
          }
        }
      ]
    },
    "junk_filter": {"type": "boolean"},
    "per_query": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["query", "ap", "first_hit", "fallback"],
        "properties": {
          "query": {"type": "string"},
          "ap": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
          "first_hit": {"type": ["integer", "null"], "minimum": 1},
          "fallback": {"type": "boolean"}
        }
      }
    },
    "config": {"type": "object"}
  }
}"##;

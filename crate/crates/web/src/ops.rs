//! JSON-in, JSON-out operations behind the browser bindings.

use lorafuse::conflict::{deconflict, mean_conflict, DirectionReport};
use lorafuse::io::config::{parse_config, Config};
use lorafuse::io::report::to_report_json;
use lorafuse::matrix::DenseMatrix;
use lorafuse::pruning::{group_importance, select_groups};
use lorafuse::sim::domains::gen_domains;
use serde::{Deserialize, Serialize};

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn default_max_dirs() -> usize {
    2
}

fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConflictRequest {
    /// One 2-D update vector per client.
    pub updates: Vec<[f64; 2]>,
    #[serde(default = "default_max_dirs")]
    pub max_dirs: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConflictResponse {
    /// Shared directions as unit vectors.
    pub basis: Vec<[f64; 2]>,
    pub singular_values: Vec<f64>,
    pub directions: Vec<DirectionReport>,
    pub mean_conflict: f64,
    pub resolved: Vec<[f64; 2]>,
    /// Plain average of the inputs.
    pub merged: [f64; 2],
    /// Average of the resolved updates.
    pub merged_resolved: [f64; 2],
}

fn mean(vectors: &[[f64; 2]]) -> [f64; 2] {
    let n = vectors.len().max(1) as f64;
    let sum = vectors.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
    [sum[0] / n, sum[1] / n]
}

pub fn explore_conflict(request: &str) -> Result<String, String> {
    let req: ConflictRequest = serde_json::from_str(request).map_err(text)?;
    if req.updates.is_empty() {
        return Err("at least one update is required".into());
    }
    let updates: Vec<DenseMatrix> = req
        .updates
        .iter()
        .map(|v| DenseMatrix::new(2, 1, v.to_vec()))
        .collect::<Result<_, _>>()
        .map_err(text)?;
    let set = deconflict(&updates, req.max_dirs, req.tol).map_err(text)?;
    let basis = (0..set.subspace.dims())
        .map(|k| [set.subspace.basis.get(0, k), set.subspace.basis.get(1, k)])
        .collect();
    let resolved: Vec<[f64; 2]> = set.updates.iter().map(|u| [u.get(0, 0), u.get(1, 0)]).collect();
    let response = ConflictResponse {
        basis,
        singular_values: set.report.singular_values.clone(),
        mean_conflict: if set.report.directions.is_empty() {
            0.0
        } else {
            mean_conflict(&set.report).map_err(text)?
        },
        directions: set.report.directions,
        merged: mean(&req.updates),
        merged_resolved: mean(&resolved),
        resolved,
    };
    serde_json::to_string(&response).map_err(text)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRequest {
    pub seed: u64,
    pub ratio: f64,
    #[serde(default)]
    pub calibration_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PruneResponse {
    /// Importance of every hidden unit.
    pub scores: Vec<f64>,
    pub kept: Vec<bool>,
    pub achieved_ratio: f64,
    pub params_before: u64,
    pub params_after: u64,
}

pub fn explore_pruning(request: &str) -> Result<String, String> {
    let req: PruneRequest = serde_json::from_str(request).map_err(text)?;
    let mut cfg = Config::with_seed(req.seed);
    cfg.prune.ratio = req.ratio;
    cfg.prune.calibration_size = req.calibration_size;
    cfg.validate().map_err(text)?;
    let scenario = gen_domains(&cfg, cfg.seed).map_err(text)?;
    let importance = group_importance(&scenario.backbone, scenario.calibration.as_ref()).map_err(text)?;
    let map = select_groups(&importance, cfg.prune.ratio).map_err(text)?;
    let mut kept = vec![false; importance.scores.len()];
    for &g in &map.layers[0].rows {
        kept[g] = true;
    }
    let response = PruneResponse {
        achieved_ratio: map.ratio().map_err(text)?,
        scores: importance.scores,
        kept,
        params_before: map.params_before,
        params_after: map.params_after,
    };
    serde_json::to_string(&response).map_err(text)
}

pub fn run_pipeline(config: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(text)?;
    let report = lorafuse::run_pipeline(&cfg).map_err(text)?;
    to_report_json(&report).map_err(text)
}

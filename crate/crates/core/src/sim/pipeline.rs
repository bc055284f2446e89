//! End-to-end run: prune, train every client on its own domain, recover,
//! optionally de-conflict, fuse, and evaluate. Each stage is also exposed on
//! its own so the command line can run them one at a time.

use serde::Serialize;

use crate::backbone::{Backbone, Batch};
use crate::conflict::{analyze, analyze_in, deconflict, refactor, refactor_onto, ConflictReport};
use crate::error::{Error, Result, StageExt};
use crate::fusion::{apply_fusion, fedavg, fedavg_factors, fedsa_fuse, ffa_fuse_adapters, FusionMethod};
use crate::io::config::Config;
use crate::lora::{init_adapter, materialize, LoraAdapter};
use crate::matrix::DenseMatrix;
use crate::pruning::{apply_prune, group_importance, select_groups, LayerPrune, PruneMap};
use crate::recovery::recover;
use crate::rng::{self, streams};
use crate::sim::domains::{gen_domains, Scenario};
use crate::sim::eval::{score_model, ModelScores};
use crate::sim::train::{local_train, TrainConfig, TrainOutcome};

/// Statement of the training objective, echoed in every report.
pub const LOSS_SURROGATE: &str =
    "mean squared error on synthetic linear regression tasks, standing in for a next-token language-modelling loss";

pub fn train_config(cfg: &Config) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.train.lr,
        steps: cfg.train.steps,
        freeze_a: cfg.fusion.method == FusionMethod::Ffa,
    }
}

/// Score groups (with the calibration batch if the scenario has one) and
/// select the map for the configured ratio.
pub fn prune_stage(cfg: &Config, scenario: &Scenario) -> Result<PruneMap> {
    let importance = group_importance(&scenario.backbone, scenario.calibration.as_ref())?;
    select_groups(&importance, cfg.prune.ratio)
}

/// Initialisation seed of client `client`'s adapter for layer `layer`. Under
/// FFA every client shares the same seed so the frozen `A` is common.
pub fn adapter_seed(cfg: &Config, client: usize, layer: usize) -> u64 {
    let owner = match cfg.fusion.method {
        FusionMethod::Ffa => 0,
        _ => client as u64 + 1,
    };
    rng::mix(rng::mix(cfg.seed, streams::ADAPTER_INIT + owner), layer as u64)
}

/// Adapter rank for a pruned layer: the configured rank, capped by the
/// layer's dimensions.
pub fn layer_rank(cfg: &Config, dims: (usize, usize)) -> usize {
    cfg.lora.rank.min(dims.0).min(dims.1)
}

pub fn init_client_adapters(cfg: &Config, pruned: &Backbone, client: usize) -> Result<Vec<LoraAdapter>> {
    pruned
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let (r, c) = layer.weight.shape();
            init_adapter(
                layer.name.clone(),
                r,
                c,
                layer_rank(cfg, (r, c)),
                cfg.lora.alpha,
                adapter_seed(cfg, client, l),
            )
        })
        .collect()
}

/// Restrict a full-model batch to what the pruned model sees and produces:
/// retained input columns of the first layer, retained output rows of the
/// last.
pub fn slice_batch(batch: &Batch, map: &PruneMap) -> Result<Batch> {
    let first = map.layers.first().ok_or_else(|| Error::Map("empty prune map".into()))?;
    let last = map.layers.last().expect("nonempty");
    let samples: Vec<usize> = (0..batch.len()).collect();
    Batch::new(
        batch.inputs.select(&samples, &first.cols)?,
        batch.targets.select(&samples, &last.rows)?,
    )
}

pub fn train_client(
    cfg: &Config,
    scenario: &Scenario,
    map: &PruneMap,
    pruned: &Backbone,
    client: usize,
) -> Result<TrainOutcome> {
    let domain = scenario
        .domains
        .get(client)
        .ok_or_else(|| Error::Input(format!("client {client} has no domain")))?;
    let init = init_client_adapters(cfg, pruned, client)?;
    let batch = slice_batch(&domain.train, map)?;
    local_train(pruned, &init, &batch, &train_config(cfg))
}

/// Lift one client's pruned-space adapters to the full backbone.
pub fn recover_client(backbone: &Backbone, map: &PruneMap, adapters: &[LoraAdapter]) -> Result<Vec<LoraAdapter>> {
    adapters
        .iter()
        .map(|ad| {
            let layer = backbone
                .layer(ad.layer_name())
                .ok_or_else(|| Error::Input(format!("backbone has no layer `{}`", ad.layer_name())))?;
            let lp = map
                .layer(ad.layer_name())
                .ok_or_else(|| Error::Input(format!("prune map has no layer `{}`", ad.layer_name())))?;
            Ok(recover(ad, lp, layer.weight.shape())?.adapter)
        })
        .collect()
}

/// `c̄`, taken as zero when no shared direction survives the tolerance.
pub fn mean_conflict_or_zero(report: &ConflictReport) -> f64 {
    report.mean_conflict().unwrap_or(0.0)
}

/// De-conflicted adapters for one layer plus their before/after analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResolution {
    pub adapters: Vec<LoraAdapter>,
    pub pre: ConflictReport,
    pub post: ConflictReport,
}

/// Run conflict resolution over one layer's recovered adapters (one per
/// client) and re-factor the resolved updates so they can travel as adapter
/// files and feed factor-level fusion. Under FFA the frozen `A` is kept.
pub fn resolve_layer(cfg: &Config, method: FusionMethod, adapters: &[LoraAdapter]) -> Result<LayerResolution> {
    let updates: Vec<DenseMatrix> = adapters.iter().map(materialize).collect();
    let set = deconflict(&updates, cfg.max_dirs(), cfg.cr.tol)?;
    let resolved: Vec<LoraAdapter> = adapters
        .iter()
        .zip(&set.updates)
        .map(|(ad, upd)| match method {
            FusionMethod::Ffa => refactor_onto(upd, ad),
            _ => {
                let rank = ad.rank().max(set.subspace.dims()).min(ad.d_out().min(ad.d_in()));
                refactor(upd, rank, ad.layer_name())
            }
        })
        .collect::<Result<_>>()?;
    let resolved_updates: Vec<DenseMatrix> = resolved.iter().map(materialize).collect();
    let post = analyze_in(&set.subspace, &resolved_updates)?;
    Ok(LayerResolution {
        adapters: resolved,
        pre: set.report,
        post,
    })
}

/// Fuse one layer's adapters (one per client) into a dense update.
pub fn fuse_layer(method: FusionMethod, factor_avg: bool, adapters: &[LoraAdapter]) -> Result<DenseMatrix> {
    match method {
        FusionMethod::Fedavg if factor_avg => fedavg_factors(adapters),
        FusionMethod::Fedavg => {
            let updates: Vec<DenseMatrix> = adapters.iter().map(materialize).collect();
            fedavg(&updates)
        }
        FusionMethod::Ffa => ffa_fuse_adapters(adapters),
        FusionMethod::Fedsa => {
            let first = adapters
                .first()
                .ok_or_else(|| Error::Input("no adapters to fuse".into()))?;
            if let Some(bad) = adapters.iter().find(|a| a.scaling() != first.scaling()) {
                return Err(Error::Input(format!(
                    "adapters for `{}` use different scalings ({} vs {})",
                    first.layer_name(),
                    first.scaling(),
                    bad.scaling()
                )));
            }
            let a: Vec<DenseMatrix> = adapters.iter().map(|x| x.a().clone()).collect();
            let b: Vec<DenseMatrix> = adapters.iter().map(|x| x.b().clone()).collect();
            fedsa_fuse(&a, &b, first.scaling())
        }
    }
}

/// Group `per_client[c][l]` by layer into `per_layer[l][c]`.
pub fn by_layer(per_client: &[Vec<LoraAdapter>]) -> Vec<Vec<LoraAdapter>> {
    let layers = per_client.first().map_or(0, |c| c.len());
    (0..layers)
        .map(|l| per_client.iter().map(|c| c[l].clone()).collect())
        .collect()
}

/// Fuse every layer and merge into the backbone.
pub fn fuse_model(cfg: &Config, backbone: &Backbone, per_layer: &[Vec<LoraAdapter>]) -> Result<Backbone> {
    let fused: Vec<DenseMatrix> = per_layer
        .iter()
        .map(|ads| fuse_layer(cfg.fusion.method, cfg.fusion.factor_avg, ads))
        .collect::<Result<_>>()?;
    apply_fusion(backbone, &fused)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneSummary {
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub layers: Vec<LayerPrune>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerConflict {
    pub layer: String,
    pub pre_cr_mean_conflict: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_cr_mean_conflict: Option<f64>,
    pub pre_cr: ConflictReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_cr: Option<ConflictReport>,
}

/// Seconds spent per stage. Always zero on targets without a clock.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub generate: f64,
    pub prune: f64,
    pub train: f64,
    pub recover: f64,
    pub cr: f64,
    pub fuse: f64,
    pub eval: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub loss_surrogate: String,
    pub seed: u64,
    pub config: Config,
    pub prune: PruneSummary,
    pub clients: Vec<ClientSummary>,
    pub layers: Vec<LayerConflict>,
    pub base: ModelScores,
    pub fused: ModelScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused_cr: Option<ModelScores>,
    pub timings: Timings,
}

/// Everything a run produced, for callers that need more than the report.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RunReport,
    pub scenario: Scenario,
    pub prune_map: PruneMap,
    pub pruned: Backbone,
    pub clients: Vec<TrainOutcome>,
    /// `recovered[client][layer]`.
    pub recovered: Vec<Vec<LoraAdapter>>,
    /// `resolutions[layer]`, present when CR is enabled.
    pub resolutions: Option<Vec<LayerResolution>>,
    pub fused: Backbone,
    pub fused_cr: Option<Backbone>,
}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    last: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            last: std::time::Instant::now(),
        }
    }

    #[cfg(not(target_arch = "wasm32"))]
    fn lap(&mut self) -> f64 {
        let now = std::time::Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        dt
    }

    #[cfg(target_arch = "wasm32")]
    fn lap(&mut self) -> f64 {
        0.0
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn train_all(cfg: &Config, scenario: &Scenario, map: &PruneMap, pruned: &Backbone) -> Vec<Result<TrainOutcome>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.num_clients)
            .map(|c| s.spawn(move || train_client(cfg, scenario, map, pruned, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client training thread panicked"))
            .collect()
    })
}

#[cfg(target_arch = "wasm32")]
fn train_all(cfg: &Config, scenario: &Scenario, map: &PruneMap, pruned: &Backbone) -> Vec<Result<TrainOutcome>> {
    (0..cfg.num_clients)
        .map(|c| train_client(cfg, scenario, map, pruned, c))
        .collect()
}

pub fn run_pipeline(cfg: &Config) -> Result<RunReport> {
    run_pipeline_detailed(cfg).map(|r| r.report)
}

pub fn run_pipeline_detailed(cfg: &Config) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut clock = Clock::start();
    let mut timings = Timings::default();

    let scenario = gen_domains(cfg, cfg.seed).stage("generate")?;
    timings.generate = clock.lap();

    let prune_map = prune_stage(cfg, &scenario).stage("prune")?;
    let pruned = apply_prune(&scenario.backbone, &prune_map).stage("prune")?;
    timings.prune = clock.lap();
    log::info!(
        "pruned {} -> {} parameters",
        prune_map.params_before,
        prune_map.params_after
    );

    let clients: Vec<TrainOutcome> = train_all(cfg, &scenario, &prune_map, &pruned)
        .into_iter()
        .collect::<Result<_>>()
        .stage("train")?;
    timings.train = clock.lap();

    let recovered: Vec<Vec<LoraAdapter>> = clients
        .iter()
        .map(|c| recover_client(&scenario.backbone, &prune_map, &c.adapters))
        .collect::<Result<_>>()
        .stage("recover")?;
    let per_layer = by_layer(&recovered);
    timings.recover = clock.lap();

    let pre_reports: Vec<ConflictReport> = per_layer
        .iter()
        .map(|ads| {
            let updates: Vec<DenseMatrix> = ads.iter().map(materialize).collect();
            analyze(&updates, cfg.max_dirs(), cfg.cr.tol)
        })
        .collect::<Result<_>>()
        .stage("cr")?;
    let resolutions = if cfg.cr.enabled {
        Some(
            per_layer
                .iter()
                .map(|ads| resolve_layer(cfg, cfg.fusion.method, ads))
                .collect::<Result<Vec<_>>>()
                .stage("cr")?,
        )
    } else {
        None
    };
    timings.cr = clock.lap();

    let fused = fuse_model(cfg, &scenario.backbone, &per_layer).stage("fuse")?;
    let fused_cr = match &resolutions {
        Some(res) => {
            let cr_layers: Vec<Vec<LoraAdapter>> = res.iter().map(|r| r.adapters.clone()).collect();
            Some(fuse_model(cfg, &scenario.backbone, &cr_layers).stage("fuse")?)
        }
        None => None,
    };
    timings.fuse = clock.lap();

    let base_scores = score_model(&scenario.backbone, &scenario).stage("eval")?;
    let fused_scores = score_model(&fused, &scenario).stage("eval")?;
    let fused_cr_scores = match &fused_cr {
        Some(m) => Some(score_model(m, &scenario).stage("eval")?),
        None => None,
    };
    timings.eval = clock.lap();
    timings.total = timings.generate
        + timings.prune
        + timings.train
        + timings.recover
        + timings.cr
        + timings.fuse
        + timings.eval;

    let layers: Vec<LayerConflict> = scenario
        .backbone
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let post = resolutions.as_ref().map(|r| r[l].post.clone());
            LayerConflict {
                layer: layer.name.clone(),
                pre_cr_mean_conflict: mean_conflict_or_zero(&pre_reports[l]),
                post_cr_mean_conflict: post.as_ref().map(mean_conflict_or_zero),
                pre_cr: pre_reports[l].clone(),
                post_cr: post,
            }
        })
        .collect();

    let report = RunReport {
        loss_surrogate: LOSS_SURROGATE.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        prune: PruneSummary {
            requested_ratio: cfg.prune.ratio,
            achieved_ratio: prune_map.ratio()?,
            params_before: prune_map.params_before,
            params_after: prune_map.params_after,
            layers: prune_map.layers.clone(),
        },
        clients: clients
            .iter()
            .enumerate()
            .map(|(i, c)| ClientSummary {
                client: i,
                initial_loss: c.trace[0],
                final_loss: *c.trace.last().expect("trace has at least one entry"),
                ranks: c.adapters.iter().map(|a| a.rank()).collect(),
            })
            .collect(),
        layers,
        base: base_scores,
        fused: fused_scores,
        fused_cr: fused_cr_scores,
        timings,
    };

    Ok(PipelineRun {
        report,
        scenario,
        prune_map,
        pruned,
        clients,
        recovered,
        resolutions,
        fused,
        fused_cr,
    })
}

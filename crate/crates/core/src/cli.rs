//! `lorafuse` command line. Every stage reads the run configuration plus its
//! input files and writes its outputs under the output directory, so the
//! stages can be run one at a time or all at once with `pipeline`.
//!
//! Files in the output directory:
//!
//! | stage      | writes                                                   |
//! |------------|----------------------------------------------------------|
//! | `prune`    | `prune_map.json`                                         |
//! | `train`    | `client{i}_{layer}.lcra` (pruned space)                  |
//! | `recover`  | `client{i}_{layer}.recovered.lcra`                       |
//! | `cr`       | `client{i}_{layer}.cr.lcra`, `conflict_report.json`      |
//! | `fuse`     | `fused_{layer}.lcra`                                     |
//! | `eval`     | `eval.json`, plus a one-line summary on stdout           |
//! | `pipeline` | `report.json`                                            |
//!
//! Exit status is 0 on success, 1 for invalid arguments or configuration,
//! and 2 when a stage fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::Backbone;
use crate::conflict::ConflictReport;
use crate::error::{Error, Result, StageExt};
use crate::fusion::apply_fusion;
use crate::io::adapter_file::{read_adapter, write_adapter, AdapterFile};
use crate::io::config::{load_config, Config};
use crate::io::report::{write_json, write_report};
use crate::lora::{materialize, LoraAdapter};
use crate::matrix::DenseMatrix;
use crate::pruning::{apply_prune, LayerPrune, PruneMap};
use crate::sim::domains::{gen_domains, Scenario};
use crate::sim::eval::{score_model, ModelScores};
use crate::sim::pipeline::{
    adapter_seed, fuse_layer, mean_conflict_or_zero, prune_stage, recover_client, resolve_layer,
    run_pipeline, train_client,
};

pub const PRUNE_MAP_FILE: &str = "prune_map.json";
pub const CONFLICT_REPORT_FILE: &str = "conflict_report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_ENV: &str = "LORAFUSE_LOG";

#[derive(Debug, Parser)]
#[command(name = "lorafuse", version, about = "Prune, train, recover, de-conflict and fuse LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; defaults to the configuration's `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score groups and write the prune map.
    Prune(Common),
    /// Train client adapters on the pruned backbone.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only this client (default: every client).
        #[arg(long)]
        client: Option<usize>,
    },
    /// Zero-pad trained adapters back to the full backbone.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Adapter files (default: every `client*.lcra` in the output directory).
        files: Vec<PathBuf>,
    },
    /// De-conflict recovered adapters, one layer at a time.
    Cr {
        #[command(flatten)]
        common: Common,
        /// Recovered adapter files (default: every `*.recovered.lcra`).
        files: Vec<PathBuf>,
    },
    /// Fuse adapters into one update per layer.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Adapter files (default: `*.cr.lcra` with CR enabled, else `*.recovered.lcra`).
        files: Vec<PathBuf>,
    },
    /// Evaluate the backbone with fused updates applied.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Fused update files (default: `fused_{layer}.lcra` for every layer).
        files: Vec<PathBuf>,
    },
    /// Run every stage and write the run report.
    Pipeline(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prune(c) | Command::Pipeline(c) => c,
            Command::Train { common, .. }
            | Command::Recover { common, .. }
            | Command::Cr { common, .. }
            | Command::Fuse { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

/// Parse arguments, run one command, and return the process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn init_logging() {
    let level = match std::env::var(LOG_ENV).ok().as_deref() {
        None | Some("") | Some("error") => log::LevelFilter::Error,
        Some("info") => log::LevelFilter::Info,
        Some("debug") => log::LevelFilter::Debug,
        Some(other) => {
            eprintln!("warning: ignoring {LOG_ENV}={other} (expected error, info or debug)");
            log::LevelFilter::Error
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Loaded configuration and resolved output directory.
struct Context {
    cfg: Config,
    out: PathBuf,
}

impl Context {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg = load_config(&common.config).map_err(|e| match e {
            e @ Error::Config(_) => e,
            other => Error::Config(vec![format!("--config: {other}")]),
        })?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn scenario(&self) -> Result<Scenario> {
        gen_domains(&self.cfg, self.cfg.seed).stage("generate")
    }
}

fn run(command: &Command) -> Result<()> {
    let ctx = Context::load(command.common())?;
    log::info!("output directory {}", ctx.out.display());
    match command {
        Command::Prune(_) => cmd_prune(&ctx),
        Command::Train { client, .. } => cmd_train(&ctx, *client),
        Command::Recover { files, .. } => cmd_recover(&ctx, files),
        Command::Cr { files, .. } => cmd_cr(&ctx, files),
        Command::Fuse { files, .. } => cmd_fuse(&ctx, files),
        Command::Eval { files, .. } => cmd_eval(&ctx, files),
        Command::Pipeline(_) => cmd_pipeline(&ctx),
    }
}

fn cmd_prune(ctx: &Context) -> Result<()> {
    let scenario = ctx.scenario()?;
    let map = prune_stage(&ctx.cfg, &scenario).stage("prune")?;
    write_json(&ctx.path(PRUNE_MAP_FILE), &map).stage("prune")?;
    log::info!("kept {} of {} parameters", map.params_after, map.params_before);
    Ok(())
}

fn load_prune_map(ctx: &Context, backbone: &Backbone) -> Result<PruneMap> {
    let path = ctx.path(PRUNE_MAP_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map: PruneMap = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    map.validate(backbone)?;
    Ok(map)
}

fn client_file(client: usize, layer: &str, kind: &str) -> String {
    format!("client{client}_{layer}{kind}.lcra")
}

fn cmd_train(ctx: &Context, only: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let scenario = ctx.scenario()?;
    let map = load_prune_map(ctx, &scenario.backbone).stage("train")?;
    let pruned = apply_prune(&scenario.backbone, &map).stage("train")?;
    let clients: Vec<usize> = match only {
        Some(c) if c >= cfg.num_clients => {
            return Err(Error::Config(vec![format!(
                "--client {c}: configuration has {} clients",
                cfg.num_clients
            )]))
        }
        Some(c) => vec![c],
        None => (0..cfg.num_clients).collect(),
    };
    for client in clients {
        let outcome = train_client(cfg, &scenario, &map, &pruned, client).stage("train")?;
        log::info!(
            "client {client}: loss {:.6e} -> {:.6e}",
            outcome.trace[0],
            outcome.trace.last().copied().unwrap_or(f64::NAN)
        );
        for (l, ad) in outcome.adapters.iter().enumerate() {
            let lp = map
                .layer(ad.layer_name())
                .ok_or_else(|| Error::Input(format!("prune map has no layer `{}`", ad.layer_name())))
                .stage("train")?;
            let full = scenario.backbone.layers()[l].weight.shape();
            let path = ctx.path(&client_file(client, ad.layer_name(), ""));
            write_adapter(&path, ad, lp, full, adapter_seed(cfg, client, l)).stage("train")?;
        }
    }
    Ok(())
}

/// Client index encoded in a `client{i}_...` file name.
fn client_index(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let rest = name.strip_prefix("client")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Files in the output directory accepted by `keep`, in client order.
fn discover(ctx: &Context, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&ctx.out, e))?;
        let path = entry.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(&keep) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| client_index(a).cmp(&client_index(b)).then_with(|| a.cmp(b)));
    Ok(files)
}

fn inputs_or(ctx: &Context, given: &[PathBuf], keep: impl Fn(&str) -> bool, what: &str) -> Result<Vec<PathBuf>> {
    let files = if given.is_empty() {
        discover(ctx, keep)?
    } else {
        given.to_vec()
    };
    if files.is_empty() {
        return Err(Error::Input(format!("no {what} found in {}", ctx.out.display())));
    }
    Ok(files)
}

fn is_trained(name: &str) -> bool {
    name.starts_with("client")
        && name.ends_with(".lcra")
        && !name.ends_with(".recovered.lcra")
        && !name.ends_with(".cr.lcra")
}

fn is_recovered(name: &str) -> bool {
    name.starts_with("client") && name.ends_with(".recovered.lcra")
}

fn is_resolved(name: &str) -> bool {
    name.starts_with("client") && name.ends_with(".cr.lcra")
}

fn read_all(files: &[PathBuf]) -> Result<Vec<(PathBuf, AdapterFile)>> {
    files
        .iter()
        .map(|p| {
            read_adapter(p)
                .map(|f| (p.clone(), f))
                .map_err(|e| Error::Input(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Derived output name: strip one known suffix and append `kind`.
fn sibling(path: &Path, kind: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("adapter.lcra");
    let stem = name
        .strip_suffix(".recovered.lcra")
        .or_else(|| name.strip_suffix(".cr.lcra"))
        .or_else(|| name.strip_suffix(".lcra"))
        .unwrap_or(name);
    format!("{stem}{kind}.lcra")
}

fn cmd_recover(ctx: &Context, given: &[PathBuf]) -> Result<()> {
    let files = inputs_or(ctx, given, is_trained, "trained adapter files").stage("recover")?;
    let scenario = ctx.scenario()?;
    let map = load_prune_map(ctx, &scenario.backbone).stage("recover")?;
    for (path, file) in read_all(&files).stage("recover")? {
        let recovered = recover_client(&scenario.backbone, &map, std::slice::from_ref(&file.adapter))
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
            .stage("recover")?;
        let ad = &recovered[0];
        let full = (ad.d_out(), ad.d_in());
        let out = ctx.path(&sibling(&path, ".recovered"));
        write_adapter(&out, ad, &LayerPrune::full(ad.layer_name(), full.0, full.1), full, file.seed)
            .stage("recover")?;
    }
    Ok(())
}

/// Group `(path, file)` pairs by layer name, preserving input order, and
/// check every member of a group has the same dimensions.
fn group_by_layer(files: Vec<(PathBuf, AdapterFile)>) -> Result<BTreeMap<String, Vec<(PathBuf, AdapterFile)>>> {
    let mut groups: BTreeMap<String, Vec<(PathBuf, AdapterFile)>> = BTreeMap::new();
    for (path, file) in files {
        let layer = file.adapter.layer_name().to_string();
        let group = groups.entry(layer.clone()).or_default();
        if let Some((first_path, first)) = group.first() {
            let a = (first.adapter.d_out(), first.adapter.d_in());
            let b = (file.adapter.d_out(), file.adapter.d_in());
            if a != b || first.full_dims != file.full_dims {
                return Err(Error::Input(format!(
                    "layer `{layer}`: {} is {}x{} but {} is {}x{}",
                    first_path.display(),
                    a.0,
                    a.1,
                    path.display(),
                    b.0,
                    b.1
                )));
            }
        }
        group.push((path, file));
    }
    Ok(groups)
}

#[derive(Debug, Serialize)]
struct LayerConflictDoc {
    layer: String,
    files: Vec<String>,
    pre_cr_mean_conflict: f64,
    post_cr_mean_conflict: f64,
    pre_cr: ConflictReport,
    post_cr: ConflictReport,
}

#[derive(Debug, Serialize)]
struct ConflictDoc {
    seed: u64,
    pre_cr_mean_conflict: f64,
    post_cr_mean_conflict: f64,
    layers: Vec<LayerConflictDoc>,
}

fn cmd_cr(ctx: &Context, given: &[PathBuf]) -> Result<()> {
    let files = inputs_or(ctx, given, is_recovered, "recovered adapter files").stage("cr")?;
    let groups = group_by_layer(read_all(&files).stage("cr")?).stage("cr")?;
    let mut layers = Vec::new();
    for (layer, members) in &groups {
        let adapters: Vec<LoraAdapter> = members.iter().map(|(_, f)| f.adapter.clone()).collect();
        let res = resolve_layer(&ctx.cfg, ctx.cfg.fusion.method, &adapters).stage("cr")?;
        for ((path, file), ad) in members.iter().zip(&res.adapters) {
            let full = (ad.d_out(), ad.d_in());
            let out = ctx.path(&sibling(path, ".cr"));
            write_adapter(&out, ad, &LayerPrune::full(ad.layer_name(), full.0, full.1), full, file.seed)
                .stage("cr")?;
        }
        layers.push(LayerConflictDoc {
            layer: layer.clone(),
            files: members.iter().map(|(p, _)| p.display().to_string()).collect(),
            pre_cr_mean_conflict: mean_conflict_or_zero(&res.pre),
            post_cr_mean_conflict: mean_conflict_or_zero(&res.post),
            pre_cr: res.pre,
            post_cr: res.post,
        });
    }
    let mean = |f: fn(&LayerConflictDoc) -> f64| layers.iter().map(f).sum::<f64>() / layers.len() as f64;
    let doc = ConflictDoc {
        seed: ctx.cfg.seed,
        pre_cr_mean_conflict: mean(|l| l.pre_cr_mean_conflict),
        post_cr_mean_conflict: mean(|l| l.post_cr_mean_conflict),
        layers,
    };
    write_json(&ctx.path(CONFLICT_REPORT_FILE), &doc).stage("cr")?;
    Ok(())
}

/// Carry a dense update in the adapter container: identity on the shorter
/// side, the update itself on the other, `alpha = rank` so scaling is one.
pub fn dense_as_adapter(layer: &str, update: &DenseMatrix) -> Result<LoraAdapter> {
    let (rows, cols) = update.shape();
    if rows <= cols {
        LoraAdapter::new(layer, DenseMatrix::identity(rows), update.clone(), rows as f64)
    } else {
        LoraAdapter::new(layer, update.clone(), DenseMatrix::identity(cols), cols as f64)
    }
}

fn cmd_fuse(ctx: &Context, given: &[PathBuf]) -> Result<()> {
    let keep: fn(&str) -> bool = if ctx.cfg.cr.enabled { is_resolved } else { is_recovered };
    let files = inputs_or(ctx, given, keep, "adapter files to fuse").stage("fuse")?;
    let groups = group_by_layer(read_all(&files).stage("fuse")?).stage("fuse")?;
    for (layer, members) in &groups {
        let adapters: Vec<LoraAdapter> = members.iter().map(|(_, f)| f.adapter.clone()).collect();
        let fused = fuse_layer(ctx.cfg.fusion.method, ctx.cfg.fusion.factor_avg, &adapters).stage("fuse")?;
        let carrier = dense_as_adapter(layer, &fused).stage("fuse")?;
        let full = members[0].1.full_dims;
        let path = ctx.path(&format!("fused_{layer}.lcra"));
        write_adapter(&path, &carrier, &LayerPrune::full(layer.clone(), full.0, full.1), full, ctx.cfg.seed)
            .stage("fuse")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalDoc {
    seed: u64,
    base: ModelScores,
    fused: ModelScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_conflict: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn cmd_eval(ctx: &Context, given: &[PathBuf]) -> Result<()> {
    let scenario = ctx.scenario()?;
    let backbone = &scenario.backbone;
    let files: Vec<PathBuf> = if given.is_empty() {
        backbone
            .layers()
            .iter()
            .map(|l| ctx.path(&format!("fused_{}.lcra", l.name)))
            .collect()
    } else {
        given.to_vec()
    };
    let mut by_name: BTreeMap<String, DenseMatrix> = BTreeMap::new();
    for (path, file) in read_all(&files).stage("eval")? {
        let name = file.adapter.layer_name().to_string();
        if by_name.insert(name.clone(), materialize(&file.adapter)).is_some() {
            return Err(Error::Input(format!("{}: second fused update for layer `{name}`", path.display())))
                .stage("eval");
        }
    }
    let fused: Vec<DenseMatrix> = backbone
        .layers()
        .iter()
        .map(|l| {
            by_name
                .remove(&l.name)
                .ok_or_else(|| Error::Input(format!("no fused update for layer `{}`", l.name)))
        })
        .collect::<Result<_>>()
        .stage("eval")?;
    let model = apply_fusion(backbone, &fused).stage("eval")?;
    let base = score_model(backbone, &scenario).stage("eval")?;
    let fused_scores = score_model(&model, &scenario).stage("eval")?;

    let conflict_path = ctx.path(CONFLICT_REPORT_FILE);
    let mean_conflict = if conflict_path.exists() {
        let text = fs::read_to_string(&conflict_path).map_err(|e| Error::io(&conflict_path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", conflict_path.display())))?;
        doc.get("post_cr_mean_conflict").and_then(|v| v.as_f64())
    } else {
        None
    };
    println!(
        "base mse {:.6} (cross {}) | fused mse {:.6} (cross {}) | mean conflict {}",
        base.mean_in_domain,
        fmt_opt(base.mean_cross_domain),
        fused_scores.mean_in_domain,
        fmt_opt(fused_scores.mean_cross_domain),
        fmt_opt(mean_conflict)
    );
    let doc = EvalDoc {
        seed: ctx.cfg.seed,
        base,
        fused: fused_scores,
        mean_conflict,
    };
    write_json(&ctx.path(EVAL_FILE), &doc).stage("eval")
}

fn cmd_pipeline(ctx: &Context) -> Result<()> {
    let report = run_pipeline(&ctx.cfg)?;
    write_report(&ctx.path(REPORT_FILE), &report).stage("report")?;
    let cr = report.fused_cr.as_ref().and_then(|s| s.mean_cross_domain);
    log::info!(
        "cross-domain mse: base {} fused {} fused+cr {}",
        fmt_opt(report.base.mean_cross_domain),
        fmt_opt(report.fused.mean_cross_domain),
        fmt_opt(cr)
    );
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pgdpo::error::{PgdpoError, Result};
use pgdpo::io::{self, CsvLog, Manifest, TimingRecord};
use pgdpo::market::{generate_market, MarketParams, MarketSpec};
use pgdpo::pgdpo::evaluate::{EvalRequest, Evaluator, PolicyScores};
use pgdpo::pgdpo::train::{Mode, TrainConfig, Trainer, TrainerState, SCHEMA_VERSION};
use pgdpo::policy::{full_weights, Controls, PolicyNet, PolicyPair};

#[derive(Parser)]
#[command(name = "pgdpo", version, about = "Policy optimization for multi-asset consumption-investment problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random market and write it as JSON.
    Generate(GenerateArgs),
    /// Train policy networks, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint and write evaluation CSVs.
    Eval(EvalArgs),
    /// Dump checkpoint networks as JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    vol_min: Option<f64>,
    #[arg(long)]
    vol_max: Option<f64>,
    #[arg(long)]
    pi_min: Option<f64>,
    #[arg(long)]
    pi_max: Option<f64>,
    #[arg(long)]
    sum_min: Option<f64>,
    #[arg(long)]
    sum_max: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pgdpo,
    Oneshot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pgdpo => Mode::Pgdpo,
            ModeArg::Oneshot => Mode::Oneshot,
        }
    }
}

/// Settings shared by `train` and `eval`; each overrides the config file.
#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    market: PathBuf,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    constrained: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Evaluation nodes.
    #[arg(long)]
    nodes: Option<usize>,
    /// Paths per node for costate estimates.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    surrogate_samples: Option<usize>,
    #[arg(long)]
    surrogate_epochs: Option<usize>,
    #[arg(long)]
    surrogate_lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop after this iteration as if interrupted.
    #[arg(long, hide = true)]
    halt_at: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint directory, run directory, or `oracle` for the reference rule.
    #[arg(long)]
    checkpoint: String,
    #[arg(long)]
    out: PathBuf,
    /// Asset indices for heatmaps (0 is the risk-free asset).
    #[arg(long, value_delimiter = ',')]
    assets: Option<Vec<usize>>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &PgdpoError) -> u8 {
    match e {
        PgdpoError::InvalidConfig(_) => 2,
        PgdpoError::DegenerateMarket(_) | PgdpoError::NotPositiveDefinite { .. } => 3,
        PgdpoError::NonFiniteObjective { .. } => 4,
        PgdpoError::Mismatch(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = MarketSpec::new(a.n, a.seed);
    spec.r = a.r.unwrap_or(spec.r);
    spec.gamma = a.gamma.unwrap_or(spec.gamma);
    spec.vol_range = (a.vol_min.unwrap_or(spec.vol_range.0), a.vol_max.unwrap_or(spec.vol_range.1));
    spec.pi_range = (a.pi_min.unwrap_or(spec.pi_range.0), a.pi_max.unwrap_or(spec.pi_range.1));
    spec.sum_band = (a.sum_min.unwrap_or(spec.sum_band.0), a.sum_max.unwrap_or(spec.sum_band.1));
    spec.validate()?;
    generate_market(&spec)?.save(&a.out)
}

/// Defaults, then the config file, then `PGDPO_WORKERS`, then flags.
fn build_config(c: &CommonArgs, market: &MarketParams) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &c.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| PgdpoError::InvalidConfig(e.to_string()))?,
        None => TrainConfig::default(),
    };
    cfg.rollout.gamma = market.gamma;
    if let Ok(w) = std::env::var("PGDPO_WORKERS") {
        cfg.workers = w
            .parse()
            .map_err(|_| PgdpoError::InvalidConfig(format!("PGDPO_WORKERS is not a count: {w}")))?;
    }
    if let Some(m) = c.mode {
        cfg.mode = m.into();
    }
    cfg.constrained |= c.constrained;
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.workers, c.workers);
    set(&mut cfg.rollout.batch, c.batch);
    set(&mut cfg.rollout.steps, c.steps);
    set(&mut cfg.eval.nodes, c.nodes);
    set(&mut cfg.eval.replicates, c.replicates);
    set(&mut cfg.eval.surrogate.samples, c.surrogate_samples);
    set(&mut cfg.eval.surrogate.epochs, c.surrogate_epochs);
    if c.surrogate_lr.is_some() {
        cfg.eval.surrogate.learning_rate = c.surrogate_lr;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn init_workers(n: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
        log::debug!("worker pool already configured: {e}");
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let market = MarketParams::load(&a.common.market)?;
    let mut cfg = build_config(&a.common, &market)?;
    set(&mut cfg.iterations, a.iters);
    set(&mut cfg.warmup, a.warmup);
    if a.warmup.is_none() && cfg.warmup >= cfg.iterations {
        // Short runs keep the default one-fifth warm-up ratio.
        cfg.warmup = cfg.iterations / 5;
        log::info!("warm-up shortened to {} iterations", cfg.warmup);
    }
    set(&mut cfg.adam.learning_rate, a.lr);
    set(&mut cfg.eval.every, a.eval_every);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    cfg.validate()?;
    init_workers(cfg.workers);
    fs::create_dir_all(&a.out)?;
    let metrics_path = a.out.join("metrics.csv");
    let timing_path = a.out.join("timing.csv");

    let resumed = if a.resume { io::latest_checkpoint(&a.out)? } else { None };
    let mut trainer = match &resumed {
        Some(dir) => {
            let manifest = Manifest::load(&a.out.join("manifest.json"))?;
            if manifest.market_sha256 != io::sha256_file(&a.common.market)? {
                return Err(PgdpoError::Mismatch("market file differs from the one the run started with".into()));
            }
            let ck = io::load_checkpoint(dir)?;
            let state = ck.state.ok_or_else(|| PgdpoError::Mismatch("checkpoint has no trainer state".into()))?;
            log::info!("resuming from {} at iteration {}", dir.display(), state.iteration);
            io::truncate_metrics(&metrics_path, state.iteration)?;
            truncate_timing(&timing_path, state.iteration)?;
            let mut t = Trainer::resume(&market, cfg.clone(), ck.pair, state)?;
            t.surrogate = ck.surrogate;
            t
        }
        None => {
            for p in [&metrics_path, &timing_path] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            Trainer::new(&market, cfg.clone())?
        }
    };
    Manifest::new(&a.common.market, &cfg, market.n)?.save(&a.out.join("manifest.json"))?;

    let mut metrics = CsvLog::append(&metrics_path)?;
    let mut timing = CsvLog::append(&timing_path)?;
    let start = Instant::now();
    let every = cfg.checkpoint_every.max(1);
    let halt = a.halt_at.unwrap_or(u64::MAX);
    while !trainer.finished() && trainer.iteration() < halt {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ PgdpoError::NonFiniteObjective { iteration, seed }) => {
                let dump = serde_json::json!({ "iteration": iteration, "seed": seed, "error": e.to_string() });
                fs::write(a.out.join("nonfinite.json"), serde_json::to_string_pretty(&dump)?)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        metrics.write(&rec)?;
        timing.write(&TimingRecord::new(rec.iteration, start.elapsed().as_secs_f64()))?;
        if rec.eval_iteration == Some(rec.iteration) {
            log::info!(
                "iteration {}: objective {:.5}, rolling {:.5}, net investment MSE {:.3e}, oneshot {}",
                rec.iteration,
                rec.objective,
                rec.utility_rolling_mean,
                rec.net_investment_rel_mse.unwrap_or(f64::NAN),
                rec.os_investment_rel_mse.map_or("n/a".to_string(), |v| format!("{v:.3e}")),
            );
        }
        if rec.iteration % every == 0 || trainer.finished() {
            metrics.flush()?;
            timing.flush()?;
            io::save_checkpoint(&a.out, &trainer.pair, &trainer.state, trainer.surrogate.as_ref())?;
        }
    }
    metrics.flush()?;
    timing.flush()?;
    Ok(())
}

fn truncate_timing(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<TimingRecord> = io::read_csv(path)?;
    let kept: Vec<_> = rows.into_iter().filter(|r| r.iteration <= iteration).collect();
    io::write_csv(path, &kept)
}

#[derive(Serialize)]
struct MseRow {
    schema_version: u32,
    iteration: u64,
    policy: &'static str,
    consumption_rel_mse: f64,
    investment_rel_mse: f64,
    investment_mse_min: f64,
    investment_mse_max: f64,
}

#[derive(Serialize)]
struct FocRow {
    schema_version: u32,
    iteration: u64,
    policy: &'static str,
    /// How the investment residual is formed.
    investment_residual: &'static str,
    consumption_residual_mse: f64,
    investment_residual_mse: f64,
    consumption_residual_mse_over_lambda_sq: f64,
    investment_residual_mse_over_lambda_sq: f64,
}

#[derive(Serialize)]
struct BandRow {
    schema_version: u32,
    iteration: u64,
    policy: &'static str,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct AssetBandRow {
    schema_version: u32,
    iteration: u64,
    policy: &'static str,
    asset: usize,
    mse: f64,
}

#[derive(Serialize)]
struct AllocRow {
    schema_version: u32,
    policy: &'static str,
    asset: usize,
    weight: f64,
}

#[derive(Serialize)]
struct HeatRow {
    schema_version: u32,
    t: f64,
    #[serde(rename = "X")]
    x: f64,
    pi: f64,
}

const HEATMAP_POINTS: usize = 101;
const DEFAULT_HEATMAP_ASSETS: usize = 10;

/// The policy under evaluation: trained networks or the reference rule.
enum Evaluated {
    Nets(PolicyPair),
    Oracle(pgdpo::policy::FixedPolicy),
}

impl Evaluated {
    fn controls(&self) -> &dyn Controls {
        match self {
            Evaluated::Nets(p) => p,
            Evaluated::Oracle(f) => f,
        }
    }
}

fn resolve_checkpoint(spec: &str) -> Result<PathBuf> {
    let p = PathBuf::from(spec);
    if p.join("checkpoints").join("latest").exists() {
        return Ok(io::latest_checkpoint(&p)?.expect("pointer exists"));
    }
    Ok(p)
}

fn eval(a: EvalArgs) -> Result<()> {
    let market = MarketParams::load(&a.common.market)?;
    let oracle = a.checkpoint == "oracle";
    let ck = if oracle { None } else { Some(io::load_checkpoint(&resolve_checkpoint(&a.checkpoint)?)?) };
    let mut cfg = build_config(&a.common, &market)?;
    if let Some(ck) = &ck {
        let pair = &ck.pair;
        if pair.n_assets() != market.n {
            return Err(PgdpoError::Mismatch(format!(
                "checkpoint has {} assets, market has {}",
                pair.n_assets(),
                market.n
            )));
        }
        if a.common.constrained && !pair.simplex() {
            return Err(PgdpoError::Mismatch("checkpoint has an unconstrained investment head".into()));
        }
        cfg.constrained = pair.simplex();
    }
    cfg.validate()?;
    init_workers(cfg.workers);
    let iteration = ck.as_ref().and_then(|c| c.state.as_ref()).map_or(0, |s: &TrainerState| s.iteration);
    let evaluator = Evaluator::new(&market, cfg.effective_rollout(), cfg.constrained, cfg.eval.clone())?;
    let policy = match &ck {
        Some(c) => Evaluated::Nets(c.pair.clone()),
        None => Evaluated::Oracle(evaluator.reference.policy()),
    };
    let oneshot = cfg.mode == Mode::Oneshot;
    let req = EvalRequest {
        iteration,
        oneshot,
        surrogate: false,
    };
    let (metrics, _) = evaluator.evaluate(policy.controls(), None, req, &cfg.adam)?;

    let mut scored: Vec<(&'static str, PolicyScores)> = vec![("net", metrics.net.clone())];
    if let Some(os) = &metrics.oneshot {
        scored.push(("oneshot", os.clone()));
    }
    let mut surrogate = ck.as_ref().and_then(|c| c.surrogate.clone());
    if oneshot && cfg.constrained {
        if surrogate.is_none() {
            let warm = match &policy {
                Evaluated::Nets(p) => p.clone(),
                Evaluated::Oracle(_) => PolicyPair::new(market.n, true, cfg.rollout.horizon, cfg.seed)?,
            };
            surrogate = Some(evaluator.fit_surrogate(policy.controls(), &warm, iteration, &cfg.adam)?.pair);
        }
        let s = surrogate.as_ref().expect("surrogate present");
        scored.push(("surrogate", evaluator.policy_scores(s, iteration)?.0));
    }

    fs::create_dir_all(&a.out)?;
    let v = SCHEMA_VERSION;
    let mse: Vec<MseRow> = scored
        .iter()
        .map(|(p, s)| MseRow {
            schema_version: v,
            iteration,
            policy: p,
            consumption_rel_mse: s.consumption_rel_mse,
            investment_rel_mse: s.investment_rel_mse,
            investment_mse_min: s.investment_min(),
            investment_mse_max: s.investment_max(),
        })
        .collect();
    io::write_csv(&a.out.join("eval_mse.csv"), &mse)?;
    let definition = if cfg.constrained { "barrier_stationarity_mean_eta" } else { "risky_hamiltonian_gradient" };
    let foc: Vec<FocRow> = scored
        .iter()
        .filter_map(|(p, s)| {
            s.foc.map(|f| FocRow {
                schema_version: v,
                iteration,
                policy: p,
                investment_residual: definition,
                consumption_residual_mse: f.consumption_mse,
                investment_residual_mse: f.investment_mse,
                consumption_residual_mse_over_lambda_sq: f.consumption_mse_scaled,
                investment_residual_mse_over_lambda_sq: f.investment_mse_scaled,
            })
        })
        .collect();
    io::write_csv(&a.out.join("eval_foc.csv"), &foc)?;
    let bands: Vec<BandRow> = scored
        .iter()
        .map(|(p, s)| BandRow {
            schema_version: v,
            iteration,
            policy: p,
            min: s.investment_min(),
            max: s.investment_max(),
        })
        .collect();
    io::write_csv(&a.out.join("bands.csv"), &bands)?;
    let per_asset: Vec<AssetBandRow> = scored
        .iter()
        .flat_map(|(p, s)| {
            s.per_asset.iter().enumerate().map(move |(j, m)| AssetBandRow {
                schema_version: v,
                iteration,
                policy: p,
                asset: j,
                mse: *m,
            })
        })
        .collect();
    io::write_csv(&a.out.join("bands_per_asset.csv"), &per_asset)?;

    // Allocation snapshot at (t, X) = (0, 1).
    let simplex = cfg.constrained;
    let mut alloc = Vec::new();
    let mut push_alloc = |name: &'static str, row: &[f64]| {
        for (j, w) in full_weights(row, simplex).into_iter().enumerate() {
            alloc.push(AllocRow {
                schema_version: v,
                policy: name,
                asset: j,
                weight: w,
            });
        }
    };
    let (_, w0) = policy.controls().evaluate(&[0.0], &[1.0]);
    push_alloc("net", &w0.row(0).to_vec());
    if oneshot {
        let s = evaluator.costates(policy.controls(), &[(0.0, 1.0)], iteration)?;
        let c = evaluator.solver().controls_at(&s)?;
        push_alloc("oneshot", &c[0].weights);
    }
    if let Some(s) = &surrogate {
        let (_, w) = s.evaluate(&[0.0], &[1.0]);
        push_alloc("surrogate", &w.row(0).to_vec());
    }
    push_alloc("reference", &evaluator.reference.weights);
    io::write_csv(&a.out.join("alloc.csv"), &alloc)?;

    // Heatmaps over the full (t, X) box.
    let heat_policy: &dyn Controls = match &surrogate {
        Some(s) => s,
        None => policy.controls(),
    };
    let (lo, hi) = cfg.rollout.wealth_domain;
    let horizon = cfg.rollout.horizon;
    let step = |i: usize, a: f64, b: f64| a + (b - a) * i as f64 / (HEATMAP_POINTS - 1) as f64;
    let mut t = Vec::with_capacity(HEATMAP_POINTS * HEATMAP_POINTS);
    let mut x = Vec::with_capacity(HEATMAP_POINTS * HEATMAP_POINTS);
    for i in 0..HEATMAP_POINTS {
        for j in 0..HEATMAP_POINTS {
            t.push(step(i, 0.0, horizon));
            x.push(step(j, lo, hi));
        }
    }
    let (_, grid) = heat_policy.evaluate(&t, &x);
    let assets = a
        .assets
        .clone()
        .unwrap_or_else(|| (1..=market.n.min(DEFAULT_HEATMAP_ASSETS)).collect());
    for &asset in &assets {
        if asset > market.n {
            return Err(PgdpoError::InvalidConfig(format!("asset {asset} is out of range")));
        }
        let rows: Vec<HeatRow> = (0..t.len())
            .map(|k| HeatRow {
                schema_version: v,
                t: t[k],
                x: x[k],
                pi: full_weights(&grid.row(k).to_vec(), simplex)[asset],
            })
            .collect();
        io::write_csv(&a.out.join(format!("heatmap_{asset}.csv")), &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ExportedNet {
    header: pgdpo::policy::CheckpointHeader,
    params: Vec<f64>,
}

fn exported(net: &PolicyNet) -> ExportedNet {
    ExportedNet {
        header: net.checkpoint_header(),
        params: net.params.clone(),
    }
}

fn export(a: ExportArgs) -> Result<()> {
    let ck = io::load_checkpoint(&resolve_checkpoint(&a.checkpoint.display().to_string())?)?;
    let mut doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "investment": exported(&ck.pair.investment),
        "consumption": exported(&ck.pair.consumption),
    });
    if let Some(s) = &ck.surrogate {
        doc["surrogate_investment"] = serde_json::to_value(exported(&s.investment))?;
        doc["surrogate_consumption"] = serde_json::to_value(exported(&s.consumption))?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

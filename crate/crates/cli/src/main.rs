//! Command-line pipeline: generate or ingest market data, decode factors,
//! build constraint systems, estimate the SDE, simulate, calibrate the
//! benchmark model, backtest hedging strategies and emit plot data.
//!
//! Exit codes: 2 for configuration errors, 3 for data errors, 4 for
//! numerical failures.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use factorhedge_core::arbitrage::{
    build_constraints, eliminate_redundant, project_constraints, FactorConstraintSystem,
};
use factorhedge_core::backtest::{
    self, make_portfolios, run_backtest, BacktestConfig, BacktestModels, Category,
    PortfolioConfig,
};
use factorhedge_core::datagen::{self, GenConfig, MarketDataset};
use factorhedge_core::dynamics::{
    fit_sde, FitConfig, NeuralSde, SdeTrainingData, SimMode, TRADING_DT,
};
use factorhedge_core::factors::{decode_factors, FactorModel, FactorPath};
use factorhedge_core::hedging::{self, HedgeContext, HedgeMethod, OptionSpec};
use factorhedge_core::models::{calibrate_heston, CalibrationOptions, HestonParams};
use factorhedge_core::surface::{LiquidLattice, SurfaceInterp};
use factorhedge_core::{Error, ErrorKind, Result};
use manifest::write_manifest;

#[derive(Parser)]
#[command(name = "factorhedge", version, about = "Factor-based option hedging pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic arbitrage-free market history.
    Gen(GenArgs),
    /// Decode the factor representation from a surface history.
    Decode(DecodeArgs),
    /// Build, project and prune the static-arbitrage constraint system.
    Constraints(ConstraintsArgs),
    /// Estimate the factor SDE from a decoded history.
    FitSde(FitSdeArgs),
    /// Simulate the estimated SDE inside the no-arbitrage region.
    Simulate(SimulateArgs),
    /// Calibrate the benchmark stochastic-volatility model day by day.
    CalibrateHeston(CalibrateArgs),
    /// Run rolling one-period hedging backtests.
    Backtest(BacktestArgs),
    /// Consolidate run artifacts into plot-ready JSON.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Constraints(a) => cmd_constraints(a),
        Command::FitSde(a) => cmd_fit_sde(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CalibrateHeston(a) => cmd_calibrate(a),
        Command::Backtest(a) => cmd_backtest(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Config => ExitCode::from(2),
                ErrorKind::Data => ExitCode::from(3),
                ErrorKind::Numerical => ExitCode::from(4),
            }
        }
    }
}

// --- shared helpers ----------------------------------------------------------

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("file not found: {}", path.display())));
    }
    Ok(())
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn load_config_file<C: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn load_dataset(path: &Path) -> Result<MarketDataset> {
    require_file(path)?;
    datagen::ingest_csv(fs::File::open(path)?)
}

fn load_factor_model(path: &Path) -> Result<FactorModel> {
    require_file(path)?;
    FactorModel::from_json(&fs::read_to_string(path)?)
}

fn load_factor_path(path: &Path) -> Result<FactorPath> {
    require_file(path)?;
    FactorPath::from_csv(fs::File::open(path)?)
}

fn load_factor_constraints(path: &Path) -> Result<FactorConstraintSystem> {
    require_file(path)?;
    let (fcs, _) = FactorConstraintSystem::from_json(&fs::read_to_string(path)?)?;
    Ok(fcs)
}

fn load_sde(path: &Path, constraints: FactorConstraintSystem) -> Result<NeuralSde> {
    require_file(path)?;
    NeuralSde::from_json(&fs::read_to_string(path)?, constraints)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{t}'")))
        })
        .collect()
}

// --- gen ----------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct LatticeCfg {
    tenor_days: Vec<f64>,
    ms: Vec<f64>,
}

impl Default for LatticeCfg {
    fn default() -> Self {
        Self {
            tenor_days: vec![
                30.0, 60.0, 91.0, 122.0, 152.0, 182.0, 273.0, 365.0, 547.0, 730.0,
            ],
            ms: (0..11).map(|i| -0.25 + 0.05 * i as f64).collect(),
        }
    }
}

impl LatticeCfg {
    fn build(&self) -> Result<LiquidLattice> {
        let taus: Vec<f64> = self.tenor_days.iter().map(|d| d / 365.0).collect();
        LiquidLattice::regular(&taus, &self.ms)
    }
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct GenCfg {
    days: usize,
    seed: u64,
    substeps: usize,
    nodes: usize,
    start_date: NaiveDate,
    heston: HestonParams,
    lattice: LatticeCfg,
}

impl Default for GenCfg {
    fn default() -> Self {
        Self {
            days: 2016,
            seed: 1,
            substeps: 8,
            nodes: 512,
            start_date: NaiveDate::from_ymd_opt(2012, 1, 2).unwrap(),
            heston: datagen::default_heston(),
            lattice: LatticeCfg::default(),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    start_date: Option<NaiveDate>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg: GenCfg = load_config_file(&a.config)?;
    if let Some(v) = a.days {
        cfg.days = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.substeps {
        cfg.substeps = v;
    }
    if let Some(v) = a.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = a.start_date {
        cfg.start_date = v;
    }
    ensure_out_dir(&a.out)?;
    let lattice = cfg.lattice.build()?;
    let gen = GenConfig {
        days: cfg.days,
        seed: cfg.seed,
        substeps: cfg.substeps,
        start_date: cfg.start_date,
        n_nodes: cfg.nodes,
    };
    let dataset = datagen::gen_heston_market(&cfg.heston, &lattice, &gen)?;
    datagen::export_csv(&dataset, fs::File::create(a.out.join("surfaces.csv"))?)?;
    datagen::export_truth_csv(&dataset, fs::File::create(a.out.join("truth.csv"))?)?;
    write_manifest(
        &a.out,
        "gen",
        &cfg,
        Some(cfg.seed),
        &[],
        &["surfaces.csv", "truth.csv"],
    )?;
    println!(
        "gen: {} days on a {}-point lattice -> {}",
        dataset.len(),
        lattice.len(),
        a.out.display()
    );
    Ok(())
}

// --- decode -------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct DecodeCfg {
    d: usize,
}

impl Default for DecodeCfg {
    fn default() -> Self {
        Self { d: 2 }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Surface history CSV.
    #[arg(long)]
    data: PathBuf,
    /// Factor count.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let mut cfg: DecodeCfg = load_config_file(&a.config)?;
    if let Some(v) = a.d {
        cfg.d = v;
    }
    ensure_out_dir(&a.out)?;
    let dataset = load_dataset(&a.data)?;
    let (model, path) = decode_factors(&dataset.lattice, &dataset.snapshots, cfg.d)?;
    fs::write(a.out.join("factor_model.json"), model.to_json()?)?;
    path.to_csv(fs::File::create(a.out.join("factor_path.csv"))?)?;
    write_manifest(
        &a.out,
        "decode",
        &cfg,
        None,
        &[&a.data],
        &["factor_model.json", "factor_path.csv"],
    )?;
    let max_res = path.residuals.iter().cloned().fold(0.0f64, f64::max);
    let mean_res = path.residuals.iter().sum::<f64>() / path.residuals.len() as f64;
    println!(
        "decode: d={} explained variance {:.4}%  reconstruction residual max {:.3e} mean {:.3e}",
        cfg.d,
        model.explained_variance() * 100.0,
        max_res,
        mean_res
    );
    Ok(())
}

// --- constraints ----------------------------------------------------------

#[derive(Serialize, Deserialize, Clone, Default)]
#[serde(default)]
struct ConstraintsCfg {}

#[derive(Args)]
struct ConstraintsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_constraints(a: ConstraintsArgs) -> Result<()> {
    ensure_out_dir(&a.out)?;
    let dataset = load_dataset(&a.data)?;
    let model = load_factor_model(&a.factors)?;
    if model.lattice().hash() != dataset.lattice.hash() {
        return Err(Error::Validation(
            "factor model lattice does not match the dataset".into(),
        ));
    }
    let cs = build_constraints(&dataset.lattice);
    let fcs = project_constraints(&cs, model.g0(), model.g())?;
    let reduced = eliminate_redundant(&fcs)?;
    fs::write(a.out.join("constraints_price.json"), cs.to_json()?)?;
    fs::write(
        a.out.join("constraints_factor.json"),
        reduced.to_json(&dataset.lattice.hash())?,
    )?;
    // Feasibility flags of the decoded training factors.
    let mut violating_dates = 0usize;
    for snap in &dataset.snapshots {
        let xi = model.project(&snap.prices)?;
        if !reduced.check(&xi)?.is_empty() {
            violating_dates += 1;
        }
    }
    write_manifest(
        &a.out,
        "constraints",
        &ConstraintsCfg::default(),
        None,
        &[&a.data, &a.factors],
        &["constraints_price.json", "constraints_factor.json"],
    )?;
    println!(
        "constraints: {} price rows -> {} factor rows after elimination; {} of {} dates flag violations",
        cs.n_rows(),
        reduced.n_rows(),
        violating_dates,
        dataset.len()
    );
    Ok(())
}

// --- fit-sde ----------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct FitSdeCfg {
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    penalty_weight: f64,
    val_fraction: f64,
    patience: usize,
    hidden: usize,
    seed: u64,
}

impl Default for FitSdeCfg {
    fn default() -> Self {
        let f = FitConfig::default();
        Self {
            epochs: f.epochs,
            learning_rate: f.learning_rate,
            momentum: f.momentum,
            penalty_weight: f.penalty_weight,
            val_fraction: f.val_fraction,
            patience: f.patience,
            hidden: f.hidden,
            seed: f.seed,
        }
    }
}

#[derive(Args)]
struct FitSdeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    constraints: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn training_data(dataset: &MarketDataset, path: &FactorPath) -> Result<SdeTrainingData> {
    if path.dates.len() != dataset.len()
        || path
            .dates
            .iter()
            .zip(&dataset.snapshots)
            .any(|(d, s)| *d != s.date)
    {
        return Err(Error::Validation(
            "factor path dates do not match the dataset".into(),
        ));
    }
    let ln_spot: Vec<f64> = dataset.snapshots.iter().map(|s| s.spot.ln()).collect();
    SdeTrainingData::from_components(&ln_spot, &path.xi, TRADING_DT)
}

fn cmd_fit_sde(a: FitSdeArgs) -> Result<()> {
    let mut cfg: FitSdeCfg = load_config_file(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.penalty_weight {
        cfg.penalty_weight = v;
    }
    ensure_out_dir(&a.out)?;
    let dataset = load_dataset(&a.data)?;
    let path = load_factor_path(&a.path)?;
    let fcs = load_factor_constraints(&a.constraints)?;
    let data = training_data(&dataset, &path)?;
    let fit_cfg = FitConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        penalty_weight: cfg.penalty_weight,
        val_fraction: cfg.val_fraction,
        patience: cfg.patience,
        hidden: cfg.hidden,
        seed: cfg.seed,
        ..Default::default()
    };
    let (sde, history) = fit_sde(&data, fcs, &fit_cfg)?;
    fs::write(a.out.join("sde_model.json"), sde.to_json()?)?;
    let mut wtr = csv::Writer::from_writer(fs::File::create(a.out.join("loss_history.csv"))?);
    wtr.write_record(["epoch", "train", "val"])?;
    for (i, t) in history.train.iter().enumerate() {
        let v = history.val.get(i).map_or(String::new(), |v| format!("{v:.12e}"));
        wtr.write_record(&[i.to_string(), format!("{t:.12e}"), v])?;
    }
    wtr.flush()?;
    write_manifest(
        &a.out,
        "fit-sde",
        &cfg,
        Some(cfg.seed),
        &[&a.data, &a.path, &a.constraints],
        &["sde_model.json", "loss_history.csv"],
    )?;
    println!(
        "fit-sde: {} epochs, best epoch {}, final train loss {:.6}, final val loss {:.6}",
        history.train.len(),
        history.best_epoch,
        history.train.last().unwrap_or(&f64::NAN),
        history.val.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

// --- simulate ----------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct SimulateCfg {
    steps: usize,
    n_paths: usize,
    mode: String,
    seed: u64,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        Self {
            steps: 252,
            n_paths: 1,
            mode: "gaussian".into(),
            seed: 7,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sde: PathBuf,
    #[arg(long)]
    constraints: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_paths: Option<usize>,
    /// gaussian | bootstrap
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateCfg = load_config_file(&a.config)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.n_paths {
        cfg.n_paths = v;
    }
    if let Some(v) = a.mode.clone() {
        cfg.mode = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    ensure_out_dir(&a.out)?;
    let fcs = load_factor_constraints(&a.constraints)?;
    let sde = load_sde(&a.sde, fcs)?;
    let dataset = load_dataset(&a.data)?;
    let path = load_factor_path(&a.path)?;
    let data = training_data(&dataset, &path)?;

    let t_last = data.states.nrows() - 1;
    let mut state0: DVector<f64> = data.states.row(t_last).transpose();
    // Decoded factors may sit a hair outside the projected polytope (the
    // rank-d reconstruction is not exactly arbitrage-free); pull such a
    // start point toward the region's interior before simulating.
    let fcs = sde.constraints();
    if fcs.n_rows() > 0 {
        let xi0: DVector<f64> = state0.rows(1, sde.d()).into_owned();
        if !fcs.check(&xi0)?.is_empty() {
            let center = fcs.interior_point()?;
            let dir = &xi0 - &center;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if fcs.check(&(&center + &dir * mid))?.is_empty() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let adjusted = &center + &dir * lo;
            println!(
                "simulate: start factors adjusted into the no-arbitrage region (blend {:.4})",
                lo
            );
            for j in 0..sde.d() {
                state0[j + 1] = adjusted[j];
            }
        }
    }
    let residuals = sde.residuals(&data)?;
    let mode = match cfg.mode.as_str() {
        "gaussian" => SimMode::Gaussian,
        "bootstrap" => SimMode::Bootstrap(&residuals),
        other => return Err(Error::Config(format!("unknown simulation mode '{other}'"))),
    };
    let paths = sde.simulate_paths(&state0, cfg.steps, &mode, cfg.seed, cfg.n_paths)?;

    let mut wtr = csv::Writer::from_writer(fs::File::create(a.out.join("sim_paths.csv"))?);
    let mut header = vec!["path".to_string(), "step".to_string(), "ln_s".to_string()];
    header.extend((1..=sde.d()).map(|j| format!("xi{j}")));
    wtr.write_record(&header)?;
    for (k, p) in paths.iter().enumerate() {
        for step in 0..p.nrows() {
            let mut rec = vec![k.to_string(), step.to_string()];
            for j in 0..p.ncols() {
                rec.push(format!("{:.17e}", p[(step, j)]));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    write_manifest(
        &a.out,
        "simulate",
        &cfg,
        Some(cfg.seed),
        &[&a.sde, &a.constraints, &a.data, &a.path],
        &["sim_paths.csv"],
    )?;
    println!(
        "simulate: {} paths x {} steps ({}) -> {}",
        cfg.n_paths,
        cfg.steps,
        cfg.mode,
        a.out.display()
    );
    Ok(())
}

// --- calibrate-heston ---------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct CalibrateCfg {
    max_evals: usize,
    nodes: usize,
}

impl Default for CalibrateCfg {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            nodes: 192,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut cfg: CalibrateCfg = load_config_file(&a.config)?;
    if let Some(v) = a.max_evals {
        cfg.max_evals = v;
    }
    ensure_out_dir(&a.out)?;
    let dataset = load_dataset(&a.data)?;
    let mut rows = Vec::with_capacity(dataset.len());
    let mut prev: Option<HestonParams> = None;
    let mut worst: f64 = 0.0;
    for snap in &dataset.snapshots {
        let opts = CalibrationOptions {
            max_evals_per_start: if prev.is_some() { 600 } else { cfg.max_evals },
            n_nodes: cfg.nodes,
            starts: prev.map(|p| vec![p]),
        };
        let res = calibrate_heston(&dataset.lattice, snap, &opts)?;
        prev = Some(res.params);
        worst = worst.max(res.mape_pct);
        rows.push((snap.date, res.params, res.mape_pct));
    }
    factorhedge_core::models::write_calibration_csv(
        &rows,
        fs::File::create(a.out.join("calibration.csv"))?,
    )?;
    write_manifest(
        &a.out,
        "calibrate-heston",
        &cfg,
        None,
        &[&a.data],
        &["calibration.csv"],
    )?;
    let mean = rows.iter().map(|(_, _, m)| m).sum::<f64>() / rows.len() as f64;
    println!(
        "calibrate-heston: {} dates, MAPE mean {:.4}% max {:.4}%",
        rows.len(),
        mean,
        worst
    );
    Ok(())
}

// --- backtest ------------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone)]
#[serde(default)]
struct BacktestCfg {
    methods: Vec<String>,
    dt: Vec<usize>,
    portfolios: Vec<String>,
    deltas: Vec<f64>,
    tenor_days: Vec<f64>,
    instrument_tenor_days: f64,
    instrument_delta: f64,
    ewma_lambda: f64,
    warmup_days: usize,
    tradable_margin_m: f64,
    emit_plans: bool,
}

impl Default for BacktestCfg {
    fn default() -> Self {
        let p = PortfolioConfig::default();
        Self {
            methods: vec!["none".into(), "delta_bs".into(), "delta_nsde_mv".into()],
            dt: vec![1, 5],
            portfolios: vec!["naive".into()],
            deltas: p.deltas,
            tenor_days: p.tenor_days,
            instrument_tenor_days: 182.0,
            instrument_delta: 0.5,
            ewma_lambda: 0.99,
            warmup_days: 252,
            tradable_margin_m: 0.10,
            emit_plans: false,
        }
    }
}

fn parse_categories(names: &[String]) -> Result<Vec<Category>> {
    names
        .iter()
        .flat_map(|n| {
            if n == "all" {
                Category::all().into_iter().map(Ok).collect::<Vec<_>>()
            } else {
                vec![match n.as_str() {
                    "naive" => Ok(Category::Naive),
                    "outright" => Ok(Category::Outright),
                    "delta-spread" => Ok(Category::DeltaSpread),
                    "delta-butterfly" => Ok(Category::DeltaButterfly),
                    "strangle" => Ok(Category::Strangle),
                    "calendar-spread" => Ok(Category::CalendarSpread),
                    "vix" => Ok(Category::Vix),
                    other => Err(Error::Config(format!("unknown portfolio category '{other}'"))),
                }]
            }
        })
        .collect()
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test-window surface history CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    sde: PathBuf,
    #[arg(long)]
    constraints: PathBuf,
    /// Comma-separated method list.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated horizons in trading days.
    #[arg(long)]
    dt: Option<String>,
    /// Comma-separated category list, or `all`.
    #[arg(long)]
    portfolios: Option<String>,
    #[arg(long)]
    instrument_tenor_days: Option<f64>,
    #[arg(long)]
    emit_plans: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_backtest(a: BacktestArgs) -> Result<()> {
    let mut cfg: BacktestCfg = load_config_file(&a.config)?;
    if let Some(v) = &a.methods {
        cfg.methods = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = &a.dt {
        cfg.dt = parse_list(v, "dt")?;
    }
    if let Some(v) = &a.portfolios {
        cfg.portfolios = v.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(v) = a.instrument_tenor_days {
        cfg.instrument_tenor_days = v;
    }
    if a.emit_plans {
        cfg.emit_plans = true;
    }
    ensure_out_dir(&a.out)?;

    let dataset = load_dataset(&a.data)?;
    let factor_model = load_factor_model(&a.factors)?;
    let fcs = load_factor_constraints(&a.constraints)?;
    let sde = load_sde(&a.sde, fcs)?;
    let methods: Vec<HedgeMethod> = cfg
        .methods
        .iter()
        .map(|m| HedgeMethod::parse(m))
        .collect::<Result<_>>()?;
    let categories = parse_categories(&cfg.portfolios)?;
    let pconf = PortfolioConfig {
        deltas: cfg.deltas.clone(),
        tenor_days: cfg.tenor_days.clone(),
        categories,
        tradable_margin_m: cfg.tradable_margin_m,
        ..Default::default()
    };
    let portfolios = make_portfolios(&pconf, &dataset.lattice)?;
    let bconf = BacktestConfig {
        methods,
        dt_days: cfg.dt.clone(),
        instrument_tenor_days: cfg.instrument_tenor_days,
        instrument_delta: cfg.instrument_delta,
        ewma_lambda: cfg.ewma_lambda,
        warmup_days: cfg.warmup_days,
        tradable_margin_m: cfg.tradable_margin_m,
        record_plans: cfg.emit_plans,
        ..Default::default()
    };
    let models = BacktestModels { factor_model, sde };
    let reports = run_backtest(&dataset, &models, &portfolios, &bconf)?;

    backtest::write_summary_csv(&reports, fs::File::create(a.out.join("summary.csv"))?)?;
    backtest::write_ewma_csv(
        &reports,
        cfg.warmup_days,
        fs::File::create(a.out.join("ewma.csv"))?,
    )?;
    fs::write(
        a.out.join("plot_data.json"),
        serde_json::to_string_pretty(&backtest::plot_data_json(&reports))?,
    )?;
    let mut outputs = vec!["summary.csv", "ewma.csv", "plot_data.json"];
    if cfg.emit_plans {
        backtest::write_plans_jsonl(&reports, fs::File::create(a.out.join("plans.jsonl"))?)?;
        outputs.push("plans.jsonl");
    }
    write_manifest(
        &a.out,
        "backtest",
        &cfg,
        None,
        &[&a.data, &a.factors, &a.sde, &a.constraints],
        &outputs,
    )?;
    for r in &reports {
        println!(
            "backtest: {:<28} {:<16} dt={} overall {:>8.3}% ({} windows, {} skipped)",
            r.portfolio,
            r.method.name(),
            r.dt_days,
            r.overall_pct,
            r.pnl_hedged.len(),
            r.skipped_dates.len()
        );
    }
    Ok(())
}

// --- report ---------------------------------------------------------------------

#[derive(Serialize, Deserialize, Clone, Default)]
#[serde(default)]
struct ReportCfg {
    date: Option<NaiveDate>,
}

#[derive(Args)]
struct ReportArgs {
    /// Backtest output directory (reads plot_data.json).
    #[arg(long)]
    backtest: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    constraints: PathBuf,
    #[arg(long)]
    sde: Option<PathBuf>,
    /// Date for the delta-comparison panel; defaults to the last date.
    #[arg(long)]
    date: Option<NaiveDate>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    ensure_out_dir(&a.out)?;
    let plot_path = a.backtest.join("plot_data.json");
    require_file(&plot_path)?;
    let error_series: serde_json::Value = serde_json::from_str(&fs::read_to_string(&plot_path)?)?;

    let dataset = load_dataset(&a.data)?;
    let model = load_factor_model(&a.factors)?;
    let path = load_factor_path(&a.path)?;
    let fcs = load_factor_constraints(&a.constraints)?;
    let sde = match &a.sde {
        Some(p) => Some(load_sde(p, fcs.clone())?),
        None => None,
    };

    // Factor trajectory with the projected constraint lines.
    let factor_scatter = serde_json::json!({
        "dates": path.dates.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
        "xi": (0..path.len())
            .map(|t| path.xi_at(t).iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
        "constraints": (0..fcs.n_rows())
            .map(|i| serde_json::json!({
                "coeffs": fcs.m.row(i).iter().copied().collect::<Vec<f64>>(),
                "rhs": fcs.b[i],
            }))
            .collect::<Vec<_>>(),
    });

    // Per-method deltas across the tradable lattice on one date.
    let date = a.date.or_else(|| dataset.snapshots.last().map(|s| s.date));
    let snap = dataset
        .snapshots
        .iter()
        .find(|s| Some(s.date) == date)
        .ok_or_else(|| Error::Config(format!("date {date:?} not in the dataset")))?;
    let interp = SurfaceInterp::new(&dataset.lattice, &snap.prices)?;
    let xi = model.project(&snap.prices)?;
    let ctx = HedgeContext {
        surface: &interp,
        model: &model,
        spot: snap.spot,
    };
    let mut points = Vec::new();
    for (tau, m, _) in backtest::tradable_points(&dataset.lattice, 0.05) {
        let spec = OptionSpec::vanilla_call(tau, m)?;
        let (bs_delta, _) = hedging::bs_option_greeks(&spec, &ctx)?;
        let mm = hedging::mm_delta(&spec, &ctx)?;
        let mm_mv = match &sde {
            Some(s) => Some(hedging::mm_mv_delta(&spec, &ctx, s, &xi)?),
            None => None,
        };
        points.push(serde_json::json!({
            "tau": tau,
            "m": m,
            "delta_bs": bs_delta,
            "delta_mm_sens": mm,
            "delta_mm_mv": mm_mv,
        }));
    }
    let report = serde_json::json!({
        "schema_version": 1,
        "factor_scatter": factor_scatter,
        "error_series": error_series,
        "delta_comparison": {
            "date": snap.date.to_string(),
            "points": points,
        },
    });
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut inputs: Vec<&Path> = vec![&plot_path, &a.data, &a.factors, &a.path, &a.constraints];
    if let Some(p) = &a.sde {
        inputs.push(p);
    }
    write_manifest(
        &a.out,
        "report",
        &ReportCfg { date },
        None,
        &inputs,
        &["report.json"],
    )?;
    println!("report: wrote {}", a.out.join("report.json").display());
    Ok(())
}

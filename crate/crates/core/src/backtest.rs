//! Rolling one-period hedging backtests.
//!
//! On each test date a fresh hedge is opened for every (portfolio, method)
//! pair, held for the rebalancing horizon, and closed by revaluing all legs
//! on the later surface with strikes fixed (tenors are constant-maturity on
//! a synthetic lattice, so time decay enters through revaluation at the same
//! tau). Relative hedging errors compare the root-mean-square PnL variation
//! of the hedged portfolio against the unhedged one, both overall and as an
//! exponentially weighted moving average.

use chrono::NaiveDate;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::datagen::MarketDataset;
use crate::dynamics::NeuralSde;
use crate::error::{Error, Result};
use crate::factors::FactorModel;
use crate::hedging::{
    self, HedgeContext, HedgeMethod, HedgePlan, OptionKind, OptionSpec,
};
use crate::models::{calibrate_heston, CalibrationOptions, HestonParams};
use crate::surface::{LiquidLattice, SurfaceInterp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Naive,
    Outright,
    DeltaSpread,
    DeltaButterfly,
    Strangle,
    CalendarSpread,
    Vix,
}

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::Naive => "naive",
            Category::Outright => "outright",
            Category::DeltaSpread => "delta-spread",
            Category::DeltaButterfly => "delta-butterfly",
            Category::Strangle => "strangle",
            Category::CalendarSpread => "calendar-spread",
            Category::Vix => "vix",
        }
    }

    pub fn all() -> Vec<Category> {
        vec![
            Category::Naive,
            Category::Outright,
            Category::DeltaSpread,
            Category::DeltaButterfly,
            Category::Strangle,
            Category::CalendarSpread,
            Category::Vix,
        ]
    }
}

/// A leg is either a concrete lattice option or a delta-quoted spec that is
/// resolved to the nearest traded option at run time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LegSpec {
    Fixed(OptionSpec),
    DeltaQuoted { tenor_days: f64, delta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Portfolio {
    pub name: String,
    pub category: Category,
    pub legs: Vec<(LegSpec, f64)>,
}

#[derive(Debug, Clone)]
pub struct PortfolioConfig {
    /// Delta set for the quoted constructions.
    pub deltas: Vec<f64>,
    /// Tenor set in calendar days.
    pub tenor_days: Vec<f64>,
    pub categories: Vec<Category>,
    /// Target tenor of the variance-swap-style portfolio, in calendar days.
    pub vix_tenor_days: f64,
    /// Tradable band: lattice points at least this far (in log-moneyness)
    /// from the lattice edge, so held strikes survive spot moves.
    pub tradable_margin_m: f64,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            tenor_days: vec![
                30.0, 60.0, 91.0, 122.0, 152.0, 182.0, 273.0, 365.0, 547.0, 730.0,
            ],
            categories: Category::all(),
            vix_tenor_days: 30.0,
            tradable_margin_m: 0.10,
        }
    }
}

fn contains(set: &[f64], x: f64) -> bool {
    set.iter().any(|v| (v - x).abs() < 1e-9)
}

/// Lattice points inside the tradable moneyness band.
pub fn tradable_points(lattice: &LiquidLattice, margin: f64) -> Vec<(f64, f64, usize)> {
    let r = lattice.range();
    lattice
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.m >= r.m_min + margin - 1e-12 && p.m <= r.m_max - margin + 1e-12)
        .map(|(i, p)| (p.tau, p.m, i))
        .collect()
}

/// Build the test portfolios for the configured delta and tenor sets.
pub fn make_portfolios(cfg: &PortfolioConfig, lattice: &LiquidLattice) -> Result<Vec<Portfolio>> {
    if cfg.categories.is_empty() {
        return Err(Error::Config("no portfolio categories requested".into()));
    }
    if cfg.deltas.is_empty() || cfg.tenor_days.is_empty() {
        return Err(Error::Config("delta and tenor sets must be nonempty".into()));
    }
    let mut out = Vec::new();
    let has = |c: Category| cfg.categories.contains(&c);
    let quoted = |tenor_days: f64, delta: f64| LegSpec::DeltaQuoted { tenor_days, delta };

    if has(Category::Naive) {
        let legs: Vec<(LegSpec, f64)> = tradable_points(lattice, cfg.tradable_margin_m)
            .into_iter()
            .map(|(tau, m, _)| {
                Ok((
                    LegSpec::Fixed(OptionSpec::vanilla_call(tau, m)?),
                    1.0,
                ))
            })
            .collect::<Result<_>>()?;
        if legs.is_empty() {
            return Err(Error::Config("tradable band is empty".into()));
        }
        out.push(Portfolio {
            name: "naive".into(),
            category: Category::Naive,
            legs,
        });
    }
    if has(Category::Outright) {
        for &t in &cfg.tenor_days {
            for &d in &cfg.deltas {
                out.push(Portfolio {
                    name: format!("outright_d{d:.2}_t{t:.0}"),
                    category: Category::Outright,
                    legs: vec![(quoted(t, d), 1.0)],
                });
            }
        }
    }
    if has(Category::DeltaSpread) {
        for &t in &cfg.tenor_days {
            for (i, &d1) in cfg.deltas.iter().enumerate() {
                for &d2 in &cfg.deltas[i + 1..] {
                    let (hi, lo) = if d1 > d2 { (d1, d2) } else { (d2, d1) };
                    out.push(Portfolio {
                        name: format!("spread_d{hi:.2}-{lo:.2}_t{t:.0}"),
                        category: Category::DeltaSpread,
                        legs: vec![(quoted(t, hi), 1.0), (quoted(t, lo), -1.0)],
                    });
                }
            }
        }
    }
    if has(Category::DeltaButterfly) && contains(&cfg.deltas, 0.5) {
        for &t in &cfg.tenor_days {
            for &d in &cfg.deltas {
                if d < 0.5 - 1e-9 && contains(&cfg.deltas, 1.0 - d) {
                    out.push(Portfolio {
                        name: format!("butterfly_d{d:.2}_t{t:.0}"),
                        category: Category::DeltaButterfly,
                        legs: vec![
                            (quoted(t, d), 1.0),
                            (quoted(t, 1.0 - d), 1.0),
                            (quoted(t, 0.5), -2.0),
                        ],
                    });
                }
            }
        }
    }
    if has(Category::Strangle) {
        for &t in &cfg.tenor_days {
            for &d in &cfg.deltas {
                if d < 0.5 - 1e-9 && contains(&cfg.deltas, 1.0 - d) {
                    out.push(Portfolio {
                        name: format!("strangle_d{d:.2}_t{t:.0}"),
                        category: Category::Strangle,
                        legs: vec![(quoted(t, d), 1.0), (quoted(t, 1.0 - d), 1.0)],
                    });
                }
            }
        }
    }
    if has(Category::CalendarSpread) && contains(&cfg.deltas, 0.5) {
        for (i, &t1) in cfg.tenor_days.iter().enumerate() {
            for &t2 in &cfg.tenor_days[i + 1..] {
                let (long, short) = if t1 > t2 { (t1, t2) } else { (t2, t1) };
                out.push(Portfolio {
                    name: format!("calendar_t{long:.0}-{short:.0}"),
                    category: Category::CalendarSpread,
                    legs: vec![(quoted(long, 0.5), 1.0), (quoted(short, 0.5), -1.0)],
                });
            }
        }
    }
    if has(Category::Vix) {
        out.push(vix_portfolio(cfg, lattice)?);
    }
    Ok(out)
}

/// Strike-weighted out-of-the-money combination whose square approximates
/// the target-tenor variance: weights dK_i / K_i^2 over the tradable
/// strikes of the nearest tenor slice, with put legs parity-converted to
/// calls (underlying and cash components dropped).
fn vix_portfolio(cfg: &PortfolioConfig, lattice: &LiquidLattice) -> Result<Portfolio> {
    let target_tau = cfg.vix_tenor_days / 365.0;
    let taus = lattice.taus();
    let tau = taus
        .iter()
        .copied()
        .min_by(|a, b| (a - target_tau).abs().partial_cmp(&(b - target_tau).abs()).unwrap())
        .unwrap();
    let mut ms: Vec<f64> = tradable_points(lattice, cfg.tradable_margin_m)
        .into_iter()
        .filter(|(t, _, _)| (t - tau).abs() < 1e-12)
        .map(|(_, m, _)| m)
        .collect();
    ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if ms.len() < 3 {
        return Err(Error::Config("too few strikes for the vix portfolio".into()));
    }
    let ks: Vec<f64> = ms.iter().map(|m| m.exp()).collect();
    let mut legs = Vec::with_capacity(ms.len());
    for i in 0..ks.len() {
        let dk = if i == 0 {
            ks[1] - ks[0]
        } else if i == ks.len() - 1 {
            ks[i] - ks[i - 1]
        } else {
            0.5 * (ks[i + 1] - ks[i - 1])
        };
        let w = dk / (ks[i] * ks[i]);
        legs.push((
            LegSpec::Fixed(OptionSpec::vanilla_call(tau, ms[i])?),
            w,
        ));
    }
    Ok(Portfolio {
        name: "vix".into(),
        category: Category::Vix,
        legs,
    })
}

/// Count portfolios per category.
pub fn category_counts(portfolios: &[Portfolio]) -> Vec<(Category, usize)> {
    Category::all()
        .into_iter()
        .map(|c| (c, portfolios.iter().filter(|p| p.category == c).count()))
        .collect()
}

// --- error metrics -----------------------------------------------------------

/// Overall relative hedging error in percent: the ratio of root-mean-square
/// PnL variations. Identically zero series on both sides yield NaN (the
/// 0/0 sentinel of a static market).
pub fn overall_error(pnl_hedged: &[f64], pnl_unhedged: &[f64]) -> Result<f64> {
    if pnl_hedged.len() != pnl_unhedged.len() {
        return Err(Error::Dimension {
            context: "overall_error".into(),
            expected: pnl_unhedged.len(),
            got: pnl_hedged.len(),
        });
    }
    if pnl_hedged.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least 2 PnL observations".into(),
        ));
    }
    let ss = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let num = ss(pnl_hedged);
    let den = ss(pnl_unhedged);
    if den == 0.0 {
        return Ok(if num == 0.0 { f64::NAN } else { f64::INFINITY });
    }
    Ok((num / den).sqrt() * 100.0)
}

/// EWMA relative hedging error series in percent. The recursion starts at
/// the first squared PnL and runs over every observation; any reporting
/// warm-up is applied by callers, not here.
pub fn ewma_error(pnl_hedged: &[f64], pnl_unhedged: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(Error::Config(format!("lambda must be in (0,1), got {lambda}")));
    }
    if pnl_hedged.len() != pnl_unhedged.len() {
        return Err(Error::Dimension {
            context: "ewma_error".into(),
            expected: pnl_unhedged.len(),
            got: pnl_hedged.len(),
        });
    }
    if pnl_hedged.is_empty() {
        return Err(Error::InsufficientData("empty PnL series".into()));
    }
    let mut eh = 0.0;
    let mut eu = 0.0;
    let mut out = Vec::with_capacity(pnl_hedged.len());
    for (i, (h, u)) in pnl_hedged.iter().zip(pnl_unhedged).enumerate() {
        if i == 0 {
            eh = h * h;
            eu = u * u;
        } else {
            eh = lambda * eh + (1.0 - lambda) * h * h;
            eu = lambda * eu + (1.0 - lambda) * u * u;
        }
        out.push((eh / eu).sqrt() * 100.0);
    }
    Ok(out)
}

// --- backtest ----------------------------------------------------------------

/// Trained models the hedging strategies draw on.
pub struct BacktestModels {
    pub factor_model: FactorModel,
    pub sde: NeuralSde,
}

#[derive(Debug, Clone)]
pub struct BacktestConfig {
    pub methods: Vec<HedgeMethod>,
    /// Rebalancing horizons in trading days (overlapping windows).
    pub dt_days: Vec<usize>,
    /// Hedging-option target: tenor in calendar days, call delta.
    pub instrument_tenor_days: f64,
    pub instrument_delta: f64,
    pub ewma_lambda: f64,
    /// Leading EWMA observations dropped from reports (not the recursion).
    pub warmup_days: usize,
    pub max_skip_fraction: f64,
    pub tradable_margin_m: f64,
    pub calibration: CalibrationOptions,
    /// Record the hedge plan of every kept window in the report.
    pub record_plans: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            methods: vec![HedgeMethod::None, HedgeMethod::DeltaBs],
            dt_days: vec![1, 5],
            instrument_tenor_days: 182.0,
            instrument_delta: 0.5,
            ewma_lambda: 0.99,
            warmup_days: 252,
            max_skip_fraction: 0.05,
            tradable_margin_m: 0.10,
            calibration: CalibrationOptions::default(),
            record_plans: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HedgingErrorReport {
    pub portfolio: String,
    pub category: Category,
    pub method: HedgeMethod,
    pub dt_days: usize,
    /// NaN encodes the 0/0 sentinel of a static market.
    pub overall_pct: f64,
    pub dates: Vec<NaiveDate>,
    pub ewma_pct: Vec<f64>,
    pub pnl_unhedged: Vec<f64>,
    pub pnl_hedged: Vec<f64>,
    pub skipped_dates: Vec<NaiveDate>,
    /// One plan per kept window when `record_plans` is set.
    pub plans: Vec<(NaiveDate, HedgePlan)>,
}

struct DateCtx {
    date: NaiveDate,
    spot: f64,
    interp: SurfaceInterp,
    xi: DVector<f64>,
    heston: Option<HestonParams>,
    /// Per-lattice-point (delta, vega) under the day's calibrated
    /// parameters; one converged quadrature rule per tenor serves every
    /// strike, method and horizon on the date.
    heston_table: Option<Vec<(f64, f64)>>,
    /// Resolved hedging option for the two-instrument strategies.
    instrument: Option<OptionSpec>,
}

fn needs_heston(methods: &[HedgeMethod]) -> bool {
    methods
        .iter()
        .any(|m| matches!(m, HedgeMethod::DeltaHestonMv | HedgeMethod::DvHeston))
}

fn needs_instrument(method: HedgeMethod) -> bool {
    matches!(
        method,
        HedgeMethod::DvBs
            | HedgeMethod::DvHeston
            | HedgeMethod::DxiSens
            | HedgeMethod::DxiMv
            | HedgeMethod::MvDirect
    )
}

/// Run rolling one-period hedges over the dataset for every
/// (portfolio, method, horizon) combination.
pub fn run_backtest(
    dataset: &MarketDataset,
    models: &BacktestModels,
    portfolios: &[Portfolio],
    config: &BacktestConfig,
) -> Result<Vec<HedgingErrorReport>> {
    let n = dataset.len();
    let max_dt = *config.dt_days.iter().max().ok_or_else(|| {
        Error::Config("no rebalancing horizons requested".into())
    })?;
    if max_dt == 0 {
        return Err(Error::Config("rebalancing horizon must be >= 1".into()));
    }
    if n <= max_dt + 1 {
        return Err(Error::InsufficientData(format!(
            "{n} test dates cannot support a {max_dt}-day horizon"
        )));
    }
    let lattice = &dataset.lattice;
    if models.factor_model.lattice().hash() != lattice.hash() {
        return Err(Error::Validation(
            "factor model lattice does not match the dataset".into(),
        ));
    }

    // Per-date contexts: interpolant, decoded factors, hedging instrument,
    // and (when required) warm-started Heston calibration.
    let taus = lattice.taus();
    let inst_tau = {
        let target = config.instrument_tenor_days / 365.0;
        taus.iter()
            .copied()
            .min_by(|a, b| (a - target).abs().partial_cmp(&(b - target).abs()).unwrap())
            .unwrap()
    };
    let tradable = tradable_points(lattice, config.tradable_margin_m);
    if tradable.is_empty() {
        return Err(Error::Config("tradable band is empty".into()));
    }
    let (band_lo, band_hi) = tradable
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, m, _)| {
            (lo.min(*m), hi.max(*m))
        });
    let want_heston = needs_heston(&config.methods);
    let want_instrument = config.methods.iter().copied().any(needs_instrument);

    let mut ctxs: Vec<DateCtx> = Vec::with_capacity(n);
    let mut prev_params: Option<HestonParams> = None;
    for snap in &dataset.snapshots {
        let interp = SurfaceInterp::new(lattice, &snap.prices)?;
        let xi = models.factor_model.project(&snap.prices)?;
        let (heston, heston_table) = if want_heston {
            let opts = match &prev_params {
                None => CalibrationOptions {
                    compute_mape: false,
                    ..config.calibration.clone()
                },
                Some(p) => CalibrationOptions {
                    max_evals_per_start: 400,
                    starts: Some(vec![*p]),
                    compute_mape: false,
                    ..config.calibration.clone()
                },
            };
            let res = calibrate_heston(lattice, snap, &opts)?;
            prev_params = Some(res.params);
            let mut table = vec![(f64::NAN, f64::NAN); lattice.len()];
            for si in 0..lattice.n_slices() {
                let (tau, ms) = lattice.slice(si);
                let m_vals: Vec<f64> = ms.iter().map(|(m, _)| *m).collect();
                let greeks = crate::models::heston_greeks_batch(&res.params, tau, &m_vals)?;
                for ((_, idx), g) in ms.iter().zip(greeks) {
                    table[*idx] = g;
                }
            }
            (Some(res.params), Some(table))
        } else {
            (None, None)
        };
        let instrument = if want_instrument {
            resolve_instrument(&interp, lattice, inst_tau, config.instrument_delta, band_lo, band_hi)
        } else {
            None
        };
        ctxs.push(DateCtx {
            date: snap.date,
            spot: snap.spot,
            interp,
            xi,
            heston,
            heston_table,
            instrument,
        });
    }

    let mut reports = Vec::new();
    for portfolio in portfolios {
        for &method in &config.methods {
            for &dt in &config.dt_days {
                reports.push(run_single(
                    dataset, models, portfolio, method, dt, config, &ctxs, band_lo, band_hi,
                )?);
            }
        }
    }
    Ok(reports)
}

/// Nearest tradable lattice option to (tenor, delta) on this date.
fn resolve_instrument(
    interp: &SurfaceInterp,
    lattice: &LiquidLattice,
    inst_tau: f64,
    delta: f64,
    band_lo: f64,
    band_hi: f64,
) -> Option<OptionSpec> {
    let m_star = hedging::moneyness_for_delta(interp, inst_tau, delta, band_lo, band_hi).ok()?;
    let idx = lattice.nearest(inst_tau, m_star);
    let p = lattice.points()[idx];
    if p.m < band_lo - 1e-12 || p.m > band_hi + 1e-12 {
        return None;
    }
    OptionSpec::vanilla_call(p.tau, p.m).ok()
}

/// Resolve a portfolio's legs on one date to concrete lattice options.
fn resolve_legs(
    portfolio: &Portfolio,
    ctx: &DateCtx,
    lattice: &LiquidLattice,
    band_lo: f64,
    band_hi: f64,
) -> Result<Vec<(OptionSpec, f64)>> {
    let taus = lattice.taus();
    portfolio
        .legs
        .iter()
        .map(|(leg, w)| match leg {
            LegSpec::Fixed(spec) => Ok((*spec, *w)),
            LegSpec::DeltaQuoted { tenor_days, delta } => {
                let target_tau = tenor_days / 365.0;
                let tau = taus
                    .iter()
                    .copied()
                    .min_by(|a, b| {
                        (a - target_tau)
                            .abs()
                            .partial_cmp(&(b - target_tau).abs())
                            .unwrap()
                    })
                    .unwrap();
                let m_star =
                    hedging::moneyness_for_delta(&ctx.interp, tau, *delta, band_lo, band_hi)?;
                let idx = lattice.nearest(tau, m_star);
                let p = lattice.points()[idx];
                if p.m < band_lo - 1e-12 || p.m > band_hi + 1e-12 {
                    return Err(Error::OutOfRange {
                        context: format!("resolved leg for delta {delta}"),
                        tau: p.tau,
                        m: p.m,
                    });
                }
                Ok((OptionSpec::vanilla_call(p.tau, p.m)?, *w))
            }
        })
        .collect()
}

/// Currency value of one leg on a date's surface.
fn leg_value(
    spec: &OptionSpec,
    interp: &SurfaceInterp,
    model: &FactorModel,
    spot: f64,
) -> Result<f64> {
    let ctx = HedgeContext {
        surface: interp,
        model,
        spot,
    };
    Ok(hedging::exposures(spec, &ctx)?.value * spot)
}

/// Shift an option's coordinates so its currency strike (and barrier) stay
/// fixed when the spot moves from `s_old` to `s_new`.
fn shifted(spec: &OptionSpec, s_old: f64, s_new: f64) -> OptionSpec {
    let shift = (s_old / s_new).ln();
    OptionSpec {
        m: spec.m + shift,
        barrier_m: spec.barrier_m.map(|b| b + shift),
        ..*spec
    }
}

#[allow(clippy::too_many_arguments)]
fn run_single(
    dataset: &MarketDataset,
    models: &BacktestModels,
    portfolio: &Portfolio,
    method: HedgeMethod,
    dt: usize,
    config: &BacktestConfig,
    ctxs: &[DateCtx],
    band_lo: f64,
    band_hi: f64,
) -> Result<HedgingErrorReport> {
    let lattice = &dataset.lattice;
    let n = dataset.len();
    let n_windows = n - dt;
    let mut dates = Vec::with_capacity(n_windows);
    let mut pnl_u = Vec::with_capacity(n_windows);
    let mut pnl_h = Vec::with_capacity(n_windows);
    let mut skipped = Vec::new();
    let mut plans = Vec::new();

    for l in 0..n_windows {
        let t0 = &ctxs[l];
        let t1 = &ctxs[l + dt];
        match window_pnl(
            models, portfolio, method, lattice, t0, t1, band_lo, band_hi,
        ) {
            Ok((u, h, plan)) => {
                dates.push(t0.date);
                pnl_u.push(u);
                pnl_h.push(h);
                if config.record_plans {
                    plans.push((t0.date, plan));
                }
            }
            Err(Error::OutOfRange { .. }) | Err(Error::Domain(_)) => {
                skipped.push(t0.date);
            }
            Err(other) => return Err(other),
        }
    }
    if skipped.len() as f64 > config.max_skip_fraction * n_windows as f64 {
        return Err(Error::InsufficientData(format!(
            "{} of {} windows skipped for {} / {} / dt={}; first: {:?}",
            skipped.len(),
            n_windows,
            portfolio.name,
            method.name(),
            dt,
            skipped.first()
        )));
    }
    if pnl_u.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "too few usable windows for {}", portfolio.name
        )));
    }
    let overall = overall_error(&pnl_h, &pnl_u)?;
    let ewma = ewma_error(&pnl_h, &pnl_u, config.ewma_lambda)?;
    Ok(HedgingErrorReport {
        portfolio: portfolio.name.clone(),
        category: portfolio.category,
        method,
        dt_days: dt,
        overall_pct: overall,
        dates,
        ewma_pct: ewma,
        pnl_unhedged: pnl_u,
        pnl_hedged: pnl_h,
        skipped_dates: skipped,
        plans,
    })
}

#[allow(clippy::too_many_arguments)]
fn window_pnl(
    models: &BacktestModels,
    portfolio: &Portfolio,
    method: HedgeMethod,
    lattice: &LiquidLattice,
    t0: &DateCtx,
    t1: &DateCtx,
    band_lo: f64,
    band_hi: f64,
) -> Result<(f64, f64, HedgePlan)> {
    let legs = resolve_legs(portfolio, t0, lattice, band_lo, band_hi)?;
    let ctx = HedgeContext {
        surface: &t0.interp,
        model: &models.factor_model,
        spot: t0.spot,
    };
    let plan = build_plan(method, &legs, &ctx, models, t0, lattice)?;

    // Open values.
    let mut v0 = 0.0;
    for (spec, w) in &legs {
        v0 += w * leg_value(spec, &t0.interp, &models.factor_model, t0.spot)?;
    }
    let mut pi0 = v0 - plan.x_s * t0.spot;
    for (i, inst) in plan.instruments.iter().enumerate() {
        pi0 -= plan.x_c[i] * leg_value(inst, &t0.interp, &models.factor_model, t0.spot)?;
    }

    // Close values: strikes fixed, moneyness shifted by the spot move.
    let mut v1 = 0.0;
    for (spec, w) in &legs {
        let moved = shifted(spec, t0.spot, t1.spot);
        v1 += w * leg_value(&moved, &t1.interp, &models.factor_model, t1.spot)?;
    }
    let mut pi1 = v1 - plan.x_s * t1.spot;
    for (i, inst) in plan.instruments.iter().enumerate() {
        let moved = shifted(inst, t0.spot, t1.spot);
        pi1 -= plan.x_c[i] * leg_value(&moved, &t1.interp, &models.factor_model, t1.spot)?;
    }
    Ok((v1 - v0, pi1 - pi0, plan))
}

fn build_plan(
    method: HedgeMethod,
    legs: &[(OptionSpec, f64)],
    ctx: &HedgeContext,
    models: &BacktestModels,
    t0: &DateCtx,
    lattice: &LiquidLattice,
) -> Result<HedgePlan> {
    let instrument = || {
        t0.instrument.ok_or(Error::Domain(
            "hedging instrument unresolvable on this date".into(),
        ))
    };
    let heston = || {
        t0.heston.ok_or_else(|| {
            Error::Config("heston method requested without calibration".into())
        })
    };
    Ok(match method {
        HedgeMethod::None => HedgePlan::delta_only(0.0, method),
        HedgeMethod::DeltaBs => {
            let (delta, _) = hedging::bs_portfolio_greeks(legs, ctx)?;
            HedgePlan::delta_only(delta, method)
        }
        HedgeMethod::DeltaHestonMv => {
            let p = heston()?;
            let mut delta = 0.0;
            for (spec, w) in legs {
                if spec.kind != OptionKind::VanillaCall {
                    return Err(Error::Domain(
                        "heston delta hedging supports vanilla calls only".into(),
                    ));
                }
                let (d, v) = heston_point(t0, lattice, &p, spec)?;
                delta += w * (d + v * p.rho * p.sigma_v / p.s0);
            }
            HedgePlan::delta_only(delta, method)
        }
        HedgeMethod::DeltaNsdeMv => {
            let e = hedging::portfolio_exposures(legs, ctx)?;
            let delta = hedging::mv_delta_from_exposures(&e, ctx.spot, &models.sde, &t0.xi)?;
            HedgePlan::delta_only(delta, method)
        }
        HedgeMethod::DvBs => {
            let mut plan = hedging::bs_delta_vega_hedge(legs, &instrument()?, ctx)?;
            plan.method = method;
            plan
        }
        HedgeMethod::DvHeston => {
            let p = heston()?;
            let inst = instrument()?;
            let mut dv = 0.0;
            let mut vv = 0.0;
            for (spec, w) in legs {
                let (d, v) = heston_point(t0, lattice, &p, spec)?;
                dv += w * d;
                vv += w * v;
            }
            let (di, vi) = heston_point(t0, lattice, &p, &inst)?;
            if vi.abs() <= 1e-10 {
                return Err(Error::Singular(format!(
                    "instrument vega {vi:.3e} too small for delta-vega hedging"
                )));
            }
            let x_c = vv / vi;
            HedgePlan {
                x_s: dv - x_c * di,
                x_c: vec![x_c],
                instruments: vec![inst],
                method,
            }
        }
        HedgeMethod::DxiSens => {
            let mut plan = hedging::solve_sensitivity_hedge(legs, &[instrument()?], 1, ctx)?;
            plan.method = method;
            plan
        }
        HedgeMethod::DxiMv => {
            let mut plan =
                hedging::solve_mv_hedge(legs, &[instrument()?], 1, ctx, &models.sde, &t0.xi)?;
            plan.method = method;
            plan
        }
        HedgeMethod::MvDirect => {
            let mut plan = hedging::solve_direct_mv_hedge(
                legs,
                &[instrument()?],
                ctx,
                &models.sde,
                &t0.xi,
            )?;
            plan.method = method;
            plan
        }
    })
}

/// Per-option (delta, vega) under the day's parameters, from the date's
/// table when the option sits on the lattice.
fn heston_point(
    t0: &DateCtx,
    lattice: &LiquidLattice,
    p: &HestonParams,
    spec: &OptionSpec,
) -> Result<(f64, f64)> {
    if spec.kind != OptionKind::VanillaCall {
        return Err(Error::Domain(
            "heston greeks are tabulated for vanilla calls only".into(),
        ));
    }
    if let Some(table) = &t0.heston_table {
        // Legs resolve to lattice points, so the lookup normally hits.
        if let Some(idx) = lattice.index_of(spec.tau, spec.m) {
            let (d, v) = table[idx];
            if d.is_finite() {
                return Ok((d, v));
            }
        }
    }
    crate::models::heston_greeks(p, spec.tau, spec.m)
}

// --- outputs -------------------------------------------------------------

/// Summary CSV: `portfolio,method,dt,overall_pct`.
pub fn write_summary_csv<W: std::io::Write>(reports: &[HedgingErrorReport], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["portfolio", "method", "dt", "overall_pct"])?;
    for r in reports {
        wtr.write_record(&[
            r.portfolio.clone(),
            r.method.name().to_string(),
            r.dt_days.to_string(),
            format!("{:.6}", r.overall_pct),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Time-series CSV: `date,portfolio,category,method,dt,ewma_pct`, with the
/// configured warm-up dropped from the front.
pub fn write_ewma_csv<W: std::io::Write>(
    reports: &[HedgingErrorReport],
    warmup: usize,
    w: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "portfolio", "category", "method", "dt", "ewma_pct"])?;
    for r in reports {
        for (i, date) in r.dates.iter().enumerate().skip(warmup) {
            wtr.write_record(&[
                date.to_string(),
                r.portfolio.clone(),
                r.category.name().to_string(),
                r.method.name().to_string(),
                r.dt_days.to_string(),
                format!("{:.6}", r.ewma_pct[i]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Hedge plans as JSON lines, one per (date, portfolio, method).
pub fn write_plans_jsonl<W: std::io::Write>(
    reports: &[HedgingErrorReport],
    mut w: W,
) -> Result<()> {
    for r in reports {
        for (date, plan) in &r.plans {
            let line = serde_json::json!({
                "date": date.to_string(),
                "portfolio": r.portfolio,
                "method": r.method.name(),
                "dt": r.dt_days,
                "x_s": plan.x_s,
                "x_c": plan.x_c,
                "instruments": plan.instruments,
            });
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Plot-ready JSON: error curves plus PnL panels per report.
pub fn plot_data_json(reports: &[HedgingErrorReport]) -> serde_json::Value {
    let series: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "portfolio": r.portfolio,
                "category": r.category.name(),
                "method": r.method.name(),
                "dt": r.dt_days,
                "overall_pct": r.overall_pct,
                "dates": r.dates.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
                "ewma_pct": r.ewma_pct,
                "pnl_unhedged": r.pnl_unhedged,
                "pnl_hedged": r.pnl_hedged,
            })
        })
        .collect();
    serde_json::json!({ "schema_version": 1, "series": series })
}

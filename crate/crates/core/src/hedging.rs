//! Hedge ratios under the factor market model and the benchmark models.
//!
//! Every hedging strategy here reduces to a small linear system: the
//! aggregated exposure of the hedging instruments to each hedged risk factor
//! must equal the target's exposure. Sensitivity-based systems use partial
//! derivatives; minimum-variance systems use instantaneous covariations
//! built from the SDE diffusion matrix. Both are linear in the target, so
//! portfolio plans are sums of per-leg plans.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::NeuralSde;
use crate::error::{Error, Result};
use crate::factors::FactorModel;
use crate::models::{self, BsQuote, HestonParams};
use crate::surface::SurfaceInterp;

/// Condition-number guard for all hedge systems; failures should be loud.
const COND_LIMIT: f64 = 1e10;
const SIGMA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptionKind {
    VanillaCall,
    VanillaPut,
    BinaryCall,
    BinaryPut,
    DownAndOutCall,
}

/// An option identified by its normalized coordinates.
///
/// The binary call is the cash-or-nothing payoff `1{S_T > K}`, priced as
/// `-dC/dK`; the down-and-out call carries its barrier as a log-moneyness
/// below the strike's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub kind: OptionKind,
    pub tau: f64,
    pub m: f64,
    pub barrier_m: Option<f64>,
}

impl OptionSpec {
    pub fn new(kind: OptionKind, tau: f64, m: f64, barrier_m: Option<f64>) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() || !m.is_finite() {
            return Err(Error::Domain(format!("invalid option coordinates ({tau}, {m})")));
        }
        match kind {
            OptionKind::DownAndOutCall => {
                let b = barrier_m.ok_or_else(|| {
                    Error::Domain("down-and-out call needs a barrier".into())
                })?;
                if !(b < m) {
                    return Err(Error::Domain(format!(
                        "barrier log-moneyness {b} must be below the strike's {m}"
                    )));
                }
            }
            _ => {
                if barrier_m.is_some() {
                    return Err(Error::Domain("barrier given for a non-barrier option".into()));
                }
            }
        }
        Ok(Self { kind, tau, m, barrier_m })
    }

    pub fn vanilla_call(tau: f64, m: f64) -> Result<Self> {
        Self::new(OptionKind::VanillaCall, tau, m, None)
    }

    pub fn vanilla_put(tau: f64, m: f64) -> Result<Self> {
        Self::new(OptionKind::VanillaPut, tau, m, None)
    }
}

/// Value and risk-factor exposures of one option position.
///
/// `value` is in the spot numeraire, `d_s` is the currency delta (dV/dS),
/// and `d_xi[j]` the currency factor exposure (dV/dxi_j).
#[derive(Debug, Clone, PartialEq)]
pub struct Exposures {
    pub value: f64,
    pub d_s: f64,
    pub d_xi: DVector<f64>,
}

impl Exposures {
    fn zero(d: usize) -> Self {
        Self {
            value: 0.0,
            d_s: 0.0,
            d_xi: DVector::zeros(d),
        }
    }

    fn add_scaled(&mut self, other: &Exposures, w: f64) {
        self.value += w * other.value;
        self.d_s += w * other.d_s;
        self.d_xi += w * &other.d_xi;
    }
}

/// Everything exposure formulas need on one date: the current surface
/// interpolant (with moneyness derivatives), the factor basis, the spot.
pub struct HedgeContext<'a> {
    pub surface: &'a SurfaceInterp,
    pub model: &'a FactorModel,
    pub spot: f64,
}

impl HedgeContext<'_> {
    pub fn d(&self) -> usize {
        self.model.d()
    }
}

/// Exposures of a single option.
pub fn exposures(spec: &OptionSpec, ctx: &HedgeContext) -> Result<Exposures> {
    let d = ctx.d();
    match spec.kind {
        OptionKind::VanillaCall => {
            let e = ctx
                .surface
                .eval(spec.tau, spec.m)
                .map_err(|err| leg_err("call leg", err))?;
            let mut d_xi = DVector::zeros(d);
            for j in 0..d {
                d_xi[j] = ctx.spot * ctx.model.g_eval(j, spec.tau, spec.m)?.value;
            }
            Ok(Exposures {
                value: e.value,
                d_s: e.value - e.d_m,
                d_xi,
            })
        }
        OptionKind::VanillaPut => {
            let call = exposures(
                &OptionSpec { kind: OptionKind::VanillaCall, ..*spec },
                ctx,
            )
            .map_err(|err| leg_err("put leg (via parity)", err))?;
            Ok(Exposures {
                // P = C - S + K in currency; normalized: c - 1 + e^m.
                value: call.value - 1.0 + spec.m.exp(),
                d_s: call.d_s - 1.0,
                d_xi: call.d_xi,
            })
        }
        OptionKind::BinaryCall => {
            let e = ctx
                .surface
                .eval(spec.tau, spec.m)
                .map_err(|err| leg_err("binary leg", err))?;
            // Payoff 1{S_T > K}: price -dC/dK = -(S/K) dc/dm in currency.
            let s_over_k = (-spec.m).exp();
            let strike = ctx.spot * spec.m.exp();
            let mut d_xi = DVector::zeros(d);
            for j in 0..d {
                let g = ctx.model.g_eval(j, spec.tau, spec.m)?;
                d_xi[j] = -s_over_k * g.d_m;
            }
            Ok(Exposures {
                value: -s_over_k * e.d_m / ctx.spot,
                d_s: (e.d2_m - e.d_m) / strike,
                d_xi,
            })
        }
        OptionKind::BinaryPut => {
            // BP = 1 - BC (cash bond minus binary call), model-free parity.
            let bc = exposures(
                &OptionSpec { kind: OptionKind::BinaryCall, ..*spec },
                ctx,
            )?;
            Ok(Exposures {
                value: 1.0 / ctx.spot - bc.value,
                d_s: -bc.d_s,
                d_xi: -bc.d_xi,
            })
        }
        OptionKind::DownAndOutCall => {
            let b = spec.barrier_m.expect("validated");
            // DOC(K, B) = C(K) - (K/B) P(B^2/K); the put leg sits at the
            // strike reflected through the barrier.
            let m_put = 2.0 * b - spec.m;
            let call = exposures(&OptionSpec::vanilla_call(spec.tau, spec.m)?, ctx)
                .map_err(|err| leg_err("down-and-out call leg", err))?;
            let put = exposures(&OptionSpec::vanilla_put(spec.tau, m_put)?, ctx)
                .map_err(|err| leg_err("down-and-out reflected put leg", err))?;
            let w = -(spec.m - b).exp(); // -K/B
            let mut out = Exposures::zero(d);
            out.add_scaled(&call, 1.0);
            out.add_scaled(&put, w);
            Ok(out)
        }
    }
}

fn leg_err(leg: &str, err: Error) -> Error {
    match err {
        Error::OutOfRange { context, tau, m } => Error::OutOfRange {
            context: format!("{leg}: {context}"),
            tau,
            m,
        },
        other => other,
    }
}

/// Exposures of a weighted portfolio.
pub fn portfolio_exposures(legs: &[(OptionSpec, f64)], ctx: &HedgeContext) -> Result<Exposures> {
    let mut total = Exposures::zero(ctx.d());
    for (spec, w) in legs {
        let e = exposures(spec, ctx)?;
        total.add_scaled(&e, *w);
    }
    Ok(total)
}

/// Sensitivity-based market-model delta.
pub fn mm_delta(spec: &OptionSpec, ctx: &HedgeContext) -> Result<f64> {
    Ok(exposures(spec, ctx)?.d_s)
}

/// Minimum-variance market-model delta: the sensitivity delta plus the
/// leverage adjustment from the factor-spot diffusion couplings.
pub fn mm_mv_delta(
    spec: &OptionSpec,
    ctx: &HedgeContext,
    sde: &NeuralSde,
    xi: &DVector<f64>,
) -> Result<f64> {
    let e = exposures(spec, ctx)?;
    mv_delta_from_exposures(&e, ctx.spot, sde, xi)
}

/// MV delta of a whole portfolio of exposures.
pub fn mv_delta_from_exposures(
    e: &Exposures,
    spot: f64,
    sde: &NeuralSde,
    xi: &DVector<f64>,
) -> Result<f64> {
    let (_, sigma) = sde.drift_diffusion(xi)?;
    if sigma[(0, 0)].abs() <= SIGMA_TOL {
        return Err(Error::Singular(
            "spot diffusion sigma_11 is numerically zero".into(),
        ));
    }
    let mut adj = 0.0;
    for i in 0..e.d_xi.len() {
        adj += e.d_xi[i] * sigma[(i + 1, 0)] / (sigma[(0, 0)] * spot);
    }
    Ok(e.d_s + adj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeMethod {
    None,
    DeltaBs,
    DeltaHestonMv,
    DeltaNsdeMv,
    DvBs,
    DvHeston,
    DxiSens,
    DxiMv,
    MvDirect,
}

impl HedgeMethod {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "delta_bs" => Self::DeltaBs,
            "delta_heston_mv" => Self::DeltaHestonMv,
            "delta_nsde_mv" => Self::DeltaNsdeMv,
            "dv_bs" => Self::DvBs,
            "dv_heston" => Self::DvHeston,
            "dxi_sens" => Self::DxiSens,
            "dxi_mv" => Self::DxiMv,
            "mv_direct" => Self::MvDirect,
            other => {
                return Err(Error::Config(format!("unknown hedge method '{other}'")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::DeltaBs => "delta_bs",
            Self::DeltaHestonMv => "delta_heston_mv",
            Self::DeltaNsdeMv => "delta_nsde_mv",
            Self::DvBs => "dv_bs",
            Self::DvHeston => "dv_heston",
            Self::DxiSens => "dxi_sens",
            Self::DxiMv => "dxi_mv",
            Self::MvDirect => "mv_direct",
        }
    }
}

/// Units of underlying and of each hedging option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgePlan {
    pub x_s: f64,
    pub x_c: Vec<f64>,
    pub instruments: Vec<OptionSpec>,
    pub method: HedgeMethod,
}

impl HedgePlan {
    pub fn delta_only(x_s: f64, method: HedgeMethod) -> Self {
        Self {
            x_s,
            x_c: Vec::new(),
            instruments: Vec::new(),
            method,
        }
    }
}

fn solve_guarded(
    a: DMatrix<f64>,
    rhs: DVector<f64>,
    instruments: &[OptionSpec],
    context: &str,
) -> Result<DVector<f64>> {
    let svd = nalgebra::SVD::new(a, true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > COND_LIMIT {
        return Err(Error::Singular(format!(
            "{context}: hedge system condition number {:.3e} exceeds {COND_LIMIT:.0e}; \
             instruments {:?} are nearly dependent",
            if smin > 0.0 { smax / smin } else { f64::INFINITY },
            instruments.iter().map(|s| (s.tau, s.m)).collect::<Vec<_>>()
        )));
    }
    svd.solve(&rhs, 0.0)
        .map_err(|e| Error::Singular(format!("{context}: {e}")))
}

/// Solve the sensitivity-based hedge: the hedged portfolio's dS and first
/// `d_prime` factor exposures vanish.
pub fn solve_sensitivity_hedge(
    target: &[(OptionSpec, f64)],
    instruments: &[OptionSpec],
    d_prime: usize,
    ctx: &HedgeContext,
) -> Result<HedgePlan> {
    if instruments.len() != d_prime {
        return Err(Error::Dimension {
            context: "sensitivity hedge instruments".into(),
            expected: d_prime,
            got: instruments.len(),
        });
    }
    if d_prime > ctx.d() {
        return Err(Error::Config(format!(
            "cannot hedge {d_prime} factors with a {}-factor model",
            ctx.d()
        )));
    }
    let v = portfolio_exposures(target, ctx)?;
    let inst: Vec<Exposures> = instruments
        .iter()
        .map(|s| exposures(s, ctx))
        .collect::<Result<_>>()?;

    let n = d_prime + 1;
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    a[(0, 0)] = 1.0;
    for (i, e) in inst.iter().enumerate() {
        a[(0, i + 1)] = e.d_s;
    }
    rhs[0] = v.d_s;
    for j in 0..d_prime {
        for (i, e) in inst.iter().enumerate() {
            a[(j + 1, i + 1)] = e.d_xi[j];
        }
        rhs[j + 1] = v.d_xi[j];
    }
    let x = solve_guarded(a, rhs, instruments, "sensitivity hedge")?;
    Ok(HedgePlan {
        x_s: x[0],
        x_c: x.iter().skip(1).copied().collect(),
        instruments: instruments.to_vec(),
        method: HedgeMethod::DxiSens,
    })
}

/// Diffusion loading of an asset: `(S dU/dS, dU/dxi_1, ..., dU/dxi_d)`.
/// Quadratic covariations are bilinear forms of these with sigma sigma'.
fn loading(e: &Exposures, spot: f64) -> DVector<f64> {
    let d = e.d_xi.len();
    let mut w = DVector::zeros(d + 1);
    w[0] = spot * e.d_s;
    for j in 0..d {
        w[j + 1] = e.d_xi[j];
    }
    w
}

/// Solve the MV-based hedge: the hedged portfolio's instantaneous
/// covariations with S and the first `d_prime` factors vanish.
pub fn solve_mv_hedge(
    target: &[(OptionSpec, f64)],
    instruments: &[OptionSpec],
    d_prime: usize,
    ctx: &HedgeContext,
    sde: &NeuralSde,
    xi: &DVector<f64>,
) -> Result<HedgePlan> {
    if instruments.len() != d_prime {
        return Err(Error::Dimension {
            context: "mv hedge instruments".into(),
            expected: d_prime,
            got: instruments.len(),
        });
    }
    let (_, sigma) = sde.drift_diffusion(xi)?;
    if sigma[(0, 0)].abs() <= SIGMA_TOL {
        return Err(Error::Singular(
            "spot diffusion sigma_11 is numerically zero".into(),
        ));
    }
    let cov = &sigma * sigma.transpose();
    let v = portfolio_exposures(target, ctx)?;
    let inst: Vec<Exposures> = instruments
        .iter()
        .map(|s| exposures(s, ctx))
        .collect::<Result<_>>()?;

    let wv = loading(&v, ctx.spot);
    let wi: Vec<DVector<f64>> = inst.iter().map(|e| loading(e, ctx.spot)).collect();
    let mut ws = DVector::zeros(ctx.d() + 1);
    ws[0] = ctx.spot;

    let n = d_prime + 1;
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    // Row 0: covariation with S, normalized by <dS, dS>.
    let cov_ws = &cov * &ws;
    let norm_s = ctx.spot * cov_ws[0];
    a[(0, 0)] = 1.0;
    for (i, w) in wi.iter().enumerate() {
        a[(0, i + 1)] = w.dot(&cov_ws) / norm_s;
    }
    rhs[0] = wv.dot(&cov_ws) / norm_s;
    // Row j: covariation with xi_j (unit loading on coordinate j + 1).
    for j in 0..d_prime {
        let col = cov.column(j + 1).clone_owned();
        a[(j + 1, 0)] = ws.dot(&col);
        for (i, w) in wi.iter().enumerate() {
            a[(j + 1, i + 1)] = w.dot(&col);
        }
        rhs[j + 1] = wv.dot(&col);
    }
    let x = solve_guarded(a, rhs, instruments, "mv hedge")?;
    Ok(HedgePlan {
        x_s: x[0],
        x_c: x.iter().skip(1).copied().collect(),
        instruments: instruments.to_vec(),
        method: HedgeMethod::DxiMv,
    })
}

/// Solve MV-based direct hedging: zero covariation of the hedged portfolio
/// with the underlying and with each of its hedging instruments.
pub fn solve_direct_mv_hedge(
    target: &[(OptionSpec, f64)],
    instruments: &[OptionSpec],
    ctx: &HedgeContext,
    sde: &NeuralSde,
    xi: &DVector<f64>,
) -> Result<HedgePlan> {
    if instruments.is_empty() {
        return Err(Error::Config("direct hedge needs at least one instrument".into()));
    }
    let (_, sigma) = sde.drift_diffusion(xi)?;
    if sigma[(0, 0)].abs() <= SIGMA_TOL {
        return Err(Error::Singular(
            "spot diffusion sigma_11 is numerically zero".into(),
        ));
    }
    let cov = &sigma * sigma.transpose();
    let v = portfolio_exposures(target, ctx)?;
    let inst: Vec<Exposures> = instruments
        .iter()
        .map(|s| exposures(s, ctx))
        .collect::<Result<_>>()?;
    let wv = loading(&v, ctx.spot);
    let wi: Vec<DVector<f64>> = inst.iter().map(|e| loading(e, ctx.spot)).collect();
    let mut ws = DVector::zeros(ctx.d() + 1);
    ws[0] = ctx.spot;
    let scale = ctx.spot * ctx.spot * cov[(0, 0)]; // <dS, dS>
    let pairing = |x: &DVector<f64>, y: &DVector<f64>| (x.transpose() * &cov * y)[(0, 0)] / scale;

    let n = instruments.len() + 1;
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    a[(0, 0)] = 1.0;
    for (i, w) in wi.iter().enumerate() {
        a[(0, i + 1)] = pairing(w, &ws);
    }
    rhs[0] = pairing(&wv, &ws);
    for k in 0..instruments.len() {
        a[(k + 1, 0)] = pairing(&ws, &wi[k]);
        for (i, w) in wi.iter().enumerate() {
            a[(k + 1, i + 1)] = pairing(w, &wi[k]);
        }
        rhs[k + 1] = pairing(&wv, &wi[k]);
    }
    let x = solve_guarded(a, rhs, instruments, "direct mv hedge")?;
    Ok(HedgePlan {
        x_s: x[0],
        x_c: x.iter().skip(1).copied().collect(),
        instruments: instruments.to_vec(),
        method: HedgeMethod::MvDirect,
    })
}

/// Black-Scholes delta-vega hedge; every option uses its own implied vol.
pub fn bs_delta_vega_hedge(
    target: &[(OptionSpec, f64)],
    instrument: &OptionSpec,
    ctx: &HedgeContext,
) -> Result<HedgePlan> {
    let (dv, vv) = bs_portfolio_greeks(target, ctx)?;
    let (di, vi) = bs_option_greeks(instrument, ctx)?;
    if vi.abs() <= 1e-10 {
        return Err(Error::Singular(format!(
            "instrument vega {vi:.3e} too small for delta-vega hedging"
        )));
    }
    let x_c = vv / vi;
    Ok(HedgePlan {
        x_s: dv - x_c * di,
        x_c: vec![x_c],
        instruments: vec![*instrument],
        method: HedgeMethod::DvBs,
    })
}

pub fn bs_option_greeks(spec: &OptionSpec, ctx: &HedgeContext) -> Result<(f64, f64)> {
    let e = ctx.surface.eval(spec.tau, spec.m)?;
    match spec.kind {
        OptionKind::VanillaCall | OptionKind::VanillaPut => {
            let iv = models::implied_vol(e.value, spec.tau, spec.m)?;
            let q = BsQuote::new(iv, spec.tau, spec.m)?;
            let mut delta = models::bs_delta(&q);
            if spec.kind == OptionKind::VanillaPut {
                delta -= 1.0;
            }
            Ok((delta, models::bs_vega(&q, ctx.spot)))
        }
        _ => Err(Error::Domain(
            "delta-vega hedging supports vanilla options only".into(),
        )),
    }
}

pub fn bs_portfolio_greeks(legs: &[(OptionSpec, f64)], ctx: &HedgeContext) -> Result<(f64, f64)> {
    let mut delta = 0.0;
    let mut vega = 0.0;
    for (spec, w) in legs {
        let (d, v) = bs_option_greeks(spec, ctx)?;
        delta += w * d;
        vega += w * v;
    }
    Ok((delta, vega))
}

/// Heston delta-vega hedge using (daily recalibrated) parameters.
pub fn heston_delta_vega_hedge(
    target: &[(OptionSpec, f64)],
    instrument: &OptionSpec,
    params: &HestonParams,
) -> Result<HedgePlan> {
    let greeks = |spec: &OptionSpec| -> Result<(f64, f64)> {
        match spec.kind {
            OptionKind::VanillaCall | OptionKind::VanillaPut => {
                let (mut d, v) = models::heston_greeks(params, spec.tau, spec.m)?;
                if spec.kind == OptionKind::VanillaPut {
                    d -= 1.0;
                }
                Ok((d, v))
            }
            _ => Err(Error::Domain(
                "delta-vega hedging supports vanilla options only".into(),
            )),
        }
    };
    let mut dv = 0.0;
    let mut vv = 0.0;
    for (spec, w) in target {
        let (d, v) = greeks(spec)?;
        dv += w * d;
        vv += w * v;
    }
    let (di, vi) = greeks(instrument)?;
    if vi.abs() <= 1e-10 {
        return Err(Error::Singular(format!(
            "instrument vega {vi:.3e} too small for delta-vega hedging"
        )));
    }
    let x_c = vv / vi;
    Ok(HedgePlan {
        x_s: dv - x_c * di,
        x_c: vec![x_c],
        instruments: vec![*instrument],
        method: HedgeMethod::DvHeston,
    })
}

/// The two-factor MV ratio functional: the closed-form hedge-option units
/// of the MV-based delta-factor hedge. Only defined for d = 2 and when the
/// first two diffusion rows are not orthogonal (it divides by sigma_1
/// sigma_2'); kept as a cross-check of the linear solver, which stays
/// well-posed in that limit.
pub fn mv_g_functional(
    model: &FactorModel,
    sigma: &DMatrix<f64>,
    tau: f64,
    m: f64,
) -> Result<f64> {
    if model.d() != 2 || sigma.nrows() != 3 {
        return Err(Error::Config("the closed-form ratio is specific to d = 2".into()));
    }
    let s1 = sigma.row(0).transpose();
    let s2 = sigma.row(1).transpose();
    let s3 = sigma.row(2).transpose();
    let s1s1 = s1.dot(&s1);
    let s1s2 = s1.dot(&s2);
    if s1s2.abs() < 1e-300 {
        return Err(Error::Singular("sigma_1 sigma_2' vanishes".into()));
    }
    let mut total = 0.0;
    for (i, srow) in [&s2, &s3].iter().enumerate() {
        let g = model.g_eval(i, tau, m)?.value;
        let term = srow.dot(&s2) / s1s2 - srow.dot(&s1) / s1s1;
        total += g * term;
    }
    Ok(total)
}

/// Quadratic-covariation residuals of a hedged portfolio against S and each
/// factor, computed from sigma sigma'. Zero (to round-off) for MV plans.
pub fn covariation_residuals(
    plan: &HedgePlan,
    target: &[(OptionSpec, f64)],
    ctx: &HedgeContext,
    sigma: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let cov = sigma * sigma.transpose();
    let v = portfolio_exposures(target, ctx)?;
    let mut w_pi = loading(&v, ctx.spot);
    let mut ws = DVector::zeros(ctx.d() + 1);
    ws[0] = ctx.spot;
    w_pi -= &ws * plan.x_s;
    for (i, spec) in plan.instruments.iter().enumerate() {
        let e = exposures(spec, ctx)?;
        w_pi -= loading(&e, ctx.spot) * plan.x_c[i];
    }
    let covw = &cov * &w_pi;
    let mut out = Vec::with_capacity(ctx.d() + 1);
    out.push(ws.dot(&covw)); // <dPi, dS>
    for j in 0..ctx.d() {
        out.push(covw[j + 1]); // <dPi, dxi_j>
    }
    Ok(out)
}

/// Find the moneyness whose Black-Scholes delta (at the surface's own
/// implied vol) matches `delta`, by bisection over `[m_lo, m_hi]`.
pub fn moneyness_for_delta(
    surface: &SurfaceInterp,
    tau: f64,
    delta: f64,
    m_lo: f64,
    m_hi: f64,
) -> Result<f64> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::Domain(format!("call delta must be in (0,1), got {delta}")));
    }
    let delta_at = |m: f64| -> Result<f64> {
        let c = surface.eval(tau, m)?.value;
        let iv = models::implied_vol(c, tau, m)?;
        Ok(models::bs_delta(&BsQuote::new(iv, tau, m)?))
    };
    let (mut lo, mut hi) = (m_lo, m_hi);
    // Call delta decreases in moneyness; clamp when the target is outside.
    if delta >= delta_at(lo)? {
        return Ok(lo);
    }
    if delta <= delta_at(hi)? {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let d = delta_at(mid)?;
        if (d - delta).abs() < 1e-12 || hi - lo < 1e-10 {
            return Ok(mid);
        }
        if d > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

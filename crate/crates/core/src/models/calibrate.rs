//! Daily Heston calibration to a normalized price surface.
//!
//! Minimizes the vega-weighted squared price error over (v0, theta, k,
//! sigma_v, rho) with Nelder-Mead on transformed coordinates (logs for the
//! positive parameters, atanh-scaled correlation), multi-started. Weights
//! are reciprocal Black-Scholes vegas computed from each option's own
//! implied volatility, floored to keep deep wings from dominating.

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::models::bs::{self, BsQuote};
use crate::models::heston::{heston_price, HestonParams, HestonSlice};
use crate::surface::{LiquidLattice, SurfaceSnapshot};

/// Floor on normalized vegas used as weights (in spot units).
const VEGA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Nelder-Mead evaluation budget per start.
    pub max_evals_per_start: usize,
    /// Quadrature nodes per tenor slice during objective evaluations.
    pub n_nodes: usize,
    /// Starting parameter sets. `None` uses one surface-implied start plus
    /// two fixed ones.
    pub starts: Option<Vec<HestonParams>>,
    /// Re-price the lattice with the full-accuracy pricer to report MAPE.
    /// Skippable when only the parameters are needed.
    pub compute_mape: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            max_evals_per_start: 4000,
            n_nodes: 192,
            starts: None,
            compute_mape: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub params: HestonParams,
    /// Mean absolute percentage price error over the lattice.
    pub mape_pct: f64,
    /// Final weighted least-squares objective.
    pub objective: f64,
    /// False when the optimizer hit its budget before the simplex collapsed;
    /// the best-so-far parameters are still returned.
    pub converged: bool,
    pub evals: usize,
}

/// Transformed coordinates: z = (ln v0, ln theta, ln k, ln sigma_v, atanh(rho)).
fn to_z(p: &HestonParams) -> [f64; 5] {
    [
        p.v0.ln(),
        p.theta.ln(),
        p.k.ln(),
        p.sigma_v.ln(),
        (p.rho.clamp(-0.999, 0.999)).atanh(),
    ]
}

fn from_z(s0: f64, z: &[f64; 5]) -> HestonParams {
    HestonParams {
        s0,
        v0: z[0].exp(),
        theta: z[1].exp(),
        k: z[2].exp(),
        sigma_v: z[3].exp(),
        rho: z[4].tanh(),
    }
}

/// Quadratic barrier keeping the search inside a sane parameter box.
fn barrier(z: &[f64; 5]) -> f64 {
    z.iter().map(|v| {
        let over = (v.abs() - 8.0).max(0.0);
        1e4 * over * over
    }).sum()
}

struct Objective<'a> {
    lattice: &'a LiquidLattice,
    target: &'a [f64],
    weights: Vec<f64>,
    taus: Vec<f64>,
    n_nodes: usize,
    s0: f64,
}

impl Objective<'_> {
    fn eval(&self, z: &[f64; 5]) -> f64 {
        let p = from_z(self.s0, z);
        let mut sum = barrier(z);
        for (si, &tau) in self.taus.iter().enumerate() {
            let Ok(slice) = HestonSlice::new(&p, tau, self.n_nodes) else {
                return f64::INFINITY;
            };
            let (_, ms) = self.lattice.slice(si);
            for &(m, idx) in ms {
                let c = slice.price_normalized(p.v0, m);
                if !c.is_finite() {
                    return f64::INFINITY;
                }
                let diff = c - self.target[idx];
                sum += self.weights[idx] * diff * diff;
            }
        }
        sum
    }
}

/// Calibrate Heston parameters to one surface snapshot.
///
/// Returns best-so-far parameters with `converged = false` instead of
/// failing when the evaluation budget runs out.
pub fn calibrate_heston(
    lattice: &LiquidLattice,
    snapshot: &SurfaceSnapshot,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    snapshot.validate(lattice)?;
    let n = lattice.len();

    // Reciprocal-vega weights from each option's own implied volatility.
    let mut weights = vec![1.0 / VEGA_FLOOR; n];
    let mut ivs = vec![f64::NAN; n];
    for (j, p) in lattice.points().iter().enumerate() {
        if let Ok(iv) = bs::implied_vol(snapshot.prices[j], p.tau, p.m) {
            ivs[j] = iv;
            let vega = bs::bs_vega(&BsQuote { sigma: iv, tau: p.tau, m: p.m }, 1.0);
            weights[j] = 1.0 / vega.max(VEGA_FLOOR);
        }
    }

    let starts = match &opts.starts {
        Some(s) if !s.is_empty() => s.clone(),
        _ => default_starts(lattice, snapshot, &ivs),
    };

    let obj = Objective {
        lattice,
        target: &snapshot.prices,
        weights,
        taus: lattice.taus(),
        n_nodes: opts.n_nodes,
        s0: snapshot.spot,
    };

    let mut best: Option<(f64, [f64; 5], bool, usize)> = None;
    for start in &starts {
        let z0 = to_z(start);
        let (z, f, evals, converged) =
            nelder_mead(|z| obj.eval(z), z0, opts.max_evals_per_start, 1e-14);
        if best.as_ref().map_or(true, |(bf, ..)| f < *bf) {
            best = Some((f, z, converged, evals));
        }
    }
    let (objective, z, converged, evals) =
        best.ok_or_else(|| Error::Config("no calibration starts".into()))?;
    let params = from_z(snapshot.spot, &z);
    params.validate()?;

    // Report MAPE with the full-accuracy pricer.
    let mape = if opts.compute_mape {
        let mut total = 0.0;
        for (j, p) in lattice.points().iter().enumerate() {
            let c = heston_price(&params, p.tau, p.m)?;
            total += ((c - snapshot.prices[j]) / snapshot.prices[j]).abs();
        }
        total / n as f64 * 100.0
    } else {
        f64::NAN
    };

    Ok(CalibrationResult {
        params,
        mape_pct: mape,
        objective,
        converged,
        evals,
    })
}

/// One surface-implied start (short/long ATM variances) plus two fixed ones.
fn default_starts(
    lattice: &LiquidLattice,
    snapshot: &SurfaceSnapshot,
    ivs: &[f64],
) -> Vec<HestonParams> {
    let taus = lattice.taus();
    let short_atm = lattice.nearest(taus[0], 0.0);
    let long_atm = lattice.nearest(*taus.last().unwrap(), 0.0);
    let v_short = if ivs[short_atm].is_finite() { ivs[short_atm] * ivs[short_atm] } else { 0.04 };
    let v_long = if ivs[long_atm].is_finite() { ivs[long_atm] * ivs[long_atm] } else { 0.04 };
    let s0 = snapshot.spot;
    vec![
        HestonParams { s0, v0: v_short.clamp(1e-4, 2.0), theta: v_long.clamp(1e-4, 2.0), k: 2.0, sigma_v: 0.5, rho: -0.5 },
        HestonParams { s0, v0: 0.09, theta: 0.09, k: 3.0, sigma_v: 0.8, rho: 0.0 },
        HestonParams { s0, v0: 0.02, theta: 0.06, k: 0.8, sigma_v: 0.3, rho: -0.8 },
    ]
}

/// Standard Nelder-Mead on a fixed-dimension simplex.
fn nelder_mead(
    f: impl Fn(&[f64; 5]) -> f64,
    z0: [f64; 5],
    max_evals: usize,
    tol: f64,
) -> ([f64; 5], f64, usize, bool) {
    const N: usize = 5;
    let mut evals = 0usize;
    let eval = |z: &[f64; 5], evals: &mut usize| {
        *evals += 1;
        f(z)
    };

    let mut simplex: Vec<([f64; 5], f64)> = Vec::with_capacity(N + 1);
    let fv = eval(&z0, &mut evals);
    simplex.push((z0, fv));
    for i in 0..N {
        let mut z = z0;
        z[i] += 0.15;
        let fv = eval(&z, &mut evals);
        simplex.push((z, fv));
    }

    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex[N].1 - simplex[0].1;
        if spread.abs() <= tol * (1.0 + simplex[0].1.abs()) {
            converged = true;
            break;
        }
        let mut centroid = [0.0; N];
        for s in &simplex[..N] {
            for i in 0..N {
                centroid[i] += s.0[i] / N as f64;
            }
        }
        let worst = simplex[N];
        let point = |t: f64| {
            let mut z = [0.0; N];
            for i in 0..N {
                z[i] = centroid[i] + t * (worst.0[i] - centroid[i]);
            }
            z
        };
        let zr = point(-1.0);
        let fr = eval(&zr, &mut evals);
        if fr < simplex[0].1 {
            let ze = point(-2.0);
            let fe = eval(&ze, &mut evals);
            simplex[N] = if fe < fr { (ze, fe) } else { (zr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (zr, fr);
        } else {
            let zc = if fr < worst.1 { point(-0.5) } else { point(0.5) };
            let fc = eval(&zc, &mut evals);
            if fc < worst.1.min(fr) {
                simplex[N] = (zc, fc);
            } else {
                // Shrink toward the best vertex.
                let zbest = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    for i in 0..N {
                        s.0[i] = zbest[i] + 0.5 * (s.0[i] - zbest[i]);
                    }
                    s.1 = eval(&s.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (simplex[0].0, simplex[0].1, evals, converged)
}

/// Write a calibrated parameter series as `date,S0,v0,theta,k,sigma,rho,mape`.
pub fn write_calibration_csv<W: std::io::Write>(
    rows: &[(NaiveDate, HestonParams, f64)],
    w: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "S0", "v0", "theta", "k", "sigma", "rho", "mape"])?;
    for (date, p, mape) in rows {
        wtr.write_record(&[
            date.to_string(),
            format!("{:.10e}", p.s0),
            format!("{:.10e}", p.v0),
            format!("{:.10e}", p.theta),
            format!("{:.10e}", p.k),
            format!("{:.10e}", p.sigma_v),
            format!("{:.10e}", p.rho),
            format!("{:.6e}", mape),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::bs::bs_price;

    fn lattice() -> LiquidLattice {
        let taus = [0.25, 0.5, 1.0, 2.0];
        let ms: Vec<f64> = (0..9).map(|i| -0.2 + 0.05 * i as f64).collect();
        LiquidLattice::regular(&taus, &ms).unwrap()
    }

    fn heston_surface(lat: &LiquidLattice, p: &HestonParams) -> SurfaceSnapshot {
        let prices: Vec<f64> = lat
            .points()
            .iter()
            .map(|pt| heston_price(p, pt.tau, pt.m).unwrap())
            .collect();
        SurfaceSnapshot {
            date: NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(),
            spot: 100.0,
            prices,
        }
    }

    #[test]
    fn self_calibration_recovers_surface() {
        let lat = lattice();
        let truth = HestonParams::new(100.0, 0.045, 0.05, 1.8, 0.6, -0.65).unwrap();
        let snap = heston_surface(&lat, &truth);
        let res = calibrate_heston(&lat, &snap, &CalibrationOptions::default()).unwrap();
        assert!(
            res.mape_pct < 0.05,
            "mape {}% params {:?}",
            res.mape_pct,
            res.params
        );
    }

    #[test]
    fn warm_start_converges_fast() {
        let lat = lattice();
        let truth = HestonParams::new(100.0, 0.04, 0.04, 2.0, 0.5, -0.7).unwrap();
        let snap = heston_surface(&lat, &truth);
        let opts = CalibrationOptions {
            max_evals_per_start: 700,
            starts: Some(vec![HestonParams {
                v0: 0.042,
                ..truth
            }]),
            ..Default::default()
        };
        let res = calibrate_heston(&lat, &snap, &opts).unwrap();
        assert!(res.mape_pct < 0.05, "mape {}%", res.mape_pct);
    }

    #[test]
    fn flat_bs_surface_degenerates_gracefully() {
        let lat = lattice();
        let prices: Vec<f64> = lat
            .points()
            .iter()
            .map(|pt| bs_price(&BsQuote::new(0.2, pt.tau, pt.m).unwrap()))
            .collect();
        let snap = SurfaceSnapshot {
            date: NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(),
            spot: 100.0,
            prices,
        };
        let res = calibrate_heston(&lat, &snap, &CalibrationOptions::default()).unwrap();
        assert!(res.mape_pct < 0.05, "mape {}%", res.mape_pct);
        assert!((res.params.v0 - 0.04).abs() < 5e-3, "v0 {}", res.params.v0);
        assert!((res.params.theta - 0.04).abs() < 5e-3, "theta {}", res.params.theta);
        // Flat surfaces force the smile-generating terms to fade: either a
        // tiny vol-of-vol or variance noise averaged away by fast reversion.
        assert!(
            res.params.sigma_v < 0.1 || res.params.sigma_v * res.params.sigma_v / res.params.k < 5e-3,
            "sigma_v {} k {}",
            res.params.sigma_v,
            res.params.k
        );
    }

    #[test]
    fn calibration_csv_round_trips_values() {
        let p = HestonParams::new(100.0, 0.04, 0.05, 2.0, 0.5, -0.7).unwrap();
        let rows = vec![(NaiveDate::from_ymd_opt(2020, 6, 1).unwrap(), p, 0.0123)];
        let mut buf = Vec::new();
        write_calibration_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,S0,v0,theta,k,sigma,rho,mape"));
        assert!(text.contains("2020-06-01"));
    }
}

//! Synthetic ground-truth markets and CSV ingestion.
//!
//! The synthetic generator simulates a Heston state (S, v) with a
//! full-truncation Euler scheme at several substeps per trading day and
//! prices the whole lattice each day from the characteristic function. The
//! per-tenor quadrature terms that do not depend on the running variance are
//! precomputed once, so a multi-year history prices in seconds. Every
//! emitted snapshot is checked against the full static-arbitrage system.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arbitrage::{build_constraints, ConstraintSystem};
use crate::error::{Error, Result};
use crate::models::{heston_price, HestonParams, HestonSlice};
use crate::surface::{LatticePoint, LiquidLattice, SurfaceSnapshot};

/// A dated surface history on one lattice, with, for synthetic data, the
/// generating state path.
#[derive(Debug, Clone)]
pub struct MarketDataset {
    pub lattice: LiquidLattice,
    pub snapshots: Vec<SurfaceSnapshot>,
    /// `(date, spot, variance)` of the generating process, when known.
    pub truth: Option<Vec<(NaiveDate, f64, f64)>>,
    /// Per-date static-arbitrage violation flag (set by ingestion).
    pub arbitrage_flags: Vec<bool>,
}

impl MarketDataset {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Chronological split at `n_train` snapshots.
    pub fn split(&self, n_train: usize) -> Result<(MarketDataset, MarketDataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::Config(format!(
                "split point {n_train} outside (0, {})",
                self.len()
            )));
        }
        let cut = |range: std::ops::Range<usize>| MarketDataset {
            lattice: self.lattice.clone(),
            snapshots: self.snapshots[range.clone()].to_vec(),
            truth: self.truth.as_ref().map(|t| t[range.clone()].to_vec()),
            arbitrage_flags: self.arbitrage_flags[range].to_vec(),
        };
        Ok((cut(0..n_train), cut(n_train..self.len())))
    }
}

/// Default desk-scale lattice: the ten standard tenors, eleven moneyness
/// points per tenor.
pub fn default_lattice() -> LiquidLattice {
    let taus: Vec<f64> = [30.0, 60.0, 91.0, 122.0, 152.0, 182.0, 273.0, 365.0, 547.0, 730.0]
        .iter()
        .map(|d| d / 365.0)
        .collect();
    let ms: Vec<f64> = (0..11).map(|i| -0.25 + 0.05 * i as f64).collect();
    LiquidLattice::regular(&taus, &ms).expect("static lattice is valid")
}

/// Per-tenor lattice whose moneyness range scales with sqrt(tau), the
/// shape of a delta-quoted option grid. Wing options stay liquid across
/// vol regimes, unlike the corners of a wide rectangular grid. Moneyness
/// points sit on a shared step grid so calendar constraints find matching
/// strikes across tenors.
pub fn delta_shaped_lattice(tenor_days: &[f64], sigma_ref: f64, step: f64) -> Result<LiquidLattice> {
    let mut points = Vec::new();
    for &days in tenor_days {
        let tau = days / 365.0;
        let m_lim = sigma_ref * tau.sqrt();
        let k_max = (m_lim / step).floor() as i64;
        if k_max < 1 {
            return Err(Error::Config(format!(
                "tenor {days}d leaves fewer than 3 moneyness points at step {step}"
            )));
        }
        for k in -k_max..=k_max {
            points.push(LatticePoint {
                tau,
                m: k as f64 * step,
            });
        }
    }
    LiquidLattice::new(points)
}

/// Default synthetic regime: equity-like variance dynamics with strong
/// negative spot-vol correlation. Artifact defaults, not literature values.
pub fn default_heston() -> HestonParams {
    HestonParams {
        s0: 100.0,
        v0: 0.04,
        theta: 0.04,
        k: 2.0,
        sigma_v: 0.5,
        rho: -0.7,
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub days: usize,
    pub seed: u64,
    /// Euler substeps per trading day for the (S, v) path.
    pub substeps: usize,
    pub start_date: NaiveDate,
    /// Quadrature nodes per tenor slice for the daily surface pricing.
    pub n_nodes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            days: 2016,
            seed: 1,
            substeps: 8,
            start_date: NaiveDate::from_ymd_opt(2012, 1, 2).unwrap(),
            n_nodes: 1024,
        }
    }
}

fn next_weekday(mut d: NaiveDate) -> NaiveDate {
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d = d.succ_opt().unwrap();
    }
    d
}

/// Simulate a Heston market and price the lattice every day.
pub fn gen_heston_market(
    p0: &HestonParams,
    lattice: &LiquidLattice,
    cfg: &GenConfig,
) -> Result<MarketDataset> {
    p0.validate()?;
    if cfg.days < 2 {
        return Err(Error::Config("need at least 2 days".into()));
    }
    if cfg.substeps == 0 {
        return Err(Error::Config("substeps must be >= 1".into()));
    }

    // State path: full-truncation Euler on (ln S, v).
    let dt = 1.0 / 252.0 / cfg.substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ln_s = p0.s0.ln();
    let mut v = p0.v0;
    let mut states = Vec::with_capacity(cfg.days);
    let mut date = next_weekday(cfg.start_date);
    for _ in 0..cfg.days {
        states.push((date, ln_s.exp(), v));
        for _ in 0..cfg.substeps {
            let z1: f64 = rng.sample(rand_distr::StandardNormal);
            let z2: f64 = rng.sample(rand_distr::StandardNormal);
            let vp = v.max(0.0);
            ln_s += -0.5 * vp * dt + (vp * dt).sqrt() * z1;
            let zv = p0.rho * z1 + (1.0 - p0.rho * p0.rho).sqrt() * z2;
            v += p0.k * (p0.theta - vp) * dt + p0.sigma_v * (vp * dt).sqrt() * zv;
        }
        date = next_weekday(date.succ_opt().unwrap());
    }

    // Per-tenor characteristic-function terms are variance-independent, but
    // the quadrature domain must stay accurate down to the lowest variance
    // the path visits.
    let v_floor = states
        .iter()
        .map(|&(_, _, v)| v)
        .fold(f64::INFINITY, f64::min)
        .max(1e-4);
    let taus = lattice.taus();
    let slices: Vec<HestonSlice> = taus
        .iter()
        .map(|&tau| HestonSlice::with_variance_floor(p0, tau, cfg.n_nodes, v_floor))
        .collect::<Result<_>>()?;

    // Cross-check the fixed node count against the adaptive pricer once.
    let (_, _, v0_check) = states[0];
    for (si, &tau) in taus.iter().enumerate() {
        let (_, ms) = lattice.slice(si);
        for &(m, _) in &[ms[0], *ms.last().unwrap()] {
            let fixed = slices[si].price_normalized(v0_check, m);
            let adaptive = heston_price(&HestonParams { v0: v0_check, ..*p0 }, tau, m)?;
            if (fixed - adaptive).abs() > 1e-8 {
                return Err(Error::Numerical(format!(
                    "day-one pricing disagreement {:.3e} at (tau={tau}, m={m}); increase n_nodes",
                    (fixed - adaptive).abs()
                )));
            }
        }
    }

    let cs = build_constraints(lattice);
    let snapshots: Vec<SurfaceSnapshot> = states
        .par_iter()
        .map(|&(date, spot, v_t)| -> Result<SurfaceSnapshot> {
            let mut prices = vec![0.0; lattice.len()];
            for (si, _) in taus.iter().enumerate() {
                let (_, ms) = lattice.slice(si);
                for &(m, idx) in ms {
                    let p = slices[si].price_normalized(v_t.max(1e-12), m);
                    // Deep wings price at the quadrature noise floor; clamp
                    // into the outright bounds, failing on anything larger
                    // than noise.
                    let lo = (1.0 - m.exp()).max(0.0);
                    if p < lo - 1e-8 || p > 1.0 + 1e-8 {
                        return Err(Error::Numerical(format!(
                            "price {p} on {date} at (m={m}) violates outright bounds"
                        )));
                    }
                    prices[idx] = p.clamp(lo, 1.0);
                }
            }
            let violations = cs.violations(&prices)?;
            if !violations.is_empty() {
                let worst = violations
                    .iter()
                    .map(|v| v.magnitude)
                    .fold(0.0f64, f64::max);
                return Err(Error::Numerical(format!(
                    "generated surface on {date} violates {} static-arbitrage rows \
                     (worst magnitude {worst:.3e})",
                    violations.len()
                )));
            }
            SurfaceSnapshot::new(date, spot, prices, lattice)
        })
        .collect::<Result<_>>()?;

    let truth = states.iter().map(|&(d, s, v)| (d, s, v)).collect();
    let n = snapshots.len();
    Ok(MarketDataset {
        lattice: lattice.clone(),
        snapshots,
        truth: Some(truth),
        arbitrage_flags: vec![false; n],
    })
}

// --- CSV interfaces ----------------------------------------------------------

/// Write the surface history as `date,spot,tau,m,c_tilde`.
pub fn export_csv<W: std::io::Write>(dataset: &MarketDataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "spot", "tau", "m", "c_tilde"])?;
    for snap in &dataset.snapshots {
        for (p, c) in dataset.lattice.points().iter().zip(&snap.prices) {
            wtr.write_record(&[
                snap.date.to_string(),
                format!("{:.17e}", snap.spot),
                format!("{:.17e}", p.tau),
                format!("{:.17e}", p.m),
                format!("{:.17e}", c),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Write the generating state path as `date,S,v`.
pub fn export_truth_csv<W: std::io::Write>(dataset: &MarketDataset, w: W) -> Result<()> {
    let truth = dataset
        .truth
        .as_ref()
        .ok_or_else(|| Error::Validation("dataset carries no generating path".into()))?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "S", "v"])?;
    for (d, s, v) in truth {
        wtr.write_record(&[d.to_string(), format!("{s:.17e}"), format!("{v:.17e}")])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a surface history back. The lattice is taken from the first date's
/// rows; every later date must cover exactly the same lattice. Dates must be
/// strictly increasing. Static-arbitrage violations are recorded as per-date
/// flags, not errors.
pub fn ingest_csv<R: std::io::Read>(r: R) -> Result<MarketDataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let expect = ["date", "spot", "tau", "m", "c_tilde"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {expect:?}, got {headers:?}"),
        });
    }

    struct Row {
        line: usize,
        date: NaiveDate,
        spot: f64,
        tau: f64,
        m: f64,
        c: f64,
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let parse_f = |field: usize, name: &str| -> Result<f64> {
            rec[field].parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {name}: {e}"),
            })
        };
        rows.push(Row {
            line,
            date: rec[0].parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad date: {e}"),
            })?,
            spot: parse_f(1, "spot")?,
            tau: parse_f(2, "tau")?,
            m: parse_f(3, "m")?,
            c: parse_f(4, "c_tilde")?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no data rows".into()));
    }

    // Group rows by date, preserving file order.
    let mut groups: Vec<(NaiveDate, Vec<usize>)> = Vec::new();
    for (idx, row) in rows.iter().enumerate() {
        match groups.last_mut() {
            Some((d, members)) if *d == row.date => members.push(idx),
            _ => groups.push((row.date, vec![idx])),
        }
    }
    for w in groups.windows(2) {
        if w[1].0 <= w[0].0 {
            let line = rows[w[1].1[0]].line;
            return Err(Error::Parse {
                line,
                msg: format!("dates not strictly increasing at {}", w[1].0),
            });
        }
    }

    // Lattice from the first date.
    let first = &groups[0];
    let points: Vec<LatticePoint> = first
        .1
        .iter()
        .map(|&i| LatticePoint {
            tau: rows[i].tau,
            m: rows[i].m,
        })
        .collect();
    let lattice = LiquidLattice::new(points)?;

    let cs = build_constraints(&lattice);
    let mut snapshots = Vec::with_capacity(groups.len());
    let mut flags = Vec::with_capacity(groups.len());
    for (date, members) in &groups {
        let mut prices = vec![f64::NAN; lattice.len()];
        let mut seen = vec![false; lattice.len()];
        let spot = rows[members[0]].spot;
        for &i in members {
            let row = &rows[i];
            if (row.spot - spot).abs() > 1e-9 * spot.abs().max(1.0) {
                return Err(Error::Parse {
                    line: row.line,
                    msg: format!("inconsistent spot within date {date}"),
                });
            }
            let idx = lattice.index_of(row.tau, row.m).ok_or(Error::Parse {
                line: row.line,
                msg: format!(
                    "point (tau={}, m={}) not on the lattice of the first date",
                    row.tau, row.m
                ),
            })?;
            if seen[idx] {
                return Err(Error::Parse {
                    line: row.line,
                    msg: format!("duplicate lattice point on {date}"),
                });
            }
            seen[idx] = true;
            prices[idx] = row.c;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let p = lattice.points()[missing];
            return Err(Error::Parse {
                line: rows[members[0]].line,
                msg: format!(
                    "date {date} rejected: missing lattice point (tau={}, m={})",
                    p.tau, p.m
                ),
            });
        }
        let snap = SurfaceSnapshot::new(*date, spot, prices, &lattice)?;
        flags.push(!cs.violations(&snap.prices)?.is_empty());
        snapshots.push(snap);
    }
    Ok(MarketDataset {
        lattice,
        snapshots,
        truth: None,
        arbitrage_flags: flags,
    })
}

/// Indices of snapshots that violate the lattice's static-arbitrage system.
pub fn validate_arbitrage_free(dataset: &MarketDataset) -> Result<Vec<usize>> {
    let cs: ConstraintSystem = build_constraints(&dataset.lattice);
    let mut bad = Vec::new();
    for (i, snap) in dataset.snapshots.iter().enumerate() {
        if !cs.violations(&snap.prices)?.is_empty() {
            bad.push(i);
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{bs_price, BsQuote};

    fn small_lattice() -> LiquidLattice {
        let taus = [0.25, 0.5, 1.0];
        let ms: Vec<f64> = (0..7).map(|i| -0.15 + 0.05 * i as f64).collect();
        LiquidLattice::regular(&taus, &ms).unwrap()
    }

    fn quick_cfg(days: usize, seed: u64) -> GenConfig {
        GenConfig {
            days,
            seed,
            n_nodes: 384,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_vol_of_vol_gives_constant_bs_surface() {
        let lat = small_lattice();
        let p = HestonParams {
            sigma_v: 1e-8,
            rho: 0.0,
            ..default_heston()
        };
        let ds = gen_heston_market(&p, &lat, &quick_cfg(5, 3)).unwrap();
        for snap in &ds.snapshots {
            for (pt, c) in lat.points().iter().zip(&snap.prices) {
                let bs = bs_price(&BsQuote::new(0.2, pt.tau, pt.m).unwrap());
                assert!((c - bs).abs() < 1e-5, "tau={} m={}: {c} vs {bs}", pt.tau, pt.m);
            }
        }
        for snap in &ds.snapshots[1..] {
            for (a, b) in snap.prices.iter().zip(&ds.snapshots[0].prices) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let lat = small_lattice();
        let p = default_heston();
        let a = gen_heston_market(&p, &lat, &quick_cfg(4, 7)).unwrap();
        let b = gen_heston_market(&p, &lat, &quick_cfg(4, 7)).unwrap();
        for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x.spot, y.spot);
            assert_eq!(x.prices, y.prices);
        }
        let c = gen_heston_market(&p, &lat, &quick_cfg(4, 8)).unwrap();
        assert_ne!(a.snapshots[1].prices, c.snapshots[1].prices);
    }

    #[test]
    fn negative_correlation_shows_in_returns_and_variance_changes() {
        let lat = LiquidLattice::regular(&[0.25, 0.5], &[-0.05, 0.0, 0.05]).unwrap();
        let p = default_heston(); // rho = -0.7
        let ds = gen_heston_market(&p, &lat, &quick_cfg(2000, 11)).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let mut rets = Vec::new();
        let mut dvs = Vec::new();
        for w in truth.windows(2) {
            rets.push((w[1].1 / w[0].1).ln());
            dvs.push(w[1].2 - w[0].2);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mr, mv) = (mean(&rets), mean(&dvs));
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..rets.len() {
            num += (rets[i] - mr) * (dvs[i] - mv);
            da += (rets[i] - mr) * (rets[i] - mr);
            db += (dvs[i] - mv) * (dvs[i] - mv);
        }
        let corr = num / (da.sqrt() * db.sqrt());
        assert!(corr < -0.3, "sample correlation {corr}");
    }

    #[test]
    fn snapshots_satisfy_static_arbitrage() {
        let lat = small_lattice();
        let ds = gen_heston_market(&default_heston(), &lat, &quick_cfg(30, 5)).unwrap();
        assert!(validate_arbitrage_free(&ds).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip_is_identical() {
        let lat = small_lattice();
        let ds = gen_heston_market(&default_heston(), &lat, &quick_cfg(4, 9)).unwrap();
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let back = ingest_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.lattice.hash(), ds.lattice.hash());
        for (a, b) in back.snapshots.iter().zip(&ds.snapshots) {
            assert_eq!(a.date, b.date);
            assert_eq!(a.spot, b.spot);
            assert_eq!(a.prices, b.prices);
        }
        assert!(back.arbitrage_flags.iter().all(|f| !f));
    }

    #[test]
    fn missing_lattice_point_names_the_date() {
        let lat = small_lattice();
        let ds = gen_heston_market(&default_heston(), &lat, &quick_cfg(3, 2)).unwrap();
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Drop one row of the second date.
        let victim = ds.snapshots[1].date.to_string();
        let mut removed = false;
        let filtered: Vec<&str> = text
            .lines()
            .filter(|l| {
                if !removed && l.starts_with(&victim) {
                    removed = true;
                    false
                } else {
                    true
                }
            })
            .collect();
        let err = ingest_csv(filtered.join("\n").as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&victim), "error does not name the date: {msg}");
        assert!(msg.contains("missing lattice point"), "{msg}");
    }

    #[test]
    fn butterfly_violation_is_flagged_not_rejected() {
        let lat = small_lattice();
        let ds = gen_heston_market(&default_heston(), &lat, &quick_cfg(3, 2)).unwrap();
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Bump a mid strike of the first tenor on the second date high
        // enough to break convexity but stay within outright bounds.
        let victim_date = ds.snapshots[1].date.to_string();
        let (_, ms) = lat.slice(0);
        let (m_mid, idx_mid) = ms[3];
        let raised = format!("{:.17e}", ds.snapshots[1].prices[idx_mid] + 0.05);
        let doctored: Vec<String> = text
            .lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                if cols[0] == victim_date
                    && cols.len() == 5
                    && (cols[3].parse::<f64>().unwrap_or(9.9) - m_mid).abs() < 1e-12
                    && (cols[2].parse::<f64>().unwrap_or(9.9) - 0.25).abs() < 1e-12
                {
                    format!("{},{},{},{},{}", cols[0], cols[1], cols[2], cols[3], raised)
                } else {
                    l.to_string()
                }
            })
            .collect();
        let back = ingest_csv(doctored.join("\n").as_bytes()).unwrap();
        assert!(back.arbitrage_flags[1], "violation not flagged");
        assert!(!back.arbitrage_flags[0]);
        assert!(!back.arbitrage_flags[2]);
    }

    #[test]
    fn non_monotone_dates_are_rejected() {
        let lat = small_lattice();
        let ds = gen_heston_market(&default_heston(), &lat, &quick_cfg(3, 2)).unwrap();
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let n = lat.len();
        // Reorder blocks: day0, day2, day1.
        let mut rebuilt: Vec<&str> = vec![lines[0]];
        rebuilt.extend(&lines[1..1 + n]);
        rebuilt.extend(&lines[1 + 2 * n..1 + 3 * n]);
        rebuilt.extend(&lines[1 + n..1 + 2 * n]);
        let err = ingest_csv(rebuilt.join("\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }
}

//! Option price surfaces in normalized coordinates.
//!
//! Call prices are held in the spot numeraire: `c = C / S`, indexed by
//! time-to-expiry `tau` (years) and log-moneyness `m = ln(K/S)`. Prices live
//! on a finite liquid lattice; evaluation anywhere else goes through a
//! tensor-product interpolant (natural cubic spline in `m` per tenor slice,
//! linear blending across tenors) that is C2 in `m` within a slice. Queries
//! outside the liquid range are rejected, never extrapolated.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spline::CubicSpline;

/// Matching tolerance when looking up lattice coordinates.
const COORD_TOL: f64 = 1e-9;

/// A single option specification on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticePoint {
    /// Time to expiry in years, strictly positive.
    pub tau: f64,
    /// Log-moneyness ln(K/S).
    pub m: f64,
}

/// Rectangular liquid range in (tau, m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeRange {
    pub tau_min: f64,
    pub tau_max: f64,
    pub m_min: f64,
    pub m_max: f64,
}

impl LatticeRange {
    pub fn contains(&self, tau: f64, m: f64) -> bool {
        tau >= self.tau_min - COORD_TOL
            && tau <= self.tau_max + COORD_TOL
            && m >= self.m_min - COORD_TOL
            && m <= self.m_max + COORD_TOL
    }
}

/// The finite set of liquidly traded option specifications.
///
/// Points are stored row-major, sorted by `tau` then `m`; every module
/// addresses prices by lattice index, so the ordering is part of the
/// contract and is pinned by [`LiquidLattice::hash`].
#[derive(Debug, Clone)]
pub struct LiquidLattice {
    points: Vec<LatticePoint>,
    range: LatticeRange,
    /// Per-tenor slices: (tau, sorted (m, point index) pairs).
    slices: Vec<(f64, Vec<(f64, usize)>)>,
}

impl LiquidLattice {
    pub fn new(mut points: Vec<LatticePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("lattice has no points".into()));
        }
        for p in &points {
            if !(p.tau > 0.0) || !p.tau.is_finite() || !p.m.is_finite() {
                return Err(Error::Validation(format!(
                    "invalid lattice point (tau={}, m={})",
                    p.tau, p.m
                )));
            }
        }
        points.sort_by(|a, b| {
            a.tau
                .partial_cmp(&b.tau)
                .unwrap()
                .then(a.m.partial_cmp(&b.m).unwrap())
        });
        for w in points.windows(2) {
            if (w[0].tau - w[1].tau).abs() < COORD_TOL && (w[0].m - w[1].m).abs() < COORD_TOL {
                return Err(Error::Validation(format!(
                    "duplicate lattice point (tau={}, m={})",
                    w[0].tau, w[0].m
                )));
            }
        }

        let mut slices: Vec<(f64, Vec<(f64, usize)>)> = Vec::new();
        for (idx, p) in points.iter().enumerate() {
            match slices.last_mut() {
                Some((tau, ms)) if (*tau - p.tau).abs() < COORD_TOL => ms.push((p.m, idx)),
                _ => slices.push((p.tau, vec![(p.m, idx)])),
            }
        }
        if slices.len() < 2 {
            return Err(Error::Validation(
                "lattice needs at least 2 distinct tenors".into(),
            ));
        }
        for (tau, ms) in &slices {
            if ms.len() < 3 {
                return Err(Error::Validation(format!(
                    "tenor slice tau={tau} has fewer than 3 moneyness points"
                )));
            }
        }

        let range = LatticeRange {
            tau_min: slices.first().unwrap().0,
            tau_max: slices.last().unwrap().0,
            m_min: points.iter().map(|p| p.m).fold(f64::INFINITY, f64::min),
            m_max: points.iter().map(|p| p.m).fold(f64::NEG_INFINITY, f64::max),
        };
        Ok(Self {
            points,
            range,
            slices,
        })
    }

    /// Rectangular lattice from a tenor grid and a moneyness grid.
    pub fn regular(taus: &[f64], ms: &[f64]) -> Result<Self> {
        let mut points = Vec::with_capacity(taus.len() * ms.len());
        for &tau in taus {
            for &m in ms {
                points.push(LatticePoint { tau, m });
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn range(&self) -> &LatticeRange {
        &self.range
    }

    /// Distinct tenors in increasing order.
    pub fn taus(&self) -> Vec<f64> {
        self.slices.iter().map(|(t, _)| *t).collect()
    }

    /// Sorted (m, lattice index) pairs of one tenor slice.
    pub fn slice(&self, slice_idx: usize) -> (f64, &[(f64, usize)]) {
        let (tau, ms) = &self.slices[slice_idx];
        (*tau, ms)
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Lattice index of the point matching (tau, m), if present.
    pub fn index_of(&self, tau: f64, m: f64) -> Option<usize> {
        let (_, ms) = self
            .slices
            .iter()
            .find(|(t, _)| (t - tau).abs() < COORD_TOL)?;
        ms.iter()
            .find(|(mm, _)| (mm - m).abs() < COORD_TOL)
            .map(|(_, idx)| *idx)
    }

    /// Lattice index of the point nearest to (tau, m): smallest absolute
    /// tenor difference first, then smallest absolute moneyness difference.
    pub fn nearest(&self, tau: f64, m: f64) -> usize {
        let (_, ms) = self
            .slices
            .iter()
            .min_by(|a, b| {
                (a.0 - tau)
                    .abs()
                    .partial_cmp(&(b.0 - tau).abs())
                    .unwrap()
            })
            .unwrap();
        ms.iter()
            .min_by(|a, b| (a.0 - m).abs().partial_cmp(&(b.0 - m).abs()).unwrap())
            .map(|(_, idx)| *idx)
            .unwrap()
    }

    /// SHA-256 over the canonical point list; ties serialized artifacts to
    /// the lattice they were built on.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.points {
            hasher.update(format!("{:.12e},{:.12e};", p.tau, p.m).as_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Normalized call prices on the lattice at one date.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceSnapshot {
    pub date: NaiveDate,
    /// Underlying price, strictly positive.
    pub spot: f64,
    /// Normalized prices aligned with the lattice point order.
    pub prices: Vec<f64>,
}

impl SurfaceSnapshot {
    pub fn new(date: NaiveDate, spot: f64, prices: Vec<f64>, lattice: &LiquidLattice) -> Result<Self> {
        let snap = Self { date, spot, prices };
        snap.validate(lattice)?;
        Ok(snap)
    }

    /// Check outright bounds `max(1 - e^m, 0) <= c <= 1` on every point.
    pub fn validate(&self, lattice: &LiquidLattice) -> Result<()> {
        if !(self.spot > 0.0) {
            return Err(Error::Domain(format!("non-positive spot {}", self.spot)));
        }
        if self.prices.len() != lattice.len() {
            return Err(Error::Dimension {
                context: format!("snapshot {} price vector", self.date),
                expected: lattice.len(),
                got: self.prices.len(),
            });
        }
        for (p, c) in lattice.points().iter().zip(&self.prices) {
            let lower = (1.0 - p.m.exp()).max(0.0);
            if !c.is_finite() || *c < lower - 1e-12 || *c > 1.0 + 1e-12 {
                return Err(Error::Validation(format!(
                    "snapshot {}: price {} at (tau={}, m={}) violates outright bounds [{}, 1]",
                    self.date, c, p.tau, p.m, lower
                )));
            }
        }
        Ok(())
    }
}

/// Normalize a call price by the spot: `c = C / S`.
pub fn normalize(call_price: f64, spot: f64) -> Result<f64> {
    if !(spot > 0.0) {
        return Err(Error::Domain(format!("non-positive spot {spot}")));
    }
    if !(call_price >= 0.0) {
        return Err(Error::Domain(format!("negative call price {call_price}")));
    }
    Ok(call_price / spot)
}

/// Value and moneyness derivatives of an interpolated surface at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpEval {
    pub value: f64,
    pub d_m: f64,
    pub d2_m: f64,
}

/// Smooth evaluation of a value vector defined on a lattice.
///
/// Used both for price snapshots and for factor basis surfaces; the two must
/// share one scheme so that hedge ratios assembled from both are consistent.
#[derive(Debug, Clone)]
pub struct SurfaceInterp {
    taus: Vec<f64>,
    splines: Vec<CubicSpline>,
    range: LatticeRange,
}

impl SurfaceInterp {
    pub fn new(lattice: &LiquidLattice, values: &[f64]) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::Dimension {
                context: "surface interpolant values".into(),
                expected: lattice.len(),
                got: values.len(),
            });
        }
        let mut taus = Vec::with_capacity(lattice.n_slices());
        let mut splines = Vec::with_capacity(lattice.n_slices());
        for s in 0..lattice.n_slices() {
            let (tau, ms) = lattice.slice(s);
            let xs: Vec<f64> = ms.iter().map(|(m, _)| *m).collect();
            let ys: Vec<f64> = ms.iter().map(|(_, idx)| values[*idx]).collect();
            taus.push(tau);
            splines.push(CubicSpline::new(xs, ys)?);
        }
        Ok(Self {
            taus,
            splines,
            range: *lattice.range(),
        })
    }

    pub fn range(&self) -> &LatticeRange {
        &self.range
    }

    /// Interpolated value with first and second moneyness derivatives.
    pub fn eval(&self, tau: f64, m: f64) -> Result<InterpEval> {
        if !self.range.contains(tau, m) {
            return Err(Error::OutOfRange {
                context: "surface query".into(),
                tau,
                m,
            });
        }
        // Exact tenor match evaluates a single slice.
        if let Some(i) = self.taus.iter().position(|t| (t - tau).abs() < COORD_TOL) {
            let (value, d_m, d2_m) = self.eval_slice(i, m)?;
            return Ok(InterpEval { value, d_m, d2_m });
        }
        let hi = self
            .taus
            .iter()
            .position(|t| *t > tau)
            .ok_or(Error::OutOfRange {
                context: "surface query".into(),
                tau,
                m,
            })?;
        if hi == 0 {
            return Err(Error::OutOfRange {
                context: "surface query".into(),
                tau,
                m,
            });
        }
        let lo = hi - 1;
        let w = (self.taus[hi] - tau) / (self.taus[hi] - self.taus[lo]);
        let (v0, d0, dd0) = self.eval_slice(lo, m)?;
        let (v1, d1, dd1) = self.eval_slice(hi, m)?;
        Ok(InterpEval {
            value: w * v0 + (1.0 - w) * v1,
            d_m: w * d0 + (1.0 - w) * d1,
            d2_m: w * dd0 + (1.0 - w) * dd1,
        })
    }

    fn eval_slice(&self, i: usize, m: f64) -> Result<(f64, f64, f64)> {
        let sp = &self.splines[i];
        // Tolerate boundary queries that are inside the rectangle but land a
        // rounding error outside the slice's own knot span.
        let clamped = m.clamp(sp.x_min(), sp.x_max());
        if (clamped - m).abs() > COORD_TOL {
            return Err(Error::OutOfRange {
                context: format!("tenor slice tau={}", self.taus[i]),
                tau: self.taus[i],
                m,
            });
        }
        sp.eval(clamped)
    }
}

/// Convenience: build the interpolant of a snapshot's price surface.
pub fn interp_surface(lattice: &LiquidLattice, snapshot: &SurfaceSnapshot) -> Result<SurfaceInterp> {
    snapshot.validate(lattice)?;
    SurfaceInterp::new(lattice, &snapshot.prices)
}

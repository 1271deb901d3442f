//! Low-dimensional factor representation of normalized price surfaces.
//!
//! A history of surfaces is decomposed as `c_t = G0 + G' xi_t`: `G0` is the
//! time-mean surface and the rows of `G` are the leading right singular
//! vectors of the centered price matrix, so the rank-d reconstruction is
//! least-squares optimal. Factor realisations are the projections of the
//! centered surfaces onto the basis. Basis rows are interpolated with the
//! same scheme as price surfaces so that off-lattice exposures are
//! consistent with on-lattice ones.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arbitrage::FactorConstraintSystem;
use crate::error::{Error, Result};
use crate::surface::{LatticePoint, LiquidLattice, SurfaceInterp, SurfaceSnapshot};

/// Price basis `G0, G1..Gd` on a lattice, with smooth interpolants.
#[derive(Debug, Clone)]
pub struct FactorModel {
    lattice: LiquidLattice,
    g0: DVector<f64>,
    /// d x N basis matrix; rows are orthonormal.
    g: DMatrix<f64>,
    singular_values: Vec<f64>,
    /// Total centered variance (sum of all squared singular values).
    total_variance: f64,
    interp_g0: SurfaceInterp,
    interp_g: Vec<SurfaceInterp>,
}

/// Dated factor realisations.
#[derive(Debug, Clone)]
pub struct FactorPath {
    pub dates: Vec<NaiveDate>,
    /// T x d matrix of factor realisations.
    pub xi: DMatrix<f64>,
    /// Max-norm reconstruction residual per date.
    pub residuals: Vec<f64>,
}

impl FactorModel {
    pub fn d(&self) -> usize {
        self.g.nrows()
    }

    pub fn n(&self) -> usize {
        self.g.ncols()
    }

    pub fn lattice(&self) -> &LiquidLattice {
        &self.lattice
    }

    pub fn g0(&self) -> &DVector<f64> {
        &self.g0
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Fraction of centered variance captured by the model's d factors.
    pub fn explained_variance(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.singular_values.iter().map(|s| s * s).sum::<f64>() / self.total_variance
    }

    /// `G0 + G' xi` on the lattice.
    pub fn reconstruct(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if xi.len() != self.d() {
            return Err(Error::Dimension {
                context: "reconstruct".into(),
                expected: self.d(),
                got: xi.len(),
            });
        }
        Ok(&self.g0 + self.g.transpose() * xi)
    }

    /// Least-squares factor coordinates of a price vector: `G (c - G0)`.
    pub fn project(&self, prices: &[f64]) -> Result<DVector<f64>> {
        if prices.len() != self.n() {
            return Err(Error::Dimension {
                context: "project".into(),
                expected: self.n(),
                got: prices.len(),
            });
        }
        let c = DVector::from_column_slice(prices);
        Ok(&self.g * (c - &self.g0))
    }

    /// Interpolated mean surface with moneyness derivatives.
    pub fn g0_eval(&self, tau: f64, m: f64) -> Result<crate::surface::InterpEval> {
        self.interp_g0.eval(tau, m)
    }

    /// Interpolated basis function `G_j` (0-based factor index).
    pub fn g_eval(&self, j: usize, tau: f64, m: f64) -> Result<crate::surface::InterpEval> {
        if j >= self.d() {
            return Err(Error::Domain(format!(
                "factor index {j} out of range (d = {})",
                self.d()
            )));
        }
        self.interp_g[j].eval(tau, m)
    }

    /// Interpolated normalized price `G0 + sum_j G_j xi_j` off-lattice.
    pub fn price_eval(&self, xi: &DVector<f64>, tau: f64, m: f64) -> Result<crate::surface::InterpEval> {
        if xi.len() != self.d() {
            return Err(Error::Dimension {
                context: "price_eval".into(),
                expected: self.d(),
                got: xi.len(),
            });
        }
        let mut e = self.interp_g0.eval(tau, m)?;
        for j in 0..self.d() {
            let b = self.interp_g[j].eval(tau, m)?;
            e.value += xi[j] * b.value;
            e.d_m += xi[j] * b.d_m;
            e.d2_m += xi[j] * b.d2_m;
        }
        Ok(e)
    }

    /// Currency sensitivity of an option value to factor `j`: `S * G_j(tau, m)`.
    pub fn xi_exposure(&self, spot: f64, tau: f64, m: f64, j: usize) -> Result<f64> {
        Ok(spot * self.g_eval(j, tau, m)?.value)
    }
}

impl FactorPath {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn xi_at(&self, t: usize) -> DVector<f64> {
        self.xi.row(t).transpose()
    }

    /// Dates whose factors violate the projected constraint system. The
    /// constraint check flags rather than rejects: decoded training factors
    /// may sit slightly outside the polytope.
    pub fn violation_flags(&self, fcs: &FactorConstraintSystem) -> Result<Vec<bool>> {
        (0..self.len())
            .map(|t| Ok(!fcs.check(&self.xi_at(t))?.is_empty()))
            .collect()
    }

    pub fn to_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.xi.ncols();
        let mut header = vec!["date".to_string()];
        header.extend((1..=d).map(|j| format!("xi{j}")));
        wtr.write_record(&header)?;
        for (t, date) in self.dates.iter().enumerate() {
            let mut rec = vec![date.to_string()];
            rec.extend((0..d).map(|j| format!("{:.17e}", self.xi[(t, j)])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn from_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let d = rdr.headers()?.len().saturating_sub(1);
        if d == 0 {
            return Err(Error::Validation("factor path csv has no factor columns".into()));
        }
        let mut dates = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let date: NaiveDate = rec[0].parse().map_err(|e| Error::Parse {
                line: i + 2,
                msg: format!("bad date: {e}"),
            })?;
            dates.push(date);
            for j in 0..d {
                let v: f64 = rec[j + 1].parse().map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: format!("bad xi{}: {e}", j + 1),
                })?;
                rows.push(v);
            }
        }
        let t = dates.len();
        Ok(Self {
            dates,
            xi: DMatrix::from_row_slice(t, d, &rows),
            residuals: vec![0.0; t],
        })
    }
}

/// Decode a rank-d factor model and factor path from a surface history.
pub fn decode_factors(
    lattice: &LiquidLattice,
    history: &[SurfaceSnapshot],
    d: usize,
) -> Result<(FactorModel, FactorPath)> {
    if d == 0 {
        return Err(Error::Config("factor count d must be >= 1".into()));
    }
    if history.len() < d + 1 {
        return Err(Error::InsufficientData(format!(
            "need at least {} snapshots to decode {} factors, got {}",
            d + 1,
            d,
            history.len()
        )));
    }
    let n = lattice.len();
    for snap in history {
        if snap.prices.len() != n {
            return Err(Error::Dimension {
                context: format!("snapshot {}", snap.date),
                expected: n,
                got: snap.prices.len(),
            });
        }
    }
    let t = history.len();
    let mut x = DMatrix::zeros(t, n);
    for (i, snap) in history.iter().enumerate() {
        for (j, v) in snap.prices.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let g0 = x.row_mean().transpose();
    let mut xc = x;
    for i in 0..t {
        for j in 0..n {
            xc[(i, j)] -= g0[j];
        }
    }
    let total_variance = xc.iter().map(|v| v * v).sum::<f64>();

    let svd = nalgebra::SVD::new(xc.clone(), true, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numerical("svd failed to produce right singular vectors".into()))?;
    if v_t.nrows() < d {
        return Err(Error::InsufficientData(format!(
            "history supports only {} singular directions, need {}",
            v_t.nrows(),
            d
        )));
    }
    let mut g = v_t.rows(0, d).into_owned();
    let singular_values: Vec<f64> = svd.singular_values.iter().take(d).copied().collect();

    // Fix the PCA sign ambiguity so hedge ratios are reproducible:
    // G1 points "up" on short-dated near-the-money prices (xi_1 then rises
    // with the overall price level, i.e. behaves like a volatility level);
    // the remaining rows get a positive leading entry.
    let taus = lattice.taus();
    let tau_mid = taus[taus.len() / 2];
    let atm_short: Vec<usize> = lattice
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.m.abs() <= 0.1 + 1e-12 && p.tau <= tau_mid + 1e-12)
        .map(|(j, _)| j)
        .collect();
    let mut flips = vec![false; d];
    let score: f64 = atm_short.iter().map(|&j| g[(0, j)]).sum();
    if score < 0.0 {
        flips[0] = true;
    }
    for i in 1..d {
        if let Some(j) = (0..n).find(|&j| g[(i, j)].abs() > 1e-12) {
            if g[(i, j)] < 0.0 {
                flips[i] = true;
            }
        }
    }
    for (i, flip) in flips.iter().enumerate() {
        if *flip {
            for j in 0..n {
                g[(i, j)] = -g[(i, j)];
            }
        }
    }

    let xi = &xc * g.transpose();
    let recon = &xi * &g;
    let mut residuals = Vec::with_capacity(t);
    for i in 0..t {
        let mut worst: f64 = 0.0;
        for j in 0..n {
            worst = worst.max((xc[(i, j)] - recon[(i, j)]).abs());
        }
        residuals.push(worst);
    }

    let interp_g0 = SurfaceInterp::new(lattice, g0.as_slice())?;
    let mut interp_g = Vec::with_capacity(d);
    for i in 0..d {
        let row: Vec<f64> = g.row(i).iter().copied().collect();
        interp_g.push(SurfaceInterp::new(lattice, &row)?);
    }

    let model = FactorModel {
        lattice: lattice.clone(),
        g0,
        g,
        singular_values,
        total_variance,
        interp_g0,
        interp_g,
    };
    let path = FactorPath {
        dates: history.iter().map(|s| s.date).collect(),
        xi,
        residuals,
    };
    Ok((model, path))
}

// --- JSON serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FactorModelDto {
    version: u32,
    lattice_hash: String,
    lattice: Vec<LatticePoint>,
    g0: Vec<f64>,
    g: Vec<Vec<f64>>,
    singular_values: Vec<f64>,
    total_variance: f64,
}

impl FactorModel {
    pub fn to_json(&self) -> Result<String> {
        let dto = FactorModelDto {
            version: 1,
            lattice_hash: self.lattice.hash(),
            lattice: self.lattice.points().to_vec(),
            g0: self.g0.iter().copied().collect(),
            g: (0..self.d())
                .map(|i| self.g.row(i).iter().copied().collect())
                .collect(),
            singular_values: self.singular_values.clone(),
            total_variance: self.total_variance,
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: FactorModelDto = serde_json::from_str(text)?;
        if dto.version != 1 {
            return Err(Error::Validation(format!(
                "unsupported factor model version {}",
                dto.version
            )));
        }
        let lattice = LiquidLattice::new(dto.lattice)?;
        if lattice.hash() != dto.lattice_hash {
            return Err(Error::Validation(
                "factor model lattice hash mismatch".into(),
            ));
        }
        let n = lattice.len();
        let d = dto.g.len();
        if dto.g0.len() != n {
            return Err(Error::Dimension {
                context: "factor model g0".into(),
                expected: n,
                got: dto.g0.len(),
            });
        }
        let g0 = DVector::from_vec(dto.g0);
        let mut g = DMatrix::zeros(d, n);
        for (i, row) in dto.g.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    context: format!("factor model g row {i}"),
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                g[(i, j)] = *v;
            }
        }
        let interp_g0 = SurfaceInterp::new(&lattice, g0.as_slice())?;
        let mut interp_g = Vec::with_capacity(d);
        for i in 0..d {
            let row: Vec<f64> = g.row(i).iter().copied().collect();
            interp_g.push(SurfaceInterp::new(&lattice, &row)?);
        }
        Ok(Self {
            lattice,
            g0,
            g,
            singular_values: dto.singular_values,
            total_variance: dto.total_variance,
            interp_g0,
            interp_g,
        })
    }
}

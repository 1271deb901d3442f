//! Static-arbitrage constraint systems on a liquid lattice.
//!
//! Absence of static arbitrage among calls on a lattice is a system of
//! linear inequalities `A c >= b_hat` in normalized price space: outright
//! bounds, vertical-spread monotonicity (price slope in strike within
//! [-1, 0]), butterfly convexity in strike per tenor, and calendar
//! monotonicity in tenor at fixed moneyness (valid under zero rates).
//! Substituting the linear factor representation `c = G0 + G' xi` projects
//! the system to factor space, `M xi >= b`, where redundant rows are
//! eliminated by per-row linear programs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};
use crate::surface::LiquidLattice;

/// Feasibility tolerance for double-precision products on systems of this size.
pub const FEAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    OutrightLower,
    OutrightUpper,
    Vertical,
    Butterfly,
    Calendar,
}

/// Linear inequality system `A c >= b_hat` in normalized price space.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    /// R x N coefficient matrix; one row per constraint.
    pub a: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub labels: Vec<ConstraintKind>,
    /// Families that could not be built because the lattice is too sparse.
    pub omitted_families: Vec<ConstraintKind>,
    pub lattice_hash: String,
}

/// The same constraints pushed to factor space: `M xi >= b`.
#[derive(Debug, Clone)]
pub struct FactorConstraintSystem {
    /// R' x d matrix, rows of `A G'`.
    pub m: DMatrix<f64>,
    /// `b_hat - A G0`.
    pub b: DVector<f64>,
    /// Row indices into the source [`ConstraintSystem`].
    pub provenance: Vec<usize>,
    pub labels: Vec<ConstraintKind>,
}

/// One violated constraint row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Row index in the checked system.
    pub row: usize,
    /// Row index in the original price-space system.
    pub source_row: usize,
    pub magnitude: f64,
}

/// Build the static-arbitrage system for a lattice.
///
/// A constraint family whose lattice support is too sparse (e.g. calendar
/// rows when no moneyness is shared between adjacent tenors) is omitted and
/// flagged in `omitted_families` instead of failing the build.
pub fn build_constraints(lattice: &LiquidLattice) -> ConstraintSystem {
    let n = lattice.len();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut labels: Vec<ConstraintKind> = Vec::new();

    // Outright bounds: c >= max(1 - e^m, 0) and c <= 1.
    for (j, p) in lattice.points().iter().enumerate() {
        rows.push(vec![(j, 1.0)]);
        rhs.push((1.0 - p.m.exp()).max(0.0));
        labels.push(ConstraintKind::OutrightLower);
        rows.push(vec![(j, -1.0)]);
        rhs.push(-1.0);
        labels.push(ConstraintKind::OutrightUpper);
    }

    let mut saw_vertical = false;
    let mut saw_butterfly = false;
    for s in 0..lattice.n_slices() {
        let (_, ms) = lattice.slice(s);
        // Vertical spreads: for adjacent strikes K1 < K2,
        // 0 >= (C2 - C1)/(K2 - K1) >= -1, two rows per pair.
        for w in ms.windows(2) {
            let (m1, j1) = w[0];
            let (m2, j2) = w[1];
            rows.push(vec![(j1, 1.0), (j2, -1.0)]);
            rhs.push(0.0);
            labels.push(ConstraintKind::Vertical);
            rows.push(vec![(j1, -1.0), (j2, 1.0)]);
            rhs.push(-(m2.exp() - m1.exp()));
            labels.push(ConstraintKind::Vertical);
            saw_vertical = true;
        }
        // Butterfly convexity in strike on consecutive triples.
        for w in ms.windows(3) {
            let (m1, j1) = w[0];
            let (m2, j2) = w[1];
            let (m3, j3) = w[2];
            let (k1, k2, k3) = (m1.exp(), m2.exp(), m3.exp());
            rows.push(vec![(j1, k3 - k2), (j2, -(k3 - k1)), (j3, k2 - k1)]);
            rhs.push(0.0);
            labels.push(ConstraintKind::Butterfly);
            saw_butterfly = true;
        }
    }

    // Calendar: price non-decreasing in tenor at fixed moneyness.
    let mut saw_calendar = false;
    for s in 0..lattice.n_slices().saturating_sub(1) {
        let (_, ms_lo) = lattice.slice(s);
        let (_, ms_hi) = lattice.slice(s + 1);
        for &(m_lo, j_lo) in ms_lo {
            if let Some(&(_, j_hi)) = ms_hi.iter().find(|(m, _)| (m - m_lo).abs() < 1e-9) {
                rows.push(vec![(j_hi, 1.0), (j_lo, -1.0)]);
                rhs.push(0.0);
                labels.push(ConstraintKind::Calendar);
                saw_calendar = true;
            }
        }
    }

    let mut omitted = Vec::new();
    if !saw_vertical {
        omitted.push(ConstraintKind::Vertical);
    }
    if !saw_butterfly {
        omitted.push(ConstraintKind::Butterfly);
    }
    if !saw_calendar {
        omitted.push(ConstraintKind::Calendar);
    }

    let r = rows.len();
    let mut a = DMatrix::zeros(r, n);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            a[(i, j)] = v;
        }
    }
    ConstraintSystem {
        a,
        b_hat: DVector::from_vec(rhs),
        labels,
        omitted_families: omitted,
        lattice_hash: lattice.hash(),
    }
}

impl ConstraintSystem {
    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    /// Slack vector `A c - b_hat` for a price vector.
    pub fn slack(&self, prices: &[f64]) -> Result<DVector<f64>> {
        if prices.len() != self.a.ncols() {
            return Err(Error::Dimension {
                context: "constraint slack".into(),
                expected: self.a.ncols(),
                got: prices.len(),
            });
        }
        let c = DVector::from_column_slice(prices);
        Ok(&self.a * c - &self.b_hat)
    }

    /// Rows violated beyond `FEAS_TOL` by a price vector.
    pub fn violations(&self, prices: &[f64]) -> Result<Vec<Violation>> {
        let s = self.slack(prices)?;
        Ok((0..s.len())
            .filter(|&i| s[i] < -FEAS_TOL)
            .map(|i| Violation {
                row: i,
                source_row: i,
                magnitude: -s[i],
            })
            .collect())
    }
}

/// Project a price-space system through the factor representation.
///
/// `g0` is the mean surface on the lattice, `g` the d x N basis matrix.
/// A factor point satisfies `M xi >= b` iff the reconstructed price vector
/// satisfies `A c >= b_hat`.
pub fn project_constraints(
    cs: &ConstraintSystem,
    g0: &DVector<f64>,
    g: &DMatrix<f64>,
) -> Result<FactorConstraintSystem> {
    let n = cs.a.ncols();
    if g0.len() != n {
        return Err(Error::Dimension {
            context: "project_constraints g0".into(),
            expected: n,
            got: g0.len(),
        });
    }
    if g.ncols() != n {
        return Err(Error::Dimension {
            context: "project_constraints g".into(),
            expected: n,
            got: g.ncols(),
        });
    }
    let m = &cs.a * g.transpose();
    let b = &cs.b_hat - &cs.a * g0;
    Ok(FactorConstraintSystem {
        m,
        b,
        provenance: (0..cs.n_rows()).collect(),
        labels: cs.labels.clone(),
    })
}

impl FactorConstraintSystem {
    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_feasible(&self, xi: &DVector<f64>) -> bool {
        self.check(xi).map(|v| v.is_empty()).unwrap_or(false)
    }

    /// Rows where `M xi - b < -FEAS_TOL`, with magnitudes.
    pub fn check(&self, xi: &DVector<f64>) -> Result<Vec<Violation>> {
        if xi.len() != self.dim() {
            return Err(Error::Dimension {
                context: "factor constraint check".into(),
                expected: self.dim(),
                got: xi.len(),
            });
        }
        let s = &self.m * xi - &self.b;
        Ok((0..s.len())
            .filter(|&i| s[i] < -FEAS_TOL)
            .map(|i| Violation {
                row: i,
                source_row: self.provenance[i],
                magnitude: -s[i],
            })
            .collect())
    }

    /// A point well inside the feasible region (Chebyshev center, radius
    /// capped so unbounded regions still give a finite point).
    pub fn interior_point(&self) -> Result<DVector<f64>> {
        let (x, r) = lp::chebyshev_center(&self.m, &self.b, 1e6)?;
        if r <= 0.0 {
            return Err(Error::Infeasible {
                certificate: Vec::new(),
            });
        }
        Ok(x)
    }
}

/// Indices and magnitudes of violated rows for a factor point.
pub fn check_arbitrage_free(fcs: &FactorConstraintSystem, xi: &DVector<f64>) -> Result<Vec<Violation>> {
    fcs.check(xi)
}

/// Drop rows that do not shape the feasible region.
///
/// Each candidate row is certified redundant by an LP: maximize its
/// violation `b_i - M_i x` subject to the remaining rows (plus a relaxed
/// copy of itself to keep the LP bounded); a non-positive optimum proves the
/// remaining rows already imply it. Rows certified redundant are removed
/// from the working set immediately, so the result is a minimal subsystem
/// with an identical feasible region.
pub fn eliminate_redundant(fcs: &FactorConstraintSystem) -> Result<FactorConstraintSystem> {
    let r = fcs.n_rows();
    let d = fcs.dim();

    match lp::feasibility(&fcs.m, &fcs.b)? {
        Ok(()) => {}
        Err(certificate) => return Err(Error::Infeasible { certificate }),
    }

    let mut kept: Vec<usize> = (0..r).collect();
    for i in 0..r {
        let others: Vec<usize> = kept.iter().copied().filter(|&k| k != i).collect();
        if others.is_empty() {
            continue;
        }
        // Constraint stack: the other kept rows, then the relaxed row i.
        let mut a = DMatrix::zeros(others.len() + 1, d);
        let mut b = DVector::zeros(others.len() + 1);
        for (row, &k) in others.iter().enumerate() {
            for j in 0..d {
                a[(row, j)] = fcs.m[(k, j)];
            }
            b[row] = fcs.b[k];
        }
        let row_norm = fcs.m.row(i).norm().max(1e-300);
        for j in 0..d {
            a[(others.len(), j)] = fcs.m[(i, j)];
        }
        b[others.len()] = fcs.b[i] - row_norm;

        let c = DVector::from_iterator(d, (0..d).map(|j| -fcs.m[(i, j)]));
        let outcome = lp::maximize(&c, &a, &b)?;
        let max_violation = match outcome {
            LpOutcome::Optimal { value, .. } => value + fcs.b[i],
            LpOutcome::Unbounded => f64::INFINITY,
            LpOutcome::Infeasible { certificate } => {
                return Err(Error::Infeasible { certificate });
            }
        };
        if max_violation <= 1e-9 * row_norm.max(1.0) {
            kept.retain(|&k| k != i);
        }
    }

    let mut m = DMatrix::zeros(kept.len(), d);
    let mut b = DVector::zeros(kept.len());
    let mut provenance = Vec::with_capacity(kept.len());
    let mut labels = Vec::with_capacity(kept.len());
    for (row, &k) in kept.iter().enumerate() {
        for j in 0..d {
            m[(row, j)] = fcs.m[(k, j)];
        }
        b[row] = fcs.b[k];
        provenance.push(fcs.provenance[k]);
        labels.push(fcs.labels[k]);
    }
    Ok(FactorConstraintSystem {
        m,
        b,
        provenance,
        labels,
    })
}

// --- JSON serialization -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RowDto {
    label: ConstraintKind,
    coeffs: Vec<f64>,
    rhs: f64,
}

#[derive(Serialize, Deserialize)]
struct SystemDto {
    rows: Vec<RowDto>,
    lattice_hash: String,
    #[serde(default)]
    omitted_families: Vec<ConstraintKind>,
}

impl ConstraintSystem {
    pub fn to_json(&self) -> Result<String> {
        let dto = SystemDto {
            rows: (0..self.n_rows())
                .map(|i| RowDto {
                    label: self.labels[i],
                    coeffs: self.a.row(i).iter().copied().collect(),
                    rhs: self.b_hat[i],
                })
                .collect(),
            lattice_hash: self.lattice_hash.clone(),
            omitted_families: self.omitted_families.clone(),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: SystemDto = serde_json::from_str(text)?;
        if dto.rows.is_empty() {
            return Err(Error::Validation("constraint system has no rows".into()));
        }
        let n = dto.rows[0].coeffs.len();
        let mut a = DMatrix::zeros(dto.rows.len(), n);
        let mut b = DVector::zeros(dto.rows.len());
        let mut labels = Vec::with_capacity(dto.rows.len());
        for (i, row) in dto.rows.iter().enumerate() {
            if row.coeffs.len() != n {
                return Err(Error::Validation(format!("ragged coeffs at row {i}")));
            }
            for (j, v) in row.coeffs.iter().enumerate() {
                a[(i, j)] = *v;
            }
            b[i] = row.rhs;
            labels.push(row.label);
        }
        Ok(Self {
            a,
            b_hat: b,
            labels,
            omitted_families: dto.omitted_families,
            lattice_hash: dto.lattice_hash,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FactorRowDto {
    label: ConstraintKind,
    coeffs: Vec<f64>,
    rhs: f64,
    source_row: usize,
}

#[derive(Serialize, Deserialize)]
struct FactorSystemDto {
    rows: Vec<FactorRowDto>,
    lattice_hash: String,
}

impl FactorConstraintSystem {
    pub fn to_json(&self, lattice_hash: &str) -> Result<String> {
        let dto = FactorSystemDto {
            rows: (0..self.n_rows())
                .map(|i| FactorRowDto {
                    label: self.labels[i],
                    coeffs: self.m.row(i).iter().copied().collect(),
                    rhs: self.b[i],
                    source_row: self.provenance[i],
                })
                .collect(),
            lattice_hash: lattice_hash.to_string(),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let dto: FactorSystemDto = serde_json::from_str(text)?;
        if dto.rows.is_empty() {
            return Err(Error::Validation("factor system has no rows".into()));
        }
        let d = dto.rows[0].coeffs.len();
        let mut m = DMatrix::zeros(dto.rows.len(), d);
        let mut b = DVector::zeros(dto.rows.len());
        let mut provenance = Vec::new();
        let mut labels = Vec::new();
        for (i, row) in dto.rows.iter().enumerate() {
            for (j, v) in row.coeffs.iter().enumerate() {
                m[(i, j)] = *v;
            }
            b[i] = row.rhs;
            provenance.push(row.source_row);
            labels.push(row.label);
        }
        Ok((
            Self {
                m,
                b,
                provenance,
                labels,
            },
            dto.lattice_hash,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::LiquidLattice;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_lattice() -> LiquidLattice {
        LiquidLattice::regular(&[0.25, 0.5], &[-0.1, 0.0, 0.1]).unwrap()
    }

    fn count(cs: &ConstraintSystem, kind: ConstraintKind) -> usize {
        cs.labels.iter().filter(|&&k| k == kind).count()
    }

    #[test]
    fn family_counts_on_2x3_lattice() {
        let cs = build_constraints(&small_lattice());
        // 2 tenors x 2 adjacent-m pairs x 2 rows each.
        assert_eq!(count(&cs, ConstraintKind::Vertical), 8);
        assert_eq!(count(&cs, ConstraintKind::Butterfly), 2);
        assert_eq!(count(&cs, ConstraintKind::Calendar), 3);
        assert_eq!(count(&cs, ConstraintKind::OutrightLower), 6);
        assert_eq!(count(&cs, ConstraintKind::OutrightUpper), 6);
        assert!(cs.omitted_families.is_empty());
    }

    #[test]
    fn calendar_family_omitted_when_no_shared_moneyness() {
        let pts = vec![
            (0.25, -0.1),
            (0.25, 0.0),
            (0.25, 0.1),
            (0.5, -0.05),
            (0.5, 0.05),
            (0.5, 0.15),
        ];
        let lat = LiquidLattice::new(
            pts.iter()
                .map(|&(tau, m)| crate::surface::LatticePoint { tau, m })
                .collect(),
        )
        .unwrap();
        let cs = build_constraints(&lat);
        assert_eq!(count(&cs, ConstraintKind::Calendar), 0);
        assert!(cs.omitted_families.contains(&ConstraintKind::Calendar));
    }

    #[test]
    fn intrinsic_surface_is_boundary_feasible() {
        let lat = small_lattice();
        let cs = build_constraints(&lat);
        let prices: Vec<f64> = lat
            .points()
            .iter()
            .map(|p| (1.0 - p.m.exp()).max(0.0))
            .collect();
        let slack = cs.slack(&prices).unwrap();
        assert!(slack.iter().all(|&s| s >= -1e-12), "min slack {}", slack.min());
    }

    /// Brute-force payoff-dominance oracle: a butterfly of calls has a
    /// nonnegative payoff, so its price must be nonnegative.
    fn butterfly_payoff_ok(k: [f64; 3], prices: [f64; 3]) -> bool {
        let w = [k[2] - k[1], -(k[2] - k[0]), k[1] - k[0]];
        let price: f64 = (0..3).map(|i| w[i] * prices[i]).sum();
        // payoff check (sanity that the weights form a butterfly):
        for s in 0..200 {
            let st = 0.5 + 0.005 * s as f64;
            let payoff: f64 = (0..3).map(|i| w[i] * (st - k[i]).max(0.0)).sum();
            assert!(payoff >= -1e-12);
        }
        price >= 0.0
    }

    #[test]
    fn injected_butterfly_violation_is_attributed() {
        let lat = small_lattice();
        let cs = build_constraints(&lat);
        // Base surface with enough vertical/calendar slack that a small
        // convexity break fires only its own butterfly row.
        let mut prices: Vec<f64> = lat
            .points()
            .iter()
            .map(|p| (1.0 - p.m.exp()).max(0.0) * 0.8 + 0.05 + 0.3 * p.tau)
            .collect();
        assert!(cs.violations(&prices).unwrap().is_empty());
        // Raise the mid strike of the first tenor slice above the linear
        // interpolation of its neighbours (in strike space).
        let (_, ms) = lat.slice(0);
        let (m1, j1) = ms[0];
        let (m2, j2) = ms[1];
        let (m3, j3) = ms[2];
        let (k1, k2, k3) = (m1.exp(), m2.exp(), m3.exp());
        let lin = prices[j1] + (prices[j3] - prices[j1]) * (k2 - k1) / (k3 - k1);
        prices[j2] = lin + 0.004;
        assert!(!butterfly_payoff_ok(
            [k1, k2, k3],
            [prices[j1], prices[j2], prices[j3]]
        ));
        let violations = cs.violations(&prices).unwrap();
        assert_eq!(violations.len(), 1, "{violations:?}");
        assert_eq!(cs.labels[violations[0].row], ConstraintKind::Butterfly);
        // It is the first slice's butterfly: its row involves j1, j2, j3.
        let row = violations[0].row;
        assert!(cs.a[(row, j2)] < 0.0 && cs.a[(row, j1)] > 0.0 && cs.a[(row, j3)] > 0.0);
    }

    fn random_projection_setup(
        rng: &mut ChaCha8Rng,
        r: usize,
        n: usize,
        d: usize,
    ) -> (ConstraintSystem, DVector<f64>, DMatrix<f64>) {
        let a = DMatrix::from_fn(r, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(r, |_, _| rng.gen_range(-1.0..1.0));
        let g0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let g = DMatrix::from_fn(d, n, |_, _| rng.gen_range(-1.0..1.0));
        let cs = ConstraintSystem {
            a,
            b_hat: b,
            labels: vec![ConstraintKind::Vertical; r],
            omitted_families: vec![],
            lattice_hash: "test".into(),
        };
        (cs, g0, g)
    }

    #[test]
    fn projection_matches_matrix_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cs, g0, g) = random_projection_setup(&mut rng, 12, 9, 3);
        let fcs = project_constraints(&cs, &g0, &g).unwrap();
        for _ in 0..100 {
            let xi = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let c = &g0 + g.transpose() * &xi;
            let lhs = &cs.a * c - &cs.b_hat;
            let rhs = &fcs.m * &xi - &fcs.b;
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn projection_equivalence_sign_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (cs, g0, g) = random_projection_setup(&mut rng, 20, 14, 2);
        let fcs = project_constraints(&cs, &g0, &g).unwrap();
        for _ in 0..1000 {
            let xi = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let c = &g0 + g.transpose() * &xi;
            let price_min = (&cs.a * c - &cs.b_hat).min();
            let factor_min = (&fcs.m * &xi - &fcs.b).min();
            assert_eq!(price_min.signum(), factor_min.signum());
        }
    }

    #[test]
    fn zero_factor_point_reduces_to_g0_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cs, g0, g) = random_projection_setup(&mut rng, 15, 10, 2);
        let fcs = project_constraints(&cs, &g0, &g).unwrap();
        let zero = DVector::zeros(2);
        let feasible_factor = fcs.check(&zero).unwrap().is_empty();
        let slack = &cs.a * &g0 - &cs.b_hat;
        let feasible_price = slack.min() >= -FEAS_TOL;
        assert_eq!(feasible_factor, feasible_price);
    }

    #[test]
    fn single_row_projection_shape() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let cs = ConstraintSystem {
            a,
            b_hat: DVector::from_vec(vec![0.5]),
            labels: vec![ConstraintKind::Vertical],
            omitted_families: vec![],
            lattice_hash: "test".into(),
        };
        let g0 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let fcs = project_constraints(&cs, &g0, &g).unwrap();
        assert_eq!(fcs.m.shape(), (1, 2));
        assert!((fcs.m[(0, 0)] - 4.0).abs() < 1e-15); // A . G1
        assert!((fcs.m[(0, 1)] - 2.0).abs() < 1e-15); // A . G2
    }

    fn box_system() -> FactorConstraintSystem {
        // x >= 0, x <= 1, y >= 0, y <= 1 plus redundant x + y <= 3.
        let m = DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, -1.0],
        );
        let b = DVector::from_vec(vec![0.0, -1.0, 0.0, -1.0, -3.0]);
        FactorConstraintSystem {
            m,
            b,
            provenance: (0..5).collect(),
            labels: vec![ConstraintKind::Vertical; 5],
        }
    }

    #[test]
    fn redundant_box_row_is_removed() {
        let reduced = eliminate_redundant(&box_system()).unwrap();
        assert_eq!(reduced.n_rows(), 4);
        assert!(!reduced.provenance.contains(&4));
    }

    #[test]
    fn duplicated_row_is_removed() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let fcs = FactorConstraintSystem {
            m,
            b,
            provenance: vec![0, 1, 2],
            labels: vec![ConstraintKind::Vertical; 3],
        };
        let reduced = eliminate_redundant(&fcs).unwrap();
        assert_eq!(reduced.n_rows(), 2);
    }

    #[test]
    fn elimination_preserves_membership() {
        let fcs = box_system();
        let reduced = eliminate_redundant(&fcs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let xi = DVector::from_fn(2, |_, _| rng.gen_range(-1.5..2.5));
            let before = fcs.check(&xi).unwrap().is_empty();
            let after = reduced.check(&xi).unwrap().is_empty();
            assert_eq!(before, after, "membership changed at {xi:?}");
        }
    }

    #[test]
    fn infeasible_system_yields_certificate() {
        let m = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let fcs = FactorConstraintSystem {
            m,
            b,
            provenance: vec![0, 1],
            labels: vec![ConstraintKind::Vertical; 2],
        };
        match eliminate_redundant(&fcs) {
            Err(Error::Infeasible { certificate }) => assert_eq!(certificate, vec![0, 1]),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn check_interior_boundary_and_violation() {
        let fcs = box_system();
        let interior = DVector::from_vec(vec![0.5, 0.5]);
        assert!(check_arbitrage_free(&fcs, &interior).unwrap().is_empty());

        // One row active: non-strict inequality passes.
        let boundary = DVector::from_vec(vec![0.0, 0.5]);
        assert!(check_arbitrage_free(&fcs, &boundary).unwrap().is_empty());

        // Step outward along row 0's unit normal by 0.1.
        let outside = DVector::from_vec(vec![-0.1, 0.5]);
        let v = check_arbitrage_free(&fcs, &outside).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].row, 0);
        assert!((v[0].magnitude - 0.1).abs() < 1e-12);
    }

    #[test]
    fn interior_point_is_feasible_with_margin() {
        let fcs = box_system();
        let x = fcs.interior_point().unwrap();
        let slack = &fcs.m * &x - &fcs.b;
        assert!(slack.min() > 0.1);
    }

    #[test]
    fn json_round_trip() {
        let cs = build_constraints(&small_lattice());
        let text = cs.to_json().unwrap();
        let back = ConstraintSystem::from_json(&text).unwrap();
        assert_eq!(back.n_rows(), cs.n_rows());
        assert_eq!(back.lattice_hash, cs.lattice_hash);
        assert!((back.a.clone() - cs.a.clone()).amax() < 1e-15);
        assert_eq!(back.labels, cs.labels);
    }
}

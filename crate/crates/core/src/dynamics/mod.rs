//! Factor dynamics: an SDE for (ln S, xi) with network drift and diffusion.
//!
//! The diffusion matrix is lower triangular with a softplus diagonal, so the
//! instantaneous covariance is positive definite by construction. Estimation
//! minimizes the Euler-scheme Gaussian quasi-log-likelihood of observed
//! one-step transitions plus a hinge penalty that keeps one-step conditional
//! means inside the no-arbitrage polytope. Gradients are computed
//! analytically (backprop through the triangular solve), training is
//! full-batch with momentum and a deterministic step-halving safeguard, so
//! identical seeds give bit-identical parameters. Simulation uses a tamed
//! Euler scheme with reflection at the polytope boundary and either Gaussian
//! or residual-bootstrap innovations.

mod mlp;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arbitrage::{FactorConstraintSystem, FEAS_TOL};
use crate::error::{Error, Result};
pub use mlp::Mlp;
use mlp::MlpGrad;

/// Trading-day time step in years.
pub const TRADING_DT: f64 = 1.0 / 252.0;

/// Joint state history: column 0 is ln S, the rest are the factors.
#[derive(Debug, Clone)]
pub struct SdeTrainingData {
    pub states: DMatrix<f64>,
    pub dt: f64,
}

impl SdeTrainingData {
    pub fn new(states: DMatrix<f64>, dt: f64) -> Result<Self> {
        if states.nrows() < 2 || states.ncols() < 2 {
            return Err(Error::InsufficientData(
                "state history needs at least 2 rows and 2 columns".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite state history".into()));
        }
        Ok(Self { states, dt })
    }

    /// Assemble from a log-spot series and a factor path.
    pub fn from_components(ln_spot: &[f64], xi: &DMatrix<f64>, dt: f64) -> Result<Self> {
        if ln_spot.len() != xi.nrows() {
            return Err(Error::Dimension {
                context: "sde training data".into(),
                expected: xi.nrows(),
                got: ln_spot.len(),
            });
        }
        let t = ln_spot.len();
        let d = xi.ncols();
        let mut states = DMatrix::zeros(t, d + 1);
        for i in 0..t {
            states[(i, 0)] = ln_spot[i];
            for j in 0..d {
                states[(i, j + 1)] = xi[(i, j)];
            }
        }
        Self::new(states, dt)
    }

    pub fn n_transitions(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

/// Standardized one-step model residuals, one row per transition.
#[derive(Debug, Clone)]
pub struct ResidualSeries {
    pub eps: DMatrix<f64>,
}

/// Innovation source for simulation.
pub enum SimMode<'a> {
    Gaussian,
    Bootstrap(&'a ResidualSeries),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Hinge penalty weight on constraint violations of one-step means.
    /// A calibration knob, not a literature value.
    pub penalty_weight: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub min_length: usize,
    pub hidden: usize,
    pub seed: u64,
    pub dt: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            learning_rate: 0.02,
            momentum: 0.9,
            penalty_weight: 100.0,
            val_fraction: 0.2,
            patience: 200,
            min_length: 64,
            hidden: 32,
            seed: 0,
            dt: TRADING_DT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub best_epoch: usize,
    pub final_learning_rate: f64,
}

/// The estimated SDE model for (ln S, xi).
#[derive(Debug, Clone)]
pub struct NeuralSde {
    d: usize,
    drift_net: Mlp,
    diff_net: Mlp,
    constraints: FactorConstraintSystem,
    interior: Option<DVector<f64>>,
    seed: u64,
    dt: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().max(1e-300).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Initial output-layer moments: constant drift and a Cholesky factor of the
/// one-step covariance, both in annualized units.
#[derive(Debug, Clone)]
pub struct InitialMoments {
    pub drift: Vec<f64>,
    /// Lower-triangular, row-major, length dim*(dim+1)/2.
    pub chol: Vec<f64>,
}

impl NeuralSde {
    /// Build an untrained model: hidden layers seeded, output layers zero
    /// except for biases that reproduce the given constant moments. With
    /// zero output weights the drift is exactly `moments.drift` and the
    /// diffusion is the constant triangle encoded by `moments.chol`.
    pub fn with_initial_moments(
        d: usize,
        hidden: usize,
        constraints: FactorConstraintSystem,
        seed: u64,
        dt: f64,
        in_mean: Vec<f64>,
        in_scale: Vec<f64>,
        moments: &InitialMoments,
    ) -> Result<Self> {
        let dim = d + 1;
        if constraints.n_rows() > 0 && constraints.dim() != d {
            return Err(Error::Dimension {
                context: "neural sde constraints".into(),
                expected: d,
                got: constraints.dim(),
            });
        }
        if moments.drift.len() != dim || moments.chol.len() != tri_len(dim) {
            return Err(Error::Dimension {
                context: "initial moments".into(),
                expected: dim,
                got: moments.drift.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drift_net = Mlp::new(d, hidden, dim, in_mean.clone(), in_scale.clone(), &mut rng);
        let mut diff_net = Mlp::new(d, hidden, tri_len(dim), in_mean, in_scale, &mut rng);
        drift_net.b3.copy_from_slice(&moments.drift);
        for i in 0..dim {
            for j in 0..=i {
                let pos = tri_len(i) + j;
                diff_net.b3[pos] = if i == j {
                    softplus_inv(moments.chol[pos].max(1e-30))
                } else {
                    moments.chol[pos]
                };
            }
        }
        let interior = if constraints.n_rows() > 0 {
            Some(constraints.interior_point()?)
        } else {
            None
        };
        Ok(Self {
            d,
            drift_net,
            diff_net,
            constraints,
            interior,
            seed,
            dt,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.d + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn constraints(&self) -> &FactorConstraintSystem {
        &self.constraints
    }

    /// Drift vector and lower-triangular diffusion at a factor point.
    pub fn drift_diffusion(&self, xi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if xi.len() != self.d {
            return Err(Error::Dimension {
                context: "drift_diffusion".into(),
                expected: self.d,
                got: xi.len(),
            });
        }
        let x: Vec<f64> = xi.iter().copied().collect();
        let (mu_raw, _) = self.drift_net.forward(&x);
        let (sig_raw, _) = self.diff_net.forward(&x);
        let dim = self.dim();
        let mut sigma = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let pos = tri_len(i) + j;
                sigma[(i, j)] = if i == j {
                    softplus(sig_raw[pos])
                } else {
                    sig_raw[pos]
                };
            }
        }
        Ok((DVector::from_vec(mu_raw), sigma))
    }

    pub fn n_params(&self) -> usize {
        self.drift_net.n_params() + self.diff_net.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.drift_net.params(&mut out);
        self.diff_net.params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension {
                context: "set_params".into(),
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let split = self.drift_net.n_params();
        self.drift_net.set_params(&flat[..split]);
        self.diff_net.set_params(&flat[split..]);
        Ok(())
    }

    /// Mean quasi-likelihood loss (plus hinge penalty) over a transition
    /// range, and its gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        data: &SdeTrainingData,
        range: std::ops::Range<usize>,
        penalty_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, grad) = self.loss_impl(data, range, penalty_weight, true)?;
        Ok((loss, grad.unwrap()))
    }

    /// Loss only (no gradient accumulation).
    pub fn loss(
        &self,
        data: &SdeTrainingData,
        range: std::ops::Range<usize>,
        penalty_weight: f64,
    ) -> Result<f64> {
        Ok(self.loss_impl(data, range, penalty_weight, false)?.0)
    }

    fn loss_impl(
        &self,
        data: &SdeTrainingData,
        range: std::ops::Range<usize>,
        penalty_weight: f64,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let dim = self.dim();
        if data.dim() != dim {
            return Err(Error::Dimension {
                context: "sde loss".into(),
                expected: dim,
                got: data.dim(),
            });
        }
        if range.end > data.n_transitions() || range.start >= range.end {
            return Err(Error::InsufficientData(format!(
                "bad transition range {range:?} for {} transitions",
                data.n_transitions()
            )));
        }
        let dt = data.dt;
        let sqrt_dt = dt.sqrt();
        let n = (range.end - range.start) as f64;
        let mut total = 0.0;
        let mut g_drift = MlpGrad::zeros_like(&self.drift_net);
        let mut g_diff = MlpGrad::zeros_like(&self.diff_net);

        let mut sigma = DMatrix::zeros(dim, dim);
        for t in range.clone() {
            let x: Vec<f64> = (1..dim).map(|j| data.states[(t, j)]).collect();
            let (mu, mu_cache) = self.drift_net.forward(&x);
            let (sig_raw, sig_cache) = self.diff_net.forward(&x);
            for i in 0..dim {
                for j in 0..=i {
                    let pos = tri_len(i) + j;
                    sigma[(i, j)] = if i == j {
                        softplus(sig_raw[pos])
                    } else {
                        sig_raw[pos]
                    };
                }
            }
            // Residual r = d(state) - mu dt; standardized z = sigma^-1 r / sqrt(dt).
            let mut r = vec![0.0; dim];
            for j in 0..dim {
                r[j] = data.states[(t + 1, j)] - data.states[(t, j)] - mu[j] * dt;
            }
            let mut z = vec![0.0; dim];
            for i in 0..dim {
                let mut acc = r[i] / sqrt_dt;
                for j in 0..i {
                    acc -= sigma[(i, j)] * z[j];
                }
                if sigma[(i, i)].abs() < 1e-300 {
                    return Err(Error::Numerical("zero diffusion diagonal in loss".into()));
                }
                z[i] = acc / sigma[(i, i)];
            }
            let mut loss_t = 0.5 * z.iter().map(|v| v * v).sum::<f64>()
                + 0.5 * dim as f64 * dt.ln();
            for i in 0..dim {
                loss_t += sigma[(i, i)].ln();
            }

            // Hinge penalty on the one-step conditional mean of the factors.
            let mut pen = 0.0;
            let mut hinge = vec![0.0; self.constraints.n_rows()];
            if self.constraints.n_rows() > 0 {
                for row in 0..self.constraints.n_rows() {
                    let mut mx = 0.0;
                    for j in 0..self.d {
                        mx += self.constraints.m[(row, j)] * (x[j] + mu[j + 1] * dt);
                    }
                    let v = self.constraints.b[row] - mx;
                    if v > 0.0 {
                        hinge[row] = v;
                        pen += v * v;
                    }
                }
            }
            total += (loss_t + penalty_weight * pen) / n;

            if !with_grad {
                continue;
            }
            // dL/dmu = -sqrt(dt) * sigma^-T z  (likelihood part).
            let mut w = vec![0.0; dim];
            for i in (0..dim).rev() {
                let mut acc = z[i];
                for k in (i + 1)..dim {
                    acc -= sigma[(k, i)] * w[k];
                }
                w[i] = acc / sigma[(i, i)];
            }
            let mut g_mu: Vec<f64> = w.iter().map(|v| -sqrt_dt * v / n).collect();
            // Penalty part: d pen / d mu_xi = -2 sum_i hinge_i M_i dt.
            for (row, h) in hinge.iter().enumerate() {
                if *h > 0.0 {
                    for j in 0..self.d {
                        g_mu[j + 1] -=
                            2.0 * penalty_weight * h * self.constraints.m[(row, j)] * dt / n;
                    }
                }
            }
            self.drift_net.backward(&mu_cache, &g_mu, &mut g_drift);

            // dL/dsigma = sigma^-T (I - z z^T), lower triangle.
            let mut g_sig_flat = vec![0.0; tri_len(dim)];
            for col in 0..dim {
                // Solve sigma^T wcol = e_col - z * z[col].
                let mut wc = vec![0.0; dim];
                for i in (0..dim).rev() {
                    let mut acc = (if i == col { 1.0 } else { 0.0 }) - z[i] * z[col];
                    for k in (i + 1)..dim {
                        acc -= sigma[(k, i)] * wc[k];
                    }
                    wc[i] = acc / sigma[(i, i)];
                }
                for i in col..dim {
                    let pos = tri_len(i) + col;
                    let g = wc[i] / n;
                    g_sig_flat[pos] = if i == col {
                        g * sigmoid(self.diff_net_raw_at(&sig_raw, i, col))
                    } else {
                        g
                    };
                }
            }
            self.diff_net.backward(&sig_cache, &g_sig_flat, &mut g_diff);
        }

        let grad = if with_grad {
            let mut out = Vec::with_capacity(self.n_params());
            g_drift.params(&mut out);
            g_diff.params(&mut out);
            Some(out)
        } else {
            None
        };
        Ok((total, grad))
    }

    fn diff_net_raw_at(&self, sig_raw: &[f64], i: usize, j: usize) -> f64 {
        sig_raw[tri_len(i) + j]
    }

    /// Standardized one-step residuals via forward substitution.
    pub fn residuals(&self, data: &SdeTrainingData) -> Result<ResidualSeries> {
        let dim = self.dim();
        if data.dim() != dim {
            return Err(Error::Dimension {
                context: "residuals".into(),
                expected: dim,
                got: data.dim(),
            });
        }
        let dt = data.dt;
        let sqrt_dt = dt.sqrt();
        let n = data.n_transitions();
        let mut eps = DMatrix::zeros(n, dim);
        for t in 0..n {
            let xi = DVector::from_iterator(self.d, (1..dim).map(|j| data.states[(t, j)]));
            let (mu, sigma) = self.drift_diffusion(&xi)?;
            for i in 0..dim {
                if sigma[(i, i)] <= 1e-12 {
                    return Err(Error::Singular(format!(
                        "diffusion diagonal {} at transition {t} is {:.3e}",
                        i,
                        sigma[(i, i)]
                    )));
                }
            }
            for i in 0..dim {
                let r = data.states[(t + 1, i)] - data.states[(t, i)] - mu[i] * dt;
                let mut acc = r / sqrt_dt;
                for j in 0..i {
                    acc -= sigma[(i, j)] * eps[(t, j)];
                }
                eps[(t, i)] = acc / sigma[(i, i)];
            }
        }
        Ok(ResidualSeries { eps })
    }

    /// Simulate one path with the tamed Euler scheme. Every simulated factor
    /// point satisfies the constraint system: violating proposals are
    /// reflected across the violated rows, with a pull toward the stored
    /// interior point as a fallback.
    pub fn simulate(
        &self,
        state0: &DVector<f64>,
        steps: usize,
        mode: &SimMode,
        seed: u64,
    ) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        if state0.len() != dim {
            return Err(Error::Dimension {
                context: "simulate".into(),
                expected: dim,
                got: state0.len(),
            });
        }
        let xi0 = state0.rows(1, self.d).into_owned();
        if !self.constraints.check(&xi0)?.is_empty() {
            return Err(Error::Domain(
                "initial factor point violates the constraint system".into(),
            ));
        }
        if let SimMode::Bootstrap(res) = mode {
            if res.eps.ncols() != dim || res.eps.nrows() == 0 {
                return Err(Error::Dimension {
                    context: "bootstrap residuals".into(),
                    expected: dim,
                    got: res.eps.ncols(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sqrt_dt = self.dt.sqrt();
        let mut path = DMatrix::zeros(steps + 1, dim);
        let mut state = state0.clone();
        path.row_mut(0).copy_from(&state.transpose());
        for step in 1..=steps {
            let xi = state.rows(1, self.d).into_owned();
            let (mu, sigma) = self.drift_diffusion(&xi)?;
            let eps: DVector<f64> = match mode {
                SimMode::Gaussian => DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
                ),
                SimMode::Bootstrap(res) => {
                    let row = rng.gen_range(0..res.eps.nrows());
                    res.eps.row(row).transpose()
                }
            };
            let tame = 1.0 + mu.norm() * self.dt;
            let incr = (&mu * self.dt + &sigma * eps * sqrt_dt) / tame;
            state += incr;
            let mut xi_new = state.rows(1, self.d).into_owned();
            self.enforce_feasible(&mut xi_new)?;
            for j in 0..self.d {
                state[j + 1] = xi_new[j];
            }
            path.row_mut(step).copy_from(&state.transpose());
        }
        Ok(path)
    }

    /// Simulate several paths; each path derives its own seed, so path `k`
    /// is reproducible independently of how many paths are requested.
    pub fn simulate_paths(
        &self,
        state0: &DVector<f64>,
        steps: usize,
        mode: &SimMode,
        seed: u64,
        n_paths: usize,
    ) -> Result<Vec<DMatrix<f64>>> {
        (0..n_paths)
            .map(|k| {
                let path_seed = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1));
                self.simulate(state0, steps, mode, path_seed)
            })
            .collect()
    }

    fn enforce_feasible(&self, xi: &mut DVector<f64>) -> Result<()> {
        let fcs = &self.constraints;
        if fcs.n_rows() == 0 {
            return Ok(());
        }
        for _ in 0..50 {
            let slack = &fcs.m * &*xi - &fcs.b;
            let mut worst = 0;
            for i in 1..slack.len() {
                if slack[i] < slack[worst] {
                    worst = i;
                }
            }
            if slack[worst] >= -FEAS_TOL {
                return Ok(());
            }
            let row = fcs.m.row(worst);
            let nrm2 = row.norm_squared();
            if nrm2 < 1e-300 {
                break;
            }
            // Reflect across the violated hyperplane.
            *xi += row.transpose() * (-2.0 * slack[worst] / nrm2);
        }
        // Reflections cycled; pull back toward the interior point.
        let center = self.interior.as_ref().ok_or_else(|| {
            Error::Numerical("no interior point available for boundary fallback".into())
        })?;
        let dir = &*xi - center;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let cand = center + &dir * mid;
            if fcs.check(&cand)?.is_empty() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        *xi = center + &dir * lo;
        Ok(())
    }
}

/// Estimate the SDE from a joint state history.
pub fn fit_sde(
    data: &SdeTrainingData,
    constraints: FactorConstraintSystem,
    config: &FitConfig,
) -> Result<(NeuralSde, TrainingHistory)> {
    let dim = data.dim();
    let d = dim - 1;
    if data.states.nrows() < config.min_length {
        return Err(Error::InsufficientData(format!(
            "path length {} below the configured minimum {}",
            data.states.nrows(),
            config.min_length
        )));
    }
    let n_trans = data.n_transitions();
    let n_val = ((n_trans as f64) * config.val_fraction).floor() as usize;
    let n_train = n_trans - n_val;
    if n_train < 2 {
        return Err(Error::InsufficientData("too few training transitions".into()));
    }

    // Empirical increment moments on the training window; the output layers
    // start at the constant-coefficient Gaussian MLE.
    let dt = data.dt;
    let mut mean_inc = vec![0.0; dim];
    for t in 0..n_train {
        for j in 0..dim {
            mean_inc[j] += (data.states[(t + 1, j)] - data.states[(t, j)]) / n_train as f64;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for t in 0..n_train {
        for i in 0..dim {
            let ri = data.states[(t + 1, i)] - data.states[(t, i)] - mean_inc[i];
            for j in 0..dim {
                let rj = data.states[(t + 1, j)] - data.states[(t, j)] - mean_inc[j];
                cov[(i, j)] += ri * rj / (n_train as f64 * dt);
            }
        }
    }
    for i in 0..dim {
        if cov[(i, i)] <= 0.0 {
            return Err(Error::Validation(format!(
                "state coordinate {i} has zero increment variance; likelihood is degenerate"
            )));
        }
    }
    let chol_mat: DMatrix<f64> = match nalgebra::Cholesky::new(cov.clone()) {
        Some(c) => c.l(),
        None => DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                cov[(i, i)].sqrt()
            } else {
                0.0
            }
        }),
    };
    let mut chol = vec![0.0; tri_len(dim)];
    for i in 0..dim {
        for j in 0..=i {
            chol[tri_len(i) + j] = chol_mat[(i, j)];
        }
    }
    let drift0: Vec<f64> = mean_inc.iter().map(|m| m / dt).collect();

    // Input standardisation over the training factors.
    let mut in_mean = vec![0.0; d];
    let mut in_scale = vec![0.0; d];
    for j in 0..d {
        let col: Vec<f64> = (0..n_train).map(|t| data.states[(t, j + 1)]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        in_mean[j] = mean;
        in_scale[j] = var.sqrt().max(1e-8);
    }

    let mut model = NeuralSde::with_initial_moments(
        d,
        config.hidden,
        constraints,
        config.seed,
        dt,
        in_mean,
        in_scale,
        &InitialMoments {
            drift: drift0,
            chol,
        },
    )?;

    let train_range = 0..n_train;
    let val_range = if n_val > 0 { Some(n_train..n_trans) } else { None };

    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut lr = config.learning_rate;
    let mut history = TrainingHistory {
        train: Vec::new(),
        val: Vec::new(),
        best_epoch: 0,
        final_learning_rate: lr,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stale = 0usize;

    let (mut loss, mut grad) =
        model.loss_and_grad(data, train_range.clone(), config.penalty_weight)?;
    for epoch in 0..config.epochs {
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss is not finite at epoch {epoch} (lr={lr:.3e})"
            )));
        }
        // Momentum step with a deterministic halving safeguard: the train
        // loss never increases, so its moving average is non-increasing.
        let mut accepted = false;
        for _ in 0..40 {
            let mut proposal = params.clone();
            let mut v_new = velocity.clone();
            for i in 0..proposal.len() {
                v_new[i] = config.momentum * v_new[i] + grad[i];
                proposal[i] -= lr * v_new[i];
            }
            model.set_params(&proposal)?;
            let cand = model.loss(data, train_range.clone(), config.penalty_weight)?;
            if cand.is_finite() && cand <= loss + 1e-12 * (1.0 + loss.abs()) {
                params = proposal;
                velocity = v_new;
                loss = cand;
                accepted = true;
                break;
            }
            lr *= 0.5;
            velocity.iter_mut().for_each(|v| *v = 0.0);
            if lr < 1e-14 {
                break;
            }
        }
        if !accepted {
            model.set_params(&params)?;
            break;
        }
        history.train.push(loss);

        if let Some(vr) = &val_range {
            let vl = model.loss(data, vr.clone(), config.penalty_weight)?;
            history.val.push(vl);
            if vl < best_val - 1e-12 {
                best_val = vl;
                best_params = params.clone();
                history.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale > config.patience {
                    break;
                }
            }
        } else {
            best_params = params.clone();
            history.best_epoch = epoch;
        }

        let (l2, g2) = model.loss_and_grad(data, train_range.clone(), config.penalty_weight)?;
        loss = l2;
        grad = g2;
    }
    history.final_learning_rate = lr;
    model.set_params(&best_params)?;
    Ok((model, history))
}

// --- serialization -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NeuralSdeDto {
    version: u32,
    d: usize,
    dt: f64,
    seed: u64,
    drift_net: Mlp,
    diff_net: Mlp,
    constraint_hash: String,
}

/// Canonical hash of a factor constraint system, used to tie serialized
/// models to the polytope they were trained against.
pub fn constraint_hash(fcs: &FactorConstraintSystem) -> String {
    let mut hasher = Sha256::new();
    for i in 0..fcs.n_rows() {
        for j in 0..fcs.dim() {
            hasher.update(format!("{:.12e},", fcs.m[(i, j)]).as_bytes());
        }
        hasher.update(format!("{:.12e};", fcs.b[i]).as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl NeuralSde {
    pub fn to_json(&self) -> Result<String> {
        let dto = NeuralSdeDto {
            version: 1,
            d: self.d,
            dt: self.dt,
            seed: self.seed,
            drift_net: self.drift_net.clone(),
            diff_net: self.diff_net.clone(),
            constraint_hash: constraint_hash(&self.constraints),
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    /// Rebuild a model from JSON; the supplied constraint system must hash
    /// to the value recorded at serialization time.
    pub fn from_json(text: &str, constraints: FactorConstraintSystem) -> Result<Self> {
        let dto: NeuralSdeDto = serde_json::from_str(text)?;
        if dto.version != 1 {
            return Err(Error::Validation(format!(
                "unsupported sde model version {}",
                dto.version
            )));
        }
        if constraint_hash(&constraints) != dto.constraint_hash {
            return Err(Error::Validation(
                "constraint system does not match the serialized model".into(),
            ));
        }
        let interior = if constraints.n_rows() > 0 {
            Some(constraints.interior_point()?)
        } else {
            None
        };
        Ok(Self {
            d: dto.d,
            drift_net: dto.drift_net,
            diff_net: dto.diff_net,
            constraints,
            interior,
            seed: dto.seed,
            dt: dto.dt,
        })
    }
}

/// An empty (always-feasible) constraint system in `d` factors.
pub fn no_constraints(d: usize) -> FactorConstraintSystem {
    FactorConstraintSystem {
        m: DMatrix::zeros(0, d),
        b: DVector::zeros(0),
        provenance: Vec::new(),
        labels: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitrage::ConstraintKind;

    fn box_constraints(lo: f64, hi: f64) -> FactorConstraintSystem {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![lo, -hi, lo, -hi]);
        FactorConstraintSystem {
            m,
            b,
            provenance: vec![0, 1, 2, 3],
            labels: vec![ConstraintKind::Vertical; 4],
        }
    }

    fn const_model(d: usize, drift: Vec<f64>, chol: Vec<f64>) -> NeuralSde {
        NeuralSde::with_initial_moments(
            d,
            8,
            no_constraints(d),
            7,
            TRADING_DT,
            vec![0.0; d],
            vec![1.0; d],
            &InitialMoments { drift, chol },
        )
        .unwrap()
    }

    /// Simulate a constant-coefficient SDE path with Gaussian innovations.
    fn simulate_constant(
        drift: &[f64],
        chol: &DMatrix<f64>,
        t: usize,
        dt: f64,
        seed: u64,
    ) -> DMatrix<f64> {
        let dim = drift.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = DMatrix::zeros(t, dim);
        for row in 1..t {
            let eps = DVector::from_iterator(
                dim,
                (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
            );
            let step = chol * eps * dt.sqrt();
            for j in 0..dim {
                states[(row, j)] = states[(row - 1, j)] + drift[j] * dt + step[j];
            }
        }
        states
    }

    #[test]
    fn zero_output_weights_give_constant_coefficients() {
        let model = const_model(1, vec![0.0, 0.0], vec![0.5, -0.1, 0.3]);
        let xi = DVector::from_vec(vec![0.4]);
        let (mu, sigma) = model.drift_diffusion(&xi).unwrap();
        assert!(mu.amax() < 1e-15);
        assert!((sigma[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((sigma[(1, 0)] + 0.1).abs() < 1e-12);
        assert!((sigma[(1, 1)] - 0.3).abs() < 1e-12);
        assert_eq!(sigma[(0, 1)], 0.0);
        // Determinism: identical inputs, identical outputs.
        let (mu2, sigma2) = model.drift_diffusion(&xi).unwrap();
        assert_eq!(mu, mu2);
        assert_eq!(sigma, sigma2);
    }

    fn box_constraints_1d(lo: f64, hi: f64) -> FactorConstraintSystem {
        let m = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![lo, -hi]);
        FactorConstraintSystem {
            m,
            b,
            provenance: vec![0, 1],
            labels: vec![ConstraintKind::Vertical; 2],
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let chol = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, -0.1, 0.25]);
        let states = simulate_constant(&[0.5, -0.2], &chol, 80, TRADING_DT, 3);
        // Tight box so the hinge penalty is active and its gradient is tested.
        let lo = states.column(1).min() + 0.3 * (states.column(1).max() - states.column(1).min());
        let fcs = box_constraints_1d(lo, states.column(1).max() + 1.0);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        let mut model = NeuralSde::with_initial_moments(
            1,
            6,
            fcs,
            11,
            TRADING_DT,
            vec![0.0],
            vec![1.0],
            &InitialMoments {
                drift: vec![0.1, 0.1],
                chol: vec![0.25, 0.05, 0.2],
            },
        )
        .unwrap();
        // Perturb output weights so gradients flow everywhere.
        let mut p = model.params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.01 * ((i as f64 * 1.3).sin());
        }
        model.set_params(&p).unwrap();

        let (_, grad) = model.loss_and_grad(&data, 0..79, 100.0).unwrap();
        let h = 1e-5;
        for idx in (0..p.len()).step_by(23) {
            let mut up = p.clone();
            up[idx] += h;
            let mut dn = p.clone();
            dn[idx] -= h;
            let mut m2 = model.clone();
            m2.set_params(&up).unwrap();
            let lu = m2.loss(&data, 0..79, 100.0).unwrap();
            m2.set_params(&dn).unwrap();
            let ld = m2.loss(&data, 0..79, 100.0).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "param {idx}: grad {} vs fd {fd}", grad[idx]);
        }
    }

    #[test]
    fn fit_recovers_constant_coefficients() {
        let chol = DMatrix::from_row_slice(2, 2, &[0.15, 0.0, -0.05, 0.1]);
        let states = simulate_constant(&[1.0, -0.8], &chol, 3000, TRADING_DT, 5);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        let config = FitConfig {
            epochs: 250,
            hidden: 16,
            seed: 1,
            ..Default::default()
        };
        let (model, history) = fit_sde(&data, no_constraints(1), &config).unwrap();
        let centroid = DVector::from_vec(vec![data.states.column(1).mean()]);
        let (mu, sigma) = model.drift_diffusion(&centroid).unwrap();
        assert!((mu[0] - 1.0).abs() < 0.1, "mu0 {}", mu[0]);
        assert!((mu[1] + 0.8).abs() < 0.08, "mu1 {}", mu[1]);
        let fit_cov = &sigma * sigma.transpose();
        let true_cov = &chol * chol.transpose();
        let err = (fit_cov - &true_cov).norm() / true_cov.norm();
        assert!(err < 0.1, "cov frobenius error {err}");
        assert!(!history.train.is_empty());
    }

    #[test]
    fn diagonal_generator_keeps_off_diagonal_small() {
        let chol = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.15]);
        let states = simulate_constant(&[0.0, 0.0], &chol, 3000, TRADING_DT, 8);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        let config = FitConfig {
            epochs: 200,
            hidden: 16,
            seed: 2,
            ..Default::default()
        };
        let (model, _) = fit_sde(&data, no_constraints(1), &config).unwrap();
        let centroid = DVector::from_vec(vec![data.states.column(1).mean()]);
        let (_, sigma) = model.drift_diffusion(&centroid).unwrap();
        assert!(
            sigma[(1, 0)].abs() < 0.1 * sigma[(1, 1)].abs(),
            "off-diagonal {} vs diagonal {}",
            sigma[(1, 0)],
            sigma[(1, 1)]
        );
    }

    #[test]
    fn training_loss_history_is_monotone() {
        let chol = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, -0.08, 0.12]);
        let states = simulate_constant(&[0.3, -0.1], &chol, 400, TRADING_DT, 13);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        let config = FitConfig {
            epochs: 120,
            hidden: 8,
            seed: 3,
            ..Default::default()
        };
        let (_, history) = fit_sde(&data, no_constraints(1), &config).unwrap();
        for w in history.train.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn degenerate_constant_path_is_rejected() {
        let states = DMatrix::from_element(100, 2, 1.5);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        assert!(matches!(
            fit_sde(&data, no_constraints(1), &FitConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn too_short_path_is_rejected() {
        let chol = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.1]);
        let states = simulate_constant(&[0.0, 0.0], &chol, 20, TRADING_DT, 1);
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        assert!(matches!(
            fit_sde(&data, no_constraints(1), &FitConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn residuals_on_unit_model_recover_scaled_steps() {
        // mu = 0, sigma = I: a path of pure +sqrt(dt) steps has eps = 1.
        let model = const_model(1, vec![0.0, 0.0], vec![1.0, 0.0, 1.0]);
        let t = 50;
        let mut states = DMatrix::zeros(t, 2);
        for row in 1..t {
            for j in 0..2 {
                states[(row, j)] = states[(row - 1, j)] + TRADING_DT.sqrt();
            }
        }
        let data = SdeTrainingData::new(states, TRADING_DT).unwrap();
        let res = model.residuals(&data).unwrap();
        for v in res.eps.iter() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_round_trip_is_standard_normal() {
        let model = const_model(1, vec![0.2, -0.1], vec![0.3, -0.12, 0.2]);
        let state0 = DVector::from_vec(vec![0.0, 0.0]);
        let path = model
            .simulate(&state0, 2000, &SimMode::Gaussian, 17)
            .unwrap();
        let data = SdeTrainingData::new(path, TRADING_DT).unwrap();
        let res = model.residuals(&data).unwrap();
        let n = res.eps.nrows() as f64;
        for j in 0..2 {
            let col = res.eps.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((0.8..1.2).contains(&var), "var {var}");
        }
        // Cross-coordinate residual correlation is small.
        let (c0, c1) = (res.eps.column(0), res.eps.column(1));
        let (m0, m1) = (c0.mean(), c1.mean());
        let mut cov = 0.0;
        let mut v0 = 0.0;
        let mut v1 = 0.0;
        for t in 0..res.eps.nrows() {
            cov += (c0[t] - m0) * (c1[t] - m1);
            v0 += (c0[t] - m0) * (c0[t] - m0);
            v1 += (c1[t] - m1) * (c1[t] - m1);
        }
        let corr = cov / (v0.sqrt() * v1.sqrt());
        assert!(corr.abs() < 0.1, "residual correlation {corr}");
    }

    #[test]
    fn simulation_edge_cases() {
        let model = const_model(1, vec![0.0, 0.0], vec![1e-30, 0.0, 1e-30]);
        let state0 = DVector::from_vec(vec![1.0, 2.0]);
        // steps = 0 returns just the initial state.
        let path = model.simulate(&state0, 0, &SimMode::Gaussian, 1).unwrap();
        assert_eq!(path.nrows(), 1);
        assert_eq!(path.row(0).transpose(), state0);
        // Degenerate diffusion and zero drift: constant path.
        let path = model.simulate(&state0, 100, &SimMode::Gaussian, 1).unwrap();
        for t in 0..=100 {
            assert!((path[(t, 0)] - 1.0).abs() < 1e-12);
            assert!((path[(t, 1)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_seed_deterministic_and_respects_constraints() {
        let fcs = box_constraints(-0.5, 0.5);
        let model = NeuralSde::with_initial_moments(
            2,
            8,
            fcs.clone(),
            21,
            TRADING_DT,
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            &InitialMoments {
                drift: vec![0.0, 0.3, -0.3],
                chol: vec![0.2, 0.0, 0.8, 0.0, -0.4, 0.7],
            },
        )
        .unwrap();
        let state0 = DVector::from_vec(vec![0.0, 0.1, -0.1]);
        let a = model.simulate(&state0, 3000, &SimMode::Gaussian, 42).unwrap();
        let b = model.simulate(&state0, 3000, &SimMode::Gaussian, 42).unwrap();
        assert_eq!(a, b);
        for t in 0..=3000 {
            let xi = DVector::from_vec(vec![a[(t, 1)], a[(t, 2)]]);
            assert!(fcs.check(&xi).unwrap().is_empty(), "violation at step {t}");
        }
        let c = model.simulate(&state0, 100, &SimMode::Gaussian, 43).unwrap();
        assert_ne!(a.rows(0, 101), c.rows(0, 101));
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let fcs = box_constraints(-0.5, 0.5);
        let model = NeuralSde::with_initial_moments(
            2,
            8,
            fcs,
            21,
            TRADING_DT,
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            &InitialMoments {
                drift: vec![0.0; 3],
                chol: vec![0.2, 0.0, 0.2, 0.0, 0.0, 0.2],
            },
        )
        .unwrap();
        let bad = DVector::from_vec(vec![0.0, 0.9, 0.0]);
        assert!(model.simulate(&bad, 10, &SimMode::Gaussian, 1).is_err());
    }

    #[test]
    fn bootstrap_innovations_are_rows_of_the_residual_series() {
        let model = const_model(1, vec![0.0, 0.0], vec![0.3, 0.1, 0.2]);
        // Hand-built residual series with recognisable rows.
        let eps = DMatrix::from_row_slice(
            3,
            2,
            &[1.0, -1.0, 2.0, 0.5, -0.7, 0.3],
        );
        let res = ResidualSeries { eps: eps.clone() };
        let state0 = DVector::from_vec(vec![0.0, 0.0]);
        let steps = 200;
        let path = model
            .simulate(&state0, steps, &SimMode::Bootstrap(&res), 5)
            .unwrap();
        // Invert each increment back to the innovation and match a row.
        let data = SdeTrainingData::new(path, TRADING_DT).unwrap();
        let back = model.residuals(&data).unwrap();
        for t in 0..steps {
            let row = back.eps.row(t);
            let hit = (0..3).any(|r| {
                (row[0] - eps[(r, 0)]).abs() < 1e-9 && (row[1] - eps[(r, 1)]).abs() < 1e-9
            });
            assert!(hit, "step {t} innovation {row:?} not a residual row");
        }
    }

    #[test]
    fn positive_definite_diffusion_at_random_points() {
        let fcs = box_constraints(-2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let model = NeuralSde::with_initial_moments(
            2,
            16,
            fcs,
            33,
            TRADING_DT,
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            &InitialMoments {
                drift: vec![0.1, -0.2, 0.3],
                chol: vec![0.3, -0.1, 0.25, 0.05, -0.08, 0.2],
            },
        )
        .unwrap();
        // Perturb so the nets are not constant.
        let mut p = model.params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64 * 0.31).cos());
        }
        let mut model = model;
        model.set_params(&p).unwrap();
        for _ in 0..1000 {
            let xi = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let (_, sigma) = model.drift_diffusion(&xi).unwrap();
            let cov = &sigma * sigma.transpose();
            let eig = nalgebra::SymmetricEigen::new(cov);
            assert!(eig.eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn json_round_trip_preserves_behaviour() {
        let fcs = box_constraints(-1.0, 1.0);
        let model = NeuralSde::with_initial_moments(
            2,
            8,
            fcs.clone(),
            77,
            TRADING_DT,
            vec![0.1, -0.1],
            vec![1.0, 2.0],
            &InitialMoments {
                drift: vec![0.05, 0.1, -0.1],
                chol: vec![0.2, 0.01, 0.3, -0.02, 0.04, 0.25],
            },
        )
        .unwrap();
        let text = model.to_json().unwrap();
        let back = NeuralSde::from_json(&text, fcs.clone()).unwrap();
        let xi = DVector::from_vec(vec![0.2, -0.3]);
        let (mu_a, sig_a) = model.drift_diffusion(&xi).unwrap();
        let (mu_b, sig_b) = back.drift_diffusion(&xi).unwrap();
        assert_eq!(mu_a, mu_b);
        assert_eq!(sig_a, sig_b);
        // Wrong constraints are refused.
        let other = box_constraints(-2.0, 2.0);
        assert!(NeuralSde::from_json(&text, other).is_err());
    }
}

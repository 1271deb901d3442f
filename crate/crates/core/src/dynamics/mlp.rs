//! Small feed-forward networks with hand-rolled backprop.
//!
//! Two hidden tanh layers; an input standardisation affine (fixed, not
//! trained) is baked into the network so callers feed raw factor values.
//! Parameters are addressable as one flat vector, which is what the
//! optimizer, the serializer and the finite-difference gradient check use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    /// Fixed input standardisation: x_norm = (x - mean) / scale.
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    // Row-major weights.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Per-sample forward activations kept for the backward pass.
pub struct MlpCache {
    x_norm: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

/// Gradient accumulator with the same layout as [`Mlp`] parameters.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Mlp {
    /// Hidden layers get Xavier-uniform weights from the seeded generator;
    /// the output layer starts at exactly zero so the network's initial
    /// response is its output bias.
    pub fn new(
        n_in: usize,
        hidden: usize,
        n_out: usize,
        in_mean: Vec<f64>,
        in_scale: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let xavier = |fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect::<Vec<f64>>()
        };
        Self {
            n_in,
            hidden,
            n_out,
            in_mean,
            in_scale,
            w1: xavier(n_in, hidden, hidden * n_in, rng),
            b1: vec![0.0; hidden],
            w2: xavier(hidden, hidden, hidden * hidden, rng),
            b2: vec![0.0; hidden],
            w3: vec![0.0; n_out * hidden],
            b3: vec![0.0; n_out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let h = self.hidden;
        let mut x_norm = vec![0.0; self.n_in];
        for i in 0..self.n_in {
            x_norm[i] = (x[i] - self.in_mean[i]) / self.in_scale[i];
        }
        let mut a1 = vec![0.0; h];
        for i in 0..h {
            let mut z = self.b1[i];
            for j in 0..self.n_in {
                z += self.w1[i * self.n_in + j] * x_norm[j];
            }
            a1[i] = z.tanh();
        }
        let mut a2 = vec![0.0; h];
        for i in 0..h {
            let mut z = self.b2[i];
            for j in 0..h {
                z += self.w2[i * h + j] * a1[j];
            }
            a2[i] = z.tanh();
        }
        let mut out = vec![0.0; self.n_out];
        for i in 0..self.n_out {
            let mut z = self.b3[i];
            for j in 0..h {
                z += self.w3[i * h + j] * a2[j];
            }
            out[i] = z;
        }
        (out, MlpCache { x_norm, a1, a2 })
    }

    /// Accumulate parameter gradients for one sample given dL/d(out).
    pub fn backward(&self, cache: &MlpCache, g_out: &[f64], grad: &mut MlpGrad) {
        let h = self.hidden;
        let mut g_a2 = vec![0.0; h];
        for i in 0..self.n_out {
            let g = g_out[i];
            if g == 0.0 {
                continue;
            }
            grad.b3[i] += g;
            for j in 0..h {
                grad.w3[i * h + j] += g * cache.a2[j];
                g_a2[j] += self.w3[i * h + j] * g;
            }
        }
        let mut g_a1 = vec![0.0; h];
        for i in 0..h {
            let gz = g_a2[i] * (1.0 - cache.a2[i] * cache.a2[i]);
            grad.b2[i] += gz;
            for j in 0..h {
                grad.w2[i * h + j] += gz * cache.a1[j];
                g_a1[j] += self.w2[i * h + j] * gz;
            }
        }
        for i in 0..h {
            let gz = g_a1[i] * (1.0 - cache.a1[i] * cache.a1[i]);
            grad.b1[i] += gz;
            for j in 0..self.n_in {
                grad.w1[i * self.n_in + j] += gz * cache.x_norm[j];
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    pub fn params(&self, out: &mut Vec<f64>) {
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            out.extend_from_slice(part);
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            let len = part.len();
            part.copy_from_slice(&flat[k..k + len]);
            k += len;
        }
    }
}

impl MlpGrad {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
            w3: vec![0.0; m.w3.len()],
            b3: vec![0.0; m.b3.len()],
        }
    }

    pub fn params(&self, out: &mut Vec<f64>) {
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            out.extend_from_slice(part);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            for v in part.iter_mut() {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::new(2, 6, 3, vec![0.0, 0.0], vec![1.0, 1.0], &mut rng);
        // Give the zero output layer some structure.
        for (i, w) in net.w3.iter_mut().enumerate() {
            *w = 0.05 * ((i as f64 * 0.7).sin());
        }
        let x = [0.3, -0.8];
        // Loss = sum of squares of outputs.
        let loss = |net: &Mlp| {
            let (out, _) = net.forward(&x);
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let (out, cache) = net.forward(&x);
        let g_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut grad = MlpGrad::zeros_like(&net);
        net.backward(&cache, &g_out, &mut grad);

        let mut flat = Vec::new();
        net.params(&mut flat);
        let mut gflat = Vec::new();
        grad.params(&mut gflat);
        let h = 1e-6;
        for idx in (0..flat.len()).step_by(7) {
            let mut up = flat.clone();
            up[idx] += h;
            let mut dn = flat.clone();
            dn[idx] -= h;
            let mut n2 = net.clone();
            n2.set_params(&up);
            let lu = loss(&n2);
            n2.set_params(&dn);
            let ld = loss(&n2);
            let fd = (lu - ld) / (2.0 * h);
            assert!(
                (gflat[idx] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                "param {idx}: {} vs {fd}",
                gflat[idx]
            );
        }
    }
}

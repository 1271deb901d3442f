//! Black-Scholes closed forms in normalized coordinates (zero rates and
//! dividends throughout).

use crate::error::{Error, Result};

/// A Black-Scholes quote: implied volatility plus the option coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsQuote {
    /// Implied volatility, strictly positive.
    pub sigma: f64,
    /// Time to expiry in years, strictly positive.
    pub tau: f64,
    /// Log-moneyness ln(K/S).
    pub m: f64,
}

impl BsQuote {
    pub fn new(sigma: f64, tau: f64, m: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("implied vol must be > 0, got {sigma}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("tau must be > 0, got {tau}")));
        }
        if !m.is_finite() {
            return Err(Error::Domain("non-finite moneyness".into()));
        }
        Ok(Self { sigma, tau, m })
    }

    fn d1(&self) -> f64 {
        -self.m / (self.sigma * self.tau.sqrt()) + 0.5 * self.sigma * self.tau.sqrt()
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Normalized call price `Phi(d1) - e^m Phi(d1 - sigma sqrt(tau))`.
pub fn bs_price(q: &BsQuote) -> f64 {
    let d1 = q.d1();
    let d2 = d1 - q.sigma * q.tau.sqrt();
    norm_cdf(d1) - q.m.exp() * norm_cdf(d2)
}

/// Call delta `Phi(d1)`.
pub fn bs_delta(q: &BsQuote) -> f64 {
    norm_cdf(q.d1())
}

/// Call vega `S sqrt(tau) phi(d1)`, in currency per unit volatility.
pub fn bs_vega(q: &BsQuote, spot: f64) -> f64 {
    spot * q.tau.sqrt() * norm_pdf(q.d1())
}

/// Invert the normalized call price for the implied volatility.
///
/// Newton iterations guarded by a bisection bracket; converges to
/// `|bs_price(result) - c_tilde| < 1e-12`. The price must lie strictly
/// between the intrinsic value and 1.
pub fn implied_vol(c_tilde: f64, tau: f64, m: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be > 0, got {tau}")));
    }
    let intrinsic = (1.0 - m.exp()).max(0.0);
    if !(c_tilde > intrinsic) || !(c_tilde < 1.0) {
        return Err(Error::Domain(format!(
            "price {c_tilde} outside the open no-arbitrage interval ({intrinsic}, 1)"
        )));
    }
    let price_at = |sigma: f64| bs_price(&BsQuote { sigma, tau, m });

    let (mut lo, mut hi) = (1e-9, 1.0);
    while price_at(hi) < c_tilde {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Numerical(format!(
                "implied vol bracket exhausted for price {c_tilde}"
            )));
        }
    }

    // Brenner-Subrahmanyam style seed from the at-the-money approximation.
    let mut sigma = ((c_tilde - intrinsic) * (2.0 * std::f64::consts::PI / tau).sqrt())
        .clamp(lo * 2.0, hi * 0.5);
    for _ in 0..100 {
        let q = BsQuote { sigma, tau, m };
        let diff = bs_price(&q) - c_tilde;
        if diff.abs() < 1e-12 {
            return Ok(sigma);
        }
        if diff > 0.0 {
            hi = sigma;
        } else {
            lo = sigma;
        }
        let vega = bs_vega(&q, 1.0);
        let newton = sigma - diff / vega;
        sigma = if vega > 1e-12 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let q = BsQuote { sigma, tau, m };
    if (bs_price(&q) - c_tilde).abs() < 1e-10 {
        Ok(sigma)
    } else {
        Err(Error::Numerical(format!(
            "implied vol iteration did not converge for price {c_tilde}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atm_price_matches_cdf_oracle() {
        // sigma=0.2, tau=1, m=0: price = Phi(0.1) - Phi(-0.1).
        let q = BsQuote::new(0.2, 1.0, 0.0).unwrap();
        let oracle = norm_cdf(0.1) - norm_cdf(-0.1);
        assert!((bs_price(&q) - oracle).abs() < 1e-15);
        assert!((bs_price(&q) - 0.0797).abs() < 1e-4);
    }

    #[test]
    fn short_expiry_limit_is_intrinsic() {
        for &m in &[-0.3, -0.05, 0.05, 0.3] {
            let q = BsQuote::new(0.2, 1e-10, m).unwrap();
            let intrinsic = (1.0 - m.exp()).max(0.0);
            assert!(
                (bs_price(&q) - intrinsic).abs() < 1e-8,
                "m={m}: {} vs {intrinsic}",
                bs_price(&q)
            );
        }
        // Exactly at the money the residual time value is phi(0)*sigma*sqrt(tau).
        let q = BsQuote::new(0.2, 1e-10, 0.0).unwrap();
        assert!(bs_price(&q) < 1e-6);
    }

    #[test]
    fn deep_itm_bound() {
        let q = BsQuote::new(0.2, 1.0, -10.0).unwrap();
        assert!((bs_price(&q) - (1.0 - (-10.0f64).exp())).abs() < 1e-12);
        assert!((bs_delta(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_and_vega_closed_forms() {
        let q = BsQuote::new(0.2, 1.0, 0.0).unwrap();
        assert!((bs_delta(&q) - norm_cdf(0.1)).abs() < 1e-15);
        assert!((bs_delta(&q) - 0.5398).abs() < 1e-4);
        let vega = bs_vega(&q, 100.0);
        assert!((vega - 100.0 * norm_pdf(0.1)).abs() < 1e-12);
        // tau -> 0 kills vega through the sqrt(tau) factor.
        let q0 = BsQuote::new(0.2, 1e-12, 0.0).unwrap();
        assert!(bs_vega(&q0, 1.0) < 1e-5);
    }

    #[test]
    fn greeks_match_finite_differences_of_price() {
        // Delta: bump S with K fixed, i.e. price S*c(m) with m = ln(K/S).
        // Vega: bump sigma directly.
        for &(sigma, tau, m) in &[
            (0.15, 0.25, -0.1),
            (0.2, 1.0, 0.0),
            (0.35, 2.0, 0.2),
            (0.2, 0.5, 0.1),
        ] {
            let q = BsQuote::new(sigma, tau, m).unwrap();
            let h = 1e-6;
            let price_s = |s: f64| {
                let k = m.exp(); // strike for S = 1
                s * bs_price(&BsQuote { sigma, tau, m: (k / s).ln() })
            };
            let fd_delta = (price_s(1.0 + h) - price_s(1.0 - h)) / (2.0 * h);
            assert!(
                ((bs_delta(&q) - fd_delta) / fd_delta).abs() < 1e-6,
                "delta {} vs fd {fd_delta}",
                bs_delta(&q)
            );
            let fd_vega = (bs_price(&BsQuote { sigma: sigma + h, tau, m })
                - bs_price(&BsQuote { sigma: sigma - h, tau, m }))
                / (2.0 * h);
            let vega = bs_vega(&q, 1.0);
            assert!(((vega - fd_vega) / fd_vega).abs() < 1e-6);
        }
    }

    #[test]
    fn implied_vol_round_trip() {
        for &(sigma, tau, m) in &[(0.2, 1.0, 0.0), (0.1, 0.25, -0.15), (0.45, 2.0, 0.3)] {
            let c = bs_price(&BsQuote::new(sigma, tau, m).unwrap());
            let iv = implied_vol(c, tau, m).unwrap();
            assert!((iv - sigma).abs() < 1e-9, "{iv} vs {sigma}");
        }
        let iv = implied_vol(0.07965567455405804, 1.0, 0.0).unwrap();
        assert!((iv - 0.2).abs() < 1e-9);
    }

    #[test]
    fn implied_vol_rejects_bound_prices() {
        assert!(implied_vol(0.0, 1.0, 0.1).is_err()); // at intrinsic (OTM)
        let intrinsic = 1.0 - (-0.1f64).exp();
        assert!(implied_vol(intrinsic, 1.0, -0.1).is_err());
        assert!(implied_vol(1.0, 1.0, 0.0).is_err());
        assert!(implied_vol(1.2, 1.0, 0.0).is_err());
    }

    #[test]
    fn quote_validation() {
        assert!(BsQuote::new(0.0, 1.0, 0.0).is_err());
        assert!(BsQuote::new(0.2, 0.0, 0.0).is_err());
        assert!(BsQuote::new(0.2, 1.0, f64::NAN).is_err());
    }
}

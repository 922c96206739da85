//! Market and preference constants plus the closed-form scalar sources of the
//! dual problems.
//!
//! Everything here is a pure function of [`ModelParams`]. The dual variable is
//! `y > 0`; the log-dual variable is `s = ln y`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` = {value} out of range: {constraint}")]
    Range {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error(
        "discount rate {delta} is below the admissible bound {bound} (mu^2(1-p)/(2 p sigma^2) + p)"
    )]
    DiscountTooSmall { delta: f64, bound: f64 },
    #[error("missing model parameter `{0}`")]
    Missing(&'static str),
    #[error("cannot parse model parameter `{key}` from `{raw}`")]
    Parse { key: String, raw: String },
}

/// Unvalidated parameter record, e.g. as read from a config file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawParams {
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
    pub p: f64,
    pub alpha: f64,
    pub horizon: f64,
}

/// Validated model constants.
///
/// * `mu` – excess drift of the risky asset
/// * `sigma` – volatility
/// * `delta` – subjective discount rate
/// * `p` – relative risk aversion, in (0, 1)
/// * `alpha` – drawdown fraction, in (0, 1)
/// * `horizon` – terminal time T
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    mu: f64,
    sigma: f64,
    delta: f64,
    p: f64,
    alpha: f64,
    horizon: f64,
}

/// Coefficients derived once from [`ModelParams`].
///
/// The spatial operator acting on the log-dual value function is
/// `L v = kappa * v_ss - a1 * v_s - a0 * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    pub kappa: f64,
    pub a1: f64,
    pub a0: f64,
    /// Location `-p ln(alpha)` of the upper kink of the sources.
    pub s_alpha: f64,
    /// Initial (and plateau) value `p / (1 - p)`.
    pub v0: f64,
}

pub fn validate_params(raw: RawParams) -> Result<ModelParams, ModelError> {
    fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
        if value.is_finite() && value > 0.0 {
            Ok(())
        } else {
            Err(ModelError::Range {
                name,
                value,
                constraint: "must be a positive finite number",
            })
        }
    }
    fn unit_open(name: &'static str, value: f64) -> Result<(), ModelError> {
        if value.is_finite() && value > 0.0 && value < 1.0 {
            Ok(())
        } else {
            Err(ModelError::Range {
                name,
                value,
                constraint: "must lie in the open interval (0, 1)",
            })
        }
    }

    positive("mu", raw.mu)?;
    positive("sigma", raw.sigma)?;
    positive("T", raw.horizon)?;
    unit_open("p", raw.p)?;
    unit_open("alpha", raw.alpha)?;
    if !raw.delta.is_finite() {
        return Err(ModelError::Range {
            name: "delta",
            value: raw.delta,
            constraint: "must be finite",
        });
    }
    let bound = discount_bound(raw.mu, raw.sigma, raw.p);
    if raw.delta < bound {
        return Err(ModelError::DiscountTooSmall {
            delta: raw.delta,
            bound,
        });
    }
    Ok(ModelParams {
        mu: raw.mu,
        sigma: raw.sigma,
        delta: raw.delta,
        p: raw.p,
        alpha: raw.alpha,
        horizon: raw.horizon,
    })
}

/// Smallest admissible discount rate `mu^2 (1-p) / (2 p sigma^2) + p`.
pub fn discount_bound(mu: f64, sigma: f64, p: f64) -> f64 {
    mu * mu * (1.0 - p) / (2.0 * p * sigma * sigma) + p
}

impl ModelParams {
    pub fn new(
        mu: f64,
        sigma: f64,
        delta: f64,
        p: f64,
        alpha: f64,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        validate_params(RawParams {
            mu,
            sigma,
            delta,
            p,
            alpha,
            horizon,
        })
    }

    /// Parameter set used throughout the documentation and acceptance suite.
    pub fn reference() -> Self {
        Self::new(0.06, 0.2, 0.6, 0.5, 0.5, 1.0).expect("reference parameters are admissible")
    }

    /// Builds parameters from flat `key -> value` pairs (`mu`, `sigma`,
    /// `delta`, `p`, `alpha`, `T`).
    pub fn from_key_values(map: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |key: &'static str| -> Result<f64, ModelError> {
            let raw = map.get(key).ok_or(ModelError::Missing(key))?;
            raw.trim().parse::<f64>().map_err(|_| ModelError::Parse {
                key: key.to_string(),
                raw: raw.clone(),
            })
        };
        validate_params(RawParams {
            mu: get("mu")?,
            sigma: get("sigma")?,
            delta: get("delta")?,
            p: get("p")?,
            alpha: get("alpha")?,
            horizon: get("T")?,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Copy with a different drawdown fraction.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, ModelError> {
        Self::new(self.mu, self.sigma, self.delta, self.p, alpha, self.horizon)
    }

    pub fn derived(&self) -> DerivedConstants {
        let ratio = self.mu * self.mu / (self.sigma * self.sigma);
        let p = self.p;
        DerivedConstants {
            kappa: 0.5 * ratio,
            a1: (2.0 - p) / (2.0 * p) * ratio - self.delta,
            a0: self.delta / p - ratio * (1.0 - p) / (2.0 * p * p),
            s_alpha: -p * self.alpha.ln(),
            v0: p / (1.0 - p),
        }
    }

    /// `(1 - p) / p`, the exponent linking `v` and the log-dual value.
    pub fn k(&self) -> f64 {
        (1.0 - self.p) / self.p
    }

    /// Merton fraction `mu / (p sigma^2)` of wealth held in the risky asset.
    pub fn merton_fraction(&self) -> f64 {
        self.mu / (self.p * self.sigma * self.sigma)
    }

    pub fn utility(&self, c: f64) -> f64 {
        if c <= 0.0 {
            0.0
        } else {
            c.powf(1.0 - self.p) / (1.0 - self.p)
        }
    }
}

impl fmt::Display for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mu={} sigma={} delta={} p={} alpha={} T={}",
            self.mu, self.sigma, self.delta, self.p, self.alpha, self.horizon
        )
    }
}

/// Source term `f(y)` of the dual variational inequality.
pub fn dual_source_f(y: f64, params: &ModelParams) -> f64 {
    let p = params.p;
    let alpha = params.alpha;
    let upper = alpha.powf(-p);
    if y >= upper {
        alpha * y - alpha.powf(1.0 - p) / (1.0 - p)
    } else if y > 1.0 {
        -p / (1.0 - p) * y.powf(1.0 - 1.0 / p)
    } else {
        y - 1.0 / (1.0 - p)
    }
}

/// `f(e^s)`, with the branch cutoffs placed at `s = 0` and `s = -p ln alpha`.
pub fn tilde_source(s: f64, params: &ModelParams) -> f64 {
    let p = params.p;
    let alpha = params.alpha;
    let s_alpha = -p * alpha.ln();
    if s >= s_alpha {
        alpha * s.exp() - alpha.powf(1.0 - p) / (1.0 - p)
    } else if s > 0.0 {
        -p / (1.0 - p) * ((p - 1.0) / p * s).exp()
    } else {
        s.exp() - 1.0 / (1.0 - p)
    }
}

/// Weighted source `e^{((1-p)/p) s} f~(s)` entering the equation for `v`.
///
/// Evaluated branch by branch so that the middle branch is exactly the
/// constant `-p/(1-p)`.
pub fn weighted_source(s: f64, params: &ModelParams) -> f64 {
    let p = params.p;
    let alpha = params.alpha;
    let k = params.k();
    let s_alpha = -p * alpha.ln();
    if s >= s_alpha {
        alpha * (s / p).exp() - alpha.powf(1.0 - p) / (1.0 - p) * (k * s).exp()
    } else if s > 0.0 {
        -p / (1.0 - p)
    } else {
        (s / p).exp() - (k * s).exp() / (1.0 - p)
    }
}

/// Obstacle-problem source `g(s) = -(d/ds) weighted_source(s)`.
pub fn obstacle_source_g(s: f64, params: &ModelParams) -> f64 {
    let p = params.p;
    let alpha = params.alpha;
    let weight = (params.k() * s).exp();
    let mut g = 0.0;
    if s.exp() >= alpha.powf(-p) {
        g += alpha / p * weight * (alpha.powf(-p) - s.exp());
    }
    if s <= 0.0 {
        g += weight * (1.0 - s.exp()) / p;
    }
    g
}

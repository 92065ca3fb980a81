//! Turns per-domain distances into adapter mixing weights.
//!
//! Weights are a softmax over `-√d/τ`, with the temperature τ scheduled per
//! encoder block: `τ = a·g(l/L) + b` for a monotonically decreasing `g`.
//! Shallow blocks run warm (knowledge is shared), deep blocks run cold
//! (selection sharpens toward the nearest domain).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of the decreasing schedule function `g`; all satisfy g(0)=1, g(1)=0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    Linear,
    Cosinoidal,
    Exponential,
    Logarithmic,
    SquareRoot,
}

impl ScheduleFamily {
    pub fn all() -> [ScheduleFamily; 5] {
        [
            ScheduleFamily::Linear,
            ScheduleFamily::Cosinoidal,
            ScheduleFamily::Exponential,
            ScheduleFamily::Logarithmic,
            ScheduleFamily::SquareRoot,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleFamily::Linear => "linear",
            ScheduleFamily::Cosinoidal => "cosinoidal",
            ScheduleFamily::Exponential => "exponential",
            ScheduleFamily::Logarithmic => "logarithmic",
            ScheduleFamily::SquareRoot => "square_root",
        }
    }
}

impl std::str::FromStr for ScheduleFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleFamily::Linear),
            "cosinoidal" => Ok(ScheduleFamily::Cosinoidal),
            "exponential" => Ok(ScheduleFamily::Exponential),
            "logarithmic" => Ok(ScheduleFamily::Logarithmic),
            "square_root" => Ok(ScheduleFamily::SquareRoot),
            other => Err(Error::Param(format!("unknown schedule family '{other}'"))),
        }
    }
}

/// Evaluate the decreasing schedule function on `x ∈ [0, 1]`.
pub fn schedule_g(family: ScheduleFamily, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Param(format!("schedule argument {x} outside [0,1]")));
    }
    let e = std::f64::consts::E;
    Ok(match family {
        ScheduleFamily::Linear => 1.0 - x,
        ScheduleFamily::Cosinoidal => (std::f64::consts::FRAC_PI_2 * x).cos(),
        ScheduleFamily::Exponential => 1.0 - (x.exp() - 1.0) / (e - 1.0),
        ScheduleFamily::Logarithmic => 1.0 - (1.0 + (e - 1.0) * x).ln(),
        ScheduleFamily::SquareRoot => 1.0 - x.sqrt(),
    })
}

/// Per-block temperature schedule `τ(l) = a·g(l/L) + b`, `1 ≤ l ≤ L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    /// Scale factor; 0 collapses the schedule to the constant `b`.
    pub a: f64,
    /// Shift factor; keeps the temperature strictly positive.
    pub b: f64,
    pub total_layers: usize,
}

impl ScheduleConfig {
    pub fn new(family: ScheduleFamily, a: f64, b: f64, total_layers: usize) -> Result<Self> {
        let cfg = Self {
            family,
            a,
            b,
            total_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a < 0.0 {
            return Err(Error::Param(format!("schedule scale a={} < 0", self.a)));
        }
        if self.b <= 0.0 {
            return Err(Error::Param(format!(
                "schedule shift b={} must be positive",
                self.b
            )));
        }
        if self.total_layers == 0 {
            return Err(Error::Param("schedule needs at least one layer".into()));
        }
        Ok(())
    }

    /// Temperature at 1-based layer index `l`.
    pub fn temperature(&self, l: usize) -> Result<f64> {
        if l < 1 || l > self.total_layers {
            return Err(Error::Index(format!(
                "layer {l} outside 1..={}",
                self.total_layers
            )));
        }
        let x = l as f64 / self.total_layers as f64;
        Ok(self.a * schedule_g(self.family, x)? + self.b)
    }

    /// Temperatures for every layer, shallow to deep.
    pub fn temperatures(&self) -> Result<Vec<f64>> {
        (1..=self.total_layers).map(|l| self.temperature(l)).collect()
    }
}

/// Normalized mixing weights over the registered domains.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    /// Wrap raw weights; they must be non-negative and sum to 1. Softmax
    /// routing always produces strictly positive entries; exact zeros only
    /// arise from forced one-hot evaluation.
    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Empty("mixing weights".into()));
        }
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Param("mixing weights must be non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("mixing weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    /// Exact one-hot selection of a single domain (forced self-routing).
    /// Zero-weight adapters are skipped entirely during mixing, so this
    /// reproduces the selected step's function bit for bit.
    pub fn one_hot(len: usize, hot: usize) -> Result<Self> {
        if hot >= len {
            return Err(Error::Index(format!("one-hot index {hot} of {len}")));
        }
        let mut w = vec![0.0; len];
        w[hot] = 1.0;
        Ok(Self(w))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().map(|&w| w * w.ln()).sum::<f64>()
    }
}

/// Softmax over `-√dᵢ/τ`, computed with max-subtraction so the one-hot
/// temperature regime (τ = 0.05) cannot overflow.
pub fn similarity(distances: &[f64], tau: f64) -> Result<MixWeights> {
    if distances.is_empty() {
        return Err(Error::Empty("distance list".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("temperature {tau} must be positive")));
    }
    if let Some(&bad) = distances.iter().find(|&&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::Param(format!("distance {bad} must be finite and >= 0")));
    }
    let scores: Vec<f64> = distances.iter().map(|&d| -d.sqrt() / tau).collect();
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights = exps.iter().map(|&e| (e / sum).max(f64::MIN_POSITIVE)).collect();
    Ok(MixWeights(weights))
}

/// Mixing weights for every layer of a schedule at once.
pub fn similarity_per_layer(distances: &[f64], schedule: &ScheduleConfig) -> Result<Vec<MixWeights>> {
    schedule
        .temperatures()?
        .into_iter()
        .map(|tau| similarity(distances, tau))
        .collect()
}

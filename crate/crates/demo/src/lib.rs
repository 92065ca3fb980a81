//! Browser demo bindings for the routing primitives: temperature
//! schedules, distance-to-weight softmax routing, and the 2-Wasserstein
//! distance between 2-D Gaussians.
//!
//! Everything returns JSON strings so the page needs no binding glue
//! beyond `JSON.parse`. The crate also compiles natively, which is how its
//! tests run.

use adl_core::numerics::Matrix;
use adl_core::selector::{schedule_g, similarity, ScheduleConfig, ScheduleFamily};
use adl_core::stats::{w2_distance, GaussianStats};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn err_js(e: adl_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
struct ScheduleCurve {
    family: String,
    /// Sampled (x, g(x)) pairs on [0, 1].
    curve: Vec<(f64, f64)>,
    /// Per-layer temperatures, shallow to deep.
    temperatures: Vec<f64>,
}

fn one_curve(fam: ScheduleFamily, a: f64, b: f64, layers: usize) -> adl_core::Result<ScheduleCurve> {
    let cfg = ScheduleConfig::new(fam, a, b, layers)?;
    Ok(ScheduleCurve {
        family: fam.name().to_string(),
        curve: (0..=100)
            .map(|i| {
                let x = i as f64 / 100.0;
                (x, schedule_g(fam, x).expect("x in range"))
            })
            .collect(),
        temperatures: cfg.temperatures()?,
    })
}

fn schedule_curve_impl(family: &str, a: f64, b: f64, layers: usize) -> adl_core::Result<String> {
    let out = one_curve(family.parse::<ScheduleFamily>()?, a, b, layers)?;
    Ok(serde_json::to_string(&out).expect("serializable"))
}

/// Evaluate one schedule family: the g curve plus per-layer temperatures
/// for τ = a·g(l/L) + b.
#[wasm_bindgen]
pub fn schedule_curve(family: &str, a: f64, b: f64, layers: usize) -> Result<String, JsValue> {
    schedule_curve_impl(family, a, b, layers).map_err(err_js)
}

fn schedule_curves_all_impl(a: f64, b: f64, layers: usize) -> adl_core::Result<String> {
    let all: Vec<ScheduleCurve> = ScheduleFamily::all()
        .into_iter()
        .map(|fam| one_curve(fam, a, b, layers))
        .collect::<adl_core::Result<_>>()?;
    Ok(serde_json::to_string(&all).expect("serializable"))
}

/// All five families' curves at once (for the comparison plot).
#[wasm_bindgen]
pub fn schedule_curves_all(a: f64, b: f64, layers: usize) -> Result<String, JsValue> {
    schedule_curves_all_impl(a, b, layers).map_err(err_js)
}

#[derive(Serialize)]
struct RoutingOut {
    temperatures: Vec<f64>,
    /// weights[layer][domain]
    weights: Vec<Vec<f64>>,
    entropies: Vec<f64>,
}

fn routing_weights_impl(
    distances: &[f64],
    family: &str,
    a: f64,
    b: f64,
    layers: usize,
) -> adl_core::Result<String> {
    let fam = family.parse::<ScheduleFamily>()?;
    let cfg = ScheduleConfig::new(fam, a, b, layers)?;
    let temperatures = cfg.temperatures()?;
    let mut weights = Vec::with_capacity(layers);
    let mut entropies = Vec::with_capacity(layers);
    for &tau in &temperatures {
        let w = similarity(distances, tau)?;
        entropies.push(w.entropy());
        weights.push(w.weights().to_vec());
    }
    Ok(serde_json::to_string(&RoutingOut {
        temperatures,
        weights,
        entropies,
    })
    .expect("serializable"))
}

/// Per-layer mixing weights for a vector of squared distances under the
/// scheduled softmax router.
#[wasm_bindgen]
pub fn routing_weights(
    distances: Vec<f64>,
    family: &str,
    a: f64,
    b: f64,
    layers: usize,
) -> Result<String, JsValue> {
    routing_weights_impl(&distances, family, a, b, layers).map_err(err_js)
}

#[derive(Serialize)]
struct W2Out {
    total: f64,
    mean_term: f64,
    cov_term: f64,
    /// Softmax weight the second Gaussian receives at temperature `tau`
    /// when a test distribution sits exactly on the first.
    other_weight_at_tau: f64,
}

fn gauss2d(mx: f64, my: f64, sx: f64, sy: f64, rho: f64) -> adl_core::Result<GaussianStats> {
    if sx <= 0.0 || sy <= 0.0 {
        return Err(adl_core::Error::Param(
            "standard deviations must be positive".into(),
        ));
    }
    if !(-0.99..=0.99).contains(&rho) {
        return Err(adl_core::Error::Param(
            "correlation must be in [-0.99, 0.99]".into(),
        ));
    }
    let cov = Matrix::from_vec(2, 2, vec![sx * sx, rho * sx * sy, rho * sx * sy, sy * sy])?;
    GaussianStats::from_parts(vec![mx, my], cov, 2)
}

#[allow(clippy::too_many_arguments)]
fn wasserstein_2d_impl(
    m1x: f64,
    m1y: f64,
    s1x: f64,
    s1y: f64,
    rho1: f64,
    m2x: f64,
    m2y: f64,
    s2x: f64,
    s2y: f64,
    rho2: f64,
    tau: f64,
) -> adl_core::Result<String> {
    let a = gauss2d(m1x, m1y, s1x, s1y, rho1)?;
    let b = gauss2d(m2x, m2y, s2x, s2y, rho2)?;
    let total = w2_distance(&a, &b)?;
    let mean_term = (m1x - m2x).powi(2) + (m1y - m2y).powi(2);
    let cov_term = (total - mean_term).max(0.0);
    let w = similarity(&[0.0, total], tau)?;
    Ok(serde_json::to_string(&W2Out {
        total,
        mean_term,
        cov_term,
        other_weight_at_tau: w.weights()[1],
    })
    .expect("serializable"))
}

/// Squared 2-Wasserstein distance between two 2-D Gaussians given as
/// (mean, std-x, std-y, correlation), with its mean/covariance split.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn wasserstein_2d(
    m1x: f64,
    m1y: f64,
    s1x: f64,
    s1y: f64,
    rho1: f64,
    m2x: f64,
    m2y: f64,
    s2x: f64,
    s2y: f64,
    rho2: f64,
    tau: f64,
) -> Result<String, JsValue> {
    wasserstein_2d_impl(m1x, m1y, s1x, s1y, rho1, m2x, m2y, s2x, s2y, rho2, tau).map_err(err_js)
}

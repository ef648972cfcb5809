//! Three interactive views for the browser page in `www/`. Each returns a JSON
//! string so the page can plot it on a canvas; the `*_js` wrappers are the
//! exported entry points.

use pcm_selfrepair::device::{self, DeviceConfig};
use pcm_selfrepair::quantizer::{self, AnnealConfig};
use pcm_selfrepair::rng::substream;
use pcm_selfrepair::Result;
use rand::Rng;
use rand_distr::Exp;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Conductance of `cells` freshly programmed devices over `[t_ref, t_max]`
/// seconds on a log time axis, with read noise, plus the noiseless mean.
pub fn drift_curves(nu_mean: f64, nu_std: f64, cells: usize, t_max: f64, points: usize, seed: u64) -> Result<String> {
    let cfg = DeviceConfig {
        drift_nu_mean: nu_mean,
        drift_nu_std: nu_std,
        ..DeviceConfig::default()
    };
    cfg.validate()?;
    let points = points.max(2);
    let times: Vec<f64> = (0..points)
        .map(|k| cfg.t_ref * (t_max / cfg.t_ref).powf(k as f64 / (points - 1) as f64))
        .collect();
    let mut rng = substream(seed, "demo-drift", &[]);
    let g0 = 0.8 * cfg.g_max;
    let mut curves = Vec::with_capacity(cells);
    let mut nus = Vec::with_capacity(cells);
    for _ in 0..cells {
        let nu = device::sample_nu(&cfg, &mut rng);
        let g = times
            .iter()
            .map(|&t| device::read_cell(g0, 0.0, t, nu, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        curves.push(g);
        nus.push(nu);
    }
    let mean = times
        .iter()
        .map(|&t| device::drift(g0, 0.0, t, nu_mean, cfg.t_ref))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "times": times, "curves": curves, "nu": nus, "mean": mean, "g_max": cfg.g_max }).to_string())
}

/// Anneal a dual bin set on Laplace-distributed weights and report both level
/// sets, the combined set and how many weights land on each combined value.
pub fn bin_distribution(
    n_weights: usize,
    delta_write: f64,
    epsilon_read: f64,
    iterations: usize,
    seed: u64,
) -> Result<String> {
    let mut rng = substream(seed, "demo-weights", &[]);
    // Laplace weights: exponential magnitude, random sign
    let mag = Exp::new(1.0 / 0.15).expect("positive rate");
    let weights: Vec<f64> = (0..n_weights.max(1))
        .map(|_| {
            let w: f64 = rng.sample(mag);
            if rng.random::<bool>() {
                w
            } else {
                -w
            }
        })
        .collect();
    let cfg = AnnealConfig {
        iterations: iterations.max(1),
        rng_seed: seed,
        ..AnnealConfig::default()
    };
    let out = quantizer::anneal(&weights, &cfg, delta_write, epsilon_read)?;
    let s = &out.scheme;
    let (dec, _) = quantizer::decompose(&weights, 1, weights.len(), s)?;
    let counts = quantizer::bin_population(&[dec], s);
    Ok(json!({
        "pos": { "base": s.pos.base, "levels": s.pos.levels().collect::<Vec<_>>() },
        "neg": { "base": s.neg.base, "levels": s.neg.levels().collect::<Vec<_>>() },
        "sq": s.sq_values(),
        "counts": counts,
        "weights": weights,
        "mse": out.error,
        "initial_mse": out.initial_error,
        "uniform_mse": quantizer::uniform_grid_error(&weights, cfg.n_levels, delta_write)?,
    })
    .to_string())
}

/// Relative pulse error over the amplitude range on a log axis, and the
/// empirical spread of `trials` programmed cells at each of a few targets.
pub fn pulse_error_curve(points: usize, trials: usize, seed: u64) -> Result<String> {
    let cfg = DeviceConfig::default();
    let (lo, hi) = (cfg.pulse_err_low.amplitude, cfg.pulse_err_high.amplitude);
    let points = points.max(2);
    let amps: Vec<f64> = (0..points)
        .map(|k| lo * (hi / lo).powf(k as f64 / (points - 1) as f64))
        .collect();
    let errs = amps
        .iter()
        .map(|&a| device::pulse_error(a, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(seed, "demo-pulse", &[]);
    let mut samples = Vec::new();
    for k in 1..=10 {
        let target = cfg.g_max * k as f64 / 10.0;
        let amp = device::pulse_amplitude(target, &cfg);
        let draws = (0..trials.max(2))
            .map(|_| device::program(target, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0);
        samples.push(json!({ "amplitude": amp, "target": target, "rel_std": var.sqrt() / target }));
    }
    Ok(json!({ "amplitudes": amps, "errors": errs, "samples": samples }).to_string())
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = driftCurves)]
pub fn drift_curves_js(
    nu_mean: f64,
    nu_std: f64,
    cells: usize,
    t_max: f64,
    points: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    js(drift_curves(nu_mean, nu_std, cells, t_max, points, u64::from(seed)))
}

#[wasm_bindgen(js_name = binDistribution)]
pub fn bin_distribution_js(
    n_weights: usize,
    delta_write: f64,
    epsilon_read: f64,
    iterations: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    js(bin_distribution(
        n_weights,
        delta_write,
        epsilon_read,
        iterations,
        u64::from(seed),
    ))
}

#[wasm_bindgen(js_name = pulseErrorCurve)]
pub fn pulse_error_curve_js(points: usize, trials: usize, seed: u32) -> std::result::Result<String, JsValue> {
    js(pulse_error_curve(points, trials, u64::from(seed)))
}

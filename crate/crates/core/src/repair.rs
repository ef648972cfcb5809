//! Drift detection and correction on programmed tiles.
//!
//! Every tile is probed with unit vectors and compared against the probe taken
//! at programming time. When the network-wide difference crosses a threshold,
//! layers whose own difference is large are scanned for cells that moved away
//! from their stored multiples, and those cells get one correction pulse each.

pub mod timeline;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::crossbar::{identity_probe, AnalogNetwork, AnalogTile};
use crate::device::{self, DeviceConfig};
use crate::quantizer::{BinSet, QuantizationScheme};
use crate::rng::SimRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Repair only layers whose own probe difference exceeds the layer threshold.
    PerLayer,
    /// Repair every layer once the global trigger fires.
    WholeNetwork,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationRule {
    /// Threshold is `fraction * base` of the bin set holding the weight.
    StepFraction,
    /// Threshold is `fraction * |stored weight|`.
    LevelFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepairConfig {
    pub global_threshold: f64,
    pub layer_threshold_dt: f64,
    pub deviation_fraction: f64,
    pub deviation_rule: DeviationRule,
    pub scope: Scope,
    /// Seconds between probes.
    pub probe_period: f64,
    /// Interpret both thresholds as fractions of the summed absolute baseline
    /// probe (network-wide, or per layer) instead of absolute weight units.
    pub relative_thresholds: bool,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig {
            global_threshold: 0.15,
            layer_threshold_dt: 0.15,
            deviation_fraction: 1.0 / 3.0,
            deviation_rule: DeviationRule::StepFraction,
            scope: Scope::PerLayer,
            probe_period: 300.0,
            relative_thresholds: true,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("repair: {m}")));
        if !(self.global_threshold > 0.0 && self.layer_threshold_dt > 0.0) {
            return bad("thresholds must be positive");
        }
        if !(self.deviation_fraction > 0.0 && self.deviation_fraction < 0.5) {
            return bad("deviation_fraction must lie in (0, 1/2)");
        }
        if !(self.probe_period > 0.0) {
            return bad("probe_period must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairEvent {
    pub t: f64,
    pub layers_repaired: Vec<usize>,
    /// Pairs that received correction pulses.
    pub weights_touched: usize,
    /// Individual cell pulses (a pair counts up to two).
    pub pulses: usize,
    /// Pairs whose drifted value had already crossed into another multiple.
    pub irreversible_count: usize,
    pub pre_probe_error: f64,
    pub post_probe_error: f64,
}

/// A cell pair selected for correction, with the multiples it is restored to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub m_pos: u32,
    pub m_neg: u32,
}

/// Probe every tile once, in layer order.
pub fn probe_network(anet: &AnalogNetwork, t_now: f64, cfg: &DeviceConfig, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    anet.tiles.iter().map(|t| identity_probe(t, t_now, cfg, rng)).collect()
}

/// `sum |probe - baseline|` for each layer.
pub fn layer_errors(anet: &AnalogNetwork, probes: &[Vec<f64>]) -> Vec<f64> {
    anet.tiles
        .iter()
        .zip(probes)
        .map(|(tile, p)| abs_diff_sum(p, &tile.baseline_probe))
        .collect()
}

fn abs_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn abs_sum(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

/// Network-wide probe difference at `t_now`.
pub fn global_error(anet: &AnalogNetwork, t_now: f64, cfg: &DeviceConfig, rng: &mut SimRng) -> Result<f64> {
    let probes = probe_network(anet, t_now, cfg, rng)?;
    Ok(layer_errors(anet, &probes).iter().sum())
}

/// Whether the summed layer errors cross the global threshold.
pub fn triggered(anet: &AnalogNetwork, errors: &[f64], cfg: &RepairConfig) -> bool {
    let total: f64 = errors.iter().sum();
    let limit = if cfg.relative_thresholds {
        cfg.global_threshold * anet.tiles.iter().map(|t| abs_sum(&t.baseline_probe)).sum::<f64>()
    } else {
        cfg.global_threshold
    };
    total > limit
}

/// Layers to repair once the trigger has fired.
pub fn identify_layers(anet: &AnalogNetwork, errors: &[f64], cfg: &RepairConfig) -> Vec<usize> {
    match cfg.scope {
        Scope::WholeNetwork => (0..anet.tiles.len()).collect(),
        Scope::PerLayer => anet
            .tiles
            .iter()
            .zip(errors)
            .enumerate()
            .filter(|(_, (tile, &e))| {
                let limit = if cfg.relative_thresholds {
                    cfg.layer_threshold_dt * abs_sum(&tile.baseline_probe)
                } else {
                    cfg.layer_threshold_dt
                };
                e > limit
            })
            .map(|(i, _)| i)
            .collect(),
    }
}

/// Largest deviation a stored pair may show before it is corrected.
pub fn deviation_limit(m_pos: u32, m_neg: u32, scheme: &QuantizationScheme, cfg: &RepairConfig) -> f64 {
    let step = match (m_pos > 0, m_neg > 0) {
        (true, false) => scheme.pos.base,
        (false, true) => scheme.neg.base,
        _ => scheme.pos.base.min(scheme.neg.base),
    };
    match cfg.deviation_rule {
        DeviationRule::StepFraction => cfg.deviation_fraction * step,
        DeviationRule::LevelFraction => {
            let level = scheme.value(m_pos, m_neg).abs();
            // a zero weight has no level of its own; fall back to the step
            cfg.deviation_fraction * if level > 0.0 { level } else { step }
        }
    }
}

/// Pairs whose probed weight differs from the stored quantized value by more
/// than the deviation limit (strictly). Targets are the stored multiples.
pub fn candidate_weights(
    tile: &AnalogTile,
    probe: &[f64],
    scheme: &QuantizationScheme,
    cfg: &RepairConfig,
) -> Result<Vec<Candidate>> {
    if probe.len() != tile.len() {
        return Err(Error::shape("probe", tile.len(), probe.len()));
    }
    Ok(tile
        .pairs
        .iter()
        .zip(probe.iter().zip(&tile.ideal))
        .enumerate()
        .filter(|(_, (p, (&read, &ideal)))| {
            (read - ideal).abs() > deviation_limit(p.target_m_pos, p.target_m_neg, scheme, cfg)
        })
        .map(|(index, (p, _))| Candidate {
            index,
            m_pos: p.target_m_pos,
            m_neg: p.target_m_neg,
        })
        .collect())
}

/// Nearest storable multiple on `set` for a weight-unit value; ties go to the
/// smaller multiple.
pub fn nearest_multiple(set: &BinSet, w: f64) -> u32 {
    std::iter::once(0)
        .chain(set.multiples.iter().copied())
        .fold((0u32, f64::INFINITY), |(best, d), m| {
            let dm = (w - set.level(m)).abs();
            if dm < d {
                (m, dm)
            } else {
                (best, d)
            }
        })
        .0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Correction {
    pub touched: usize,
    pub pulses: usize,
    pub irreversible: usize,
}

/// One correction pulse per cell of every candidate pair, aimed at the stored
/// target. The pair restarts its drift clock at `t_now`. Each pair consumes
/// two normal draws.
pub fn correct(
    tile: &mut AnalogTile,
    candidates: &[Candidate],
    scheme: &QuantizationScheme,
    cfg: &DeviceConfig,
    t_now: f64,
    rng: &mut SimRng,
) -> Result<Correction> {
    let mut out = Correction::default();
    let cal = tile.calibration;
    for c in candidates {
        let pair = tile
            .pairs
            .get_mut(c.index)
            .ok_or_else(|| Error::OutOfRange(format!("candidate index {} outside tile", c.index)))?;
        let (g_pos, g_neg) = pair.conductances_at(t_now, cfg)?;
        let now_pos = nearest_multiple(&scheme.pos, cal.to_weight(g_pos));
        let now_neg = nearest_multiple(&scheme.neg, cal.to_weight(g_neg));
        if now_pos != c.m_pos || now_neg != c.m_neg {
            out.irreversible += 1;
        }
        let target_pos = cal.to_conductance(scheme.pos.level(c.m_pos));
        let target_neg = cal.to_conductance(scheme.neg.level(c.m_neg));
        out.pulses += usize::from(g_pos != target_pos) + usize::from(g_neg != target_neg);
        pair.g_pos = device::nudge(g_pos, target_pos, cfg, rng)?;
        pair.g_neg = device::nudge(g_neg, target_neg, cfg, rng)?;
        pair.t_prog = t_now;
        pair.target_m_pos = c.m_pos;
        pair.target_m_neg = c.m_neg;
        out.touched += 1;
    }
    Ok(out)
}

/// Result of one probe/trigger/repair cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub probe_error: f64,
    pub triggered: bool,
    pub event: Option<RepairEvent>,
}

/// Probe, test the trigger and, when it fires, repair the identified layers
/// and probe again. Only quantized networks can be repaired.
pub fn repair_step(
    anet: &mut AnalogNetwork,
    t_now: f64,
    cfg: &RepairConfig,
    dev: &DeviceConfig,
    rng: &mut SimRng,
) -> Result<StepOutcome> {
    let scheme = anet
        .scheme
        .clone()
        .ok_or_else(|| Error::InvalidConfig("repair needs a quantized network".into()))?;
    let probes = probe_network(anet, t_now, dev, rng)?;
    let errors = layer_errors(anet, &probes);
    let probe_error: f64 = errors.iter().sum();
    if !triggered(anet, &errors, cfg) {
        return Ok(StepOutcome {
            probe_error,
            triggered: false,
            event: None,
        });
    }
    let layers = identify_layers(anet, &errors, cfg);
    if layers.is_empty() {
        log::info!("t={t_now}: trigger fired but no layer exceeded its threshold");
    }
    let mut total = Correction::default();
    for &l in &layers {
        let cands = candidate_weights(&anet.tiles[l], &probes[l], &scheme, cfg)?;
        let c = correct(&mut anet.tiles[l], &cands, &scheme, dev, t_now, rng)?;
        total.touched += c.touched;
        total.pulses += c.pulses;
        total.irreversible += c.irreversible;
    }
    let post_probe_error = global_error(anet, t_now, dev, rng)?;
    Ok(StepOutcome {
        probe_error,
        triggered: true,
        event: Some(RepairEvent {
            t: t_now,
            layers_repaired: layers,
            weights_touched: total.touched,
            pulses: total.pulses,
            irreversible_count: total.irreversible,
            pre_probe_error: probe_error,
            post_probe_error,
        }),
    })
}

/// Per-layer output scale `sum |baseline| / sum |probe|`. A layer whose probe
/// sums to zero keeps scale 1.
pub fn global_drift_compensation(
    anet: &AnalogNetwork,
    t_now: f64,
    cfg: &DeviceConfig,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    let probes = probe_network(anet, t_now, cfg, rng)?;
    Ok(anet
        .tiles
        .iter()
        .zip(&probes)
        .enumerate()
        .map(|(i, (tile, p))| {
            let now = abs_sum(p);
            if now == 0.0 {
                warn!("layer {i}: probe sums to zero at t={t_now}, drift compensation disabled");
                1.0
            } else {
                abs_sum(&tile.baseline_probe) / now
            }
        })
        .collect())
}

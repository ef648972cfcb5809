//! Differential PCM weight model: amplitude-dependent programming error,
//! additive read noise and power-law conductance drift.
//!
//! Drift follows `g(t) = g0 * ((t - t_prog + t_ref) / t_ref)^(-nu)` with a
//! per-cell exponent `nu` drawn once when the cell is programmed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::quantizer::QuantizationScheme;
use crate::{Error, Result};

/// Relative programming error of a pulse of the given amplitude (amperes).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseAnchor {
    pub amplitude: f64,
    pub rel_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// Largest programmable conductance (arbitrary conductance units).
    pub g_max: f64,
    /// Additive read noise std, relative to the calibrated weight range.
    pub read_noise_std: f64,
    pub drift_nu_mean: f64,
    pub drift_nu_std: f64,
    /// Drift reference time in seconds.
    pub t_ref: f64,
    pub pulse_err_low: PulseAnchor,
    pub pulse_err_high: PulseAnchor,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            g_max: 25.0,
            read_noise_std: 0.02,
            drift_nu_mean: 0.06,
            drift_nu_std: 0.02,
            t_ref: 1.0,
            pulse_err_low: PulseAnchor {
                amplitude: 100e-9,
                rel_std: 0.06,
            },
            pulse_err_high: PulseAnchor {
                amplitude: 1.28e-3,
                rel_std: 0.002,
            },
        }
    }
}

impl DeviceConfig {
    /// No programming error, no read noise and no drift.
    pub fn ideal() -> Self {
        let d = DeviceConfig::default();
        DeviceConfig {
            read_noise_std: 0.0,
            drift_nu_mean: 0.0,
            drift_nu_std: 0.0,
            pulse_err_low: PulseAnchor {
                rel_std: 0.0,
                ..d.pulse_err_low
            },
            pulse_err_high: PulseAnchor {
                rel_std: 0.0,
                ..d.pulse_err_high
            },
            ..d
        }
    }

    /// Default noise, drift switched off.
    pub fn without_drift(&self) -> Self {
        DeviceConfig {
            drift_nu_mean: 0.0,
            drift_nu_std: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("device: {m}")));
        if !(self.g_max > 0.0 && self.g_max.is_finite()) {
            return bad("g_max must be positive");
        }
        if !(self.read_noise_std >= 0.0 && self.drift_nu_std >= 0.0 && self.drift_nu_mean >= 0.0) {
            return bad("noise stds and drift exponent mean must be non-negative");
        }
        if !(self.t_ref > 0.0) {
            return bad("t_ref must be positive");
        }
        let (lo, hi) = (self.pulse_err_low, self.pulse_err_high);
        if !(lo.amplitude > 0.0 && lo.amplitude < hi.amplitude) {
            return bad("pulse anchors need 0 < low amplitude < high amplitude");
        }
        if !(lo.rel_std >= 0.0 && hi.rel_std >= 0.0 && hi.rel_std <= lo.rel_std) {
            return bad("pulse errors must be non-negative and non-increasing with amplitude");
        }
        Ok(())
    }
}

/// Relative std of a programming pulse: log-log interpolation between the two
/// anchors, clamped to the anchor values outside their amplitude range.
pub fn pulse_error(amplitude: f64, cfg: &DeviceConfig) -> Result<f64> {
    if !(amplitude > 0.0) {
        return Err(Error::OutOfRange(format!(
            "pulse amplitude {amplitude} must be positive"
        )));
    }
    let (lo, hi) = (cfg.pulse_err_low, cfg.pulse_err_high);
    if amplitude <= lo.amplitude {
        return Ok(lo.rel_std);
    }
    if amplitude >= hi.amplitude {
        return Ok(hi.rel_std);
    }
    let t = (amplitude.ln() - lo.amplitude.ln()) / (hi.amplitude.ln() - lo.amplitude.ln());
    if lo.rel_std > 0.0 && hi.rel_std > 0.0 {
        Ok((lo.rel_std.ln() + t * (hi.rel_std.ln() - lo.rel_std.ln())).exp())
    } else {
        // log of zero is undefined; fall back to interpolating the stds
        // themselves against log-amplitude.
        Ok(lo.rel_std + t * (hi.rel_std - lo.rel_std))
    }
}

/// Pulse amplitude for a conductance change of `delta_g`: linear in
/// `|delta_g| / g_max` between the two anchor amplitudes.
pub fn pulse_amplitude(delta_g: f64, cfg: &DeviceConfig) -> f64 {
    let frac = (delta_g.abs() / cfg.g_max).clamp(0.0, 1.0);
    let (lo, hi) = (cfg.pulse_err_low.amplitude, cfg.pulse_err_high.amplitude);
    lo + frac * (hi - lo)
}

/// Program a cell from zero to `target_g`. Always consumes one normal draw.
pub fn program<R: Rng>(target_g: f64, cfg: &DeviceConfig, rng: &mut R) -> Result<f64> {
    if !(0.0..=cfg.g_max).contains(&target_g) {
        return Err(Error::OutOfRange(format!(
            "target conductance {target_g} outside [0, {}]",
            cfg.g_max
        )));
    }
    let std = pulse_error(pulse_amplitude(target_g, cfg), cfg)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok((target_g * (1.0 + std * z)).clamp(0.0, cfg.g_max))
}

/// Correction pulse from `current_g` toward `target_g`; the relative error
/// applies to the delivered change. Always consumes one normal draw.
pub fn nudge<R: Rng>(current_g: f64, target_g: f64, cfg: &DeviceConfig, rng: &mut R) -> Result<f64> {
    let delta = target_g - current_g;
    let std = pulse_error(pulse_amplitude(delta, cfg), cfg)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok((target_g + delta * std * z).clamp(0.0, cfg.g_max))
}

pub fn drift(g0: f64, t_prog: f64, t_now: f64, nu: f64, t_ref: f64) -> Result<f64> {
    if t_now < t_prog {
        return Err(Error::OutOfRange(format!(
            "read time {t_now} precedes programming time {t_prog}"
        )));
    }
    Ok(g0 * ((t_now - t_prog + t_ref) / t_ref).powf(-nu))
}

/// Least-squares fit of `ln g = ln g0 - nu * ln((t - t_prog + t_ref) / t_ref)`
/// to a conductance trace. Returns `(g0, nu)`.
pub fn fit_drift(times: &[f64], values: &[f64], t_prog: f64, t_ref: f64) -> Result<(f64, f64)> {
    if times.len() != values.len() {
        return Err(Error::shape("drift trace", times.len(), values.len()));
    }
    if times.len() < 2 {
        return Err(Error::Empty("drift trace needs at least two points"));
    }
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::OutOfRange("drift trace has non-positive conductances".into()));
    }
    let xs: Vec<f64> = times.iter().map(|&t| ((t - t_prog + t_ref) / t_ref).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::OutOfRange(
            "drift trace needs at least two distinct times".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(((my - slope * mx).exp(), -slope))
}

/// One noisy read of a single cell's conductance; the noise std is
/// `read_noise_std * g_max`. Consumes one normal draw.
pub fn read_cell<R: Rng>(g0: f64, t_prog: f64, t_now: f64, nu: f64, cfg: &DeviceConfig, rng: &mut R) -> Result<f64> {
    let g = drift(g0, t_prog, t_now, nu, cfg.t_ref)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok(g + cfg.read_noise_std * cfg.g_max * z)
}

/// Per-cell drift exponent, Normal(mean, std) clamped at zero. Always
/// consumes one normal draw.
pub fn sample_nu<R: Rng>(cfg: &DeviceConfig, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (cfg.drift_nu_mean + cfg.drift_nu_std * z).max(0.0)
}

/// Linear map between weight units and conductance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Conductance per unit weight.
    pub scale: f64,
    /// Weight magnitude mapped to `g_max`; read noise is relative to it.
    pub w_range: f64,
}

impl Calibration {
    pub fn to_conductance(&self, w: f64) -> f64 {
        w * self.scale
    }

    pub fn to_weight(&self, g: f64) -> f64 {
        g / self.scale
    }
}

/// Calibration mapping the largest representable magnitude of `scheme` to
/// `g_max`.
///
/// The scale is picked among the few floats nearest `g_max / v_max` so that
/// every level converts to conductance and back without rounding, which
/// makes a noiseless analog read bit-identical to the digital weight.
pub fn weight_to_conductance(scheme: &QuantizationScheme, cfg: &DeviceConfig) -> Result<Calibration> {
    let v_max = scheme.max_abs_value();
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(Error::InvalidConfig("scheme has no non-zero levels".into()));
    }
    let levels: Vec<f64> = scheme.pos.levels().chain(scheme.neg.levels()).collect();
    Ok(Calibration {
        scale: exact_scale(cfg.g_max, v_max, &levels),
        w_range: v_max,
    })
}

/// Calibration for unquantized weights whose largest magnitude is `max_abs`.
pub fn calibration_for_range(max_abs: f64, cfg: &DeviceConfig) -> Result<Calibration> {
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return Err(Error::InvalidConfig(format!("weight range {max_abs} must be positive")));
    }
    Ok(Calibration {
        scale: exact_scale(cfg.g_max, max_abs, &[max_abs]),
        w_range: max_abs,
    })
}

fn exact_scale(g_max: f64, v_max: f64, levels: &[f64]) -> f64 {
    let s0 = g_max / v_max;
    let fits = |s: f64, exact_top: bool| {
        (!exact_top || v_max * s == g_max) && levels.iter().all(|&l| l * s <= g_max && (l * s) / s == l)
    };
    for exact_top in [true, false] {
        let (mut up, mut down) = (s0, s0);
        for _ in 0..512 {
            if fits(up, exact_top) {
                return up;
            }
            if fits(down, exact_top) {
                return down;
            }
            up = up.next_up();
            down = down.next_down();
        }
    }
    // No exact candidate nearby; stay below g_max.
    let mut s = s0;
    while v_max * s > g_max {
        s = s.next_down();
    }
    s
}

/// One signed weight stored as two cells, positive line minus negative line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcmPair {
    pub g_pos: f64,
    pub g_neg: f64,
    pub nu_pos: f64,
    pub nu_neg: f64,
    pub t_prog: f64,
    pub target_m_pos: u32,
    pub target_m_neg: u32,
}

impl PcmPair {
    /// Program both cells to the conductances of the two weight-unit targets.
    /// Consumes four normal draws: two pulses, then two drift exponents.
    #[allow(clippy::too_many_arguments)]
    pub fn program<R: Rng>(
        w_pos: f64,
        w_neg: f64,
        targets: (u32, u32),
        cal: &Calibration,
        cfg: &DeviceConfig,
        t_prog: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g_pos = program(cal.to_conductance(w_pos), cfg, rng)?;
        let g_neg = program(cal.to_conductance(w_neg), cfg, rng)?;
        let nu_pos = sample_nu(cfg, rng);
        let nu_neg = sample_nu(cfg, rng);
        Ok(PcmPair {
            g_pos,
            g_neg,
            nu_pos,
            nu_neg,
            t_prog,
            target_m_pos: targets.0,
            target_m_neg: targets.1,
        })
    }

    /// Drifted conductances of both cells.
    pub fn conductances_at(&self, t_now: f64, cfg: &DeviceConfig) -> Result<(f64, f64)> {
        Ok((
            drift(self.g_pos, self.t_prog, t_now, self.nu_pos, cfg.t_ref)?,
            drift(self.g_neg, self.t_prog, t_now, self.nu_neg, cfg.t_ref)?,
        ))
    }

    /// Differential weight without read noise.
    pub fn weight_at(&self, t_now: f64, cal: &Calibration, cfg: &DeviceConfig) -> Result<f64> {
        let (p, n) = self.conductances_at(t_now, cfg)?;
        Ok(cal.to_weight(p) - cal.to_weight(n))
    }
}

/// One noisy readout of a pair's weight. Always consumes one normal draw.
pub fn read<R: Rng>(pair: &PcmPair, t_now: f64, cal: &Calibration, cfg: &DeviceConfig, rng: &mut R) -> Result<f64> {
    let w = pair.weight_at(t_now, cal, cfg)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok(w + cfg.read_noise_std * cal.w_range * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::BinSet;
    use crate::rng::substream;

    fn std_of(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    }

    #[test]
    fn pulse_error_anchors_and_interpolation() {
        let cfg = DeviceConfig::default();
        assert_eq!(pulse_error(100e-9, &cfg).unwrap(), 0.06);
        assert_eq!(pulse_error(1.28e-3, &cfg).unwrap(), 0.002);
        assert_eq!(pulse_error(1e-9, &cfg).unwrap(), 0.06);
        assert_eq!(pulse_error(1.0, &cfg).unwrap(), 0.002);
        // geometric midpoint of the amplitudes -> geometric mean of the errors
        let mid = (100e-9f64 * 1.28e-3).sqrt();
        let hand = (0.06f64 * 0.002).sqrt(); // 0.0109544...
        let got = pulse_error(mid, &cfg).unwrap();
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
        assert!(got > 0.002 && got < 0.06);
        assert!(pulse_error(0.0, &cfg).is_err());
        assert!(pulse_error(-1.0, &cfg).is_err());
    }

    #[test]
    fn program_edge_cases() {
        let cfg = DeviceConfig::default();
        let mut rng = substream(0, "t", &[]);
        assert_eq!(program(0.0, &cfg, &mut rng).unwrap(), 0.0);
        assert!(program(-0.1, &cfg, &mut rng).is_err());
        assert!(program(25.1, &cfg, &mut rng).is_err());
        let ideal = DeviceConfig::ideal();
        for &g in &[0.0, 0.3, 12.5, 25.0] {
            assert_eq!(program(g, &ideal, &mut rng).unwrap(), g);
        }
    }

    #[test]
    fn program_noise_matches_pulse_error() {
        let cfg = DeviceConfig::default();
        let target = cfg.g_max / 2.0;
        let expected = pulse_error(pulse_amplitude(target, &cfg), &cfg).unwrap();
        let mut rng = substream(1, "mc", &[]);
        let rel: Vec<f64> = (0..100_000)
            .map(|_| program(target, &cfg, &mut rng).unwrap() / target - 1.0)
            .collect();
        let s = std_of(&rel);
        assert!((s / expected - 1.0).abs() < 0.1, "{s} vs {expected}");
    }

    #[test]
    fn drift_cases() {
        assert_eq!(drift(7.0, 3.0, 3.0, 0.06, 1.0).unwrap(), 7.0);
        assert_eq!(drift(7.0, 0.0, 1e6, 0.0, 1.0).unwrap(), 7.0);
        // 10 * 301^-0.06 = 10 * exp(-0.06 * 5.70711) = 10 * exp(-0.342427) = 7.10045
        let hand = 10.0 * (-0.06 * 301f64.ln()).exp();
        let got = drift(10.0, 0.0, 300.0, 0.06, 1.0).unwrap();
        assert!((got - hand).abs() < 1e-12);
        assert!((got - 7.10045).abs() < 1e-5);
        assert!(drift(1.0, 5.0, 4.0, 0.06, 1.0).is_err());
        let mut prev = f64::INFINITY;
        for t in [0.0, 1.0, 10.0, 300.0, 6000.0] {
            let g = drift(20.0, 0.0, t, 0.1, 1.0).unwrap();
            assert!(g <= prev);
            prev = g;
        }
    }

    #[test]
    fn read_cases() {
        let cfg = DeviceConfig::ideal();
        let cal = Calibration {
            scale: 50.0,
            w_range: 0.5,
        };
        let mut rng = substream(2, "r", &[]);
        let mut pair = PcmPair {
            g_pos: 4.0,
            g_neg: 4.0,
            nu_pos: 0.0,
            nu_neg: 0.0,
            t_prog: 0.0,
            target_m_pos: 1,
            target_m_neg: 1,
        };
        assert_eq!(read(&pair, 10.0, &cal, &cfg, &mut rng).unwrap(), 0.0);
        pair.g_pos = 9.0;
        pair.nu_pos = 0.2;
        assert_eq!(read(&pair, 0.0, &cal, &cfg, &mut rng).unwrap(), 9.0 / 50.0 - 4.0 / 50.0);
    }

    #[test]
    fn read_noise_std_matches_config() {
        let cfg = DeviceConfig::default();
        let cal = Calibration {
            scale: 25.0,
            w_range: 1.0,
        };
        let pair = PcmPair {
            g_pos: 10.0,
            g_neg: 2.0,
            nu_pos: 0.05,
            nu_neg: 0.07,
            t_prog: 0.0,
            target_m_pos: 0,
            target_m_neg: 0,
        };
        let mut rng = substream(3, "r", &[]);
        let reads: Vec<f64> = (0..100_000)
            .map(|_| read(&pair, 300.0, &cal, &cfg, &mut rng).unwrap())
            .collect();
        let s = std_of(&reads);
        assert!((s / 0.02 - 1.0).abs() < 0.1, "{s}");
    }

    #[test]
    fn calibration_maps_largest_level_to_g_max() {
        let cfg = DeviceConfig::default();
        let scheme = QuantizationScheme::new(
            BinSet::new(0.013, vec![1, 2, 3, 5, 8, 9, 12, 15]).unwrap(),
            BinSet::new(0.021, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap(),
            0.005,
            0.001,
        );
        let cal = weight_to_conductance(&scheme, &cfg).unwrap();
        let v = scheme.max_abs_value();
        assert!((cal.scale - cfg.g_max / v).abs() <= 1e-12 * cal.scale);
        let top = cal.to_conductance(v);
        assert!(top <= cfg.g_max && cfg.g_max - top < 1e-12);
        assert!((cal.to_conductance(v / 2.0) - cfg.g_max / 2.0).abs() < 1e-12);
        for l in scheme.pos.levels().chain(scheme.neg.levels()) {
            assert_eq!(cal.to_weight(cal.to_conductance(l)), l);
            assert!(cal.to_conductance(l) <= cfg.g_max);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DeviceConfig::default().validate().is_ok());
        assert!(DeviceConfig::ideal().validate().is_ok());
        let mut c = DeviceConfig::default();
        c.pulse_err_low.amplitude = 2e-3;
        assert!(c.validate().is_err());
        let c = DeviceConfig {
            g_max: 0.0,
            ..DeviceConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ideal_pulse_error_is_zero_everywhere() {
        let cfg = DeviceConfig::ideal();
        for a in [1e-9, 1e-7, 3e-5, 1e-3, 1.0] {
            assert_eq!(pulse_error(a, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn fit_drift_recovers_exponent() {
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 300.0).collect();
        let vals: Vec<f64> = times.iter().map(|&t| drift(20.0, 0.0, t, 0.07, 1.0).unwrap()).collect();
        let (g0, nu) = fit_drift(&times, &vals, 0.0, 1.0).unwrap();
        assert!((g0 - 20.0).abs() < 1e-9 && (nu - 0.07).abs() < 1e-12);
        assert!(fit_drift(&times[..1], &vals[..1], 0.0, 1.0).is_err());
        assert!(fit_drift(&[1.0, 2.0], &[1.0, 0.0], 0.0, 1.0).is_err());
    }
}

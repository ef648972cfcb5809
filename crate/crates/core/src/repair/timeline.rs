//! Drift timeline: program every network variant at t=0, advance the clock
//! in fixed steps, evaluate each variant, and let the self-repairing variant
//! probe and correct itself after its evaluation.
//!
//! The self-repairing and the plain quantized variant are programmed from the
//! same random stream, so they start on identical tiles. Before and after a
//! repair the self-repairing variant is evaluated with the same read-noise
//! stream.

use serde::{Deserialize, Serialize};

use super::{global_drift_compensation, probe_network, repair_step, RepairConfig, RepairEvent};
use crate::crossbar::{self, AnalogNetwork};
use crate::device::DeviceConfig;
use crate::nn::Network;
use crate::quantizer::{DecomposedLayer, QuantizationScheme};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Quantized network, probed and repaired every step.
    SelfRepair,
    /// The same quantized tiles, never repaired.
    Quantized,
    /// Noise-aware float network programmed directly.
    NoiseAware,
    /// Noise-aware float network with per-layer global drift compensation.
    DriftCompensated,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SelfRepair,
        Variant::Quantized,
        Variant::NoiseAware,
        Variant::DriftCompensated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SelfRepair => "self_repair",
            Variant::Quantized => "quantized",
            Variant::NoiseAware => "noise_aware",
            Variant::DriftCompensated => "drift_compensated",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Whether the variant runs the noise-aware float network.
    pub fn needs_float(self) -> bool {
        matches!(self, Variant::NoiseAware | Variant::DriftCompensated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimelineConfig {
    pub steps: usize,
    pub step_seconds: f64,
    /// Samples per fresh read of the tiles during evaluation.
    pub eval_chunk: usize,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        TimelineConfig {
            steps: 20,
            step_seconds: 300.0,
            eval_chunk: 100,
        }
    }
}

impl TimelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_seconds > 0.0) {
            return Err(Error::InvalidConfig("timeline: step_seconds must be positive".into()));
        }
        if self.eval_chunk == 0 {
            return Err(Error::InvalidConfig("timeline: eval_chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Networks to put on the timeline.
pub struct TimelineInputs<'a> {
    pub float_net: &'a Network,
    pub layers: &'a [DecomposedLayer],
    pub scheme: &'a QuantizationScheme,
    /// Required for the noise-aware and drift-compensated variants.
    pub noise_aware: Option<&'a Network>,
}

/// One CSV row: a variant evaluated at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: usize,
    pub t: f64,
    pub variant: Variant,
    /// Accuracy after drift, before any repair at this step.
    pub accuracy: f64,
    pub f1: f64,
    pub probe_error: f64,
    pub repaired: bool,
    pub pulses: usize,
    pub irreversible: usize,
    /// Accuracy after this step's repair; equal to `accuracy` without one.
    pub post_accuracy: f64,
    pub post_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub mean_accuracy: f64,
    /// Population variance of the per-step accuracy over steps 1..=n.
    pub accuracy_variance: f64,
    /// Same over the post-repair accuracies.
    pub post_accuracy_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineLog {
    pub seed: u64,
    pub step_seconds: f64,
    pub variants: Vec<Variant>,
    pub rows: Vec<TimelineRow>,
    pub events: Vec<RepairEvent>,
    pub summaries: Vec<VariantSummary>,
}

pub const CSV_HEADER: [&str; 11] = [
    "step",
    "t",
    "variant",
    "accuracy",
    "f1",
    "probe_error",
    "repaired",
    "pulses",
    "irreversible",
    "post_accuracy",
    "post_f1",
];

impl TimelineLog {
    pub fn to_csv(&self) -> Result<String> {
        crate::data::to_csv(&CSV_HEADER, &self.rows)
    }

    pub fn rows_for(&self, v: Variant) -> impl Iterator<Item = &TimelineRow> {
        self.rows.iter().filter(move |r| r.variant == v)
    }

    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }

    /// Accuracy the variant ends the run with (after the last repair).
    pub fn final_accuracy(&self, v: Variant) -> Option<f64> {
        self.rows_for(v).last().map(|r| r.post_accuracy)
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn summarize(rows: &[TimelineRow], variants: &[Variant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .filter_map(|&v| {
            let mine: Vec<&TimelineRow> = rows.iter().filter(|r| r.variant == v).collect();
            let first = mine.first()?;
            let last = mine.last()?;
            let later: Vec<&&TimelineRow> = mine.iter().filter(|r| r.step > 0).collect();
            let acc: Vec<f64> = later.iter().map(|r| r.accuracy).collect();
            let post: Vec<f64> = later.iter().map(|r| r.post_accuracy).collect();
            Some(VariantSummary {
                variant: v,
                initial_accuracy: first.accuracy,
                final_accuracy: last.post_accuracy,
                mean_accuracy: if acc.is_empty() {
                    first.accuracy
                } else {
                    acc.iter().sum::<f64>() / acc.len() as f64
                },
                accuracy_variance: population_variance(&acc),
                post_accuracy_variance: population_variance(&post),
            })
        })
        .collect()
}

struct Programmed {
    variant: Variant,
    anet: AnalogNetwork,
}

/// Program one variant at t=0 with the stream the timeline uses.
pub fn program_variant(v: Variant, inputs: &TimelineInputs, dev: &DeviceConfig, seed: u64) -> Result<AnalogNetwork> {
    if v.needs_float() {
        let net = inputs
            .noise_aware
            .ok_or_else(|| Error::InvalidConfig(format!("variant {} needs a noise-aware network", v.name())))?;
        AnalogNetwork::program_float(net, dev, 0.0, &mut substream(seed, "program-float", &[]))
    } else {
        AnalogNetwork::program_quantized(
            inputs.float_net,
            inputs.layers,
            inputs.scheme,
            dev,
            0.0,
            &mut substream(seed, "program-quantized", &[]),
        )
    }
}

/// Run the timeline for `variants` on the evaluation set. Deterministic in
/// `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_timeline(
    inputs: &TimelineInputs,
    variants: &[Variant],
    images: &Tensor,
    labels: &[usize],
    tcfg: &TimelineConfig,
    dev: &DeviceConfig,
    rcfg: &RepairConfig,
    seed: u64,
) -> Result<TimelineLog> {
    tcfg.validate()?;
    dev.validate()?;
    rcfg.validate()?;
    let mut nets = variants
        .iter()
        .map(|&v| {
            Ok(Programmed {
                variant: v,
                anet: program_variant(v, inputs, dev, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut events = Vec::new();
    for step in 0..=tcfg.steps {
        let t = step as f64 * tcfg.step_seconds;
        for p in nets.iter_mut() {
            let vi = p.variant.index();
            let scales = if p.variant == Variant::DriftCompensated {
                Some(global_drift_compensation(
                    &p.anet,
                    t,
                    dev,
                    &mut substream(seed, "gdc", &[step as u64]),
                )?)
            } else {
                None
            };
            let eval_stream = substream(seed, "eval", &[step as u64, vi]);
            let eval = |anet: &AnalogNetwork| {
                crossbar::evaluate(
                    anet,
                    images,
                    labels,
                    t,
                    dev,
                    scales.as_deref(),
                    tcfg.eval_chunk,
                    &mut eval_stream.clone(),
                )
            };
            let pre = eval(&p.anet)?;
            let mut row = TimelineRow {
                step,
                t,
                variant: p.variant,
                accuracy: pre.accuracy,
                f1: pre.macro_f1,
                probe_error: 0.0,
                repaired: false,
                pulses: 0,
                irreversible: 0,
                post_accuracy: pre.accuracy,
                post_f1: pre.macro_f1,
            };
            let mut probe_rng = substream(seed, "probe", &[step as u64, vi]);
            if p.variant == Variant::SelfRepair && step > 0 {
                let out = repair_step(&mut p.anet, t, rcfg, dev, &mut probe_rng)?;
                row.probe_error = out.probe_error;
                if let Some(ev) = out.event {
                    row.repaired = true;
                    row.pulses = ev.pulses;
                    row.irreversible = ev.irreversible_count;
                    let post = eval(&p.anet)?;
                    row.post_accuracy = post.accuracy;
                    row.post_f1 = post.macro_f1;
                    events.push(ev);
                }
            } else {
                let probes = probe_network(&p.anet, t, dev, &mut probe_rng)?;
                row.probe_error = super::layer_errors(&p.anet, &probes).iter().sum();
            }
            rows.push(row);
        }
    }
    let summaries = summarize(&rows, variants);
    Ok(TimelineLog {
        seed,
        step_seconds: tcfg.step_seconds,
        variants: variants.to_vec(),
        rows,
        events,
        summaries,
    })
}

/// Accuracy drop caused by drifting one layer alone while every other layer
/// stays frozen at its programmed state. Returned in layer order.
pub fn layer_sensitivity(
    anet: &AnalogNetwork,
    images: &Tensor,
    labels: &[usize],
    t: f64,
    dev: &DeviceConfig,
    chunk: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let base = crossbar::evaluate(
        anet,
        images,
        labels,
        anet.t_prog,
        dev,
        None,
        chunk,
        &mut substream(seed, "sensitivity", &[]),
    )?;
    (0..anet.tiles.len())
        .map(|k| {
            let mut one = anet.clone();
            for (i, tile) in one.tiles.iter_mut().enumerate() {
                if i != k {
                    for p in &mut tile.pairs {
                        p.nu_pos = 0.0;
                        p.nu_neg = 0.0;
                    }
                }
            }
            let m = crossbar::evaluate(
                &one,
                images,
                labels,
                t,
                dev,
                None,
                chunk,
                &mut substream(seed, "sensitivity", &[]),
            )?;
            Ok(base.accuracy - m.accuracy)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{decompose_network, BinSet};

    fn setup() -> (Network, Vec<DecomposedLayer>, QuantizationScheme, Tensor, Vec<usize>) {
        let net = Network::mlp(&[6, 8, 3], 11).unwrap();
        let s = QuantizationScheme::new(
            BinSet::new(0.08, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap(),
            BinSet::new(0.1, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap(),
            0.01,
            0.005,
        );
        let layers = decompose_network(&net, &s).unwrap();
        let data: Vec<f64> = (0..40 * 6).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect();
        let x = Tensor::new(vec![40, 6], data).unwrap();
        let labels = crate::nn::predictions(&net.forward(&x).unwrap());
        (net, layers, s, x, labels)
    }

    #[test]
    fn zero_steps_gives_initial_rows_only() {
        let (net, layers, s, x, y) = setup();
        let inputs = TimelineInputs {
            float_net: &net,
            layers: &layers,
            scheme: &s,
            noise_aware: Some(&net),
        };
        let tc = TimelineConfig {
            steps: 0,
            ..Default::default()
        };
        let log = run_timeline(
            &inputs,
            &Variant::ALL,
            &x,
            &y,
            &tc,
            &DeviceConfig::default(),
            &RepairConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(log.rows.len(), 4);
        assert!(log.rows.iter().all(|r| r.t == 0.0));
        assert_eq!(log.to_csv().unwrap().lines().count(), 5);
    }

    #[test]
    fn ideal_device_keeps_accuracy_constant() {
        let (net, layers, s, x, y) = setup();
        let inputs = TimelineInputs {
            float_net: &net,
            layers: &layers,
            scheme: &s,
            noise_aware: Some(&net),
        };
        let tc = TimelineConfig::default();
        let log = run_timeline(
            &inputs,
            &Variant::ALL,
            &x,
            &y,
            &tc,
            &DeviceConfig::ideal(),
            &RepairConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(log.rows.len(), 21 * 4);
        for v in Variant::ALL {
            let first = log.rows_for(v).next().unwrap().accuracy;
            assert!(log
                .rows_for(v)
                .all(|r| r.accuracy == first && r.post_accuracy == first && !r.repaired));
            assert!(log.summary(v).unwrap().accuracy_variance < 1e-20);
        }
        assert!(log.events.is_empty());
    }

    #[test]
    fn same_seed_same_log() {
        let (net, layers, s, x, y) = setup();
        let inputs = TimelineInputs {
            float_net: &net,
            layers: &layers,
            scheme: &s,
            noise_aware: Some(&net),
        };
        let tc = TimelineConfig {
            steps: 3,
            ..Default::default()
        };
        let run = |seed| {
            run_timeline(
                &inputs,
                &Variant::ALL,
                &x,
                &y,
                &tc,
                &DeviceConfig::default(),
                &RepairConfig::default(),
                seed,
            )
            .unwrap()
            .to_csv()
            .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn float_variants_need_a_network() {
        let (net, layers, s, x, y) = setup();
        let inputs = TimelineInputs {
            float_net: &net,
            layers: &layers,
            scheme: &s,
            noise_aware: None,
        };
        let r = run_timeline(
            &inputs,
            &[Variant::NoiseAware],
            &x,
            &y,
            &TimelineConfig::default(),
            &DeviceConfig::default(),
            &RepairConfig::default(),
            0,
        );
        assert!(r.is_err());
        assert_eq!(Variant::parse("drift_compensated"), Some(Variant::DriftCompensated));
        assert_eq!(Variant::parse("nope"), None);
    }

    #[test]
    fn summary_statistics() {
        let mk = |step, acc, post| TimelineRow {
            step,
            t: step as f64,
            variant: Variant::Quantized,
            accuracy: acc,
            f1: 0.0,
            probe_error: 0.0,
            repaired: false,
            pulses: 0,
            irreversible: 0,
            post_accuracy: post,
            post_f1: 0.0,
        };
        let rows = vec![mk(0, 0.9, 0.9), mk(1, 0.8, 0.9), mk(2, 0.6, 0.7)];
        let s = &summarize(&rows, &[Variant::Quantized])[0];
        assert_eq!(s.initial_accuracy, 0.9);
        assert_eq!(s.final_accuracy, 0.7);
        assert!((s.mean_accuracy - 0.7).abs() < 1e-12);
        assert!((s.accuracy_variance - 0.01).abs() < 1e-12);
        assert!((s.post_accuracy_variance - 0.01).abs() < 1e-12);
    }
}

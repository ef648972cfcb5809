//! Experiment orchestration behind the command-line tool.
//!
//! Every command reads one [`ExperimentConfig`] and works inside its output
//! directory: `train` writes networks, `quantize` reads them and writes the
//! scheme and multiple matrices, `program` dumps freshly programmed tiles,
//! `run` executes the drift timeline and `report` summarizes its log.
//! All randomness is derived from the root seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::compress::{self, CompressionReport};
use crate::crossbar::AnalogNetwork;
use crate::data::{self, write_atomic, Dataset};
use crate::device::DeviceConfig;
use crate::nn::{self, EpochLog, GradCheck, Metrics, Network, TrainConfig};
use crate::quantizer::{self, AnnealConfig, DecomposedLayer, QuantizationScheme};
use crate::repair::timeline::{self, program_variant, TimelineConfig, TimelineInputs, TimelineLog, Variant};
use crate::repair::RepairConfig;
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMATS: &str = include_str!("../FORMATS.md");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::Schema { .. } | Error::Version { .. } => EXIT_CONFIG,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Use synthetic digits when IDX files are missing.
    pub synthetic_fallback: bool,
    /// Synthetic set sizes, or caps on IDX sets (0 keeps every sample).
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            synthetic_fallback: true,
            train_samples: 3000,
            test_samples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    /// Smallest programmable level (write resolution), in weight units.
    pub delta_write: f64,
    /// Smallest distinguishable gap between the two bases (read resolution).
    pub epsilon_read: f64,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            delta_write: 0.005,
            epsilon_read: 0.002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub variants: Vec<Variant>,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// `anneal.rng_seed` is replaced by the root seed.
    pub anneal: AnnealConfig,
    pub quantize: QuantizeConfig,
    pub device: DeviceConfig,
    pub repair: RepairConfig,
    pub timeline: TimelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            variants: Variant::ALL.to_vec(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            anneal: AnnealConfig::default(),
            quantize: QuantizeConfig::default(),
            device: DeviceConfig::default(),
            repair: RepairConfig::default(),
            timeline: TimelineConfig::default(),
        }
    }
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `a.b.c=value` to a TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!(
            "override key `{key}` has an empty segment"
        )));
    }
    let mut table = doc;
    for seg in &path[..path.len() - 1] {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override `{key}`: `{seg}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Build from TOML text plus `key=value` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or the defaults), apply overrides, then `--seed`/`--out`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.anneal.validate()?;
        self.device.validate()?;
        self.repair.validate()?;
        self.timeline.validate()?;
        if !(self.quantize.delta_write > 0.0 && self.quantize.epsilon_read > 0.0) {
            return Err(Error::InvalidConfig(
                "quantize: delta_write and epsilon_read must be positive".into(),
            ));
        }
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("variants: list at least one variant".into()));
        }
        if self.data.source == DataSource::Synthetic && (self.data.train_samples == 0 || self.data.test_samples == 0) {
            return Err(Error::InvalidConfig(
                "data: synthetic sets need train_samples and test_samples > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// `name` inside the output directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn needs_noise_aware(&self) -> bool {
        self.variants.iter().any(|v| v.needs_float())
    }

    fn anneal_config(&self) -> AnnealConfig {
        AnnealConfig {
            rng_seed: self.seed,
            ..self.anneal.clone()
        }
    }
}

pub mod files {
    pub const CONFIG: &str = "config.resolved.toml";
    pub const NETWORK: &str = "network.safetensors";
    pub const NOISE_AWARE: &str = "noise_aware.safetensors";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const NOISE_AWARE_LOG: &str = "noise_aware_log.csv";
    pub const WEIGHT_HISTOGRAM: &str = "weight_histogram.csv";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const SCHEME: &str = "scheme.toml";
    pub const DECOMPOSED: &str = "decomposed.safetensors";
    pub const BINS: &str = "bins.csv";
    pub const QUANTIZE_REPORT: &str = "quantize_report.json";
    pub const PACKED_DIR: &str = "packed";
    pub const TILES_QUANTIZED: &str = "tiles_quantized.safetensors";
    pub const TILES_FLOAT: &str = "tiles_float.safetensors";
    pub const TIMELINE_JSON: &str = "timeline.json";
    pub const TIMELINE_CSV: &str = "timeline.csv";
    pub const SENSITIVITY: &str = "layer_sensitivity.csv";
    pub const SUMMARY: &str = "summary.csv";
    pub const EVENTS: &str = "events.csv";
    pub const COMPRESSION: &str = "compression.csv";
    pub const REPORT: &str = "report.txt";
}

/// Training and evaluation sets for the configured source.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    if d.source == DataSource::Idx {
        let paths = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
        let present = paths.iter().all(|p| p.as_ref().is_some_and(|p| p.exists()));
        if present {
            let get = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
            let train = data::load_idx(&get(&d.train_images), &get(&d.train_labels))?;
            let test = data::load_idx(&get(&d.test_images), &get(&d.test_labels))?;
            let cap = |ds: Dataset, n: usize| if n == 0 || n >= ds.len() { ds } else { ds.split(n).0 };
            return Ok((cap(train, d.train_samples), cap(test, d.test_samples)));
        }
        if !d.synthetic_fallback {
            return Err(Error::InvalidConfig(
                "data: IDX files missing and synthetic_fallback is off".into(),
            ));
        }
        warn!("IDX files missing, using synthetic digits");
    }
    let all = data::synthetic_digits(cfg.seed, d.train_samples + d.test_samples)?;
    Ok(all.split(d.train_samples))
}

fn fresh_network(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Network> {
    Network::desk(ds.height(), ds.width(), ds.classes, cfg.seed)
}

fn epoch_csv(rows: &[EpochLog]) -> Result<String> {
    data::to_csv(
        &["epoch", "loss", "accuracy"],
        rows.iter().map(|r| (r.epoch, r.loss, r.accuracy)),
    )
}

/// Counts of weights in bins of width 0.01 over `[-1.5, 1.5)`; weights outside
/// land in the edge bins.
pub fn weight_histogram_csv(net: &Network) -> Result<String> {
    const W: f64 = 0.01;
    const HALF: i64 = 150;
    let mut counts = vec![0usize; (2 * HALF) as usize];
    for w in net.weights() {
        let k = ((w / W).floor() as i64 + HALF).clamp(0, 2 * HALF - 1);
        counts[k as usize] += 1;
    }
    let rows = counts.iter().enumerate().map(|(i, &c)| {
        let lo = (i as i64 - HALF) as f64 * W;
        (format!("{lo:.2}"), format!("{:.2}", lo + W), c)
    });
    data::to_csv(&["bin_lo", "bin_hi", "count"], rows)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::schema("json", e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&cfg.path(files::CONFIG), cfg.to_toml()?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub float: Metrics,
    pub noise_aware: Option<Metrics>,
    /// Fraction of weights with magnitude below `train.epsilon_small`.
    pub small_weight_fraction: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    save_config(cfg)?;
    let (train, test) = load_data(cfg)?;
    let init = fresh_network(cfg, &train)?;
    let mut log = Vec::new();
    let base_cfg = TrainConfig {
        noise_aware: false,
        ..cfg.train.clone()
    };
    let net = nn::train(&init, &train.images, &train.labels, &base_cfg, |e| {
        info!("epoch {} loss {:.4} accuracy {:.4}", e.epoch, e.loss, e.accuracy);
        log.push(*e);
    })?;
    data::save_network(&net, &cfg.path(files::NETWORK))?;
    write_atomic(&cfg.path(files::TRAIN_LOG), epoch_csv(&log)?.as_bytes())?;
    write_atomic(
        &cfg.path(files::WEIGHT_HISTOGRAM),
        weight_histogram_csv(&net)?.as_bytes(),
    )?;
    let float = nn::evaluate(&net, &test.images, &test.labels)?;

    let noise_aware = if cfg.needs_noise_aware() || cfg.train.noise_aware {
        let na_cfg = TrainConfig {
            noise_aware: true,
            ..cfg.train.unconstrained()
        };
        let mut na_log = Vec::new();
        let na = nn::train(&init, &train.images, &train.labels, &na_cfg, |e| na_log.push(*e))?;
        data::save_network(&na, &cfg.path(files::NOISE_AWARE))?;
        write_atomic(&cfg.path(files::NOISE_AWARE_LOG), epoch_csv(&na_log)?.as_bytes())?;
        Some(nn::evaluate(&na, &test.images, &test.labels)?)
    } else {
        None
    };
    let small = net.weights().filter(|w| w.abs() < cfg.train.epsilon_small).count();
    let report = TrainReport {
        float,
        noise_aware,
        small_weight_fraction: small as f64 / net.weight_count() as f64,
    };
    write_json(&cfg.path(files::TRAIN_REPORT), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub float_accuracy: f64,
    pub quantized_accuracy: f64,
    pub quantized_f1: f64,
    pub mse: f64,
    pub initial_mse: f64,
    pub uniform_grid_mse: f64,
    pub accepted: usize,
    pub sq_size: usize,
}

pub fn cmd_quantize(cfg: &ExperimentConfig) -> Result<QuantizeReport> {
    save_config(cfg)?;
    let net = data::load_network(&cfg.path(files::NETWORK))?;
    let (_, test) = load_data(cfg)?;
    let weights: Vec<f64> = net.weights().collect();
    let acfg = cfg.anneal_config();
    let q = &cfg.quantize;
    let outcome = quantizer::anneal(&weights, &acfg, q.delta_write, q.epsilon_read)?;
    let violations = quantizer::validate_constraints(&outcome.scheme, q.delta_write, q.epsilon_read);
    if let Some(v) = violations.first() {
        return Err(Error::Infeasible(v.to_string()));
    }
    let scheme = outcome.scheme;
    let layers = quantizer::decompose_network(&net, &scheme)?;
    let qnet = quantizer::quantized_network(&net, &layers, &scheme)?;
    data::save_scheme(&scheme, Some(outcome.error), &cfg.path(files::SCHEME))?;
    data::save_decomposed(&layers, &scheme, &cfg.path(files::DECOMPOSED))?;
    write_atomic(&cfg.path(files::BINS), bins_csv(&layers, &scheme)?.as_bytes())?;
    for (i, dec) in layers.iter().enumerate() {
        let (p, n) = compress::encode(dec, &scheme)?;
        let dir = cfg.path(files::PACKED_DIR);
        write_atomic(&dir.join(format!("layer{i}_pos.pqw")), &p.to_bytes())?;
        write_atomic(&dir.join(format!("layer{i}_neg.pqw")), &n.to_bytes())?;
    }
    let float = nn::evaluate(&net, &test.images, &test.labels)?;
    let quant = nn::evaluate(&qnet, &test.images, &test.labels)?;
    let report = QuantizeReport {
        float_accuracy: float.accuracy,
        quantized_accuracy: quant.accuracy,
        quantized_f1: quant.macro_f1,
        mse: outcome.error,
        initial_mse: outcome.initial_error,
        uniform_grid_mse: quantizer::uniform_grid_error(&weights, acfg.n_levels, q.delta_write)?,
        accepted: outcome.accepted,
        sq_size: scheme.sq.len(),
    };
    write_json(&cfg.path(files::QUANTIZE_REPORT), &report)?;
    Ok(report)
}

/// One row per combined-set entry: value, multiples and how many weights
/// landed there.
pub fn bins_csv(layers: &[DecomposedLayer], scheme: &QuantizationScheme) -> Result<String> {
    let counts = quantizer::bin_population(layers, scheme);
    let rows = scheme
        .sq
        .iter()
        .zip(counts)
        .map(|(e, c)| (e.value, e.m_pos, e.m_neg, c));
    data::to_csv(&["value", "m_pos", "m_neg", "count"], rows)
}

struct Artifacts {
    net: Network,
    scheme: QuantizationScheme,
    layers: Vec<DecomposedLayer>,
    noise_aware: Option<Network>,
}

fn load_artifacts(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let net = data::load_network(&cfg.path(files::NETWORK))?;
    let (scheme, _) = data::load_scheme(&cfg.path(files::SCHEME))?;
    let layers = data::load_decomposed(&cfg.path(files::DECOMPOSED), Some(&scheme))?;
    let na_path = cfg.path(files::NOISE_AWARE);
    let noise_aware = if cfg.needs_noise_aware() {
        Some(data::load_network(&na_path)?)
    } else {
        None
    };
    Ok(Artifacts {
        net,
        scheme,
        layers,
        noise_aware,
    })
}

impl Artifacts {
    fn inputs(&self) -> TimelineInputs<'_> {
        TimelineInputs {
            float_net: &self.net,
            layers: &self.layers,
            scheme: &self.scheme,
            noise_aware: self.noise_aware.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramReport {
    pub quantized_cells: usize,
    pub float_cells: usize,
}

/// Program the tiles exactly as the timeline does at t=0 and dump them.
pub fn cmd_program(cfg: &ExperimentConfig) -> Result<ProgramReport> {
    save_config(cfg)?;
    let art = load_artifacts(cfg)?;
    let inputs = art.inputs();
    let q = program_variant(Variant::Quantized, &inputs, &cfg.device, cfg.seed)?;
    data::save_tiles(&q.tiles, &cfg.path(files::TILES_QUANTIZED))?;
    let mut float_cells = 0;
    if inputs.noise_aware.is_some() {
        let f = program_variant(Variant::NoiseAware, &inputs, &cfg.device, cfg.seed)?;
        data::save_tiles(&f.tiles, &cfg.path(files::TILES_FLOAT))?;
        float_cells = f.tiles.iter().map(|t| t.len()).sum();
    }
    Ok(ProgramReport {
        quantized_cells: q.tiles.iter().map(|t| t.len()).sum(),
        float_cells,
    })
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<TimelineLog> {
    save_config(cfg)?;
    let art = load_artifacts(cfg)?;
    let (_, test) = load_data(cfg)?;
    let log = timeline::run_timeline(
        &art.inputs(),
        &cfg.variants,
        &test.images,
        &test.labels,
        &cfg.timeline,
        &cfg.device,
        &cfg.repair,
        cfg.seed,
    )?;
    data::save_timeline(&log, &cfg.path(files::TIMELINE_JSON), &cfg.path(files::TIMELINE_CSV))?;

    let anet = AnalogNetwork::program_quantized(
        &art.net,
        &art.layers,
        &art.scheme,
        &cfg.device,
        0.0,
        &mut substream(cfg.seed, "program-quantized", &[]),
    )?;
    let t_end = (cfg.timeline.steps.max(1)) as f64 * cfg.timeline.step_seconds;
    let drops = timeline::layer_sensitivity(
        &anet,
        &test.images,
        &test.labels,
        t_end,
        &cfg.device,
        cfg.timeline.eval_chunk,
        cfg.seed,
    )?;
    let rows = drops.iter().zip(&art.net.layers).enumerate().map(|(i, (&d, l))| {
        let kind = match l.kind {
            nn::LayerKind::Conv { .. } => "conv",
            nn::LayerKind::Dense { .. } => "dense",
        };
        (i, kind, l.weights.len(), d)
    });
    let s = data::to_csv(&["layer", "kind", "weights", "accuracy_drop"], rows)?;
    write_atomic(&cfg.path(files::SENSITIVITY), s.as_bytes())?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub text: String,
    pub events: usize,
    pub compression: Vec<CompressionReport>,
}

/// Summarize a timeline log and write plot-ready files next to it.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Report> {
    let log = data::load_timeline(&cfg.path(files::TIMELINE_JSON))?;
    let compression = match (
        data::load_scheme(&cfg.path(files::SCHEME)),
        cfg.path(files::DECOMPOSED).exists(),
    ) {
        (Ok((scheme, _)), true) => {
            let layers = data::load_decomposed(&cfg.path(files::DECOMPOSED), Some(&scheme))?;
            layers
                .iter()
                .map(|d| compress::compression_report(d, &scheme))
                .collect()
        }
        _ => Vec::new(),
    };
    write_report_files(cfg, &log, &compression)
}

pub fn write_report_files(
    cfg: &ExperimentConfig,
    log: &TimelineLog,
    compression: &[CompressionReport],
) -> Result<Report> {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "timeline: seed {}, {} rows, {} repair events",
        log.seed,
        log.rows.len(),
        log.events.len()
    );
    for s in &log.summaries {
        let _ = writeln!(
            text,
            "{:18} initial {:.4} final {:.4} mean {:.4} var {:.3e} (post-repair var {:.3e})",
            s.variant.name(),
            s.initial_accuracy,
            s.final_accuracy,
            s.mean_accuracy,
            s.accuracy_variance,
            s.post_accuracy_variance
        );
        let mut dat = String::from("# t accuracy post_accuracy f1 post_f1 probe_error\n");
        for r in log.rows_for(s.variant) {
            let _ = writeln!(
                dat,
                "{} {} {} {} {} {}",
                r.t, r.accuracy, r.post_accuracy, r.f1, r.post_f1, r.probe_error
            );
        }
        write_atomic(&cfg.path(&format!("series_{}.dat", s.variant.name())), dat.as_bytes())?;
    }
    let summary = data::to_csv(
        &[
            "variant",
            "initial_accuracy",
            "final_accuracy",
            "mean_accuracy",
            "accuracy_variance",
            "post_accuracy_variance",
        ],
        log.summaries.iter().map(|s| {
            (
                s.variant.name(),
                s.initial_accuracy,
                s.final_accuracy,
                s.mean_accuracy,
                s.accuracy_variance,
                s.post_accuracy_variance,
            )
        }),
    )?;
    write_atomic(&cfg.path(files::SUMMARY), summary.as_bytes())?;

    let events = data::to_csv(
        &[
            "t",
            "layers",
            "weights_touched",
            "pulses",
            "irreversible",
            "pre_probe_error",
            "post_probe_error",
        ],
        log.events.iter().map(|e| {
            let layers: Vec<String> = e.layers_repaired.iter().map(|l| l.to_string()).collect();
            (
                e.t,
                layers.join(";"),
                e.weights_touched,
                e.pulses,
                e.irreversible_count,
                e.pre_probe_error,
                e.post_probe_error,
            )
        }),
    )?;
    write_atomic(&cfg.path(files::EVENTS), events.as_bytes())?;

    if !compression.is_empty() {
        let mut rows = Vec::new();
        for (i, r) in compression.iter().enumerate() {
            for p in [&r.pos, &r.neg] {
                let pol = match p.polarity {
                    compress::Polarity::Pos => "pos",
                    compress::Polarity::Neg => "neg",
                };
                rows.push((
                    i,
                    pol,
                    p.entries,
                    Some(p.bits),
                    p.packed_bytes,
                    p.float_bytes,
                    p.ratio,
                    Some(p.entropy),
                ));
            }
            rows.push((
                i,
                "both",
                r.pos.entries,
                None,
                r.packed_bytes,
                r.float_bytes,
                r.ratio,
                None,
            ));
            let _ = writeln!(
                text,
                "layer {i}: {} packed bytes vs {} as f32 (ratio {:.2}), entropy {:.3}/{:.3} bits",
                r.packed_bytes, r.float_bytes, r.ratio, r.pos.entropy, r.neg.entropy
            );
        }
        let c = data::to_csv(
            &[
                "layer",
                "polarity",
                "entries",
                "bits",
                "packed_bytes",
                "float_bytes",
                "ratio",
                "entropy_bits",
            ],
            rows,
        )?;
        write_atomic(&cfg.path(files::COMPRESSION), c.as_bytes())?;
    }
    write_atomic(&cfg.path(files::REPORT), text.as_bytes())?;
    Ok(Report {
        text,
        events: log.events.len(),
        compression: compression.to_vec(),
    })
}

/// Finite-difference gradient check on a small random convolutional network.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheck> {
    let net = Network::new(
        vec![1, 5, 5],
        {
            let mut rng = substream(cfg.seed, "gradcheck-init", &[]);
            let conv = nn::LayerKind::Conv {
                in_channels: 1,
                height: 5,
                width: 5,
                out_channels: 3,
                kernel: 3,
            };
            let hidden = nn::LayerKind::Dense { inputs: 27, outputs: 6 };
            let out = nn::LayerKind::Dense { inputs: 6, outputs: 4 };
            let mut layers = vec![
                nn::Layer::init(conv, nn::Activation::Relu, &mut rng),
                nn::Layer::init(hidden, nn::Activation::Relu, &mut rng),
                nn::Layer::init(out, nn::Activation::Identity, &mut rng),
            ];
            // zero biases can leave a pre-activation exactly on the ReLU kink
            for l in &mut layers {
                l.bias
                    .iter_mut()
                    .for_each(|b| *b = rand::Rng::random_range(&mut rng, -0.1..0.1));
            }
            layers
        },
        cfg.seed,
    )?;
    let mut rng = substream(cfg.seed, "gradcheck-data", &[]);
    use rand::Rng;
    let data: Vec<f64> = (0..6 * 25).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();
    let batch = Tensor::new(vec![6, 1, 5, 5], data)?;
    nn::gradient_check(&net, &batch, &labels, &cfg.train, 1e-5, 1e-6)
}

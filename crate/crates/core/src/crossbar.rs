//! Crossbar tiles of differential PCM pairs, one tile per network layer.
//!
//! Biases and activations stay digital; only the weight matrix of each layer
//! is stored in conductances. A noisy read draws one read-noise sample per
//! cell pair.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{self, Calibration, DeviceConfig, PcmPair};
use crate::nn::{self, LayerWeights, Metrics, Network};
use crate::quantizer::{reconstruct, DecomposedLayer, QuantizationScheme};
use crate::rng::SimRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogTile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub pairs: Vec<PcmPair>,
    pub calibration: Calibration,
    /// Weights the tile is supposed to hold (reconstructed quantized values,
    /// or the float weights for an unquantized layer).
    pub ideal: Vec<f64>,
    /// Identity probe taken right after programming.
    pub baseline_probe: Vec<f64>,
}

/// Program a decomposed layer. Pairs are programmed in row-major order,
/// followed by the baseline probe.
pub fn program_layer(
    dec: &DecomposedLayer,
    scheme: &QuantizationScheme,
    cal: &Calibration,
    cfg: &DeviceConfig,
    t_prog: f64,
    rng: &mut SimRng,
) -> Result<AnalogTile> {
    let ideal = reconstruct(dec, scheme)?;
    let mut pairs = Vec::with_capacity(dec.len());
    for (&mp, &mn) in dec.m_pos.iter().zip(&dec.m_neg) {
        let (wp, wn) = (scheme.pos.level(mp), scheme.neg.level(mn));
        check_range(wp.max(wn), cal, cfg)?;
        pairs.push(PcmPair::program(wp, wn, (mp, mn), cal, cfg, t_prog, rng)?);
    }
    finish_tile(dec.rows, dec.cols, pairs, *cal, ideal, cfg, t_prog, rng)
}

/// Program float weights directly: positive weights on the positive line,
/// negative ones on the negative line. Target multiples are left at zero.
pub fn program_float_layer(
    weights: &[f64],
    rows: usize,
    cols: usize,
    cal: &Calibration,
    cfg: &DeviceConfig,
    t_prog: f64,
    rng: &mut SimRng,
) -> Result<AnalogTile> {
    if weights.len() != rows * cols {
        return Err(Error::shape("float tile", rows * cols, weights.len()));
    }
    let mut pairs = Vec::with_capacity(weights.len());
    for &w in weights {
        let (wp, wn) = if w >= 0.0 { (w, 0.0) } else { (0.0, -w) };
        check_range(wp.max(wn), cal, cfg)?;
        pairs.push(PcmPair::program(wp, wn, (0, 0), cal, cfg, t_prog, rng)?);
    }
    finish_tile(rows, cols, pairs, *cal, weights.to_vec(), cfg, t_prog, rng)
}

fn check_range(w: f64, cal: &Calibration, cfg: &DeviceConfig) -> Result<()> {
    let g = cal.to_conductance(w);
    if g > cfg.g_max {
        return Err(Error::OutOfRange(format!(
            "weight {w} needs conductance {g}, above g_max {}",
            cfg.g_max
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish_tile(
    rows: usize,
    cols: usize,
    pairs: Vec<PcmPair>,
    calibration: Calibration,
    ideal: Vec<f64>,
    cfg: &DeviceConfig,
    t_prog: f64,
    rng: &mut SimRng,
) -> Result<AnalogTile> {
    let mut tile = AnalogTile {
        rows,
        cols,
        pairs,
        calibration,
        ideal,
        baseline_probe: Vec::new(),
    };
    tile.baseline_probe = identity_probe(&tile, t_prog, cfg, rng)?;
    Ok(tile)
}

impl AnalogTile {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Noise-free drifted weights at `t_now`.
    pub fn drifted_weights(&self, t_now: f64, cfg: &DeviceConfig) -> Result<Vec<f64>> {
        self.pairs
            .iter()
            .map(|p| p.weight_at(t_now, &self.calibration, cfg))
            .collect()
    }
}

/// One noisy read of every pair, row-major.
pub fn effective_weights(tile: &AnalogTile, t_now: f64, cfg: &DeviceConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
    tile.pairs
        .iter()
        .map(|p| device::read(p, t_now, &tile.calibration, cfg, rng))
        .collect()
}

/// `W_eff(t_now) x` with a fresh read of every pair.
pub fn mvm(tile: &AnalogTile, x: &[f64], t_now: f64, cfg: &DeviceConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
    if x.len() != tile.cols {
        return Err(Error::shape("mvm input", tile.cols, x.len()));
    }
    let w = effective_weights(tile, t_now, cfg, rng)?;
    Ok(w.chunks(tile.cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Drive each input line alone with a unit pulse and collect the outputs.
/// Column `j` of the result is `W_eff e_j`; only the cells of the driven
/// column are read, so pairs are read once each in column-major order.
/// Returned row-major like the tile.
pub fn identity_probe(tile: &AnalogTile, t_now: f64, cfg: &DeviceConfig, rng: &mut SimRng) -> Result<Vec<f64>> {
    let mut out = vec![0.0; tile.len()];
    for j in 0..tile.cols {
        for i in 0..tile.rows {
            let k = i * tile.cols + j;
            out[k] = device::read(&tile.pairs[k], t_now, &tile.calibration, cfg, rng)?;
        }
    }
    Ok(out)
}

/// A network whose weight matrices live on analog tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogNetwork {
    /// Digital parts (shapes, biases, activations). Its weights hold the
    /// ideal tile contents.
    pub network: Network,
    pub tiles: Vec<AnalogTile>,
    pub scheme: Option<QuantizationScheme>,
    pub t_prog: f64,
}

impl AnalogNetwork {
    /// Program every layer of a quantized network with one shared calibration.
    pub fn program_quantized(
        net: &Network,
        layers: &[DecomposedLayer],
        scheme: &QuantizationScheme,
        cfg: &DeviceConfig,
        t_prog: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let digital = crate::quantizer::quantized_network(net, layers, scheme)?;
        let cal = device::weight_to_conductance(scheme, cfg)?;
        let tiles = layers
            .iter()
            .map(|dec| program_layer(dec, scheme, &cal, cfg, t_prog, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnalogNetwork {
            network: digital,
            tiles,
            scheme: Some(scheme.clone()),
            t_prog,
        })
    }

    /// Program the float weights of `net` directly, scaled so the largest
    /// magnitude in the network maps to `g_max`.
    pub fn program_float(net: &Network, cfg: &DeviceConfig, t_prog: f64, rng: &mut SimRng) -> Result<Self> {
        let max_abs = net.weights().fold(0.0f64, |m, w| m.max(w.abs()));
        let cal = device::calibration_for_range(max_abs, cfg)?;
        let tiles = net
            .layers
            .iter()
            .map(|l| program_float_layer(&l.weights, l.rows(), l.cols(), &cal, cfg, t_prog, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnalogNetwork {
            network: net.clone(),
            tiles,
            scheme: None,
            t_prog,
        })
    }
}

/// Logits for `batch` with one fresh read of every tile. `out_scales`, when
/// given, multiplies each layer's matrix product before the bias.
pub fn analog_forward(
    anet: &AnalogNetwork,
    batch: &Tensor,
    t_now: f64,
    cfg: &DeviceConfig,
    out_scales: Option<&[f64]>,
    rng: &mut SimRng,
) -> Result<Tensor> {
    if let Some(s) = out_scales {
        if s.len() != anet.tiles.len() {
            return Err(Error::shape("output scales", anet.tiles.len(), s.len()));
        }
    }
    let mut reads = Vec::with_capacity(anet.tiles.len());
    for tile in &anet.tiles {
        reads.push(effective_weights(tile, t_now, cfg, rng)?);
    }
    let mut reads = reads.into_iter();
    anet.network.forward_with(batch, |i, _| LayerWeights {
        weights: Cow::Owned(reads.next().unwrap_or_default()),
        out_scale: out_scales.map(|s| s[i]),
    })
}

/// Accuracy and macro-F1 with a fresh read of the tiles for every chunk of
/// `chunk` samples.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    anet: &AnalogNetwork,
    images: &Tensor,
    labels: &[usize],
    t_now: f64,
    cfg: &DeviceConfig,
    out_scales: Option<&[f64]>,
    chunk: usize,
    rng: &mut SimRng,
) -> Result<Metrics> {
    if images.rows() != labels.len() {
        return Err(Error::shape("evaluation labels", images.rows(), labels.len()));
    }
    let chunk = chunk.max(1);
    let mut pred = Vec::with_capacity(labels.len());
    let idx: Vec<usize> = (0..labels.len()).collect();
    for part in idx.chunks(chunk) {
        let logits = analog_forward(anet, &images.select_rows(part), t_now, cfg, out_scales, rng)?;
        pred.extend(nn::predictions(&logits));
    }
    nn::metrics(&pred, labels, anet.network.num_classes())
}

/// Shift both conductances of every pair by `c` (clamped at zero); used to
/// check common-mode rejection.
pub fn add_common_mode(tile: &mut AnalogTile, c: f64) {
    for p in &mut tile.pairs {
        p.g_pos = (p.g_pos + c).max(0.0);
        p.g_neg = (p.g_neg + c).max(0.0);
    }
}

/// Deterministic helper for tests and demos: a random tile of given shape
/// programmed from uniformly drawn multiples.
pub fn random_decomposed<R: Rng>(
    rows: usize,
    cols: usize,
    scheme: &QuantizationScheme,
    rng: &mut R,
) -> DecomposedLayer {
    let pick = |set: &crate::quantizer::BinSet, rng: &mut R| {
        let k = rng.random_range(0..=set.multiples.len());
        if k == 0 {
            0
        } else {
            set.multiples[k - 1]
        }
    };
    let mut dec = DecomposedLayer::zeros(rows, cols);
    for i in 0..dec.len() {
        dec.m_pos[i] = pick(&scheme.pos, rng);
        dec.m_neg[i] = pick(&scheme.neg, rng);
    }
    dec
}

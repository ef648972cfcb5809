//! Dual positive/negative bin sets, simulated-annealing bin search and the
//! decomposition of float weights into integer multiples of the two base
//! steps.
//!
//! A weight `w` is stored as a pair of non-negative integers `(m_pos, m_neg)`
//! with `w = pos.base * m_pos - neg.base * m_neg`. The representable values
//! (the combined set, `sq`) are every positive level, every negated negative
//! level and every difference of one positive and one negative level.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::Network;
use crate::rng::substream;
use crate::{Error, Result};

/// Levels `base * m` for each `m` in `multiples`. `multiples[0]` is always 1,
/// so `base` is the smallest level and every level is a multiple of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSet {
    pub base: f64,
    pub multiples: Vec<u32>,
}

impl BinSet {
    pub fn new(base: f64, multiples: Vec<u32>) -> Result<Self> {
        let set = BinSet { base, multiples };
        if let Some(problem) = set.structural_problem() {
            return Err(Error::InvalidConfig(problem));
        }
        Ok(set)
    }

    /// `{1, 2, ..., n}`.
    pub fn linear(base: f64, n: usize) -> Self {
        BinSet {
            base,
            multiples: (1..=n as u32).collect(),
        }
    }

    fn structural_problem(&self) -> Option<String> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Some(format!("base {} must be positive and finite", self.base));
        }
        if self.multiples.first() != Some(&1) {
            return Some("first multiple must be 1 (the base is the smallest level)".into());
        }
        if self.multiples.windows(2).any(|w| w[0] >= w[1]) {
            return Some("multiples must be strictly increasing".into());
        }
        None
    }

    pub fn n_levels(&self) -> usize {
        self.multiples.len()
    }

    pub fn max_multiple(&self) -> u32 {
        self.multiples.last().copied().unwrap_or(0)
    }

    pub fn level(&self, m: u32) -> f64 {
        self.base * m as f64
    }

    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        self.multiples.iter().map(|&m| self.level(m))
    }

    /// Whether `m` is storable on this line; 0 (cell off) always is.
    pub fn allows(&self, m: u32) -> bool {
        m == 0 || self.multiples.binary_search(&m).is_ok()
    }
}

/// One representable value and the multiples that produce it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqEntry {
    pub value: f64,
    pub m_pos: u32,
    pub m_neg: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationScheme {
    pub pos: BinSet,
    pub neg: BinSet,
    /// Sorted by value, no duplicate values.
    pub sq: Vec<SqEntry>,
    pub delta_write: f64,
    pub epsilon_read: f64,
}

impl QuantizationScheme {
    pub fn new(pos: BinSet, neg: BinSet, delta_write: f64, epsilon_read: f64) -> Self {
        let sq = build_sq(&pos, &neg);
        QuantizationScheme {
            pos,
            neg,
            sq,
            delta_write,
            epsilon_read,
        }
    }

    pub fn value(&self, m_pos: u32, m_neg: u32) -> f64 {
        combined_value(&self.pos, &self.neg, m_pos, m_neg)
    }

    /// Largest multiple on either line.
    pub fn max_multiple(&self) -> u32 {
        self.pos.max_multiple().max(self.neg.max_multiple())
    }

    /// Largest representable magnitude.
    pub fn max_abs_value(&self) -> f64 {
        self.sq.iter().fold(0.0f64, |m, e| m.max(e.value.abs()))
    }

    pub fn sq_values(&self) -> Vec<f64> {
        self.sq.iter().map(|e| e.value).collect()
    }

    /// Stable digest over the bit patterns of everything that defines the
    /// scheme.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"pcm-selfrepair/scheme/v1");
        for set in [&self.pos, &self.neg] {
            h.update(set.base.to_bits().to_le_bytes());
            h.update((set.multiples.len() as u32).to_le_bytes());
            for m in &set.multiples {
                h.update(m.to_le_bytes());
            }
        }
        h.update(self.delta_write.to_bits().to_le_bytes());
        h.update(self.epsilon_read.to_bits().to_le_bytes());
        h.finalize().into()
    }
}

fn combined_value(pos: &BinSet, neg: &BinSet, m_pos: u32, m_neg: u32) -> f64 {
    pos.base * m_pos as f64 - neg.base * m_neg as f64
}

/// Enumerate the combined set. Equal values are merged, keeping the pair with
/// the smaller `m_pos + m_neg` (then the smaller `m_pos`).
pub fn build_sq(pos: &BinSet, neg: &BinSet) -> Vec<SqEntry> {
    let mut sq = Vec::with_capacity(pos.n_levels() * (neg.n_levels() + 1) + neg.n_levels());
    let entry = |m_pos, m_neg| SqEntry {
        value: combined_value(pos, neg, m_pos, m_neg),
        m_pos,
        m_neg,
    };
    for &mp in &pos.multiples {
        sq.push(entry(mp, 0));
    }
    for &mn in &neg.multiples {
        sq.push(entry(0, mn));
    }
    for &mp in &pos.multiples {
        for &mn in &neg.multiples {
            sq.push(entry(mp, mn));
        }
    }
    sq.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then((a.m_pos + a.m_neg).cmp(&(b.m_pos + b.m_neg)))
            .then(a.m_pos.cmp(&b.m_pos))
    });
    sq.dedup_by(|later, kept| later.value == kept.value);
    sq
}

/// Index of the value nearest to `w` in the ascending slice `values`. On an
/// exact tie the smaller value wins.
pub fn nearest_index(values: &[f64], w: f64) -> usize {
    let hi = values.partition_point(|&v| v < w);
    if hi == 0 {
        return 0;
    }
    if hi == values.len() {
        return hi - 1;
    }
    let (lo_d, hi_d) = (w - values[hi - 1], values[hi] - w);
    if hi_d < lo_d {
        hi
    } else {
        hi - 1
    }
}

/// Mean squared distance from each weight to its nearest combined-set value.
pub fn quantization_error(weights: &[f64], sq: &[SqEntry]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if sq.is_empty() {
        return Err(Error::Empty("combined set"));
    }
    let values: Vec<f64> = sq.iter().map(|e| e.value).collect();
    let sum: f64 = weights
        .iter()
        .map(|&w| {
            let d = w - values[nearest_index(&values, w)];
            d * d
        })
        .sum();
    Ok(sum / weights.len() as f64)
}

/// MSE evaluator over a pre-sorted weight pool, linear in pool size plus set
/// size. Used inside the annealing loop.
struct SortedPool {
    sorted: Vec<f64>,
}

impl SortedPool {
    fn new(weights: &[f64]) -> Self {
        let mut sorted = weights.to_vec();
        sorted.sort_by(f64::total_cmp);
        SortedPool { sorted }
    }

    fn mse(&self, values: &[f64]) -> f64 {
        let mut hi = 0;
        let mut sum = 0.0;
        for &w in &self.sorted {
            while hi < values.len() && values[hi] < w {
                hi += 1;
            }
            let d = if hi == 0 {
                values[0] - w
            } else if hi == values.len() {
                w - values[hi - 1]
            } else {
                let (lo_d, hi_d) = (w - values[hi - 1], values[hi] - w);
                if hi_d < lo_d {
                    hi_d
                } else {
                    lo_d
                }
            };
            sum += d * d;
        }
        sum / self.sorted.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub iterations: usize,
    /// Initial temperature. Costs are normalized by the initial scheme's
    /// error, so this is in units of that error.
    pub t0: f64,
    /// Geometric cooling factor per iteration.
    pub cooling: f64,
    /// Std of the log-normal base nudge at temperature `t0`.
    pub perturb_scale: f64,
    /// Keep multiples at `{1..N}` and only move the bases.
    pub linear_mode: bool,
    pub rng_seed: u64,
    /// Levels per set (N).
    pub n_levels: usize,
    /// Upper bound for any multiple in non-linear mode.
    pub max_multiple: u32,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            iterations: 4000,
            t0: 0.05,
            cooling: 0.999,
            perturb_scale: 0.2,
            linear_mode: false,
            rng_seed: 0,
            n_levels: 8,
            max_multiple: 15,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("anneal: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return bad("cooling must lie in (0, 1)");
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return bad("t0 must be positive");
        }
        if !(self.perturb_scale > 0.0) {
            return bad("perturb_scale must be positive");
        }
        if self.n_levels == 0 {
            return bad("n_levels must be positive");
        }
        if (self.max_multiple as usize) < self.n_levels {
            return bad("max_multiple must be at least n_levels");
        }
        Ok(())
    }

    pub fn temperature(&self, iteration: usize) -> f64 {
        self.t0 * self.cooling.powi(iteration as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealOutcome {
    pub scheme: QuantizationScheme,
    pub error: f64,
    pub initial_error: f64,
    pub accepted: usize,
    /// Best error after each iteration.
    pub best_trace: Vec<f64>,
}

/// A failed constraint from the bin-set rules.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LevelCount {
        pos: usize,
        neg: usize,
    },
    Structure {
        set: &'static str,
        problem: String,
    },
    Divisibility {
        set: &'static str,
    },
    MalformedSq,
    Snr {
        set: &'static str,
        base: f64,
        delta_write: f64,
    },
    BinDifference {
        gap: f64,
        epsilon_read: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LevelCount { pos, neg } => {
                write!(
                    f,
                    "sets must have the same number of distinct levels (pos {pos}, neg {neg})"
                )
            }
            Violation::Structure { set, problem } => write!(f, "{set} set: {problem}"),
            Violation::Divisibility { set } => write!(f, "{set} set: levels are not multiples of its smallest level"),
            Violation::MalformedSq => write!(f, "combined set does not match the bin sets"),
            Violation::Snr { set, base, delta_write } => {
                write!(f, "{set} base {base} is not above write noise {delta_write}")
            }
            Violation::BinDifference { gap, epsilon_read } => {
                write!(f, "base gap {gap} is not above read-noise threshold {epsilon_read}")
            }
        }
    }
}

/// Every violated bin-set rule; empty when the scheme is valid.
pub fn validate_constraints(scheme: &QuantizationScheme, delta_write: f64, epsilon_read: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let sets = [("positive", &scheme.pos), ("negative", &scheme.neg)];
    if scheme.pos.n_levels() != scheme.neg.n_levels() || scheme.pos.n_levels() == 0 {
        out.push(Violation::LevelCount {
            pos: scheme.pos.n_levels(),
            neg: scheme.neg.n_levels(),
        });
    }
    let mut structural = false;
    for (name, set) in sets {
        if set.multiples.windows(2).any(|w| w[0] >= w[1]) || !(set.base > 0.0 && set.base.is_finite()) {
            structural = true;
            out.push(Violation::Structure {
                set: name,
                problem: "base must be positive and multiples strictly increasing".into(),
            });
        }
        // The smallest level must be the base itself for every other level to
        // be an integer multiple of it.
        if set.multiples.first() != Some(&1) {
            out.push(Violation::Divisibility { set: name });
        }
    }
    if !structural && scheme.sq != build_sq(&scheme.pos, &scheme.neg) {
        out.push(Violation::MalformedSq);
    }
    for (name, set) in sets {
        if !(set.base > delta_write) {
            out.push(Violation::Snr {
                set: name,
                base: set.base,
                delta_write,
            });
        }
    }
    let gap = (scheme.pos.base - scheme.neg.base).abs();
    if !(gap > epsilon_read) {
        out.push(Violation::BinDifference { gap, epsilon_read });
    }
    out
}

/// Smallest allowed base strictly above `delta_write`.
fn base_floor(delta_write: f64) -> f64 {
    if delta_write > 0.0 {
        delta_write * (1.0 + 1e-6)
    } else {
        f64::MIN_POSITIVE
    }
}

/// Push a pair of bases back into the feasible region: both above the write
/// noise, and their gap above the read-noise threshold (moving the negative
/// base).
fn project(pos: f64, neg: f64, delta_write: f64, epsilon_read: f64) -> (f64, f64) {
    let floor = base_floor(delta_write);
    let pos = pos.max(floor);
    let mut neg = neg.max(floor);
    if !((pos - neg).abs() > epsilon_read) {
        let gap = if epsilon_read > 0.0 {
            epsilon_read * (1.0 + 1e-6)
        } else {
            pos * 1e-9
        };
        let below = pos - gap;
        neg = if neg < pos && below >= floor { below } else { pos + gap };
        while !((pos - neg).abs() > epsilon_read) {
            neg = neg.next_up();
        }
    }
    (pos, neg)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Split weights into the strictly positive values and the magnitudes of the
/// strictly negative ones.
fn split_pools(weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pos: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    let mut neg: Vec<f64> = weights.iter().filter(|w| **w < 0.0).map(|w| -w).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    (pos, neg)
}

fn check_feasible(weights: &[f64], delta_write: f64, epsilon_read: f64) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::OutOfRange("weights contain non-finite values".into()));
    }
    if !(delta_write >= 0.0 && delta_write.is_finite() && epsilon_read >= 0.0 && epsilon_read.is_finite()) {
        return Err(Error::InvalidConfig(
            "delta_write and epsilon_read must be finite and non-negative".into(),
        ));
    }
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if delta_write >= max_abs {
        return Err(Error::Infeasible(format!(
            "write noise {delta_write} is not below the largest weight magnitude {max_abs}; every level would lie outside the weight range"
        )));
    }
    Ok(())
}

/// Starting scheme: each base at the larger of `1.5 * delta_write` and the 1st
/// percentile of its pool's magnitudes; multiples `{1..N}`.
pub fn initial_scheme(
    weights: &[f64],
    cfg: &AnnealConfig,
    delta_write: f64,
    epsilon_read: f64,
) -> Result<QuantizationScheme> {
    cfg.validate()?;
    check_feasible(weights, delta_write, epsilon_read)?;
    let (pos, neg) = split_pools(weights);
    let start = |pool: &[f64]| {
        let p1 = if pool.is_empty() { 0.0 } else { percentile(pool, 0.01) };
        (1.5 * delta_write).max(p1)
    };
    let (pb, nb) = project(start(&pos), start(&neg), delta_write, epsilon_read);
    Ok(QuantizationScheme::new(
        BinSet::linear(pb, cfg.n_levels),
        BinSet::linear(nb, cfg.n_levels),
        delta_write,
        epsilon_read,
    ))
}

pub fn anneal(weights: &[f64], cfg: &AnnealConfig, delta_write: f64, epsilon_read: f64) -> Result<AnnealOutcome> {
    let init = initial_scheme(weights, cfg, delta_write, epsilon_read)?;
    anneal_from(weights, init, cfg)
}

/// Simulated annealing over the two bases (and, outside linear mode, the
/// multiples) starting from `init`. Returns the best scheme seen.
pub fn anneal_from(weights: &[f64], init: QuantizationScheme, cfg: &AnnealConfig) -> Result<AnnealOutcome> {
    cfg.validate()?;
    let (delta_write, epsilon_read) = (init.delta_write, init.epsilon_read);
    check_feasible(weights, delta_write, epsilon_read)?;
    let violations = validate_constraints(&init, delta_write, epsilon_read);
    if !violations.is_empty() {
        return Err(Error::Infeasible(format!("initial scheme: {}", violations[0])));
    }
    if cfg.linear_mode && (init.pos.n_levels() != cfg.n_levels || init.neg.n_levels() != cfg.n_levels) {
        return Err(Error::InvalidConfig(
            "initial scheme does not have n_levels levels".into(),
        ));
    }

    let pool = SortedPool::new(weights);
    let initial_error = pool.mse(&init.sq_values());
    let mut best = init.clone();
    let mut best_err = initial_error;
    let mut trace = Vec::with_capacity(cfg.iterations);
    if initial_error == 0.0 {
        trace.resize(cfg.iterations, 0.0);
        return Ok(AnnealOutcome {
            scheme: best,
            error: 0.0,
            initial_error,
            accepted: 0,
            best_trace: trace,
        });
    }

    let mut rng = substream(cfg.rng_seed, "anneal", &[]);
    let mut current = init;
    let mut current_err = initial_error;
    let mut accepted = 0;
    for i in 0..cfg.iterations {
        let t = cfg.temperature(i);
        let sigma = cfg.perturb_scale * t / cfg.t0;

        let z_pos: f64 = rng.sample(StandardNormal);
        let z_neg: f64 = rng.sample(StandardNormal);
        let mut pos = current.pos.clone();
        let mut neg = current.neg.clone();
        let (pb, nb) = project(
            pos.base * (sigma * z_pos).exp(),
            neg.base * (sigma * z_neg).exp(),
            delta_write,
            epsilon_read,
        );
        pos.base = pb;
        neg.base = nb;
        if !cfg.linear_mode {
            let target = if rng.random::<bool>() { &mut pos } else { &mut neg };
            resample_multiple(target, cfg.max_multiple, &mut rng);
        }
        let proposal = QuantizationScheme::new(pos, neg, delta_write, epsilon_read);
        let proposed_err = pool.mse(&proposal.sq_values());

        // Acceptance on errors normalized by the starting error.
        let delta = (proposed_err - current_err) / initial_error;
        let u: f64 = rng.random();
        if proposed_err < current_err || u < (-delta / t).exp() {
            accepted += 1;
            current = proposal;
            current_err = proposed_err;
            if current_err < best_err {
                best = current.clone();
                best_err = current_err;
            }
        }
        trace.push(best_err);
    }
    Ok(AnnealOutcome {
        scheme: best,
        error: best_err,
        initial_error,
        accepted,
        best_trace: trace,
    })
}

/// Redraw one multiple (never the leading 1) uniformly between its neighbours.
fn resample_multiple<R: Rng>(set: &mut BinSet, max_multiple: u32, rng: &mut R) {
    let n = set.multiples.len();
    if n < 2 {
        return;
    }
    let k = rng.random_range(1..n);
    let lo = set.multiples[k - 1] + 1;
    let hi = if k + 1 < n {
        set.multiples[k + 1] - 1
    } else {
        max_multiple
    };
    if lo < hi {
        set.multiples[k] = rng.random_range(lo..=hi);
    }
}

/// Error of the naive symmetric grid `{k * step : k = -N..=N}` with
/// `step = max(max|w| / N, delta)`; the reference a bin search must beat.
pub fn uniform_grid_error(weights: &[f64], n_levels: usize, delta_write: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let step = (max_abs / n_levels as f64).max(base_floor(delta_write));
    let n = n_levels as i64;
    let grid: Vec<SqEntry> = (-n..=n)
        .map(|k| SqEntry {
            value: k as f64 * step,
            m_pos: 0,
            m_neg: 0,
        })
        .collect();
    quantization_error(weights, &grid)
}

/// Integer multiple matrices replacing one float weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedLayer {
    pub rows: usize,
    pub cols: usize,
    pub m_pos: Vec<u32>,
    pub m_neg: Vec<u32>,
}

impl DecomposedLayer {
    pub fn new(rows: usize, cols: usize, m_pos: Vec<u32>, m_neg: Vec<u32>) -> Result<Self> {
        if m_pos.len() != rows * cols || m_neg.len() != rows * cols {
            return Err(Error::shape(
                "decomposed layer",
                rows * cols,
                m_pos.len().max(m_neg.len()),
            ));
        }
        Ok(DecomposedLayer {
            rows,
            cols,
            m_pos,
            m_neg,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DecomposedLayer {
            rows,
            cols,
            m_pos: vec![0; rows * cols],
            m_neg: vec![0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Map each weight to its nearest combined-set entry. Returns the integer
/// matrices and the achieved mean squared error.
pub fn decompose(
    weights: &[f64],
    rows: usize,
    cols: usize,
    scheme: &QuantizationScheme,
) -> Result<(DecomposedLayer, f64)> {
    if weights.len() != rows * cols {
        return Err(Error::shape("decompose", rows * cols, weights.len()));
    }
    if scheme.sq.is_empty() {
        return Err(Error::Empty("combined set"));
    }
    let values = scheme.sq_values();
    let mut dec = DecomposedLayer::zeros(rows, cols);
    let mut sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        let e = scheme.sq[nearest_index(&values, w)];
        dec.m_pos[i] = e.m_pos;
        dec.m_neg[i] = e.m_neg;
        let d = w - e.value;
        sum += d * d;
    }
    let mse = if weights.is_empty() {
        0.0
    } else {
        sum / weights.len() as f64
    };
    Ok((dec, mse))
}

/// `pos.base * m_pos - neg.base * m_neg`, elementwise.
pub fn reconstruct(dec: &DecomposedLayer, scheme: &QuantizationScheme) -> Result<Vec<f64>> {
    dec.m_pos
        .iter()
        .zip(&dec.m_neg)
        .enumerate()
        .map(|(i, (&mp, &mn))| {
            if !scheme.pos.allows(mp) || !scheme.neg.allows(mn) {
                return Err(Error::OutOfRange(format!(
                    "entry {i}: multiples ({mp}, {mn}) are not in the scheme's level sets"
                )));
            }
            Ok(scheme.value(mp, mn))
        })
        .collect()
}

/// Decompose every layer of a network.
pub fn decompose_network(net: &Network, scheme: &QuantizationScheme) -> Result<Vec<DecomposedLayer>> {
    net.layers
        .iter()
        .map(|l| decompose(&l.weights, l.rows(), l.cols(), scheme).map(|(d, _)| d))
        .collect()
}

/// Copy of `net` with every weight replaced by its reconstructed value.
pub fn quantized_network(net: &Network, layers: &[DecomposedLayer], scheme: &QuantizationScheme) -> Result<Network> {
    if layers.len() != net.layers.len() {
        return Err(Error::shape("decomposed network", net.layers.len(), layers.len()));
    }
    let mut out = net.clone();
    for (layer, dec) in out.layers.iter_mut().zip(layers) {
        if dec.rows != layer.rows() || dec.cols != layer.cols() {
            return Err(Error::shape(
                "decomposed layer",
                format!("{}x{}", layer.rows(), layer.cols()),
                format!("{}x{}", dec.rows, dec.cols),
            ));
        }
        layer.weights = reconstruct(dec, scheme)?;
    }
    Ok(out)
}

/// How many weights landed on each combined-set entry, in `sq` order.
pub fn bin_population(layers: &[DecomposedLayer], scheme: &QuantizationScheme) -> Vec<usize> {
    let mut counts = vec![0usize; scheme.sq.len()];
    for dec in layers {
        for (&mp, &mn) in dec.m_pos.iter().zip(&dec.m_neg) {
            let v = scheme.value(mp, mn);
            if let Ok(i) = scheme
                .sq
                .binary_search_by(|e| e.value.partial_cmp(&v).unwrap_or(Ordering::Less))
            {
                counts[i] += 1;
            }
        }
    }
    counts
}

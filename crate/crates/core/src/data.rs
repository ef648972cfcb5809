//! Datasets and file formats.
//!
//! Tensors (networks, integer multiple matrices, tile dumps) are stored as
//! safetensors files with a small JSON metadata block; schemes and configs are
//! TOML; timeline logs are JSON and CSV. Every file carries a format name and
//! version. Writes go to a temporary file that is renamed into place.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::crossbar::AnalogTile;
use crate::device::{Calibration, PcmPair};
use crate::nn::{Activation, Layer, LayerKind, Network};
use crate::quantizer::{BinSet, DecomposedLayer, QuantizationScheme};
use crate::repair::timeline::TimelineLog;
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, height, width)`, pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 3 {
            return Err(Error::shape(
                "dataset images",
                "(n, height, width)",
                format!("{:?}", images.shape()),
            ));
        }
        if images.rows() != labels.len() {
            return Err(Error::IdxCountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::OutOfRange(format!("label {l} outside 0..{classes}")));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::OutOfRange("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    /// The samples at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::IdxTruncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn idx_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::IdxMagic { expected, found });
    }
    Ok(())
}

/// Parse an IDX image file (unsigned bytes, three dimensions).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    idx_magic(bytes, IDX_IMAGES)?;
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, h, w], data)
}

/// Parse an IDX label file (unsigned bytes, one dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    idx_magic(bytes, IDX_LABELS)?;
    let n = be_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::IdxTruncated {
            expected: need,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..need].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// Deterministic 8x8 digit-like images: a 5x7 glyph of class `i % 10` at a
/// random offset, with random stroke intensity, dropped stroke pixels and
/// additive pixel noise.
pub fn synthetic_digits(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("synthetic dataset size"));
    }
    let mut rng = substream(seed, "synthetic-digits", &[]);
    let mut data = vec![0.0; n * 64];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let img = &mut data[i * 64..(i + 1) * 64];
        let r0 = rng.random_range(0..=1usize);
        let c0 = rng.random_range(0..=3usize);
        let ink = rng.random_range(0.6..=1.0);
        for (r, line) in GLYPHS[class].iter().enumerate() {
            for (c, ch) in line.bytes().enumerate() {
                if ch == b'1' && rng.random::<f64>() >= 0.1 {
                    img[(r0 + r) * 8 + c0 + c] = ink;
                }
            }
        }
        for p in img.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p = (*p + 0.2 * z).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 8, 8], data)?, labels, 10)
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- safetensors helpers ----

struct Owned {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn f64_tensor(shape: Vec<usize>, v: &[f64]) -> Owned {
    Owned {
        dtype: Dtype::F64,
        shape,
        bytes: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn u32_tensor(shape: Vec<usize>, v: &[u32]) -> Owned {
    Owned {
        dtype: Dtype::U32,
        shape,
        bytes: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::schema("safetensors", e.to_string())
}

fn write_tensors(path: &Path, kind: &str, extra: HashMap<String, String>, tensors: Vec<(String, Owned)>) -> Result<()> {
    let mut meta = extra;
    meta.insert("format".into(), format!("pcm-selfrepair/{kind}"));
    meta.insert("format_version".into(), FORMAT_VERSION.to_string());
    let views = tensors
        .iter()
        .map(|(n, t)| {
            Ok((
                n.clone(),
                TensorView::new(t.dtype, t.shape.clone(), &t.bytes).map_err(st_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, &Some(meta)).map_err(st_err)?;
    write_atomic(path, &bytes)
}

struct TensorFile {
    bytes: Vec<u8>,
    meta: HashMap<String, String>,
}

impl TensorFile {
    fn open(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (_, md) = SafeTensors::read_metadata(&bytes).map_err(st_err)?;
        let meta = md.metadata().clone().unwrap_or_default();
        let file = TensorFile { bytes, meta };
        let format = file.meta_str("format")?;
        if format != format!("pcm-selfrepair/{kind}") {
            return Err(Error::schema(
                "format",
                format!("expected pcm-selfrepair/{kind}, found {format}"),
            ));
        }
        check_version(&file.meta_str("format_version")?)?;
        Ok(file)
    }

    fn meta_str(&self, key: &str) -> Result<String> {
        self.meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::schema(format!("metadata.{key}"), "missing field"))
    }

    fn meta_json<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        serde_json::from_str(&self.meta_str(key)?).map_err(|e| Error::schema(format!("metadata.{key}"), e.to_string()))
    }

    fn raw(&self, name: &str, dtype: Dtype, shape: &[usize]) -> Result<Vec<u8>> {
        let st = SafeTensors::deserialize(&self.bytes).map_err(st_err)?;
        let t = st.tensor(name).map_err(|_| Error::schema(name, "missing tensor"))?;
        if t.dtype() != dtype {
            return Err(Error::schema(
                name,
                format!("expected {dtype:?}, found {:?}", t.dtype()),
            ));
        }
        if t.shape() != shape {
            return Err(Error::schema(
                name,
                format!("expected shape {shape:?}, found {:?}", t.shape()),
            ));
        }
        Ok(t.data().to_vec())
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let raw = self.raw(name, Dtype::F64, shape)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap_or([0; 8])))
            .collect())
    }

    fn u32s(&self, name: &str, shape: &[usize]) -> Result<Vec<u32>> {
        let raw = self.raw(name, Dtype::U32, shape)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap_or([0; 4])))
            .collect())
    }
}

fn check_version(found: &str) -> Result<()> {
    if found != FORMAT_VERSION.to_string() {
        return Err(Error::Version {
            expected: FORMAT_VERSION.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    kind: LayerKind,
    activation: Activation,
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    let layers: Vec<LayerMeta> = net
        .layers
        .iter()
        .map(|l| LayerMeta {
            kind: l.kind,
            activation: l.activation,
        })
        .collect();
    meta.insert("input_shape".into(), json(&net.input_shape)?);
    meta.insert("layers".into(), json(&layers)?);
    meta.insert("rng_seed".into(), net.rng_seed.to_string());
    let mut tensors = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        tensors.push((
            format!("layer.{i}.weight"),
            f64_tensor(vec![l.rows(), l.cols()], &l.weights),
        ));
        tensors.push((format!("layer.{i}.bias"), f64_tensor(vec![l.rows()], &l.bias)));
    }
    write_tensors(path, "network", meta, tensors)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let f = TensorFile::open(path, "network")?;
    let input_shape: Vec<usize> = f.meta_json("input_shape")?;
    let metas: Vec<LayerMeta> = f.meta_json("layers")?;
    let rng_seed = f
        .meta_str("rng_seed")?
        .parse()
        .map_err(|e: std::num::ParseIntError| Error::schema("metadata.rng_seed", e.to_string()))?;
    let layers = metas
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(Layer {
                kind: m.kind,
                activation: m.activation,
                weights: f.f64s(&format!("layer.{i}.weight"), &[m.kind.rows(), m.kind.cols()])?,
                bias: f.f64s(&format!("layer.{i}.bias"), &[m.kind.rows()])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(input_shape, layers, rng_seed)
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::schema("json", e.to_string()))
}

fn hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

/// CSV text with an explicit header row followed by one record per item.
pub fn to_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| Error::schema("csv", e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::schema("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::schema("csv", e.to_string()))
}

/// Integer multiple matrices of every layer, tagged with the scheme digest.
pub fn save_decomposed(layers: &[DecomposedLayer], scheme: &QuantizationScheme, path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    let shapes: Vec<(usize, usize)> = layers.iter().map(|d| (d.rows, d.cols)).collect();
    meta.insert("shapes".into(), json(&shapes)?);
    meta.insert("scheme_digest".into(), hex(&scheme.digest()));
    let mut tensors = Vec::new();
    for (i, d) in layers.iter().enumerate() {
        tensors.push((format!("layer.{i}.m_pos"), u32_tensor(vec![d.rows, d.cols], &d.m_pos)));
        tensors.push((format!("layer.{i}.m_neg"), u32_tensor(vec![d.rows, d.cols], &d.m_neg)));
    }
    write_tensors(path, "decomposed", meta, tensors)
}

/// Load decomposed layers; `scheme`, when given, must match the stored digest.
pub fn load_decomposed(path: &Path, scheme: Option<&QuantizationScheme>) -> Result<Vec<DecomposedLayer>> {
    let f = TensorFile::open(path, "decomposed")?;
    if let Some(s) = scheme {
        let stored = f.meta_str("scheme_digest")?;
        if stored != hex(&s.digest()) {
            return Err(Error::schema(
                "metadata.scheme_digest",
                "decomposed layers were built for a different scheme",
            ));
        }
    }
    let shapes: Vec<(usize, usize)> = f.meta_json("shapes")?;
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| {
            DecomposedLayer::new(
                r,
                c,
                f.u32s(&format!("layer.{i}.m_pos"), &[r, c])?,
                f.u32s(&format!("layer.{i}.m_neg"), &[r, c])?,
            )
        })
        .collect()
}

/// Conductances, drift exponents, programming times and targets of every tile.
pub fn save_tiles(tiles: &[AnalogTile], path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    let shapes: Vec<(usize, usize)> = tiles.iter().map(|t| (t.rows, t.cols)).collect();
    let cals: Vec<Calibration> = tiles.iter().map(|t| t.calibration).collect();
    meta.insert("shapes".into(), json(&shapes)?);
    meta.insert("calibrations".into(), json(&cals)?);
    let mut tensors = Vec::new();
    for (i, t) in tiles.iter().enumerate() {
        let shape = vec![t.rows, t.cols];
        let col = |f: fn(&PcmPair) -> f64| t.pairs.iter().map(f).collect::<Vec<f64>>();
        tensors.push((format!("tile.{i}.g_pos"), f64_tensor(shape.clone(), &col(|p| p.g_pos))));
        tensors.push((format!("tile.{i}.g_neg"), f64_tensor(shape.clone(), &col(|p| p.g_neg))));
        tensors.push((
            format!("tile.{i}.nu_pos"),
            f64_tensor(shape.clone(), &col(|p| p.nu_pos)),
        ));
        tensors.push((
            format!("tile.{i}.nu_neg"),
            f64_tensor(shape.clone(), &col(|p| p.nu_neg)),
        ));
        tensors.push((
            format!("tile.{i}.t_prog"),
            f64_tensor(shape.clone(), &col(|p| p.t_prog)),
        ));
        let mp: Vec<u32> = t.pairs.iter().map(|p| p.target_m_pos).collect();
        let mn: Vec<u32> = t.pairs.iter().map(|p| p.target_m_neg).collect();
        tensors.push((format!("tile.{i}.target_m_pos"), u32_tensor(shape.clone(), &mp)));
        tensors.push((format!("tile.{i}.target_m_neg"), u32_tensor(shape.clone(), &mn)));
        tensors.push((format!("tile.{i}.ideal"), f64_tensor(shape.clone(), &t.ideal)));
        tensors.push((format!("tile.{i}.baseline_probe"), f64_tensor(shape, &t.baseline_probe)));
    }
    write_tensors(path, "tiles", meta, tensors)
}

pub fn load_tiles(path: &Path) -> Result<Vec<AnalogTile>> {
    let f = TensorFile::open(path, "tiles")?;
    let shapes: Vec<(usize, usize)> = f.meta_json("shapes")?;
    let cals: Vec<Calibration> = f.meta_json("calibrations")?;
    if cals.len() != shapes.len() {
        return Err(Error::schema(
            "metadata.calibrations",
            "one calibration per tile required",
        ));
    }
    shapes
        .into_iter()
        .zip(cals)
        .enumerate()
        .map(|(i, ((r, c), calibration))| {
            let s = [r, c];
            let g = |n: &str| f.f64s(&format!("tile.{i}.{n}"), &s);
            let (gp, gn, np, nn, tp) = (g("g_pos")?, g("g_neg")?, g("nu_pos")?, g("nu_neg")?, g("t_prog")?);
            let mp = f.u32s(&format!("tile.{i}.target_m_pos"), &s)?;
            let mn = f.u32s(&format!("tile.{i}.target_m_neg"), &s)?;
            let pairs = (0..r * c)
                .map(|k| PcmPair {
                    g_pos: gp[k],
                    g_neg: gn[k],
                    nu_pos: np[k],
                    nu_neg: nn[k],
                    t_prog: tp[k],
                    target_m_pos: mp[k],
                    target_m_neg: mn[k],
                })
                .collect();
            Ok(AnalogTile {
                rows: r,
                cols: c,
                pairs,
                calibration,
                ideal: g("ideal")?,
                baseline_probe: g("baseline_probe")?,
            })
        })
        .collect()
}

/// Human-readable scheme file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeFile {
    pub format_version: u32,
    pub delta_write: f64,
    pub epsilon_read: f64,
    /// Mean squared quantization error reached on the training weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_error: Option<f64>,
    /// Hex SHA-256 of the scheme; checked on load.
    pub digest: String,
    pub pos: BinSet,
    pub neg: BinSet,
}

pub fn scheme_to_toml(scheme: &QuantizationScheme, achieved_error: Option<f64>) -> Result<String> {
    let f = SchemeFile {
        format_version: FORMAT_VERSION,
        delta_write: scheme.delta_write,
        epsilon_read: scheme.epsilon_read,
        achieved_error,
        digest: hex(&scheme.digest()),
        pos: scheme.pos.clone(),
        neg: scheme.neg.clone(),
    };
    toml::to_string(&f).map_err(|e| Error::schema("scheme", e.to_string()))
}

pub fn scheme_from_toml(text: &str) -> Result<(QuantizationScheme, Option<f64>)> {
    let value: toml::Value = toml::from_str(text).map_err(|e| Error::schema("scheme", e.message().to_string()))?;
    if let Some(v) = value.get("format_version") {
        let found = v.as_integer().map_or_else(|| v.to_string(), |i| i.to_string());
        check_version(&found)?;
    }
    let f: SchemeFile = value
        .try_into()
        .map_err(|e: toml::de::Error| schema_from_serde(e.message()))?;
    let pos = BinSet::new(f.pos.base, f.pos.multiples).map_err(|e| Error::schema("pos", e.to_string()))?;
    let neg = BinSet::new(f.neg.base, f.neg.multiples).map_err(|e| Error::schema("neg", e.to_string()))?;
    let scheme = QuantizationScheme::new(pos, neg, f.delta_write, f.epsilon_read);
    if hex(&scheme.digest()) != f.digest {
        return Err(Error::schema("digest", "does not match the stored bin sets"));
    }
    Ok((scheme, f.achieved_error))
}

/// Map serde's "missing field `x`" style messages to a field path.
pub(crate) fn schema_from_serde(message: &str) -> Error {
    let field = message
        .split('`')
        .nth(1)
        .map_or_else(|| "<root>".to_string(), str::to_string);
    Error::schema(field, message)
}

pub fn save_scheme(scheme: &QuantizationScheme, achieved_error: Option<f64>, path: &Path) -> Result<()> {
    write_atomic(path, scheme_to_toml(scheme, achieved_error)?.as_bytes())
}

pub fn load_scheme(path: &Path) -> Result<(QuantizationScheme, Option<f64>)> {
    scheme_from_toml(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimelineFile {
    format: String,
    format_version: u32,
    log: TimelineLog,
}

pub fn timeline_to_json(log: &TimelineLog) -> Result<String> {
    let f = TimelineFile {
        format: "pcm-selfrepair/timeline".into(),
        format_version: FORMAT_VERSION,
        log: log.clone(),
    };
    serde_json::to_string_pretty(&f).map_err(|e| Error::schema("timeline", e.to_string()))
}

pub fn timeline_from_json(text: &str) -> Result<TimelineLog> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::schema("timeline", e.to_string()))?;
    match value.get("format_version") {
        Some(v) => check_version(&v.to_string())?,
        None => return Err(Error::schema("format_version", "missing field")),
    }
    let f: TimelineFile = serde_json::from_value(value).map_err(|e| schema_from_serde(&e.to_string()))?;
    Ok(f.log)
}

pub fn save_timeline(log: &TimelineLog, json_path: &Path, csv_path: &Path) -> Result<()> {
    write_atomic(json_path, timeline_to_json(log)?.as_bytes())?;
    write_atomic(csv_path, log.to_csv()?.as_bytes())
}

pub fn load_timeline(path: &Path) -> Result<TimelineLog> {
    timeline_from_json(&fs::read_to_string(path)?)
}

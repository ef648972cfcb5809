//! Bit-packed storage of integer multiple matrices.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `PQW1`                            |
//! | 4      | 2    | rows (u16)                              |
//! | 6      | 2    | cols (u16)                              |
//! | 8      | 1    | bits per entry                          |
//! | 9      | 1    | polarity (0 positive, 1 negative)       |
//! | 10     | 6    | first 6 bytes of the scheme digest      |
//! | 16     | ...  | payload                                 |
//!
//! Entries are written row-major; entry `k` occupies bits
//! `k*bits .. (k+1)*bits` of the payload, where bit `i` is bit `i % 8` (least
//! significant first) of byte `i / 8`. Unused high bits of the last byte are
//! zero.

use serde::{Deserialize, Serialize};

use crate::quantizer::{DecomposedLayer, QuantizationScheme};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PQW1";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Pos = 0,
    Neg = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedLayer {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub polarity: Polarity,
    pub digest: [u8; 6],
    pub payload: Vec<u8>,
}

/// Entry width for integers in `0..=max`: one nibble up to 15, otherwise
/// `ceil(log2(max + 1))`.
pub fn bits_for(max: u32) -> u8 {
    (32 - max.leading_zeros()).max(4) as u8
}

pub fn payload_len(entries: usize, bits: u8) -> usize {
    (entries * bits as usize).div_ceil(8)
}

fn digest_prefix(scheme: &QuantizationScheme) -> [u8; 6] {
    let d = scheme.digest();
    [d[0], d[1], d[2], d[3], d[4], d[5]]
}

/// Pack one integer matrix with entries in `0..=max`.
pub fn pack(
    values: &[u32],
    rows: usize,
    cols: usize,
    max: u32,
    polarity: Polarity,
    digest: [u8; 6],
) -> Result<PackedLayer> {
    if values.len() != rows * cols {
        return Err(Error::shape("packed matrix", rows * cols, values.len()));
    }
    if rows > u16::MAX as usize || cols > u16::MAX as usize {
        return Err(Error::OutOfRange(format!(
            "{rows}x{cols} does not fit the u16 header fields"
        )));
    }
    let bits = bits_for(max);
    let mut payload = vec![0u8; payload_len(values.len(), bits)];
    for (k, &v) in values.iter().enumerate() {
        if v > max {
            return Err(Error::OutOfRange(format!(
                "entry {k} = {v} exceeds the largest multiple {max}"
            )));
        }
        let start = k * bits as usize;
        for b in 0..bits as usize {
            if (v >> b) & 1 == 1 {
                let bit = start + b;
                payload[bit / 8] |= 1 << (bit % 8);
            }
        }
    }
    Ok(PackedLayer {
        rows,
        cols,
        bits,
        polarity,
        digest,
        payload,
    })
}

/// Pack both multiple matrices of a layer; `M` is the scheme's largest multiple.
pub fn encode(dec: &DecomposedLayer, scheme: &QuantizationScheme) -> Result<(PackedLayer, PackedLayer)> {
    let max = scheme.max_multiple();
    let d = digest_prefix(scheme);
    Ok((
        pack(&dec.m_pos, dec.rows, dec.cols, max, Polarity::Pos, d)?,
        pack(&dec.m_neg, dec.rows, dec.cols, max, Polarity::Neg, d)?,
    ))
}

/// Unpack the integer matrix, row-major.
pub fn decode(p: &PackedLayer) -> Result<Vec<u32>> {
    if p.bits == 0 || p.bits > 32 {
        return Err(Error::PackedHeader(format!("bits per entry {} outside 1..=32", p.bits)));
    }
    let n = p.rows * p.cols;
    let needed = payload_len(n, p.bits);
    if p.payload.len() < needed {
        return Err(Error::PackedTruncated {
            position: HEADER_LEN + p.payload.len(),
            needed,
            found: p.payload.len(),
        });
    }
    let bits = p.bits as usize;
    Ok((0..n)
        .map(|k| {
            let mut v = 0u32;
            for b in 0..bits {
                let bit = k * bits + b;
                v |= u32::from((p.payload[bit / 8] >> (bit % 8)) & 1) << b;
            }
            v
        })
        .collect())
}

/// Rebuild a decomposed layer from its two packed halves.
pub fn decode_layer(pos: &PackedLayer, neg: &PackedLayer) -> Result<DecomposedLayer> {
    if pos.polarity != Polarity::Pos || neg.polarity != Polarity::Neg {
        return Err(Error::PackedHeader(
            "expected one positive and one negative matrix".into(),
        ));
    }
    if (pos.rows, pos.cols, pos.digest) != (neg.rows, neg.cols, neg.digest) {
        return Err(Error::PackedHeader("positive and negative halves disagree".into()));
    }
    DecomposedLayer::new(pos.rows, pos.cols, decode(pos)?, decode(neg)?)
}

impl PackedLayer {
    /// Check that the header belongs to `scheme`.
    pub fn verify(&self, scheme: &QuantizationScheme) -> Result<()> {
        if self.digest != digest_prefix(scheme) {
            return Err(Error::PackedHeader("scheme digest mismatch".into()));
        }
        if self.bits != bits_for(scheme.max_multiple()) {
            return Err(Error::PackedHeader(format!(
                "{} bits per entry, scheme needs {}",
                self.bits,
                bits_for(scheme.max_multiple())
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend(MAGIC);
        out.extend((self.rows as u16).to_le_bytes());
        out.extend((self.cols as u16).to_le_bytes());
        out.push(self.bits);
        out.push(self.polarity as u8);
        out.extend(self.digest);
        out.extend(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::PackedHeader(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::PackedHeader(format!("bad magic {:?}", &bytes[0..4])));
        }
        let rows = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let cols = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let bits = bytes[8];
        if bits == 0 || bits > 32 {
            return Err(Error::PackedHeader(format!("bits per entry {bits} outside 1..=32")));
        }
        let polarity = match bytes[9] {
            0 => Polarity::Pos,
            1 => Polarity::Neg,
            t => return Err(Error::PackedHeader(format!("unknown polarity tag {t}"))),
        };
        let mut digest = [0u8; 6];
        digest.copy_from_slice(&bytes[10..16]);
        let needed = payload_len(rows * cols, bits);
        let found = bytes.len() - HEADER_LEN;
        if found < needed {
            return Err(Error::PackedTruncated {
                position: bytes.len(),
                needed,
                found,
            });
        }
        if found > needed {
            return Err(Error::PackedHeader(format!(
                "{} trailing bytes after payload",
                found - needed
            )));
        }
        Ok(PackedLayer {
            rows,
            cols,
            bits,
            polarity,
            digest,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarityReport {
    pub polarity: Polarity,
    pub entries: usize,
    pub bits: u8,
    pub packed_bytes: usize,
    /// One 32-bit float per entry.
    pub float_bytes: usize,
    pub ratio: f64,
    /// Count of each multiple `0..=M`.
    pub histogram: Vec<usize>,
    /// Zeroth-order entropy in bits per entry.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub pos: PolarityReport,
    pub neg: PolarityReport,
    /// Both payloads together.
    pub packed_bytes: usize,
    /// Both payloads plus their headers.
    pub file_bytes: usize,
    /// The layer as one 32-bit float per weight.
    pub float_bytes: usize,
    pub ratio: f64,
}

pub fn entropy(histogram: &[usize]) -> f64 {
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

fn polarity_report(values: &[u32], max: u32, polarity: Polarity) -> PolarityReport {
    let bits = bits_for(max);
    let mut histogram = vec![0usize; max as usize + 1];
    for &v in values {
        if let Some(c) = histogram.get_mut(v as usize) {
            *c += 1;
        }
    }
    let packed = payload_len(values.len(), bits);
    let float_bytes = values.len() * 4;
    PolarityReport {
        polarity,
        entries: values.len(),
        bits,
        packed_bytes: packed,
        float_bytes,
        ratio: ratio(float_bytes, packed),
        entropy: entropy(&histogram),
        histogram,
    }
}

fn ratio(baseline: usize, packed: usize) -> f64 {
    if packed == 0 {
        0.0
    } else {
        baseline as f64 / packed as f64
    }
}

pub fn compression_report(dec: &DecomposedLayer, scheme: &QuantizationScheme) -> CompressionReport {
    let max = scheme.max_multiple();
    let pos = polarity_report(&dec.m_pos, max, Polarity::Pos);
    let neg = polarity_report(&dec.m_neg, max, Polarity::Neg);
    let packed = pos.packed_bytes + neg.packed_bytes;
    let float_bytes = dec.len() * 4;
    CompressionReport {
        packed_bytes: packed,
        file_bytes: packed + 2 * HEADER_LEN,
        float_bytes,
        ratio: ratio(float_bytes, packed),
        pos,
        neg,
    }
}

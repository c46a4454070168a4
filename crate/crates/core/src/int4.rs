//! Token-wise asymmetric INT4 quantization with nibble packing.
//!
//! For one head vector `x`:
//!
//! ```text
//! s   = (max(x) - min(x)) / 15
//! z   = round(-min(x) / s)
//! q_i = clip(round(x_i / s) + z, 0, 15)
//! x̂_i = s * (q_i - z)
//! ```
//!
//! `round` is half-away-from-zero. The scale is kept as `f32`, rounded up so
//! the grid always covers `[min, max]`; every later step uses that stored
//! value. A constant vector stores `s = 0` and carries the constant in
//! `offset`.
//!
//! Wire layout: element `2i` sits in the low nibble and `2i + 1` in the high
//! nibble of byte `i`. The sidecar is `scale: f32 | zero_point: i32 | offset: f32`,
//! little endian, [`SIDECAR_BYTES`] in total.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::check_finite;

pub const LEVELS: u8 = 15;
pub const SIDECAR_BYTES: usize = 12;

/// Per-(token, head) scale and zero point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    /// Integer zero point. It lies in `[0, 15]` whenever the vector straddles
    /// zero; one-signed vectors push it outside that range.
    pub zero_point: i32,
    /// Reconstruction value for the zero-range case (`scale == 0`).
    pub offset: f32,
}

impl QuantParams {
    pub fn from_range(min: f64, max: f64) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        if max <= min {
            return Ok(Self { scale: 0.0, zero_point: 0, offset: min as f32 });
        }
        let scale = round_up_f32((max - min) / f64::from(LEVELS));
        let z = (-min / f64::from(scale)).round();
        if z.abs() > f64::from(i32::MAX) {
            return Err(Error::ZeroPointOverflow(z));
        }
        Ok(Self { scale, zero_point: z as i32, offset: 0.0 })
    }

    pub fn is_constant(&self) -> bool {
        self.scale == 0.0
    }

    /// 4-bit code of one element.
    #[inline]
    pub fn code(&self, x: f64) -> u8 {
        if self.is_constant() {
            return 0;
        }
        let q = (x / f64::from(self.scale)).round() + f64::from(self.zero_point);
        q.clamp(0.0, f64::from(LEVELS)) as u8
    }

    /// Dequantized value of a 4-bit code.
    #[inline]
    pub fn value(&self, q: u8) -> f64 {
        if self.is_constant() {
            f64::from(self.offset)
        } else {
            f64::from(self.scale) * (f64::from(q) - f64::from(self.zero_point))
        }
    }

    /// Half a grid step, the worst-case in-range reconstruction error. For a
    /// constant vector this is half the `f32` spacing around `offset`.
    pub fn half_step(&self) -> f64 {
        if self.is_constant() {
            let o = self.offset.abs();
            (f64::from(o.next_up()) - f64::from(o)) / 2.0
        } else {
            f64::from(self.scale) / 2.0
        }
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.zero_point.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
    }

    pub fn read_le(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SIDECAR_BYTES {
            return Err(Error::Format("truncated quantization sidecar".into()));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let params = Self {
            scale: f32::from_le_bytes(word(0)),
            zero_point: i32::from_le_bytes(word(4)),
            offset: f32::from_le_bytes(word(8)),
        };
        if !(params.scale >= 0.0 && params.scale.is_finite() && params.offset.is_finite()) {
            return Err(Error::Format("invalid quantization sidecar".into()));
        }
        Ok(params)
    }
}

/// Smallest `f32` not below `v` (for finite, non-negative `v`).
fn round_up_f32(v: f64) -> f32 {
    let f = v as f32;
    if f64::from(f) < v {
        f.next_up()
    } else {
        f
    }
}

/// Nibble-packed 4-bit codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedNibbles {
    bytes: Vec<u8>,
    logical_len: usize,
}

impl PackedNibbles {
    pub fn from_nibbles(nibbles: &[u8]) -> Result<Self> {
        Ok(Self { bytes: pack(nibbles)?, logical_len: nibbles.len() })
    }

    pub fn from_bytes(bytes: Vec<u8>, logical_len: usize) -> Result<Self> {
        // validates length and padding
        unpack(&bytes, logical_len)?;
        Ok(Self { bytes, logical_len })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn nibbles(&self) -> Vec<u8> {
        unpack(&self.bytes, self.logical_len).expect("invariant: valid packing")
    }
}

pub fn packed_len(logical_len: usize) -> usize {
    logical_len.div_ceil(2)
}

pub fn pack(nibbles: &[u8]) -> Result<Vec<u8>> {
    if let Some(&bad) = nibbles.iter().find(|&&n| n > LEVELS) {
        return Err(Error::NibbleRange(bad));
    }
    Ok(nibbles
        .chunks(2)
        .map(|pair| pair[0] | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect())
}

pub fn unpack(bytes: &[u8], logical_len: usize) -> Result<Vec<u8>> {
    if bytes.len() != packed_len(logical_len) {
        return Err(shape_err(format!(
            "{} bytes cannot hold exactly {logical_len} nibbles",
            bytes.len()
        )));
    }
    if logical_len % 2 == 1 && bytes[bytes.len() - 1] >> 4 != 0 {
        return Err(Error::Format("nonzero padding nibble".into()));
    }
    let mut out = Vec::with_capacity(logical_len);
    for &b in bytes {
        out.push(b & 0x0f);
        out.push(b >> 4);
    }
    out.truncate(logical_len);
    Ok(out)
}

/// Quantize `x` straight into its packed representation in `out`.
pub fn quantize_into(x: &[f64], out: &mut [u8]) -> Result<QuantParams> {
    if x.is_empty() {
        return Err(shape_err("cannot quantize an empty vector"));
    }
    if out.len() != packed_len(x.len()) {
        return Err(shape_err(format!(
            "output holds {} bytes, {} needed",
            out.len(),
            packed_len(x.len())
        )));
    }
    check_finite(x)?;
    let (min, max) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let params = QuantParams::from_range(min, max)?;
    for (byte, pair) in out.iter_mut().zip(x.chunks(2)) {
        let lo = params.code(pair[0]);
        let hi = pair.get(1).map_or(0, |&v| params.code(v));
        *byte = lo | (hi << 4);
    }
    Ok(params)
}

pub fn quantize_head(x: &[f64]) -> Result<(PackedNibbles, QuantParams)> {
    let mut bytes = vec![0u8; packed_len(x.len())];
    let params = quantize_into(x, &mut bytes)?;
    Ok((PackedNibbles { bytes, logical_len: x.len() }, params))
}

/// Dequantize packed bytes into `out` (`out.len()` is the logical length).
pub fn dequantize_into(bytes: &[u8], params: &QuantParams, out: &mut [f64]) {
    debug_assert_eq!(bytes.len(), packed_len(out.len()));
    for (pair, &b) in out.chunks_mut(2).zip(bytes) {
        pair[0] = params.value(b & 0x0f);
        if let Some(hi) = pair.get_mut(1) {
            *hi = params.value(b >> 4);
        }
    }
}

pub fn dequantize_head(packed: &PackedNibbles, params: &QuantParams) -> Vec<f64> {
    let mut out = vec![0.0; packed.logical_len];
    dequantize_into(&packed.bytes, params, &mut out);
    out
}

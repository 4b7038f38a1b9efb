//! Feature-map messages between vehicles.
//!
//! Wire format, little-endian:
//! ```text
//! "FSMG" | version u16 | frame id u64 | sender u32 | pose x, y, yaw f64
//! | H_f u16 | W_f u16 | C_t u16 | s u8 | dtype u8 | [q8 only: min f32, max f32]
//! | header CRC32 | payload | payload CRC32
//! ```
//! The payload is channel-major, then row, then column, and is always
//! exactly `H_f * W_f * C_t * bytes(dtype)` long.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TransportError;
use crate::geometry::{FeatureMap, Pose};

pub const MESSAGE_MAGIC: &[u8; 4] = b"FSMG";
pub const MESSAGE_VERSION: u16 = 1;
const FIXED_HEADER: usize = 4 + 2 + 8 + 4 + 24 + 2 + 2 + 2 + 1 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Q8,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::Q8 => 1,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::Q8 => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self, TransportError> {
        match t {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::Q8),
            other => Err(TransportError::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageHeader {
    pub version: u16,
    pub frame_id: u64,
    pub sender: u32,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub stride: u8,
    pub dtype: Dtype,
}

impl MessageHeader {
    pub fn pose(&self) -> Pose {
        Pose { x: self.x, y: self.y, yaw: self.yaw, ..Pose::default() }
    }
}

/// A decoded message. The map's origin is the sender pose from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMessage {
    pub header: MessageHeader,
    pub map: FeatureMap<f32>,
}

/// Payload bytes for a feature grid; no sparsity is exploited.
pub fn payload_size(height: usize, width: usize, channels: usize, dtype: Dtype) -> usize {
    height * width * channels * dtype.bytes()
}

fn header_size(dtype: Dtype) -> usize {
    FIXED_HEADER + if dtype == Dtype::Q8 { 8 } else { 0 } + 4
}

/// Total encoded length including header and checksums.
pub fn message_size(height: usize, width: usize, channels: usize, dtype: Dtype) -> usize {
    header_size(dtype) + payload_size(height, width, channels, dtype) + 4
}

/// Require that the shared map carries fewer values than the raw BEV image
/// it was computed from: `H_f * W_f * C_t < H * W * C`.
pub fn check_bandwidth(map_shape: [usize; 3], bev_shape: [usize; 3]) -> Result<(), TransportError> {
    let shared: usize = map_shape.iter().product();
    let raw: usize = bev_shape.iter().product();
    if shared >= raw {
        return Err(TransportError::Bandwidth { shared, raw });
    }
    Ok(())
}

/// Same check from the map shape and its stride, assuming the 3-channel BEV.
pub fn check_map_bandwidth(map: &FeatureMap<f32>) -> Result<(), TransportError> {
    let bev = [crate::geometry::BevGrid::CHANNELS, map.height * map.stride, map.width * map.stride];
    check_bandwidth(map.shape(), bev)
}

/// Affine 8-bit code over the message range; zero range encodes as all zeros.
fn q8_encode(values: &[f32]) -> (f32, f32, Vec<u8>) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || hi <= lo {
        let lo = if values.is_empty() { 0.0 } else { lo };
        return (lo, lo, vec![0; values.len()]);
    }
    let range = hi as f64 - lo as f64;
    let codes = values
        .iter()
        .map(|&v| (((v as f64 - lo as f64) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (lo, hi, codes)
}

fn q8_decode(lo: f32, hi: f32, codes: &[u8]) -> Vec<f32> {
    let range = hi as f64 - lo as f64;
    codes.iter().map(|&q| (lo as f64 + q as f64 / 255.0 * range) as f32).collect()
}

pub fn encode_message(map: &FeatureMap<f32>, frame_id: u64, sender: u32, dtype: Dtype) -> Result<Vec<u8>, TransportError> {
    let bad = |m: String| Err(TransportError::InvalidMap(m));
    if map.data.len() != map.channels * map.height * map.width {
        return bad(format!("data length {} for shape {:?}", map.data.len(), map.shape()));
    }
    if map.data.is_empty() {
        return bad("empty map".into());
    }
    if map.height > u16::MAX as usize || map.width > u16::MAX as usize || map.channels > u16::MAX as usize {
        return bad(format!("shape {:?} exceeds 16-bit fields", map.shape()));
    }
    if map.stride == 0 || map.stride > u8::MAX as usize {
        return bad(format!("stride {}", map.stride));
    }
    if map.data.iter().any(|v| !v.is_finite()) {
        return bad("non-finite value".into());
    }
    check_map_bandwidth(map)?;

    let mut buf = Vec::with_capacity(message_size(map.height, map.width, map.channels, dtype));
    buf.extend_from_slice(MESSAGE_MAGIC);
    buf.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&frame_id.to_le_bytes());
    buf.extend_from_slice(&sender.to_le_bytes());
    for v in [map.origin.x, map.origin.y, map.origin.yaw] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [map.height, map.width, map.channels] {
        buf.extend_from_slice(&(v as u16).to_le_bytes());
    }
    buf.push(map.stride as u8);
    buf.push(dtype.tag());

    let payload: Vec<u8> = match dtype {
        Dtype::F32 => map.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F16 => map.data.iter().flat_map(|&v| f16::from_f32(v).to_le_bytes()).collect(),
        Dtype::Q8 => {
            let (lo, hi, codes) = q8_encode(&map.data);
            buf.extend_from_slice(&lo.to_le_bytes());
            buf.extend_from_slice(&hi.to_le_bytes());
            codes
        }
    };
    let hcrc = crc32fast::hash(&buf);
    buf.extend_from_slice(&hcrc.to_le_bytes());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(buf)
}

fn need(bytes: &[u8], n: usize) -> Result<(), TransportError> {
    if bytes.len() < n {
        return Err(TransportError::Truncated { needed: n, have: bytes.len() });
    }
    Ok(())
}

fn le<const N: usize>(b: &[u8], at: usize) -> [u8; N] {
    b[at..at + N].try_into().unwrap()
}

pub fn decode_message(bytes: &[u8]) -> Result<FeatureMessage, TransportError> {
    need(bytes, 6)?;
    if &bytes[..4] != MESSAGE_MAGIC {
        return Err(TransportError::BadMagic);
    }
    let version = u16::from_le_bytes(le(bytes, 4));
    if version != MESSAGE_VERSION {
        return Err(TransportError::UnknownVersion(version));
    }
    need(bytes, FIXED_HEADER)?;
    let dtype = Dtype::from_tag(bytes[FIXED_HEADER - 1])?;
    let hlen = header_size(dtype);
    need(bytes, hlen)?;
    let stored = u32::from_le_bytes(le(bytes, hlen - 4));
    if crc32fast::hash(&bytes[..hlen - 4]) != stored {
        return Err(TransportError::HeaderChecksum);
    }
    let f64_at = |at| f64::from_le_bytes(le(bytes, at));
    let u16_at = |at| u16::from_le_bytes(le(bytes, at));
    let header = MessageHeader {
        version,
        frame_id: u64::from_le_bytes(le(bytes, 6)),
        sender: u32::from_le_bytes(le(bytes, 14)),
        x: f64_at(18),
        y: f64_at(26),
        yaw: f64_at(34),
        height: u16_at(42),
        width: u16_at(44),
        channels: u16_at(46),
        stride: bytes[48],
        dtype,
    };
    let (h, w, c) = (header.height as usize, header.width as usize, header.channels as usize);
    let plen = payload_size(h, w, c, dtype);
    need(bytes, hlen + plen + 4)?;
    if bytes.len() > hlen + plen + 4 {
        return Err(TransportError::InvalidMap(format!("{} trailing bytes", bytes.len() - hlen - plen - 4)));
    }
    let payload = &bytes[hlen..hlen + plen];
    if crc32fast::hash(payload) != u32::from_le_bytes(le(bytes, hlen + plen)) {
        return Err(TransportError::PayloadChecksum);
    }
    let data: Vec<f32> = match dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        Dtype::F16 => payload.chunks_exact(2).map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f32()).collect(),
        Dtype::Q8 => {
            let lo = f32::from_le_bytes(le(bytes, FIXED_HEADER));
            let hi = f32::from_le_bytes(le(bytes, FIXED_HEADER + 4));
            q8_decode(lo, hi, payload)
        }
    };
    let map = FeatureMap { channels: c, height: h, width: w, stride: header.stride as usize, data, origin: header.pose() };
    Ok(FeatureMessage { header, map })
}

/// One row of the shared-feature size table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeRow {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bytes: usize,
}

pub fn size_table(grids: &[(usize, usize)], channels: &[usize], dtype: Dtype) -> Vec<SizeRow> {
    grids
        .iter()
        .flat_map(|&(h, w)| channels.iter().map(move |&c| SizeRow { height: h, width: w, channels: c, bytes: payload_size(h, w, c, dtype) }))
        .collect()
}

/// Lossy link: Bernoulli drops and a fixed-plus-uniform latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub drop_probability: f64,
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub seed: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self { drop_probability: 0.0, latency_ms: 5.0, jitter_ms: 2.0, seed: 0 }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(TransportError::InvalidChannel(format!("drop probability {}", self.drop_probability)));
        }
        if !(self.latency_ms >= 0.0 && self.jitter_ms >= 0.0 && self.latency_ms.is_finite() && self.jitter_ms.is_finite()) {
            return Err(TransportError::InvalidChannel(format!("latency {} / jitter {}", self.latency_ms, self.jitter_ms)));
        }
        Ok(())
    }

    /// A link with its own RNG seeded from the model.
    pub fn link(&self) -> Result<Link, TransportError> {
        self.validate()?;
        Ok(Link { model: *self, rng: ChaCha8Rng::seed_from_u64(self.seed) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Delivered { bytes: Vec<u8>, latency_ms: f64 },
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Link {
    model: ChannelModel,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn send(&mut self, msg: &[u8]) -> Delivery {
        simulate_channel(msg, &self.model, &mut self.rng)
    }
}

pub fn simulate_channel<R: Rng + ?Sized>(msg: &[u8], model: &ChannelModel, rng: &mut R) -> Delivery {
    // Always draw both values so the stream does not depend on outcomes.
    let u: f64 = rng.random();
    let j: f64 = rng.random();
    if u < model.drop_probability {
        Delivery::Dropped
    } else {
        Delivery::Delivered { bytes: msg.to_vec(), latency_ms: model.latency_ms + j * model.jitter_ms }
    }
}

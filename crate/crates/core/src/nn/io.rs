//! `FSNN` parameter files: magic, version, layer manifest, little-endian
//! `f32` parameters, trailing CRC32 over everything before it.

use std::fs;
use std::path::Path;

use super::layers::LayerSpec;
use super::network::Network;
use crate::error::NnError;

pub const PARAM_MAGIC: &[u8; 4] = b"FSNN";
pub const PARAM_VERSION: u16 = 1;

fn spec_code(spec: &LayerSpec) -> (u8, u8, u8, u32) {
    match *spec {
        LayerSpec::Conv { kernel, out_channels, bias } => (0, kernel as u8, bias as u8, out_channels as u32),
        LayerSpec::MaxPool => (1, 0, 0, 0),
        LayerSpec::ChannelNorm => (2, 0, 0, 0),
        LayerSpec::LeakyRelu => (3, 0, 0, 0),
    }
}

fn spec_from_code(kind: u8, kernel: u8, bias: u8, out: u32) -> Result<LayerSpec, NnError> {
    Ok(match kind {
        0 => LayerSpec::Conv { kernel: kernel as usize, out_channels: out as usize, bias: bias != 0 },
        1 => LayerSpec::MaxPool,
        2 => LayerSpec::ChannelNorm,
        3 => LayerSpec::LeakyRelu,
        k => return Err(NnError::Format(format!("unknown layer kind {k}"))),
    })
}

pub fn encode_params(net: &Network<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + net.param_count() * 4);
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.input_channels() as u32).to_le_bytes());
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        let (kind, kernel, bias, out) = spec_code(&layer.spec);
        buf.extend_from_slice(&[kind, kernel, bias]);
        buf.extend_from_slice(&out.to_le_bytes());
    }
    buf.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Network<f32>, NnError> {
    if bytes.len() < 4 + 2 + 4 {
        return Err(NnError::Format("file too short".into()));
    }
    if &bytes[..4] != PARAM_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let version = cur.u16()?;
    if version != PARAM_VERSION {
        return Err(NnError::Version { found: version, expected: PARAM_VERSION });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(NnError::Checksum { stored, computed });
    }
    let cur_buf = &bytes[..body_len];
    let mut cur = Cursor { buf: cur_buf, pos: cur.pos };
    let input_channels = cur.u32()? as usize;
    let n_layers = cur.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers.min(4096));
    for _ in 0..n_layers {
        let (kind, kernel, bias) = (cur.u8()?, cur.u8()?, cur.u8()?);
        let out = cur.u32()?;
        specs.push(spec_from_code(kind, kernel, bias, out)?);
    }
    let count = cur.u64()? as usize;
    let mut net = Network::<f32>::zeroed(input_channels, &specs)?;
    if count != net.param_count() {
        return Err(NnError::Format(format!("manifest implies {} params, file holds {count}", net.param_count())));
    }
    let raw = cur.take(count * 4)?;
    for (p, chunk) in net.params_mut().iter_mut().zip(raw.chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    if cur.pos != body_len {
        return Err(NnError::Format(format!("{} trailing bytes", body_len - cur.pos)));
    }
    Ok(net)
}

pub fn save_params(net: &Network<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode_params(net))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Network<f32>, NnError> {
    decode_params(&fs::read(path)?)
}

/// Load a file into an existing architecture, failing on the first layer
/// whose manifest entry differs.
pub fn load_params_into(net: &mut Network<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    let loaded = load_params(path)?;
    check_same_architecture(net, &loaded)?;
    net.params_mut().copy_from_slice(loaded.params());
    Ok(())
}

pub fn check_same_architecture(expected: &Network<f32>, found: &Network<f32>) -> Result<(), NnError> {
    if expected.input_channels() != found.input_channels() {
        return Err(NnError::Shape {
            layer: 0,
            reason: format!("input channels {} != {}", found.input_channels(), expected.input_channels()),
        });
    }
    let (a, b) = (expected.layers(), found.layers());
    for i in 0..a.len().max(b.len()) {
        match (a.get(i), b.get(i)) {
            (Some(x), Some(y)) if x.spec == y.spec && x.in_channels == y.in_channels => {}
            (x, y) => {
                return Err(NnError::Shape {
                    layer: i,
                    reason: format!("expected {:?}, file has {:?}", x.map(|l| l.spec), y.map(|l| l.spec)),
                })
            }
        }
    }
    Ok(())
}

//! Layered container: `SCHM`, version, layer count, then one header and payload per layer.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCHM";
pub const VERSION: u8 = 1;
const LAYER_HEADER: usize = 1 + 2 + 2 + 2 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Base,
    Conditional,
    Residual,
    Standalone,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Base => 0,
            LayerKind::Conditional => 1,
            LayerKind::Residual => 2,
            LayerKind::Standalone => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => LayerKind::Base,
            1 => LayerKind::Conditional,
            2 => LayerKind::Residual,
            3 => LayerKind::Standalone,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Base => "base",
            LayerKind::Conditional => "conditional",
            LayerKind::Residual => "residual",
            LayerKind::Standalone => "standalone",
        }
    }
}

/// One coded latent: its kind, latent dimensions and range-coder payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    pub channels: u16,
    pub height: u16,
    pub width: u16,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitstream {
    pub layers: Vec<Layer>,
}

impl Bitstream {
    pub fn layer(&self, kind: LayerKind) -> Option<&Layer> {
        self.layers.iter().find(|l| l.kind == kind)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.layers.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("{} layers do not fit the header", self.layers.len())));
        }
        let mut out = Vec::with_capacity(6 + self.layers.iter().map(|l| LAYER_HEADER + l.payload.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.layers.len() as u8);
        for l in &self.layers {
            let len = u32::try_from(l.payload.len())
                .map_err(|_| Error::Contract("payload longer than 4 GiB".into()))?;
            out.push(l.kind.code());
            out.extend_from_slice(&l.channels.to_le_bytes());
            out.extend_from_slice(&l.height.to_le_bytes());
            out.extend_from_slice(&l.width.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&l.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing SCHM magic".into()));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Stream(format!("stream ends at byte {} while reading {n} more", bytes.len())))?;
            pos += n;
            Ok(s)
        };
        let version = take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = take(1)?[0];
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let h = take(LAYER_HEADER)?;
            let kind = LayerKind::from_code(h[0])?;
            let u16_at = |i: usize| u16::from_le_bytes([h[i], h[i + 1]]);
            let (channels, height, width) = (u16_at(1), u16_at(3), u16_at(5));
            let len = u32::from_le_bytes([h[7], h[8], h[9], h[10]]) as usize;
            let payload = take(len)?.to_vec();
            layers.push(Layer {
                kind,
                channels,
                height,
                width,
                payload,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last layer", bytes.len() - pos)));
        }
        Ok(Bitstream { layers })
    }
}

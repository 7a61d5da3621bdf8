//! Bitstream container. All integers little-endian.
//!
//! ```text
//! magic "CLIC" | version u8 | flags u8 | quality u8 | reserved u8 (0)
//! orig_h u32 | orig_w u32 | padded_h u32 | padded_w u32
//! arch hash u64 | step f32 | M u16 | N u8
//! coefficients: M·N 4-bit codes, two per byte, high nibble first
//!               (or M·N f32 with the raw-coefficient flag; nothing when N = 0)
//! z: u32 length + bytes
//! group count u8, then u32 length + bytes per group
//! CRC-32 of everything above, u32
//! ```

use super::bytes::{put_block, DResult, Reader};
use crate::error::DecodeError;
use crate::pqf::{dequantize_coefficient, COEFF_LEVELS};
use crate::transform::PAD_MULTIPLE;

pub const MAGIC: [u8; 4] = *b"CLIC";
pub const VERSION: u8 = 1;
pub const FLAG_RAW_COEFFS: u8 = 1;
/// Largest accepted image side.
pub const MAX_DIM: u32 = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    /// Filter disabled (`N = 0`).
    None,
    /// 4-bit codes, channel-major then candidate.
    Codes(Vec<u8>),
    /// Unquantized weights; a diagnostic mode.
    Raw(Vec<f32>),
}

impl Coefficients {
    /// The weights the decoder applies.
    pub fn values(&self) -> Vec<f32> {
        match self {
            Coefficients::None => Vec::new(),
            Coefficients::Codes(c) => c
                .iter()
                .map(|&v| dequantize_coefficient(v) as f32)
                .collect(),
            Coefficients::Raw(a) => a.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Coefficients::None => 0,
            Coefficients::Codes(c) => c.len(),
            Coefficients::Raw(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of the coefficient payload in bits (without the `N` byte).
    pub fn payload_bits(&self) -> usize {
        match self {
            Coefficients::None => 0,
            Coefficients::Codes(c) => c.len() * 4,
            Coefficients::Raw(a) => a.len() * 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub quality: u8,
    pub orig_h: u32,
    pub orig_w: u32,
    pub padded_h: u32,
    pub padded_w: u32,
    pub arch_hash: u64,
    /// Quantization step of the main latent.
    pub step: f32,
    pub latent_channels: u16,
    pub candidates: u8,
    pub coeffs: Coefficients,
    pub z_stream: Vec<u8>,
    pub group_streams: Vec<Vec<u8>>,
}

fn padded(d: u32) -> u32 {
    d.div_ceil(PAD_MULTIPLE as u32) * PAD_MULTIPLE as u32
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let flags = if matches!(self.coeffs, Coefficients::Raw(_)) {
            FLAG_RAW_COEFFS
        } else {
            0
        };
        out.extend_from_slice(&[VERSION, flags, self.quality, 0]);
        for v in [self.orig_h, self.orig_w, self.padded_h, self.padded_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.latent_channels.to_le_bytes());
        out.push(self.candidates);
        match &self.coeffs {
            Coefficients::None => {}
            Coefficients::Codes(codes) => {
                for pair in codes.chunks(2) {
                    let lo = pair.get(1).copied().unwrap_or(0);
                    out.push(pair[0] << 4 | lo);
                }
            }
            Coefficients::Raw(a) => {
                for v in a {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put_block(&mut out, &self.z_stream);
        out.push(self.group_streams.len() as u8);
        for s in &self.group_streams {
            put_block(&mut out, s);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and validates the structure, then checks the CRC.
    pub fn parse(bytes: &[u8]) -> DResult<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(DecodeError::BadMagic { found: magic });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(DecodeError::UnsupportedVersion(version));
        }
        let invalid = |field, offset, reason: String| DecodeError::InvalidField {
            field,
            offset,
            reason,
        };
        let at = r.pos();
        let flags = r.u8()?;
        if flags & !FLAG_RAW_COEFFS != 0 {
            return Err(invalid("flags", at, format!("unknown bits {flags:#04x}")));
        }
        let at = r.pos();
        let quality = r.u8()?;
        if !(1..=6).contains(&quality) {
            return Err(invalid("quality", at, format!("{quality} outside 1..=6")));
        }
        let at = r.pos();
        if r.u8()? != 0 {
            return Err(invalid("reserved", at, "must be zero".into()));
        }
        let mut dims = [0u32; 4];
        for i in 0..4 {
            let at = r.pos();
            let d = r.u32()?;
            dims[i] = d;
            if i < 2 && !(1..=MAX_DIM).contains(&d) {
                return Err(invalid(
                    "image size",
                    at,
                    format!("{d} outside 1..={MAX_DIM}"),
                ));
            }
            if i >= 2 && d != padded(dims[i - 2]) {
                return Err(invalid(
                    "padded size",
                    at,
                    format!("{d} is not {} rounded up to {PAD_MULTIPLE}", dims[i - 2]),
                ));
            }
        }
        let arch_hash = r.u64()?;
        let at = r.pos();
        let step = r.f32()?;
        if !(step.is_finite() && (1.0 / 64.0..=64.0).contains(&step)) {
            return Err(invalid("step", at, format!("{step} outside [1/64, 64]")));
        }
        let at = r.pos();
        let latent_channels = r.u16()?;
        if latent_channels == 0 {
            return Err(invalid("latent channels", at, "zero".into()));
        }
        let at = r.pos();
        let candidates = r.u8()?;
        let raw = flags & FLAG_RAW_COEFFS != 0;
        if candidates == 0 && raw {
            return Err(invalid(
                "flags",
                at,
                "raw coefficients without candidates".into(),
            ));
        }
        let count = latent_channels as usize * candidates as usize;
        let coeffs = if candidates == 0 {
            Coefficients::None
        } else if raw {
            let at = r.pos();
            let block = r.take(count * 4)?;
            let a: Vec<f32> = block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(invalid("coefficients", at, "non-finite value".into()));
            }
            Coefficients::Raw(a)
        } else {
            let at = r.pos();
            let block = r.take(count.div_ceil(2))?;
            let mut codes = Vec::with_capacity(count);
            for &b in block {
                codes.push(b >> 4);
                codes.push(b & 0x0F);
            }
            if codes.len() > count && codes.pop() != Some(0) {
                return Err(invalid(
                    "coefficients",
                    at + block.len() - 1,
                    "nonzero padding nibble".into(),
                ));
            }
            debug_assert!(codes.iter().all(|&c| (c as usize) < COEFF_LEVELS));
            Coefficients::Codes(codes)
        };
        let z_stream = r.block()?.to_vec();
        let groups = r.u8()? as usize;
        let mut group_streams = Vec::with_capacity(groups);
        for _ in 0..groups {
            group_streams.push(r.block()?.to_vec());
        }
        let body_end = r.pos();
        let stored = r.u32()?;
        if r.remaining() != 0 {
            return Err(DecodeError::TrailingData {
                stream: "container",
                extra: r.remaining(),
            });
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(DecodeError::ChecksumMismatch { stored, computed });
        }
        Ok(Container {
            quality,
            orig_h: dims[0],
            orig_w: dims[1],
            padded_h: dims[2],
            padded_w: dims[3],
            arch_hash,
            step,
            latent_channels,
            candidates,
            coeffs,
            z_stream,
            group_streams,
        })
    }

    /// Bytes of the container besides the coded streams and coefficients.
    pub fn overhead_bytes(&self) -> usize {
        self.to_bytes().len()
            - self.z_stream.len()
            - self.group_streams.iter().map(Vec::len).sum::<usize>()
            - self.coeffs.payload_bits().div_ceil(8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(coeffs: Coefficients, n: u8) -> Container {
        Container {
            quality: 3,
            orig_h: 30,
            orig_w: 17,
            padded_h: 32,
            padded_w: 32,
            arch_hash: 0x0123_4567_89ab_cdef,
            step: 1.0,
            latent_channels: 3,
            candidates: n,
            coeffs,
            z_stream: vec![1, 2, 3, 4],
            group_streams: vec![vec![], vec![9; 8]],
        }
    }

    #[test]
    fn odd_code_count_round_trips() {
        let c = sample(Coefficients::Codes(vec![1, 15, 0]), 1);
        let bytes = c.to_bytes();
        assert_eq!(Container::parse(&bytes).unwrap(), c);
    }

    #[test]
    fn bad_padding_nibble() {
        let c = sample(Coefficients::Codes(vec![1, 15, 0]), 1);
        let mut bytes = c.to_bytes();
        // coefficient block starts after the 39-byte fixed header
        bytes[40] |= 1;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Container::parse(&bytes),
            Err(DecodeError::InvalidField {
                field: "coefficients",
                ..
            })
        ));
    }
}

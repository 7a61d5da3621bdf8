//! Integer range coder: 64-bit range, 32-bit little-endian output words,
//! 16-bit frequency totals.
//!
//! The encoder keeps `low` with one carry bit above 64 bits and defers runs
//! of all-ones words until the carry is resolved. Its output is
//! `renormalizations + 2` words. The decoder consumes exactly that many and
//! reports anything else as an error.

use crate::error::{DecodeError, Result};

use super::freq::{FreqTable, FREQ_BITS, FREQ_TOTAL};

const WORD_BITS: u32 = 32;
const RENORM: u64 = 1 << WORD_BITS;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u32,
    pending: usize,
    started: bool,
    words: Vec<u32>,
    symbols: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            cache: 0,
            pending: 0,
            started: false,
            words: Vec::new(),
            symbols: 0,
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u32;
        let low64 = self.low as u64;
        if low64 < 0xFFFF_FFFF_0000_0000 || carry != 0 {
            if self.started {
                self.words.push(self.cache.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.words.push(0xFFFF_FFFFu32.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = (low64 >> WORD_BITS) as u32;
            self.started = true;
        } else {
            self.pending += 1;
        }
        self.low = ((low64 & 0xFFFF_FFFF) as u128) << WORD_BITS;
    }

    /// Encodes the span `[cum, cum + freq)` of a table totalling 2^16.
    pub fn encode_span(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && (cum as u64 + freq as u64) <= 1 << FREQ_BITS);
        let r = self.range >> FREQ_BITS;
        self.low += r as u128 * cum as u128;
        self.range = r * freq as u64;
        while self.range < RENORM {
            self.shift_low();
            self.range <<= WORD_BITS;
        }
        self.symbols += 1;
    }

    /// Encodes `s`, which must lie inside the table.
    pub fn encode(&mut self, table: &FreqTable, s: i32) -> Result<()> {
        let (c, f) = table.span(s).ok_or_else(|| {
            crate::error::ClicError::invalid(format!(
                "symbol {s} outside table [{}, {}]",
                table.min_symbol(),
                table.max_symbol()
            ))
        })?;
        if c as u64 + f as u64 > FREQ_TOTAL as u64 {
            return Err(crate::error::ClicError::invalid(format!(
                "span of symbol {s} exceeds the table total"
            )));
        }
        self.encode_span(c, f);
        Ok(())
    }

    /// Flushes and returns the stream. No symbols gives an empty stream.
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols > 0 {
            for _ in 0..3 {
                self.shift_low();
            }
        }
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    stream: &'static str,
    started: bool,
}

impl<'a> RangeDecoder<'a> {
    /// `stream` names the substream in error messages.
    pub fn new(data: &'a [u8], stream: &'static str) -> std::result::Result<Self, DecodeError> {
        if !data.len().is_multiple_of(4) {
            return Err(DecodeError::CorruptStream {
                stream,
                offset: data.len(),
            });
        }
        Ok(RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
            stream,
            started: false,
        })
    }

    fn word(&mut self) -> std::result::Result<u32, DecodeError> {
        let Some(b) = self.data.get(self.pos..self.pos + 4) else {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: 4,
                available: self.data.len() - self.pos,
            });
        };
        self.pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn corrupt(&self) -> DecodeError {
        DecodeError::CorruptStream {
            stream: self.stream,
            offset: self.pos,
        }
    }

    fn start(&mut self) -> std::result::Result<(), DecodeError> {
        if !self.started {
            let hi = self.word()? as u64;
            let lo = self.word()? as u64;
            self.code = (hi << WORD_BITS) | lo;
            self.started = true;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &FreqTable) -> std::result::Result<i32, DecodeError> {
        self.start()?;
        let r = self.range >> FREQ_BITS;
        let v = self.code / r;
        if v >= 1 << FREQ_BITS {
            return Err(self.corrupt());
        }
        let (s, c, f) = table.lookup(v as u32).ok_or_else(|| self.corrupt())?;
        self.code -= r * c as u64;
        self.range = r * f as u64;
        while self.range < RENORM {
            if self.code >= RENORM {
                return Err(self.corrupt());
            }
            self.code = (self.code << WORD_BITS) | self.word()? as u64;
            self.range <<= WORD_BITS;
        }
        Ok(s)
    }

    /// Checks that the whole stream was consumed.
    pub fn finish(self) -> std::result::Result<(), DecodeError> {
        if self.pos != self.data.len() {
            return Err(DecodeError::TrailingData {
                stream: self.stream,
                extra: self.data.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&FreqTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(crate::error::ClicError::shape(
            "range_encode",
            symbols.len(),
            tables.len(),
        ));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

/// Decodes one symbol per table and requires the stream to end exactly.
pub fn range_decode(
    data: &[u8],
    tables: &[&FreqTable],
) -> std::result::Result<Vec<i32>, DecodeError> {
    let mut dec = RangeDecoder::new(data, "range")?;
    let out = tables
        .iter()
        .map(|t| dec.decode(t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(out)
}

//! Integer frequency tables for the range coder.

use crate::error::{ClicError, Result};

use super::quant::phi;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
/// Symbols never leave `[-SYMBOL_LIMIT, SYMBOL_LIMIT]`.
pub const SYMBOL_LIMIT: i32 = 255;
/// Tables cover the mean ± this many standard deviations.
pub const TAIL_SIGMAS: f64 = 32.0;

/// Frequencies for the consecutive symbols `min ..= max`, summing to
/// [`FREQ_TOTAL`], each at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    min: i32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    /// Validates and builds the cumulative table.
    pub fn new(min: i32, freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.len() > FREQ_TOTAL as usize {
            return Err(ClicError::invalid(format!(
                "table with {} symbols",
                freqs.len()
            )));
        }
        if freqs.contains(&0) {
            return Err(ClicError::invalid("zero frequency in table"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > FREQ_TOTAL as u64 {
                break;
            }
            cum.push(acc as u32);
        }
        if acc != FREQ_TOTAL as u64 {
            return Err(ClicError::invalid(format!(
                "table total {acc} != {FREQ_TOTAL}"
            )));
        }
        Ok(FreqTable { min, freqs, cum })
    }

    /// Builds the table without validation; for fault injection.
    pub fn new_unchecked(min: i32, freqs: Vec<u32>) -> Self {
        let mut cum = vec![0u32];
        let mut acc = 0u32;
        for &f in &freqs {
            acc = acc.wrapping_add(f);
            cum.push(acc);
        }
        FreqTable { min, freqs, cum }
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.freqs.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn contains(&self, s: i32) -> bool {
        s >= self.min && s <= self.max_symbol()
    }

    /// Clamps `s` into the table range.
    pub fn clamp(&self, s: i32) -> i32 {
        s.clamp(self.min, self.max_symbol())
    }

    /// `(cumulative low, frequency)` for symbol `s`.
    pub fn span(&self, s: i32) -> Option<(u32, u32)> {
        if !self.contains(s) {
            return None;
        }
        let i = (s - self.min) as usize;
        Some((self.cum[i], self.freqs[i]))
    }

    /// Symbol whose span contains cumulative value `v < FREQ_TOTAL`.
    pub fn lookup(&self, v: u32) -> Option<(i32, u32, u32)> {
        // first index with cum[i+1] > v
        let i = self.cum[1..].partition_point(|&c| c <= v);
        (i < self.freqs.len()).then(|| (self.min + i as i32, self.cum[i], self.freqs[i]))
    }

    /// `−log2(freq / total)` for symbol `s`.
    pub fn bits(&self, s: i32) -> f64 {
        match self.span(s) {
            Some((_, f)) => FREQ_BITS as f64 - (f as f64).log2(),
            None => f64::INFINITY,
        }
    }
}

/// Symbol range for a Gaussian with fractional mean `mu_frac` and scale
/// `sigma`.
pub fn gaussian_range(mu_frac: f64, sigma: f64) -> (i32, i32) {
    let lo = (mu_frac - TAIL_SIGMAS * sigma)
        .floor()
        .max(-SYMBOL_LIMIT as f64) as i32;
    let hi = (mu_frac + TAIL_SIGMAS * sigma)
        .ceil()
        .min(SYMBOL_LIMIT as f64) as i32;
    (lo.min(0), hi.max(0))
}

/// Discretized Gaussian over the clipped range, renormalized to 16-bit
/// integer frequencies with a floor of 1; the remainder goes to the most
/// probable symbol (lowest index on ties).
pub fn gaussian_freq(mu_frac: f64, sigma: f64) -> Result<FreqTable> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu_frac.is_finite() {
        return Err(ClicError::invalid(format!(
            "gaussian table for μ={mu_frac}, σ={sigma}"
        )));
    }
    let (lo, hi) = gaussian_range(mu_frac, sigma);
    let n = (hi - lo + 1) as usize;
    let p: Vec<f64> = (lo..=hi)
        .map(|k| {
            // lower-tail evaluation on the side away from the mean
            let x = k as f64 - mu_frac;
            let a = x.abs();
            phi((0.5 - a) / sigma) - phi((-0.5 - a) / sigma)
        })
        .collect();
    let total: f64 = p.iter().sum();
    let spare = (FREQ_TOTAL as usize - n) as f64;
    let mut freqs: Vec<u32> = p
        .iter()
        .map(|&q| {
            1 + if total > 0.0 {
                (q / total * spare).floor() as u32
            } else {
                0
            }
        })
        .collect();
    let used: u32 = freqs.iter().sum();
    let mut best = 0;
    for i in 1..n {
        if p[i] > p[best] {
            best = i;
        }
    }
    freqs[best] += FREQ_TOTAL - used;
    FreqTable::new(lo, freqs)
}

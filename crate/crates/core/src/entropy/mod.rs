//! Quantization, probability models and entropy coding.

pub mod context;
pub mod freq;
pub mod quant;
pub mod range_coder;

pub use context::{ContextModel, FactorizedPrior, HyperCoding, LatentBundle, LatentCoding};
pub use freq::{gaussian_freq, FreqTable, FREQ_TOTAL};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};

use serde::{Deserialize, Serialize};

use crate::cluster::GammaMode;
use crate::error::{ClicError, Result};

/// Channel count of the hyper latent `z`.
pub const HYPER_CHANNELS: usize = 192;
/// Lower bound applied to every predicted scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Spatial alignment the encoder pads to (four ×2 stages).
pub const PAD_MULTIPLE: usize = 16;

/// Network shape. Everything that changes the parameter layout lives here,
/// so two models with equal configs can share weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub latent_channels: usize,
    pub hyper_channels: usize,
    /// Width of the hidden layers of the hyper encoder and decoders.
    pub hyper_hidden: usize,
    pub cluster_grid: (usize, usize),
    pub gamma_mode: GammaMode,
    pub mlp_ratio: usize,
    pub sa_kernel: usize,
    pub ca_reduction: usize,
    /// Width of the full-resolution grid right before the final convolution.
    pub recon_channels: usize,
    /// Uneven channel groups of the context model; sums to `latent_channels`.
    pub context_groups: Vec<usize>,
    /// `false` turns the spatial split off: every position is an anchor.
    pub context_checkerboard: bool,
    pub pqf_candidates: usize,
    pub pqf_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stage_channels: [96, 144, 192, 192],
            stage_depths: [1, 2, 4, 2],
            latent_channels: 192,
            hyper_channels: HYPER_CHANNELS,
            hyper_hidden: 192,
            cluster_grid: (2, 2),
            gamma_mode: GammaMode::PerChannel,
            mlp_ratio: 2,
            sa_kernel: 7,
            ca_reduction: 4,
            recon_channels: 24,
            context_groups: vec![16, 16, 32, 64, 64],
            context_checkerboard: true,
            pqf_candidates: 2,
            pqf_hidden: 192,
        }
    }
}

impl ArchConfig {
    /// Small network for desk-scale training and fast tests.
    pub fn toy() -> Self {
        ArchConfig {
            stage_channels: [16, 24, 32, 32],
            stage_depths: [1, 1, 1, 1],
            latent_channels: 32,
            hyper_hidden: 32,
            recon_channels: 12,
            context_groups: vec![4, 4, 8, 8, 8],
            pqf_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClicError::invalid(m));
        if self.hyper_channels != HYPER_CHANNELS {
            return bad(format!(
                "hyper_channels must be {HYPER_CHANNELS}, got {}",
                self.hyper_channels
            ));
        }
        if self
            .stage_channels
            .iter()
            .any(|&c| c == 0 || c % self.ca_reduction != 0)
        {
            return bad(format!(
                "stage widths {:?} must be positive multiples of the channel-attention reduction {}",
                self.stage_channels, self.ca_reduction
            ));
        }
        if self.cluster_grid.0 == 0 || self.cluster_grid.1 == 0 {
            return bad("cluster grid must be at least 1×1".into());
        }
        if self.sa_kernel.is_multiple_of(2) {
            return bad(format!(
                "spatial attention kernel must be odd, got {}",
                self.sa_kernel
            ));
        }
        if self.latent_channels == 0
            || self.hyper_hidden == 0
            || self.recon_channels == 0
            || self.mlp_ratio == 0
        {
            return bad("channel counts must be positive".into());
        }
        if self.context_groups.contains(&0)
            || self.context_groups.iter().sum::<usize>() != self.latent_channels
        {
            return bad(format!(
                "context groups {:?} must be positive and sum to {}",
                self.context_groups, self.latent_channels
            ));
        }
        if self.context_groups.len() > u8::MAX as usize {
            return bad("too many context groups".into());
        }
        if self.pqf_candidates > u8::MAX as usize || self.pqf_hidden == 0 {
            return bad("invalid filtering network size".into());
        }
        Ok(())
    }

    /// Canonical byte encoding used for hashing.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    /// 64-bit FNV-1a over the canonical encoding.
    pub fn hash(&self) -> u64 {
        fnv1a(&self.canonical_bytes())
    }

    /// Number of clusters per mixer.
    pub fn clusters(&self) -> usize {
        self.cluster_grid.0 * self.cluster_grid.1
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ArchConfig::default().validate().unwrap();
        ArchConfig::toy().validate().unwrap();
        let mut c = ArchConfig::toy();
        c.context_groups = vec![4, 4];
        assert!(c.validate().is_err());
        let mut c = ArchConfig::toy();
        c.hyper_channels = 128;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = ArchConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.stage_depths[2] = 2;
        assert_ne!(a.hash(), b.hash());
        // reference vector for the hash itself
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}

//! Parameter counts and analytic multiply–accumulate counts.
//!
//! MACs are counted for every linear, convolution and clustering product
//! at a reference input size, covering the whole encode + decode path.
//! Normalizations, activations and pooling are not counted.

use crate::tensor::{ParamStore, Real};
use crate::transform::{hyper_dims, ArchConfig, PAD_MULTIPLE};

/// Default reference size for [`ModelStats`].
pub const REFERENCE_SIZE: (usize, usize) = (256, 256);

pub fn linear_macs(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (h * w * cin * cout) as u64
}

/// Convolution with `k × k` kernel producing an `h_out × w_out` map.
pub fn conv_macs(cin: usize, cout: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (h_out * w_out * cin * cout * k * k) as u64
}

/// Transposed convolution reading an `h_in × w_in` map.
pub fn conv_transpose_macs(cin: usize, cout: usize, k: usize, h_in: usize, w_in: usize) -> u64 {
    (h_in * w_in * cin * cout * k * k) as u64
}

fn ccb_macs(cfg: &ArchConfig, c: usize, h: usize, w: usize, checkerboard: bool) -> u64 {
    let hw = (h * w) as u64;
    let k = cfg.clusters() as u64;
    let centers = cfg.cluster_grid.0.min(h) * cfg.cluster_grid.1.min(w);
    let mixer = 3 * linear_macs(c, c, h, w)
        + hw * k * c as u64
        + 2 * hw * c as u64
        + 2 * 2 * linear_macs(c, c, centers, 1);
    // the checkerboard variant runs the mixer once per parity
    let mixer = if checkerboard { 2 * mixer } else { mixer };
    let sa = conv_macs(2, 1, cfg.sa_kernel, h, w);
    let mlp = 2 * linear_macs(c, c * cfg.mlp_ratio, h, w);
    let ca = 2 * (c * (c / cfg.ca_reduction)) as u64;
    mixer + sa + mlp + ca
}

fn stage_macs(cfg: &ArchConfig, i: usize, h: usize, w: usize) -> u64 {
    (0..cfg.stage_depths[i])
        .map(|b| ccb_macs(cfg, cfg.stage_channels[i], h, w, b % 2 == 1))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: &'static str,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelStats {
    pub height: usize,
    pub width: usize,
    pub components: Vec<Component>,
}

impl ModelStats {
    pub fn params(&self) -> usize {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.components.iter().map(|c| c.macs).sum()
    }

    pub fn macs_per_pixel(&self) -> f64 {
        self.macs() as f64 / (self.height * self.width) as f64
    }
}

/// Counts for `cfg` at an `height × width` input (rounded up to the padding
/// multiple). Parameter counts come from `store`, grouped by name prefix.
pub fn model_stats<T: Real>(
    cfg: &ArchConfig,
    store: &ParamStore<T>,
    height: usize,
    width: usize,
) -> ModelStats {
    let ph = height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let pw = width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let s = cfg.stage_channels;
    let m = cfg.latent_channels;
    let hh = cfg.hyper_hidden;
    let z = cfg.hyper_channels;
    let (lh, lw) = (ph / PAD_MULTIPLE, pw / PAD_MULTIPLE);

    let mut analysis = 0;
    let mut cin = 5;
    for i in 0..4 {
        let (h, w) = (ph >> i, pw >> i);
        let mid = s[i].div_ceil(4);
        analysis += linear_macs(cin, mid, h, w) + linear_macs(mid, mid, h, w);
        analysis += linear_macs(4 * mid, s[i], h / 2, w / 2);
        analysis += stage_macs(cfg, i, h / 2, w / 2);
        cin = s[i];
    }

    let mut synthesis = linear_macs(2 * m, m, lh, lw) + linear_macs(m, s[3], lh, lw);
    for i in (0..4).rev() {
        let (h, w) = (ph >> (i + 1), pw >> (i + 1));
        synthesis += stage_macs(cfg, i, h, w);
        let next = if i == 0 { cfg.recon_channels } else { s[i - 1] };
        synthesis += linear_macs(s[i], 4 * next, h, w);
    }
    synthesis += conv_macs(cfg.recon_channels, 3, 5, ph, pw);

    let (mh, mw) = (lh.div_ceil(2), lw.div_ceil(2));
    let (zh, zw) = hyper_dims(lh, lw);
    let hyper_enc = conv_macs(m, hh, 3, lh, lw)
        + conv_macs(hh, hh, 5, mh, mw)
        + conv_macs(hh, hh, 3, mh, mw)
        + conv_macs(hh, hh, 5, zh, zw)
        + conv_macs(hh, z, 3, zh, zw);
    let hyper_dec = 3
        * (conv_macs(z, hh, 3, zh, zw)
            + conv_transpose_macs(hh, hh, 5, zh, zw)
            + conv_macs(hh, hh, 3, mh, mw)
            + conv_transpose_macs(hh, hh, 5, mh, mw)
            + conv_macs(hh, m, 3, lh, lw));

    let mut context = 0;
    let mut start = 0;
    for &g in &cfg.context_groups {
        let net = |cin: usize| linear_macs(cin, 2 * g, lh, lw) + linear_macs(2 * g, 2 * g, lh, lw);
        context += net(2 * m + start);
        if cfg.context_checkerboard {
            context += conv_macs(g, 2 * g, 5, lh, lw) + net(2 * m + start + 2 * g);
        }
        start += g;
    }

    let n = cfg.pqf_candidates;
    let pqf = conv_macs(m, cfg.pqf_hidden, 3, lh, lw) + conv_macs(cfg.pqf_hidden, n * m, 3, lh, lw)
        // candidate weighting
        + (n * m * lh * lw) as u64;

    let params_of = |prefixes: &[&str]| -> usize {
        store
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, p)| p.values().len())
            .sum()
    };
    let components = vec![
        Component {
            name: "analysis",
            params: params_of(&["analysis."]),
            macs: analysis,
        },
        Component {
            name: "hyper encoder",
            params: params_of(&["hyper_enc."]),
            macs: hyper_enc,
        },
        Component {
            name: "hyper prior",
            params: params_of(&["hyper_prior."]),
            macs: 0,
        },
        Component {
            name: "hyper decoders",
            params: params_of(&["hyper_dec_"]),
            macs: hyper_dec,
        },
        Component {
            name: "context model",
            params: params_of(&["context."]),
            macs: context,
        },
        Component {
            name: "filter",
            params: params_of(&["pqf."]),
            macs: pqf,
        },
        Component {
            name: "synthesis",
            params: params_of(&["synthesis."]),
            macs: synthesis,
        },
    ];
    ModelStats {
        height: ph,
        width: pw,
        components,
    }
}

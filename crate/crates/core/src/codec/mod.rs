//! Encoder and decoder built on a [`Weights`] file.

use std::time::Instant;

use crate::error::{ClicError, DecodeError, Result};
use crate::pqf::{self, CandidateSet, Ridge, COEFF_RANGE};
use crate::tensor::{FeatureGrid, Graph, ParamStore, Tape};
use crate::transform::{
    crop, hyper_dims, pad_to_multiple, positional_encode, to_grid, PAD_MULTIPLE,
};

mod bytes;
pub mod container;
pub mod image_io;
pub mod synth;
pub mod weights;

pub use container::{Coefficients, Container};
pub use image_io::{psnr, read_image, write_image, RgbImage};
pub use weights::{Weights, WeightsMeta};

/// λ bound to quality presets 1..=6.
pub const QUALITY_LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483];
pub const DEFAULT_QUALITY: u8 = 3;

/// λ of preset `q`.
pub fn quality_lambda(q: u8) -> Result<f64> {
    match q {
        1..=6 => Ok(QUALITY_LAMBDAS[q as usize - 1]),
        _ => Err(ClicError::invalid(format!("quality {q} outside 1..=6"))),
    }
}

/// Latent quantization step that moves weights trained at `trained` to the
/// operating point of preset `q`: `√(λ_trained / λ_q)`.
pub fn quality_step(q: u8, trained: f64) -> Result<f32> {
    let step = (trained / quality_lambda(q)?).sqrt();
    Ok(step.clamp(1.0 / 64.0, 64.0) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub quality: u8,
    /// Signal filter coefficients; off writes `N = 0`.
    pub pqf: bool,
    /// Send unquantized f32 coefficients instead of 4-bit codes.
    pub raw_coeffs: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            quality: DEFAULT_QUALITY,
            pqf: true,
            raw_coeffs: false,
        }
    }
}

/// Latent-domain state shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z_hat: FeatureGrid<f32>,
    pub y_hat: FeatureGrid<f32>,
    pub mu: FeatureGrid<f32>,
    pub sigma: FeatureGrid<f32>,
    /// `ŷ` after filtering.
    pub y_tilde: FeatureGrid<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    pub bytes: usize,
    pub pixels: usize,
    /// File bits per original pixel.
    pub bpp: f64,
    /// Ideal bits of the coded symbols under the integer tables, plus the
    /// coefficient payload, per pixel.
    pub estimated_bpp: f64,
    /// Same under the continuous Gaussian model (main latent only).
    pub model_bpp: f64,
    pub coeff_bits: usize,
    /// Raw coefficients outside the 4-bit quantizer range.
    pub coeff_clamped: usize,
    pub coeff_count: usize,
    /// Symbols clamped into their table range.
    pub saturated: usize,
    pub latent_mse: f64,
    pub filtered_latent_mse: f64,
    pub psnr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub report: EncodeReport,
    /// Unquantized latent.
    pub y: FeatureGrid<f32>,
    pub state: LatentState,
    pub reconstruction: RgbImage,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: RgbImage,
    pub state: LatentState,
    pub container: Container,
}

fn infer<R>(store: &ParamStore<f32>, f: impl FnOnce(&Graph<'_, f32>) -> Result<R>) -> Result<R> {
    let tape = Tape::inference();
    let g = Graph::new(&tape, store);
    f(&g)
}

/// Hyper decoder outputs: mean features, scale features, latent feature.
type HyperFeatures = (FeatureGrid<f32>, FeatureGrid<f32>, FeatureGrid<f32>);

fn hyper_features(
    w: &Weights,
    z_hat: &FeatureGrid<f32>,
    h: usize,
    wd: usize,
) -> Result<HyperFeatures> {
    let m = &w.model;
    infer(&m.store, |g| {
        let z = g.constant(z_hat.to_tensor());
        Ok((
            to_grid(&m.mean_decoder.forward(g, &z, h, wd)?)?,
            to_grid(&m.scale_decoder.forward(g, &z, h, wd)?)?,
            to_grid(&m.latent_decoder.forward(g, &z, h, wd)?)?,
        ))
    })
}

fn synthesize(
    w: &Weights,
    y_tilde: &FeatureGrid<f32>,
    latent: &FeatureGrid<f32>,
    h: usize,
    wd: usize,
) -> Result<RgbImage> {
    let m = &w.model;
    let out = infer(&m.store, |g| {
        to_grid(&m.synthesis.forward(
            g,
            &g.constant(y_tilde.to_tensor()),
            &g.constant(latent.to_tensor()),
        )?)
    })?;
    RgbImage::from_unit_grid(&crop(&out, h, wd))
}

/// Runs the analysis transform on a padded image.
pub fn analyze(w: &Weights, img: &RgbImage) -> Result<FeatureGrid<f32>> {
    let padded = pad_to_multiple(&img.to_grid::<f32>());
    let points = positional_encode(&padded)?;
    let m = &w.model;
    infer(&m.store, |g| {
        to_grid(&m.analysis.forward(g, &g.constant(points.to_tensor()))?)
    })
}

/// Per-channel fit of the quantization error; returns the coefficients to
/// signal and how many raw weights fell outside the quantizer range.
fn fit_coefficients(
    cands: &CandidateSet,
    y: &FeatureGrid<f32>,
    y_hat: &FeatureGrid<f32>,
    raw: bool,
) -> Result<(Coefficients, usize)> {
    let eps = FeatureGrid::from_fn(y.channels, y.height, y.width, |c, i, j| {
        y.at(c, i, j) - y_hat.at(c, i, j)
    });
    let sols = pqf::solve_all(cands, &eps, Ridge::Auto)?;
    let clamped = sols
        .iter()
        .flat_map(|s| &s.a)
        .filter(|a| a.abs() > COEFF_RANGE)
        .count();
    if raw {
        return Ok((
            Coefficients::Raw(
                sols.iter()
                    .flat_map(|s| s.a.iter().map(|&a| a as f32))
                    .collect(),
            ),
            clamped,
        ));
    }
    let mut codes = Vec::with_capacity(sols.len() * cands.n);
    for (i, s) in sols.iter().enumerate() {
        let e: Vec<f64> = eps.channel(i).iter().map(|&v| v as f64).collect();
        codes.extend(pqf::search_codes(&cands.matrix(i), &e, &s.a));
    }
    Ok((Coefficients::Codes(codes), clamped))
}

pub fn encode(w: &Weights, img: &RgbImage, opts: &EncodeOptions) -> Result<Encoded> {
    let start = Instant::now();
    let m = &w.model;
    let cfg = &m.config;
    if img.width > container::MAX_DIM as usize || img.height > container::MAX_DIM as usize {
        return Err(ClicError::invalid(format!(
            "image {}×{} too large",
            img.width, img.height
        )));
    }
    let step = quality_step(opts.quality, w.meta.lambda)?;
    let y = analyze(w, img)?;
    let (_, h, wd) = y.dims();
    let z = infer(&m.store, |g| {
        to_grid(&m.hyper_encoder.forward(g, &g.constant(y.to_tensor()))?)
    })?;
    let hc = m.hyper_prior.encode(&m.store, &z)?;
    let (mean_f, scale_f, latent_f) = hyper_features(w, &hc.z_hat, h, wd)?;
    let lc = m.context.encode(&m.store, &y, &mean_f, &scale_f, step)?;
    let y_hat = lc.bundle.y_hat.clone();

    let use_pqf = opts.pqf && cfg.pqf_candidates > 0;
    let (coeffs, clamped, y_tilde) = if use_pqf {
        let cands = m.pqf.candidates(&m.store, &y_hat)?;
        let (coeffs, clamped) = fit_coefficients(&cands, &y, &y_hat, opts.raw_coeffs)?;
        let y_tilde = pqf::apply(&y_hat, &cands, &coeffs.values())?;
        (coeffs, clamped, y_tilde)
    } else {
        (Coefficients::None, 0, y_hat.clone())
    };

    let c = Container {
        quality: opts.quality,
        orig_h: img.height as u32,
        orig_w: img.width as u32,
        padded_h: (h * PAD_MULTIPLE) as u32,
        padded_w: (wd * PAD_MULTIPLE) as u32,
        arch_hash: cfg.hash(),
        step,
        latent_channels: cfg.latent_channels as u16,
        candidates: if use_pqf { cfg.pqf_candidates as u8 } else { 0 },
        coeffs,
        z_stream: hc.stream,
        group_streams: lc.streams,
    };
    let bytes = c.to_bytes();
    let reconstruction = synthesize(w, &y_tilde, &latent_f, img.height, img.width)?;

    let pixels = img.width * img.height;
    let coeff_bits = c.coeffs.payload_bits();
    let report = EncodeReport {
        bytes: bytes.len(),
        pixels,
        bpp: (bytes.len() * 8) as f64 / pixels as f64,
        estimated_bpp: (lc.table_bits + hc.table_bits + coeff_bits as f64) / pixels as f64,
        model_bpp: lc.model_bits / pixels as f64,
        coeff_bits,
        coeff_clamped: clamped,
        coeff_count: c.coeffs.len(),
        saturated: lc.saturated + hc.saturated,
        latent_mse: y.mse(&y_hat)?,
        filtered_latent_mse: y.mse(&y_tilde)?,
        psnr: psnr(img, &reconstruction)?,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Encoded {
        bytes,
        report,
        y,
        state: LatentState {
            z_hat: hc.z_hat,
            y_hat,
            mu: lc.bundle.mu,
            sigma: lc.bundle.sigma,
            y_tilde,
        },
        reconstruction,
    })
}

/// Parses a container and checks it against the loaded weights.
pub fn parse_for(w: &Weights, bytes: &[u8]) -> Result<Container> {
    let c = Container::parse(bytes)?;
    let cfg = &w.model.config;
    let expected = cfg.hash();
    if c.arch_hash != expected {
        return Err(DecodeError::ConfigMismatch {
            expected,
            found: c.arch_hash,
        }
        .into());
    }
    // header field offsets: M at 36, N at 38
    if c.latent_channels as usize != cfg.latent_channels {
        return Err(DecodeError::InvalidField {
            field: "latent channels",
            offset: 36,
            reason: format!(
                "{} for a model with {}",
                c.latent_channels, cfg.latent_channels
            ),
        }
        .into());
    }
    if c.candidates != 0 && c.candidates as usize != cfg.pqf_candidates {
        return Err(DecodeError::InvalidField {
            field: "candidates",
            offset: 38,
            reason: format!("{} for a model with {}", c.candidates, cfg.pqf_candidates),
        }
        .into());
    }
    Ok(c)
}

pub fn decode(w: &Weights, bytes: &[u8]) -> Result<Decoded> {
    let c = parse_for(w, bytes)?;
    let m = &w.model;
    let h = c.padded_h as usize / PAD_MULTIPLE;
    let wd = c.padded_w as usize / PAD_MULTIPLE;
    let (zh, zw) = hyper_dims(h, wd);
    let z_hat = m.hyper_prior.decode(&m.store, &c.z_stream, zh, zw)?;
    let (mean_f, scale_f, latent_f) = hyper_features(w, &z_hat, h, wd)?;
    let streams: Vec<&[u8]> = c.group_streams.iter().map(Vec::as_slice).collect();
    let bundle = m
        .context
        .decode(&m.store, &streams, &mean_f, &scale_f, c.step, h, wd)?;
    let y_tilde = if c.candidates > 0 {
        let cands = m.pqf.candidates(&m.store, &bundle.y_hat)?;
        pqf::apply(&bundle.y_hat, &cands, &c.coeffs.values())?
    } else {
        bundle.y_hat.clone()
    };
    let image = synthesize(w, &y_tilde, &latent_f, c.orig_h as usize, c.orig_w as usize)?;
    Ok(Decoded {
        image,
        state: LatentState {
            z_hat,
            y_hat: bundle.y_hat,
            mu: bundle.mu,
            sigma: bundle.sigma,
            y_tilde,
        },
        container: c,
    })
}

//! Space-channel context model: latent channels are split into uneven
//! groups coded in order; inside each group the checkerboard anchors are
//! coded first, then the remaining positions with the decoded anchors as
//! extra context.

use rand::Rng;

use super::freq::{gaussian_freq, FreqTable};
use super::quant::{self, round_half_away};
use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::cluster::parity_mask;
use crate::error::{ClicError, DecodeError, Result};
use crate::tensor::layers::{Conv2d, Linear};
use crate::tensor::{FeatureGrid, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::transform::{ArchConfig, SIGMA_MIN};

/// Two 1×1 layers with a GELU, producing `(μ, σ)` for `channels` channels.
#[derive(Debug, Clone)]
pub struct ParamNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ParamNet {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = 2 * channels;
        ParamNet {
            fc1: Linear::new(store, &format!("{name}.fc1"), cin, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 2 * channels, rng),
            channels,
        }
    }

    fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let h = g.gelu(&self.fc1.forward(g, x)?);
        let out = self.fc2.forward(g, &h)?;
        let mu = g.slice_channels(&out, 0, self.channels)?;
        let raw = g.slice_channels(&out, self.channels, self.channels)?;
        let sigma = g.affine(&g.softplus(&raw), T::one(), T::of(SIGMA_MIN));
        Ok((mu, sigma))
    }
}

#[derive(Debug, Clone)]
pub struct GroupStep {
    pub start: usize,
    pub channels: usize,
    pub anchor: ParamNet,
    /// Masked 5×5 convolution over the decoded anchors of this group, and the
    /// net for the remaining positions. Absent when every position is an
    /// anchor.
    pub spatial: Option<(Conv2d, ParamNet)>,
}

#[derive(Debug, Clone)]
pub struct ContextModel {
    pub latent_channels: usize,
    pub steps: Vec<GroupStep>,
}

/// Everything the decoder regenerates for the main latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub y_hat: FeatureGrid<f32>,
    pub mu: FeatureGrid<f32>,
    pub sigma: FeatureGrid<f32>,
}

/// Output of [`ContextModel::encode`].
#[derive(Debug, Clone)]
pub struct LatentCoding {
    pub bundle: LatentBundle,
    pub streams: Vec<Vec<u8>>,
    /// Symbols clamped into their table range.
    pub saturated: usize,
    /// `Σ −log2 p_int` over all coded symbols.
    pub table_bits: f64,
    /// `Σ −log2 p` under the continuous Gaussian model.
    pub model_bits: f64,
}

/// `μ + Δ·k`, shared by encoder and decoder.
pub fn reconstruct(mu: f32, k: i32, delta: f32) -> f32 {
    mu + delta * k as f32
}

/// Table for a symbol relative to the mean, at quantization step `delta`.
pub fn symbol_table(sigma: f32, delta: f32) -> Result<FreqTable> {
    gaussian_freq(0.0, sigma as f64 / delta as f64)
}

fn grid_of<T: Real>(v: &Var<T>) -> Result<FeatureGrid<T>> {
    FeatureGrid::from_tensor(Tensor::clone(v.value()))
}

impl ContextModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let m = cfg.latent_channels;
        let mut steps = Vec::new();
        let mut start = 0;
        for (i, &mg) in cfg.context_groups.iter().enumerate() {
            let cin = 2 * m + start;
            let anchor = ParamNet::new(store, &format!("context.group{i}.anchor"), cin, mg, rng);
            let spatial = cfg.context_checkerboard.then(|| {
                let conv = Conv2d::new(
                    store,
                    &format!("context.group{i}.spatial"),
                    mg,
                    2 * mg,
                    5,
                    1,
                    1.0,
                    rng,
                );
                let net = ParamNet::new(
                    store,
                    &format!("context.group{i}.nonanchor"),
                    cin + 2 * mg,
                    mg,
                    rng,
                );
                (conv, net)
            });
            steps.push(GroupStep {
                start,
                channels: mg,
                anchor,
                spatial,
            });
            start += mg;
        }
        ContextModel {
            latent_channels: m,
            steps,
        }
    }

    pub fn groups(&self) -> usize {
        self.steps.len()
    }

    fn inputs<T: Real>(g: &Graph<'_, T>, hyper: &[&Var<T>; 2], prev: &[Var<T>]) -> Result<Var<T>> {
        let mut parts: Vec<&Var<T>> = hyper.to_vec();
        parts.extend(prev.iter());
        g.concat_channels(&parts)
    }

    /// `(μ, σ)` of the anchors of step `s` (all positions are evaluated).
    pub fn anchor_params<T: Real>(
        &self,
        g: &Graph<'_, T>,
        s: usize,
        inp: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        self.steps[s].anchor.forward(g, inp)
    }

    /// `(μ, σ)` of the non-anchors of step `s` given the group's latent with
    /// non-anchor positions zeroed.
    pub fn nonanchor_params<T: Real>(
        &self,
        g: &Graph<'_, T>,
        s: usize,
        inp: &Var<T>,
        anchors: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let (conv, net) = self.steps[s]
            .spatial
            .as_ref()
            .ok_or_else(|| ClicError::invalid("context model has no spatial step"))?;
        let ctx = conv.forward(g, anchors)?;
        net.forward(g, &g.concat_channels(&[inp, &ctx])?)
    }

    /// Training pass. `y_noisy` is the noisy latent used for the rate and as
    /// context; returns `(bits, μ, σ)` over the full latent.
    pub fn train_forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        y_noisy: &Var<T>,
        mean_feat: &Var<T>,
        scale_feat: &Var<T>,
    ) -> Result<(Var<T>, Var<T>, Var<T>)> {
        let (_, h, w) = y_noisy.dims3()?;
        let anchor_mask = parity_mask(h, w, 0);
        let other_mask = parity_mask(h, w, 1);
        let mut prev = Vec::new();
        let mut mus = Vec::new();
        let mut sigmas = Vec::new();
        let mut bits: Option<Var<T>> = None;
        for (s, step) in self.steps.iter().enumerate() {
            let inp = Self::inputs(g, &[mean_feat, scale_feat], &prev)?;
            let yg = g.slice_channels(y_noisy, step.start, step.channels)?;
            let (mut mu, mut sigma) = self.anchor_params(g, s, &inp)?;
            if step.spatial.is_some() {
                let anchors = g.mask_positions(&yg, &anchor_mask)?;
                let (mun, sn) = self.nonanchor_params(g, s, &inp, &anchors)?;
                mu = g.add(
                    &g.mask_positions(&mu, &anchor_mask)?,
                    &g.mask_positions(&mun, &other_mask)?,
                )?;
                sigma = g.add(
                    &g.mask_positions(&sigma, &anchor_mask)?,
                    &g.mask_positions(&sn, &other_mask)?,
                )?;
            }
            let b = quant::gaussian_bits(g, &g.sub(&yg, &mu)?, &sigma)?;
            bits = Some(match bits {
                Some(acc) => g.add(&acc, &b)?,
                None => b,
            });
            prev.push(yg);
            mus.push(mu);
            sigmas.push(sigma);
        }
        let mu = g.concat_channels(&mus.iter().collect::<Vec<_>>())?;
        let sigma = g.concat_channels(&sigmas.iter().collect::<Vec<_>>())?;
        Ok((bits.expect("at least one group"), mu, sigma))
    }

    /// Quantizes and codes `y`, one substream per group.
    pub fn encode(
        &self,
        store: &ParamStore<f32>,
        y: &FeatureGrid<f32>,
        mean_feat: &FeatureGrid<f32>,
        scale_feat: &FeatureGrid<f32>,
        delta: f32,
    ) -> Result<LatentCoding> {
        if !y.is_finite() {
            return Err(ClicError::invalid("latent contains non-finite values"));
        }
        let mut stats = (0usize, 0.0f64, 0.0f64);
        let mut streams = Vec::new();
        let bundle = self.run(
            store,
            mean_feat,
            scale_feat,
            delta,
            y.height,
            y.width,
            &|_| Ok(Coder::Enc(RangeEncoder::new())),
            &mut |coder, idx, table, mu, sigma| {
                let Coder::Enc(enc) = coder else {
                    unreachable!()
                };
                let v = (y.data()[idx] - mu) / delta;
                let k = round_half_away(v);
                let k = if k.is_finite() { k as i32 } else { 0 };
                let kc = table.clamp(k);
                if kc != k {
                    stats.0 += 1;
                }
                enc.encode(table, kc)?;
                stats.1 += table.bits(kc);
                stats.2 += -quant::gaussian_bin(kc as f64, sigma as f64 / delta as f64)
                    .max(quant::LIKELIHOOD_FLOOR)
                    .log2();
                Ok(kc)
            },
            &mut |coder| {
                let Coder::Enc(enc) = coder else {
                    unreachable!()
                };
                streams.push(std::mem::take(enc).finish());
                Ok(())
            },
        )?;
        Ok(LatentCoding {
            bundle,
            streams,
            saturated: stats.0,
            table_bits: stats.1,
            model_bits: stats.2,
        })
    }

    /// Exact inverse of [`ContextModel::encode`].
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        store: &ParamStore<f32>,
        streams: &[&[u8]],
        mean_feat: &FeatureGrid<f32>,
        scale_feat: &FeatureGrid<f32>,
        delta: f32,
        h: usize,
        w: usize,
    ) -> Result<LatentBundle> {
        if streams.len() != self.groups() {
            return Err(DecodeError::InvalidField {
                field: "group count",
                offset: 0,
                reason: format!("{} streams for {} groups", streams.len(), self.groups()),
            }
            .into());
        }
        self.run(
            store,
            mean_feat,
            scale_feat,
            delta,
            h,
            w,
            &|s| Ok(Coder::Dec(RangeDecoder::new(streams[s], "latent group")?)),
            &mut |coder, _, table, _, _| {
                let Coder::Dec(dec) = coder else {
                    unreachable!()
                };
                Ok(dec.decode(table)?)
            },
            &mut |coder| {
                let Coder::Dec(dec) = coder else {
                    unreachable!()
                };
                dec.clone().finish()?;
                Ok(())
            },
        )
    }

    /// Shared encode/decode schedule. `symbol` codes one element given its
    /// flat index into the latent, its table, and `(μ, σ)`.
    #[allow(clippy::too_many_arguments)]
    fn run<'a>(
        &self,
        store: &ParamStore<f32>,
        mean_feat: &FeatureGrid<f32>,
        scale_feat: &FeatureGrid<f32>,
        delta: f32,
        h: usize,
        w: usize,
        open: &dyn Fn(usize) -> Result<Coder<'a>>,
        symbol: &mut dyn FnMut(&mut Coder<'a>, usize, &FreqTable, f32, f32) -> Result<i32>,
        close: &mut dyn FnMut(&mut Coder<'a>) -> Result<()>,
    ) -> Result<LatentBundle> {
        let m = self.latent_channels;
        if mean_feat.dims() != (m, h, w) || scale_feat.dims() != (m, h, w) {
            return Err(ClicError::shape(
                "context model features",
                format!("{:?}", (m, h, w)),
                format!("{:?}", mean_feat.dims()),
            ));
        }
        if !(delta > 0.0) {
            return Err(ClicError::invalid(format!("quantization step {delta}")));
        }
        let plane = h * w;
        let tape = crate::tensor::Tape::inference();
        let g = Graph::new(&tape, store);
        let mf = g.constant(mean_feat.to_tensor());
        let sf = g.constant(scale_feat.to_tensor());
        let anchor_mask = parity_mask(h, w, 0);
        let mut y_hat = FeatureGrid::<f32>::zeros(m, h, w);
        let mut mu_all = FeatureGrid::<f32>::zeros(m, h, w);
        let mut sigma_all = FeatureGrid::<f32>::zeros(m, h, w);
        let mut prev: Vec<Var<f32>> = Vec::new();
        for (s, step) in self.steps.iter().enumerate() {
            let mut coder = open(s)?;
            let inp = Self::inputs(&g, &[&mf, &sf], &prev)?;
            let mg = step.channels;
            let mut group = FeatureGrid::<f32>::zeros(mg, h, w);
            let passes: Vec<Option<bool>> = if step.spatial.is_some() {
                vec![Some(true), Some(false)]
            } else {
                vec![None]
            };
            for pass in passes {
                let (mu, sigma) = match pass {
                    Some(false) => {
                        let anchors = g.constant(group.to_tensor());
                        self.nonanchor_params(&g, s, &inp, &anchors)?
                    }
                    _ => self.anchor_params(&g, s, &inp)?,
                };
                let (mu, sigma) = (grid_of(&mu)?, grid_of(&sigma)?);
                for c in 0..mg {
                    for p in 0..plane {
                        if let Some(want_anchor) = pass {
                            if anchor_mask[p] != want_anchor {
                                continue;
                            }
                        }
                        let i = c * plane + p;
                        let (mv, sv) = (mu.data()[i], sigma.data()[i]);
                        let table = symbol_table(sv, delta)?;
                        let gi = (step.start + c) * plane + p;
                        let k = symbol(&mut coder, gi, &table, mv, sv)?;
                        let v = reconstruct(mv, k, delta);
                        group.data_mut()[i] = v;
                        y_hat.data_mut()[gi] = v;
                        mu_all.data_mut()[gi] = mv;
                        sigma_all.data_mut()[gi] = sv;
                    }
                }
            }
            close(&mut coder)?;
            prev.push(g.constant(group.into_tensor()));
        }
        Ok(LatentBundle {
            y_hat,
            mu: mu_all,
            sigma: sigma_all,
        })
    }
}

enum Coder<'a> {
    Enc(RangeEncoder),
    Dec(RangeDecoder<'a>),
}

/// Per-channel Gaussian prior for the hyper latent `z`.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    pub mu: ParamId,
    /// `σ_c = σ_min + softplus(raw_c)`.
    pub raw_sigma: ParamId,
    pub channels: usize,
}

/// Output of [`FactorizedPrior::encode`].
#[derive(Debug, Clone)]
pub struct HyperCoding {
    pub z_hat: FeatureGrid<f32>,
    pub stream: Vec<u8>,
    pub saturated: usize,
    pub table_bits: f64,
}

impl FactorizedPrior {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize) -> Self {
        FactorizedPrior {
            mu: store.add_const("hyper_prior.mu", &[channels], 0.0),
            // softplus(0.54) + 0.11 ≈ 1.1
            raw_sigma: store.add_const("hyper_prior.raw_sigma", &[channels], 0.54),
            channels,
        }
    }

    pub fn sigma<T: Real>(&self, g: &Graph<'_, T>) -> Var<T> {
        g.affine(
            &g.softplus(&g.p(self.raw_sigma)),
            T::one(),
            T::of(SIGMA_MIN),
        )
    }

    /// Bits of `z_noisy` under the prior, differentiable in `z` and the prior.
    pub fn train_bits<T: Real>(&self, g: &Graph<'_, T>, z_noisy: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = z_noisy.dims3()?;
        let neg_mu = g.affine(&g.p(self.mu), -T::one(), T::zero());
        let v = g.add_channel_vec(z_noisy, &neg_mu)?;
        let zeros = g.constant(Tensor::zeros(&[c, h, w]));
        let sigma = g.add_channel_vec(&zeros, &self.sigma(g))?;
        quant::gaussian_bits(g, &v, &sigma)
    }

    fn tables(&self, store: &ParamStore<f32>) -> Result<(Vec<f32>, Vec<FreqTable>)> {
        let tape = crate::tensor::Tape::inference();
        let g = Graph::new(&tape, store);
        let sig = self.sigma(&g);
        let mu = store.get(self.mu).values().to_vec();
        let tables = sig
            .data()
            .iter()
            .map(|&s| symbol_table(s, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok((mu, tables))
    }

    pub fn encode(&self, store: &ParamStore<f32>, z: &FeatureGrid<f32>) -> Result<HyperCoding> {
        if z.channels != self.channels {
            return Err(ClicError::shape("hyper prior", self.channels, z.channels));
        }
        if !z.is_finite() {
            return Err(ClicError::invalid(
                "hyper latent contains non-finite values",
            ));
        }
        let (mu, tables) = self.tables(store)?;
        let plane = z.plane();
        let mut enc = RangeEncoder::new();
        let mut z_hat = FeatureGrid::zeros(z.channels, z.height, z.width);
        let (mut saturated, mut bits) = (0, 0.0);
        for c in 0..self.channels {
            for p in 0..plane {
                let i = c * plane + p;
                let k = round_half_away(z.data()[i] - mu[c]) as i32;
                let kc = tables[c].clamp(k);
                saturated += (kc != k) as usize;
                enc.encode(&tables[c], kc)?;
                bits += tables[c].bits(kc);
                z_hat.data_mut()[i] = reconstruct(mu[c], kc, 1.0);
            }
        }
        Ok(HyperCoding {
            z_hat,
            stream: enc.finish(),
            saturated,
            table_bits: bits,
        })
    }

    pub fn decode(
        &self,
        store: &ParamStore<f32>,
        stream: &[u8],
        h: usize,
        w: usize,
    ) -> Result<FeatureGrid<f32>> {
        let (mu, tables) = self.tables(store)?;
        let mut dec = RangeDecoder::new(stream, "hyper latent")?;
        let plane = h * w;
        let mut z_hat = FeatureGrid::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for p in 0..plane {
                let k = dec.decode(&tables[c])?;
                z_hat.data_mut()[c * plane + p] = reconstruct(mu[c], k, 1.0);
            }
        }
        dec.finish()?;
        Ok(z_hat)
    }
}

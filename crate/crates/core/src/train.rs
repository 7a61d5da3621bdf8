//! Rate–distortion training at toy scale.
//!
//! One step accumulates gradients over `batch` random crops and applies
//! Adam. The loss of a crop is
//!
//! ```text
//! L = R + λ·255²·D + λ₁·L_pqf / (H·W)
//! ```
//!
//! with `R` in bits per pixel, `D` the MSE on the `[0, 1]` scale and `L_pqf`
//! the negative energy explained by the filter. The rate and the context
//! model see uniform-noise latents; the decoder path sees soft-rounded ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{RgbImage, Weights, WeightsMeta};
use crate::entropy::quant::{dsq, universal_quantize};
use crate::error::{ClicError, Result};
use crate::model::Model;
use crate::pqf::{apply_coefficients, ls_coefficients, pqf_loss};
use crate::tensor::{FeatureGrid, Graph, ParamStore, Real, Tape, Tensor, Var};
use crate::transform::{positional_encode, ArchConfig, PAD_MULTIPLE};

/// Sharpness of the soft quantizer on the decoder path.
pub const DSQ_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda1: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    /// Crops per optimizer step; gradients are averaged over them.
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    /// Weight of the newest loss in the smoothed curve.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0018,
            lambda1: 1.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 200,
            batch: 8,
            crop: 64,
            seed: 0,
            ema: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lambda) || !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !pos(self.lr)
        {
            return Err(ClicError::invalid(
                "λ and the learning rate must be positive and finite",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !pos(self.adam_eps)
        {
            return Err(ClicError::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.batch == 0 || self.crop < PAD_MULTIPLE || !self.crop.is_multiple_of(PAD_MULTIPLE) {
            return Err(ClicError::invalid(format!(
                "batch must be positive and the crop a positive multiple of {PAD_MULTIPLE}"
            )));
        }
        if !(self.ema > 0.0 && self.ema <= 1.0) {
            return Err(ClicError::invalid("smoothing weight must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    /// Bits per pixel of `y` and `z`.
    pub rate: f64,
    /// MSE on the `[0, 1]` scale.
    pub distortion: f64,
    /// Filter term before normalization (≤ 0).
    pub pqf: f64,
    pub total: f64,
}

impl LossReport {
    fn add_scaled(&mut self, o: &LossReport, s: f64) {
        self.rate += s * o.rate;
        self.distortion += s * o.distortion;
        self.pqf += s * o.pqf;
        self.total += s * o.total;
    }
}

/// Forward pass of the training loss on one crop with values in `[0, 255]`.
pub fn loss<T: Real>(
    model: &Model<T>,
    g: &Graph<'_, T>,
    crop: &FeatureGrid<T>,
    lambda: f64,
    lambda1: f64,
    rng: &mut impl Rng,
) -> Result<(Var<T>, LossReport)> {
    let (c, hh, ww) = crop.dims();
    if c != 3 || hh % PAD_MULTIPLE != 0 || ww % PAD_MULTIPLE != 0 {
        return Err(ClicError::shape(
            "training crop",
            "[3, 16k, 16k]".to_string(),
            format!("{:?}", crop.dims()),
        ));
    }
    let pixels = (hh * ww) as f64;
    let tape = g.tape;
    let points = g.constant(positional_encode(crop)?.into_tensor());
    let y = model.analysis.forward(g, &points)?;
    let (_, h, w) = y.dims3()?;

    let z = model.hyper_encoder.forward(g, &y)?;
    let z_bits = model
        .hyper_prior
        .train_bits(g, &universal_quantize(tape, &z, rng)?)?;
    let z_mu = g.p(model.hyper_prior.mu);
    let neg_mu = g.affine(&z_mu, -T::one(), T::zero());
    let z_soft = g.add_channel_vec(
        &dsq(tape, &g.add_channel_vec(&z, &neg_mu)?, DSQ_SHARPNESS)?,
        &z_mu,
    )?;
    let mean_f = model.mean_decoder.forward(g, &z_soft, h, w)?;
    let scale_f = model.scale_decoder.forward(g, &z_soft, h, w)?;
    let latent_f = model.latent_decoder.forward(g, &z_soft, h, w)?;

    let y_noisy = universal_quantize(tape, &y, rng)?;
    let (y_bits, mu, _) = model
        .context
        .train_forward(g, &y_noisy, &mean_f, &scale_f)?;
    let y_soft = g.add(&dsq(tape, &g.sub(&y, &mu)?, DSQ_SHARPNESS)?, &mu)?;

    let n = model.config.pqf_candidates;
    let (y_tilde, l_pqf) = if n > 0 {
        let cand = model.pqf.forward(g, &y_soft)?;
        let eps = g.sub(&y, &y_soft)?;
        let a = ls_coefficients(tape, &cand, &eps, n)?;
        let y_tilde = apply_coefficients(tape, &y_soft, &cand, &a)?;
        let eps_fixed = g.constant(Tensor::clone(eps.value()));
        (y_tilde, Some(pqf_loss(tape, &cand, &eps_fixed, n)?))
    } else {
        (y_soft, None)
    };

    let x_hat = model.synthesis.forward(g, &y_tilde, &latent_f)?;
    let target = g.constant(crop.to_tensor().map(|v| v / T::of(255.0)));
    let d = g.mse(&x_hat, &target)?;

    let bits = g.add(&y_bits, &z_bits)?;
    let mut total = g.add(
        &g.affine(&bits, T::of(1.0 / pixels), T::zero()),
        &g.affine(&d, T::of(lambda * 255.0 * 255.0), T::zero()),
    )?;
    if let Some(lp) = &l_pqf {
        total = g.add(&total, &g.affine(lp, T::of(lambda1 / pixels), T::zero()))?;
    }
    let report = LossReport {
        rate: bits.item().f64() / pixels,
        distortion: d.item().f64(),
        pqf: l_pqf.as_ref().map_or(0.0, |v| v.item().f64()),
        total: total.item().f64(),
    };
    Ok((total, report))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.values().len()])
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies `grad · scale` from every parameter's buffer.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = T::of(w.f64() - upd);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
    /// Exponential moving average of the total.
    pub smoothed: f64,
    /// Running minimum of `smoothed`.
    pub envelope: f64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub history: Vec<StepRecord>,
    adam: Adam,
    images: Vec<FeatureGrid<f32>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model for `arch`; images must all be at least `crop` on each side.
    pub fn new(arch: ArchConfig, images: &[RgbImage], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(ClicError::invalid("no training images"));
        }
        if let Some(img) = images
            .iter()
            .find(|i| i.width < config.crop || i.height < config.crop)
        {
            return Err(ClicError::invalid(format!(
                "image {}×{} smaller than the {} crop",
                img.width, img.height, config.crop
            )));
        }
        let model = Model::new_random(arch, config.seed)?;
        let adam = Adam::new(
            &model.store,
            config.lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
        );
        Ok(Trainer {
            model,
            history: Vec::new(),
            adam,
            images: images.iter().map(|i| i.to_grid()).collect(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
        })
    }

    fn sample_crop(&mut self) -> FeatureGrid<f32> {
        let s = self.config.crop;
        let img = &self.images[self.rng.gen_range(0..self.images.len())];
        let y0 = self.rng.gen_range(0..=img.height - s);
        let x0 = self.rng.gen_range(0..=img.width - s);
        FeatureGrid::from_fn(3, s, s, |c, y, x| img.at(c, y0 + y, x0 + x))
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters
    /// are left at their last good values and [`ClicError::Diverged`] is
    /// returned.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.history.len();
        let b = self.config.batch;
        self.model.store.zero_grads();
        let mut avg = LossReport::default();
        for _ in 0..b {
            let crop = self.sample_crop();
            let tape = Tape::new();
            let (total, rep) = {
                let g = Graph::new(&tape, &self.model.store);
                loss(
                    &self.model,
                    &g,
                    &crop,
                    self.config.lambda,
                    self.config.lambda1,
                    &mut self.rng,
                )?
            };
            if !rep.total.is_finite() {
                return Err(ClicError::Diverged {
                    step,
                    reason: format!("loss {}", rep.total),
                });
            }
            tape.backward(&total, &mut self.model.store)?;
            avg.add_scaled(&rep, 1.0 / b as f64);
        }
        let finite = self
            .model
            .store
            .iter()
            .all(|(_, p)| p.grad.as_ref().is_none_or(|g| g.is_finite()));
        if !finite {
            self.model.store.zero_grads();
            return Err(ClicError::Diverged {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let backup = self.model.store.clone();
        self.adam.step(&mut self.model.store, 1.0 / b as f64);
        if !self.model.store.iter().all(|(_, p)| p.value.is_finite()) {
            self.model.store = backup;
            return Err(ClicError::Diverged {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        let smoothed = match self.history.last() {
            Some(r) => (1.0 - self.config.ema) * r.smoothed + self.config.ema * avg.total,
            None => avg.total,
        };
        let envelope = self
            .history
            .last()
            .map_or(smoothed, |r| r.envelope.min(smoothed));
        let rec = StepRecord {
            step,
            loss: avg,
            smoothed,
            envelope,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs the configured number of steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        while self.history.len() < self.config.steps {
            let r = self.step()?;
            on_step(&r);
        }
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        Weights {
            meta: WeightsMeta {
                arch: self.model.config.clone(),
                lambda: self.config.lambda,
                steps: self.history.len(),
                seed: self.config.seed,
            },
            model: self.model.clone(),
        }
    }

    /// Loss curve as CSV.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,total,rate_bpp,distortion,pqf,smoothed,envelope\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                r.loss.total,
                r.loss.rate,
                r.loss.distortion,
                r.loss.pqf,
                r.smoothed,
                r.envelope
            ));
        }
        out
    }
}

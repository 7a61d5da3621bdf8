//! Analysis and synthesis networks, and the hyper encoder/decoders.

mod config;

pub use config::{fnv1a, ArchConfig, HYPER_CHANNELS, PAD_MULTIPLE, SIGMA_MIN};

use rand::Rng;

use crate::attention::{ChannelAttnParams, SpatialAttnParams};
use crate::cluster::ClusterParams;
use crate::error::{ClicError, Result};
use crate::tensor::layers::{Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp};
use crate::tensor::{FeatureGrid, Graph, ParamStore, Real, Tensor, Var};

/// Appends normalized `x, y` coordinate channels to an RGB grid with
/// samples in `[0, 255]`; the colors are rescaled to `[0, 1]`.
pub fn positional_encode<T: Real>(image: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(ClicError::shape("positional_encode", 3, c));
    }
    if h < 2 || w < 2 {
        return Err(ClicError::invalid(format!(
            "positional_encode needs at least 2×2, got {h}×{w}"
        )));
    }
    let scale = T::of(1.0 / 255.0);
    let xs = |j: usize| T::of((2.0 * j as f64 - (w - 1) as f64) / (w - 1) as f64);
    let ys = |i: usize| T::of((2.0 * i as f64 - (h - 1) as f64) / (h - 1) as f64);
    Ok(FeatureGrid::from_fn(5, h, w, |ch, i, j| match ch {
        0..=2 => image.at(ch, i, j) * scale,
        3 => xs(j),
        _ => ys(i),
    }))
}

/// Clustering block: a token mixer (clustering + spatial attention) and a
/// channel mixer (MLP + channel attention), each behind a residual.
#[derive(Debug, Clone)]
pub struct Ccb {
    pub norm1: LayerNorm,
    pub mixer: ClusterParams,
    pub sa: SpatialAttnParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub ca: ChannelAttnParams,
    pub checkerboard: bool,
}

impl Ccb {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &ArchConfig,
        checkerboard: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Ccb {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels),
            mixer: ClusterParams::new(
                store,
                &format!("{name}.mixer"),
                channels,
                cfg.cluster_grid,
                cfg.gamma_mode,
                rng,
            ),
            sa: SpatialAttnParams::new(store, &format!("{name}.sa"), cfg.sa_kernel, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                channels,
                channels * cfg.mlp_ratio,
                channels,
                rng,
            ),
            ca: ChannelAttnParams::new(
                store,
                &format!("{name}.ca"),
                channels,
                cfg.ca_reduction,
                rng,
            )?,
            checkerboard,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = self.norm1.forward(g, x)?;
        let t = self.mixer.forward(g, &t, self.checkerboard)?;
        let y = g.add(x, &self.sa.forward(g, &t)?)?;
        let t = self.norm2.forward(g, &y)?;
        let t = self.mlp.forward(g, &t)?;
        g.add(&y, &self.ca.forward(g, &t)?)
    }
}

/// Builds one stage's blocks; the 2nd, 4th, ... use the checkerboard split.
fn stage_blocks<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
    depth: usize,
    cfg: &ArchConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Ccb>> {
    (0..depth)
        .map(|b| {
            Ccb::new(
                store,
                &format!("{name}.block{b}"),
                channels,
                cfg,
                b % 2 == 1,
                rng,
            )
        })
        .collect()
}

/// MLP → unshuffle(2) → layer norm → linear.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub mlp: Mlp,
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl Downsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mid = cout.div_ceil(4);
        Downsample {
            mlp: Mlp::new(store, &format!("{name}.mlp"), cin, mid, mid, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * mid),
            proj: Linear::new(store, &format!("{name}.proj"), 4 * mid, cout, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = self.mlp.forward(g, x)?;
        let t = g.pixel_unshuffle(&t, 2)?;
        let t = self.norm.forward(g, &t)?;
        self.proj.forward(g, &t)
    }
}

/// Linear to four times the output width, then shuffle(2).
#[derive(Debug, Clone)]
pub struct Upsample {
    pub proj: Linear,
}

impl Upsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Upsample {
            proj: Linear::new(store, &format!("{name}.proj"), cin, 4 * cout, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.pixel_shuffle(&self.proj.forward(g, x)?, 2)
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub down: Vec<Downsample>,
    pub stages: Vec<Vec<Ccb>>,
    pub head: Linear,
}

impl Analysis {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut down = Vec::new();
        let mut stages = Vec::new();
        let mut cin = 5;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            down.push(Downsample::new(
                store,
                &format!("analysis.down{i}"),
                cin,
                c,
                rng,
            ));
            stages.push(stage_blocks(
                store,
                &format!("analysis.stage{i}"),
                c,
                cfg.stage_depths[i],
                cfg,
                rng,
            )?);
            cin = c;
        }
        let head = Linear::new(store, "analysis.head", cin, cfg.latent_channels, rng);
        Ok(Analysis { down, stages, head })
    }

    /// `points` is the 5-channel output of [`positional_encode`].
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, points: &Var<T>) -> Result<Var<T>> {
        let (_, h, w) = points.dims3()?;
        if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(ClicError::invalid(format!(
                "analysis input {h}×{w} is not a multiple of {PAD_MULTIPLE}"
            )));
        }
        let mut x = points.clone();
        for (d, blocks) in self.down.iter().zip(&self.stages) {
            x = d.forward(g, &x)?;
            for b in blocks {
                x = b.forward(g, &x)?;
            }
        }
        self.head.forward(g, &x)
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// 1×1 fusion of the filtered latent with the hyper latent feature.
    pub fuse: Linear,
    pub entry: Linear,
    pub stages: Vec<Vec<Ccb>>,
    pub up: Vec<Upsample>,
    pub recon: Conv2d,
}

impl Synthesis {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let m = cfg.latent_channels;
        let s = cfg.stage_channels;
        let fuse = Linear::new(store, "synthesis.fuse", 2 * m, m, rng);
        let entry = Linear::new(store, "synthesis.entry", m, s[3], rng);
        let mut stages = Vec::new();
        let mut up = Vec::new();
        for i in 0..4 {
            stages.push(stage_blocks(
                store,
                &format!("synthesis.stage{i}"),
                s[i],
                cfg.stage_depths[i],
                cfg,
                rng,
            )?);
            let next = if i == 0 { cfg.recon_channels } else { s[i - 1] };
            up.push(Upsample::new(
                store,
                &format!("synthesis.up{i}"),
                s[i],
                next,
                rng,
            ));
        }
        let recon = Conv2d::new(
            store,
            "synthesis.recon",
            cfg.recon_channels,
            3,
            5,
            1,
            1.0,
            rng,
        );
        // start from mid-gray rather than black
        store.get_mut(recon.b).values_mut().fill(T::of(0.5));
        Ok(Synthesis {
            fuse,
            entry,
            stages,
            up,
            recon,
        })
    }

    /// Maps the filtered latent and the hyper latent feature to an RGB grid
    /// in `[0, 1]` scale at 16× the latent resolution.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        y: &Var<T>,
        latent_feature: &Var<T>,
    ) -> Result<Var<T>> {
        let x = g.concat_channels(&[y, latent_feature])?;
        let x = self.fuse.forward(g, &x)?;
        let mut x = self.entry.forward(g, &x)?;
        for i in (0..4).rev() {
            for b in &self.stages[i] {
                x = b.forward(g, &x)?;
            }
            x = self.up[i].forward(g, &x)?;
        }
        self.recon.forward(g, &x)
    }
}

/// Five convolutions, GELU after all but the last, two of them stride 2.
#[derive(Debug, Clone)]
pub struct HyperEncoder {
    pub convs: Vec<Conv2d>,
}

impl HyperEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let (m, hh, z) = (cfg.latent_channels, cfg.hyper_hidden, cfg.hyper_channels);
        let spec = [
            (m, hh, 3, 1),
            (hh, hh, 5, 2),
            (hh, hh, 3, 1),
            (hh, hh, 5, 2),
            (hh, z, 3, 1),
        ];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, s))| {
                Conv2d::new(
                    store,
                    &format!("hyper_enc.conv{i}"),
                    cin,
                    cout,
                    k,
                    s,
                    1.0,
                    rng,
                )
            })
            .collect();
        HyperEncoder { convs }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, y: &Var<T>) -> Result<Var<T>> {
        let mut x = y.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(g, &x)?;
            if i != last {
                x = g.gelu(&x);
            }
        }
        Ok(x)
    }
}

/// What a hyper decoder's output is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperOutput {
    Mean,
    /// Output passes through `σ_min + softplus`.
    Scale,
    Latent,
}

/// Mirror of [`HyperEncoder`] with two stride-2 transposed convolutions.
#[derive(Debug, Clone)]
pub struct HyperDecoder {
    pub kind: HyperOutput,
    pub conv_in: Conv2d,
    pub up1: ConvTranspose2d,
    pub conv_mid: Conv2d,
    pub up2: ConvTranspose2d,
    pub conv_out: Conv2d,
}

impl HyperDecoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: HyperOutput,
        cfg: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (m, hh, z) = (cfg.latent_channels, cfg.hyper_hidden, cfg.hyper_channels);
        HyperDecoder {
            kind,
            conv_in: Conv2d::new(store, &format!("{name}.conv0"), z, hh, 3, 1, 1.0, rng),
            up1: ConvTranspose2d::new(store, &format!("{name}.up1"), hh, hh, 5, 2, 1.0, rng),
            conv_mid: Conv2d::new(store, &format!("{name}.conv2"), hh, hh, 3, 1, 1.0, rng),
            up2: ConvTranspose2d::new(store, &format!("{name}.up3"), hh, hh, 5, 2, 1.0, rng),
            conv_out: Conv2d::new(store, &format!("{name}.conv4"), hh, m, 3, 1, 1.0, rng),
        }
    }

    /// Decodes `z_hat` to a grid of the latent size `h × w`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        z_hat: &Var<T>,
        h: usize,
        w: usize,
    ) -> Result<Var<T>> {
        let (mh, mw) = (h.div_ceil(2), w.div_ceil(2));
        let x = g.gelu(&self.conv_in.forward(g, z_hat)?);
        let x = g.gelu(&self.up1.forward(g, &x, mh, mw)?);
        let x = g.gelu(&self.conv_mid.forward(g, &x)?);
        let x = g.gelu(&self.up2.forward(g, &x, h, w)?);
        let x = self.conv_out.forward(g, &x)?;
        Ok(match self.kind {
            HyperOutput::Scale => g.affine(&g.softplus(&x), T::one(), T::of(SIGMA_MIN)),
            _ => x,
        })
    }
}

/// Size of the hyper latent for a latent of `h × w`.
pub fn hyper_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2))
}

/// Replicate-pads an image grid on the bottom and right to a multiple of
/// [`PAD_MULTIPLE`].
pub fn pad_to_multiple<T: Real>(img: &FeatureGrid<T>) -> FeatureGrid<T> {
    let (c, h, w) = img.dims();
    let ph = h.div_ceil(PAD_MULTIPLE).max(1) * PAD_MULTIPLE;
    let pw = w.div_ceil(PAD_MULTIPLE).max(1) * PAD_MULTIPLE;
    FeatureGrid::from_fn(c, ph, pw, |ch, i, j| img.at(ch, i.min(h - 1), j.min(w - 1)))
}

/// Top-left `h × w` window of a grid.
pub fn crop<T: Real>(img: &FeatureGrid<T>, h: usize, w: usize) -> FeatureGrid<T> {
    FeatureGrid::from_fn(img.channels, h, w, |ch, i, j| img.at(ch, i, j))
}

/// Convenience: runs a grid through a constant tape input.
pub fn constant<T: Real>(g: &Graph<'_, T>, x: &FeatureGrid<T>) -> Var<T> {
    g.constant(x.to_tensor())
}

/// Reads a `[C, H, W]` variable back into a grid.
pub fn to_grid<T: Real>(v: &Var<T>) -> Result<FeatureGrid<T>> {
    FeatureGrid::from_tensor(Tensor::clone(v.value()))
}

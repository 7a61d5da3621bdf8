//! Spatial and channel gating units.

use rand::Rng;

use crate::error::{ClicError, Result};
use crate::tensor::layers::{Conv2d, Linear};
use crate::tensor::{Graph, ParamStore, Real, Var};

pub const SPATIAL_KERNEL: usize = 7;
pub const CHANNEL_REDUCTION: usize = 4;

/// Gate from a k×k conv over the stacked channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttnParams {
    pub conv: Conv2d,
}

impl SpatialAttnParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(ClicError::invalid(format!(
                "spatial attention kernel must be odd, got {k}"
            )));
        }
        Ok(SpatialAttnParams {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, k, 1, 1.0, rng),
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let maps = g.channel_mean_max(x)?;
        let gate = g.sigmoid(&self.conv.forward(g, &maps)?);
        g.scale_positions(x, &gate)
    }
}

/// Squeeze-and-excite style gate: global average, reduce, GELU, expand.
#[derive(Debug, Clone)]
pub struct ChannelAttnParams {
    pub reduce: Linear,
    pub expand: Linear,
}

impl ChannelAttnParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        r: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(ClicError::invalid(format!(
                "channel attention reduction {r} does not divide {channels}"
            )));
        }
        Ok(ChannelAttnParams {
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                channels,
                channels / r,
                rng,
            ),
            expand: Linear::new(
                store,
                &format!("{name}.expand"),
                channels / r,
                channels,
                rng,
            ),
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = g.channel_mean(x)?;
        let h = g.gelu(&self.reduce.forward(g, &pooled)?);
        let gate = g.sigmoid(&self.expand.forward(g, &h)?);
        g.scale_channels(x, &gate)
    }
}

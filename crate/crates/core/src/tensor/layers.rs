//! Parameterized building blocks. Each layer only holds [`ParamId`]s; the
//! values live in a [`ParamStore`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::Result;

/// Dense per-position channel map, weight `[C_out, C_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_scale(store, name, cin, cout, 1.0, rng)
    }

    /// Uniform init with bound `scale/√C_in`; bias starts at zero.
    pub fn with_scale<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale / (cin as f64).sqrt();
        let w = store.add_uniform(format!("{name}.weight"), &[cout, cin], bound, rng);
        let b = store.add_const(format!("{name}.bias"), &[cout], 0.0);
        Linear { w, b, cin, cout }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.linear(x, &g.p(self.w), Some(&g.p(self.b)))
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + self.cout
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), cin, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, cout, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(g, x)?;
        self.fc2.forward(g, &g.gelu(&h))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), &[channels], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[channels], 0.0),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.layer_norm(x, &g.p(self.gain), &g.p(self.bias), LAYER_NORM_EPS)
    }
}

/// Square-kernel convolution, kernel `[C_out, C_in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = scale / ((cin * k * k) as f64).sqrt();
        Conv2d {
            w: store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], bound, rng),
            b: store.add_const(format!("{name}.bias"), &[cout], 0.0),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.conv2d(x, &g.p(self.w), Some(&g.p(self.b)), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

/// Transposed convolution, kernel `[C_in, C_out, k, k]`. The output size is
/// given explicitly at call time.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // each output sees roughly cin·k²/stride² taps
        let fan = (cin * k * k) as f64 / (stride * stride) as f64;
        let bound = scale / fan.sqrt();
        ConvTranspose2d {
            w: store.add_uniform(format!("{name}.weight"), &[cin, cout, k, k], bound, rng),
            b: store.add_const(format!("{name}.bias"), &[cout], 0.0),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var<T>> {
        g.conv_transpose2d(
            x,
            &g.p(self.w),
            Some(&g.p(self.b)),
            self.stride,
            self.pad,
            out_h,
            out_w,
        )
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

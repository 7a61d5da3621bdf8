//! Differentiable operations recorded on a [`Tape`], and eager
//! [`FeatureGrid`] wrappers for the same kernels.

use super::kernels::{self as k, ConvGeom};
use super::{FeatureGrid, ParamTensor, Real, Tape, Tensor, Var};
use crate::error::{ClicError, Result};

fn t3<T: Real>(shape: (usize, usize, usize), data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![shape.0, shape.1, shape.2], data).expect("kernel output matches shape")
}

fn like<T: Real>(v: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(v.shape().to_vec(), data).expect("kernel output matches shape")
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ClicError::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let v = like(a.value(), data);
        Ok(self.record(
            "add",
            &[a, b],
            v,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = like(a.value(), data);
        Ok(self.record(
            "sub",
            &[a, b],
            v,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = like(a.value(), data);
        let (ar, br) = (a.rc(), b.rc());
        Ok(self.record(
            "mul",
            &[a, b],
            v,
            Box::new(move |g, need| {
                let da = need[0].then(|| {
                    like(
                        g,
                        g.data()
                            .iter()
                            .zip(br.data())
                            .map(|(&d, &y)| d * y)
                            .collect(),
                    )
                });
                let db = need[1].then(|| {
                    like(
                        g,
                        g.data()
                            .iter()
                            .zip(ar.data())
                            .map(|(&d, &x)| d * x)
                            .collect(),
                    )
                });
                vec![da, db]
            }),
        ))
    }

    /// `s·x + t` with constant scalars.
    pub fn affine(&self, x: &Var<T>, s: T, t: T) -> Var<T> {
        let v = x.value().map(|e| s * e + t);
        self.record(
            "affine",
            &[x],
            v,
            Box::new(move |g, _| vec![Some(g.map(|d| d * s))]),
        )
    }

    /// `x · s` for a one-element var `s`.
    pub fn scale_scalar(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value().numel() != 1 {
            return Err(ClicError::shape(
                "scale_scalar",
                "one-element scale",
                format!("{:?}", s.shape()),
            ));
        }
        let sv = s.item();
        let v = x.value().map(|e| e * sv);
        let xr = x.rc();
        let sshape = s.shape().to_vec();
        Ok(self.record(
            "scale_scalar",
            &[x, s],
            v,
            Box::new(move |g, _| {
                let mut acc = T::zero();
                for (&d, &e) in g.data().iter().zip(xr.data()) {
                    acc += d * e;
                }
                vec![
                    Some(g.map(|d| d * sv)),
                    Some(Tensor::new(sshape.clone(), vec![acc]).unwrap()),
                ]
            }),
        ))
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let v = x.value().map(k::gelu);
        let xr = x.rc();
        self.record(
            "gelu",
            &[x],
            v,
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(xr.data())
                    .map(|(&d, &x)| d * k::gelu_grad(x))
                    .collect();
                vec![Some(like(g, d))]
            }),
        )
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let v = x.value().map(k::sigmoid);
        let out = v.clone();
        self.record(
            "sigmoid",
            &[x],
            v,
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                vec![Some(like(g, d))]
            }),
        )
    }

    pub fn softplus(&self, x: &Var<T>) -> Var<T> {
        let v = x.value().map(k::softplus);
        let xr = x.rc();
        self.record(
            "softplus",
            &[x],
            v,
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(xr.data())
                    .map(|(&d, &x)| d * k::sigmoid(x))
                    .collect();
                vec![Some(like(g, d))]
            }),
        )
    }

    /// Per-position affine map over channels. `w` is `[C_out, C_in]`, `b` is `[C_out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (cin, h, wd) = x.dims3()?;
        let (cout, wcin) = match *w.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(ClicError::shape(
                    "linear",
                    "weight [C_out, C_in]",
                    format!("{:?}", w.shape()),
                ))
            }
        };
        if wcin != cin {
            return Err(ClicError::shape(
                "linear",
                format!("input with {wcin} channels (weight {:?})", w.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        if let Some(b) = b {
            if b.value().numel() != cout {
                return Err(ClicError::shape(
                    "linear",
                    format!("bias [{cout}]"),
                    format!("{:?}", b.shape()),
                ));
            }
        }
        let plane = h * wd;
        let y = k::linear_fwd(x.data(), cin, plane, w.data(), cout, b.map(|b| b.data()));
        let (xr, wr) = (x.rc(), w.rc());
        let wshape = w.shape().to_vec();
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let dx = need[0].then(|| {
                t3(
                    (cin, h, wd),
                    k::linear_bwd_input(g.data(), cout, plane, wr.data(), cin),
                )
            });
            let mut out = vec![dx];
            if need[1] || need.get(2).copied().unwrap_or(false) {
                let (dw, db) = k::linear_bwd_params(g.data(), cout, plane, xr.data(), cin);
                out.push(Some(Tensor::new(wshape.clone(), dw).unwrap()));
                if need.len() > 2 {
                    out.push(Some(Tensor::new(vec![cout], db).unwrap()));
                }
            } else {
                out.push(None);
                if need.len() > 2 {
                    out.push(None);
                }
            }
            out
        });
        let v = t3((cout, h, wd), y);
        Ok(match b {
            Some(b) => self.record("linear", &[x, w, b], v, backward),
            None => self.record("linear", &[x, w], v, backward),
        })
    }

    /// Normalizes each position over channels, then applies `gain`/`bias`.
    pub fn layer_norm(&self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if gain.value().numel() != c || bias.value().numel() != c {
            return Err(ClicError::shape(
                "layer_norm",
                format!("gain/bias of length {c}"),
                format!("{:?}/{:?}", gain.shape(), bias.shape()),
            ));
        }
        let plane = h * w;
        let (xhat, inv_std) = k::layer_norm_stats(x.data(), c, plane, T::of(eps));
        let mut y = vec![T::zero(); c * plane];
        for ch in 0..c {
            let (gv, bv) = (gain.data()[ch], bias.data()[ch]);
            for p in 0..plane {
                y[ch * plane + p] = gv * xhat[ch * plane + p] + bv;
            }
        }
        let gr = gain.rc();
        let (gshape, bshape) = (gain.shape().to_vec(), bias.shape().to_vec());
        Ok(self.record(
            "layer_norm",
            &[x, gain, bias],
            t3((c, h, w), y),
            Box::new(move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dxhat = vec![T::zero(); c * plane];
                    for ch in 0..c {
                        let gv = gr.data()[ch];
                        for p in 0..plane {
                            dxhat[ch * plane + p] = gd[ch * plane + p] * gv;
                        }
                    }
                    t3(
                        (c, h, w),
                        k::layer_norm_bwd(&dxhat, &xhat, &inv_std, c, plane),
                    )
                });
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for ch in 0..c {
                    for p in 0..plane {
                        let i = ch * plane + p;
                        dgain[ch] += gd[i] * xhat[i];
                        dbias[ch] += gd[i];
                    }
                }
                vec![
                    dx,
                    Some(Tensor::new(gshape.clone(), dgain).unwrap()),
                    Some(Tensor::new(bshape.clone(), dbias).unwrap()),
                ]
            }),
        ))
    }

    /// Cross-correlation with zero padding. `kernel` is `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let (cin, ih, iw) = x.dims3()?;
        let (cout, kc, kk) = match *kernel.shape() {
            [o, i, a, b] if a == b => (o, i, a),
            _ => {
                return Err(ClicError::shape(
                    "conv2d",
                    "kernel [C_out, C_in, k, k]",
                    format!("{:?}", kernel.shape()),
                ))
            }
        };
        if kc != cin {
            return Err(ClicError::shape(
                "conv2d",
                format!("{kc} input channels"),
                cin,
            ));
        }
        let (oh, ow) = match (ConvGeom::out_dim(ih, kk, stride, pad), ConvGeom::out_dim(iw, kk, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(ClicError::invalid(format!(
                    "conv2d output would be empty for input {ih}x{iw}, k={kk}, stride={stride}, padding={pad}"
                )))
            }
        };
        let geom = ConvGeom {
            cin,
            cout,
            in_h: ih,
            in_w: iw,
            k: kk,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let y = k::conv2d_fwd(x.data(), kernel.data(), bias.map(|b| b.data()), &geom);
        let (xr, kr) = (x.rc(), kernel.rc());
        let kshape = kernel.shape().to_vec();
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let mut out = vec![
                need[0].then(|| {
                    t3(
                        (cin, ih, iw),
                        k::conv2d_bwd_input(g.data(), kr.data(), &geom),
                    )
                }),
                need[1].then(|| {
                    Tensor::new(
                        kshape.clone(),
                        k::conv2d_bwd_kernel(g.data(), xr.data(), &geom),
                    )
                    .unwrap()
                }),
            ];
            if need.len() > 2 {
                out.push(Some(
                    Tensor::new(vec![cout], k::channel_sums(g.data(), cout, oh * ow)).unwrap(),
                ));
            }
            out
        });
        let v = t3((cout, oh, ow), y);
        Ok(match bias {
            Some(b) => self.record("conv2d", &[x, kernel, b], v, backward),
            None => self.record("conv2d", &[x, kernel], v, backward),
        })
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] whose input is
    /// `out_h×out_w`. `kernel` is `[C_in, C_out, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &self,
        x: &Var<T>,
        kernel: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var<T>> {
        let (cin, ih, iw) = x.dims3()?;
        let (kc, cout, kk) = match *kernel.shape() {
            [i, o, a, b] if a == b => (i, o, a),
            _ => {
                return Err(ClicError::shape(
                    "conv_transpose2d",
                    "kernel [C_in, C_out, k, k]",
                    format!("{:?}", kernel.shape()),
                ))
            }
        };
        if kc != cin {
            return Err(ClicError::shape(
                "conv_transpose2d",
                format!("{kc} input channels"),
                cin,
            ));
        }
        if ConvGeom::out_dim(out_h, kk, stride, pad) != Some(ih)
            || ConvGeom::out_dim(out_w, kk, stride, pad) != Some(iw)
        {
            return Err(ClicError::invalid(format!(
                "conv_transpose2d: output {out_h}x{out_w} is not consistent with input {ih}x{iw} (k={kk}, stride={stride}, padding={pad})"
            )));
        }
        // geometry of the forward convolution this op is the adjoint of
        let geom = ConvGeom {
            cin: cout,
            cout: cin,
            in_h: out_h,
            in_w: out_w,
            k: kk,
            stride,
            pad,
            out_h: ih,
            out_w: iw,
        };
        let mut y = k::conv2d_bwd_input(x.data(), kernel.data(), &geom);
        if let Some(b) = bias {
            let plane = out_h * out_w;
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut y[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
        let (xr, kr) = (x.rc(), kernel.rc());
        let kshape = kernel.shape().to_vec();
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let mut out = vec![
                need[0].then(|| {
                    t3(
                        (cin, ih, iw),
                        k::conv2d_fwd(g.data(), kr.data(), None, &geom),
                    )
                }),
                need[1].then(|| {
                    Tensor::new(
                        kshape.clone(),
                        k::conv2d_bwd_kernel(xr.data(), g.data(), &geom),
                    )
                    .unwrap()
                }),
            ];
            if need.len() > 2 {
                out.push(Some(
                    Tensor::new(vec![cout], k::channel_sums(g.data(), cout, out_h * out_w))
                        .unwrap(),
                ));
            }
            out
        });
        let v = t3((cout, out_h, out_w), y);
        Ok(match bias {
            Some(b) => self.record("conv_transpose2d", &[x, kernel, b], v, backward),
            None => self.record("conv_transpose2d", &[x, kernel], v, backward),
        })
    }

    /// `(C, H, W) → (C·r², H/r, W/r)`.
    pub fn pixel_unshuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(ClicError::invalid(format!(
                "pixel_unshuffle: {h}x{w} not divisible by {r}"
            )));
        }
        let idx = k::unshuffle_index(c, h, w, r);
        let xd = x.data();
        let y = idx.iter().map(|&i| xd[i]).collect();
        Ok(self.record(
            "pixel_unshuffle",
            &[x],
            t3((c * r * r, h / r, w / r), y),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); c * h * w];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] = g.data()[o];
                }
                vec![Some(t3((c, h, w), dx))]
            }),
        ))
    }

    /// `(C·r², H, W) → (C, H·r, W·r)`; inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let (cr, h, w) = x.dims3()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(ClicError::invalid(format!(
                "pixel_shuffle: {cr} channels not divisible by {}",
                r * r
            )));
        }
        let c = cr / (r * r);
        let idx = k::unshuffle_index(c, h * r, w * r, r);
        let mut y = vec![T::zero(); cr * h * w];
        for (o, &i) in idx.iter().enumerate() {
            y[i] = x.data()[o];
        }
        Ok(self.record(
            "pixel_shuffle",
            &[x],
            t3((c, h * r, w * r), y),
            Box::new(move |g, _| {
                let d = idx.iter().map(|&i| g.data()[i]).collect();
                vec![Some(t3((cr, h, w), d))]
            }),
        ))
    }

    /// Adaptive average pooling to `out_h × out_w`.
    pub fn avg_pool_to(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(ClicError::invalid(
                "avg_pool_to: output dims must be non-zero",
            ));
        }
        if out_h > h || out_w > w {
            return Err(ClicError::invalid(format!(
                "avg_pool_to: {out_h}x{out_w} exceeds input {h}x{w}"
            )));
        }
        let (by, bx) = (k::pool_bins(h, out_h), k::pool_bins(w, out_w));
        let xd = x.data();
        let mut y = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += xd[(ch * h + yy) * w + xx];
                        }
                    }
                    y[(ch * out_h + oy) * out_w + ox] = s / T::of(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.record(
            "avg_pool_to",
            &[x],
            t3((c, out_h, out_w), y),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for (oy, &(y0, y1)) in by.iter().enumerate() {
                        for (ox, &(x0, x1)) in bx.iter().enumerate() {
                            let d = g.data()[(ch * out_h + oy) * out_w + ox]
                                / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(ch * h + yy) * w + xx] += d;
                                }
                            }
                        }
                    }
                }
                vec![Some(t3((c, h, w), dx))]
            }),
        ))
    }

    /// Per-channel mean over all positions, as a `C×1×1` grid.
    pub fn channel_mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        let n = T::of(plane as f64);
        let y = k::channel_sums(x.data(), c, plane)
            .into_iter()
            .map(|s| s / n)
            .collect();
        Ok(self.record(
            "channel_mean",
            &[x],
            t3((c, 1, 1), y),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); c * plane];
                for ch in 0..c {
                    dx[ch * plane..(ch + 1) * plane].fill(g.data()[ch] / n);
                }
                vec![Some(t3((c, h, w), dx))]
            }),
        ))
    }

    /// `x[c][p] + v[c]`: adds a per-channel vector at every position.
    pub fn add_channel_vec(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if v.value().numel() != c {
            return Err(ClicError::shape("add_channel_vec", c, v.value().numel()));
        }
        let plane = h * w;
        let mut y = x.data().to_vec();
        for ch in 0..c {
            let b = v.data()[ch];
            for e in &mut y[ch * plane..(ch + 1) * plane] {
                *e += b;
            }
        }
        let vshape = v.shape().to_vec();
        Ok(self.record(
            "add_channel_vec",
            &[x, v],
            t3((c, h, w), y),
            Box::new(move |g, _| {
                let dv = k::channel_sums(g.data(), c, plane);
                vec![
                    Some(g.clone()),
                    Some(Tensor::new(vshape.clone(), dv).unwrap()),
                ]
            }),
        ))
    }

    /// `x[c][p] · s[c]`: scales each channel (gate broadcast over positions).
    pub fn scale_channels(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if s.value().numel() != c {
            return Err(ClicError::shape("scale_channels", c, s.value().numel()));
        }
        let plane = h * w;
        let mut y = x.data().to_vec();
        for ch in 0..c {
            let sv = s.data()[ch];
            for e in &mut y[ch * plane..(ch + 1) * plane] {
                *e *= sv;
            }
        }
        let (xr, sr) = (x.rc(), s.rc());
        let sshape = s.shape().to_vec();
        Ok(self.record(
            "scale_channels",
            &[x, s],
            t3((c, h, w), y),
            Box::new(move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dx = gd.to_vec();
                    for ch in 0..c {
                        let sv = sr.data()[ch];
                        for e in &mut dx[ch * plane..(ch + 1) * plane] {
                            *e *= sv;
                        }
                    }
                    t3((c, h, w), dx)
                });
                let ds = need[1].then(|| {
                    let d = (0..c)
                        .map(|ch| {
                            let mut acc = T::zero();
                            for p in 0..plane {
                                acc += gd[ch * plane + p] * xr.data()[ch * plane + p];
                            }
                            acc
                        })
                        .collect();
                    Tensor::new(sshape.clone(), d).unwrap()
                });
                vec![dx, ds]
            }),
        ))
    }

    /// `x[c][p] · s[p]`: scales each position (gate broadcast over channels).
    pub fn scale_positions(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        if s.value().numel() != plane {
            return Err(ClicError::shape(
                "scale_positions",
                plane,
                s.value().numel(),
            ));
        }
        let mut y = x.data().to_vec();
        for ch in 0..c {
            for (e, &sv) in y[ch * plane..(ch + 1) * plane].iter_mut().zip(s.data()) {
                *e *= sv;
            }
        }
        let (xr, sr) = (x.rc(), s.rc());
        let sshape = s.shape().to_vec();
        Ok(self.record(
            "scale_positions",
            &[x, s],
            t3((c, h, w), y),
            Box::new(move |g, need| {
                let gd = g.data();
                let dx = need[0].then(|| {
                    let mut dx = gd.to_vec();
                    for ch in 0..c {
                        for (e, &sv) in dx[ch * plane..(ch + 1) * plane].iter_mut().zip(sr.data()) {
                            *e *= sv;
                        }
                    }
                    t3((c, h, w), dx)
                });
                let ds = need[1].then(|| {
                    let mut d = vec![T::zero(); plane];
                    for ch in 0..c {
                        for p in 0..plane {
                            d[p] += gd[ch * plane + p] * xr.data()[ch * plane + p];
                        }
                    }
                    Tensor::new(sshape.clone(), d).unwrap()
                });
                vec![dx, ds]
            }),
        ))
    }

    /// Channel-mean and channel-max maps stacked as a `2×H×W` grid. The max
    /// gradient goes to the first maximal channel.
    pub fn channel_mean_max(&self, x: &Var<T>) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        let xd = x.data();
        let mut y = vec![T::zero(); 2 * plane];
        let mut arg = vec![0usize; plane];
        for p in 0..plane {
            let mut s = T::zero();
            let mut best = xd[p];
            for ch in 0..c {
                let v = xd[ch * plane + p];
                s += v;
                if v > best {
                    best = v;
                    arg[p] = ch;
                }
            }
            y[p] = s / T::of(c as f64);
            y[plane + p] = best;
        }
        Ok(self.record(
            "channel_mean_max",
            &[x],
            t3((2, h, w), y),
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); c * plane];
                let inv = T::one() / T::of(c as f64);
                for p in 0..plane {
                    for ch in 0..c {
                        dx[ch * plane + p] = gd[p] * inv;
                    }
                    dx[arg[p] * plane + p] += gd[plane + p];
                }
                vec![Some(t3((c, h, w), dx))]
            }),
        ))
    }

    /// Stacks grids with equal spatial dims along the channel axis.
    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| ClicError::invalid("concat_channels: no inputs"))?
            .dims3()?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut y = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(ClicError::shape(
                    "concat_channels",
                    format!("{h}x{w}"),
                    format!("{ph}x{pw}"),
                ));
            }
            sizes.push(c);
            y.extend_from_slice(p.data());
        }
        let total: usize = sizes.iter().sum();
        Ok(self.record(
            "concat_channels",
            parts,
            t3((total, h, w), y),
            Box::new(move |g, _| {
                let plane = h * w;
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&c| {
                        let part = g.data()[off * plane..(off + c) * plane].to_vec();
                        off += c;
                        Some(t3((c, h, w), part))
                    })
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start+len)`.
    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        if start + len > c {
            return Err(ClicError::invalid(format!(
                "slice_channels: {start}+{len} exceeds {c}"
            )));
        }
        let plane = h * w;
        let y = x.data()[start * plane..(start + len) * plane].to_vec();
        Ok(self.record(
            "slice_channels",
            &[x],
            t3((len, h, w), y),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); c * plane];
                dx[start * plane..(start + len) * plane].copy_from_slice(g.data());
                vec![Some(t3((c, h, w), dx))]
            }),
        ))
    }

    /// Zeroes every position whose mask entry is `false`.
    pub fn mask_positions(&self, x: &Var<T>, mask: &[bool]) -> Result<Var<T>> {
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        if mask.len() != plane {
            return Err(ClicError::shape("mask_positions", plane, mask.len()));
        }
        let apply = move |d: &[T], mask: &[bool]| -> Vec<T> {
            let mut out = d.to_vec();
            for ch in 0..c {
                for (e, &m) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(mask) {
                    if !m {
                        *e = T::zero();
                    }
                }
            }
            out
        };
        let y = apply(x.data(), mask);
        let mask = mask.to_vec();
        Ok(self.record(
            "mask_positions",
            &[x],
            t3((c, h, w), y),
            Box::new(move |g, _| vec![Some(t3((c, h, w), apply(g.data(), &mask)))]),
        ))
    }

    /// Sum of all elements.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let mut s = T::zero();
        for &v in x.data() {
            s += v;
        }
        let shape = x.shape().to_vec();
        self.record(
            "sum",
            &[x],
            Tensor::scalar(s),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    /// Mean of squared differences.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mse", a, b)?;
        let n = T::of(a.value().numel().max(1) as f64);
        let diff: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let mut s = T::zero();
        for &d in &diff {
            s += d * d;
        }
        let shape = a.shape().to_vec();
        Ok(self.record(
            "mse",
            &[a, b],
            Tensor::scalar(s / n),
            Box::new(move |g, _| {
                let scale = T::of(2.0) * g.data()[0] / n;
                let da: Vec<T> = diff.iter().map(|&d| d * scale).collect();
                let db = da.iter().map(|&d| -d).collect();
                vec![
                    Some(Tensor::new(shape.clone(), da).unwrap()),
                    Some(Tensor::new(shape.clone(), db).unwrap()),
                ]
            }),
        ))
    }
}

// Eager wrappers over the same kernels.

fn eager<T: Real>(f: impl FnOnce(&Tape<T>) -> Result<Var<T>>) -> Result<FeatureGrid<T>> {
    let tape = Tape::inference();
    let v = f(&tape)?;
    FeatureGrid::from_tensor(v.value().clone())
}

/// Per-position affine map over channels.
pub fn linear<T: Real>(
    x: &FeatureGrid<T>,
    w: &ParamTensor<T>,
    b: &ParamTensor<T>,
) -> Result<FeatureGrid<T>> {
    eager(|t| {
        let xv = t.constant(x.to_tensor());
        t.linear(
            &xv,
            &t.constant(w.value.clone()),
            Some(&t.constant(b.value.clone())),
        )
    })
}

pub fn layer_norm<T: Real>(
    x: &FeatureGrid<T>,
    gain: &ParamTensor<T>,
    bias: &ParamTensor<T>,
    eps: f64,
) -> Result<FeatureGrid<T>> {
    eager(|t| {
        t.layer_norm(
            &t.constant(x.to_tensor()),
            &t.constant(gain.value.clone()),
            &t.constant(bias.value.clone()),
            eps,
        )
    })
}

pub fn conv2d<T: Real>(
    x: &FeatureGrid<T>,
    kernel: &ParamTensor<T>,
    stride: usize,
    padding: usize,
) -> Result<FeatureGrid<T>> {
    eager(|t| {
        t.conv2d(
            &t.constant(x.to_tensor()),
            &t.constant(kernel.value.clone()),
            None,
            stride,
            padding,
        )
    })
}

/// Transposed convolution; `kernel` uses the `[C_in, C_out, k, k]` layout.
pub fn conv_transpose2d<T: Real>(
    x: &FeatureGrid<T>,
    kernel: &ParamTensor<T>,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureGrid<T>> {
    eager(|t| {
        t.conv_transpose2d(
            &t.constant(x.to_tensor()),
            &t.constant(kernel.value.clone()),
            None,
            stride,
            padding,
            out_h,
            out_w,
        )
    })
}

pub fn pixel_unshuffle<T: Real>(x: &FeatureGrid<T>, r: usize) -> Result<FeatureGrid<T>> {
    eager(|t| t.pixel_unshuffle(&t.constant(x.to_tensor()), r))
}

pub fn pixel_shuffle<T: Real>(x: &FeatureGrid<T>, r: usize) -> Result<FeatureGrid<T>> {
    eager(|t| t.pixel_shuffle(&t.constant(x.to_tensor()), r))
}

pub fn avg_pool_to<T: Real>(
    x: &FeatureGrid<T>,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureGrid<T>> {
    eager(|t| t.avg_pool_to(&t.constant(x.to_tensor()), out_h, out_w))
}

pub fn gelu<T: Real>(x: &FeatureGrid<T>) -> FeatureGrid<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = k::gelu(*v));
    y
}

//! Contextual-clustering token mixer.
//!
//! Points are grouped around a small grid of pooled centers by cosine
//! similarity, each cluster aggregates its members into one feature, and the
//! feature is dispatched back to the members. Cluster labels are discrete and
//! carry no gradient; gradients flow through the similarities, the values and
//! the value centers.

use rand::Rng;

use crate::error::{ClicError, Result};
use crate::tensor::layers::{Linear, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Norms below this are treated as zero and give similarity 0.
pub const ZERO_NORM: f64 = 1e-12;

/// How the global-context scale is shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GammaMode {
    PerChannel,
    Scalar,
}

#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub channels: usize,
    pub gamma: ParamId,
    pub gamma_mode: GammaMode,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub point_transform: Linear,
    pub value_transform: Linear,
    pub offset_mlp: Mlp,
    pub value_offset_mlp: Mlp,
    pub dispatch_linear: Linear,
    pub grid: (usize, usize),
}

impl ClusterParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        grid: (usize, usize),
        gamma_mode: GammaMode,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma_len = match gamma_mode {
            GammaMode::PerChannel => channels,
            GammaMode::Scalar => 1,
        };
        let c = channels;
        ClusterParams {
            channels,
            gamma: store.add_const(format!("{name}.gamma"), &[gamma_len], 0.1),
            gamma_mode,
            alpha: store.add_const(format!("{name}.alpha"), &[1], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[1], 0.0),
            point_transform: Linear::new(store, &format!("{name}.point"), c, c, rng),
            value_transform: Linear::new(store, &format!("{name}.value"), c, c, rng),
            offset_mlp: Mlp::new(store, &format!("{name}.center_offset"), c, c, c, rng),
            value_offset_mlp: Mlp::new(store, &format!("{name}.value_offset"), c, c, c, rng),
            dispatch_linear: Linear::new(store, &format!("{name}.dispatch"), c, c, rng),
            grid,
        }
    }

    pub fn clusters(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Runs the mixer. In checkerboard mode the grid is split by `(row+col)`
    /// parity; each half sees the other half as zeros.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        checkerboard: bool,
    ) -> Result<Var<T>> {
        if !checkerboard {
            return Ok(self.forward_masked(g, x, None)?.0);
        }
        let (_, h, w) = x.dims3()?;
        let even = parity_mask(h, w, 0);
        let odd = parity_mask(h, w, 1);
        let xe = g.mask_positions(x, &even)?;
        let xo = g.mask_positions(x, &odd)?;
        let ye = self.forward_masked(g, &xe, Some(&even))?.0;
        let yo = self.forward_masked(g, &xo, Some(&odd))?.0;
        g.add(
            &g.mask_positions(&ye, &even)?,
            &g.mask_positions(&yo, &odd)?,
        )
    }

    /// Runs the mixer with only `active` positions taking part in clustering.
    /// Inactive positions are left at their global-context-shifted input.
    pub fn forward_masked<T: Real>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        active: Option<&[bool]>,
    ) -> Result<(Var<T>, ClusterAssignment)> {
        let (c, h, w) = x.dims3()?;
        if c != self.channels {
            return Err(ClicError::shape("cluster_mix", self.channels, c));
        }
        let xs = add_global_context(g, x, &g.p(self.gamma))?;
        let mut points = self.point_transform.forward(g, &xs)?;
        let mut values = self.value_transform.forward(g, &xs)?;
        if let Some(m) = active {
            points = g.mask_positions(&points, m)?;
            values = g.mask_positions(&values, m)?;
        }
        let grid = (self.grid.0.min(h), self.grid.1.min(w));
        let centers = compute_centers(g, &points, &self.offset_mlp, grid)?;
        let value_centers = compute_centers(g, &values, &self.value_offset_mlp, grid)?;
        let assignment = assign(points.value(), centers.value(), active)?;
        let s = assigned_similarity(g, &points, &centers, &assignment)?;
        let f = aggregate(
            g,
            &values,
            &value_centers,
            &s,
            &assignment,
            &g.p(self.alpha),
            &g.p(self.beta),
        )?;
        let out = dispatch(g, &xs, &f, &s, &assignment, &self.dispatch_linear)?;
        Ok((out, assignment))
    }
}

/// Positions whose `(row + col) % 2 == parity`.
pub fn parity_mask(h: usize, w: usize, parity: usize) -> Vec<bool> {
    (0..h * w).map(|p| (p / w + p % w) % 2 == parity).collect()
}

/// `P_i + γ ⊙ mean_j P_j`. `gamma` is either per-channel or a single scalar.
pub fn add_global_context<T: Real>(tape: &Tape<T>, x: &Var<T>, gamma: &Var<T>) -> Result<Var<T>> {
    let (c, _, _) = x.dims3()?;
    let mean = tape.channel_mean(x)?;
    let shift = if gamma.value().numel() == 1 && c != 1 {
        tape.scale_scalar(&mean, gamma)?
    } else {
        if gamma.value().numel() != c {
            return Err(ClicError::shape(
                "add_global_context",
                c,
                gamma.value().numel(),
            ));
        }
        tape.scale_channels(&mean, gamma)?
    };
    tape.add_channel_vec(x, &shift)
}

/// Average-pools `x` onto `grid` and adds the offset predicted by `mlp`.
/// The result has shape `[C, rows, cols]`; center `k` is at flat index
/// `k = row · cols + col`.
pub fn compute_centers<T: Real>(
    g: &Graph<'_, T>,
    x: &Var<T>,
    mlp: &Mlp,
    grid: (usize, usize),
) -> Result<Var<T>> {
    let pooled = g.avg_pool_to(x, grid.0, grid.1)?;
    let offset = mlp.forward(g, &pooled)?;
    g.add(&pooled, &offset)
}

/// Result of the hard assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster index per position; `None` for positions outside the mask.
    pub label: Vec<Option<usize>>,
    /// Cosine similarity to the assigned center (0 for inactive positions).
    pub similarity: Vec<f64>,
    pub member_count: Vec<usize>,
}

impl ClusterAssignment {
    pub fn clusters(&self) -> usize {
        self.member_count.len()
    }

    pub fn active(&self) -> Vec<bool> {
        self.label.iter().map(Option::is_some).collect()
    }
}

fn norm<T: Real>(v: impl Iterator<Item = T>) -> f64 {
    v.map(|a| a.f64() * a.f64()).sum::<f64>().sqrt()
}

/// Cosine similarity with the zero-norm rule.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let na = norm(a.iter().copied());
    let nb = norm(b.iter().copied());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn column<T: Real>(t: &Tensor<T>, k: usize, stride: usize, c: usize) -> Vec<T> {
    (0..c).map(|ch| t.data()[ch * stride + k]).collect()
}

/// Labels every active position with its most similar center (ties go to the
/// lowest index). `points` is `[C, H, W]`, `centers` is `[C, rows, cols]`.
pub fn assign<T: Real>(
    points: &Tensor<T>,
    centers: &Tensor<T>,
    active: Option<&[bool]>,
) -> Result<ClusterAssignment> {
    let (c, h, w) = points.dims3()?;
    let (cc, gr, gc) = centers.dims3()?;
    if cc != c {
        return Err(ClicError::shape("assign", c, cc));
    }
    let n = h * w;
    let k = gr * gc;
    if k == 0 {
        return Err(ClicError::invalid("assign needs at least one center"));
    }
    if let Some(m) = active {
        if m.len() != n {
            return Err(ClicError::shape("assign mask", n, m.len()));
        }
    }
    let cols: Vec<Vec<T>> = (0..k).map(|j| column(centers, j, k, c)).collect();
    let mut label = vec![None; n];
    let mut similarity = vec![0.0; n];
    let mut member_count = vec![0; k];
    let mut p = vec![T::zero(); c];
    for i in 0..n {
        if active.is_some_and(|m| !m[i]) {
            continue;
        }
        for (ch, e) in p.iter_mut().enumerate() {
            *e = points.data()[ch * n + i];
        }
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, cj) in cols.iter().enumerate() {
            let s = cosine(&p, cj);
            if s > best_s {
                best = j;
                best_s = s;
            }
        }
        label[i] = Some(best);
        similarity[i] = best_s;
        member_count[best] += 1;
    }
    Ok(ClusterAssignment {
        label,
        similarity,
        member_count,
    })
}

/// Differentiable cosine similarity of each active point to its assigned
/// center, as a `[1, H, W]` map (0 at inactive positions).
pub fn assigned_similarity<T: Real>(
    tape: &Tape<T>,
    points: &Var<T>,
    centers: &Var<T>,
    a: &ClusterAssignment,
) -> Result<Var<T>> {
    let (c, h, w) = points.dims3()?;
    let (_, gr, gc) = centers.dims3()?;
    let n = h * w;
    let k = gr * gc;
    if a.label.len() != n {
        return Err(ClicError::shape("assigned_similarity", n, a.label.len()));
    }
    // per position: (label, |p|, |c|, s); None when the zero-norm rule applies
    let pv = points.value().clone();
    let cv = centers.value().clone();
    let mut info: Vec<Option<(usize, f64, f64, f64)>> = vec![None; n];
    let mut s = vec![T::zero(); n];
    let cnorm: Vec<f64> = (0..k)
        .map(|j| norm((0..c).map(|ch| cv.data()[ch * k + j])))
        .collect();
    for i in 0..n {
        let Some(l) = a.label[i] else { continue };
        let np = norm((0..c).map(|ch| pv.data()[ch * n + i]));
        if np < ZERO_NORM || cnorm[l] < ZERO_NORM {
            continue;
        }
        let dot: f64 = (0..c)
            .map(|ch| pv.data()[ch * n + i].f64() * cv.data()[ch * k + l].f64())
            .sum();
        let si = dot / (np * cnorm[l]);
        s[i] = T::of(si);
        info[i] = Some((l, np, cnorm[l], si));
    }
    let cshape = centers.shape().to_vec();
    Ok(tape.record(
        "assigned_similarity",
        &[points, centers],
        Tensor::new(vec![1, h, w], s)?,
        Box::new(move |g, need| {
            let mut dp = vec![T::zero(); c * n];
            let mut dc = vec![T::zero(); c * k];
            for i in 0..n {
                let Some((l, np, nc, si)) = info[i] else {
                    continue;
                };
                let gi = g.data()[i].f64();
                if gi == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let pc = pv.data()[ch * n + i].f64();
                    let cc = cv.data()[ch * k + l].f64();
                    // ∂s/∂p = c/(|p||c|) − s·p/|p|², symmetric for c
                    dp[ch * n + i] += T::of(gi * (cc / (np * nc) - si * pc / (np * np)));
                    dc[ch * k + l] += T::of(gi * (pc / (np * nc) - si * cc / (nc * nc)));
                }
            }
            vec![
                need[0].then(|| Tensor::new(vec![c, h, w], dp).unwrap()),
                need[1].then(|| Tensor::new(cshape.clone(), dc).unwrap()),
            ]
        }),
    ))
}

fn scalar_arg<T: Real>(op: &'static str, v: &Var<T>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(ClicError::shape(op, 1, v.value().numel()));
    }
    Ok(v.data()[0].f64())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-cluster feature `F_k = (c_v,k + Σ_{i∈k} σ(α s_i + β) v_i) / (1 + m_k)`.
/// Output has the shape of `value_centers`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate<T: Real>(
    tape: &Tape<T>,
    values: &Var<T>,
    value_centers: &Var<T>,
    s: &Var<T>,
    a: &ClusterAssignment,
    alpha: &Var<T>,
    beta: &Var<T>,
) -> Result<Var<T>> {
    let (c, h, w) = values.dims3()?;
    let (cc, gr, gc) = value_centers.dims3()?;
    let n = h * w;
    let k = gr * gc;
    if cc != c {
        return Err(ClicError::shape("aggregate", c, cc));
    }
    if a.label.len() != n || s.value().numel() != n || a.clusters() != k {
        return Err(ClicError::shape(
            "aggregate",
            format!("{n} positions, {k} clusters"),
            format!("{} labels, {} clusters", a.label.len(), a.clusters()),
        ));
    }
    let al = scalar_arg("aggregate alpha", alpha)?;
    let be = scalar_arg("aggregate beta", beta)?;
    let vv = values.value().clone();
    let sv: Vec<f64> = s.data().iter().map(|x| x.f64()).collect();
    let mut f: Vec<f64> = value_centers.data().iter().map(|x| x.f64()).collect();
    for i in 0..n {
        let Some(l) = a.label[i] else { continue };
        let wgt = sigmoid(al * sv[i] + be);
        for ch in 0..c {
            f[ch * k + l] += wgt * vv.data()[ch * n + i].f64();
        }
    }
    let denom: Vec<f64> = a.member_count.iter().map(|&m| 1.0 + m as f64).collect();
    for ch in 0..c {
        for l in 0..k {
            f[ch * k + l] /= denom[l];
        }
    }
    let labels = a.label.clone();
    let cshape = value_centers.shape().to_vec();
    let out = Tensor::new(cshape.clone(), f.into_iter().map(T::of).collect())?;
    Ok(tape.record(
        "aggregate",
        &[values, value_centers, s, alpha, beta],
        out,
        Box::new(move |g, need| {
            let gd: Vec<f64> = g.data().iter().map(|x| x.f64()).collect();
            let mut dv = vec![T::zero(); c * n];
            let mut ds = vec![T::zero(); n];
            let mut dalpha = 0.0;
            let mut dbeta = 0.0;
            let dcv: Vec<T> = (0..c * k).map(|e| T::of(gd[e] / denom[e % k])).collect();
            for i in 0..n {
                let Some(l) = labels[i] else { continue };
                let z = al * sv[i] + be;
                let wgt = sigmoid(z);
                let mut gdotv = 0.0;
                for ch in 0..c {
                    let gf = gd[ch * k + l] / denom[l];
                    dv[ch * n + i] = T::of(gf * wgt);
                    gdotv += gf * vv.data()[ch * n + i].f64();
                }
                let dz = gdotv * wgt * (1.0 - wgt);
                ds[i] = T::of(dz * al);
                dalpha += dz * sv[i];
                dbeta += dz;
            }
            vec![
                need[0].then(|| Tensor::new(vec![c, h, w], dv).unwrap()),
                need[1].then(|| Tensor::new(cshape.clone(), dcv).unwrap()),
                need[2].then(|| Tensor::new(vec![1, h, w], ds).unwrap()),
                need[3].then(|| Tensor::new(vec![1], vec![T::of(dalpha)]).unwrap()),
                need[4].then(|| Tensor::new(vec![1], vec![T::of(dbeta)]).unwrap()),
            ]
        }),
    ))
}

/// `s_i · F_label(i)` laid out on the point grid; zero where inactive.
pub fn gather_scaled<T: Real>(
    tape: &Tape<T>,
    f: &Var<T>,
    s: &Var<T>,
    a: &ClusterAssignment,
    h: usize,
    w: usize,
) -> Result<Var<T>> {
    let (c, gr, gc) = f.dims3()?;
    let n = h * w;
    let k = gr * gc;
    if a.label.len() != n || s.value().numel() != n {
        return Err(ClicError::shape("gather_scaled", n, a.label.len()));
    }
    let fv = f.value().clone();
    let sv = s.value().clone();
    let mut out = vec![T::zero(); c * n];
    for i in 0..n {
        let Some(l) = a.label[i] else { continue };
        for ch in 0..c {
            out[ch * n + i] = sv.data()[i] * fv.data()[ch * k + l];
        }
    }
    let labels = a.label.clone();
    let fshape = f.shape().to_vec();
    Ok(tape.record(
        "gather_scaled",
        &[f, s],
        Tensor::new(vec![c, h, w], out)?,
        Box::new(move |g, need| {
            let gd = g.data();
            let mut df = vec![T::zero(); c * k];
            let mut ds = vec![T::zero(); n];
            for i in 0..n {
                let Some(l) = labels[i] else { continue };
                for ch in 0..c {
                    df[ch * k + l] += sv.data()[i] * gd[ch * n + i];
                    ds[i] += fv.data()[ch * k + l] * gd[ch * n + i];
                }
            }
            vec![
                need[0].then(|| Tensor::new(fshape.clone(), df).unwrap()),
                need[1].then(|| Tensor::new(vec![1, h, w], ds).unwrap()),
            ]
        }),
    ))
}

/// `P_i + Linear(s_i · F_label(i))` at active positions; inactive positions
/// pass through unchanged.
pub fn dispatch<T: Real>(
    g: &Graph<'_, T>,
    points: &Var<T>,
    f: &Var<T>,
    s: &Var<T>,
    a: &ClusterAssignment,
    linear: &Linear,
) -> Result<Var<T>> {
    let (_, h, w) = points.dims3()?;
    let gathered = gather_scaled(g, f, s, a, h, w)?;
    let update = linear.forward(g, &gathered)?;
    let update = g.mask_positions(&update, &a.active())?;
    g.add(points, &update)
}

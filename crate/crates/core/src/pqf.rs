//! Latent-domain post-quantization filter.
//!
//! A small network proposes `N` candidate maps per latent channel. The
//! encoder fits the quantization error `ε = y − ŷ` of each channel as a
//! linear combination of its candidates, sends the 4-bit quantized weights,
//! and both sides add the weighted candidates back onto `ŷ`.

use rand::Rng;

use crate::error::{ClicError, Result};
use crate::tensor::layers::Conv2d;
use crate::tensor::{FeatureGrid, Graph, ParamStore, Real, Tape, Tensor, Var};

pub const DEFAULT_CANDIDATES: usize = 2;
pub const COEFF_BITS: usize = 4;
pub const COEFF_LEVELS: usize = 1 << COEFF_BITS;
pub const COEFF_RANGE: f64 = 2.0;
/// Relative ridge: `δ = RIDGE_SCALE · tr(CᵀC) / N`.
pub const RIDGE_SCALE: f64 = 1e-6;

const STEP: f64 = 2.0 * COEFF_RANGE / COEFF_LEVELS as f64;

/// Candidate generator: 3×3 conv, GELU, 3×3 conv to `N·M` channels.
#[derive(Debug, Clone)]
pub struct PqfNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub candidates: usize,
    pub channels: usize,
}

impl PqfNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: usize,
        hidden: usize,
        candidates: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PqfNet {
            conv1: Conv2d::new(store, "pqf.conv1", channels, hidden, 3, 1, 1.0, rng),
            // small output so the filter starts close to the identity
            conv2: Conv2d::new(
                store,
                "pqf.conv2",
                hidden,
                candidates * channels,
                3,
                1,
                0.1,
                rng,
            ),
            candidates,
            channels,
        }
    }

    /// Candidate maps, channel `i·N + j` holding candidate `j` of channel `i`.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, y_hat: &Var<T>) -> Result<Var<T>> {
        let h = g.gelu(&self.conv1.forward(g, y_hat)?);
        self.conv2.forward(g, &h)
    }

    pub fn candidates(
        &self,
        store: &ParamStore<f32>,
        y_hat: &FeatureGrid<f32>,
    ) -> Result<CandidateSet> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, store);
        let c = self.forward(&g, &g.constant(y_hat.to_tensor()))?;
        CandidateSet::new(
            FeatureGrid::from_tensor(Tensor::clone(c.value()))?,
            self.candidates,
        )
    }
}

/// `N` candidate maps for each of `M` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub maps: FeatureGrid<f32>,
    pub n: usize,
}

impl CandidateSet {
    pub fn new(maps: FeatureGrid<f32>, n: usize) -> Result<Self> {
        if n == 0 || !maps.channels.is_multiple_of(n) {
            return Err(ClicError::shape(
                "candidate set",
                format!("multiple of {n} channels"),
                maps.channels,
            ));
        }
        Ok(CandidateSet { maps, n })
    }

    pub fn channels(&self) -> usize {
        self.maps.channels / self.n
    }

    /// Candidate `j` of channel `i`.
    pub fn map(&self, i: usize, j: usize) -> &[f32] {
        self.maps.channel(i * self.n + j)
    }

    /// Column-major `P × N` matrix of channel `i` at 64-bit.
    pub fn matrix(&self, i: usize) -> Vec<f64> {
        (0..self.n)
            .flat_map(|j| self.map(i, j).iter().map(|&v| v as f64))
            .collect()
    }
}

/// How the normal equations are regularized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `δ = 1e-6 · tr(CᵀC) / N`.
    Auto,
    /// A fixed `δ`; zero asks for the plain least-squares solution.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub a: Vec<f64>,
    pub ridge: f64,
    /// Set when the requested system was singular and the automatic ridge
    /// was used instead.
    pub fallback: bool,
}

/// `CᵀC` (N×N, row-major) and `Cᵀε` for a column-major `P × N` matrix.
fn normal_equations(c: &[f64], eps: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let p = eps.len();
    let mut ata = vec![0.0; n * n];
    let mut atb = vec![0.0; n];
    for j in 0..n {
        let cj = &c[j * p..(j + 1) * p];
        atb[j] = cj.iter().zip(eps).map(|(a, b)| a * b).sum();
        for k in 0..=j {
            let ck = &c[k * p..(k + 1) * p];
            let v: f64 = cj.iter().zip(ck).map(|(a, b)| a * b).sum();
            ata[j * n + k] = v;
            ata[k * n + j] = v;
        }
    }
    (ata, atb)
}

fn auto_ridge(ata: &[f64], n: usize) -> f64 {
    let tr: f64 = (0..n).map(|i| ata[i * n + i]).sum();
    RIDGE_SCALE * tr / n as f64
}

/// Cholesky factor of a symmetric matrix, or `None` if it is not safely
/// positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 1e-12 * scale) || scale == 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn with_ridge(ata: &[f64], n: usize, d: f64) -> Vec<f64> {
    let mut a = ata.to_vec();
    for i in 0..n {
        a[i * n + i] += d;
    }
    a
}

/// Least-squares weights for one channel: `(CᵀC + δI)⁻¹ Cᵀε` with `C`
/// column-major `P × N`. A singular system falls back to the automatic
/// ridge; an all-zero `C` gives zero weights.
pub fn solve_coefficients(c: &[f64], eps: &[f64], ridge: Ridge) -> Result<LsSolution> {
    let p = eps.len();
    if p == 0 || !c.len().is_multiple_of(p) || c.is_empty() {
        return Err(ClicError::shape(
            "solve_coefficients",
            format!("P×N with P={p}"),
            c.len(),
        ));
    }
    let n = c.len() / p;
    let (ata, atb) = normal_equations(c, eps, n);
    let requested = match ridge {
        Ridge::Auto => auto_ridge(&ata, n),
        Ridge::Fixed(d) if d >= 0.0 => d,
        Ridge::Fixed(d) => return Err(ClicError::invalid(format!("negative ridge {d}"))),
    };
    if let Some(l) = cholesky(&with_ridge(&ata, n, requested), n) {
        return Ok(LsSolution {
            a: cholesky_solve(&l, &atb, n),
            ridge: requested,
            fallback: false,
        });
    }
    let d = auto_ridge(&ata, n).max(requested);
    match cholesky(&with_ridge(&ata, n, d), n) {
        Some(l) => Ok(LsSolution {
            a: cholesky_solve(&l, &atb, n),
            ridge: d,
            fallback: true,
        }),
        // C = 0: nothing to fit
        None => Ok(LsSolution {
            a: vec![0.0; n],
            ridge: d,
            fallback: true,
        }),
    }
}

/// Nearest of the 16 levels over `[−2, 2]`, ties to the lower level.
pub fn quantize_coefficient(a: f64) -> u8 {
    let t = (a + COEFF_RANGE - STEP / 2.0) / STEP;
    if t.is_nan() {
        return (COEFF_LEVELS / 2 - 1) as u8;
    }
    (t - 0.5).ceil().clamp(0.0, (COEFF_LEVELS - 1) as f64) as u8
}

pub fn dequantize_coefficient(code: u8) -> f64 {
    -COEFF_RANGE + (code as f64 + 0.5) * STEP
}

pub fn quantize_coefficients(a: &[f64]) -> Vec<u8> {
    a.iter().map(|&v| quantize_coefficient(v)).collect()
}

pub fn dequantize(codes: &[u8]) -> Vec<f64> {
    codes.iter().map(|&c| dequantize_coefficient(c)).collect()
}

/// `‖ε − C a‖²` for one channel (column-major `C`).
pub fn residual_energy(c: &[f64], eps: &[f64], a: &[f64]) -> f64 {
    let p = eps.len();
    (0..p)
        .map(|k| {
            let fit: f64 = a.iter().enumerate().map(|(j, aj)| aj * c[j * p + k]).sum();
            (eps[k] - fit).powi(2)
        })
        .sum()
}

/// Codes minimizing the quantized residual of one channel by trying every
/// combination (`16^N`); falls back to per-weight rounding for `N > 3`.
pub fn search_codes(c: &[f64], eps: &[f64], a_raw: &[f64]) -> Vec<u8> {
    let n = a_raw.len();
    if n > 3 {
        return quantize_coefficients(a_raw);
    }
    let (ata, atb) = normal_equations(c, eps, n);
    let e0: f64 = eps.iter().map(|v| v * v).sum();
    // ‖ε − Ca‖² = ‖ε‖² − 2aᵀCᵀε + aᵀCᵀCa
    let energy = |a: &[f64]| {
        let mut e = e0;
        for j in 0..n {
            e -= 2.0 * a[j] * atb[j];
            for k in 0..n {
                e += a[j] * ata[j * n + k] * a[k];
            }
        }
        e
    };
    let mut best = quantize_coefficients(a_raw);
    let mut best_e = energy(&dequantize(&best));
    let mut codes = vec![0u8; n];
    let total = COEFF_LEVELS.pow(n as u32);
    for idx in 0..total {
        let mut r = idx;
        for c in codes.iter_mut() {
            *c = (r % COEFF_LEVELS) as u8;
            r /= COEFF_LEVELS;
        }
        let e = energy(&dequantize(&codes));
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&codes);
        }
    }
    best
}

/// `ỹ_i = ŷ_i + Σ_j a_ij C_ij`, with `coeffs` channel-major (`i·N + j`).
/// Evaluated in a fixed order so encoder and decoder agree bit for bit.
pub fn apply(
    y_hat: &FeatureGrid<f32>,
    cands: &CandidateSet,
    coeffs: &[f32],
) -> Result<FeatureGrid<f32>> {
    let m = y_hat.channels;
    let n = cands.n;
    if cands.channels() != m || cands.maps.height != y_hat.height || cands.maps.width != y_hat.width
    {
        return Err(ClicError::shape(
            "pqf apply",
            format!("{:?}", y_hat.dims()),
            format!("{:?}", cands.maps.dims()),
        ));
    }
    if coeffs.len() != m * n {
        return Err(ClicError::shape("pqf coefficients", m * n, coeffs.len()));
    }
    let mut out = y_hat.clone();
    for i in 0..m {
        let row = out.channel_mut(i);
        for j in 0..n {
            let a = coeffs[i * n + j];
            for (o, &cv) in row.iter_mut().zip(cands.map(i, j)) {
                *o += a * cv;
            }
        }
    }
    Ok(out)
}

/// Per-channel least-squares fit of `eps` for every channel.
pub fn solve_all(
    cands: &CandidateSet,
    eps: &FeatureGrid<f32>,
    ridge: Ridge,
) -> Result<Vec<LsSolution>> {
    (0..eps.channels)
        .map(|i| {
            let e: Vec<f64> = eps.channel(i).iter().map(|&v| v as f64).collect();
            solve_coefficients(&cands.matrix(i), &e, ridge)
        })
        .collect()
}

/// Shared pieces of the two differentiable ops: per channel `C` (column-major
/// 64-bit), `ε`, the ridge, `A = CᵀC + δI` factor, and `a`.
struct ChannelSystem {
    c: Vec<f64>,
    eps: Vec<f64>,
    l: Vec<f64>,
    a: Vec<f64>,
}

fn systems<T: Real>(cand: &Tensor<T>, eps: &Tensor<T>, n: usize) -> Result<Vec<ChannelSystem>> {
    let (mc, h, w) = cand.dims3()?;
    let (m, eh, ew) = eps.dims3()?;
    if mc != m * n || (h, w) != (eh, ew) {
        return Err(ClicError::shape(
            "pqf system",
            format!("[{}, {eh}, {ew}]", m * n),
            format!("{:?}", cand.shape()),
        ));
    }
    let p = h * w;
    (0..m)
        .map(|i| {
            let c: Vec<f64> = cand.data()[i * n * p..(i + 1) * n * p]
                .iter()
                .map(|v| v.f64())
                .collect();
            let e: Vec<f64> = eps.data()[i * p..(i + 1) * p]
                .iter()
                .map(|v| v.f64())
                .collect();
            let (ata, atb) = normal_equations(&c, &e, n);
            let d = auto_ridge(&ata, n);
            let (l, a) = match cholesky(&with_ridge(&ata, n, d), n) {
                Some(l) => {
                    let a = cholesky_solve(&l, &atb, n);
                    (l, a)
                }
                None => (Vec::new(), vec![0.0; n]),
            };
            Ok(ChannelSystem { c, eps: e, l, a })
        })
        .collect()
}

fn matvec(c: &[f64], v: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (j, &vj) in v.iter().enumerate() {
        for (o, &cv) in out.iter_mut().zip(&c[j * p..(j + 1) * p]) {
            *o += vj * cv;
        }
    }
    out
}

/// Differentiable least-squares weights `a` (auto ridge), shape `[M, N]`.
/// A channel whose candidates are all zero yields zero weights and no
/// gradient.
pub fn ls_coefficients<T: Real>(
    tape: &Tape<T>,
    cand: &Var<T>,
    eps: &Var<T>,
    n: usize,
) -> Result<Var<T>> {
    let sys = systems(cand.value(), eps.value(), n)?;
    let m = sys.len();
    let (_, h, w) = eps.dims3()?;
    let p = h * w;
    let out: Vec<T> = sys
        .iter()
        .flat_map(|s| s.a.iter().map(|&v| T::of(v)))
        .collect();
    Ok(tape.record(
        "ls_coefficients",
        &[cand, eps],
        Tensor::new(vec![m, n], out)?,
        Box::new(move |g, need| {
            let mut dc = vec![T::zero(); m * n * p];
            let mut de = vec![T::zero(); m * p];
            for (i, s) in sys.iter().enumerate() {
                if s.l.is_empty() {
                    continue;
                }
                let gbar: Vec<f64> = g.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|v| v.f64())
                    .collect();
                let wv = cholesky_solve(&s.l, &gbar, n);
                let ca = matvec(&s.c, &s.a, p);
                let cw = matvec(&s.c, &wv, p);
                let wa: f64 = wv.iter().zip(&s.a).map(|(x, y)| x * y).sum();
                let k = 2.0 * RIDGE_SCALE / n as f64 * wa;
                // grad_C = ε wᵀ − (Ca) wᵀ − (Cw) aᵀ − (2ρ/N)(wᵀa) C
                for j in 0..n {
                    for t in 0..p {
                        let v = (s.eps[t] - ca[t]) * wv[j] - cw[t] * s.a[j] - k * s.c[j * p + t];
                        dc[(i * n + j) * p + t] = T::of(v);
                    }
                }
                for t in 0..p {
                    de[i * p + t] = T::of(cw[t]);
                }
            }
            vec![
                need[0].then(|| Tensor::new(vec![m * n, h, w], dc).unwrap()),
                need[1].then(|| Tensor::new(vec![m, h, w], de).unwrap()),
            ]
        }),
    ))
}

/// `−Σ_i ε_iᵀ C_i (C_iᵀC_i + δI)⁻¹ C_iᵀ ε_i` (auto ridge).
pub fn pqf_loss<T: Real>(tape: &Tape<T>, cand: &Var<T>, eps: &Var<T>, n: usize) -> Result<Var<T>> {
    let sys = systems(cand.value(), eps.value(), n)?;
    let m = sys.len();
    let (_, h, w) = eps.dims3()?;
    let p = h * w;
    let total: f64 = sys
        .iter()
        .map(|s| {
            let (_, atb) = normal_equations(&s.c, &s.eps, n);
            -atb.iter().zip(&s.a).map(|(b, a)| b * a).sum::<f64>()
        })
        .sum();
    Ok(tape.record(
        "pqf_loss",
        &[cand, eps],
        Tensor::scalar(T::of(total)),
        Box::new(move |g, need| {
            let gv = g.data()[0].f64();
            let mut dc = vec![T::zero(); m * n * p];
            let mut de = vec![T::zero(); m * p];
            for (i, s) in sys.iter().enumerate() {
                if s.l.is_empty() {
                    continue;
                }
                let ca = matvec(&s.c, &s.a, p);
                let aa: f64 = s.a.iter().map(|x| x * x).sum();
                let k = 2.0 * RIDGE_SCALE / n as f64 * aa;
                // grad_C = −2 ε aᵀ + 2 (Ca) aᵀ + (2ρ/N)|a|² C
                for j in 0..n {
                    for t in 0..p {
                        let v = -2.0 * (s.eps[t] - ca[t]) * s.a[j] + k * s.c[j * p + t];
                        dc[(i * n + j) * p + t] = T::of(gv * v);
                    }
                }
                for t in 0..p {
                    de[i * p + t] = T::of(-2.0 * gv * ca[t]);
                }
            }
            vec![
                need[0].then(|| Tensor::new(vec![m * n, h, w], dc).unwrap()),
                need[1].then(|| Tensor::new(vec![m, h, w], de).unwrap()),
            ]
        }),
    ))
}

/// Differentiable `ŷ + Σ_j a_ij C_ij`; `a` has shape `[M, N]`.
pub fn apply_coefficients<T: Real>(
    tape: &Tape<T>,
    y_hat: &Var<T>,
    cand: &Var<T>,
    a: &Var<T>,
) -> Result<Var<T>> {
    let (m, h, w) = y_hat.dims3()?;
    let p = h * w;
    let n = a.value().numel() / m.max(1);
    if a.value().numel() != m * n || cand.value().numel() != m * n * p {
        return Err(ClicError::shape(
            "apply_coefficients",
            format!("[{}, {h}, {w}]", m * n),
            format!("{:?}", cand.shape()),
        ));
    }
    let mut y = y_hat.data().to_vec();
    for i in 0..m {
        for j in 0..n {
            let aij = a.data()[i * n + j];
            let cm = &cand.data()[(i * n + j) * p..(i * n + j + 1) * p];
            for (o, &cv) in y[i * p..(i + 1) * p].iter_mut().zip(cm) {
                *o += aij * cv;
            }
        }
    }
    let (cr, ar) = (cand.rc(), a.rc());
    let ashape = a.shape().to_vec();
    Ok(tape.record(
        "apply_coefficients",
        &[y_hat, cand, a],
        Tensor::new(vec![m, h, w], y)?,
        Box::new(move |g, need| {
            let gd = g.data();
            let dc = need[1].then(|| {
                let mut d = vec![T::zero(); m * n * p];
                for i in 0..m {
                    for j in 0..n {
                        let aij = ar.data()[i * n + j];
                        for t in 0..p {
                            d[(i * n + j) * p + t] = aij * gd[i * p + t];
                        }
                    }
                }
                Tensor::new(vec![m * n, h, w], d).unwrap()
            });
            let da = need[2].then(|| {
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let cm = &cr.data()[(i * n + j) * p..(i * n + j + 1) * p];
                        d[i * n + j] = cm
                            .iter()
                            .zip(&gd[i * p..(i + 1) * p])
                            .fold(T::zero(), |s, (&c, &gv)| s + c * gv);
                    }
                }
                Tensor::new(ashape.clone(), d).unwrap()
            });
            vec![Some(g.clone()), dc, da]
        }),
    ))
}

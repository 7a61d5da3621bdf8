//! Built-in invariant checks run by `clic selftest`.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ChannelAttnParams, SpatialAttnParams};
use crate::cluster::{ClusterParams, GammaMode};
use crate::codec::{self, synth, Container, EncodeOptions, Weights};
use crate::entropy::freq::{gaussian_freq, FreqTable, FREQ_TOTAL};
use crate::entropy::quant::{dsq, gaussian_bits};
use crate::entropy::range_coder::{range_decode, range_encode};
use crate::error::{ClicError, Result};
use crate::pqf::{ls_coefficients, pqf_loss, solve_coefficients, Ridge};
use crate::tensor::gradcheck::{self, GradCheckOptions};
use crate::tensor::{ops, FeatureGrid, ParamStore, Tensor};
use crate::transform::ArchConfig;

/// Relative-error bound for the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Deliberate breakage used to confirm that a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Coder round trip uses a table whose frequencies do not sum to 2^16.
    FreqTable,
    /// The least-squares check compares against a perturbed solution.
    LsSolver,
}

impl FromStr for Fault {
    type Err = ClicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq-table" => Ok(Fault::FreqTable),
            "ls-solver" => Ok(Fault::LsSolver),
            _ => Err(ClicError::invalid(format!(
                "unknown fault `{s}` (expected freq-table or ls-solver)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches")
}

/// Finite-difference checks of every differentiable building block; returns
/// the worst relative error per case.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let proj = |shape: &[usize], rng: &mut ChaCha8Rng| rand_tensor(shape, rng);

    {
        let mut s = ParamStore::new();
        let w = s.add("w", rand_tensor(&[4, 3], &mut rng));
        let b = s.add("b", rand_tensor(&[4], &mut rng));
        let p = proj(&[4, 3, 3], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[3, 3, 3], &mut rng)],
            opts,
            |g, x| {
                let y = g.linear(&x[0], &g.p(w), Some(&g.p(b)))?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push(("linear", r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let gn = s.add("gain", rand_tensor(&[4], &mut rng));
        let bn = s.add("bias", rand_tensor(&[4], &mut rng));
        let p = proj(&[4, 3, 3], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[4, 3, 3], &mut rng)],
            opts,
            |g, x| {
                let y = g.layer_norm(&x[0], &g.p(gn), &g.p(bn), 1e-6)?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push(("layer norm", r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let k = s.add("kernel", rand_tensor(&[3, 2, 3, 3], &mut rng));
        let b = s.add("bias", rand_tensor(&[3], &mut rng));
        let kt = s.add("kernel_t", rand_tensor(&[3, 2, 5, 5], &mut rng));
        let p = proj(&[2, 6, 6], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[2, 6, 6], &mut rng)],
            opts,
            |g, x| {
                let y = g.conv2d(&x[0], &g.p(k), Some(&g.p(b)), 2, 1)?;
                let y = g.conv_transpose2d(&y, &g.p(kt), None, 2, 2, 6, 6)?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push(("convolution", r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let p = proj(&[3, 4, 4], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[3, 4, 4], &mut rng).map(|v| 3.0 * v)],
            opts,
            |g, x| {
                let y = g.add(&g.gelu(&x[0]), &g.sigmoid(&x[0]))?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push(("gelu + sigmoid", r.max_rel_error()));
    }
    for (name, mode, cb) in [
        ("cluster aggregate/dispatch", GammaMode::PerChannel, false),
        ("cluster checkerboard", GammaMode::Scalar, true),
    ] {
        let mut s = ParamStore::new();
        let mixer = ClusterParams::new(&mut s, "mix", 4, (2, 2), mode, &mut rng);
        let p = proj(&[4, 4, 4], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[4, 4, 4], &mut rng)],
            opts,
            |g, x| {
                let y = mixer.forward(g, &x[0], cb)?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push((name, r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let sa = SpatialAttnParams::new(&mut s, "sa", 3, &mut rng)?;
        let ca = ChannelAttnParams::new(&mut s, "ca", 4, 2, &mut rng)?;
        let p = proj(&[4, 5, 5], &mut rng);
        let r = gradcheck::check(
            &mut s,
            &[rand_tensor(&[4, 5, 5], &mut rng)],
            opts,
            |g, x| {
                let y = ca.forward(g, &sa.forward(g, &x[0])?)?;
                Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
            },
        )?;
        out.push(("spatial + channel attention", r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let p = proj(&[2, 3, 3], &mut rng);
        let x = rand_tensor(&[2, 3, 3], &mut rng).map(|v| 2.0 * v);
        let r = gradcheck::check(&mut s, &[x], opts, |g, x| {
            let y = dsq(g.tape, &x[0], 10.0)?;
            Ok(g.sum(&g.mul(&y, &g.constant(p.clone()))?))
        })?;
        out.push(("soft quantization", r.max_rel_error()));
    }
    {
        let mut s = ParamStore::new();
        let v = rand_tensor(&[2, 3, 3], &mut rng).map(|v| 2.0 * v);
        let sigma = rand_tensor(&[2, 3, 3], &mut rng).map(|v| 1.0 + 0.6 * v);
        let r = gradcheck::check(&mut s, &[v, sigma], opts, |g, x| {
            gaussian_bits(g.tape, &x[0], &x[1])
        })?;
        out.push(("gaussian bits", r.max_rel_error()));
    }
    {
        // 3-channel toy latent, two candidates each
        let mut s = ParamStore::new();
        let cand = rand_tensor(&[6, 4, 4], &mut rng);
        let eps = rand_tensor(&[3, 4, 4], &mut rng).map(|v| 0.5 * v);
        let r = gradcheck::check(&mut s, &[cand.clone(), eps.clone()], opts, |g, x| {
            pqf_loss(g.tape, &x[0], &x[1], 2)
        })?;
        out.push(("pqf loss", r.max_rel_error()));
        let p = proj(&[3, 2], &mut rng);
        let r = gradcheck::check(&mut s, &[cand, eps], opts, |g, x| {
            let a = ls_coefficients(g.tape, &x[0], &x[1], 2)?;
            Ok(g.sum(&g.mul(&a, &g.constant(p.clone()))?))
        })?;
        out.push(("least-squares coefficients", r.max_rel_error()));
    }
    Ok(out)
}

fn check_gradients() -> Result<String> {
    let rows = gradient_suite(11)?;
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let bad: Vec<_> = rows.iter().filter(|r| !(r.1 < GRAD_TOLERANCE)).collect();
    if bad.is_empty() {
        Ok(format!(
            "{} cases, worst relative error {worst:.2e}",
            rows.len()
        ))
    } else {
        Err(ClicError::invalid(format!("gradient mismatch: {bad:?}")))
    }
}

fn check_coder(fault: Option<Fault>) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tables = Vec::new();
    for _ in 0..64 {
        tables.push(gaussian_freq(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.05..30.0),
        )?);
    }
    if fault == Some(Fault::FreqTable) {
        let t = &tables[0];
        let mut f = t.freqs().to_vec();
        let mode = (0..f.len()).max_by_key(|&i| f[i]).unwrap_or(0);
        f[mode] += 977;
        tables[0] = FreqTable::new_unchecked(t.min_symbol(), f);
    }
    for (k, t) in tables.iter().enumerate() {
        let total: u32 = t.freqs().iter().sum();
        if total != FREQ_TOTAL {
            return Err(ClicError::invalid(format!(
                "table {k} sums to {total}, not {FREQ_TOTAL}"
            )));
        }
    }
    let n = 20_000;
    let which: Vec<usize> = (0..n).map(|_| rng.gen_range(0..tables.len())).collect();
    let syms: Vec<i32> = which
        .iter()
        .map(|&k| {
            let t = &tables[k];
            (t.min_symbol() + rng.gen_range(0..t.len() as i32))
                .clamp(-8, 8)
                .clamp(t.min_symbol(), t.max_symbol())
        })
        .collect();
    let refs: Vec<&FreqTable> = which.iter().map(|&k| &tables[k]).collect();
    let bytes = range_encode(&syms, &refs)?;
    let back = range_decode(&bytes, &refs)?;
    if back != syms {
        return Err(ClicError::invalid("decoded symbols differ"));
    }
    Ok(format!("{n} symbols in {} bytes", bytes.len()))
}

fn check_least_squares(fault: Option<Fault>) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = 12;
        let c: Vec<f64> = (0..2 * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = solve_coefficients(&c, &e, Ridge::Fixed(0.0))?.a;
        if fault == Some(Fault::LsSolver) {
            a[0] += 1e-3;
        }
        // explicit 2×2 inverse of the normal equations
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let (c0, c1) = c.split_at(p);
        let (s00, s01, s11) = (dot(c0, c0), dot(c0, c1), dot(c1, c1));
        let (b0, b1) = (dot(c0, &e), dot(c1, &e));
        let det = s00 * s11 - s01 * s01;
        let oracle = [(s11 * b0 - s01 * b1) / det, (s00 * b1 - s01 * b0) / det];
        worst = worst
            .max((a[0] - oracle[0]).abs())
            .max((a[1] - oracle[1]).abs());
    }
    if worst < 1e-9 {
        Ok(format!("200 systems, max deviation {worst:.1e}"))
    } else {
        Err(ClicError::invalid(format!(
            "solution deviates from oracle by {worst:.3e}"
        )))
    }
}

fn check_shuffle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for &(c, h, w, r) in &[(4, 6, 8, 2), (9, 3, 6, 3), (2, 4, 4, 1)] {
        let x = FeatureGrid::<f64>::random(c, h, w, -1.0, 1.0, &mut rng);
        let back = ops::pixel_shuffle(&ops::pixel_unshuffle(&x, r)?, r)?;
        if back != x {
            return Err(ClicError::invalid(format!(
                "shuffle ∘ unshuffle differs for {c}×{h}×{w}, r={r}"
            )));
        }
    }
    Ok("3 shapes".into())
}

fn check_codec() -> Result<String> {
    let w = Weights::random(ArchConfig::toy(), 15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let img = synth::synthetic_image(40, 24, &mut rng);
    let enc = codec::encode(&w, &img, &EncodeOptions::default())?;
    let dec = codec::decode(&w, &enc.bytes)?;
    if dec.state != enc.state || dec.image != enc.reconstruction {
        return Err(ClicError::invalid("decoder state differs from encoder"));
    }
    let again = Container::parse(&enc.bytes)?.to_bytes();
    if again != enc.bytes {
        return Err(ClicError::invalid(
            "container does not re-serialize identically",
        ));
    }
    Ok(format!(
        "{} bytes, {:.3} bpp",
        enc.bytes.len(),
        enc.report.bpp
    ))
}

/// Runs every check, optionally with an injected fault.
pub fn run(fault: Option<Fault>) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<String>>)> = vec![
        ("gradients", Box::new(check_gradients)),
        (
            "range coder round trip",
            Box::new(move || check_coder(fault)),
        ),
        (
            "least-squares oracle",
            Box::new(move || check_least_squares(fault)),
        ),
        ("shuffle inverse", Box::new(check_shuffle)),
        ("codec round trip", Box::new(check_codec)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f();
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e.to_string()),
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

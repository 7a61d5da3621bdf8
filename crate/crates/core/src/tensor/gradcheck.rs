//! Central finite-difference checks of tape gradients at 64-bit precision.

use super::{Graph, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Per-tensor comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)` over the
    /// checked elements.
    pub rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on perturbed elements per tensor; larger tensors are
    /// sampled at a fixed stride.
    pub max_elems: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_elems: 48,
        }
    }
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let stride = n as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

fn rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)
}

/// Checks the gradient of the scalar produced by `f` with respect to every
/// parameter in `store` and every tensor in `inputs`.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Graph<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    store.zero_grads();
    let tape = Tape::new();
    let (loss, leaves) = {
        let g = Graph::new(&tape, store);
        let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        (f(&g, &leaves)?, leaves)
    };
    let report = tape.backward(&loss, store)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let g = Graph::new(&tape, store);
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut out = GradReport::default();
    let h = opts.step;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic_full = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let idx = sample_indices(analytic_full.numel(), opts.max_elems);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).values()[i];
            store.get_mut(id).values_mut()[i] = orig + h;
            let fp = eval(store, inputs)?;
            store.get_mut(id).values_mut()[i] = orig - h;
            let fm = eval(store, inputs)?;
            store.get_mut(id).values_mut()[i] = orig;
            analytic.push(analytic_full.data()[i]);
            numeric.push((fp - fm) / (2.0 * h));
        }
        out.entries.push(GradEntry {
            name: store.name(id).to_string(),
            rel_error: rel(&analytic, &numeric),
            checked: idx.len(),
        });
    }

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic_full = report
            .grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let idx = sample_indices(analytic_full.numel(), opts.max_elems);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + h;
            let fp = eval(store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig - h;
            let fm = eval(store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            analytic.push(analytic_full.data()[i]);
            numeric.push((fp - fm) / (2.0 * h));
        }
        out.entries.push(GradEntry {
            name: format!("input[{k}]"),
            rel_error: rel(&analytic, &numeric),
            checked: idx.len(),
        });
    }
    Ok(out)
}

//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero in both routes do not divide by zero.
    pub floor: f64,
    /// Entries probed per block; `0` probes all of them.
    pub max_entries_per_block: usize,
    /// Entries that miss the tolerance are re-probed with the step divided
    /// by 10 this many times, so a kink of abs/max/relu lying within one
    /// step of the point (but not on it) does not masquerade as an error.
    pub refinements: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_block: 0,
            refinements: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Entries that needed a smaller step to agree.
    pub refined: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn refined(&self) -> usize {
        self.blocks.iter().map(|b| b.refined).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| b.max_rel_error > self.tolerance)
    }
}

/// Indices probed within a block of `len` entries: all of them, or an
/// evenly spread subset that always includes both ends.
fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if max == 0 || len <= max {
        return (0..len).collect();
    }
    if max == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..max).map(|k| k * (len - 1) / (max - 1)).collect();
    idx.dedup();
    idx
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the gradient of the scalar `f(inputs)` with respect to every
/// named input block against central finite differences.
pub fn gradcheck<F>(inputs: &[(String, Tensor)], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut probe: Vec<(String, Tensor)> = inputs.to_vec();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, (name, tensor)) in inputs.iter().enumerate() {
        let zeros = vec![0.0; tensor.len()];
        let analytic = g.grad(vars[b]).unwrap_or(&zeros).to_vec();
        let mut report = BlockReport {
            name: name.clone(),
            numel: tensor.len(),
            checked: 0,
            refined: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in probe_indices(tensor.len(), opts.max_entries_per_block) {
            let original = tensor.data()[i];
            let mut step = opts.step;
            let mut best = (f64::INFINITY, f64::INFINITY);
            for attempt in 0..=opts.refinements {
                probe[b].1.data_mut()[i] = original + step;
                let up = evaluate(&f, &probe)?;
                probe[b].1.data_mut()[i] = original - step;
                let down = evaluate(&f, &probe)?;
                probe[b].1.data_mut()[i] = original;

                let numeric = (up - down) / (2.0 * step);
                let abs = (analytic[i] - numeric).abs();
                let rel = abs / analytic[i].abs().max(numeric.abs()).max(opts.floor);
                if rel < best.0 {
                    best = (rel, abs);
                }
                if best.0 <= opts.tolerance {
                    report.refined += (attempt > 0) as usize;
                    break;
                }
                step /= 10.0;
            }
            let (rel, abs) = best;
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        blocks.push(report);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}

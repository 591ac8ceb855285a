//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NeuralError, Result};
use crate::graph::{GradGraph, NamedTensors, Program};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Name of the scalar output to differentiate.
    pub output: String,
    pub step: f64,
    /// Coordinates sampled per parameter (all of them if the parameter is smaller).
    pub max_entries: usize,
    /// Denominator floor in the relative error, guards exactly-zero gradients.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            output: "loss".into(),
            step: 1e-5,
            max_entries: 6,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| !l.flagged)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| l.flagged)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl<P: Program<f64>> GradGraph<f64, P> {
    /// Compare analytic parameter gradients of a scalar output against
    /// central differences. Only defined in 64-bit precision.
    pub fn finite_diff_check(
        &mut self,
        inputs: &NamedTensors<f64>,
        seed: u64,
        tolerance: f64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let out = self.forward(inputs)?;
        let loss = out
            .get(&opts.output)
            .ok_or_else(|| NeuralError::Invalid(format!("no output named `{}`", opts.output)))?;
        if loss.numel() != 1 {
            return Err(NeuralError::Invalid(format!(
                "finite-difference check needs a scalar output, `{}` has shape {:?}",
                opts.output,
                loss.shape()
            )));
        }
        let shape = loss.shape().to_vec();
        self.backward(&opts.output, &Tensor::ones(shape))?;
        let grads = self.param_grads()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(n, _)| n.clone())
            .collect();
        let mut leaves = Vec::new();
        for name in names {
            let numel = self.params.value(&name)?.numel();
            let analytic = grads
                .get(&name)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; numel]);
            let picks: Vec<usize> = if numel <= opts.max_entries {
                (0..numel).collect()
            } else {
                sample(&mut rng, numel, opts.max_entries).into_vec()
            };
            let mut report = LeafReport {
                name: name.clone(),
                checked: picks.len(),
                max_abs_error: 0.0,
                max_rel_error: 0.0,
                flagged: false,
            };
            for idx in picks {
                let orig = self.params.value(&name)?.data()[idx];
                let plus = self.eval_with(&name, idx, orig + opts.step, inputs, &opts.output)?;
                let minus = self.eval_with(&name, idx, orig - opts.step, inputs, &opts.output)?;
                self.params.get_mut(&name)?.value.data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * opts.step);
                let a = analytic[idx];
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                report.max_rel_error = report
                    .max_rel_error
                    .max(relative_error(a, numeric, opts.floor));
            }
            report.flagged = report.max_rel_error >= tolerance;
            leaves.push(report);
        }
        // leave the graph holding a clean recording at the original point
        self.forward(inputs)?;
        Ok(GradCheckReport { tolerance, leaves })
    }

    fn eval_with(
        &mut self,
        name: &str,
        idx: usize,
        value: f64,
        inputs: &NamedTensors<f64>,
        output: &str,
    ) -> Result<f64> {
        self.params.get_mut(name)?.value.data_mut()[idx] = value;
        let out = self.forward(inputs)?;
        out[output].item()
    }
}

/// Check a scalar-valued closure of the parameters in `params`.
pub fn check_params<F>(
    params: crate::ParamStore,
    seed: u64,
    tolerance: f64,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut crate::Tape<f64>, &crate::ParamStore) -> Result<crate::Var>,
{
    let output = opts.output.clone();
    let program = crate::graph::FnProgram::new(vec![], move |tape: &mut crate::Tape<f64>, store: &crate::ParamStore, _: &std::collections::BTreeMap<String, crate::Var>| {
        let v = f(tape, store)?;
        Ok(std::collections::BTreeMap::from([(output.clone(), v)]))
    });
    let mut graph = GradGraph::new(program, params);
    graph.finite_diff_check(&NamedTensors::new(), seed, tolerance, opts)
}

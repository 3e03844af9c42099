//! Finite-difference check of tape gradients, run in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per input; `None` probes every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-input relative error.
    pub max_rel_error: f64,
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over the probed entries of each input.
    pub per_input: Vec<f64>,
    pub probes: usize,
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences at `inputs`.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericsError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picked: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut p = sample(&mut rng, n, m).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..n).collect(),
        };
        let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
        for &j in &picked {
            let orig = input.data()[j];
            values[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * opts.step);
            let an = analytic[i].data()[j];
            diff += (an - fd).powi(2);
            na += an * an;
            nf += fd * fd;
            probes += 1;
        }
        let denom = na.sqrt().max(nf.sqrt());
        per_input.push(if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        });
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        probes,
    })
}

//! Central finite-difference checking of tape gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Slot, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate)` pairs whose ±ε probes straddled a
    /// non-differentiable point (ReLU at 0, max-pool tie, loss clamp).
    pub excluded: Vec<(usize, usize)>,
}

/// Compares the tape's reverse-mode gradient of `build` against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of every input.
///
/// Non-scalar outputs are reduced to a scalar with a fixed random projection,
/// so every output element contributes.
pub fn finite_difference_check<F>(build: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Tape<f64>, &[Slot]) -> Result<Slot>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::contract("finite-difference inputs must be finite"));
    }

    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Slot> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &leaves)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let out_shape = tape.value(out).shape().to_vec();
    let n_out: usize = out_shape.iter().product();
    let projection = Tensor::new(out_shape, (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let grads = tape.backward(&[(out, projection.clone())])?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };

    for (i, (&leaf, original)) in leaves.iter().zip(inputs).enumerate() {
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(original.shape()));
        for j in 0..original.len() {
            let mut probe = |delta: f64| -> Result<(f64, u64)> {
                let mut x = original.clone();
                x.data_mut()[j] += delta;
                tape.set_leaf(leaf, x)?;
                tape.replay()?;
                Ok((tape.value(out).dot(&projection), tape.branch_signature()))
            };
            let (f_plus, sig_plus) = probe(epsilon)?;
            let (f_minus, sig_minus) = probe(-epsilon)?;
            if sig_plus != sig_minus {
                report.excluded.push((i, j));
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
        tape.set_leaf(leaf, original.clone())?;
    }
    tape.replay()?;
    Ok(report)
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of a `(N, C)` tensor, max-shifted.
pub fn softmax_rows<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = z.matrix()?;
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / total;
        }
    }
    Ok(Tensor::from_parts(z.shape().to_vec(), out))
}

/// Vector-Jacobian product of softmax: `dz = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = y.matrix()?;
    if dy.shape() != y.shape() {
        return Err(Error::shape("softmax upstream gradient shape mismatch"));
    }
    let mut dz = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dz.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - inner)));
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dz))
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = probs.matrix()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} outside 0..{c}")));
    }
    Ok((n, c))
}

/// Batch-mean negative log-likelihood of the true class, multiplied by
/// `scale`. Probabilities below the scalar's epsilon are clamped before the
/// logarithm; the number of clamped rows is returned alongside the loss.
pub fn exit_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize], scale: T) -> Result<(T, usize)> {
    let (n, c) = check_labels(probs, labels)?;
    let floor = T::prob_floor();
    let mut clamped = 0;
    let mut total = T::zero();
    for (row, &label) in probs.data().chunks_exact(c).zip(labels) {
        let p = row[label];
        if p < floor {
            clamped += 1;
        }
        total += p.max(floor).ln();
    }
    Ok((-scale * total / T::from_f64(n as f64), clamped))
}

pub fn exit_loss_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], scale: T, dloss: T) -> Result<Tensor<T>> {
    let (n, c) = check_labels(probs, labels)?;
    let floor = T::prob_floor();
    let coef = -scale * dloss / T::from_f64(n as f64);
    let mut d = vec![T::zero(); n * c];
    for (i, (row, &label)) in probs.data().chunks_exact(c).zip(labels).enumerate() {
        let p = row[label];
        if p >= floor {
            d[i * c + label] = coef / p;
        }
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), d))
}

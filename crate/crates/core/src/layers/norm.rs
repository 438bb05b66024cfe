//! Batch normalization over the last (channel) axis.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channels<T: Scalar>(x: &Tensor<T>, per_channel: &[&Tensor<T>]) -> Result<usize> {
    let c = *x.shape().last().expect("tensors have rank >= 1");
    for t in per_channel {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batch norm parameter {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    Ok(c)
}

/// Training-mode forward. Returns `(y, x̂, 1/√(σ²+ε), stats)`.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, BatchStats<T>)> {
    let c = channels(x, &[gamma, beta])?;
    let m = x.len() / c;
    let count = T::from_f64(m as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(px) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s = *s / count;
    }
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - mu;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s = *s / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        Tensor::from_parts(shape, xhat),
        inv_std,
        BatchStats { mean, var },
    ))
}

/// Returns `(dx, dγ, dβ)` for the training-mode forward.
pub fn batch_norm_train_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = channels(xhat, &[gamma])?;
    if dy.shape() != xhat.shape() {
        return Err(Error::shape("batch norm upstream gradient shape mismatch"));
    }
    let m = T::from_f64((xhat.len() / c) as f64);
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    for (h, g) in xhat.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * h[ch];
        }
    }
    let mut dx = Vec::with_capacity(xhat.len());
    for (h, g) in xhat.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch] / m;
            dx.push(scale * (m * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
        }
    }
    Ok((
        Tensor::from_parts(xhat.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

/// Inference-mode forward `γ(x−μ)/√(σ²+ε) + β` with fixed statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = channels(x, &[gamma, beta, mean, var])?;
    let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    for px in x.data().chunks_exact(c) {
        for ch in 0..c {
            y.push(gamma.data()[ch] * ((px[ch] - mean.data()[ch]) * inv[ch]) + beta.data()[ch]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

pub fn batch_norm_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = channels(x, &[gamma, mean, var])?;
    let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (px, g) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for ch in 0..c {
            dx.push(g[ch] * gamma.data()[ch] * inv[ch]);
            dgamma[ch] += g[ch] * ((px[ch] - mean.data()[ch]) * inv[ch]);
            dbeta[ch] += g[ch];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

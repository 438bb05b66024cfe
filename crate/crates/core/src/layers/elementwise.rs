use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(0, x)`.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// The derivative at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Concatenates NHWC tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let (n, h, w, _) = first.nhwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, ph, pw, pc) = p.nhwc()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat: spatial extents {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for px in 0..n * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Ok(Tensor::from_parts(vec![n, h, w, total], out))
}

/// Splits an NHWC tensor along channels into pieces of the given widths.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, h, w, c) = x.nhwc()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape(format!("split widths {widths:?} do not sum to {c}")));
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&pc| Vec::with_capacity(n * h * w * pc)).collect();
    for px in x.data().chunks_exact(c) {
        let mut start = 0;
        for (part, &pc) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[start..start + pc]);
            start += pc;
        }
    }
    Ok(parts
        .into_iter()
        .zip(widths)
        .map(|(data, &pc)| Tensor::from_parts(vec![n, h, w, pc], data))
        .collect())
}

pub fn concat_channels_backward<T: Scalar>(dy: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    split_channels(dy, widths)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
/// `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(Tensor::full(shape, T::one()));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::from_slice(&[3], &[-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_slice(&[1, 1, 2, 1], &[1.0f32, 2.0]).unwrap();
        let b = Tensor::from_slice(&[1, 1, 2, 2], &[3.0f32, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 1, 2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2, 1]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3, 1]);
        assert!(matches!(concat_channels(&[&a, &b]), Err(Error::Shape(_))));
        assert!(matches!(add(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask::<f32>(&[4], 1.0, &mut rng).is_err());
        assert!(dropout_mask::<f32>(&[4], -0.1, &mut rng).is_err());
        assert_eq!(dropout_mask::<f32>(&[4], 0.0, &mut rng).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::full(&[1], 3.0);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let m = dropout_mask::<f64>(&[1], 0.2, &mut rng).unwrap();
            total += mul(&x, &m).unwrap().item();
        }
        let mean = total / trials as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    }
}

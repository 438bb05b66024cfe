use crate::error::{Error, Result};
use crate::layers::{Padding, Window};
use crate::tensor::{Scalar, Tensor};

/// Flat input offset of the selected maximum, one per output element.
pub type MaxPoolIndices = Vec<usize>;

/// Max pooling; ties go to the first window position in row-major order.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let (n, h, w, c) = x.nhwc()?;
    let win = Window::new(h, w, size, stride, padding)?;
    let xs = x.data();
    let total = n * win.out_h * win.out_w * c;
    let mut out = vec![T::neg_infinity(); total];
    let mut idx = vec![usize::MAX; total];
    for img in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * c;
                for kh in 0..size {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..size {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let px = ((img * h + ih) * w + iw) * c;
                        for ch in 0..c {
                            let v = xs[px + ch];
                            if idx[o + ch] == usize::MAX || v > out[o + ch] {
                                out[o + ch] = v;
                                idx[o + ch] = px + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert!(idx.iter().all(|&i| i != usize::MAX));
    Ok((Tensor::from_parts(vec![n, win.out_h, win.out_w, c], out), idx))
}

pub fn max_pool2d_backward<T: Scalar>(input_shape: &[usize], indices: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != indices.len() {
        return Err(Error::shape("max-pool upstream gradient does not match recorded indices"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Average pooling over the in-bounds part of each window.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.nhwc()?;
    let win = Window::new(h, w, size, stride, padding)?;
    let xs = x.data();
    let mut out = vec![T::zero(); n * win.out_h * win.out_w * c];
    for img in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * c;
                let mut count = 0usize;
                for kh in 0..size {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..size {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let px = ((img * h + ih) * w + iw) * c;
                        for (a, &v) in out[o..o + c].iter_mut().zip(&xs[px..px + c]) {
                            *a += v;
                        }
                        count += 1;
                    }
                }
                let denom = T::from_f64(count as f64);
                for a in &mut out[o..o + c] {
                    *a = *a / denom;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, win.out_h, win.out_w, c], out))
}

pub fn avg_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    size: usize,
    stride: usize,
    padding: Padding,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = *input_shape else {
        return Err(Error::shape(format!("expected NHWC input shape, got {input_shape:?}")));
    };
    let win = Window::new(h, w, size, stride, padding)?;
    if dy.shape() != [n, win.out_h, win.out_w, c] {
        return Err(Error::shape(format!("avg-pool upstream gradient has shape {:?}", dy.shape())));
    }
    let mut dx = vec![T::zero(); n * h * w * c];
    for img in 0..n {
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * c;
                let rows: Vec<usize> = (0..size).filter_map(|kh| win.in_row(oh, kh)).collect();
                let cols: Vec<usize> = (0..size).filter_map(|kw| win.in_col(ow, kw)).collect();
                let denom = T::from_f64((rows.len() * cols.len()) as f64);
                for &ih in &rows {
                    for &iw in &cols {
                        let px = ((img * h + ih) * w + iw) * c;
                        for (d, &g) in dx[px..px + c].iter_mut().zip(&dy.data()[o..o + c]) {
                            *d += g / denom;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Per-channel spatial mean: `(N, H, W, C) → (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.nhwc()?;
    let denom = T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for (img, acc) in out.chunks_exact_mut(c).enumerate() {
        for px in x.data()[img * h * w * c..(img + 1) * h * w * c].chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = *input_shape else {
        return Err(Error::shape(format!("expected NHWC input shape, got {input_shape:?}")));
    };
    if dy.shape() != [n, c] {
        return Err(Error::shape(format!("pooling upstream gradient has shape {:?}", dy.shape())));
    }
    let denom = T::from_f64((h * w) as f64);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for g in dy.data().chunks_exact(c) {
        for _ in 0..h * w {
            dx.extend(g.iter().map(|&v| v / denom));
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(values: &[f32]) -> Tensor<f32> {
        Tensor::from_slice(&[1, 2, 2, 1], values).unwrap()
    }

    #[test]
    fn max_pool_picks_maximum() {
        let (y, idx) = max_pool2d(&square(&[1.0, 2.0, 3.0, 4.0]), 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let (_, idx) = max_pool2d(&square(&[5.0, 5.0, 5.0, 5.0]), 2, 2, Padding::Valid).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn same_padding_pools_odd_extent() {
        let x = Tensor::<f32>::zeros(&[1, 7, 7, 2]);
        let (y, _) = max_pool2d(&x, 2, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 2]);
    }

    #[test]
    fn global_pool_means() {
        assert_eq!(global_avg_pool(&square(&[1.0, 2.0, 3.0, 4.0])).unwrap().data(), &[2.5]);
        let x = Tensor::from_slice(&[1, 1, 1, 3], &[1.0f32, -2.0, 0.5]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
        let v = Tensor::<f32>::full(&[2, 3, 3, 4], 0.75);
        assert!(global_avg_pool(&v).unwrap().data().iter().all(|&m| m == 0.75));
    }

    #[test]
    fn avg_pool_downsamples() {
        let y = avg_pool2d(&square(&[1.0, 2.0, 3.0, 4.0]), 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fully connected layer `y = Wᵀx + b` applied to each row of a `(N, F)` batch,
/// with `W` stored as `F×C`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.matrix()?;
    let (wf, c) = w.matrix()?;
    if wf != f {
        return Err(Error::shape(format!("dense weight expects {wf} features, input has {f}")));
    }
    if b.shape() != [c] {
        return Err(Error::shape(format!("dense bias shape {:?}, expected [{c}]", b.shape())));
    }
    let ws = w.data();
    let mut out = vec![T::zero(); n * c];
    for (row, acc) in x.data().chunks_exact(f).zip(out.chunks_exact_mut(c)) {
        for (fi, &xv) in row.iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&ws[fi * c..(fi + 1) * c]) {
                *a += xv * wv;
            }
        }
        for (a, &bv) in acc.iter_mut().zip(b.data()) {
            *a += bv;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f) = x.matrix()?;
    let (_, c) = w.matrix()?;
    if dy.shape() != [n, c] {
        return Err(Error::shape(format!("dense upstream gradient has shape {:?}", dy.shape())));
    }
    let ws = w.data();
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); f * c];
    let mut db = vec![T::zero(); c];
    for ((row, g), dx_row) in x.data().chunks_exact(f).zip(dy.data().chunks_exact(c)).zip(dx.chunks_exact_mut(f)) {
        for (d, &gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for fi in 0..f {
            let w_row = &ws[fi * c..(fi + 1) * c];
            let mut s = T::zero();
            for (&wv, &gv) in w_row.iter().zip(g) {
                s += wv * gv;
            }
            dx_row[fi] = s;
            let xv = row[fi];
            for (d, &gv) in dw[fi * c..(fi + 1) * c].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![c], db),
    ))
}

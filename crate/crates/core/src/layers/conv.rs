use crate::error::{Error, Result};
use crate::layers::{Padding, Window};
use crate::tensor::{Scalar, Tensor};

fn kernel_extent<T: Scalar>(w: &Tensor<T>, rank: usize) -> Result<usize> {
    let shape = w.shape();
    if shape.len() != rank || shape[0] != shape[1] {
        return Err(Error::shape(format!("expected square rank-{rank} kernel, got {shape:?}")));
    }
    Ok(shape[0])
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => Err(Error::shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

/// 2-D convolution of an NHWC input with a `K×K×Cin×Cout` kernel.
///
/// Each output element is accumulated over `(kh, kw, ci)` in row-major order
/// starting from zero, with the bias added last.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, h, wd, cin) = x.nhwc()?;
    let k = kernel_extent(w, 4)?;
    if w.shape()[2] != cin {
        return Err(Error::shape(format!(
            "conv2d kernel expects {} input channels, input has {cin}",
            w.shape()[2]
        )));
    }
    let cout = w.shape()[3];
    check_bias(b, cout)?;
    let win = Window::new(h, wd, k, stride, padding)?;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); n * win.out_h * win.out_w * cout];
    for img in 0..n {
        let x_img = &xs[img * h * wd * cin..(img + 1) * h * wd * cin];
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * cout;
                let acc = &mut out[o..o + cout];
                for kh in 0..k {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..k {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let x_px = &x_img[(ih * wd + iw) * cin..(ih * wd + iw + 1) * cin];
                        let w_tap = &ws[(kh * k + kw) * cin * cout..(kh * k + kw + 1) * cin * cout];
                        for (ci, &xv) in x_px.iter().enumerate() {
                            let w_row = &w_tap[ci * cout..(ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(w_row) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, win.out_h, win.out_w, cout], out))
}

/// Gradients of [`conv2d`] with respect to input, kernel and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, h, wd, cin) = x.nhwc()?;
    let k = kernel_extent(w, 4)?;
    let cout = w.shape()[3];
    let win = Window::new(h, wd, k, stride, padding)?;
    if dy.shape() != [n, win.out_h, win.out_w, cout] {
        return Err(Error::shape(format!("conv2d upstream gradient has shape {:?}", dy.shape())));
    }

    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); cout];
    for img in 0..n {
        let x_off = img * h * wd * cin;
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * cout;
                let g = &dys[o..o + cout];
                if with_bias {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                for kh in 0..k {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..k {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let px = x_off + (ih * wd + iw) * cin;
                        let tap = (kh * k + kw) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[px + ci];
                            let row = tap + ci * cout;
                            let w_row = &ws[row..row + cout];
                            let mut s = T::zero();
                            for (&wv, &gv) in w_row.iter().zip(g) {
                                s += wv * gv;
                            }
                            dx[px + ci] += s;
                            for (d, &gv) in dw[row..row + cout].iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        with_bias.then(|| Tensor::from_parts(vec![cout], db)),
    ))
}

/// Per-channel spatial convolution with a `K×K×C` kernel.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (n, h, wd, c) = x.nhwc()?;
    let k = kernel_extent(w, 3)?;
    if w.shape()[2] != c {
        return Err(Error::shape(format!(
            "depthwise kernel has {} channels, input has {c}",
            w.shape()[2]
        )));
    }
    check_bias(b, c)?;
    let win = Window::new(h, wd, k, stride, padding)?;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); n * win.out_h * win.out_w * c];
    for img in 0..n {
        let x_off = img * h * wd * c;
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * c;
                let acc = &mut out[o..o + c];
                for kh in 0..k {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..k {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let px = x_off + (ih * wd + iw) * c;
                        let tap = (kh * k + kw) * c;
                        for ((a, &xv), &wv) in acc.iter_mut().zip(&xs[px..px + c]).zip(&ws[tap..tap + c]) {
                            *a += xv * wv;
                        }
                    }
                }
                if let Some(b) = b {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, win.out_h, win.out_w, c], out))
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, h, wd, c) = x.nhwc()?;
    let k = kernel_extent(w, 3)?;
    let win = Window::new(h, wd, k, stride, padding)?;
    if dy.shape() != [n, win.out_h, win.out_w, c] {
        return Err(Error::shape(format!("depthwise upstream gradient has shape {:?}", dy.shape())));
    }

    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); c];
    for img in 0..n {
        let x_off = img * h * wd * c;
        for oh in 0..win.out_h {
            for ow in 0..win.out_w {
                let o = ((img * win.out_h + oh) * win.out_w + ow) * c;
                let g = &dys[o..o + c];
                if with_bias {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                for kh in 0..k {
                    let Some(ih) = win.in_row(oh, kh) else { continue };
                    for kw in 0..k {
                        let Some(iw) = win.in_col(ow, kw) else { continue };
                        let px = x_off + (ih * wd + iw) * c;
                        let tap = (kh * k + kw) * c;
                        for ch in 0..c {
                            dx[px + ch] += g[ch] * ws[tap + ch];
                            dw[tap + ch] += xs[px + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        with_bias.then(|| Tensor::from_parts(vec![c], db)),
    ))
}

//! 3x3 convolution with zero padding, written out as nine shifted taps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights `Cout x Cin x 3 x 3` and bias `Cout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            w: Tensor::zeros(&[cout, cin, 3, 3]),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn cout(&self) -> usize {
        self.w.dim(0)
    }

    pub fn cin(&self) -> usize {
        self.w.dim(1)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Valid output range along one axis for tap offset `d` in `{-1, 0, 1}`:
/// output positions `o` whose input `o + d` lies inside `0..len`.
fn span(d: isize, len: usize) -> (usize, usize) {
    match d {
        -1 => (1.min(len), len),
        1 => (0, len.saturating_sub(1)),
        _ => (0, len),
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, conv: &Conv3x3<T>, op: &'static str) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.dim(0) != conv.cin() {
        return Err(Error::Dimension {
            op,
            lhs: conv.w.dims().to_vec(),
            rhs: x.dims().to_vec(),
        });
    }
    if conv.w.dims()[2..] != [3, 3] || conv.b.dims() != [conv.cout()] {
        return Err(Error::Shape {
            dims: conv.w.dims().to_vec(),
            reason: "expected Cout x Cin x 3 x 3 weights and Cout bias".into(),
        });
    }
    Ok((x.dim(1), x.dim(2)))
}

/// `out[co][y][x] = b[co] + sum_{ci,dy,dx} w[co][ci][dy+1][dx+1] * in[ci][y+dy][x+dx]`,
/// reading zero outside the map.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, conv: &Conv3x3<T>) -> Result<Tensor<T>> {
    let (h, w) = check_input(x, conv, "conv3x3")?;
    let (cout, cin) = (conv.cout(), conv.cin());
    let plane = h * w;
    let mut out = vec![T::zero(); cout * plane];
    let xd = x.data();
    let wd = conv.w.data();
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = conv.b.data()[co]);
        for ci in 0..cin {
            let src = &xd[ci * plane..(ci + 1) * plane];
            for tap in 0..9 {
                let wv = wd[(co * cin + ci) * 9 + tap];
                let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let row = &mut o[y * w..(y + 1) * w];
                    let srow = &src[sy * w..(sy + 1) * w];
                    for xx in x0..x1 {
                        row[xx] = row[xx] + wv * srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, h, w], out)
}

/// Gradients `(d_x, d_conv)` of [`conv3x3`] given its input and the
/// upstream gradient.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    conv: &Conv3x3<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Conv3x3<T>)> {
    let (h, w) = check_input(x, conv, "conv3x3_backward")?;
    let (cout, cin) = (conv.cout(), conv.cin());
    if grad_out.dims() != [cout, h, w] {
        return Err(Error::Dimension {
            op: "conv3x3_backward",
            lhs: vec![cout, h, w],
            rhs: grad_out.dims().to_vec(),
        });
    }
    let plane = h * w;
    let xd = x.data();
    let gd = grad_out.data();
    let wd = conv.w.data();
    let mut gx = vec![T::zero(); cin * plane];
    let mut gw = vec![T::zero(); conv.w.len()];
    let mut gb = vec![T::zero(); cout];
    for co in 0..cout {
        let g = &gd[co * plane..(co + 1) * plane];
        gb[co] = g.iter().copied().sum();
        for ci in 0..cin {
            let src = &xd[ci * plane..(ci + 1) * plane];
            let dst = &mut gx[ci * plane..(ci + 1) * plane];
            for tap in 0..9 {
                let widx = (co * cin + ci) * 9 + tap;
                let wv = wd[widx];
                let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let grow = &g[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        acc = acc + grow[xx] * src[sy * w + sx];
                        dst[sy * w + sx] = dst[sy * w + sx] + wv * grow[xx];
                    }
                }
                gw[widx] = acc;
            }
        }
    }
    Ok((
        Tensor::new(&[cin, h, w], gx)?,
        Conv3x3 {
            w: Tensor::new(conv.w.dims(), gw)?,
            b: Tensor::new(&[cout], gb)?,
        },
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Pass the gradient where the forward output was positive.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    out.check_same("relu_backward", grad)?;
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(out.dims(), data)
}

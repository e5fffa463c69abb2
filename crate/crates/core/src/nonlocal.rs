//! Dense non-local block: every query attends to every spatial position.
//!
//! ```text
//! q = W_theta x,  k = W_phi x,  v = W_g x
//! A = softmax_rows(q^T k)            (N x N)
//! Y = v A^T                          (C x N)
//! Z = W_gamma Y + x
//! ```
//!
//! This is the reference the sparse block is checked against, so it is kept
//! deliberately plain.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{count, for_each_row, Exec, MulCounter};
use crate::tensor::{
    as_matrix, conv1x1, conv1x1_backward, matmul, softmax_backward_in_place, softmax_in_place,
    Scalar, Tensor,
};

/// Knobs shared by both attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionOpts {
    /// Scale logits by `1/sqrt(C/2)` before the softmax. Off by default.
    pub scale_logits: bool,
    pub exec: Exec,
}

impl AttentionOpts {
    pub fn with_exec(exec: Exec) -> Self {
        Self {
            exec,
            ..Self::default()
        }
    }

    pub(crate) fn logit_scale<T: Scalar>(&self, key_channels: usize) -> Option<T> {
        self.scale_logits
            .then(|| T::one() / T::from_f64(key_channels as f64).sqrt())
    }
}

/// Weights of the four 1x1 projections. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NlParams<T> {
    pub w_theta: Tensor<T>,
    pub b_theta: Tensor<T>,
    pub w_phi: Tensor<T>,
    pub b_phi: Tensor<T>,
    pub w_g: Tensor<T>,
    pub b_g: Tensor<T>,
    pub w_gamma: Tensor<T>,
    pub b_gamma: Tensor<T>,
}

impl<T: Scalar> NlParams<T> {
    /// All weights and biases zero. Requires an even channel count.
    pub fn zeros(channels: usize) -> Result<Self> {
        let half = half_channels(channels)?;
        Ok(Self {
            w_theta: Tensor::zeros(&[half, channels]),
            b_theta: Tensor::zeros(&[half]),
            w_phi: Tensor::zeros(&[half, channels]),
            b_phi: Tensor::zeros(&[half]),
            w_g: Tensor::zeros(&[channels, channels]),
            b_g: Tensor::zeros(&[channels]),
            w_gamma: Tensor::zeros(&[channels, channels]),
            b_gamma: Tensor::zeros(&[channels]),
        })
    }

    /// Gaussian projection weights with standard deviation `std`, zero
    /// biases, and a zero output projection so the block starts as the
    /// identity.
    pub fn init<R: Rng + ?Sized>(channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let half = half_channels(channels)?;
        let mut p = Self::zeros(channels)?;
        p.w_theta = Tensor::randn(&[half, channels], std, rng);
        p.w_phi = Tensor::randn(&[half, channels], std, rng);
        p.w_g = Tensor::randn(&[channels, channels], std, rng);
        Ok(p)
    }

    /// Every weight and bias Gaussian, including the output projection.
    pub fn random<R: Rng + ?Sized>(channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels)?;
        for (_, t) in p.groups_mut() {
            *t = Tensor::randn(t.dims(), std, rng);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w_g.dim(0)
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> [(&'static str, &Tensor<T>); 8] {
        [
            ("w_theta", &self.w_theta),
            ("b_theta", &self.b_theta),
            ("w_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
            ("w_gamma", &self.w_gamma),
            ("b_gamma", &self.b_gamma),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 8] {
        [
            ("w_theta", &mut self.w_theta),
            ("b_theta", &mut self.b_theta),
            ("w_phi", &mut self.w_phi),
            ("b_phi", &mut self.b_phi),
            ("w_g", &mut self.w_g),
            ("b_g", &mut self.b_g),
            ("w_gamma", &mut self.w_gamma),
            ("b_gamma", &mut self.b_gamma),
        ]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let c = self.channels();
        let half = half_channels(c)?;
        let expected: [(&str, &[usize]); 8] = [
            ("w_theta", &[half, c]),
            ("b_theta", &[half]),
            ("w_phi", &[half, c]),
            ("b_phi", &[half]),
            ("w_g", &[c, c]),
            ("b_g", &[c]),
            ("w_gamma", &[c, c]),
            ("b_gamma", &[c]),
        ];
        for ((name, t), (_, dims)) in self.groups().into_iter().zip(expected) {
            if t.dims() != dims {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn half_channels(channels: usize) -> Result<usize> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "channel count must be even and positive, got {channels}"
        )));
    }
    Ok(channels / 2)
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NlActivations<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Row-stochastic `N x N` affinity.
    pub affinity: Tensor<T>,
    pub y: Tensor<T>,
}

pub fn dense_affinity<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    dense_affinity_with(q, k, &AttentionOpts::default(), None)
}

/// `A[i][j] = softmax_j(q_i . k_j)`, one query row at a time.
pub fn dense_affinity_with<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    opts: &AttentionOpts,
    counter: Option<&MulCounter>,
) -> Result<Tensor<T>> {
    let (d, n) = q.matrix_dims("dense_affinity")?;
    if k.dims() != q.dims() {
        return Err(Error::Dimension {
            op: "dense_affinity",
            lhs: q.dims().to_vec(),
            rhs: k.dims().to_vec(),
        });
    }
    reject_non_finite("dense_affinity", q)?;
    reject_non_finite("dense_affinity", k)?;
    let q_t = q.transpose()?;
    let k_t = k.transpose()?;
    let scale = opts.logit_scale::<T>(d);
    let mut out = vec![T::zero(); n * n];
    for_each_row(opts.exec, &mut out, n, |i, row| {
        let qi = q_t.row(i);
        for (j, logit) in row.iter_mut().enumerate() {
            *logit = dot(qi, k_t.row(j));
        }
        if let Some(s) = scale {
            row.iter_mut().for_each(|v| *v = *v * s);
        }
        softmax_in_place(row);
        count(counter, n * d);
    });
    Tensor::new(&[n, n], out)
}

pub fn dense_aggregate<T: Scalar>(v: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    dense_aggregate_with(v, a, Exec::Sequential, None)
}

/// `Y = v A^T`: column `i` of `Y` is the affinity-weighted sum of value
/// columns, accumulated in ascending key order.
pub fn dense_aggregate_with<T: Scalar>(
    v: &Tensor<T>,
    a: &Tensor<T>,
    exec: Exec,
    counter: Option<&MulCounter>,
) -> Result<Tensor<T>> {
    let (c, n) = v.matrix_dims("dense_aggregate")?;
    if a.dims() != [n, n] {
        return Err(Error::Dimension {
            op: "dense_aggregate",
            lhs: v.dims().to_vec(),
            rhs: a.dims().to_vec(),
        });
    }
    let v_t = v.transpose()?;
    let mut y_t = vec![T::zero(); n * c];
    for_each_row(exec, &mut y_t, c, |i, out| {
        for (j, &weight) in a.row(i).iter().enumerate() {
            for (o, &val) in out.iter_mut().zip(v_t.row(j)) {
                *o = *o + weight * val;
            }
        }
        count(counter, n * c);
    });
    Tensor::new(&[n, c], y_t)?.transpose()
}

/// `Z = W_gamma y + b_gamma + x`.
pub fn fuse_residual<T: Scalar>(
    y: &Tensor<T>,
    w_gamma: &Tensor<T>,
    b_gamma: Option<&Tensor<T>>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let x2 = as_matrix(x)?;
    let mut z = conv1x1(y, w_gamma, b_gamma)?;
    if z.dims() != x2.dims() {
        return Err(Error::Dimension {
            op: "fuse_residual",
            lhs: z.dims().to_vec(),
            rhs: x.dims().to_vec(),
        });
    }
    z.add_assign(&x2)?;
    z.reshape(x.dims())
}

pub fn nl_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &NlParams<T>,
) -> Result<(Tensor<T>, NlActivations<T>)> {
    nl_forward_with(x, p, &AttentionOpts::default())
}

/// Full dense block. `x` may be `C x N` or `C x H x W`; `z` has the same
/// shape as `x`.
pub fn nl_forward_with<T: Scalar>(
    x: &Tensor<T>,
    p: &NlParams<T>,
    opts: &AttentionOpts,
) -> Result<(Tensor<T>, NlActivations<T>)> {
    let xm = as_matrix(x)?;
    half_channels(xm.dim(0))?;
    p.validate()?;
    if p.channels() != xm.dim(0) {
        return Err(Error::Dimension {
            op: "nl_forward",
            lhs: x.dims().to_vec(),
            rhs: p.w_g.dims().to_vec(),
        });
    }
    let q = conv1x1(&xm, &p.w_theta, Some(&p.b_theta))?;
    let k = conv1x1(&xm, &p.w_phi, Some(&p.b_phi))?;
    let v = conv1x1(&xm, &p.w_g, Some(&p.b_g))?;
    let affinity = dense_affinity_with(&q, &k, opts, None)?;
    let y = dense_aggregate_with(&v, &affinity, opts.exec, None)?;
    let z = fuse_residual(&y, &p.w_gamma, Some(&p.b_gamma), x)?;
    Ok((
        z,
        NlActivations {
            q,
            k,
            v,
            affinity,
            y,
        },
    ))
}

/// Attention core only (affinity + aggregation), for timing and counting.
pub fn dense_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    opts: &AttentionOpts,
    counter: Option<&MulCounter>,
) -> Result<Tensor<T>> {
    let a = dense_affinity_with(q, k, opts, counter)?;
    dense_aggregate_with(v, &a, opts.exec, counter)
}

pub fn nl_backward<T: Scalar>(
    acts: &NlActivations<T>,
    p: &NlParams<T>,
    x: &Tensor<T>,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, NlParams<T>)> {
    nl_backward_with(acts, p, x, grad_z, &AttentionOpts::default())
}

/// Reverse-mode gradients of the dense block with respect to `x` and every
/// parameter. `opts` must match the forward call.
pub fn nl_backward_with<T: Scalar>(
    acts: &NlActivations<T>,
    p: &NlParams<T>,
    x: &Tensor<T>,
    grad_z: &Tensor<T>,
    opts: &AttentionOpts,
) -> Result<(Tensor<T>, NlParams<T>)> {
    let xm = as_matrix(x)?;
    let (c, n) = xm.matrix_dims("nl_backward")?;
    let half = half_channels(c)?;
    p.validate()?;
    if grad_z.dims() != x.dims() {
        return Err(Error::Dimension {
            op: "nl_backward",
            lhs: x.dims().to_vec(),
            rhs: grad_z.dims().to_vec(),
        });
    }
    if acts.q.dims() != [half, n]
        || acts.k.dims() != [half, n]
        || acts.v.dims() != [c, n]
        || acts.affinity.dims() != [n, n]
        || acts.y.dims() != [c, n]
        || p.channels() != c
    {
        return Err(Error::Consistency(format!(
            "activations for q {:?} / affinity {:?} do not fit input {:?}",
            acts.q.dims(),
            acts.affinity.dims(),
            x.dims()
        )));
    }
    let gz = as_matrix(grad_z)?;

    let (grad_y, grad_w_gamma, grad_b_gamma) = conv1x1_backward(&acts.y, &p.w_gamma, &gz)?;

    // Y = v A^T
    let grad_v = matmul(&grad_y, &acts.affinity)?;
    let grad_a = matmul(&grad_y.transpose()?, &acts.v)?;

    let mut grad_logits = grad_a.into_data();
    for (i, g) in grad_logits.chunks_mut(n).enumerate() {
        softmax_backward_in_place(acts.affinity.row(i), g);
    }
    let mut grad_logits = Tensor::new(&[n, n], grad_logits)?;
    if let Some(s) = opts.logit_scale::<T>(half) {
        grad_logits = grad_logits.scale(s);
    }

    // logits = q^T k
    let grad_q = matmul(&acts.k, &grad_logits.transpose()?)?;
    let grad_k = matmul(&acts.q, &grad_logits)?;

    let (gx_theta, grad_w_theta, grad_b_theta) = conv1x1_backward(&xm, &p.w_theta, &grad_q)?;
    let (gx_phi, grad_w_phi, grad_b_phi) = conv1x1_backward(&xm, &p.w_phi, &grad_k)?;
    let (gx_g, grad_w_g, grad_b_g) = conv1x1_backward(&xm, &p.w_g, &grad_v)?;

    let mut grad_x = gz;
    grad_x.add_assign(&gx_theta)?;
    grad_x.add_assign(&gx_phi)?;
    grad_x.add_assign(&gx_g)?;

    Ok((
        grad_x.reshape(x.dims())?,
        NlParams {
            w_theta: grad_w_theta,
            b_theta: grad_b_theta,
            w_phi: grad_w_phi,
            b_phi: grad_b_phi,
            w_g: grad_w_g,
            b_g: grad_b_g,
            w_gamma: grad_w_gamma,
            b_gamma: grad_b_gamma,
        },
    ))
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn reject_non_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.first_non_finite() {
        Some(index) => Err(Error::NumericInput { op, index }),
        None => Ok(()),
    }
}

//! Sparse non-local block.
//!
//! Each query attends to `K` keys sampled around it instead of all `N`
//! positions:
//!
//! ```text
//! P       = W_offset x                      (2K x N offsets, pixels)
//! t_is    = base_is + P[:, i]               (sample coordinates)
//! kbar_is = bilinear(k, t_is), vbar_is = bilinear(v, t_is)
//! S[i]    = softmax_s(q_i . kbar_is)        (N x K)
//! Y[:, i] = sum_s S[i][s] vbar_is
//! Z       = W_gamma Y + x
//! ```
//!
//! Per query the work is `O(KC)`, so the block costs `O(NKC)` against the
//! dense block's `O(N^2 C)`.

mod bilinear;
mod grid;

pub use bilinear::{bilinear_sample, Taps};
pub use grid::{apply_offsets, base_grid, mean_offset_norm, offset_head, GridSpec, SamplingGrid};

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::{count, for_each_row, for_each_row4, MulCounter};
use crate::nonlocal::{
    fuse_residual, half_channels, reject_non_finite, AttentionOpts, NlParams,
};
use crate::tensor::{
    as_matrix, conv1x1, conv1x1_backward, softmax_backward_in_place, softmax_in_place, Scalar,
    Shape2D, Tensor,
};

/// Projection weights plus the offset head. Also the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct SnlParams<T> {
    pub attn: NlParams<T>,
    /// `2K x C`
    pub w_offset: Tensor<T>,
    /// `2K`
    pub b_offset: Tensor<T>,
}

impl<T: Scalar> SnlParams<T> {
    pub fn zeros(channels: usize, k: usize) -> Result<Self> {
        Ok(Self {
            attn: NlParams::zeros(channels)?,
            w_offset: Tensor::zeros(&[2 * k, channels]),
            b_offset: Tensor::zeros(&[2 * k]),
        })
    }

    /// Gaussian query/key/value projections; output projection and offset
    /// head start at zero, so the block is the identity and samples the
    /// regular grid.
    pub fn init<R: Rng + ?Sized>(channels: usize, k: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: NlParams::init(channels, std, rng)?,
            w_offset: Tensor::zeros(&[2 * k, channels]),
            b_offset: Tensor::zeros(&[2 * k]),
        })
    }

    /// Every group Gaussian with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(channels: usize, k: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, k)?;
        for (_, t) in p.groups_mut() {
            *t = Tensor::randn(t.dims(), std, rng);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.attn.channels()
    }

    /// Samples per query implied by the offset head.
    pub fn k(&self) -> usize {
        self.w_offset.dim(0) / 2
    }

    pub fn groups(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut g = self.attn.groups().to_vec();
        g.push(("w_offset", &self.w_offset));
        g.push(("b_offset", &self.b_offset));
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut g: Vec<_> = self.attn.groups_mut().into_iter().collect();
        g.push(("w_offset", &mut self.w_offset));
        g.push(("b_offset", &mut self.b_offset));
        g
    }

    fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let c = self.channels();
        let rows = self.w_offset.dim(0);
        if self.w_offset.dims() != [rows, c] || !rows.is_multiple_of(2) || self.b_offset.dims() != [rows] {
            return Err(Error::Config(format!(
                "offset head {:?} / bias {:?} must be 2K x {c} / 2K",
                self.w_offset.dims(),
                self.b_offset.dims()
            )));
        }
        Ok(())
    }
}

/// Where each query samples: the learned offsets and the resulting
/// coordinates.
#[derive(Debug, Clone)]
pub struct SampleField<T> {
    /// `2K x N`, `(dx, dy)` interleaved per slot.
    pub offsets: Tensor<T>,
    /// `N x K x 2`, `(t_x, t_y)` in pixels.
    pub coords: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SnlActivations<T> {
    pub shape: Shape2D,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub field: SampleField<T>,
    /// `N x C/2 x K`
    pub sampled_k: Tensor<T>,
    /// `N x C x K`
    pub sampled_v: Tensor<T>,
    /// Row-stochastic `N x K`.
    pub affinity: Tensor<T>,
    pub y: Tensor<T>,
}

/// Output of the attention core: gathered keys/values, affinity and the
/// aggregated context.
#[derive(Debug, Clone)]
pub struct SnlCore<T> {
    pub sampled_k: Tensor<T>,
    pub sampled_v: Tensor<T>,
    pub affinity: Tensor<T>,
    pub y: Tensor<T>,
}

/// Logits and softmax for one query: `out[s] = softmax_s(q_i . kbar[:, s])`.
/// `kbar` is the query's `C/2 x K` block; each logit accumulates in
/// ascending channel order.
fn affinity_row<T: Scalar>(q: &[T], i: usize, n: usize, kbar: &[T], out: &mut [T], scale: Option<T>) {
    let k = out.len();
    out.iter_mut().for_each(|v| *v = T::zero());
    for (c, kc) in kbar.chunks(k).enumerate() {
        let qc = q[c * n + i];
        for (o, &kv) in out.iter_mut().zip(kc) {
            *o = *o + qc * kv;
        }
    }
    if let Some(s) = scale {
        out.iter_mut().for_each(|v| *v = *v * s);
    }
    softmax_in_place(out);
}

/// `y[c] = sum_s weights[s] * vbar[c][s]`, ascending `s`.
fn aggregate_row<T: Scalar>(weights: &[T], vbar: &[T], y: &mut [T]) {
    let k = weights.len();
    for (yc, vc) in y.iter_mut().zip(vbar.chunks(k)) {
        let mut acc = T::zero();
        for (&w, &v) in weights.iter().zip(vc) {
            acc = acc + w * v;
        }
        *yc = acc;
    }
}

pub fn sparse_affinity<T: Scalar>(q: &Tensor<T>, sampled_k: &Tensor<T>) -> Result<Tensor<T>> {
    sparse_affinity_with(q, sampled_k, &AttentionOpts::default(), None)
}

/// `S[i][s] = softmax_s(q_i . kbar_is)` from pre-gathered keys
/// (`N x C/2 x K`).
pub fn sparse_affinity_with<T: Scalar>(
    q: &Tensor<T>,
    sampled_k: &Tensor<T>,
    opts: &AttentionOpts,
    counter: Option<&MulCounter>,
) -> Result<Tensor<T>> {
    let (d, n) = q.matrix_dims("sparse_affinity")?;
    if sampled_k.rank() != 3 || sampled_k.dim(0) != n || sampled_k.dim(1) != d {
        return Err(Error::Dimension {
            op: "sparse_affinity",
            lhs: q.dims().to_vec(),
            rhs: sampled_k.dims().to_vec(),
        });
    }
    reject_non_finite("sparse_affinity", q)?;
    reject_non_finite("sparse_affinity", sampled_k)?;
    let k = sampled_k.dim(2);
    let scale = opts.logit_scale::<T>(d);
    let mut out = vec![T::zero(); n * k];
    for_each_row(opts.exec, &mut out, k, |i, row| {
        affinity_row(q.data(), i, n, &sampled_k.data()[i * d * k..(i + 1) * d * k], row, scale);
        count(counter, k * d);
    });
    Tensor::new(&[n, k], out)
}

/// Aggregate gathered values (`N x C x K`) with a sparse affinity into a
/// `C x N` context map.
pub fn sparse_aggregate<T: Scalar>(
    sampled_v: &Tensor<T>,
    s: &Tensor<T>,
    opts: &AttentionOpts,
    counter: Option<&MulCounter>,
) -> Result<Tensor<T>> {
    let (n, k) = s.matrix_dims("sparse_aggregate")?;
    if sampled_v.rank() != 3 || sampled_v.dim(0) != n || sampled_v.dim(2) != k {
        return Err(Error::Dimension {
            op: "sparse_aggregate",
            lhs: s.dims().to_vec(),
            rhs: sampled_v.dims().to_vec(),
        });
    }
    let c = sampled_v.dim(1);
    let mut y_t = vec![T::zero(); n * c];
    for_each_row(opts.exec, &mut y_t, c, |i, y| {
        aggregate_row(s.row(i), &sampled_v.data()[i * c * k..(i + 1) * c * k], y);
        count(counter, k * c);
    });
    Tensor::new(&[n, c], y_t)?.transpose()
}

/// Aggregate, then fuse: `Z = W_gamma Y + b_gamma + x`.
pub fn sparse_aggregate_fuse<T: Scalar>(
    sampled_v: &Tensor<T>,
    s: &Tensor<T>,
    w_gamma: &Tensor<T>,
    b_gamma: Option<&Tensor<T>>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let y = sparse_aggregate(sampled_v, s, &AttentionOpts::default(), None)?;
    fuse_residual(&y, w_gamma, b_gamma, x)
}

/// Gather keys and values at `coords`, build the sparse affinity and
/// aggregate, one query at a time.
pub fn snl_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    coords: &Tensor<T>,
    shape: Shape2D,
    opts: &AttentionOpts,
    counter: Option<&MulCounter>,
) -> Result<SnlCore<T>> {
    let (d, n) = q.matrix_dims("snl_core")?;
    let (c, nv) = v.matrix_dims("snl_core")?;
    if k.dims() != q.dims() || nv != n || shape.n() != n {
        return Err(Error::Dimension {
            op: "snl_core",
            lhs: q.dims().to_vec(),
            rhs: v.dims().to_vec(),
        });
    }
    if coords.rank() != 3 || coords.dim(0) != n || coords.dim(2) != 2 {
        return Err(Error::Dimension {
            op: "snl_core coords",
            lhs: vec![n, 0, 2],
            rhs: coords.dims().to_vec(),
        });
    }
    if let Some(index) = coords.data().iter().position(|t| t.is_nan()) {
        return Err(Error::NumericInput {
            op: "snl_core",
            index,
        });
    }
    reject_non_finite("snl_core", q)?;
    reject_non_finite("snl_core", k)?;
    let kk = coords.dim(1);
    let scale = opts.logit_scale::<T>(d);
    let mut sk = vec![T::zero(); n * d * kk];
    let mut sv = vec![T::zero(); n * c * kk];
    let mut aff = vec![T::zero(); n * kk];
    let mut y_t = vec![T::zero(); n * c];
    // Pixel-major copies so each corner read is one contiguous run.
    let (k_t, v_t) = (k.transpose()?, v.transpose()?);
    let (kd, vd, cd) = (k_t.data(), v_t.data(), coords.data());
    for_each_row4(
        opts.exec,
        [
            (&mut sk, d * kk),
            (&mut sv, c * kk),
            (&mut aff, kk),
            (&mut y_t, c),
        ],
        |i, sk_row, sv_row, s_row, y_row| {
            let mut kbuf = vec![T::zero(); d];
            let mut vbuf = vec![T::zero(); c];
            for s in 0..kk {
                let at = (i * kk + s) * 2;
                let taps = Taps::new(cd[at], cd[at + 1], shape);
                taps.read_rows(kd, &mut kbuf);
                taps.read_rows(vd, &mut vbuf);
                for (ch, &val) in kbuf.iter().enumerate() {
                    sk_row[ch * kk + s] = val;
                }
                for (ch, &val) in vbuf.iter().enumerate() {
                    sv_row[ch * kk + s] = val;
                }
            }
            affinity_row(q.data(), i, n, sk_row, s_row, scale);
            count(counter, kk * d);
            aggregate_row(s_row, sv_row, y_row);
            count(counter, kk * c);
        },
    );
    Ok(SnlCore {
        sampled_k: Tensor::new(&[n, d, kk], sk)?,
        sampled_v: Tensor::new(&[n, c, kk], sv)?,
        affinity: Tensor::new(&[n, kk], aff)?,
        y: Tensor::new(&[n, c], y_t)?.transpose()?,
    })
}

fn feature_shape<T: Scalar>(x: &Tensor<T>) -> Result<Shape2D> {
    if x.rank() != 3 {
        return Err(Error::Shape {
            dims: x.dims().to_vec(),
            reason: "sparse block expects a C x H x W feature map".into(),
        });
    }
    Shape2D::new(x.dim(1), x.dim(2))
}

pub fn snl_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &SnlParams<T>,
    grid: SamplingGrid,
) -> Result<(Tensor<T>, SnlActivations<T>)> {
    snl_forward_with(x, p, grid, &AttentionOpts::default())
}

/// Full sparse block on a `C x H x W` map.
pub fn snl_forward_with<T: Scalar>(
    x: &Tensor<T>,
    p: &SnlParams<T>,
    grid: SamplingGrid,
    opts: &AttentionOpts,
) -> Result<(Tensor<T>, SnlActivations<T>)> {
    let shape = feature_shape(x)?;
    let xm = as_matrix(x)?;
    half_channels(xm.dim(0))?;
    p.validate()?;
    if p.channels() != xm.dim(0) {
        return Err(Error::Dimension {
            op: "snl_forward",
            lhs: x.dims().to_vec(),
            rhs: p.attn.w_g.dims().to_vec(),
        });
    }
    let k_samples = grid.validate(shape)?;
    if p.k() != k_samples {
        return Err(Error::Config(format!(
            "offset head produces {} samples but the grid has {k_samples}",
            p.k()
        )));
    }
    let a = &p.attn;
    let q = conv1x1(&xm, &a.w_theta, Some(&a.b_theta))?;
    let k = conv1x1(&xm, &a.w_phi, Some(&a.b_phi))?;
    let v = conv1x1(&xm, &a.w_g, Some(&a.b_g))?;
    let offsets = offset_head(&xm, &p.w_offset, Some(&p.b_offset), k_samples)?;
    let coords = apply_offsets(&base_grid(shape, grid)?, &offsets)?;
    let core = snl_core(&q, &k, &v, &coords, shape, opts, None)?;
    let z = fuse_residual(&core.y, &a.w_gamma, Some(&a.b_gamma), x)?;
    Ok((
        z,
        SnlActivations {
            shape,
            q,
            k,
            v,
            field: SampleField { offsets, coords },
            sampled_k: core.sampled_k,
            sampled_v: core.sampled_v,
            affinity: core.affinity,
            y: core.y,
        },
    ))
}

pub fn snl_backward<T: Scalar>(
    acts: &SnlActivations<T>,
    p: &SnlParams<T>,
    x: &Tensor<T>,
    grad_z: &Tensor<T>,
) -> Result<(Tensor<T>, SnlParams<T>)> {
    snl_backward_with(acts, p, x, grad_z, &AttentionOpts::default())
}

/// Reverse-mode gradients of the sparse block. Gradients reach the offset
/// head through the derivative of the bilinear weights with respect to the
/// sample coordinates.
pub fn snl_backward_with<T: Scalar>(
    acts: &SnlActivations<T>,
    p: &SnlParams<T>,
    x: &Tensor<T>,
    grad_z: &Tensor<T>,
    opts: &AttentionOpts,
) -> Result<(Tensor<T>, SnlParams<T>)> {
    let shape = feature_shape(x)?;
    let xm = as_matrix(x)?;
    let (c, n) = xm.matrix_dims("snl_backward")?;
    let d = half_channels(c)?;
    p.validate()?;
    if grad_z.dims() != x.dims() {
        return Err(Error::Dimension {
            op: "snl_backward",
            lhs: x.dims().to_vec(),
            rhs: grad_z.dims().to_vec(),
        });
    }
    let kk = p.k();
    if acts.shape != shape
        || p.channels() != c
        || acts.q.dims() != [d, n]
        || acts.k.dims() != [d, n]
        || acts.v.dims() != [c, n]
        || acts.field.offsets.dims() != [2 * kk, n]
        || acts.field.coords.dims() != [n, kk, 2]
        || acts.sampled_k.dims() != [n, d, kk]
        || acts.sampled_v.dims() != [n, c, kk]
        || acts.affinity.dims() != [n, kk]
        || acts.y.dims() != [c, n]
    {
        return Err(Error::Consistency(format!(
            "activations for a {}x{} map with affinity {:?} do not fit input {:?}",
            acts.shape.height,
            acts.shape.width,
            acts.affinity.dims(),
            x.dims()
        )));
    }
    let gz = as_matrix(grad_z)?;
    let a = &p.attn;
    let (grad_y, grad_w_gamma, grad_b_gamma) = conv1x1_backward(&acts.y, &a.w_gamma, &gz)?;
    let grad_y_t = grad_y.transpose()?;
    let scale = opts.logit_scale::<T>(d);

    // Per-query adjoints, laid out as [gq (d) | g_kbar (d*K) | g_vbar (c*K) | g_coord (2K)].
    let stride = d + d * kk + c * kk + 2 * kk;
    let mut per_query = vec![T::zero(); n * stride];
    let (k_t, v_t) = (acts.k.transpose()?, acts.v.transpose()?);
    let (qd, kd, vd) = (acts.q.data(), k_t.data(), v_t.data());
    let coords = acts.field.coords.data();
    for_each_row(opts.exec, &mut per_query, stride, |i, row| {
        let (gq, rest) = row.split_at_mut(d);
        let (gsk, rest) = rest.split_at_mut(d * kk);
        let (gsv, gcoord) = rest.split_at_mut(c * kk);
        let s_row = acts.affinity.row(i);
        let sk = &acts.sampled_k.data()[i * d * kk..(i + 1) * d * kk];
        let sv = &acts.sampled_v.data()[i * c * kk..(i + 1) * c * kk];
        let gy = grad_y_t.row(i);

        let mut g_logit = vec![T::zero(); kk];
        for (ch, (vc, gvc)) in sv.chunks(kk).zip(gsv.chunks_mut(kk)).enumerate() {
            for s in 0..kk {
                g_logit[s] = g_logit[s] + gy[ch] * vc[s];
                gvc[s] = gy[ch] * s_row[s];
            }
        }
        softmax_backward_in_place(s_row, &mut g_logit);
        if let Some(sc) = scale {
            g_logit.iter_mut().for_each(|g| *g = *g * sc);
        }
        for (ch, (kc, gkc)) in sk.chunks(kk).zip(gsk.chunks_mut(kk)).enumerate() {
            let qc = qd[ch * n + i];
            let mut acc = T::zero();
            for s in 0..kk {
                acc = acc + g_logit[s] * kc[s];
                gkc[s] = g_logit[s] * qc;
            }
            gq[ch] = acc;
        }
        let (mut kdx, mut kdy) = (vec![T::zero(); d], vec![T::zero(); d]);
        let (mut vdx, mut vdy) = (vec![T::zero(); c], vec![T::zero(); c]);
        for s in 0..kk {
            let at = (i * kk + s) * 2;
            let taps = Taps::new(coords[at], coords[at + 1], shape);
            taps.read_grad_rows(kd, &mut kdx, &mut kdy);
            taps.read_grad_rows(vd, &mut vdx, &mut vdy);
            let (mut gx, mut gyc) = (T::zero(), T::zero());
            for ch in 0..d {
                gx = gx + gsk[ch * kk + s] * kdx[ch];
                gyc = gyc + gsk[ch * kk + s] * kdy[ch];
            }
            for ch in 0..c {
                gx = gx + gsv[ch * kk + s] * vdx[ch];
                gyc = gyc + gsv[ch * kk + s] * vdy[ch];
            }
            gcoord[2 * s] = gx;
            gcoord[2 * s + 1] = gyc;
        }
    });

    // Scatter into the shared key/value maps in query order.
    let mut grad_q = vec![T::zero(); d * n];
    // Pixel-major accumulators, transposed back afterwards.
    let mut grad_k_t = vec![T::zero(); n * d];
    let mut grad_v_t = vec![T::zero(); n * c];
    let (mut kcol, mut vcol) = (vec![T::zero(); d], vec![T::zero(); c]);
    let mut grad_p = vec![T::zero(); 2 * kk * n];
    for (i, row) in per_query.chunks(stride).enumerate() {
        let (gq, rest) = row.split_at(d);
        let (gsk, rest) = rest.split_at(d * kk);
        let (gsv, gcoord) = rest.split_at(c * kk);
        for ch in 0..d {
            grad_q[ch * n + i] = gq[ch];
        }
        for s in 0..kk {
            let at = (i * kk + s) * 2;
            let taps = Taps::new(coords[at], coords[at + 1], shape);
            for (ch, g) in kcol.iter_mut().enumerate() {
                *g = gsk[ch * kk + s];
            }
            for (ch, g) in vcol.iter_mut().enumerate() {
                *g = gsv[ch * kk + s];
            }
            taps.scatter_rows(&mut grad_k_t, &kcol);
            taps.scatter_rows(&mut grad_v_t, &vcol);
            grad_p[2 * s * n + i] = gcoord[2 * s];
            grad_p[(2 * s + 1) * n + i] = gcoord[2 * s + 1];
        }
    }
    let grad_q = Tensor::new(&[d, n], grad_q)?;
    let grad_k = Tensor::new(&[n, d], grad_k_t)?.transpose()?;
    let grad_v = Tensor::new(&[n, c], grad_v_t)?.transpose()?;
    let grad_p = Tensor::new(&[2 * kk, n], grad_p)?;

    let (gx_theta, grad_w_theta, grad_b_theta) = conv1x1_backward(&xm, &a.w_theta, &grad_q)?;
    let (gx_phi, grad_w_phi, grad_b_phi) = conv1x1_backward(&xm, &a.w_phi, &grad_k)?;
    let (gx_g, grad_w_g, grad_b_g) = conv1x1_backward(&xm, &a.w_g, &grad_v)?;
    let (gx_off, grad_w_offset, grad_b_offset) = conv1x1_backward(&xm, &p.w_offset, &grad_p)?;

    let mut grad_x = gz;
    for g in [&gx_theta, &gx_phi, &gx_g, &gx_off] {
        grad_x.add_assign(g)?;
    }
    Ok((
        grad_x.reshape(x.dims())?,
        SnlParams {
            attn: NlParams {
                w_theta: grad_w_theta,
                b_theta: grad_b_theta,
                w_phi: grad_w_phi,
                b_phi: grad_b_phi,
                w_g: grad_w_g,
                b_g: grad_b_g,
                w_gamma: grad_w_gamma,
                b_gamma: grad_b_gamma,
            },
            w_offset: grad_w_offset,
            b_offset: grad_b_offset,
        },
    ))
}

/// One sampled key of one query, for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpRow {
    pub query: usize,
    pub slot: usize,
    pub tx: f64,
    pub ty: f64,
    pub weight: f64,
}

/// Flatten sample coordinates and affinities into one row per
/// `(query, slot)`.
pub fn attention_dump<T: Scalar>(acts: &SnlActivations<T>) -> Vec<DumpRow> {
    let (n, k) = (acts.affinity.dim(0), acts.affinity.dim(1));
    let coords = acts.field.coords.data();
    let mut rows = Vec::with_capacity(n * k);
    for query in 0..n {
        for slot in 0..k {
            let at = (query * k + slot) * 2;
            rows.push(DumpRow {
                query,
                slot,
                tx: coords[at].as_f64(),
                ty: coords[at + 1].as_f64(),
                weight: acts.affinity.at(query, slot).as_f64(),
            });
        }
    }
    rows
}

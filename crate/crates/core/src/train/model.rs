//! Toy segmentation network: two 3x3 conv + ReLU layers, a context block
//! and a 1x1 classifier.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::nonlocal::AttentionOpts;
use crate::sparse::{mean_offset_norm, snl_backward_with, snl_forward_with, GridSpec, SamplingGrid, SnlActivations, SnlParams};
use crate::tensor::{conv1x1, conv1x1_backward, Scalar, Tensor};

use super::conv::{conv3x3, conv3x3_backward, relu, relu_backward, Conv3x3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Sparse non-local block with learned offsets.
    Snl,
    /// Residual 3x3 convolution in place of the attention block.
    Local,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Snl => "snl",
            ModelKind::Local => "local",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snl" => Ok(ModelKind::Snl),
            "local" => Ok(ModelKind::Local),
            other => Err(Error::Config(format!("unknown model {other:?}, expected snl or local"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    Snl { params: SnlParams<T>, grid: GridSpec },
    /// `z = x + conv3x3(x)`
    Local(Conv3x3<T>),
}

/// Network parameters; the same struct holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
    pub block: Block<T>,
    /// `L x C`
    pub w_cls: Tensor<T>,
    /// `L`
    pub b_cls: Tensor<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    x: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    z: Tensor<T>,
    snl: Option<SnlActivations<T>>,
}

impl<T> Cache<T> {
    pub fn snl_activations(&self) -> Option<&SnlActivations<T>> {
        self.snl.as_ref()
    }
}

/// Loss, accuracy and gradients for one image.
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    /// Summed (not averaged) cross-entropy over pixels.
    pub loss: f64,
    pub correct: usize,
    pub mean_abs_offset: f64,
    pub grads: Model<T>,
}

fn he<T: Scalar, R: Rng + ?Sized>(cout: usize, cin: usize, rng: &mut R) -> Conv3x3<T> {
    Conv3x3 {
        w: Tensor::randn(&[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), rng),
        b: Tensor::zeros(&[cout]),
    }
}

impl<T: Scalar> Model<T> {
    /// He-initialised convolutions and classifier. The context block starts
    /// as the identity: zero output projection and offsets for the sparse
    /// block, a zero kernel for the local one.
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        classes: usize,
        width: usize,
        grid: GridSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::Config(format!("width must be even and positive, got {width}")));
        }
        let conv1 = he(width, classes, rng);
        let conv2 = he(width, width, rng);
        let block = match kind {
            ModelKind::Snl => Block::Snl {
                params: SnlParams::init(width, grid.k(), (1.0 / width as f64).sqrt(), rng)?,
                grid,
            },
            ModelKind::Local => Block::Local(Conv3x3::zeros(width, width)),
        };
        Ok(Self {
            conv1,
            conv2,
            block,
            w_cls: Tensor::randn(&[classes, width], (1.0 / width as f64).sqrt(), rng),
            b_cls: Tensor::zeros(&[classes]),
        })
    }

    /// Rebuild a model from tensors in [`Model::tensors`] order, as written
    /// by the trainer. Eight tensors make a local model, sixteen a sparse
    /// one, whose window must be `grid`.
    pub fn from_tensors(tensors: Vec<Tensor<T>>, grid: GridSpec) -> Result<Self> {
        let kind = match tensors.len() {
            8 => ModelKind::Local,
            16 => ModelKind::Snl,
            n => return Err(Error::Config(format!("a model bundle has 8 or 16 tensors, got {n}"))),
        };
        let conv1 = tensors[0].dims();
        if conv1.len() != 4 {
            return Err(Error::Shape {
                dims: conv1.to_vec(),
                reason: "first tensor must be the Cout x Cin x 3 x 3 stem kernel".into(),
            });
        }
        let (width, classes) = (conv1[0], conv1[1]);
        let grid = match kind {
            ModelKind::Snl => {
                let k = tensors[13].len() / 2;
                if k != grid.k() {
                    return Err(Error::Config(format!(
                        "bundle samples {k} points per query but the window is {}x{}",
                        grid.kh, grid.kw
                    )));
                }
                grid
            }
            ModelKind::Local => grid,
        };
        let mut model = Self::init(kind, classes, width, grid, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (slot, t) in model.tensors_mut().into_iter().zip(tensors) {
            if slot.dims() != t.dims() {
                return Err(Error::Dimension {
                    op: "Model::from_tensors",
                    lhs: slot.dims().to_vec(),
                    rhs: t.dims().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        match self.block {
            Block::Snl { .. } => ModelKind::Snl,
            Block::Local(_) => ModelKind::Local,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("conv1.w", &self.conv1.w),
            ("conv1.b", &self.conv1.b),
            ("conv2.w", &self.conv2.w),
            ("conv2.b", &self.conv2.b),
        ];
        match &self.block {
            Block::Snl { params, .. } => out.extend(params.groups()),
            Block::Local(c) => out.extend([("local.w", &c.w), ("local.b", &c.b)]),
        }
        out.push(("cls.w", &self.w_cls));
        out.push(("cls.b", &self.b_cls));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
        ];
        match &mut self.block {
            Block::Snl { params, .. } => out.extend(params.groups_mut().into_iter().map(|(_, t)| t)),
            Block::Local(c) => out.extend([&mut c.w, &mut c.b]),
        }
        out.push(&mut self.w_cls);
        out.push(&mut self.b_cls);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            *t = Tensor::zeros(t.dims());
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters in the context block alone.
    pub fn block_param_count(&self) -> usize {
        match &self.block {
            Block::Snl { params, .. } => params.groups().iter().map(|(_, t)| t.len()).sum(),
            Block::Local(c) => c.param_count(),
        }
    }

    /// Accumulate `other` into `self`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        let others: Vec<&Tensor<T>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::Config("models have different block types".into()));
        }
        for (a, b) in mine.into_iter().zip(others) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Backbone output: the features the context block sees.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h1 = relu(&conv3x3(x, &self.conv1)?);
        Ok(relu(&conv3x3(&h1, &self.conv2)?))
    }

    /// Class logits `L x N` for one `L x H x W` input.
    pub fn forward(&self, x: &Tensor<T>, opts: &AttentionOpts) -> Result<(Tensor<T>, Cache<T>)> {
        let h1 = relu(&conv3x3(x, &self.conv1)?);
        let h2 = relu(&conv3x3(&h1, &self.conv2)?);
        let (z, snl) = match &self.block {
            Block::Snl { params, grid } => {
                let (z, acts) = snl_forward_with(&h2, params, SamplingGrid::Window(*grid), opts)?;
                (z, Some(acts))
            }
            Block::Local(c) => (h2.add(&conv3x3(&h2, c)?)?, None),
        };
        let logits = conv1x1(&z, &self.w_cls, Some(&self.b_cls))?;
        Ok((
            logits,
            Cache {
                x: x.clone(),
                h1,
                h2,
                z,
                snl,
            },
        ))
    }

    pub fn backward(&self, cache: &Cache<T>, grad_logits: &Tensor<T>, opts: &AttentionOpts) -> Result<Self> {
        let (gz, gw_cls, gb_cls) = conv1x1_backward(&cache.z, &self.w_cls, grad_logits)?;
        let gz = gz.reshape(cache.z.dims())?;
        let (gh2, block) = match (&self.block, &cache.snl) {
            (Block::Snl { params, grid }, Some(acts)) => {
                let (gh2, gp) = snl_backward_with(acts, params, &cache.h2, &gz, opts)?;
                (gh2, Block::Snl { params: gp, grid: *grid })
            }
            (Block::Local(c), None) => {
                let (gconv, gc) = conv3x3_backward(&cache.h2, c, &gz)?;
                (gz.add(&gconv)?, Block::Local(gc))
            }
            _ => return Err(Error::Consistency("cache does not match the model's block".into())),
        };
        let ga2 = relu_backward(&cache.h2, &gh2)?;
        let (gh1, conv2) = conv3x3_backward(&cache.h1, &self.conv2, &ga2)?;
        let ga1 = relu_backward(&cache.h1, &gh1)?;
        let (_, conv1) = conv3x3_backward(&cache.x, &self.conv1, &ga1)?;
        Ok(Self {
            conv1,
            conv2,
            block,
            w_cls: gw_cls,
            b_cls: gb_cls,
        })
    }

    /// Forward, softmax cross-entropy against `labels` and backward. The
    /// logit gradient is multiplied by `scale`, so passing `1 / (B * N)`
    /// yields the gradient of the batch-mean loss.
    pub fn loss_and_grad(
        &self,
        x: &Tensor<T>,
        labels: &[u8],
        scale: f64,
        opts: &AttentionOpts,
    ) -> Result<SampleGrad<T>> {
        let (logits, cache) = self.forward(x, opts)?;
        let (loss, correct, grad) = cross_entropy(&logits, labels, scale)?;
        let mean_abs_offset = cache
            .snl
            .as_ref()
            .map_or(0.0, |a| mean_offset_norm(&a.field.offsets));
        let grads = self.backward(&cache, &grad, opts)?;
        Ok(SampleGrad {
            loss,
            correct,
            mean_abs_offset,
            grads,
        })
    }
}

/// Index of the largest logit in column `i` of an `L x N` matrix; the first
/// wins ties.
pub fn argmax_column<T: Scalar>(logits: &Tensor<T>, i: usize) -> usize {
    let (l, n) = (logits.dim(0), logits.dim(1));
    let d = logits.data();
    (1..l).fold(0, |best, c| if d[c * n + i] > d[best * n + i] { c } else { best })
}

/// Summed softmax cross-entropy over the columns of `L x N` logits, the
/// number of correctly classified pixels, and `scale * (softmax - onehot)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8], scale: f64) -> Result<(f64, usize, Tensor<T>)> {
    let (l, n) = logits.matrix_dims("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: vec![l, n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= l) {
        return Err(Error::Range(format!("label {bad} with only {l} classes")));
    }
    let d = logits.data();
    let mut grad = vec![T::zero(); l * n];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        let max = (0..l).map(|c| d[c * n + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..l).map(|c| (d[c * n + i].as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - d[label * n + i].as_f64();
        for c in 0..l {
            let p = (d[c * n + i].as_f64() - lse).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad[c * n + i] = T::from_f64(scale * (p - target));
        }
        if argmax_column(logits, i) == label {
            correct += 1;
        }
    }
    Ok((loss, correct, Tensor::new(&[l, n], grad)?))
}

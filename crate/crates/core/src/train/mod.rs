//! Toy trainer: the beacon segmentation task, a small network with either
//! the sparse block or a local stand-in, and momentum SGD under the poly
//! schedule.

pub mod conv;
pub mod data;
pub mod model;
pub mod optim;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{map_indices, Exec};
use crate::nonlocal::AttentionOpts;
use crate::sparse::GridSpec;
use crate::tensor::Tensor;

pub use conv::{conv3x3, conv3x3_backward, Conv3x3};
pub use data::{derive_seed, gen_beacon_dataset, BeaconSample, BeaconSpec};
pub use model::{cross_entropy, Block, Model, ModelKind};
pub use optim::{poly_lr, sgd_step, SgdConfig};

/// Everything that defines a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Images per iteration.
    pub batch: usize,
    pub seed: u64,
    /// Image side length.
    pub size: usize,
    pub classes: usize,
    /// Feature channels of the backbone and block.
    pub width: usize,
    /// Sampling window of the sparse block.
    pub grid: GridSpec,
    pub model: ModelKind,
    /// Held-out images for the final accuracy.
    pub eval_size: usize,
    /// Per-image gradients in a batch may run in parallel; they are always
    /// summed in image order.
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            batch: 8,
            seed: 0,
            size: 32,
            classes: 3,
            width: 16,
            grid: GridSpec { kh: 7, kw: 7 },
            model: ModelKind::Snl,
            eval_size: 64,
            exec: Exec::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn beacon_spec(&self) -> Result<BeaconSpec> {
        BeaconSpec::new(self.size, self.size, self.classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.beacon_spec()?;
        if self.batch == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch and eval_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    /// Batch-mean cross-entropy.
    pub loss: f64,
    /// Batch pixel accuracy.
    pub accuracy: f64,
    /// Mean offset length over the batch, in pixels; 0 for the local model.
    pub mean_abs_offset: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iter,lr,loss,accuracy,mean_abs_offset";

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:e},{:.6},{:.6},{:.6}",
                r.iter, r.lr, r.loss, r.accuracy, r.mean_abs_offset
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of loss against iteration over the first `n`
    /// rows.
    pub fn loss_slope(&self, n: usize) -> Option<f64> {
        let rows = &self.rows[..n.min(self.rows.len())];
        if rows.len() < 2 {
            return None;
        }
        let m = rows.len() as f64;
        let mx = rows.iter().map(|r| r.iter as f64).sum::<f64>() / m;
        let my = rows.iter().map(|r| r.loss).sum::<f64>() / m;
        let sxy: f64 = rows.iter().map(|r| (r.iter as f64 - mx) * (r.loss - my)).sum();
        let sxx: f64 = rows.iter().map(|r| (r.iter as f64 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Loss, pixel accuracy and mean offset length over a set of images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_abs_offset: f64,
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model<f32>,
    pub log: TrainLog,
    /// Held-out statistics before the first update.
    pub initial: EvalStats,
    /// Held-out statistics after the last update.
    pub last: EvalStats,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),

    /// `checkpoint` holds the parameters from before the failing update.
    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged {
        iter: usize,
        detail: String,
        checkpoint: Box<Model<f32>>,
        log: TrainLog,
    },
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    velocity: Vec<Tensor<f32>>,
    opts: AttentionOpts,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg.model, cfg.classes, cfg.width, cfg.grid, &mut rng)?;
        Ok(Self::from_model(cfg, model))
    }

    pub fn from_model(cfg: TrainConfig, model: Model<f32>) -> Self {
        let velocity = model.zeros_like().tensors().into_iter().map(|(_, t)| t.clone()).collect();
        Self {
            cfg,
            model,
            velocity,
            opts: AttentionOpts::default(),
        }
    }

    fn batch_grad(&self, batch: &[BeaconSample<f32>]) -> Result<(Model<f32>, EvalStats)> {
        let pixels = self.cfg.size * self.cfg.size;
        let scale = 1.0 / (batch.len() * pixels) as f64;
        let per_image = map_indices(self.cfg.exec, batch.len(), |i| {
            self.model.loss_and_grad(&batch[i].input, &batch[i].labels, scale, &self.opts)
        });
        let mut total = self.model.zeros_like();
        let (mut loss, mut correct, mut offset) = (0.0, 0, 0.0);
        for r in per_image {
            let r = r?;
            total.add_assign(&r.grads)?;
            loss += r.loss;
            correct += r.correct;
            offset += r.mean_abs_offset;
        }
        let stats = EvalStats {
            loss: loss * scale,
            accuracy: correct as f64 / (batch.len() * pixels) as f64,
            mean_abs_offset: offset / batch.len() as f64,
        };
        Ok((total, stats))
    }

    /// One update on `batch` with learning rate `lr`. Returns the
    /// pre-update batch statistics. On a non-finite loss or gradient the
    /// model is left untouched.
    pub fn step(&mut self, batch: &[BeaconSample<f32>], lr: f64) -> Result<EvalStats> {
        let (grads, stats) = self.batch_grad(batch)?;
        if !stats.loss.is_finite() {
            return Err(Error::Divergence {
                iter: 0,
                detail: format!("loss is {}", stats.loss),
            });
        }
        let grads: Vec<&Tensor<f32>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        sgd_step(&mut self.model.tensors_mut(), &grads, &mut self.velocity, lr, &self.cfg.sgd)?;
        Ok(stats)
    }

    /// Forward-only statistics on `samples`.
    pub fn evaluate(&self, samples: &[BeaconSample<f32>]) -> Result<EvalStats> {
        let pixels = self.cfg.size * self.cfg.size;
        let per_image = map_indices(self.cfg.exec, samples.len(), |i| -> Result<(f64, usize, f64)> {
            let (logits, cache) = self.model.forward(&samples[i].input, &self.opts)?;
            let (loss, correct, _) = cross_entropy(&logits, &samples[i].labels, 1.0)?;
            let offset = cache
                .snl_activations()
                .map_or(0.0, |a| crate::sparse::mean_offset_norm(&a.field.offsets));
            Ok((loss, correct, offset))
        });
        let (mut loss, mut correct, mut offset) = (0.0, 0, 0.0);
        for r in per_image {
            let (l, c, o) = r?;
            loss += l;
            correct += c;
            offset += o;
        }
        let total = (samples.len() * pixels) as f64;
        Ok(EvalStats {
            loss: loss / total,
            accuracy: correct as f64 / total,
            mean_abs_offset: offset / samples.len() as f64,
        })
    }
}

/// Training batches and the held-out set come from separate seed streams.
const EVAL_STREAM: u64 = u64::MAX;

/// Held-out images for a config.
pub fn eval_set(cfg: &TrainConfig) -> Result<Vec<BeaconSample<f32>>> {
    gen_beacon_dataset(cfg.eval_size, &cfg.beacon_spec()?, derive_seed(cfg.seed, EVAL_STREAM))
}

/// Train for `cfg.sgd.max_iter` iterations on freshly generated batches,
/// calling `progress` after every logged row.
pub fn train_with(cfg: TrainConfig, mut progress: impl FnMut(&LogRow)) -> std::result::Result<TrainRun, TrainError> {
    let mut trainer = Trainer::new(cfg)?;
    let spec = cfg.beacon_spec()?;
    let held_out = eval_set(&cfg)?;
    let initial = trainer.evaluate(&held_out)?;
    let mut log = TrainLog::default();
    for iter in 0..cfg.sgd.max_iter {
        let lr = poly_lr(iter, &cfg.sgd)?;
        let batch = gen_beacon_dataset(cfg.batch, &spec, derive_seed(cfg.seed, iter as u64))?;
        match trainer.step(&batch, lr) {
            Ok(stats) => {
                let row = LogRow {
                    iter,
                    lr,
                    loss: stats.loss,
                    accuracy: stats.accuracy,
                    mean_abs_offset: stats.mean_abs_offset,
                };
                progress(&row);
                log.rows.push(row);
            }
            Err(Error::Divergence { detail, .. }) => {
                return Err(TrainError::Diverged {
                    iter,
                    detail,
                    checkpoint: Box::new(trainer.model),
                    log,
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    let last = trainer.evaluate(&held_out)?;
    Ok(TrainRun {
        model: trainer.model,
        log,
        initial,
        last,
    })
}

pub fn train(cfg: TrainConfig) -> std::result::Result<TrainRun, TrainError> {
    train_with(cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(model: ModelKind) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig { max_iter: 6, ..SgdConfig::default() },
            batch: 2,
            size: 16,
            width: 4,
            grid: GridSpec::new(3, 3).unwrap(),
            model,
            eval_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = small(ModelKind::Snl);
        let mut t = Trainer::new(cfg).unwrap();
        let batch = gen_beacon_dataset(2, &cfg.beacon_spec().unwrap(), 3).unwrap();
        let first = t.step(&batch, 0.0).unwrap();
        for _ in 0..3 {
            assert_eq!(t.step(&batch, 0.0).unwrap(), first);
        }
    }

    #[test]
    fn bit_reproducible() {
        for kind in [ModelKind::Snl, ModelKind::Local] {
            let a = train(small(kind)).unwrap();
            let b = train(small(kind)).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn parallel_batches_match_sequential() {
        let seq = train(small(ModelKind::Snl)).unwrap();
        let par = train(TrainConfig { exec: Exec::Parallel, ..small(ModelKind::Snl) }).unwrap();
        assert_eq!(seq.log, par.log);
        assert_eq!(seq.model, par.model);
    }

    #[test]
    fn offsets_start_at_zero() {
        let run = train(small(ModelKind::Snl)).unwrap();
        assert_eq!(run.initial.mean_abs_offset, 0.0);
        assert_eq!(run.log.rows[0].mean_abs_offset, 0.0);
        assert_eq!(run.log.rows.len(), 6);
    }

    #[test]
    fn divergence_returns_last_good_parameters() {
        let cfg = TrainConfig {
            sgd: SgdConfig { base_lr: 1e30, max_iter: 50, ..SgdConfig::default() },
            ..small(ModelKind::Local)
        };
        match train(cfg) {
            Err(TrainError::Diverged { iter, checkpoint, log, .. }) => {
                assert_eq!(log.rows.len(), iter);
                assert!(checkpoint.tensors().iter().all(|(_, t)| t.all_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.log.rows.len())),
        }
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            rows: vec![LogRow { iter: 0, lr: 0.005, loss: 1.0, accuracy: 0.5, mean_abs_offset: 0.0 }],
        };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "iter,lr,loss,accuracy,mean_abs_offset\n0,5e-3,1.000000,0.500000,0.000000\n");
    }

    #[test]
    fn slope_of_falling_loss() {
        let rows = (0..10)
            .map(|i| LogRow { iter: i, lr: 0.0, loss: 5.0 - 0.5 * i as f64, accuracy: 0.0, mean_abs_offset: 0.0 })
            .collect();
        let log = TrainLog { rows };
        assert!((log.loss_slope(200).unwrap() + 0.5).abs() < 1e-12);
    }
}

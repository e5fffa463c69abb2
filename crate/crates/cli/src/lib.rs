//! Subcommands of the `snl` binary. Each returns a process exit code:
//! 0 when every check passes, 1 when a check fails, 2 on usage errors.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use snl_core::config::{RunConfig, Threshold};
use snl_core::equiv::{default_tolerance, dense_equivalence};
use snl_core::gradcheck::{check_block_with, BlockKind, CheckDims};
use snl_core::io::{load, load_bundle, save_bundle, AnyTensor};
use snl_core::sparse::{attention_dump, snl_forward_with, GridSpec, SamplingGrid, SnlParams};
use snl_core::train::{train_with, Block, Model, TrainError, TrainRun};
use snl_core::{bench, AttentionOpts, Error, Precision, Tensor};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Io(_)
            | Error::Format(_)
            | Error::Shape { .. }
            | Error::Dimension { .. }
            | Error::Range(_) => EXIT_USAGE,
            _ => EXIT_FAIL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

pub type Outcome = Result<i32, Failure>;

/// Split `--key value` / `--key=value` pairs. `--config` may appear
/// anywhere; it is returned separately so the file can be applied before
/// the remaining overrides.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>), Failure> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Failure::usage(format!("expected --key value, got {arg:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

/// Defaults, then the config file, then command-line overrides.
pub fn build_config(config: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn window(cfg: &RunConfig) -> Result<GridSpec, Failure> {
    let kh = if cfg.kh == 0 { 3 } else { cfg.kh };
    let kw = if cfg.kw == 0 { 3 } else { cfg.kw };
    Ok(GridSpec::new(kh, kw)?)
}

fn opts(cfg: &RunConfig) -> AttentionOpts {
    AttentionOpts::with_exec(cfg.exec())
}

/// Finite-difference checks of both blocks for `seeds` consecutive seeds.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut impl Write) -> Outcome {
    let grid = window(cfg)?;
    let mut all = true;
    for kind in [BlockKind::DenseNl, BlockKind::Snl] {
        let dims = match kind {
            BlockKind::DenseNl => CheckDims::dense(cfg.c, cfg.h, cfg.w),
            BlockKind::Snl => CheckDims::sparse(cfg.c, cfg.h, cfg.w, grid.kh, grid.kw),
        };
        let threshold = match cfg.threshold {
            Threshold::Auto => kind.default_threshold(),
            Threshold::Fixed(t) => t,
        };
        for seed in cfg.seed..cfg.seed + cfg.seeds as u64 {
            for r in check_block_with(kind, seed, dims, cfg.eps, threshold, &opts(cfg))? {
                writeln!(out, "{kind} seed {seed} {r}")?;
                all &= r.passed;
            }
        }
    }
    Ok(if all { EXIT_PASS } else { EXIT_FAIL })
}

/// Sparse block with a full-coverage grid against the dense block.
pub fn cmd_equiv(cfg: &RunConfig, out: &mut impl Write) -> Outcome {
    let n = cfg.h * cfg.w;
    if (cfg.kh != 0 || cfg.kw != 0) && cfg.kh * cfg.kw != n {
        return Err(Failure::usage(format!(
            "equivalence needs K = N: a {}x{} window gives K = {} on a {}x{} map",
            cfg.kh,
            cfg.kw,
            cfg.kh * cfg.kw,
            cfg.h,
            cfg.w
        )));
    }
    let tol = cfg.tolerance.unwrap_or_else(|| default_tolerance(cfg.precision));
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + cfg.seeds as u64 {
        let r = match cfg.precision {
            Precision::Single => dense_equivalence::<f32>(seed, cfg.c, cfg.h, cfg.w, &opts(cfg))?,
            Precision::Double => dense_equivalence::<f64>(seed, cfg.c, cfg.h, cfg.w, &opts(cfg))?,
        };
        writeln!(out, "seed {seed} max_abs_deviation {:.3e}", r.max_output_deviation)?;
        worst = worst.max(r.max_output_deviation);
    }
    let pass = worst < tol;
    writeln!(out, "max {worst:.3e} tolerance {tol:e} {}", if pass { "PASS" } else { "FAIL" })?;
    Ok(if pass { EXIT_PASS } else { EXIT_FAIL })
}

fn csv_sink(path: &str, stdout: &mut dyn Write, write: impl FnOnce(&mut dyn Write) -> snl_core::Result<()>) -> Result<(), Failure> {
    if path == "-" {
        write(stdout)?;
    } else {
        let mut f = BufWriter::new(File::create(path)?);
        write(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// Time both attention cores over square maps with sides `grid`.
pub fn cmd_bench(cfg: &RunConfig, out: &mut impl Write, diag: &mut impl Write) -> Outcome {
    let sizes: Vec<(usize, usize)> = cfg.grid.iter().map(|&s| (s, s)).collect();
    let report = bench::run_bench(&sizes, cfg.bench_k, cfg.bench_c, cfg.repeats, cfg.exec())?;
    csv_sink(&cfg.out, out, |w| report.write_csv(&mut WriteRef(w)))?;
    for s in &report.skipped {
        writeln!(diag, "skipped {} N={}: {}", s.block, s.n, s.reason)?;
    }
    for block in [BlockKind::Snl, BlockKind::DenseNl] {
        let points = report.of(block);
        if points.len() >= 3 {
            writeln!(diag, "{block} log-log slope {:.3}", bench::fit_scaling(&points)?)?;
        }
    }
    Ok(EXIT_PASS)
}

/// Adapter so `dyn Write` can be passed where `impl Write` is expected.
struct WriteRef<'a>(&'a mut dyn Write);

impl Write for WriteRef<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

fn model_tensors(model: &Model<f32>) -> Vec<&Tensor<f32>> {
    model.tensors().into_iter().map(|(_, t)| t).collect()
}

fn write_log(path: &Path, run_log: &snl_core::train::TrainLog) -> Result<(), Failure> {
    let mut f = BufWriter::new(File::create(path)?);
    run_log.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Train the toy network; writes the log CSV and the parameter bundle.
pub fn cmd_train(cfg: &RunConfig, out: &mut impl Write, diag: &mut impl Write) -> Outcome {
    let tc = cfg.train_config()?;
    let result = train_with(tc, |row| {
        if row.iter % 100 == 0 {
            let _ = writeln!(
                diag,
                "iter {} lr {:.3e} loss {:.4} acc {:.3} offset {:.3}",
                row.iter, row.lr, row.loss, row.accuracy, row.mean_abs_offset
            );
        }
    });
    match result {
        Ok(TrainRun { model, log, initial, last }) => {
            write_log(&cfg.log, &log)?;
            save_bundle(&cfg.params, &model_tensors(&model))?;
            writeln!(
                out,
                "model {} params {} accuracy {:.4} -> {:.4} mean_abs_offset {:.4} -> {:.4}",
                model.kind().name(),
                model.param_count(),
                initial.accuracy,
                last.accuracy,
                initial.mean_abs_offset,
                last.mean_abs_offset
            )?;
            Ok(EXIT_PASS)
        }
        Err(TrainError::Diverged { iter, detail, checkpoint, log }) => {
            write_log(&cfg.log, &log)?;
            save_bundle(&cfg.params, &model_tensors(&checkpoint))?;
            writeln!(
                out,
                "diverged at iteration {iter}: {detail}; last good parameters in {}",
                cfg.params.display()
            )?;
            Ok(EXIT_FAIL)
        }
        Err(TrainError::Setup(e)) => Err(e.into()),
    }
}

/// Sparse-block parameters for dump-attention: `params = random` gives a
/// fresh block (zero offsets) for the input's channel count; otherwise the
/// file is a bundle of either the ten block tensors or a whole toy model.
fn dump_params(cfg: &RunConfig, channels: usize) -> Result<(SnlParams<f32>, GridSpec, Option<Model<f32>>), Failure> {
    if cfg.params.as_os_str() == "random" {
        use rand::SeedableRng;
        let grid = window(cfg)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = SnlParams::init(channels, grid.k(), (1.0 / channels as f64).sqrt(), &mut rng)?;
        return Ok((p, grid, None));
    }
    if !cfg.params.exists() {
        return Err(Failure::usage(format!("params file {} not found", cfg.params.display())));
    }
    let tensors: Vec<Tensor<f32>> = load_bundle(&cfg.params)?.iter().map(AnyTensor::to_scalar).collect();
    match tensors.len() {
        10 => {
            let grid = window(cfg)?;
            let mut p = SnlParams::zeros(tensors[6].dim(0), grid.k())?;
            for ((_, slot), t) in p.groups_mut().into_iter().zip(tensors) {
                if slot.dims() != t.dims() {
                    return Err(Failure::usage(format!(
                        "bundle tensor {:?} does not fit a {}x{} block",
                        t.dims(),
                        grid.kh,
                        grid.kw
                    )));
                }
                *slot = t;
            }
            Ok((p, grid, None))
        }
        _ => {
            let grid = GridSpec::new(cfg.train_kh, cfg.train_kw)?;
            let model = Model::from_tensors(tensors, grid)?;
            match &model.block {
                Block::Snl { params, grid } => Ok((params.clone(), *grid, Some(model.clone()))),
                Block::Local(_) => Err(Failure::usage("model bundle has no sparse block")),
            }
        }
    }
}

/// One CSV row per `(query, slot)` with sample coordinates and affinity.
/// With a whole-model bundle the input is the raw image and the block sees
/// the backbone features.
pub fn cmd_dump_attention(cfg: &RunConfig, out: &mut impl Write) -> Outcome {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| Failure::usage("dump-attention needs --input <tensor file>"))?;
    if !path.exists() {
        return Err(Failure::usage(format!("input file {} not found", path.display())));
    }
    let x: Tensor<f32> = load(path)?.to_scalar();
    if x.rank() != 3 {
        return Err(Failure::usage(format!("input must be C x H x W, got {:?}", x.dims())));
    }
    let (params, grid, model) = dump_params(cfg, x.dim(0))?;
    let features = match &model {
        Some(m) => m.features(&x)?,
        None => x,
    };
    let (_, acts) = snl_forward_with(&features, &params, SamplingGrid::Window(grid), &opts(cfg))?;
    let rows = attention_dump(&acts);
    csv_sink(&cfg.out, out, |w| {
        writeln!(w, "query,slot,t_x,t_y,s_ij")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{:e}", r.query, r.slot, r.tx, r.ty, r.weight)?;
        }
        Ok(())
    })?;
    Ok(EXIT_PASS)
}

//! Timing and multiply counts of the two attention cores.
//!
//! Only the core is measured: affinity plus aggregation, and for the sparse
//! block the bilinear gather that feeds them. The 1x1 projections shared by
//! both blocks are excluded.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{Exec, MulCounter};
use crate::gradcheck::BlockKind;
use crate::nonlocal::{dense_core, half_channels, AttentionOpts};
use crate::sparse::{base_grid, snl_core, GridSpec, SamplingGrid};
use crate::tensor::{Shape2D, Tensor};

/// Warm runs required per point.
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub block: BlockKind,
    pub n: usize,
    /// Keys per query: the sampling count for the sparse core, `N` for the
    /// dense one.
    pub k: usize,
    pub c: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub multiplies: u64,
}

/// A size that could not be run.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub block: BlockKind,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub skipped: Vec<Skipped>,
}

impl BenchReport {
    pub const HEADER: &'static str = "block,N,K,C,median_ms,multiplies";

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for p in &self.points {
            writeln!(w, "{},{},{},{},{:.4},{}", p.block, p.n, p.k, p.c, p.median_ms, p.multiplies)?;
        }
        Ok(())
    }

    pub fn of(&self, block: BlockKind) -> Vec<BenchPoint> {
        self.points.iter().filter(|p| p.block == block).cloned().collect()
    }
}

/// Closed-form multiply count of the sparse core: `N K (C/2 + C)`.
pub fn snl_multiplies(n: usize, k: usize, c: usize) -> u64 {
    (n * k * (c / 2 + c)) as u64
}

/// Closed-form multiply count of the dense core: `N^2 (C/2 + C)`.
pub fn dense_multiplies(n: usize, c: usize) -> u64 {
    (n * n * (c / 2 + c)) as u64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Run `f` once to warm up, then `repeats` more times; returns the median
/// wall time in milliseconds.
fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Whether an `N x N` single-precision affinity can be allocated.
fn can_allocate_square(n: usize) -> std::result::Result<(), String> {
    let len = n.checked_mul(n).ok_or_else(|| format!("{n}^2 entries overflow"))?;
    let mut probe: Vec<f32> = Vec::new();
    probe
        .try_reserve_exact(len)
        .map_err(|e| format!("cannot allocate {n}x{n} affinity: {e}"))
}

/// Time both cores on every `(H, W)` in `grid` with `K` samples per query
/// (arranged as the most square window) and `C` channels, in single
/// precision. Sizes whose dense affinity cannot be allocated are skipped
/// and reported.
pub fn run_bench(grid: &[(usize, usize)], k: usize, c: usize, repeats: usize, exec: Exec) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    let d = half_channels(c)?;
    let window = SamplingGrid::Window(GridSpec::most_square(k)?);
    let opts = AttentionOpts::with_exec(exec);
    let mut report = BenchReport::default();
    for (idx, &(h, w)) in grid.iter().enumerate() {
        let shape = Shape2D::new(h, w)?;
        let n = shape.n();
        window.validate(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(idx as u64);
        let q = Tensor::<f32>::randn(&[d, n], 1.0, &mut rng);
        let kx = Tensor::<f32>::randn(&[d, n], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[c, n], 1.0, &mut rng);
        let coords = base_grid::<f32>(shape, window)?;

        let counter = MulCounter::new();
        let ms = time_median(repeats, || {
            counter.reset();
            snl_core(&q, &kx, &v, &coords, shape, &opts, Some(&counter)).map(drop)
        })?;
        report.points.push(BenchPoint {
            block: BlockKind::Snl,
            n,
            k,
            c,
            repeats,
            median_ms: ms,
            multiplies: counter.get(),
        });

        if let Err(reason) = can_allocate_square(n) {
            report.skipped.push(Skipped {
                block: BlockKind::DenseNl,
                n,
                reason,
            });
            continue;
        }
        let ms = time_median(repeats, || {
            counter.reset();
            dense_core(&q, &kx, &v, &opts, Some(&counter)).map(drop)
        })?;
        report.points.push(BenchPoint {
            block: BlockKind::DenseNl,
            n,
            k: n,
            c,
            repeats,
            median_ms: ms,
            multiplies: counter.get(),
        });
    }
    Ok(report)
}

/// Least-squares slope of `ln(time)` against `ln(N)` for one block kind.
/// Needs at least three points sharing the block kind and `C`, with a
/// common `K` for the sparse core, and at least two distinct sizes.
pub fn fit_scaling(points: &[BenchPoint]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "scaling fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let first = &points[0];
    for p in points {
        let same_k = p.block == BlockKind::DenseNl || p.k == first.k;
        if p.block != first.block || p.c != first.c || !same_k {
            return Err(Error::Config(format!(
                "cannot fit {} N={} K={} C={} together with {} K={} C={}",
                p.block, p.n, p.k, p.c, first.block, first.k, first.c
            )));
        }
        if !(p.median_ms > 0.0) || p.n == 0 {
            return Err(Error::Range(format!("non-positive time or size at N={}", p.n)));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_ms.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all points share one size".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

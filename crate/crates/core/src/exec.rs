//! Execution mode for query-parallel kernels and the multiply counter used
//! to make operation counts observable.
//!
//! Every kernel that is parallelised works on disjoint output rows and keeps
//! its per-row accumulation order fixed, so sequential and parallel runs
//! produce bit-identical results.

use std::sync::atomic::{AtomicU64, Ordering};

/// How row-independent kernels are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    /// Query-parallel via rayon. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Parallel,
}

impl Exec {
    /// True if this mode will actually run on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Apply `f(row_index, row)` to every `row_len`-sized chunk of `out`.
pub fn for_each_row<T, F>(exec: Exec, out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indices<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Counts scalar multiplications performed by the attention cores.
///
/// Kernels add the length of each inner product they evaluate, once per
/// query row, so the count is exact and independent of scheduling.
#[derive(Debug, Default)]
pub struct MulCounter(AtomicU64);

impl MulCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

pub(crate) fn count(counter: Option<&MulCounter>, n: usize) {
    if let Some(c) = counter {
        c.add(n as u64);
    }
}

/// Like [`for_each_row`] but over four output buffers that share a row
/// count, each with its own row length.
pub fn for_each_row4<T, F>(exec: Exec, bufs: [(&mut [T], usize); 4], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T], &mut [T], &mut [T]) + Sync + Send,
{
    let [(a, la), (b, lb), (c, lc), (d, ld)] = bufs;
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        a.par_chunks_mut(la)
            .zip(b.par_chunks_mut(lb))
            .zip(c.par_chunks_mut(lc))
            .zip(d.par_chunks_mut(ld))
            .enumerate()
            .for_each(|(i, (((ra, rb), rc), rd))| f(i, ra, rb, rc, rd));
        return;
    }
    let _ = exec;
    a.chunks_mut(la)
        .zip(b.chunks_mut(lb))
        .zip(c.chunks_mut(lc))
        .zip(d.chunks_mut(ld))
        .enumerate()
        .for_each(|(i, (((ra, rb), rc), rd))| f(i, ra, rb, rc, rd));
}

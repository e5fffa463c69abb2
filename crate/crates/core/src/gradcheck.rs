//! Finite-difference validation of the analytic backward passes.
//!
//! Each check runs in double precision with loss `L = sum(z^2) / 2`, so the
//! upstream gradient handed to the backward pass is `z` itself. Every input
//! and parameter group is perturbed entry by entry with central
//! differences and compared against the analytic gradient.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::map_indices;
use crate::nonlocal::{nl_backward_with, nl_forward_with, AttentionOpts, NlParams};
use crate::sparse::{snl_backward_with, snl_forward_with, SamplingGrid, SnlParams};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DENSE_THRESHOLD: f64 = 1e-6;
pub const SPARSE_THRESHOLD: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-12;
/// Roundoff in the loss, in units of `f64::EPSILON * |L|`, assumed when
/// estimating the resolution of a central difference.
pub const LOSS_ROUNDOFF_ULPS: f64 = 16.0;
/// Fractional part given to every sample coordinate so the check never sits
/// on the integer lattice where the bilinear derivative jumps.
pub const KINK_SHIFT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    DenseNl,
    Snl,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::DenseNl => "dense-nl",
            BlockKind::Snl => "snl",
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            BlockKind::DenseNl => DENSE_THRESHOLD,
            BlockKind::Snl => SPARSE_THRESHOLD,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Problem size for a check. The dense block uses `N = height * width`;
/// the sparse block samples a `kh x kw` window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl CheckDims {
    pub fn dense(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kh: 1,
            kw: 1,
        }
    }

    pub fn sparse(channels: usize, height: usize, width: usize, kh: usize, kw: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kh,
            kw,
        }
    }
}

/// Outcome of comparing one gradient group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub group: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.3e} {}",
            self.group,
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// index `i`.
pub fn central_diff<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericInput {
                op: "central_diff",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.dims(), grad)
}

/// Smallest gradient entry a central difference on a loss of magnitude
/// `loss` can resolve to within `threshold`. Below it the difference
/// quotient is pure roundoff; the key bias of the dense block, which adds
/// the same value to every logit of a row, has an identically zero
/// gradient and lives entirely down there.
pub fn resolution_floor(loss: f64, eps: f64, threshold: f64) -> f64 {
    let noise = LOSS_ROUNDOFF_ULPS * f64::EPSILON * loss.abs().max(1.0) / eps;
    if threshold > 0.0 {
        (noise / threshold).max(REL_FLOOR)
    } else {
        REL_FLOOR
    }
}

/// Compare an analytic gradient with a numeric one.
pub fn compare(group: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>, threshold: f64) -> GradReport {
    compare_floored(group, analytic, numeric, threshold, REL_FLOOR)
}

/// [`compare`] with an explicit relative-error denominator floor.
pub fn compare_floored(
    group: &str,
    analytic: &Tensor<f64>,
    numeric: &Tensor<f64>,
    threshold: f64,
    floor: f64,
) -> GradReport {
    let mut report = GradReport {
        group: group.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        passed: false,
    };
    if analytic.dims() != numeric.dims() {
        report.max_rel_error = f64::INFINITY;
        report.max_abs_error = f64::INFINITY;
        return report;
    }
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = if a.is_finite() && n.is_finite() {
            abs / a.abs().max(n.abs()).max(floor)
        } else {
            f64::INFINITY
        };
        if rel > report.max_rel_error || (rel.is_nan() && !report.max_rel_error.is_nan()) {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.passed = report.max_rel_error < threshold;
    report
}

fn half_sq_norm(z: &Tensor<f64>) -> f64 {
    z.data().iter().map(|v| v * v).sum::<f64>() / 2.0
}

/// A differentiable block under test: the input plus named parameter
/// groups, all flattened into one list of tensors.
trait Checkable {
    fn tensors(&self) -> Vec<(&'static str, Tensor<f64>)>;
    fn loss(&self, tensors: &[Tensor<f64>]) -> Result<f64>;
    fn analytic(&self, tensors: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

struct DenseCase {
    x: Tensor<f64>,
    params: NlParams<f64>,
    opts: AttentionOpts,
}

impl DenseCase {
    fn unpack(&self, t: &[Tensor<f64>]) -> (Tensor<f64>, NlParams<f64>) {
        let mut p = self.params.clone();
        for ((_, slot), value) in p.groups_mut().into_iter().zip(&t[1..]) {
            *slot = value.clone();
        }
        (t[0].clone(), p)
    }
}

impl Checkable for DenseCase {
    fn tensors(&self) -> Vec<(&'static str, Tensor<f64>)> {
        let mut out = vec![("x", self.x.clone())];
        out.extend(self.params.groups().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    fn loss(&self, t: &[Tensor<f64>]) -> Result<f64> {
        let (x, p) = self.unpack(t);
        let (z, _) = nl_forward_with(&x, &p, &self.opts)?;
        Ok(half_sq_norm(&z))
    }

    fn analytic(&self, t: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (x, p) = self.unpack(t);
        let (z, acts) = nl_forward_with(&x, &p, &self.opts)?;
        let (gx, gp) = nl_backward_with(&acts, &p, &x, &z, &self.opts)?;
        let mut out = vec![gx];
        out.extend(gp.groups().into_iter().map(|(_, g)| g.clone()));
        Ok(out)
    }
}

struct SparseCase {
    x: Tensor<f64>,
    params: SnlParams<f64>,
    grid: SamplingGrid,
    opts: AttentionOpts,
}

impl SparseCase {
    fn unpack(&self, t: &[Tensor<f64>]) -> (Tensor<f64>, SnlParams<f64>) {
        let mut p = self.params.clone();
        for ((_, slot), value) in p.groups_mut().into_iter().zip(&t[1..]) {
            *slot = value.clone();
        }
        (t[0].clone(), p)
    }
}

impl Checkable for SparseCase {
    fn tensors(&self) -> Vec<(&'static str, Tensor<f64>)> {
        let mut out = vec![("x", self.x.clone())];
        out.extend(self.params.groups().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    fn loss(&self, t: &[Tensor<f64>]) -> Result<f64> {
        let (x, p) = self.unpack(t);
        let (z, _) = snl_forward_with(&x, &p, self.grid, &self.opts)?;
        Ok(half_sq_norm(&z))
    }

    fn analytic(&self, t: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (x, p) = self.unpack(t);
        let (z, acts) = snl_forward_with(&x, &p, self.grid, &self.opts)?;
        let (gx, gp) = snl_backward_with(&acts, &p, &x, &z, &self.opts)?;
        let mut out = vec![gx];
        out.extend(gp.groups().into_iter().map(|(_, g)| g.clone()));
        Ok(out)
    }
}

/// Weight scale for the random blocks under test.
const PARAM_STD: f64 = 0.5;
/// Offset-head weight scale; small enough that `KINK_SHIFT` keeps every
/// coordinate well away from integers.
const OFFSET_STD: f64 = 0.01;

/// Build the random dense test case used by [`check_block`].
pub fn dense_case(seed: u64, dims: CheckDims) -> Result<(Tensor<f64>, NlParams<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[dims.channels, dims.height * dims.width], 1.0, &mut rng);
    let params = NlParams::random(dims.channels, PARAM_STD, &mut rng)?;
    Ok((x, params))
}

/// Build the random sparse test case used by [`check_block`]: random
/// projections, small random offset weights and an offset bias of
/// [`KINK_SHIFT`] on every coordinate.
pub fn sparse_case(seed: u64, dims: CheckDims) -> Result<(Tensor<f64>, SnlParams<f64>, SamplingGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = SamplingGrid::window(dims.kh, dims.kw)?;
    let k = dims.kh * dims.kw;
    let x = Tensor::randn(&[dims.channels, dims.height, dims.width], 1.0, &mut rng);
    let mut params = SnlParams::random(dims.channels, k, PARAM_STD, &mut rng)?;
    params.w_offset = Tensor::randn(&[2 * k, dims.channels], OFFSET_STD, &mut rng);
    params.b_offset = Tensor::full(&[2 * k], KINK_SHIFT);
    Ok((x, params, grid))
}

/// Distance from the nearest integer of the most lattice-adjacent sample
/// coordinate in a sparse case.
pub fn min_lattice_distance(coords: &Tensor<f64>) -> f64 {
    coords
        .data()
        .iter()
        .map(|t| (t - t.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Validate one block's backward pass. Returns one report per gradient
/// group (`x` first, then each parameter group). Non-finite analytic
/// gradients produce failing reports rather than errors.
pub fn check_block(
    kind: BlockKind,
    seed: u64,
    dims: CheckDims,
    eps: f64,
    threshold: f64,
) -> Result<Vec<GradReport>> {
    check_block_with(kind, seed, dims, eps, threshold, &AttentionOpts::default())
}

pub fn check_block_with(
    kind: BlockKind,
    seed: u64,
    dims: CheckDims,
    eps: f64,
    threshold: f64,
    opts: &AttentionOpts,
) -> Result<Vec<GradReport>> {
    let case: Box<dyn Checkable + Sync> = match kind {
        BlockKind::DenseNl => {
            let (x, params) = dense_case(seed, dims)?;
            Box::new(DenseCase {
                x,
                params,
                opts: *opts,
            })
        }
        BlockKind::Snl => {
            let (x, params, grid) = sparse_case(seed, dims)?;
            Box::new(SparseCase {
                x,
                params,
                grid,
                opts: *opts,
            })
        }
    };
    let named = case.tensors();
    let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
    let analytic = case.analytic(&tensors)?;
    let floor = resolution_floor(case.loss(&tensors)?, eps, threshold);

    let reports = map_indices(opts.exec, tensors.len(), |g| -> Result<GradReport> {
        let numeric = central_diff(
            |probe| {
                let mut t = tensors.clone();
                t[g] = probe.clone();
                case.loss(&t)
            },
            &tensors[g],
            eps,
        )?;
        Ok(compare_floored(names[g], &analytic[g], &numeric, threshold, floor))
    });
    reports.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::snl_forward;
    use crate::tensor::softmax_rows;

    #[test]
    fn central_diff_of_square_norm() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = central_diff(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-9);
        assert!((g.data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn central_diff_of_constant_is_zero() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_diff(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn central_diff_rejects_bad_input() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(central_diff(|_| Ok(0.0), &x, 0.0).is_err());
        let blow_up = |t: &Tensor<f64>| Ok(if t.data()[0] > 1.0 { f64::INFINITY } else { 0.0 });
        let err = central_diff(blow_up, &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NumericInput { index: 0, .. }));
    }

    #[test]
    fn central_diff_matches_softmax_jacobian() {
        let logits = Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let w = [0.5, -1.0, 2.0, 0.25];
        let f = |t: &Tensor<f64>| -> Result<f64> {
            let s = softmax_rows(t)?;
            Ok(s.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let numeric = central_diff(f, &logits, 1e-5).unwrap();
        let a = softmax_rows(&logits).unwrap();
        for j in 0..4 {
            // d/dl_j sum_i w_i a_i = sum_i w_i a_i (delta_ij - a_j)
            let exact: f64 = (0..4)
                .map(|i| w[i] * a.data()[i] * (if i == j { 1.0 } else { 0.0 } - a.data()[j]))
                .sum();
            assert!((numeric.data()[j] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_error_is_second_order_in_eps() {
        // f(x) = x^3 has central-difference error exactly eps^2.
        let x = Tensor::new(&[1], vec![0.7]).unwrap();
        for eps in [1e-2, 1e-3] {
            let g = central_diff(|t| Ok(t.data()[0].powi(3)), &x, eps).unwrap();
            assert!((g.data()[0] - 3.0 * 0.49 - eps * eps).abs() < 1e-10);
        }
    }

    #[test]
    fn compare_uses_floored_relative_error() {
        let a = Tensor::new(&[3], vec![1.0, 0.0, -2.0]).unwrap();
        let n = Tensor::new(&[3], vec![1.0, 0.0, -2.002]).unwrap();
        let r = compare("w", &a, &n, 1e-2);
        assert_eq!(r.worst_index, 2);
        assert!((r.max_rel_error - 0.002 / 2.002).abs() < 1e-12);
        assert!(r.passed);
        assert!(!compare("w", &a, &n, 0.0).passed);

        let bad = Tensor::new(&[3], vec![1.0, f64::NAN, -2.0]).unwrap();
        assert!(!compare("w", &bad, &n, 1.0).passed);
    }

    #[test]
    fn resolution_floor_scales_with_loss() {
        let small = resolution_floor(1.0, 1e-5, 1e-6);
        assert!((small - 16.0 * f64::EPSILON / 1e-11).abs() < 1e-15);
        assert!((resolution_floor(100.0, 1e-5, 1e-6) - 100.0 * small).abs() < 1e-12);
        assert_eq!(resolution_floor(1.0, 1e-5, 0.0), REL_FLOOR);
        // An abs error of 1e-9 fails against the bare floor but is roundoff
        // next to a unit loss.
        let a = Tensor::new(&[1], vec![1e-12]).unwrap();
        let n = Tensor::new(&[1], vec![1e-9]).unwrap();
        assert!(!compare("b", &a, &n, 1e-6).passed);
        assert!(!compare_floored("b", &a, &n, 1e-6, small).passed);
        assert!(compare_floored("b", &a, &n, 1e-6, resolution_floor(100.0, 1e-5, 1e-6)).passed);
    }

    #[test]
    fn dense_block_passes() {
        for seed in 0..5 {
            let reports = check_block(
                BlockKind::DenseNl,
                seed,
                CheckDims::dense(4, 3, 3),
                DEFAULT_EPS,
                DENSE_THRESHOLD,
            )
            .unwrap();
            assert_eq!(reports.len(), 9);
            for r in &reports {
                assert!(r.passed, "seed {seed}: {r} (abs {:.3e})", r.max_abs_error);
            }
        }
    }

    #[test]
    fn sparse_block_passes() {
        for seed in 0..5 {
            let reports = check_block(
                BlockKind::Snl,
                seed,
                CheckDims::sparse(4, 5, 5, 3, 3),
                DEFAULT_EPS,
                SPARSE_THRESHOLD,
            )
            .unwrap();
            assert_eq!(reports.len(), 11);
            for r in &reports {
                assert!(r.passed, "seed {seed}: {r} (abs {:.3e})", r.max_abs_error);
            }
        }
    }

    #[test]
    fn zero_threshold_fails_everything() {
        let reports = check_block(
            BlockKind::DenseNl,
            1,
            CheckDims::dense(4, 3, 3),
            DEFAULT_EPS,
            0.0,
        )
        .unwrap();
        assert!(reports.iter().all(|r| !r.passed));
    }

    #[test]
    fn sparse_case_stays_off_the_lattice() {
        for seed in 0..5 {
            let dims = CheckDims::sparse(4, 5, 5, 3, 3);
            let (x, p, grid) = sparse_case(seed, dims).unwrap();
            let (_, acts) = snl_forward(&x, &p, grid).unwrap();
            assert!(min_lattice_distance(&acts.field.coords) > 0.1);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let dims = CheckDims::sparse(4, 5, 5, 3, 3);
        let a = check_block(BlockKind::Snl, 3, dims, DEFAULT_EPS, SPARSE_THRESHOLD).unwrap();
        let b = check_block(BlockKind::Snl, 3, dims, DEFAULT_EPS, SPARSE_THRESHOLD).unwrap();
        assert_eq!(a, b);
    }
}

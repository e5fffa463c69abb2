//! Sampling geometry: the regular base grid around each query, the offset
//! head that displaces it, and the resulting per-query coordinates.

use crate::error::{Error, Result};
use crate::tensor::{conv1x1, Scalar, Shape2D, Tensor};

/// A `kh x kw` window of samples centred on the query pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub kh: usize,
    pub kw: usize,
}

impl GridSpec {
    pub fn new(kh: usize, kw: usize) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "sampling window must be at least 1x1, got {kh}x{kw}"
            )));
        }
        Ok(Self { kh, kw })
    }

    /// Square window with `side * side` samples.
    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// The most square `kh x kw` factorisation of `k` with `kh <= kw`
    /// (e.g. 99 becomes 9x11, a prime becomes 1xk).
    pub fn most_square(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let mut kh = (k as f64).sqrt() as usize;
        while kh * kh > k {
            kh -= 1;
        }
        while (kh + 1) * (kh + 1) <= k {
            kh += 1;
        }
        while !k.is_multiple_of(kh) {
            kh -= 1;
        }
        Self::new(kh, k / kh)
    }

    pub fn k(&self) -> usize {
        self.kh * self.kw
    }
}

/// Where the undisplaced samples of each query sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingGrid {
    /// Contiguous window around the query (spacing one pixel).
    Window(GridSpec),
    /// Every pixel of the map exactly once, in flat order, for every query.
    /// `K = N`; with zero offsets this reproduces dense attention.
    Full,
}

impl SamplingGrid {
    pub fn window(kh: usize, kw: usize) -> Result<Self> {
        Ok(SamplingGrid::Window(GridSpec::new(kh, kw)?))
    }

    /// Number of samples per query on a map of the given shape.
    pub fn k(&self, shape: Shape2D) -> usize {
        match self {
            SamplingGrid::Window(g) => g.k(),
            SamplingGrid::Full => shape.n(),
        }
    }

    pub fn validate(&self, shape: Shape2D) -> Result<usize> {
        let k = self.k(shape);
        if k > shape.n() {
            return Err(Error::Config(format!(
                "{k} samples per query exceed the {} positions of a {}x{} map",
                shape.n(),
                shape.height,
                shape.width
            )));
        }
        Ok(k)
    }
}

impl From<GridSpec> for SamplingGrid {
    fn from(g: GridSpec) -> Self {
        SamplingGrid::Window(g)
    }
}

/// Undisplaced sample coordinates, `N x K x 2` with `(x, y)` in the last
/// axis.
///
/// For a window, slot `(r, c)` (flat slot `r * kw + c`) of query `(x, y)`
/// sits at `(x + c - (kw-1)/2, y + r - (kh-1)/2)`; even extents give
/// half-pixel centres.
pub fn base_grid<T: Scalar>(shape: Shape2D, grid: SamplingGrid) -> Result<Tensor<T>> {
    let k = grid.validate(shape)?;
    let n = shape.n();
    let mut out = Vec::with_capacity(n * k * 2);
    for y in 0..shape.height {
        for x in 0..shape.width {
            match grid {
                SamplingGrid::Window(g) => {
                    let cx = (g.kw as f64 - 1.0) / 2.0;
                    let cy = (g.kh as f64 - 1.0) / 2.0;
                    for r in 0..g.kh {
                        for c in 0..g.kw {
                            out.push(T::from_f64(x as f64 + c as f64 - cx));
                            out.push(T::from_f64(y as f64 + r as f64 - cy));
                        }
                    }
                }
                SamplingGrid::Full => {
                    for s in 0..n {
                        out.push(T::from_f64((s % shape.width) as f64));
                        out.push(T::from_f64((s / shape.width) as f64));
                    }
                }
            }
        }
    }
    Tensor::new(&[n, k, 2], out)
}

/// Per-pixel sampling offsets, `2K x N`. Slot `s` reads channels `2s`
/// (dx) and `2s + 1` (dy).
pub fn offset_head<T: Scalar>(
    x: &Tensor<T>,
    w_offset: &Tensor<T>,
    b_offset: Option<&Tensor<T>>,
    k: usize,
) -> Result<Tensor<T>> {
    if w_offset.rank() != 2 || w_offset.dim(0) != 2 * k {
        return Err(Error::Dimension {
            op: "offset_head",
            lhs: vec![2 * k, x.dim(0)],
            rhs: w_offset.dims().to_vec(),
        });
    }
    conv1x1(x, w_offset, b_offset)
}

/// Final sample coordinates: base grid plus offsets, elementwise.
pub fn apply_offsets<T: Scalar>(base: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    if base.rank() != 3 || base.dim(2) != 2 {
        return Err(Error::Shape {
            dims: base.dims().to_vec(),
            reason: "base grid must be N x K x 2".into(),
        });
    }
    let (n, k) = (base.dim(0), base.dim(1));
    if offsets.dims() != [2 * k, n] {
        return Err(Error::Dimension {
            op: "apply_offsets",
            lhs: base.dims().to_vec(),
            rhs: offsets.dims().to_vec(),
        });
    }
    let off = offsets.data();
    let mut out = base.data().to_vec();
    for i in 0..n {
        for s in 0..k {
            let at = (i * k + s) * 2;
            out[at] = out[at] + off[2 * s * n + i];
            out[at + 1] = out[at + 1] + off[(2 * s + 1) * n + i];
        }
    }
    Tensor::new(base.dims(), out)
}

/// Mean Euclidean length of the `(dx, dy)` offset vectors, in pixels.
pub fn mean_offset_norm<T: Scalar>(offsets: &Tensor<T>) -> f64 {
    let (rows, n) = (offsets.dim(0), offsets.dim(1));
    let k = rows / 2;
    let d = offsets.data();
    let mut total = 0.0;
    for s in 0..k {
        for i in 0..n {
            let dx = d[2 * s * n + i].as_f64();
            let dy = d[(2 * s + 1) * n + i].as_f64();
            total += (dx * dx + dy * dy).sqrt();
        }
    }
    total / (k * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn most_square_factorisations() {
        let cases = [(9, (3, 3)), (49, (7, 7)), (81, (9, 9)), (99, (9, 11)), (121, (11, 11)), (7, (1, 7)), (12, (3, 4))];
        for (k, (kh, kw)) in cases {
            let g = GridSpec::most_square(k).unwrap();
            assert_eq!((g.kh, g.kw), (kh, kw), "k = {k}");
            assert_eq!(g.k(), k);
        }
        assert!(GridSpec::most_square(0).is_err());
    }

    #[test]
    fn centred_3x3_window() {
        let shape = Shape2D::new(11, 11).unwrap();
        let base = base_grid::<f64>(shape, SamplingGrid::window(3, 3).unwrap()).unwrap();
        let i = shape.index(5, 5);
        let pts: Vec<(f64, f64)> = (0..9)
            .map(|s| (base.data()[(i * 9 + s) * 2], base.data()[(i * 9 + s) * 2 + 1]))
            .collect();
        for &(x, y) in &pts {
            assert!([4.0, 5.0, 6.0].contains(&x));
            assert!([4.0, 5.0, 6.0].contains(&y));
        }
        let mut dedup = pts.clone();
        dedup.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dedup.dedup();
        assert_eq!(dedup.len(), 9);
        assert_eq!(pts[4], (5.0, 5.0));
    }

    #[test]
    fn unit_window_is_query_position() {
        let shape = Shape2D::new(3, 4).unwrap();
        let base = base_grid::<f32>(shape, SamplingGrid::window(1, 1).unwrap()).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let i = shape.index(x, y);
                assert_eq!(base.data()[i * 2], x as f32);
                assert_eq!(base.data()[i * 2 + 1], y as f32);
            }
        }
    }

    #[test]
    fn even_window_has_half_pixel_centre() {
        let shape = Shape2D::new(4, 4).unwrap();
        let base = base_grid::<f64>(shape, SamplingGrid::window(2, 2).unwrap()).unwrap();
        let i = shape.index(1, 1);
        let xs: Vec<f64> = (0..4).map(|s| base.data()[(i * 4 + s) * 2]).collect();
        assert_eq!(xs, vec![0.5, 1.5, 0.5, 1.5]);
    }

    #[test]
    fn operating_point_window() {
        let g = GridSpec::square(9).unwrap();
        assert_eq!(g.k(), 81);
        let shape = Shape2D::new(49, 49).unwrap();
        let base = base_grid::<f32>(shape, g.into()).unwrap();
        assert_eq!(base.dims(), &[2401, 81, 2]);
    }

    #[test]
    fn full_grid_enumerates_every_pixel() {
        let shape = Shape2D::new(2, 3).unwrap();
        assert_eq!(SamplingGrid::Full.k(shape), 6);
        let base = base_grid::<f64>(shape, SamplingGrid::Full).unwrap();
        for i in 0..6 {
            for s in 0..6 {
                assert_eq!(base.data()[(i * 6 + s) * 2], (s % 3) as f64);
                assert_eq!(base.data()[(i * 6 + s) * 2 + 1], (s / 3) as f64);
            }
        }
    }

    #[test]
    fn window_larger_than_map_rejected() {
        let shape = Shape2D::new(2, 2).unwrap();
        assert!(base_grid::<f32>(shape, SamplingGrid::window(3, 3).unwrap()).is_err());
    }

    #[test]
    fn offset_head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[4, 3, 3], 1.0, &mut rng);
        let k = 2;
        let zero = offset_head(&x, &Tensor::zeros(&[4, 4]), Some(&Tensor::zeros(&[4])), k).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let bias = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let shifted = offset_head(&x, &Tensor::zeros(&[4, 4]), Some(&bias), k).unwrap();
        let shape = Shape2D::new(3, 3).unwrap();
        let base = base_grid::<f32>(shape, SamplingGrid::window(1, 2).unwrap()).unwrap();
        let coords = apply_offsets(&base, &shifted).unwrap();
        for (b, c) in base.data().chunks(2).zip(coords.data().chunks(2)) {
            assert_eq!(c[0], b[0] + 1.0);
            assert_eq!(c[1], b[1]);
        }

        let w = Tensor::<f32>::randn(&[4, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[4], 1.0, &mut rng);
        assert_eq!(
            offset_head(&x, &w, Some(&b), k).unwrap(),
            conv1x1(&x, &w, Some(&b)).unwrap()
        );
        assert!(offset_head(&x, &w, Some(&b), 3).is_err());
    }

    #[test]
    fn apply_offsets_adds_elementwise() {
        let base = Tensor::<f64>::new(&[1, 1, 2], vec![4.0, 4.0]).unwrap();
        let off = Tensor::<f64>::new(&[2, 1], vec![0.5, -0.25]).unwrap();
        let c = apply_offsets(&base, &off).unwrap();
        assert_eq!(c.data(), &[4.5, 3.75]);

        let zero = Tensor::<f64>::zeros(&[2, 1]);
        assert_eq!(apply_offsets(&base, &zero).unwrap(), base);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Tensor::<f64>::randn(&[5, 3, 2], 1.0, &mut rng);
        let off = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let c = apply_offsets(&base, &off).unwrap();
        for i in 0..5 {
            for s in 0..3 {
                for axis in 0..2 {
                    let at = (i * 3 + s) * 2 + axis;
                    assert_eq!(c.data()[at], base.data()[at] + off.at(2 * s + axis, i));
                }
            }
        }
    }

    #[test]
    fn offset_norm() {
        let off = Tensor::<f64>::new(&[2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(mean_offset_norm(&off), 2.5);
    }
}

//! Bilinear reads of a feature map at fractional coordinates, with zero
//! padding outside the image.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape2D, Tensor};

/// The four corner reads behind one bilinear sample.
///
/// Corner order is `(x0, y0)`, `(x0+1, y0)`, `(x0, y0+1)`, `(x0+1, y0+1)`
/// with `x0 = floor(tx)`. `index` is `None` for corners outside the map.
/// `dx`/`dy` hold the derivatives of each weight with respect to `tx`/`ty`
/// on the floor cell, which makes the coordinate gradient right-continuous at
/// integer coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Taps<T> {
    pub index: [Option<usize>; 4],
    pub weight: [T; 4],
    pub dx: [T; 4],
    pub dy: [T; 4],
}

impl<T: Scalar> Taps<T> {
    pub fn new(tx: T, ty: T, shape: Shape2D) -> Self {
        let fx = tx.floor();
        let fy = ty.floor();
        let u = tx - fx;
        let v = ty - fy;
        let one = T::one();
        let x0 = fx.to_i64().unwrap_or(i64::MIN);
        let y0 = fy.to_i64().unwrap_or(i64::MIN);
        let at = |x: i64, y: i64| {
            let inside = x >= 0
                && y >= 0
                && (x as u64) < shape.width as u64
                && (y as u64) < shape.height as u64;
            inside.then(|| y as usize * shape.width + x as usize)
        };
        Self {
            index: [
                at(x0, y0),
                at(x0.saturating_add(1), y0),
                at(x0, y0.saturating_add(1)),
                at(x0.saturating_add(1), y0.saturating_add(1)),
            ],
            weight: [(one - u) * (one - v), u * (one - v), (one - u) * v, u * v],
            dx: [-(one - v), one - v, -v, v],
            dy: [-(one - u), -u, one - u, u],
        }
    }

    /// Interpolated value of one channel plane (length `N`).
    #[inline]
    pub fn read(&self, plane: &[T]) -> T {
        self.combine(&self.weight, plane)
    }

    /// `(d/dtx, d/dty)` of the interpolated value.
    #[inline]
    pub fn read_grad(&self, plane: &[T]) -> (T, T) {
        (self.combine(&self.dx, plane), self.combine(&self.dy, plane))
    }

    /// Accumulate `g` times each corner weight into `plane`.
    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for (idx, &w) in self.index.iter().zip(&self.weight) {
            if let Some(i) = *idx {
                plane[i] = plane[i] + w * g;
            }
        }
    }

    /// [`Taps::read`] for every channel of a pixel-major `N x D` table:
    /// `out[ch]` is the interpolated value of channel `ch`.
    #[inline]
    pub fn read_rows(&self, table: &[T], out: &mut [T]) {
        let d = out.len();
        out.iter_mut().for_each(|o| *o = T::zero());
        for (idx, &w) in self.index.iter().zip(&self.weight) {
            if let Some(i) = *idx {
                for (o, &t) in out.iter_mut().zip(&table[i * d..(i + 1) * d]) {
                    *o = *o + w * t;
                }
            }
        }
    }

    /// [`Taps::read_grad`] for every channel of a pixel-major table.
    #[inline]
    pub fn read_grad_rows(&self, table: &[T], out_dx: &mut [T], out_dy: &mut [T]) {
        let d = out_dx.len();
        out_dx.iter_mut().for_each(|o| *o = T::zero());
        out_dy.iter_mut().for_each(|o| *o = T::zero());
        for ((idx, &wx), &wy) in self.index.iter().zip(&self.dx).zip(&self.dy) {
            if let Some(i) = *idx {
                let row = &table[i * d..(i + 1) * d];
                for ((ox, oy), &t) in out_dx.iter_mut().zip(out_dy.iter_mut()).zip(row) {
                    *ox = *ox + wx * t;
                    *oy = *oy + wy * t;
                }
            }
        }
    }

    /// [`Taps::scatter`] for every channel of a pixel-major table.
    #[inline]
    pub fn scatter_rows(&self, table: &mut [T], g: &[T]) {
        let d = g.len();
        for (idx, &w) in self.index.iter().zip(&self.weight) {
            if let Some(i) = *idx {
                for (t, &gv) in table[i * d..(i + 1) * d].iter_mut().zip(g) {
                    *t = *t + w * gv;
                }
            }
        }
    }

    #[inline]
    fn combine(&self, coeff: &[T; 4], plane: &[T]) -> T {
        let mut acc = T::zero();
        for (idx, &w) in self.index.iter().zip(coeff) {
            if let Some(i) = *idx {
                acc = acc + w * plane[i];
            }
        }
        acc
    }
}

/// Sample a `D x H x W` map at `N x K x 2` coordinates, giving `N x D x K`.
pub fn bilinear_sample<T: Scalar>(f: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    if f.rank() != 3 {
        return Err(Error::Shape {
            dims: f.dims().to_vec(),
            reason: "bilinear_sample expects a D x H x W map".into(),
        });
    }
    if coords.rank() != 3 || coords.dim(2) != 2 {
        return Err(Error::Shape {
            dims: coords.dims().to_vec(),
            reason: "coordinates must be N x K x 2".into(),
        });
    }
    if let Some(index) = coords.data().iter().position(|v| v.is_nan()) {
        return Err(Error::NumericInput {
            op: "bilinear_sample",
            index,
        });
    }
    let (d, shape) = (f.dim(0), Shape2D::new(f.dim(1), f.dim(2))?);
    let plane = shape.n();
    let (n, k) = (coords.dim(0), coords.dim(1));
    let mut out = vec![T::zero(); n * d * k];
    for i in 0..n {
        for s in 0..k {
            let at = (i * k + s) * 2;
            let taps = Taps::new(coords.data()[at], coords.data()[at + 1], shape);
            for c in 0..d {
                out[(i * d + c) * k + s] = taps.read(&f.data()[c * plane..(c + 1) * plane]);
            }
        }
    }
    Tensor::new(&[n, d, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(values: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(&[1, h, w], values.to_vec()).unwrap()
    }

    fn at(f: &Tensor<f64>, x: f64, y: f64) -> f64 {
        let c = Tensor::new(&[1, 1, 2], vec![x, y]).unwrap();
        bilinear_sample(f, &c).unwrap().data()[0]
    }

    #[test]
    fn row_variants_match_per_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape2D::new(4, 5).unwrap();
        let f = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let table = f.clone().reshape(&[3, 20]).unwrap().transpose().unwrap();
        for _ in 0..50 {
            let taps = Taps::new(rng.random_range(-1.5..5.5), rng.random_range(-1.5..4.5), shape);
            let (mut out, mut gx, mut gy) = ([0.0; 3], [0.0; 3], [0.0; 3]);
            taps.read_rows(table.data(), &mut out);
            taps.read_grad_rows(table.data(), &mut gx, &mut gy);
            for c in 0..3 {
                let plane = &f.data()[c * 20..(c + 1) * 20];
                assert_eq!(out[c].to_bits(), taps.read(plane).to_bits());
                let (dx, dy) = taps.read_grad(plane);
                assert_eq!((gx[c].to_bits(), gy[c].to_bits()), (dx.to_bits(), dy.to_bits()));
            }
            let g = [0.5, -1.0, 2.0];
            let mut rows = vec![0.0; 60];
            taps.scatter_rows(&mut rows, &g);
            for c in 0..3 {
                let mut plane = vec![0.0; 20];
                taps.scatter(&mut plane, g[c]);
                for i in 0..20 {
                    assert_eq!(rows[i * 3 + c], plane[i]);
                }
            }
        }
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let coords = Tensor::new(&[1, 2, 2], vec![2.0, 3.0, 4.0, 0.0]).unwrap();
        let s = bilinear_sample(&f, &coords).unwrap();
        for c in 0..3 {
            assert_eq!(s.data()[c * 2], f.data()[c * 20 + 3 * 5 + 2]);
            assert_eq!(s.data()[c * 2 + 1], f.data()[c * 20 + 4]);
        }
    }

    #[test]
    fn midpoint_is_average() {
        let f = single(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        assert_eq!(at(&f, 0.5, 0.5), 1.5);
    }

    #[test]
    fn out_of_bounds_is_zero_padded() {
        let f = single(&[5.0, 1.0, 2.0, 3.0], 2, 2);
        assert_eq!(at(&f, -1.0, -1.0), 0.0);
        assert_eq!(at(&f, 7.3, 0.0), 0.0);
        // Half a pixel left of the image edge keeps half of the edge pixel.
        assert_eq!(at(&f, -0.5, 0.0), 2.5);
        assert_eq!(at(&f, 1.5, 1.0), 1.5);
    }

    #[test]
    fn nan_rejected() {
        let f = single(&[0.0; 4], 2, 2);
        let c = Tensor::new(&[1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            bilinear_sample(&f, &c),
            Err(Error::NumericInput { .. })
        ));
    }

    #[test]
    fn coordinate_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::<f64>::randn(&[1, 5, 6], 1.0, &mut rng);
        let shape = Shape2D::new(5, 6).unwrap();
        let eps = 1e-6;
        for _ in 0..50 {
            // Stay off the integer lattice where the derivative jumps.
            let tx = rng.random_range(-1.5..6.5f64).floor() + rng.random_range(0.1..0.9);
            let ty = rng.random_range(-1.5..5.5f64).floor() + rng.random_range(0.1..0.9);
            let (gx, gy) = Taps::new(tx, ty, shape).read_grad(f.data());
            let nx = (at(&f, tx + eps, ty) - at(&f, tx - eps, ty)) / (2.0 * eps);
            let ny = (at(&f, tx, ty + eps) - at(&f, tx, ty - eps)) / (2.0 * eps);
            assert!((gx - nx).abs() < 1e-8, "{gx} vs {nx}");
            assert!((gy - ny).abs() < 1e-8, "{gy} vs {ny}");
        }
    }

    #[test]
    fn integer_coordinate_uses_floor_cell_gradient() {
        let f = single(&[0.0, 1.0, 10.0, 20.0, 40.0, 80.0], 2, 3);
        let shape = Shape2D::new(2, 3).unwrap();
        // At x = 1 the gradient comes from the cell to the right: 10 - 1 on row 0.
        let (gx, _) = Taps::new(1.0, 0.0, shape).read_grad(f.data());
        assert_eq!(gx, 10.0 - 1.0);
    }

    #[test]
    fn scatter_is_adjoint_of_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape2D::new(4, 4).unwrap();
        let f = Tensor::<f64>::randn(&[1, 4, 4], 1.0, &mut rng);
        for _ in 0..20 {
            let taps = Taps::new(rng.random_range(-1.0..4.0), rng.random_range(-1.0..4.0), shape);
            let g = rng.random_range(-2.0..2.0);
            let mut plane = vec![0.0; 16];
            taps.scatter(&mut plane, g);
            let lhs: f64 = plane.iter().zip(f.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - g * taps.read(f.data())).abs() < 1e-12);
        }
    }
}

//! Synthetic beacon segmentation task.
//!
//! Each image is blank except for two beacon pixels of distinct classes.
//! Every pixel is labelled with the class of its nearest beacon, so most
//! labels depend on a marker many pixels away.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape2D, Tensor};

/// Task geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconSpec {
    pub shape: Shape2D,
    pub classes: usize,
    /// Minimum Euclidean distance between the two beacons, in pixels.
    pub min_separation: usize,
    /// Value written at a beacon pixel.
    pub amplitude: f64,
}

impl BeaconSpec {
    /// Beacons at least half the shorter side apart, with the amplitude
    /// that gives every input channel unit mean square over the dataset
    /// (two lit pixels spread over `classes` channels of `H W` pixels).
    pub fn new(height: usize, width: usize, classes: usize) -> Result<Self> {
        let amplitude = ((height * width * classes) as f64 / 2.0).sqrt();
        let spec = Self {
            shape: Shape2D::new(height, width)?,
            classes,
            min_separation: height.min(width) / 2,
            amplitude,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Shape2D { height, width } = self.shape;
        if height < 16 || width < 16 {
            return Err(Error::Config(format!(
                "beacon images need H, W >= 16, got {height}x{width}"
            )));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "beacon task needs 2..=255 classes, got {}",
                self.classes
            )));
        }
        let diag = ((height - 1).pow(2) + (width - 1).pow(2)) as f64;
        if (self.min_separation as f64) > diag.sqrt() {
            return Err(Error::Config(format!(
                "separation {} cannot fit in {height}x{width}",
                self.min_separation
            )));
        }
        Ok(())
    }
}

/// One image: `classes` one-hot beacon channels and a label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BeaconSample<T> {
    /// `L x H x W`
    pub input: Tensor<T>,
    /// Row-major `H x W` class indices.
    pub labels: Vec<u8>,
    /// `(x, y)` of each beacon.
    pub beacons: [(usize, usize); 2],
    pub classes: [u8; 2],
}

/// A fresh seed for stream `stream` of a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).pow(2) + a.1.abs_diff(b.1).pow(2)
}

/// `n` samples, deterministic in `seed`. Class pairs cycle through every
/// ordered pair of distinct classes from a random starting point, so beacon
/// classes are balanced.
pub fn gen_beacon_dataset<T: Scalar>(n: usize, spec: &BeaconSpec, seed: u64) -> Result<Vec<BeaconSample<T>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.classes;
    let pairs: Vec<(u8, u8)> = (0..l)
        .flat_map(|a| (0..l).filter(move |&b| b != a).map(move |b| (a as u8, b as u8)))
        .collect();
    let start = rng.random_range(0..pairs.len());
    let Shape2D { height, width } = spec.shape;
    let min2 = spec.min_separation.pow(2);

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = (rng.random_range(0..width), rng.random_range(0..height));
        let b = loop {
            let b = (rng.random_range(0..width), rng.random_range(0..height));
            if dist2(a, b) >= min2 {
                break b;
            }
        };
        let (ca, cb) = pairs[(start + i) % pairs.len()];
        let mut input = Tensor::zeros(&[l, height, width]);
        let amp = T::from_f64(spec.amplitude);
        input.data_mut()[(ca as usize * height + a.1) * width + a.0] = amp;
        input.data_mut()[(cb as usize * height + b.1) * width + b.0] = amp;
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let label = if dist2((x, y), b) < dist2((x, y), a) { cb } else { ca };
                labels.push(label);
            }
        }
        out.push(BeaconSample {
            input,
            labels,
            beacons: [a, b],
            classes: [ca, cb],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec32() -> BeaconSpec {
        BeaconSpec::new(32, 32, 3).unwrap()
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_beacon_dataset::<f32>(8, &spec32(), 11).unwrap();
        let b = gen_beacon_dataset::<f32>(8, &spec32(), 11).unwrap();
        assert_eq!(a, b);
        let c = gen_beacon_dataset::<f32>(8, &spec32(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_request() {
        assert!(gen_beacon_dataset::<f32>(0, &spec32(), 1).unwrap().is_empty());
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(BeaconSpec::new(15, 32, 3).is_err());
        assert!(BeaconSpec::new(32, 32, 1).is_err());
    }

    #[test]
    fn separation_and_two_beacons_everywhere() {
        for s in gen_beacon_dataset::<f32>(256, &spec32(), 5).unwrap() {
            let [a, b] = s.beacons;
            let d = (dist2(a, b) as f64).sqrt();
            assert!(d >= 16.0, "beacons {a:?} {b:?} only {d} apart");
            assert_ne!(s.classes[0], s.classes[1]);
            let lit: Vec<usize> = s
                .input
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(lit.len(), 2);
        }
    }

    #[test]
    fn labels_follow_nearest_beacon() {
        for s in gen_beacon_dataset::<f64>(16, &spec32(), 9).unwrap() {
            for y in 0..32 {
                for x in 0..32 {
                    let da = (x as f64 - s.beacons[0].0 as f64).hypot(y as f64 - s.beacons[0].1 as f64);
                    let db = (x as f64 - s.beacons[1].0 as f64).hypot(y as f64 - s.beacons[1].1 as f64);
                    let want = if db < da { s.classes[1] } else { s.classes[0] };
                    assert_eq!(s.labels[y * 32 + x], want);
                }
            }
            let [a, b] = s.beacons;
            assert_eq!(s.labels[a.1 * 32 + a.0], s.classes[0]);
            assert_eq!(s.labels[b.1 * 32 + b.0], s.classes[1]);
        }
    }

    #[test]
    fn classes_balanced_within_ten_percent() {
        let data = gen_beacon_dataset::<f32>(256, &spec32(), 2).unwrap();
        let mut beacon = [0usize; 3];
        let mut pixel = [0usize; 3];
        for s in &data {
            s.classes.iter().for_each(|&c| beacon[c as usize] += 1);
            s.labels.iter().for_each(|&c| pixel[c as usize] += 1);
        }
        let per_beacon = 2.0 * 256.0 / 3.0;
        let per_pixel = 256.0 * 1024.0 / 3.0;
        for c in 0..3 {
            assert!((beacon[c] as f64 - per_beacon).abs() <= 0.1 * per_beacon, "{beacon:?}");
            assert!((pixel[c] as f64 - per_pixel).abs() <= 0.1 * per_pixel, "{pixel:?}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 7), derive_seed(1, 7));
    }
}

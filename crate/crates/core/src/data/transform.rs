use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Raster, Sample, OPTICAL_CHANNELS};
use crate::error::{Error, Result};

/// Crops every raster of the sample with one shared random window.
pub fn random_crop<R: Rng>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h || size > w {
        return Err(Error::Argument(format!(
            "crop size {size} does not fit a {h}x{w} sample"
        )));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok(Sample {
        sar: sample.sar.window(top, left, size, size),
        optical: sample.optical.as_ref().map(|o| o.window(top, left, size, size)),
        label: sample.label.window(top, left, size, size),
        ..sample.clone()
    })
}

/// The eight symmetries of a square: rotations by multiples of 90 degrees
/// and the four reflections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Dihedral {
        Self::ALL[rng.gen_range(0..Self::ALL.len())]
    }

    /// Source pixel `(row, col)` that lands on output pixel `(i, j)` of an `n x n` image.
    #[inline]
    fn source(self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let last = n - 1;
        match self {
            Dihedral::Identity => (i, j),
            Dihedral::Rot90 => (j, last - i),
            Dihedral::Rot180 => (last - i, last - j),
            Dihedral::Rot270 => (last - j, i),
            Dihedral::FlipHorizontal => (i, last - j),
            Dihedral::FlipVertical => (last - i, j),
            Dihedral::Transpose => (j, i),
            Dihedral::AntiTranspose => (last - j, last - i),
        }
    }

    pub fn apply(self, raster: &Raster) -> Result<Raster> {
        if raster.height != raster.width {
            return Err(Error::Argument(format!(
                "dihedral transforms need a square raster, got {}x{}",
                raster.height, raster.width
            )));
        }
        let n = raster.height;
        let mut out = Raster::zeros(raster.channels, n, n);
        for c in 0..raster.channels {
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = self.source(i, j, n);
                    out.set(c, i, j, raster.get(c, si, sj));
                }
            }
        }
        Ok(out)
    }
}

/// Applies the given symmetry identically to every raster of the sample.
pub fn augment_with(sample: &Sample, element: Dihedral) -> Result<Sample> {
    Ok(Sample {
        sar: element.apply(&sample.sar)?,
        optical: sample.optical.as_ref().map(|o| element.apply(o)).transpose()?,
        label: element.apply(&sample.label)?,
        ..sample.clone()
    })
}

/// Applies a uniformly drawn flip/rotation. Non-square samples are rejected
/// before drawing.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    if sample.height() != sample.width() {
        return Err(Error::Argument(format!(
            "augmentation needs a square patch, got {}x{}",
            sample.height(),
            sample.width()
        )));
    }
    augment_with(sample, Dihedral::sample(rng))
}

/// Substitutes an all-zero optical raster when the optical image is missing.
/// The availability flag is left untouched.
pub fn zero_fill_optical(sample: &Sample) -> Sample {
    if sample.optical.is_some() {
        return sample.clone();
    }
    Sample {
        optical: Some(Raster::zeros(OPTICAL_CHANNELS, sample.height(), sample.width())),
        ..sample.clone()
    }
}

/// Hides the optical raster of a multi-modal sample with probability `rate`.
/// The draw happens for every sample so the random stream does not depend
/// on availability.
pub fn hide_optical<R: Rng>(sample: Sample, rate: f64, rng: &mut R) -> Sample {
    let hide = rng.gen_bool(rate.clamp(0.0, 1.0));
    if hide && sample.optical_available {
        sample.without_optical()
    } else {
        sample
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_uses_one_window_for_all_rasters() {
        let s = sample(128, 128, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_crop(&s, 64, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (64, 64));
        // the ramp rasters encode their own coordinates, so the window can be recovered
        let plane = 128 * 128;
        let first = (c.sar.get(0, 0, 0) * (2 * plane) as f32).round() as usize;
        let (top, left) = (first / 128, first % 128);
        assert_eq!(c.sar, s.sar.window(top, left, 64, 64));
        assert_eq!(c.optical.unwrap(), s.optical.unwrap().window(top, left, 64, 64));
        assert_eq!(c.label, s.label.window(top, left, 64, 64));
        assert_eq!((c.site_id, c.optical_available), (s.site_id, s.optical_available));
    }

    #[test]
    fn crop_edge_cases() {
        let s = sample(64, 64, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&s, 64, &mut rng).unwrap(), s);
        assert!(matches!(random_crop(&s, 65, &mut rng), Err(Error::Argument(_))));

        let s = sample(96, 96, true);
        let a = random_crop(&s, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&s, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_by_180_reverses_coordinates() {
        let s = sample(8, 8, true);
        let r = augment_with(&s, Dihedral::Rot180).unwrap();
        for raster in [(&s.sar, &r.sar), (&s.label, &r.label)] {
            for c in 0..raster.0.channels {
                for i in 0..8 {
                    for j in 0..8 {
                        assert_eq!(raster.1.get(c, 7 - i, 7 - j), raster.0.get(c, i, j));
                    }
                }
            }
        }
        assert_eq!(augment_with(&s, Dihedral::Identity).unwrap(), s);
    }

    #[test]
    fn every_element_is_undone_by_its_inverse() {
        let s = sample(6, 6, true);
        for g in Dihedral::ALL {
            let there = augment_with(&s, g).unwrap();
            assert_eq!(augment_with(&there, g.inverse()).unwrap(), s, "{g:?}");
        }
    }

    #[test]
    fn elements_are_distinct() {
        let s = sample(5, 5, false);
        let images: Vec<_> = Dihedral::ALL.iter().map(|g| g.apply(&s.sar).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j]);
            }
        }
    }

    #[test]
    fn non_square_input_is_rejected() {
        let s = sample(4, 6, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(&s, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_fill_only_touches_missing_samples() {
        let missing = sample(8, 8, false);
        let filled = zero_fill_optical(&missing);
        let o = filled.optical.as_ref().unwrap();
        assert_eq!((o.channels, o.height, o.width), (OPTICAL_CHANNELS, 8, 8));
        assert!(o.data.iter().all(|&v| v == 0.0));
        assert!(!filled.optical_available);

        let full = sample(8, 8, true);
        assert_eq!(zero_fill_optical(&full), full);
    }
}

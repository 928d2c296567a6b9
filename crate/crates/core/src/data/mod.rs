//! Samples, rasters and datasets.
//!
//! A [`Sample`] is one timestamp of one site: a 2-channel SAR raster
//! (VV, VH), an optional 4-channel optical raster (blue, green, red, NIR),
//! a binary building mask and a flag recording whether the optical image
//! was available. All rasters are `channels x height x width`, row-major.

mod storage;
mod transform;

pub use storage::{
    load_dataset, write_dataset, ChannelNorm, DatasetManifest, Normalization, SampleRecord,
    FORMAT_VERSION, MANIFEST_FILE, RASTER_DTYPE,
};
pub use transform::{augment, augment_with, hide_optical, random_crop, zero_fill_optical, Dihedral};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SAR_CHANNELS: usize = 2;
pub const OPTICAL_CHANNELS: usize = 4;
pub const LABEL_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values do not form a {channels}x{height}x{width} raster",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-window `[top, top+height) x [left, left+width)` of every channel.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Raster {
        let mut out = Raster::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src = &self.data[(c * self.height + top + y) * self.width + left..][..width];
                out.data[(c * height + y) * width..][..width].copy_from_slice(src);
            }
        }
        out
    }

    /// Pads every channel to `height x width` by mirroring about the last
    /// row/column (reflection without repeating the edge pixel).
    pub fn pad_reflect(&self, height: usize, width: usize) -> Raster {
        assert!(height >= self.height && width >= self.width);
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut out = Raster::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = reflect(y, self.height);
                for x in 0..width {
                    out.set(c, y, x, self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sar: Raster,
    pub optical: Option<Raster>,
    pub label: Raster,
    pub optical_available: bool,
    pub site_id: String,
    pub timestamp_index: u32,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.sar.height
    }

    pub fn width(&self) -> usize {
        self.sar.width
    }

    /// Checks channel counts, matching spatial extents, the availability
    /// flag, binary labels and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.sar.height, self.sar.width);
        let bad = |msg: String| Err(Error::Argument(format!("{}/t{}: {msg}", self.site_id, self.timestamp_index)));
        if self.sar.channels != SAR_CHANNELS {
            return bad(format!("SAR raster has {} channels", self.sar.channels));
        }
        if self.label.channels != LABEL_CHANNELS || (self.label.height, self.label.width) != (h, w) {
            return bad("label raster does not match the SAR extent".into());
        }
        match (&self.optical, self.optical_available) {
            (Some(o), true) => {
                if o.channels != OPTICAL_CHANNELS || (o.height, o.width) != (h, w) {
                    return bad("optical raster does not match the SAR extent".into());
                }
            }
            (None, false) => {}
            (Some(_), false) => return bad("optical raster present but flagged unavailable".into()),
            (None, true) => return bad("optical flagged available but missing".into()),
        }
        if self.label.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("label contains values other than 0 and 1".into());
        }
        let finite = self.sar.is_finite() && self.optical.as_ref().map_or(true, Raster::is_finite);
        if !finite {
            return bad("raster contains NaN or infinite values".into());
        }
        Ok(())
    }

    /// Copy with the optical raster removed and the flag cleared.
    pub fn without_optical(&self) -> Sample {
        Sample {
            optical: None,
            optical_available: false,
            ..self.clone()
        }
    }
}

/// An immutable, index-addressable split of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(split: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            split: split.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.samples.get(i)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let missing = self.samples.iter().filter(|s| !s.optical_available).count();
        missing as f64 / self.samples.len() as f64
    }

    /// Copy of the dataset with every optical raster removed.
    pub fn without_optical(&self) -> Dataset {
        Dataset {
            split: self.split.clone(),
            samples: self.samples.iter().map(Sample::without_optical).collect(),
        }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines several integers into one well-mixed seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Independent random source for one data worker in one epoch.
pub fn worker_rng(global_seed: u64, worker: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[global_seed, worker, epoch]))
}

//! Synthetic multi-modal scenes with known cross-modal structure.
//!
//! Each site has a fixed set of rectangular buildings, each with an
//! appearance time, so the building mask only grows along the time series.
//! For one timestamp:
//!
//! * `label` is the union of buildings that have appeared by `t`;
//! * SAR is `base + gain * box3(label)` per channel on top of a smooth
//!   site-specific background, multiplied by unit-mean gamma speckle;
//! * optical channel `k` is `sigmoid(a_k * mean3(VV) + b_k * mean3(VH) +
//!   c_k * label + d_k)` plus Gaussian noise with std `cross_modal_noise`,
//!   where `mean3` is the 3x3 local mean (edges clamped). This map is
//!   [`optical_response`]; with zero noise the optical raster equals it
//!   exactly.
//! * the optical raster is dropped with probability `dropout_rate`, drawn
//!   from a stream that never sees the label.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, write_dataset, DatasetManifest, Normalization, Raster, Sample, OPTICAL_CHANNELS,
    SAR_CHANNELS,
};
use crate::error::{Error, Result};

pub const MIN_TILE_SIZE: usize = 64;

/// Split proportions (train : validation : test).
const SPLIT_RATIO: [usize; 3] = [41, 15, 14];

/// `(a, b, c, d)` per optical band: weights on local VV mean, local VH mean,
/// the label, and the offset inside the sigmoid.
const OPTICAL_COEFFS: [[f32; 4]; OPTICAL_CHANNELS] = [
    [1.5, -1.0, 2.0, -1.5], // blue
    [1.0, 0.5, 1.5, -1.2],  // green
    [2.0, 0.5, 2.5, -2.0],  // red
    [-1.0, 2.0, -2.0, 0.5], // near infrared
];

/// `(base, background gain, building gain)` per SAR channel.
const SAR_COEFFS: [[f32; 3]; SAR_CHANNELS] = [[0.2, 0.25, 0.45], [0.1, 0.15, 0.3]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_sites: usize,
    pub timestamps_per_site: usize,
    pub tile_size: usize,
    pub dropout_rate: f64,
    /// Std of the additive Gaussian noise on the optical raster.
    pub cross_modal_noise: f64,
    /// Std of the unit-mean multiplicative speckle on SAR; 0 disables it.
    pub speckle_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_sites: 40,
            timestamps_per_site: 10,
            tile_size: 64,
            dropout_rate: 0.12,
            cross_modal_noise: 0.02,
            speckle_std: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sites == 0 || self.timestamps_per_site == 0 {
            return Err(Error::Argument("site and timestamp counts must be positive".into()));
        }
        if self.tile_size < MIN_TILE_SIZE {
            return Err(Error::Argument(format!(
                "tile size {} is below the minimum of {MIN_TILE_SIZE}",
                self.tile_size
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument(format!(
                "dropout rate {} is outside [0, 1]",
                self.dropout_rate
            )));
        }
        if !(self.cross_modal_noise >= 0.0) || !(self.speckle_std >= 0.0) {
            return Err(Error::Argument("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn site_id(index: usize) -> String {
    format!("site_{index:03}")
}

#[derive(Clone, Copy, Debug)]
struct Building {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    appears_at: u32,
}

#[derive(Clone, Copy, Debug)]
struct Background {
    freq_x: f32,
    freq_y: f32,
    phase_x: f32,
    phase_y: f32,
}

struct Site {
    buildings: Vec<Building>,
    background: Background,
}

fn site_layout(config: &SimConfig, site_index: usize) -> Site {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 1, site_index as u64]));
    let n = config.tile_size;
    let count = (n * n) / 110;
    let last_t = config.timestamps_per_site as u32;
    let buildings = (0..count)
        .map(|_| {
            let height = rng.gen_range(3..=9);
            let width = rng.gen_range(3..=9);
            let appears_at = if rng.gen_bool(0.3) { 1 } else { rng.gen_range(1..=last_t) };
            Building {
                top: rng.gen_range(0..=n - height),
                left: rng.gen_range(0..=n - width),
                height,
                width,
                appears_at,
            }
        })
        .collect();
    let tau = std::f32::consts::TAU;
    let background = Background {
        freq_x: rng.gen_range(0.5..2.5),
        freq_y: rng.gen_range(0.5..2.5),
        phase_x: rng.gen_range(0.0..tau),
        phase_y: rng.gen_range(0.0..tau),
    };
    Site {
        buildings,
        background,
    }
}

fn building_mask(site: &Site, n: usize, t: u32) -> Raster {
    let mut label = Raster::zeros(1, n, n);
    for b in site.buildings.iter().filter(|b| b.appears_at <= t) {
        for y in b.top..b.top + b.height {
            for x in b.left..b.left + b.width {
                label.set(0, y, x, 1.0);
            }
        }
    }
    label
}

/// 3x3 mean of one channel with edge clamping.
fn local_mean(r: &Raster, c: usize) -> Vec<f32> {
    let (h, w) = (r.height, r.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    s += r.get(c, yy, xx);
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// The noiseless optical image implied by a SAR raster and a building mask.
pub fn optical_response(sar: &Raster, label: &Raster) -> Raster {
    let (h, w) = (sar.height, sar.width);
    let vv = local_mean(sar, 0);
    let vh = local_mean(sar, 1);
    let mut out = Raster::zeros(OPTICAL_CHANNELS, h, w);
    let lab = label.channel(0);
    for (k, [a, b, c, d]) in OPTICAL_COEFFS.iter().enumerate() {
        let plane = &mut out.data[k * h * w..(k + 1) * h * w];
        for p in 0..h * w {
            plane[p] = sigmoid(a * vv[p] + b * vh[p] + c * lab[p] + d);
        }
    }
    out
}

/// Deterministic scene for `(site_index, t)`, `t` in `1..=timestamps_per_site`.
pub fn generate_scene(config: &SimConfig, site_index: usize, t: u32) -> Sample {
    assert!(site_index < config.num_sites, "site index out of range");
    assert!(
        t >= 1 && t as usize <= config.timestamps_per_site,
        "timestamp out of range"
    );
    let n = config.tile_size;
    let site = site_layout(config, site_index);
    let label = building_mask(&site, n, t);
    let blurred = local_mean(&label, 0);

    let tile_seed = |stream: u64| derive_seed(&[config.seed, stream, site_index as u64, t as u64]);
    let mut speckle_rng = ChaCha8Rng::seed_from_u64(tile_seed(2));
    let speckle = (config.speckle_std > 0.0).then(|| {
        let shape = 1.0 / (config.speckle_std * config.speckle_std);
        Gamma::new(shape as f32, (1.0 / shape) as f32).expect("valid gamma parameters")
    });
    let bg = site.background;
    let tau = std::f32::consts::TAU;
    let mut sar = Raster::zeros(SAR_CHANNELS, n, n);
    for (c, [base, bg_gain, gain]) in SAR_COEFFS.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let fx = x as f32 / n as f32;
                let fy = y as f32 / n as f32;
                let field = 0.5
                    + 0.5
                        * (tau * bg.freq_x * fx + bg.phase_x).sin()
                        * (tau * bg.freq_y * fy + bg.phase_y).cos();
                let clean = base + bg_gain * field + gain * blurred[y * n + x];
                let factor = speckle.as_ref().map_or(1.0, |g| g.sample(&mut speckle_rng));
                sar.set(c, y, x, clean * factor);
            }
        }
    }

    let mut optical = optical_response(&sar, &label);
    if config.cross_modal_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(3));
        let noise = Normal::new(0.0f32, config.cross_modal_noise as f32).expect("valid std");
        optical.data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let mut avail_rng = ChaCha8Rng::seed_from_u64(tile_seed(4));
    let optical_available = !avail_rng.gen_bool(config.dropout_rate);
    Sample {
        sar,
        optical: optical_available.then_some(optical),
        label,
        optical_available,
        site_id: site_id(site_index),
        timestamp_index: t,
    }
}

/// Sites per split for the 41:15:14 ratio, rounded, with every split non-empty.
pub fn split_sizes(num_sites: usize) -> Result<(usize, usize, usize)> {
    if num_sites < 3 {
        return Err(Error::Argument(format!(
            "{num_sites} sites cannot form three non-empty splits"
        )));
    }
    let total: usize = SPLIT_RATIO.iter().sum();
    let share = |part: usize| ((num_sites * part) as f64 / total as f64).round().max(1.0) as usize;
    let val = share(SPLIT_RATIO[1]);
    let test = share(SPLIT_RATIO[2]);
    Ok((num_sites - val - test, val, test))
}

/// All samples of all sites, grouped by split, sites in index order.
pub fn generate_splits(config: &SimConfig) -> Result<BTreeMap<String, Vec<Sample>>> {
    config.validate()?;
    let (train, val, _) = split_sizes(config.num_sites)?;
    let mut splits: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for site in 0..config.num_sites {
        let split = if site < train {
            "train"
        } else if site < train + val {
            "val"
        } else {
            "test"
        };
        let entry = splits.entry(split.to_string()).or_default();
        for t in 1..=config.timestamps_per_site as u32 {
            entry.push(generate_scene(config, site, t));
        }
    }
    Ok(splits)
}

/// Generates the dataset and writes it to `out_root` with identity normalisation.
pub fn generate_dataset(config: &SimConfig, out_root: &Path) -> Result<DatasetManifest> {
    let splits = generate_splits(config)?;
    write_dataset(out_root, &splits, Normalization::identity())
}

//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<site_id>/t<NN>_sar.bin
//! <root>/<site_id>/t<NN>_optical.bin   (only when the optical image exists)
//! <root>/<site_id>/t<NN>_label.bin
//! ```
//!
//! Every `.bin` file is a headerless array of little-endian `f32` in
//! channel, row, column order. Shapes, splits and the per-channel
//! normalisation live in the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Raster, Sample, LABEL_CHANNELS, OPTICAL_CHANNELS, SAR_CHANNELS};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RASTER_DTYPE: &str = "float32-le";

/// `v' = (v - offset[c]) * scale[c]`, optionally clipped to `[clip.0, clip.1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub offset: Vec<f32>,
    pub scale: Vec<f32>,
    #[serde(default)]
    pub clip: Option<(f32, f32)>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            offset: vec![0.0; channels],
            scale: vec![1.0; channels],
            clip: None,
        }
    }

    fn apply(&self, raster: &mut Raster) -> Result<()> {
        if self.offset.len() != raster.channels || self.scale.len() != raster.channels {
            return Err(Error::Format(format!(
                "normalisation describes {} channels, raster has {}",
                self.offset.len(),
                raster.channels
            )));
        }
        let plane = raster.height * raster.width;
        for c in 0..raster.channels {
            let (off, scale) = (self.offset[c], self.scale[c]);
            for v in &mut raster.data[c * plane..(c + 1) * plane] {
                let mut x = (*v - off) * scale;
                if let Some((lo, hi)) = self.clip {
                    x = x.clamp(lo, hi);
                }
                *v = x;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub sar: ChannelNorm,
    pub optical: ChannelNorm,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            sar: ChannelNorm::identity(SAR_CHANNELS),
            optical: ChannelNorm::identity(OPTICAL_CHANNELS),
        }
    }

    /// Backscatter in dB clipped to [-25, 0] and mapped to [0, 1];
    /// reflectance divided by 10000 and clipped to [0, 1].
    pub fn sentinel() -> Self {
        Self {
            sar: ChannelNorm {
                offset: vec![-25.0; SAR_CHANNELS],
                scale: vec![1.0 / 25.0; SAR_CHANNELS],
                clip: Some((0.0, 1.0)),
            },
            optical: ChannelNorm {
                offset: vec![0.0; OPTICAL_CHANNELS],
                scale: vec![1e-4; OPTICAL_CHANNELS],
                clip: Some((0.0, 1.0)),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub site_id: String,
    pub timestamp_index: u32,
    pub height: usize,
    pub width: usize,
    pub sar: String,
    pub optical: Option<String>,
    pub label: String,
    pub optical_available: bool,
}

impl SampleRecord {
    fn name(&self) -> String {
        format!("{}/t{:02}", self.site_id, self.timestamp_index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounts {
    pub sar: usize,
    pub optical: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub dtype: String,
    pub channels: ChannelCounts,
    pub normalization: Normalization,
    pub splits: BTreeMap<String, Vec<SampleRecord>>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match value.get("format_version").and_then(|v| v.as_str()) {
            Some(FORMAT_VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "{}: unsupported format_version {other:?}, expected \"{FORMAT_VERSION}\"",
                    path.display()
                )))
            }
        }
        let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| {
            Error::Format(format!(
                "{}: manifest does not match schema version {FORMAT_VERSION}: {e}",
                path.display()
            ))
        })?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn check(&self) -> Result<()> {
        if self.dtype != RASTER_DTYPE {
            return Err(Error::Format(format!(
                "unsupported raster dtype `{}`, expected `{RASTER_DTYPE}`",
                self.dtype
            )));
        }
        let expected = ChannelCounts {
            sar: SAR_CHANNELS,
            optical: OPTICAL_CHANNELS,
            label: LABEL_CHANNELS,
        };
        if self.channels != expected {
            return Err(Error::Format(format!(
                "unexpected channel counts {:?}",
                self.channels
            )));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (split, records) in &self.splits {
            for r in records {
                if let Some(prev) = owner.insert(&r.site_id, split) {
                    if prev != split {
                        return Err(Error::Format(format!(
                            "site `{}` appears in splits `{prev}` and `{split}`",
                            r.site_id
                        )));
                    }
                }
                if !seen.insert((&r.site_id, r.timestamp_index)) {
                    return Err(Error::Format(format!("duplicate record `{}`", r.name())));
                }
                if r.optical.is_some() != r.optical_available {
                    return Err(Error::Format(format!(
                        "record `{}`: optical path and availability flag disagree",
                        r.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_sites(&self, split: &str) -> BTreeSet<String> {
        self.splits
            .get(split)
            .map(|rs| rs.iter().map(|r| r.site_id.clone()).collect())
            .unwrap_or_default()
    }
}

fn read_raster(root: &Path, rel: &str, channels: usize, record: &SampleRecord) -> Result<Raster> {
    let path = root.join(rel);
    let load_err = |reason: String| Error::Load {
        record: record.name(),
        reason,
    };
    let bytes =
        fs::read(&path).map_err(|e| load_err(format!("cannot read {}: {e}", path.display())))?;
    let expected = channels * record.height * record.width * 4;
    if bytes.len() != expected {
        return Err(load_err(format!(
            "{} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Raster::new(channels, record.height, record.width, data)
}

fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in &raster.data {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Loads one split, applying the manifest's normalisation.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let manifest = DatasetManifest::read(root)?;
    let records = manifest.splits.get(split).ok_or_else(|| {
        Error::Argument(format!(
            "split `{split}` not in manifest (available: {:?})",
            manifest.splits.keys().collect::<Vec<_>>()
        ))
    })?;
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let mut sar = read_raster(root, &r.sar, SAR_CHANNELS, r)?;
        let label = read_raster(root, &r.label, LABEL_CHANNELS, r)?;
        let mut optical = match &r.optical {
            Some(p) => Some(read_raster(root, p, OPTICAL_CHANNELS, r)?),
            None => None,
        };
        manifest.normalization.sar.apply(&mut sar)?;
        if let Some(o) = optical.as_mut() {
            manifest.normalization.optical.apply(o)?;
        }
        let sample = Sample {
            sar,
            optical,
            label,
            optical_available: r.optical_available,
            site_id: r.site_id.clone(),
            timestamp_index: r.timestamp_index,
        };
        sample.validate().map_err(|e| Error::Load {
            record: r.name(),
            reason: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(Dataset::from_samples(split, samples))
}

/// Writes raw (un-normalised) samples and their manifest under `root`.
pub fn write_dataset(
    root: &Path,
    splits: &BTreeMap<String, Vec<Sample>>,
    normalization: Normalization,
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        dtype: RASTER_DTYPE.into(),
        channels: ChannelCounts {
            sar: SAR_CHANNELS,
            optical: OPTICAL_CHANNELS,
            label: LABEL_CHANNELS,
        },
        normalization,
        splits: BTreeMap::new(),
    };
    for (split, samples) in splits {
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            s.validate()?;
            let dir = root.join(&s.site_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel = |kind: &str| format!("{}/t{:02}_{kind}.bin", s.site_id, s.timestamp_index);
            write_raster(&root.join(rel("sar")), &s.sar)?;
            write_raster(&root.join(rel("label")), &s.label)?;
            if let Some(o) = &s.optical {
                write_raster(&root.join(rel("optical")), o)?;
            }
            records.push(SampleRecord {
                site_id: s.site_id.clone(),
                timestamp_index: s.timestamp_index,
                height: s.height(),
                width: s.width(),
                sar: rel("sar"),
                optical: s.optical.as_ref().map(|_| rel("optical")),
                label: rel("label"),
                optical_available: s.optical_available,
            });
        }
        manifest.splits.insert(split.clone(), records);
    }
    manifest.check()?;
    manifest.write(root)?;
    Ok(manifest)
}

//! Feature and label files, dataset manifests and the in-memory dataset.
//!
//! Feature files (`TSFV`) hold a little-endian header `magic, version, T, D`
//! followed by `T·D` row-major `f32` values. Label files (`TSFL`) hold
//! `magic, version, T, C` followed by `T·C` bytes, each 0 or 1. Manifests are
//! JSON and reference both files by paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::LabelMask;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"TSFV";
pub const LABEL_MAGIC: [u8; 4] = *b"TSFL";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

fn encode_header(magic: [u8; 4], rows: usize, cols: usize, out: &mut Vec<u8>) -> Result<()> {
    let rows32 = u32::try_from(rows).map_err(|_| Error::InvalidArgument(format!("{rows} rows exceed u32")))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::InvalidArgument(format!("{cols} columns exceed u32")))?;
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    Ok(())
}

/// Validates a header and returns `(rows, cols, payload)`.
fn decode_header<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    elem_size: usize,
    path: &Path,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let (rows, cols) = (word(8), word(12));
    let overflow = || Error::DimensionOverflow {
        path: path.into(),
        rows: rows.into(),
        cols: cols.into(),
    };
    let payload_len = (rows as usize)
        .checked_mul(cols as usize)
        .and_then(|n| n.checked_mul(elem_size))
        .filter(|&n| n <= isize::MAX as usize - HEADER_LEN)
        .ok_or_else(overflow)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected: (HEADER_LEN + payload_len) as u64,
            found: bytes.len() as u64,
        });
    }
    if payload.len() > payload_len {
        return Err(Error::Format {
            path: path.into(),
            message: format!("{} trailing bytes after payload", payload.len() - payload_len),
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: path.into(),
            message: format!("empty matrix {rows}x{cols}"),
        });
    }
    Ok((rows as usize, cols as usize, payload))
}

pub fn encode_features(v: &Array2<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    encode_header(FEATURE_MAGIC, v.nrows(), v.ncols(), &mut out)?;
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// `path` only labels errors.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let (rows, cols, payload) = decode_header(bytes, FEATURE_MAGIC, 4, path)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("payload length checked"))
}

pub fn encode_labels(z: &LabelMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + z.frames() * z.classes());
    encode_header(LABEL_MAGIC, z.frames(), z.classes(), &mut out)?;
    out.extend(z.view().iter());
    Ok(out)
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelMask> {
    let (rows, cols, payload) = decode_header(bytes, LABEL_MAGIC, 1, path)?;
    if let Some(pos) = payload.iter().position(|&b| b > 1) {
        return Err(Error::Format {
            path: path.into(),
            message: format!("label byte {} at offset {} is not 0 or 1", payload[pos], HEADER_LEN + pos),
        });
    }
    let z = Array2::from_shape_vec((rows, cols), payload.to_vec()).expect("payload length checked");
    LabelMask::new(z)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    decode_features(&read_bytes(path)?, path)
}

pub fn save_features(path: impl AsRef<Path>, v: &Array2<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_features(v)?)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    decode_labels(&read_bytes(path)?, path)
}

pub fn save_labels(path: impl AsRef<Path>, z: &LabelMask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(z)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub feature_path: String,
    pub label_path: String,
    #[serde(rename = "T")]
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_bytes(path)?;
        let m: DatasetManifest = serde_json::from_slice(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version: m.version,
            });
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_vec_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        text.push(b'\n');
        write_bytes(path, &text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    /// `T×D`; every value is exactly representable as `f32`.
    pub features: Array2<f64>,
    pub labels: LabelMask,
}

impl Video {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    pub videos: Vec<Video>,
}

impl Dataset {
    /// Checks that every video agrees with the declared `D` and `C`.
    pub fn new(class_names: Vec<String>, feature_dim: usize, videos: Vec<Video>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Dataset("dataset has no videos".into()));
        }
        if class_names.is_empty() || feature_dim == 0 {
            return Err(Error::Dataset("dataset needs at least one class and one feature".into()));
        }
        for v in &videos {
            if v.features.ncols() != feature_dim {
                return Err(Error::Dataset(format!(
                    "video {}: feature dimension {} does not match {}",
                    v.id,
                    v.features.ncols(),
                    feature_dim
                )));
            }
            if v.labels.classes() != class_names.len() {
                return Err(Error::Dataset(format!(
                    "video {}: {} label classes do not match {}",
                    v.id,
                    v.labels.classes(),
                    class_names.len()
                )));
            }
            if v.labels.frames() != v.frames() || v.frames() == 0 {
                return Err(Error::Dataset(format!(
                    "video {}: {} feature frames and {} label frames",
                    v.id,
                    v.frames(),
                    v.labels.frames()
                )));
            }
        }
        Ok(Dataset {
            class_names,
            feature_dim,
            videos,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(Video::frames).sum()
    }

    /// Fraction of frames labelled with each class.
    pub fn positive_rates(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes()];
        for v in &self.videos {
            for row in v.labels.view().rows() {
                for (n, &b) in counts.iter_mut().zip(row) {
                    *n += b as usize;
                }
            }
        }
        let total = self.total_frames() as f64;
        counts.into_iter().map(|n| n as f64 / total).collect()
    }

    /// Loads every file named by the manifest at `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().unwrap_or(Path::new(""));
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for entry in &manifest.videos {
            let features = load_features(root.join(&entry.feature_path))?;
            let labels = load_labels(root.join(&entry.label_path))?;
            if features.nrows() != entry.frames {
                return Err(Error::Dataset(format!(
                    "video {}: manifest declares {} frames, feature file has {}",
                    entry.id,
                    entry.frames,
                    features.nrows()
                )));
            }
            videos.push(Video {
                id: entry.id.clone(),
                features: features.mapv(f64::from),
                labels,
            });
        }
        Dataset::new(manifest.class_names, manifest.feature_dim, videos)
    }

    /// Writes `<dir>/<name>.json` and one feature and label file per video
    /// under `<dir>/<name>/`, returning the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::with_capacity(self.videos.len());
        for v in &self.videos {
            let feature_path = format!("{name}/{}.tsfv", v.id);
            let label_path = format!("{name}/{}.tsfl", v.id);
            save_features(dir.join(&feature_path), &v.features.mapv(|x| x as f32))?;
            save_labels(dir.join(&label_path), &v.labels)?;
            entries.push(VideoEntry {
                id: v.id.clone(),
                feature_path,
                label_path,
                frames: v.frames(),
            });
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            class_names: self.class_names.clone(),
            feature_dim: self.feature_dim,
            videos: entries,
        };
        let path = dir.join(format!("{name}.json"));
        manifest.write(&path)?;
        Ok(path)
    }
}

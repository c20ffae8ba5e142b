//! TIDT tensor files, level bundles and ground-truth files.
//!
//! A TIDT file is
//!
//! ```text
//! "TIDT" | version: u32 | ndim: u32 | dims: [u32; ndim] | payload: [f32]
//! ```
//!
//! with every integer and float little-endian and the payload row-major.
//! A level bundle is a JSON document naming three TIDT files relative to
//! its own directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, Result, TidError};
use crate::geometry::{pred_box_at, BBox, GroundTruth};
use crate::tensor::{Cell, Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"TIDT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take_u32(bytes: &[u8], offset: usize) -> Result<u32, DecodeError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(DecodeError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            return Err(DecodeError::Truncated {
                expected: 4,
                found: bytes.len(),
            })
        }
    };
    if magic != MAGIC {
        return Err(DecodeError::BadMagic { found: magic });
    }
    let version = take_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let rank = take_u32(bytes, 8)?;
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(DecodeError::BadRank(rank));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for axis in 0..rank as usize {
        let d = take_u32(bytes, 12 + 4 * axis)? as usize;
        if d == 0 {
            return Err(DecodeError::ZeroExtent { axis });
        }
        dims.push(d);
    }
    let header = 12 + 4 * rank as usize;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    let expected = count.saturating_mul(4).saturating_add(header);
    if bytes.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DecodeError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite { index });
    }
    Ok(Tensor::new(dims, data).expect("validated above"))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| TidError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| TidError::io(path, e))?;
    tmp.persist(path).map_err(|e| TidError::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TidError::io(path, e))?;
    decode_tensor(&bytes).map_err(|kind| TidError::Decode {
        path: path.to_path_buf(),
        kind,
    })
}

/// One FPN level's detector outputs for a single model.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBundle {
    pub level_id: u32,
    /// C×H×W
    pub feature: Tensor,
    /// H×W×K, each score in [0, 1]
    pub class_scores: Tensor,
    /// H×W×4, corner form in feature cells
    pub pred_boxes: Tensor,
}

impl LevelBundle {
    pub fn new(
        level_id: u32,
        feature: Tensor,
        class_scores: Tensor,
        pred_boxes: Tensor,
    ) -> Result<Self> {
        let bundle = Self {
            level_id,
            feature,
            class_scores,
            pred_boxes,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.feature.dims3()?;
        let (sh, sw, k) = self.class_scores.dims3()?;
        let (bh, bw, four) = self.pred_boxes.dims3()?;
        if (sh, sw) != (h, w) {
            return Err(TidError::ShapeMismatch(format!(
                "class_scores is {sh}x{sw}x{k} but feature grid is {h}x{w}"
            )));
        }
        if (bh, bw) != (h, w) || four != 4 {
            return Err(TidError::ShapeMismatch(format!(
                "pred_boxes is {bh}x{bw}x{four} but must be {h}x{w}x4"
            )));
        }
        for t in [&self.feature, &self.class_scores, &self.pred_boxes] {
            if let Some(i) = t.first_non_finite() {
                return Err(TidError::OutOfRange(format!("non-finite value at index {i}")));
            }
        }
        if let Some(i) = self
            .class_scores
            .data()
            .iter()
            .position(|s| !(0.0..=1.0).contains(s))
        {
            return Err(TidError::OutOfRange(format!(
                "class score {} at flat index {i} outside [0, 1]",
                self.class_scores.data()[i]
            )));
        }
        for row in 0..h {
            for col in 0..w {
                let b = pred_box_at(&self.pred_boxes, Cell::new(row, col));
                BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| {
                    TidError::OutOfRange(format!("predicted box at ({row}, {col}): {e}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.feature.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.feature.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.feature.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.dims()[2]
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    level_id: u32,
    feature: PathBuf,
    class_scores: PathBuf,
    pred_boxes: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| TidError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TidError::json(path, e))
}

pub fn load_bundle(meta_path: impl AsRef<Path>) -> Result<LevelBundle> {
    let meta_path = meta_path.as_ref();
    let meta: BundleMeta = read_json(meta_path)?;
    let base = meta_path.parent().unwrap_or(Path::new(""));
    LevelBundle::new(
        meta.level_id,
        read_tensor(base.join(&meta.feature))?,
        read_tensor(base.join(&meta.class_scores))?,
        read_tensor(base.join(&meta.pred_boxes))?,
    )
}

/// Writes `<stem>_feature.tidt`, `<stem>_class_scores.tidt`,
/// `<stem>_pred_boxes.tidt` and the `<stem>.json` metadata into `dir`.
/// Returns the metadata path.
pub fn save_bundle(dir: impl AsRef<Path>, stem: &str, bundle: &LevelBundle) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let meta = BundleMeta {
        level_id: bundle.level_id,
        feature: format!("{stem}_feature.tidt").into(),
        class_scores: format!("{stem}_class_scores.tidt").into(),
        pred_boxes: format!("{stem}_pred_boxes.tidt").into(),
    };
    write_tensor(dir.join(&meta.feature), &bundle.feature)?;
    write_tensor(dir.join(&meta.class_scores), &bundle.class_scores)?;
    write_tensor(dir.join(&meta.pred_boxes), &bundle.pred_boxes)?;
    let meta_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&meta).expect("bundle metadata serializes");
    write_atomic(&meta_path, text.as_bytes())?;
    Ok(meta_path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtEntry {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: usize,
}

fn ground_truth_from_entries(entries: Vec<GtEntry>) -> Result<GroundTruth> {
    let (boxes, labels) = entries
        .into_iter()
        .map(|e| {
            let [x1, y1, x2, y2] = e.bbox;
            (BBox { x1, y1, x2, y2 }, e.label)
        })
        .unzip();
    GroundTruth::new(boxes, labels)
}

/// Loads a GT document: a JSON array of `{"box": [x1,y1,x2,y2], "label": k}`.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    ground_truth_from_entries(read_json(path)?).map_err(|e| match e {
        TidError::OutOfRange(m) | TidError::ShapeMismatch(m) => {
            TidError::OutOfRange(format!("{}: {m}", path.display()))
        }
        other => other,
    })
}

pub fn save_ground_truth(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    let entries: Vec<GtEntry> = gt
        .boxes()
        .iter()
        .zip(gt.labels())
        .map(|(b, &label)| GtEntry {
            bbox: [b.x1, b.y1, b.x2, b.y2],
            label,
        })
        .collect();
    let text = serde_json::to_string_pretty(&entries).expect("ground truth serializes");
    write_atomic(path.as_ref(), text.as_bytes())
}

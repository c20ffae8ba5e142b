//! Heatmap export of 2-axis tensors as binary graymaps or CSV.

use std::fmt::Write as _;

use crate::error::{Result, TidError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = TidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" | "p5" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(TidError::InvalidConfig(format!(
                "unknown heatmap format {other:?}; expected pgm or csv"
            ))),
        }
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        &[h, w] => Ok((h, w)),
        dims => Err(TidError::ShapeMismatch(format!(
            "heatmaps need a 2-axis tensor, got dims {dims:?}"
        ))),
    }
}

/// Min-max normalized binary P5 graymap. A constant map renders as zeros.
pub fn to_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = dims2(t)?;
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if span > 0.0 {
            ((f64::from(v) - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Row-major CSV, one grid row per line, shortest round-trip float text.
pub fn to_csv(t: &Tensor) -> Result<String> {
    let (_, w) = dims2(t)?;
    let mut out = String::new();
    for row in t.data().chunks_exact(w) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn render(t: &Tensor, format: HeatmapFormat) -> Result<Vec<u8>> {
    match format {
        HeatmapFormat::Pgm => to_pgm(t),
        HeatmapFormat::Csv => to_csv(t).map(String::into_bytes),
    }
}

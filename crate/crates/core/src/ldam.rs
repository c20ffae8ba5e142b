//! Learning-condition assessment: key areas from the teacher's task scores,
//! weak areas from the teacher-student score gap, and the output value that
//! combines them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TidError};
use crate::geometry::greedy_suppress;
use crate::select::{fraction_count, top_k_mask};
use crate::tensor::{Cell, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdamConfig {
    /// Fraction of cells kept as key areas.
    pub gamma_key: f64,
    /// Upper bound on the fraction of cells marked weak.
    pub gamma_weak: f64,
    pub weak_bonus: f64,
    /// Key score assigned outside the key areas.
    pub key_base: f64,
    /// Chebyshev suppression radius between weak cells.
    pub nms_radius: usize,
}

impl Default for LdamConfig {
    fn default() -> Self {
        Self {
            gamma_key: 0.10,
            gamma_weak: 0.10,
            weak_bonus: 1.5,
            key_base: 1.0,
            nms_radius: 3,
        }
    }
}

impl LdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |g: f64| g > 0.0 && g <= 1.0;
        if !in_unit(self.gamma_key) || !in_unit(self.gamma_weak) {
            return Err(TidError::InvalidConfig(format!(
                "gamma_key and gamma_weak must lie in (0, 1], got {} and {}",
                self.gamma_key, self.gamma_weak
            )));
        }
        if !(self.weak_bonus >= 1.0 && self.weak_bonus.is_finite()) {
            return Err(TidError::InvalidConfig(format!(
                "weak_bonus must be >= 1, got {}",
                self.weak_bonus
            )));
        }
        if !(self.key_base > 0.0 && self.key_base.is_finite()) {
            return Err(TidError::InvalidConfig(format!(
                "key_base must be > 0, got {}",
                self.key_base
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputValueMap {
    pub score_key: Grid,
    pub score_weak: Grid,
    pub v_output: Grid,
    pub weak_points: Vec<Cell>,
}

/// Keeps the teacher score on the top `gamma_key` cells, `key_base` elsewhere.
pub fn key_score(score_t: &Grid, cfg: &LdamConfig) -> Grid {
    let keep = top_k_mask(score_t.data(), fraction_count(cfg.gamma_key, score_t.len()));
    let data = score_t
        .data()
        .iter()
        .zip(keep)
        .map(|(&s, k)| if k { s } else { cfg.key_base })
        .collect();
    Grid::new(score_t.height(), score_t.width(), data).expect("same shape as input")
}

/// Cells where the teacher most outscores the student, spread out by
/// grid suppression. Cells with a non-positive gap are never weak.
pub fn weak_area(score_t: &Grid, score_s: &Grid, cfg: &LdamConfig) -> Result<Vec<Cell>> {
    let gap = score_t.zip_with(score_s, |t, s| t - s)?;
    let candidates: Vec<(Cell, f64)> = gap
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, &d)| (gap.cell(i), d))
        .collect();
    let max_keep = fraction_count(cfg.gamma_weak, gap.len());
    Ok(greedy_suppress(&candidates, cfg.nms_radius, max_keep))
}

pub fn weak_score(weak_points: &[Cell], shape: (usize, usize), cfg: &LdamConfig) -> Result<Grid> {
    let (h, w) = shape;
    let mut grid = Grid::filled(h, w, 1.0);
    for &p in weak_points {
        if !grid.contains(p) {
            return Err(TidError::OutOfRange(format!(
                "weak point {p} outside {h}x{w} grid"
            )));
        }
        grid.set(p, cfg.weak_bonus);
    }
    Ok(grid)
}

pub fn output_value(score_key: &Grid, score_weak: &Grid) -> Result<Grid> {
    score_key.zip_with(score_weak, |k, w| k * w)
}

/// Full key/weak assessment for one level.
pub fn assess(score_t: &Grid, score_s: &Grid, cfg: &LdamConfig) -> Result<OutputValueMap> {
    cfg.validate()?;
    let score_key = key_score(score_t, cfg);
    let weak_points = weak_area(score_t, score_s, cfg)?;
    let score_weak = weak_score(&weak_points, score_t.shape(), cfg)?;
    let v_output = output_value(&score_key, &score_weak)?;
    Ok(OutputValueMap {
        score_key,
        score_weak,
        v_output,
        weak_points,
    })
}

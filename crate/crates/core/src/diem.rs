//! Dual-task importance: per-cell regression and classification scores and
//! their product, computed identically for teacher and student outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TidError};
use crate::geometry::{max_iou_map, GroundTruth, IouMap};
use crate::select::{fraction_count, top_k_mask};
use crate::tensor::{Grid, Tensor};
use crate::tensorio::LevelBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiemConfig {
    /// IoU at or above which a cell counts as positive.
    pub thrd_pos: f64,
    /// IoU at or below which a cell counts as negative.
    pub thrd_neg: f64,
    /// Fraction of cells (per level) that receive the classification hit score.
    pub cls_top_fraction: f64,
    pub score_pos: f64,
    pub score_mid: f64,
    pub score_neg: f64,
    pub cls_hit: f64,
    pub cls_miss: f64,
}

impl Default for DiemConfig {
    fn default() -> Self {
        Self {
            thrd_pos: 0.5,
            thrd_neg: 0.4,
            cls_top_fraction: 0.025,
            score_pos: 2.0,
            score_mid: 1.5,
            score_neg: 0.4,
            cls_hit: 1.5,
            cls_miss: 1.0,
        }
    }
}

impl DiemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.thrd_neg && self.thrd_neg < self.thrd_pos && self.thrd_pos <= 1.0) {
            return Err(TidError::InvalidConfig(format!(
                "need 0 <= thrd_neg < thrd_pos <= 1, got thrd_neg={} thrd_pos={}",
                self.thrd_neg, self.thrd_pos
            )));
        }
        if !(self.cls_top_fraction > 0.0 && self.cls_top_fraction <= 1.0) {
            return Err(TidError::InvalidConfig(format!(
                "cls_top_fraction must lie in (0, 1], got {}",
                self.cls_top_fraction
            )));
        }
        let constants = [
            self.score_pos,
            self.score_mid,
            self.score_neg,
            self.cls_hit,
            self.cls_miss,
        ];
        if constants.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(TidError::InvalidConfig(
                "score constants must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Regression, classification and combined task scores for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    pub score_r: Grid,
    pub score_c: Grid,
    pub score: Grid,
}

pub fn regression_score_value(iou_max: f64, cfg: &DiemConfig) -> f64 {
    if iou_max >= cfg.thrd_pos {
        cfg.score_pos
    } else if iou_max <= cfg.thrd_neg {
        cfg.score_neg
    } else {
        cfg.score_mid
    }
}

pub fn regression_score(iou_max: &Grid, cfg: &DiemConfig) -> Grid {
    iou_max.map(|v| regression_score_value(v, cfg))
}

/// Marks the top `cls_top_fraction` of cells by class relevance.
///
/// Relevance is the score of the assigned GT's class, or the maximum class
/// score where `assignment` is `None`.
pub fn classification_score(
    class_scores: &Tensor,
    gt: &GroundTruth,
    assignment: &[Option<usize>],
    cfg: &DiemConfig,
) -> Result<Grid> {
    let (h, w, k) = class_scores.dims3()?;
    if assignment.len() != h * w {
        return Err(TidError::ShapeMismatch(format!(
            "assignment covers {} cells, class scores {h}x{w}",
            assignment.len()
        )));
    }
    gt.check_labels(k)?;
    let relevance: Vec<f64> = class_scores
        .data()
        .chunks_exact(k)
        .zip(assignment)
        .map(|(scores, assigned)| match assigned {
            Some(g) => {
                let label = *gt.labels().get(*g).ok_or_else(|| {
                    TidError::OutOfRange(format!("assignment to missing GT index {g}"))
                })?;
                Ok(f64::from(scores[label]))
            }
            None => Ok(scores.iter().copied().fold(f32::NEG_INFINITY, f32::max).into()),
        })
        .collect::<Result<_>>()?;

    let hits = top_k_mask(&relevance, fraction_count(cfg.cls_top_fraction, h * w));
    Grid::new(
        h,
        w,
        hits.into_iter()
            .map(|hit| if hit { cfg.cls_hit } else { cfg.cls_miss })
            .collect(),
    )
}

pub fn task_score(score_r: &Grid, score_c: &Grid) -> Result<Grid> {
    score_r.zip_with(score_c, |r, c| r * c)
}

/// Task scores plus the IoU map they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredModel {
    pub iou: IouMap,
    pub maps: ScoreMaps,
}

pub fn score_model_detailed(
    bundle: &LevelBundle,
    gt: &GroundTruth,
    cfg: &DiemConfig,
) -> Result<ScoredModel> {
    cfg.validate()?;
    let iou = max_iou_map(&bundle.pred_boxes, gt)?;
    let score_r = regression_score(&iou.iou, cfg);
    let score_c = classification_score(&bundle.class_scores, gt, &iou.assignment, cfg)?;
    let score = task_score(&score_r, &score_c)?;
    Ok(ScoredModel {
        iou,
        maps: ScoreMaps {
            score_r,
            score_c,
            score,
        },
    })
}

pub fn score_model(bundle: &LevelBundle, gt: &GroundTruth, cfg: &DiemConfig) -> Result<ScoreMaps> {
    score_model_detailed(bundle, gt, cfg).map(|s| s.maps)
}

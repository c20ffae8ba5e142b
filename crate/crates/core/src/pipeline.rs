//! End-to-end composition from teacher/student outputs to the distillation
//! mask, with the switches used for ablation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diem::{score_model_detailed, task_score, DiemConfig, ScoreMaps, ScoredModel};
use crate::error::{Result, TidError};
use crate::geometry::GroundTruth;
use crate::ldam::{assess, output_value, LdamConfig, OutputValueMap};
use crate::sfdm::{baseline_mask, decouple, SfdmConfig, ValueMaps};
use crate::tensor::Grid;
use crate::tensorio::LevelBundle;

/// Engine configuration shared by every surface.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TidConfig {
    pub diem: DiemConfig,
    pub ldam: LdamConfig,
    pub sfdm: SfdmConfig,
}

impl TidConfig {
    pub fn validate(&self) -> Result<()> {
        self.diem.validate()?;
        self.ldam.validate()?;
        self.sfdm.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    /// Regression score forced to 1.
    ClsOnly,
    /// Classification score forced to 1.
    RegOnly,
    /// Weak score forced to 1.
    KeyOnly,
    /// Key score forced to `key_base`.
    WeakOnly,
    /// Regression score taken as `2 * IoU_max` instead of the threshold rule.
    RawIou,
    /// Object/background decoupling in place of the tiered mask.
    BaselineEq8,
    /// Mask of ones.
    Unmasked,
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::Full,
        AblationMode::ClsOnly,
        AblationMode::RegOnly,
        AblationMode::KeyOnly,
        AblationMode::WeakOnly,
        AblationMode::RawIou,
        AblationMode::BaselineEq8,
        AblationMode::Unmasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::ClsOnly => "cls_only",
            AblationMode::RegOnly => "reg_only",
            AblationMode::KeyOnly => "key_only",
            AblationMode::WeakOnly => "weak_only",
            AblationMode::RawIou => "raw_iou",
            AblationMode::BaselineEq8 => "baseline_eq8",
            AblationMode::Unmasked => "unmasked",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = TidError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| {
                TidError::InvalidConfig(format!(
                    "unknown mode {s:?}; expected one of {}",
                    AblationMode::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub mode: AblationMode,
    pub teacher: ScoredModel,
    pub student: ScoredModel,
    pub output: OutputValueMap,
    /// For [`AblationMode::BaselineEq8`] the mask and tiers hold the
    /// object/background weights (objects HIGH, background LOW); the value
    /// maps are those of the full pipeline.
    pub values: ValueMaps,
}

fn rescore(scored: &mut ScoredModel, mode: AblationMode) -> Result<()> {
    let maps = &mut scored.maps;
    match mode {
        AblationMode::ClsOnly => maps.score_r = Grid::filled(maps.score_r.height(), maps.score_r.width(), 1.0),
        AblationMode::RegOnly => maps.score_c = Grid::filled(maps.score_c.height(), maps.score_c.width(), 1.0),
        AblationMode::RawIou => maps.score_r = scored.iou.iou.map(|v| 2.0 * v),
        _ => return Ok(()),
    }
    maps.score = task_score(&maps.score_r, &maps.score_c)?;
    Ok(())
}

fn score(bundle: &LevelBundle, gt: &GroundTruth, cfg: &DiemConfig, mode: AblationMode) -> Result<ScoredModel> {
    let mut scored = score_model_detailed(bundle, gt, cfg)?;
    rescore(&mut scored, mode)?;
    Ok(scored)
}

/// Runs scoring, key/weak assessment and decoupling for one level.
pub fn run_pipeline(
    teacher: &LevelBundle,
    student: &LevelBundle,
    gt: &GroundTruth,
    cfg: &TidConfig,
    mode: AblationMode,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if (teacher.height(), teacher.width()) != (student.height(), student.width()) {
        return Err(TidError::ShapeMismatch(format!(
            "teacher grid {}x{} vs student grid {}x{}",
            teacher.height(),
            teacher.width(),
            student.height(),
            student.width()
        )));
    }
    let teacher_scored = score(teacher, gt, &cfg.diem, mode)?;
    let student_scored = score(student, gt, &cfg.diem, mode)?;

    let mut output = assess(
        &teacher_scored.maps.score,
        &student_scored.maps.score,
        &cfg.ldam,
    )?;
    let (h, w) = output.v_output.shape();
    match mode {
        AblationMode::KeyOnly => {
            output.score_weak = Grid::filled(h, w, 1.0);
            output.weak_points.clear();
        }
        AblationMode::WeakOnly => output.score_key = Grid::filled(h, w, cfg.ldam.key_base),
        _ => {}
    }
    output.v_output = output_value(&output.score_key, &output.score_weak)?;

    let mut values = decouple(&output.v_output, gt, &cfg.sfdm)?;
    match mode {
        AblationMode::Unmasked => values.mask = Grid::filled(h, w, 1.0),
        AblationMode::BaselineEq8 => {
            let (mask, tiers) = baseline_mask(h, w, gt, &cfg.sfdm);
            values.mask = mask;
            values.tiers = tiers;
        }
        _ => {}
    }
    Ok(PipelineOutput {
        mode,
        teacher: teacher_scored,
        student: student_scored,
        output,
        values,
    })
}

impl PipelineOutput {
    pub fn teacher_scores(&self) -> &ScoreMaps {
        &self.teacher.maps
    }

    pub fn student_scores(&self) -> &ScoreMaps {
        &self.student.maps
    }
}

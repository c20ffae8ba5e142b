//! Selective feature decoupling: a spatial information prior around the
//! ground truth, the per-cell feature value, the three-tier mask, and the
//! masked feature-imitation loss with its gradient.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TidError};
use crate::geometry::{point_to_box_distance, GroundTruth};
use crate::tensor::{Cell, Grid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfdmConfig {
    /// Expansion factor of a GT box, about its center, that bounds its vicinity.
    pub vicinity_scale: f64,
    pub tier_hi: f64,
    pub tier_lo: f64,
    pub w_hi: f64,
    pub w_med: f64,
    pub w_lo: f64,
    pub alpha_bg: f64,
    pub alpha_obj: f64,
}

impl Default for SfdmConfig {
    fn default() -> Self {
        Self {
            vicinity_scale: 2.0,
            tier_hi: 1.0,
            tier_lo: 0.01,
            w_hi: 1.0,
            w_med: 0.7,
            w_lo: 0.05,
            alpha_bg: 0.5,
            alpha_obj: 1.0,
        }
    }
}

impl SfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vicinity_scale > 1.0 && self.vicinity_scale.is_finite()) {
            return Err(TidError::InvalidConfig(format!(
                "vicinity_scale must be > 1, got {}",
                self.vicinity_scale
            )));
        }
        if !(self.tier_lo < self.tier_hi) {
            return Err(TidError::InvalidConfig(format!(
                "need tier_lo < tier_hi, got {} and {}",
                self.tier_lo, self.tier_hi
            )));
        }
        let weights = [
            self.w_hi,
            self.w_med,
            self.w_lo,
            self.alpha_bg,
            self.alpha_obj,
        ];
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(TidError::InvalidConfig(
                "tier multipliers and alpha weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Med,
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::High, Tier::Med, Tier::Low];

    /// Numeric label used in exported tier maps.
    pub fn code(self) -> u8 {
        match self {
            Tier::Low => 0,
            Tier::Med => 1,
            Tier::High => 2,
        }
    }

    pub fn from_code(code: f32) -> Option<Tier> {
        match code {
            0.0 => Some(Tier::Low),
            1.0 => Some(Tier::Med),
            2.0 => Some(Tier::High),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Low => "low",
            Tier::Med => "med",
            Tier::High => "high",
        })
    }
}

/// Spatial prior: 1 inside a GT box, decaying linearly to 0 at the edge of
/// the box's vicinity, 0 beyond. Overlapping objects take the maximum.
pub fn information_value(shape: (usize, usize), gt: &GroundTruth, cfg: &SfdmConfig) -> Grid {
    let (h, w) = shape;
    let half_growth = (cfg.vicinity_scale - 1.0) / 2.0;
    Grid::from_fn(h, w, |cell| {
        let p = cell.center();
        gt.boxes()
            .iter()
            .map(|b| {
                let d = point_to_box_distance(p, b);
                if d == 0.0 {
                    return 1.0;
                }
                if !b.scaled(cfg.vicinity_scale).contains(p) {
                    return 0.0;
                }
                // Farthest point of the vicinity from the box: a corner.
                let dists = (b.width() * half_growth).hypot(b.height() * half_growth);
                (1.0 - d / dists).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max)
    })
}

pub fn feature_value(v_output: &Grid, v_info: &Grid) -> Result<Grid> {
    v_output.zip_with(v_info, |o, i| o * i)
}

pub fn tier_of(v: f64, cfg: &SfdmConfig) -> Tier {
    if v >= cfg.tier_hi {
        Tier::High
    } else if v >= cfg.tier_lo {
        Tier::Med
    } else {
        Tier::Low
    }
}

pub fn tier_weight(tier: Tier, cfg: &SfdmConfig) -> f64 {
    match tier {
        Tier::High => cfg.w_hi,
        Tier::Med => cfg.w_med,
        Tier::Low => cfg.w_lo,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierMask {
    pub mask: Grid,
    pub tiers: Vec<Tier>,
}

impl TierMask {
    pub fn population(&self, tier: Tier) -> usize {
        self.tiers.iter().filter(|&&t| t == tier).count()
    }

    /// Tier labels as a 2-axis tensor of [`Tier::code`] values.
    pub fn tiers_tensor(&self) -> Tensor {
        let data = self.tiers.iter().map(|t| f32::from(t.code())).collect();
        Tensor::new(vec![self.mask.height(), self.mask.width()], data).expect("grid shape")
    }
}

pub fn tier_mask(v: &Grid, cfg: &SfdmConfig) -> TierMask {
    let tiers: Vec<Tier> = v.data().iter().map(|&x| tier_of(x, cfg)).collect();
    let data = v
        .data()
        .iter()
        .zip(&tiers)
        .map(|(&x, &t)| tier_weight(t, cfg) * x)
        .collect();
    TierMask {
        mask: Grid::new(v.height(), v.width(), data).expect("same shape as input"),
        tiers,
    }
}

/// Everything the decoupling stage derives for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMaps {
    pub v_info: Grid,
    pub v_output: Grid,
    pub v: Grid,
    pub mask: Grid,
    pub tiers: Vec<Tier>,
}

impl ValueMaps {
    pub fn population(&self, tier: Tier) -> usize {
        self.tiers.iter().filter(|&&t| t == tier).count()
    }
}

pub fn decouple(v_output: &Grid, gt: &GroundTruth, cfg: &SfdmConfig) -> Result<ValueMaps> {
    cfg.validate()?;
    let v_info = information_value(v_output.shape(), gt, cfg);
    let v = feature_value(v_output, &v_info)?;
    let TierMask { mask, tiers } = tier_mask(&v, cfg);
    Ok(ValueMaps {
        v_info,
        v_output: v_output.clone(),
        v,
        mask,
        tiers,
    })
}

/// Brings a student feature map to the teacher's `(C, H, W)`: an optional
/// C×C_s channel projection followed by nearest-neighbour resampling.
pub fn align(
    student: &Tensor,
    target: (usize, usize, usize),
    projection: Option<&Tensor>,
) -> Result<Tensor> {
    let (cs, hs, ws) = student.dims3()?;
    let (c, h, w) = target;
    let projection = match projection {
        None if (cs, hs, ws) == target => return Ok(student.clone()),
        None => {
            return Err(TidError::ShapeMismatch(format!(
                "student {cs}x{hs}x{ws} differs from teacher {c}x{h}x{w} and no projection was given"
            )))
        }
        Some(p) => p,
    };
    if projection.dims() != [c, cs] {
        return Err(TidError::ShapeMismatch(format!(
            "projection must be {c}x{cs}, got {:?}",
            projection.dims()
        )));
    }
    let weights = projection.data();
    let src = student.data();
    let mut out = Vec::with_capacity(c * h * w);
    for oc in 0..c {
        let row = &weights[oc * cs..(oc + 1) * cs];
        for i in 0..h {
            let si = i * hs / h;
            for j in 0..w {
                let sj = j * ws / w;
                let acc: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(ic, &wt)| f64::from(wt) * f64::from(src[(ic * hs + si) * ws + sj]))
                    .sum();
                out.push(acc as f32);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TierLosses {
    pub high: f64,
    pub med: f64,
    pub low: f64,
}

impl TierLosses {
    pub fn get(&self, tier: Tier) -> f64 {
        match tier {
            Tier::High => self.high,
            Tier::Med => self.med,
            Tier::Low => self.low,
        }
    }

    fn slot(&mut self, tier: Tier) -> &mut f64 {
        match tier {
            Tier::High => &mut self.high,
            Tier::Med => &mut self.med,
            Tier::Low => &mut self.low,
        }
    }

    pub fn sum(&self) -> f64 {
        self.high + self.med + self.low
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_tier: TierLosses,
    pub grad_student: Tensor,
}

fn check_pair(teacher: &Tensor, student: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = teacher.dims3()?;
    if student.dims() != teacher.dims() {
        return Err(TidError::ShapeMismatch(format!(
            "teacher {:?} vs aligned student {:?}",
            teacher.dims(),
            student.dims()
        )));
    }
    Ok(dims)
}

/// Masked squared-error imitation loss, normalized by C·H·W.
///
/// The gradient is taken with respect to the aligned student features.
pub fn distill_loss(
    teacher: &Tensor,
    student_aligned: &Tensor,
    mask: &Grid,
    tiers: &[Tier],
) -> Result<LossReport> {
    let (c, h, w) = check_pair(teacher, student_aligned)?;
    if mask.shape() != (h, w) || tiers.len() != h * w {
        return Err(TidError::ShapeMismatch(format!(
            "mask {:?} with {} tier labels does not cover a {h}x{w} grid",
            mask.shape(),
            tiers.len()
        )));
    }
    if let Some(i) = mask.data().iter().position(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(TidError::OutOfRange(format!(
            "mask value {} at cell {} is not a finite non-negative number",
            mask.data()[i],
            mask.cell(i)
        )));
    }

    let plane = h * w;
    let norm = (c * plane) as f64;
    let mut sums = TierLosses::default();
    let mut grad = Vec::with_capacity(c * plane);
    let t = teacher.data();
    let s = student_aligned.data();
    for ch in 0..c {
        for p in 0..plane {
            let idx = ch * plane + p;
            let m = mask.data()[p];
            let diff = f64::from(t[idx]) - f64::from(s[idx]);
            *sums.slot(tiers[p]) += m * diff * diff;
            grad.push((-2.0 / norm * m * diff) as f32);
        }
    }
    let per_tier = TierLosses {
        high: sums.high / norm,
        med: sums.med / norm,
        low: sums.low / norm,
    };
    Ok(LossReport {
        total: per_tier.sum(),
        per_tier,
        grad_student: Tensor::new(vec![c, h, w], grad)?,
    })
}

/// 1 at cells whose center lies inside any GT box.
pub fn object_mask(shape: (usize, usize), gt: &GroundTruth) -> Grid {
    let (h, w) = shape;
    Grid::from_fn(h, w, |cell: Cell| {
        let p = cell.center();
        if gt.boxes().iter().any(|b| b.contains(p)) {
            1.0
        } else {
            0.0
        }
    })
}

/// Object/background decoupled loss used as the comparison baseline.
///
/// The object part is reported in the `high` slot and the background part
/// in the `low` slot of [`LossReport::per_tier`].
pub fn baseline_bg_obj_loss(
    teacher: &Tensor,
    student_aligned: &Tensor,
    gt: &GroundTruth,
    cfg: &SfdmConfig,
) -> Result<LossReport> {
    let (_, h, w) = check_pair(teacher, student_aligned)?;
    let (mask, tiers) = baseline_mask(h, w, gt, cfg);
    distill_loss(teacher, student_aligned, &mask, &tiers)
}

/// Effective per-cell weight `alpha_obj·M_obj + alpha_bg·M_bg` of the
/// baseline, with object cells labelled HIGH and background cells LOW.
pub fn baseline_mask(h: usize, w: usize, gt: &GroundTruth, cfg: &SfdmConfig) -> (Grid, Vec<Tier>) {
    let obj = object_mask((h, w), gt);
    let mask = obj.map(|o| if o > 0.0 { cfg.alpha_obj } else { cfg.alpha_bg });
    let tiers = obj
        .data()
        .iter()
        .map(|&o| if o > 0.0 { Tier::High } else { Tier::Low })
        .collect();
    (mask, tiers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt1(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        GroundTruth::new(vec![BBox::new(x1, y1, x2, y2).unwrap()], vec![0]).unwrap()
    }

    #[test]
    fn information_value_branches() {
        let cfg = SfdmConfig::default();
        // Box covering cells 2..6 in both axes; vicinity spans 0..8.
        let gt = gt1(2.0, 2.0, 6.0, 6.0);
        let v = information_value((12, 12), &gt, &cfg);
        assert_eq!(v.get(Cell::new(3, 3)), 1.0);
        assert_eq!(v.get(Cell::new(11, 11)), 0.0);
        // Cell center (6.5, 3.5): d = 0.5 from the right edge, dists = √8.
        let expected = 1.0 - 0.5 / 8f64.sqrt();
        assert!((v.get(Cell::new(3, 6)) - expected).abs() < 1e-15);
        assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(information_value((3, 3), &GroundTruth::empty(), &cfg)
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn information_value_half_way() {
        // 3x4 box grown 3x: growth of one box size per side, so
        // dists = √(3² + 4²) = 5. Cell (1, 5) has center (5.5, 1.5), at
        // distance 2.5 from the right edge.
        let cfg = SfdmConfig {
            vicinity_scale: 3.0,
            ..SfdmConfig::default()
        };
        let v = information_value((4, 8), &gt1(0.0, 0.0, 3.0, 4.0), &cfg);
        assert_eq!(v.get(Cell::new(1, 5)), 0.5);
    }

    #[test]
    fn tier_mask_branches() {
        let cfg = SfdmConfig::default();
        let v = Grid::new(1, 3, vec![1.2, 0.5, 0.005]).unwrap();
        let tm = tier_mask(&v, &cfg);
        assert_eq!(tm.tiers, vec![Tier::High, Tier::Med, Tier::Low]);
        assert!((tm.mask.data()[0] - 1.2).abs() < 1e-12);
        assert!((tm.mask.data()[1] - 0.35).abs() < 1e-12);
        assert!((tm.mask.data()[2] - 0.00025).abs() < 1e-15);
        assert_eq!(tm.tiers_tensor().data(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn align_identity_projection_and_errors() {
        let s = Tensor::new(vec![2, 1, 1], vec![1.0, -2.0]).unwrap();
        assert!(align(&s, (2, 1, 1), None).unwrap().bit_eq(&s));
        assert!(align(&s, (4, 1, 1), None).is_err());

        let p = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.5, -0.5],
        )
        .unwrap();
        let a = align(&s, (4, 1, 1), Some(&p)).unwrap();
        assert_eq!(a.data(), &[1.0, -2.0, -4.0, 1.5]);

        let bad = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(align(&s, (4, 1, 1), Some(&bad)).is_err());
    }

    #[test]
    fn align_resamples_nearest() {
        let s = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let a = align(&s, (1, 4, 4), Some(&id)).unwrap();
        assert_eq!(
            a.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn single_element_loss() {
        let t = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let s = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let mask = Grid::filled(1, 1, 2.0);
        let r = distill_loss(&t, &s, &mask, &[Tier::High]).unwrap();
        assert_eq!(r.total, 18.0);
        assert_eq!(r.per_tier.high, 18.0);
        assert_eq!(r.grad_student.data(), &[-12.0]);
    }

    #[test]
    fn identical_features_have_zero_loss() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let mask = Grid::filled(2, 2, 1.3);
        let r = distill_loss(&t, &t, &mask, &[Tier::Med; 4]).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.grad_student.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_mask_cells_are_inert() {
        let t = Tensor::new(vec![1, 1, 2], vec![5.0, 5.0]).unwrap();
        let s = Tensor::new(vec![1, 1, 2], vec![-5.0, 4.0]).unwrap();
        let mask = Grid::new(1, 2, vec![0.0, 1.0]).unwrap();
        let r = distill_loss(&t, &s, &mask, &[Tier::Low, Tier::High]).unwrap();
        assert_eq!(r.per_tier.low, 0.0);
        assert_eq!(r.grad_student.data()[0], 0.0);
        assert_eq!(r.total, 0.5);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let t = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let s = Tensor::zeros(vec![1, 2, 3]).unwrap();
        let m = Grid::filled(2, 2, 1.0);
        assert!(distill_loss(&t, &s, &m, &[Tier::Low; 4]).is_err());
        assert!(distill_loss(&t, &t, &Grid::filled(2, 3, 1.0), &[Tier::Low; 6]).is_err());
        let neg = Grid::filled(2, 2, -1.0);
        assert!(distill_loss(&t, &t, &neg, &[Tier::Low; 4]).is_err());
    }

    #[test]
    fn baseline_degenerate_masks() {
        let cfg = SfdmConfig::default();
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let mse = (1.0 + 4.0 + 9.0 + 16.0) / 4.0;

        let empty = baseline_bg_obj_loss(&t, &s, &GroundTruth::empty(), &cfg).unwrap();
        assert!((empty.total - cfg.alpha_bg * mse).abs() < 1e-12);

        let cover = baseline_bg_obj_loss(&t, &s, &gt1(0.0, 0.0, 2.0, 2.0), &cfg).unwrap();
        assert!((cover.total - cfg.alpha_obj * mse).abs() < 1e-12);
    }
}

//! Box arithmetic on the feature grid: IoU, point-to-box distance and
//! greedy grid suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TidError};
use crate::tensor::{Cell, Grid, Tensor};

/// Axis-aligned box in feature-cell coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, allowing zero width or height.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(TidError::OutOfRange(format!("non-finite box {b:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(TidError::OutOfRange(format!("inverted box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// The box scaled by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BBox {
            x1: cx - hw,
            y1: cy - hh,
            x2: cx + hw,
            y2: cy + hh,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance from `p` to the closest point of `b`.
pub fn point_to_box_distance((x, y): (f64, f64), b: &BBox) -> f64 {
    let dx = (b.x1 - x).max(0.0).max(x - b.x2);
    let dy = (b.y1 - y).max(0.0).max(y - b.y2);
    dx.hypot(dy)
}

/// Ground-truth objects of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    boxes: Vec<BBox>,
    labels: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BBox>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(TidError::ShapeMismatch(format!(
                "{} ground-truth boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        for (i, b) in boxes.iter().enumerate() {
            BBox::new(b.x1, b.y1, b.x2, b.y2)?;
            if b.width() <= 0.0 || b.height() <= 0.0 {
                return Err(TidError::OutOfRange(format!(
                    "ground-truth box {i} has zero area: {b:?}"
                )));
            }
        }
        Ok(Self { boxes, labels })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Checks every label against a class count.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l >= num_classes) {
            Some(i) => Err(TidError::OutOfRange(format!(
                "ground-truth label {} at index {i} outside [0, {num_classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Reads the predicted box of one cell from an H×W×4 tensor.
pub fn pred_box_at(pred_boxes: &Tensor, cell: Cell) -> BBox {
    let w = pred_boxes.dims()[1];
    let base = (cell.row * w + cell.col) * 4;
    let d = &pred_boxes.data()[base..base + 4];
    BBox {
        x1: f64::from(d[0]),
        y1: f64::from(d[1]),
        x2: f64::from(d[2]),
        y2: f64::from(d[3]),
    }
}

/// Per-cell best IoU against the ground truth, with the winning GT index.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMap {
    pub iou: Grid,
    /// Best-matching GT index per cell (row-major); `None` when no GT box
    /// overlaps the cell's prediction.
    pub assignment: Vec<Option<usize>>,
    /// Set when the image has no ground truth and the map is all zeros.
    pub no_objects: bool,
}

pub fn max_iou_map(pred_boxes: &Tensor, gt: &GroundTruth) -> Result<IouMap> {
    let (h, w, four) = pred_boxes.dims3()?;
    if four != 4 {
        return Err(TidError::ShapeMismatch(format!(
            "predicted boxes must be HxWx4, got {:?}",
            pred_boxes.dims()
        )));
    }
    if gt.is_empty() {
        log::warn!("image has no ground-truth objects; IoU map is all zeros");
    }
    let mut assignment = Vec::with_capacity(h * w);
    let iou_grid = Grid::from_fn(h, w, |cell| {
        let pred = pred_box_at(pred_boxes, cell);
        let mut best = 0.0;
        let mut best_idx = None;
        for (g, gt_box) in gt.boxes().iter().enumerate() {
            let v = iou(&pred, gt_box);
            if v > best {
                best = v;
                best_idx = Some(g);
            }
        }
        assignment.push(best_idx);
        best
    });
    Ok(IouMap {
        iou: iou_grid,
        assignment,
        no_objects: gt.is_empty(),
    })
}

/// Greedy suppression on the grid: repeatedly keep the best remaining
/// candidate and drop every candidate within Chebyshev distance `radius`
/// of it. Equal scores resolve in row-major order.
pub fn greedy_suppress(candidates: &[(Cell, f64)], radius: usize, max_keep: usize) -> Vec<Cell> {
    let mut order: Vec<&(Cell, f64)> = candidates.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut kept: Vec<Cell> = Vec::new();
    for &(cell, _) in order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| k.chebyshev(cell) > radius) {
            kept.push(cell);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_basic_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // Unit-cell enumeration: 1 shared cell out of 4 + 4 - 1.
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // Degenerate boxes never divide by zero.
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn distance_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(point_to_box_distance((1.0, 1.0), &a), 0.0);
        assert_eq!(point_to_box_distance((5.0, 0.0), &a), 3.0);
        assert_eq!(point_to_box_distance((4.0, 5.0), &a), 13f64.sqrt());
        assert_eq!(point_to_box_distance((-1.0, 1.0), &a), 1.0);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(1.0, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruth::new(vec![b(0.0, 0.0, 1.0, 1.0)], vec![]).is_err());
        assert!(GroundTruth::new(vec![b(0.0, 0.0, 0.0, 1.0)], vec![0]).is_err());
        let gt = GroundTruth::new(vec![b(0.0, 0.0, 1.0, 1.0)], vec![3]).unwrap();
        assert!(gt.check_labels(3).is_err());
        assert!(gt.check_labels(4).is_ok());
    }

    #[test]
    fn max_iou_identity_and_empty() {
        let gt_box = b(1.0, 1.0, 3.0, 4.0);
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend([1.0f32, 1.0, 3.0, 4.0]);
        }
        let preds = Tensor::new(vec![2, 3, 4], data).unwrap();
        let gt = GroundTruth::new(vec![gt_box], vec![0]).unwrap();
        let m = max_iou_map(&preds, &gt).unwrap();
        assert!(m.iou.data().iter().all(|&v| v == 1.0));
        assert!(m.assignment.iter().all(|&a| a == Some(0)));
        assert!(!m.no_objects);

        let m = max_iou_map(&preds, &GroundTruth::empty()).unwrap();
        assert!(m.iou.data().iter().all(|&v| v == 0.0));
        assert!(m.assignment.iter().all(Option::is_none));
        assert!(m.no_objects);
    }

    #[test]
    fn suppression_cases() {
        let c = [(Cell::new(0, 0), 1.0), (Cell::new(0, 1), 2.0)];
        assert_eq!(greedy_suppress(&c, 2, 10), vec![Cell::new(0, 1)]);
        assert_eq!(
            greedy_suppress(&c, 0, 10),
            vec![Cell::new(0, 1), Cell::new(0, 0)]
        );
        assert_eq!(greedy_suppress(&c, 0, 1), vec![Cell::new(0, 1)]);
        assert!(greedy_suppress(&c, 0, 0).is_empty());
        // Ties go to the row-major-first cell.
        let t = [(Cell::new(1, 0), 1.0), (Cell::new(0, 3), 1.0)];
        assert_eq!(greedy_suppress(&t, 5, 1), vec![Cell::new(0, 3)]);
    }
}

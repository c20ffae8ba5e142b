//! Seeded synthetic scenes and a gradient-descent simulation that drives the
//! student feature map toward the teacher's under a chosen mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TidError};
use crate::geometry::{BBox, GroundTruth};
use crate::pipeline::{run_pipeline, PipelineOutput, TidConfig};
use crate::sfdm::{baseline_bg_obj_loss, distill_loss, LossReport, Tier};
use crate::tensor::{Cell, Tensor};
use crate::tensorio::LevelBundle;

pub use crate::pipeline::AblationMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub n_objects: usize,
    pub teacher_noise: f64,
    pub student_noise: f64,
    /// Inclusive range of object side lengths, in cells.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            channels: 8,
            classes: 4,
            n_objects: 3,
            teacher_noise: 0.05,
            student_noise: 0.3,
            min_size: 4,
            max_size: 10,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.classes == 0 {
            return Err(TidError::InvalidConfig(
                "scene extents and class count must be positive".into(),
            ));
        }
        for (name, v) in [
            ("teacher_noise", self.teacher_noise),
            ("student_noise", self.student_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TidError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.n_objects > 0 {
            if self.min_size == 0 || self.min_size > self.max_size {
                return Err(TidError::Placement {
                    n_objects: self.n_objects,
                    reason: format!(
                        "object size range {}..={} is empty",
                        self.min_size, self.max_size
                    ),
                });
            }
            if self.max_size > self.height.min(self.width) {
                return Err(TidError::Placement {
                    n_objects: self.n_objects,
                    reason: format!(
                        "objects up to {} cells do not fit a {}x{} grid",
                        self.max_size, self.height, self.width
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub teacher: LevelBundle,
    pub student: LevelBundle,
    pub gt: GroundTruth,
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    z * sd
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, sd: f64) -> [f32; 4] {
    let x1 = b.x1 + gauss(rng, sd);
    let y1 = b.y1 + gauss(rng, sd);
    let x2 = b.x2 + gauss(rng, sd);
    let y2 = b.y2 + gauss(rng, sd);
    [
        x1.min(x2) as f32,
        y1.min(y2) as f32,
        x1.max(x2) as f32,
        y1.max(y2) as f32,
    ]
}

/// Builds a reproducible teacher/student pair over random objects.
///
/// Teacher features carry a Gaussian bump per object; teacher boxes sit
/// close to the object covering each cell and its class scores peak on the
/// object's label. The student is the teacher degraded by `student_noise`:
/// noisier features, larger box jitter and flatter class scores.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c, k) = (spec.height, spec.width, spec.channels, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut boxes = Vec::with_capacity(spec.n_objects);
    let mut labels = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let bw = rng.random_range(spec.min_size..=spec.max_size);
        let bh = rng.random_range(spec.min_size..=spec.max_size);
        let x1 = rng.random_range(0..=w - bw);
        let y1 = rng.random_range(0..=h - bh);
        boxes.push(BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: (x1 + bw) as f64,
            y2: (y1 + bh) as f64,
        });
        labels.push(rng.random_range(0..k));
    }
    let gt = GroundTruth::new(boxes, labels)?;

    // Teacher features.
    let amplitudes: Vec<Vec<f64>> = (0..gt.len())
        .map(|_| (0..c).map(|_| rng.random_range(0.5..1.5)).collect())
        .collect();
    let mut teacher_feature = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let (x, y) = Cell::new(row, col).center();
                let bump: f64 = gt
                    .boxes()
                    .iter()
                    .zip(&amplitudes)
                    .map(|(b, amp)| {
                        let (cx, cy) = b.center();
                        let sx = b.width() / 2.0;
                        let sy = b.height() / 2.0;
                        amp[ch]
                            * (-((x - cx).powi(2) / (2.0 * sx * sx)
                                + (y - cy).powi(2) / (2.0 * sy * sy)))
                                .exp()
                    })
                    .sum();
                teacher_feature.push((bump + gauss(&mut rng, spec.teacher_noise)) as f32);
            }
        }
    }

    // Owner of each cell: the first object whose box holds the cell center.
    let owners: Vec<Option<usize>> = (0..h * w)
        .map(|i| {
            let p = Cell::new(i / w, i % w).center();
            gt.boxes().iter().position(|b| b.contains(p))
        })
        .collect();

    let mut teacher_boxes = Vec::with_capacity(h * w * 4);
    let mut teacher_scores = Vec::with_capacity(h * w * k);
    for (i, owner) in owners.iter().enumerate() {
        let cell = Cell::new(i / w, i % w);
        match *owner {
            Some(o) => {
                let b = gt.boxes()[o];
                let size = (b.width() + b.height()) / 2.0;
                teacher_boxes.extend(jitter_box(&mut rng, &b, spec.teacher_noise * size));
                let (cx, cy) = b.center();
                let (x, y) = cell.center();
                let r = ((x - cx) / b.width()).hypot((y - cy) / b.height());
                for class in 0..k {
                    let s = if class == gt.labels()[o] {
                        0.95 - 0.4 * r + gauss(&mut rng, spec.teacher_noise)
                    } else {
                        rng.random_range(0.0..0.1)
                    };
                    teacher_scores.push(s.clamp(0.0, 1.0) as f32);
                }
            }
            None => {
                let (x, y) = cell.center();
                let half = rng.random_range(0.5..1.0);
                teacher_boxes.extend([x - half, y - half, x + half, y + half].map(|v| v as f32));
                for _ in 0..k {
                    teacher_scores.push(rng.random_range(0.0..0.1) as f32);
                }
            }
        }
    }

    // Student: the teacher degraded by student_noise.
    let student_feature: Vec<f32> = teacher_feature
        .iter()
        .map(|&t| (f64::from(t) + gauss(&mut rng, spec.student_noise)) as f32)
        .collect();
    let mut student_boxes = Vec::with_capacity(h * w * 4);
    for (i, owner) in owners.iter().enumerate() {
        let scale = owner.map_or(1.0, |o| {
            let b = gt.boxes()[o];
            (b.width() + b.height()) / 2.0
        });
        let t = &teacher_boxes[i * 4..i * 4 + 4];
        let tb = BBox {
            x1: f64::from(t[0]),
            y1: f64::from(t[1]),
            x2: f64::from(t[2]),
            y2: f64::from(t[3]),
        };
        student_boxes.extend(jitter_box(&mut rng, &tb, spec.student_noise * scale));
    }
    let flatten = spec.student_noise.min(1.0);
    let mut student_scores = Vec::with_capacity(h * w * k);
    for scores in teacher_scores.chunks_exact(k) {
        let mean = scores.iter().map(|&s| f64::from(s)).sum::<f64>() / k as f64;
        for &s in scores {
            let s = f64::from(s);
            let flat = (1.0 - flatten) * s + flatten * mean + gauss(&mut rng, 0.1 * spec.student_noise);
            student_scores.push(flat.clamp(0.0, 1.0) as f32);
        }
    }

    let teacher = LevelBundle::new(
        0,
        Tensor::new(vec![c, h, w], teacher_feature)?,
        Tensor::new(vec![h, w, k], teacher_scores)?,
        Tensor::new(vec![h, w, 4], teacher_boxes)?,
    )?;
    let student = LevelBundle::new(
        0,
        Tensor::new(vec![c, h, w], student_feature)?,
        Tensor::new(vec![h, w, k], student_scores)?,
        Tensor::new(vec![h, w, 4], student_boxes)?,
    )?;
    Ok(Scene {
        teacher,
        student,
        gt,
    })
}

/// A scene with its pipeline output, ready to simulate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scene: Scene,
    pub pipeline: PipelineOutput,
    /// Tier partition of the full pipeline; residual curves are reported
    /// over these regions for every mode so runs stay comparable.
    pub reference_tiers: Vec<Tier>,
}

impl Prepared {
    pub fn new(spec: &SceneSpec, mode: AblationMode, cfg: &TidConfig) -> Result<Self> {
        let scene = generate_scene(spec)?;
        let pipeline = run_pipeline(&scene.teacher, &scene.student, &scene.gt, cfg, mode)?;
        let reference_tiers = if mode == AblationMode::Full {
            pipeline.values.tiers.clone()
        } else {
            run_pipeline(&scene.teacher, &scene.student, &scene.gt, cfg, AblationMode::Full)?
                .values
                .tiers
        };
        Ok(Self {
            scene,
            pipeline,
            reference_tiers,
        })
    }

    /// Largest step for which plain gradient descent on the masked quadratic
    /// never overshoots: `C·H·W / (2 · max mask)`.
    pub fn safe_step_size(&self) -> f64 {
        safe_step_size(self.scene.teacher.feature.len(), self.pipeline.values.mask.max())
    }

    fn loss(&self, student: &Tensor, cfg: &TidConfig) -> Result<LossReport> {
        let teacher = &self.scene.teacher.feature;
        match self.pipeline.mode {
            AblationMode::BaselineEq8 => baseline_bg_obj_loss(teacher, student, &self.scene.gt, &cfg.sfdm),
            _ => distill_loss(
                teacher,
                student,
                &self.pipeline.values.mask,
                &self.pipeline.values.tiers,
            ),
        }
    }
}

pub fn safe_step_size(num_elements: usize, max_mask: f64) -> f64 {
    if max_mask > 0.0 {
        num_elements as f64 / (2.0 * max_mask)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualCurves {
    pub high: Vec<f64>,
    pub med: Vec<f64>,
    pub low: Vec<f64>,
}

impl ResidualCurves {
    pub fn get(&self, tier: Tier) -> &[f64] {
        match tier {
            Tier::High => &self.high,
            Tier::Med => &self.med,
            Tier::Low => &self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierPopulations {
    pub high: usize,
    pub med: usize,
    pub low: usize,
}

impl TierPopulations {
    pub fn count(tiers: &[Tier]) -> Self {
        let n = |t| tiers.iter().filter(|&&x| x == t).count();
        Self {
            high: n(Tier::High),
            med: n(Tier::Med),
            low: n(Tier::Low),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub height: usize,
    pub width: usize,
    pub v: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scene: SceneSpec,
    pub engine: TidConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: AblationMode,
    pub steps: usize,
    pub step_size: f64,
    /// Loss before each step plus the final loss (`steps + 1` entries).
    pub loss_curve: Vec<f64>,
    /// Mean squared feature residual per reference tier, same length as
    /// `loss_curve`.
    pub residual_curves: ResidualCurves,
    pub tier_populations: TierPopulations,
    pub final_maps: MapSnapshot,
    pub config: ConfigEcho,
}

fn tier_residuals(teacher: &Tensor, student: &Tensor, tiers: &[Tier]) -> [f64; 3] {
    let plane = tiers.len();
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (idx, (&t, &s)) in teacher.data().iter().zip(student.data()).enumerate() {
        let slot = match tiers[idx % plane] {
            Tier::High => 0,
            Tier::Med => 1,
            Tier::Low => 2,
        };
        let d = f64::from(t) - f64::from(s);
        sums[slot] += d * d;
        counts[slot] += 1;
    }
    [0, 1, 2].map(|i| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 })
}

/// Gradient descent on a prepared scene.
pub fn simulate(
    prepared: &Prepared,
    cfg: &TidConfig,
    spec: &SceneSpec,
    steps: usize,
    step_size: f64,
) -> Result<SimulationReport> {
    if steps == 0 {
        return Err(TidError::InvalidConfig("steps must be >= 1".into()));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(TidError::InvalidConfig(format!(
            "step_size must be > 0, got {step_size}"
        )));
    }
    let teacher = &prepared.scene.teacher.feature;
    let mut student = prepared.scene.student.feature.clone();
    let mut loss_curve = Vec::with_capacity(steps + 1);
    let mut residuals = ResidualCurves::default();

    for step in 0..=steps {
        let report = prepared.loss(&student, cfg)?;
        if !report.total.is_finite() {
            return Err(TidError::Divergence {
                step,
                loss: report.total,
            });
        }
        loss_curve.push(report.total);
        let [hi, med, lo] = tier_residuals(teacher, &student, &prepared.reference_tiers);
        residuals.high.push(hi);
        residuals.med.push(med);
        residuals.low.push(lo);
        if step == steps {
            break;
        }
        for (s, &g) in student.data_mut().iter_mut().zip(report.grad_student.data()) {
            *s = (f64::from(*s) - step_size * f64::from(g)) as f32;
        }
        if let Some(i) = student.first_non_finite() {
            return Err(TidError::Divergence {
                step: step + 1,
                loss: f64::from(student.data()[i]),
            });
        }
    }

    let values = &prepared.pipeline.values;
    Ok(SimulationReport {
        mode: prepared.pipeline.mode,
        steps,
        step_size,
        loss_curve,
        residual_curves: residuals,
        tier_populations: TierPopulations::count(&prepared.reference_tiers),
        final_maps: MapSnapshot {
            height: values.v.height(),
            width: values.v.width(),
            v: values.v.data().to_vec(),
            mask: values.mask.data().to_vec(),
        },
        config: ConfigEcho {
            scene: spec.clone(),
            engine: cfg.clone(),
        },
    })
}

/// Generates the scene for `spec`, builds the mask for `mode`, and runs
/// `steps` descent steps of size `step_size` on the student features.
pub fn run_simulation(
    spec: &SceneSpec,
    mode: AblationMode,
    steps: usize,
    step_size: f64,
    cfg: &TidConfig,
) -> Result<SimulationReport> {
    let prepared = Prepared::new(spec, mode, cfg)?;
    simulate(&prepared, cfg, spec, steps, step_size)
}

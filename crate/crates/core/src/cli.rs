//! The `tid` command line: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diem::{DiemConfig, ScoredModel};
use crate::geometry::GroundTruth;
use crate::harness::{generate_scene, simulate, Prepared, SceneSpec, TierPopulations};
use crate::heatmap::{render, HeatmapFormat};
use crate::ldam::LdamConfig;
use crate::pipeline::{run_pipeline, AblationMode, TidConfig};
use crate::select::fraction_count;
use crate::sfdm::{align, distill_loss, SfdmConfig, Tier};
use crate::tensor::{Grid, Tensor};
use crate::tensorio::{
    load_bundle, load_ground_truth, read_tensor, save_bundle, save_ground_truth, write_atomic,
    write_tensor, LevelBundle,
};

/// Merged configuration file: engine sections plus the synthetic scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub diem: DiemConfig,
    pub ldam: LdamConfig,
    pub sfdm: SfdmConfig,
    pub scene: SceneSpec,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn engine(&self) -> TidConfig {
        TidConfig {
            diem: self.diem.clone(),
            ldam: self.ldam.clone(),
            sfdm: self.sfdm.clone(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.engine().validate()?;
        self.scene.validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "tid", version, about = "Task-integrated feature distillation masks and losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic teacher/student scene as bundles plus ground truth.
    Generate(GenerateArgs),
    /// Task scores for teacher and student.
    Score(PipelineArgs),
    /// Value maps, tiered mask and tier labels.
    Mask(PipelineArgs),
    /// Masked distillation loss between two feature maps.
    Loss(LossArgs),
    /// Gradient-descent simulation on a synthetic scene.
    Simulate(SimulateArgs),
    /// Render a 2-axis tensor as a P5 graymap or CSV.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub cls_top_fraction: Option<f64>,
    #[arg(long)]
    pub gamma_key: Option<f64>,
    #[arg(long)]
    pub gamma_weak: Option<f64>,
    #[arg(long)]
    pub thrd_pos: Option<f64>,
    #[arg(long)]
    pub thrd_neg: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut CliConfig) {
        if let Some(v) = self.cls_top_fraction {
            cfg.diem.cls_top_fraction = v;
        }
        if let Some(v) = self.gamma_key {
            cfg.ldam.gamma_key = v;
        }
        if let Some(v) = self.gamma_weak {
            cfg.ldam.gamma_weak = v;
        }
        if let Some(v) = self.thrd_pos {
            cfg.diem.thrd_pos = v;
        }
        if let Some(v) = self.thrd_neg {
            cfg.diem.thrd_neg = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher bundle metadata (JSON).
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student bundle metadata (JSON).
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full")]
    pub mode: AblationMode,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher feature map, C×H×W.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student feature map.
    #[arg(long)]
    pub student: PathBuf,
    /// H×W mask.
    #[arg(long)]
    pub mask: PathBuf,
    /// H×W tier labels (0 low, 1 med, 2 high). Inferred from the mask when absent.
    #[arg(long)]
    pub tiers: Option<PathBuf>,
    /// C×C_s channel projection applied to the student.
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Write the student gradient to `<out>/grad.tidt`.
    #[arg(long)]
    pub emit_grad: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    pub mode: AblationMode,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Defaults to the largest non-overshooting step for the mode's mask.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; the report goes to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the final value and mask maps as TIDT and PGM.
    #[arg(long)]
    pub heatmap: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "pgm")]
    pub format: HeatmapFormat,
}

/// Parses `args` (including the program name) and runs the command,
/// writing any standard-output text to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::Loss(a) => cmd_loss(&a, stdout),
        Command::Simulate(a) => cmd_simulate(&a, stdout),
        Command::Heatmap(a) => cmd_heatmap(&a),
    }
}

fn load_config(path: Option<&Path>, overrides: Option<&Overrides>) -> anyhow::Result<CliConfig> {
    let mut cfg = CliConfig::load(path)?;
    if let Some(o) = overrides {
        o.apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

struct Inputs {
    teacher: LevelBundle,
    student: LevelBundle,
    gt: GroundTruth,
}

fn load_inputs(a: &PipelineArgs) -> anyhow::Result<Inputs> {
    let teacher = load_bundle(&a.teacher)
        .with_context(|| format!("loading teacher bundle {}", a.teacher.display()))?;
    let student = load_bundle(&a.student)
        .with_context(|| format!("loading student bundle {}", a.student.display()))?;
    let gt = load_ground_truth(&a.gt)
        .with_context(|| format!("loading ground truth {}", a.gt.display()))?;
    Ok(Inputs {
        teacher,
        student,
        gt,
    })
}

pub fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref(), None)?;
    if let Some(seed) = a.seed {
        cfg.scene.seed = seed;
    }
    let scene = generate_scene(&cfg.scene)?;
    ensure_dir(&a.out)?;
    save_bundle(&a.out, "teacher", &scene.teacher)?;
    save_bundle(&a.out, "student", &scene.student)?;
    save_ground_truth(a.out.join("gt.json"), &scene.gt)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreSummary {
    cls_top_k: usize,
    hits: usize,
    no_objects: bool,
    histogram: BTreeMap<String, usize>,
}

fn score_summary(scored: &ScoredModel, cfg: &DiemConfig) -> ScoreSummary {
    let mut histogram = BTreeMap::new();
    for v in scored.maps.score.data() {
        *histogram.entry(format!("{v:.4}")).or_insert(0) += 1;
    }
    ScoreSummary {
        cls_top_k: fraction_count(cfg.cls_top_fraction, scored.maps.score.len()),
        hits: scored
            .maps
            .score_c
            .data()
            .iter()
            .filter(|&&v| v == cfg.cls_hit)
            .count(),
        no_objects: scored.iou.no_objects,
        histogram,
    }
}

pub fn cmd_score(a: &PipelineArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), Some(&a.overrides))?;
    let inputs = load_inputs(a)?;
    let out = run_pipeline(
        &inputs.teacher,
        &inputs.student,
        &inputs.gt,
        &cfg.engine(),
        a.mode,
    )?;
    ensure_dir(&a.out)?;
    let mut summary = BTreeMap::new();
    for (who, scored) in [("teacher", &out.teacher), ("student", &out.student)] {
        let maps = &scored.maps;
        write_tensor(a.out.join(format!("{who}_score_r.tidt")), &maps.score_r.to_tensor())?;
        write_tensor(a.out.join(format!("{who}_score_c.tidt")), &maps.score_c.to_tensor())?;
        write_tensor(a.out.join(format!("{who}_score.tidt")), &maps.score.to_tensor())?;
        summary.insert(who, score_summary(scored, &cfg.diem));
    }
    write_json(&a.out.join("score_summary.json"), &summary)
}

#[derive(Debug, Serialize)]
struct MaskSummary {
    mode: AblationMode,
    height: usize,
    width: usize,
    tier_populations: TierPopulations,
    weak_points: Vec<[usize; 2]>,
}

pub fn cmd_mask(a: &PipelineArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), Some(&a.overrides))?;
    let inputs = load_inputs(a)?;
    let out = run_pipeline(
        &inputs.teacher,
        &inputs.student,
        &inputs.gt,
        &cfg.engine(),
        a.mode,
    )?;
    ensure_dir(&a.out)?;
    let values = &out.values;
    write_tensor(a.out.join("v_output.tidt"), &values.v_output.to_tensor())?;
    write_tensor(a.out.join("v_info.tidt"), &values.v_info.to_tensor())?;
    write_tensor(a.out.join("v.tidt"), &values.v.to_tensor())?;
    write_tensor(a.out.join("mask.tidt"), &values.mask.to_tensor())?;
    write_tensor(a.out.join("tiers.tidt"), &tiers_tensor(values.v.shape(), &values.tiers))?;
    write_json(
        &a.out.join("mask_summary.json"),
        &MaskSummary {
            mode: a.mode,
            height: values.v.height(),
            width: values.v.width(),
            tier_populations: TierPopulations::count(&values.tiers),
            weak_points: out.output.weak_points.iter().map(|c| [c.row, c.col]).collect(),
        },
    )
}

fn tiers_tensor((h, w): (usize, usize), tiers: &[Tier]) -> Tensor {
    Tensor::new(vec![h, w], tiers.iter().map(|t| f32::from(t.code())).collect())
        .expect("tier labels cover the grid")
}

/// Tier labels recovered from a mask produced with `cfg`: a cell is HIGH
/// when its mask reaches `w_hi·tier_hi`, MED when it reaches
/// `w_med·tier_lo`, LOW otherwise.
pub fn tiers_from_mask(mask: &Grid, cfg: &SfdmConfig) -> Vec<Tier> {
    let hi = cfg.w_hi * cfg.tier_hi;
    let med = cfg.w_med * cfg.tier_lo;
    mask.data()
        .iter()
        .map(|&m| {
            if m >= hi {
                Tier::High
            } else if m >= med {
                Tier::Med
            } else {
                Tier::Low
            }
        })
        .collect()
}

pub fn cmd_loss(a: &LossArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let teacher = read_tensor(&a.teacher)?;
    let student = read_tensor(&a.student)?;
    let mask = Grid::from_tensor(&read_tensor(&a.mask)?).context("mask")?;
    let projection = a.projection.as_ref().map(read_tensor).transpose()?;
    let target = teacher.dims3().context("teacher feature")?;
    let aligned = align(&student, target, projection.as_ref())?;
    let tiers = match &a.tiers {
        Some(path) => read_tensor(path)?
            .data()
            .iter()
            .map(|&c| Tier::from_code(c))
            .collect::<Option<Vec<_>>>()
            .with_context(|| format!("{} holds a label other than 0, 1, 2", path.display()))?,
        None => tiers_from_mask(&mask, &cfg.sfdm),
    };
    let report = distill_loss(&teacher, &aligned, &mask, &tiers)?;
    if a.emit_grad {
        ensure_dir(&a.out)?;
        write_tensor(a.out.join("grad.tidt"), &report.grad_student)?;
    }
    writeln!(
        stdout,
        "{{\"total\": {:.12}, \"per_tier\": {{\"high\": {:.12}, \"med\": {:.12}, \"low\": {:.12}}}}}",
        report.total, report.per_tier.high, report.per_tier.med, report.per_tier.low
    )?;
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref(), Some(&a.overrides))?;
    if let Some(seed) = a.seed {
        cfg.scene.seed = seed;
    }
    let engine = cfg.engine();
    let prepared = Prepared::new(&cfg.scene, a.mode, &engine)?;
    let step_size = a.step_size.unwrap_or_else(|| prepared.safe_step_size());
    let report = simulate(&prepared, &engine, &cfg.scene, a.steps, step_size)?;

    let Some(dir) = &a.out else {
        if a.heatmap {
            bail!("--heatmap needs --out");
        }
        serde_json::to_writer_pretty(&mut *stdout, &report)?;
        writeln!(stdout)?;
        return Ok(());
    };
    ensure_dir(dir)?;
    write_json(&dir.join("report.json"), &report)?;
    if a.heatmap {
        let values = &prepared.pipeline.values;
        for (name, grid) in [("v", &values.v), ("mask", &values.mask)] {
            let t = grid.to_tensor();
            write_tensor(dir.join(format!("{name}.tidt")), &t)?;
            write_atomic(&dir.join(format!("{name}.pgm")), &render(&t, HeatmapFormat::Pgm)?)?;
        }
    }
    Ok(())
}

pub fn cmd_heatmap(a: &HeatmapArgs) -> anyhow::Result<()> {
    let t = read_tensor(&a.input)?;
    let bytes = render(&t, a.format).with_context(|| format!("rendering {}", a.input.display()))?;
    write_atomic(&a.output, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfdm::{tier_mask, tier_of};

    #[test]
    fn mask_tiers_are_recoverable() {
        let cfg = SfdmConfig::default();
        let v = Grid::new(1, 7, vec![4.5, 1.0, 0.999, 0.5, 0.01, 0.0099, 0.0]).unwrap();
        let tm = tier_mask(&v, &cfg);
        assert_eq!(tiers_from_mask(&tm.mask, &cfg), tm.tiers);
        assert_eq!(tier_of(0.0099, &cfg), Tier::Low);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = CliConfig::default();
        Overrides {
            thrd_pos: Some(0.3),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parse_errors_surface() {
        let mut sink = Vec::new();
        assert!(run(["tid", "simulate", "--mode", "sideways"], &mut sink).is_err());
        assert!(run(["tid", "bogus"], &mut sink).is_err());
    }
}

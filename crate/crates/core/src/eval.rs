//! MPJPE at fixed horizons, the zero-velocity baseline, the ablation
//! harness, results tables and SVG stick-figure plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{predict, Grouping, Merge, ModelConfig, ModelParams};
use crate::motion_data::{frames_to_positions, SkeletonSpec, WindowSample};
use crate::par::{self, Execution};
use crate::training::{train, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonSpec {
    pub horizons_ms: Vec<u32>,
    pub fps: f64,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        Self {
            horizons_ms: vec![80, 160, 320, 400, 1000],
            fps: 25.0,
        }
    }
}

/// 1-based frame of a horizon: `ceil(r * fps / 1000)`, at least 1.
pub fn frame_index(horizon_ms: u32, fps: f64) -> usize {
    let exact = horizon_ms as f64 * fps / 1000.0;
    // absorb representation error so that exact multiples do not round up
    ((exact - 1e-9).ceil() as usize).max(1)
}

impl HorizonSpec {
    /// Horizons in ascending order.
    pub fn sorted_ms(&self) -> Vec<u32> {
        let mut h = self.horizons_ms.clone();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// 1-based frame per sorted horizon, clamped to the last predicted
    /// frame `p`.
    pub fn frames(&self, p: usize) -> Result<Vec<usize>> {
        if self.horizons_ms.is_empty() || !(self.fps > 0.0) || p == 0 {
            return Err(Error::Config(
                "need at least one horizon, positive fps and p".into(),
            ));
        }
        Ok(self
            .sorted_ms()
            .into_iter()
            .map(|r| frame_index(r, self.fps).min(p))
            .collect())
    }
}

/// Mean joint position error at 1-based frame `h`.
pub fn mpjpe(
    pred: ArrayView2<'_, f64>,
    gt: ArrayView2<'_, f64>,
    skeleton: &SkeletonSpec,
    h: usize,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if h == 0 || h > pred.nrows() {
        return Err(Error::Domain(format!(
            "horizon frame {h} outside 1..={}",
            pred.nrows()
        )));
    }
    let a = frames_to_positions(pred.slice(s![h - 1..h, ..]), skeleton)?;
    let b = frames_to_positions(gt.slice(s![h - 1..h, ..]), skeleton)?;
    let j = skeleton.joint_count;
    let total: f64 = (0..j)
        .map(|n| {
            (0..3)
                .map(|c| (a[[0, n, c]] - b[[0, n, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / j as f64)
}

/// The last observed frame repeated `p` times.
pub fn zero_velocity_baseline(x0: ArrayView2<'_, f64>, p: usize) -> Result<Array2<f64>> {
    let t = x0.nrows();
    if t == 0 {
        return Err(shape_err("empty input".to_string()));
    }
    let last = x0.row(t - 1);
    Ok(Array2::from_shape_fn((p, x0.ncols()), |(_, k)| last[k]))
}

fn mean_errors(per_window: Vec<Result<Vec<f64>>>, horizons: usize) -> Result<Vec<f64>> {
    if per_window.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let n = per_window.len() as f64;
    let mut sum = vec![0.0; horizons];
    for w in per_window {
        for (s, v) in sum.iter_mut().zip(w?) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-window mean MPJPE of the model at each 1-based frame in `frames`.
pub fn evaluate_windows(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    skeleton: &SkeletonSpec,
    frames: &[usize],
    exec: Execution,
) -> Result<Vec<f64>> {
    let per_window = par::map(exec, windows, |_, w| {
        let (y, _) = predict(&w.input, params, cfg)?;
        frames
            .iter()
            .map(|&h| mpjpe(y.view(), w.target.view(), skeleton, h))
            .collect()
    });
    mean_errors(per_window, frames.len())
}

/// Per-window mean MPJPE of the zero-velocity baseline.
pub fn evaluate_baseline(
    windows: &[WindowSample],
    skeleton: &SkeletonSpec,
    frames: &[usize],
    exec: Execution,
) -> Result<Vec<f64>> {
    let per_window = par::map(exec, windows, |_, w| {
        let y = zero_velocity_baseline(w.input.view(), w.target.nrows())?;
        frames
            .iter()
            .map(|&h| mpjpe(y.view(), w.target.view(), skeleton, h))
            .collect()
    });
    mean_errors(per_window, frames.len())
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    Full,
    /// No coarse branch, encoder or KL term.
    OneLevel,
    /// Fixed partition instead of learned grouping.
    Fixed,
    OneChunk,
    FourChunks,
    SevenChunks,
    /// Sum merge instead of concatenation + PONO.
    NoPono,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        Self::Full,
        Self::OneLevel,
        Self::Fixed,
        Self::OneChunk,
        Self::FourChunks,
        Self::SevenChunks,
        Self::NoPono,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::OneLevel => "1L",
            Self::Fixed => "Fixed",
            Self::OneChunk => "1ch",
            Self::FourChunks => "4ch",
            Self::SevenChunks => "7ch",
            Self::NoPono => "NoPONO",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {name:?}")))
    }

    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let v = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Self::parse)
            .collect::<Result<Vec<_>>>()?;
        if v.is_empty() {
            return Err(Error::Config("no ablation variants given".into()));
        }
        Ok(v)
    }

    /// The variant's model configuration. `Fixed` uses the base config's
    /// `fixed_partition` if set, otherwise [`default_fixed_partition`].
    pub fn apply(self, base: &ModelConfig, skeleton: &SkeletonSpec) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        let chunks = |cfg: &mut ModelConfig, n: usize| -> Result<()> {
            if cfg.output_frames % n != 0 {
                return Err(Error::Config(format!(
                    "variant {}: output_frames = {} is not divisible by {n} chunks",
                    self.name(),
                    cfg.output_frames
                )));
            }
            cfg.n_chunks = n;
            Ok(())
        };
        match self {
            Self::Full => {}
            Self::OneLevel => cfg.coarse_branch = false,
            Self::Fixed => {
                cfg.grouping = Grouping::Fixed;
                if cfg.fixed_partition.is_none() {
                    cfg.fixed_partition = Some(default_fixed_partition(skeleton)?);
                }
            }
            Self::OneChunk => chunks(&mut cfg, 1)?,
            Self::FourChunks => chunks(&mut cfg, 4)?,
            Self::SevenChunks => chunks(&mut cfg, 7)?,
            Self::NoPono => cfg.merge = Merge::Sum,
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("variant {}: {e}", self.name())))?;
        Ok(cfg)
    }
}

/// One group per subtree hanging off the root; the root joins the first
/// subtree. On the synthetic skeleton this is torso, two arms, two legs.
pub fn default_fixed_partition(skeleton: &SkeletonSpec) -> Result<Vec<usize>> {
    let parents = skeleton
        .parent_index
        .as_ref()
        .ok_or_else(|| Error::Config("default fixed partition needs a skeleton tree".into()))?;
    let order = skeleton.topological_order()?;
    let mut label: Vec<Option<usize>> = vec![None; skeleton.joint_count];
    let mut next = 0;
    for &n in &order {
        let p = parents[n];
        if p < 0 {
            continue;
        }
        let p = p as usize;
        label[n] = Some(if parents[p] < 0 {
            next += 1;
            next - 1
        } else {
            label[p].expect("parent precedes child")
        });
    }
    Ok(label.into_iter().map(|l| l.unwrap_or(0)).collect())
}

/// Windows grouped by action, taken as the source name up to the first `_`.
pub fn action_of(source_id: &str) -> &str {
    source_id.split('_').next().unwrap_or(source_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    /// MPJPE in mm per horizon.
    pub cells: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    /// Ascending.
    pub horizons_ms: Vec<u32>,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new(horizons_ms: Vec<u32>) -> Self {
        Self {
            horizons_ms,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, model: &str, dataset: &str, cells: Vec<f64>) -> Result<()> {
        if cells.len() != self.horizons_ms.len() {
            return Err(shape_err(format!(
                "{} cells for {} horizons",
                cells.len(),
                self.horizons_ms.len()
            )));
        }
        if cells.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Domain(format!(
                "non-finite or negative MPJPE in row {model}/{dataset}"
            )));
        }
        self.rows.push(ResultRow {
            model: model.into(),
            dataset: dataset.into(),
            cells,
        });
        Ok(())
    }

    pub fn get(&self, model: &str, dataset: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.dataset == dataset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Config(format!("unknown table format {other:?}"))),
        }
    }
}

/// Render with two decimals. Rounding is half-to-even on the exact binary
/// value, which is what `{:.2}` does.
pub fn emit_table(table: &ResultsTable, format: TableFormat) -> String {
    let mut head = vec!["model".to_string(), "dataset".to_string()];
    head.extend(table.horizons_ms.iter().map(|h| h.to_string()));
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.model.clone(), r.dataset.clone()];
            v.extend(r.cells.iter().map(|c| format!("{c:.2}")));
            v
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for line in std::iter::once(&head).chain(&body) {
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            let row = |v: &[String]| format!("| {} |\n", v.join(" | "));
            out.push_str(&row(&head));
            let mut rule = vec!["---".to_string(); 2];
            rule.extend(std::iter::repeat_n(
                "---:".to_string(),
                table.horizons_ms.len(),
            ));
            out.push_str(&row(&rule));
            for b in &body {
                out.push_str(&row(b));
            }
        }
    }
    out
}

/// Everything a variant run needs besides its configuration.
pub struct AblationData<'a> {
    pub train: &'a [WindowSample],
    pub validation: &'a [WindowSample],
    pub test: &'a [WindowSample],
    pub skeleton: &'a SkeletonSpec,
}

/// Train and evaluate each variant from the same seed and data order. Rows
/// are per variant and action, in variant order then action order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    data: &AblationData<'_>,
    base: &ModelConfig,
    opt: &OptimizerConfig,
    horizons: &HorizonSpec,
    variants: &[AblationVariant],
    seed: u64,
    exec: Execution,
) -> Result<ResultsTable> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    let configs = variants
        .iter()
        .map(|v| v.apply(base, data.skeleton))
        .collect::<Result<Vec<_>>>()?;
    let frames = horizons.frames(base.output_frames)?;
    let mut by_action: BTreeMap<&str, Vec<WindowSample>> = BTreeMap::new();
    for w in data.test {
        by_action
            .entry(action_of(&w.source_id))
            .or_default()
            .push(w.clone());
    }
    if by_action.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut table = ResultsTable::new(horizons.sorted_ms());
    for (variant, cfg) in variants.iter().zip(&configs) {
        let report = train(
            data.train,
            data.validation,
            data.skeleton,
            cfg,
            opt,
            horizons,
            seed,
            exec,
        )?;
        for (action, windows) in &by_action {
            let cells =
                evaluate_windows(&report.params, cfg, windows, data.skeleton, &frames, exec)?;
            table.push(variant.name(), action, cells)?;
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// SVG

pub const PANEL_SIZE: f64 = 200.0;
pub const PANEL_MARGIN: f64 = 10.0;
pub const GT_COLOR: &str = "green";
pub const PRED_COLOR: &str = "red";

/// Orthographic x-y view of both sequences at the given 0-based frames, one
/// panel per frame with ground truth and prediction overlaid. All panels
/// share one scale fitted to the bounding box of every drawn joint.
pub fn plot_prediction(
    gt: ArrayView2<'_, f64>,
    pred: ArrayView2<'_, f64>,
    skeleton: &SkeletonSpec,
    frames: &[usize],
) -> Result<String> {
    if skeleton.parent_index.is_none() {
        return Err(Error::Config(
            "plotting needs the skeleton's parent indices".into(),
        ));
    }
    let bones = skeleton.bones();
    for &f in frames {
        if f >= gt.nrows() || f >= pred.nrows() {
            return Err(Error::Domain(format!("frame {f} outside the sequences")));
        }
    }
    let gt_pos = frames_to_positions(gt, skeleton)?;
    let pred_pos = frames_to_positions(pred, skeleton)?;

    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &f in frames {
        for pos in [&gt_pos, &pred_pos] {
            for j in 0..skeleton.joint_count {
                let (x, y) = (pos[[f, j, 0]], pos[[f, j, 1]]);
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let extent = (x1 - x0).max(y1 - y0);
    let scale = if extent > 0.0 && extent.is_finite() {
        (PANEL_SIZE - 2.0 * PANEL_MARGIN) / extent
    } else {
        1.0
    };
    let project = |panel: usize, x: f64, y: f64| {
        (
            panel as f64 * PANEL_SIZE + PANEL_MARGIN + (x - x0) * scale,
            PANEL_MARGIN + (y1 - y) * scale,
        )
    };

    let width = PANEL_SIZE * frames.len() as f64;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_SIZE}" viewBox="0 0 {width} {PANEL_SIZE}">"#
    )
    .unwrap();
    for (panel, &f) in frames.iter().enumerate() {
        writeln!(out, r#"<g id="frame-{f}">"#).unwrap();
        for (pos, color) in [(&gt_pos, GT_COLOR), (&pred_pos, PRED_COLOR)] {
            for &(parent, child) in &bones {
                let (ax, ay) = project(panel, pos[[f, parent, 0]], pos[[f, parent, 1]]);
                let (bx, by) = project(panel, pos[[f, child, 0]], pos[[f, child, 1]]);
                writeln!(
                    out,
                    r#"<line x1="{ax:.4}" y1="{ay:.4}" x2="{bx:.4}" y2="{by:.4}" stroke="{color}" stroke-width="2"/>"#
                )
                .unwrap();
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

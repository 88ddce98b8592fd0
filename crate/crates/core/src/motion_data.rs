//! Pose sequences, the MTF text format, sliding-window sampling, forward
//! kinematics and the synthetic generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[serde(rename = "positions3d")]
    Positions3d,
    AngleAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_count: usize,
    pub per_joint_dim: usize,
    pub joint_names: Vec<String>,
    /// `-1` marks the root.
    pub parent_index: Option<Vec<i64>>,
    /// Millimeters, expressed in the parent frame.
    pub bone_offsets: Option<Vec<[f64; 3]>>,
    pub representation: Representation,
}

impl SkeletonSpec {
    /// A bare point-cloud skeleton with generic joint names.
    pub fn positions(joint_count: usize) -> Self {
        Self {
            joint_count,
            per_joint_dim: 3,
            joint_names: (0..joint_count).map(|j| format!("j{j}")).collect(),
            parent_index: None,
            bone_offsets: None,
            representation: Representation::Positions3d,
        }
    }

    /// Number of scalar coordinates per frame (`J * D`).
    pub fn k(&self) -> usize {
        self.joint_count * self.per_joint_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count == 0 || self.per_joint_dim == 0 {
            return Err(Error::Config(
                "joint_count and per_joint_dim must be positive".into(),
            ));
        }
        if self.joint_names.len() != self.joint_count {
            return Err(Error::Config(format!(
                "{} joint names for {} joints",
                self.joint_names.len(),
                self.joint_count
            )));
        }
        if self.representation == Representation::AngleAxis {
            if self.per_joint_dim != 3 {
                return Err(Error::Config("angle_axis requires D = 3".into()));
            }
            if self.parent_index.is_none() || self.bone_offsets.is_none() {
                return Err(Error::Config(
                    "angle_axis requires parents and offsets".into(),
                ));
            }
        }
        if self.representation == Representation::Positions3d && self.per_joint_dim != 3 {
            return Err(Error::Config("positions3d requires D = 3".into()));
        }
        if let Some(offsets) = &self.bone_offsets {
            if offsets.len() != self.joint_count {
                return Err(Error::Config(
                    "bone_offsets length differs from joint_count".into(),
                ));
            }
        }
        if self.parent_index.is_some() {
            self.topological_order()?;
        }
        Ok(())
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let parents = self
            .parent_index
            .as_ref()
            .ok_or_else(|| Error::Config("skeleton has no parent tree".into()))?;
        let j = self.joint_count;
        if parents.len() != j {
            return Err(Error::Config(
                "parent_index length differs from joint_count".into(),
            ));
        }
        let mut roots = 0;
        let mut children = vec![Vec::new(); j];
        for (child, &p) in parents.iter().enumerate() {
            if p < 0 {
                roots += 1;
            } else if (p as usize) < j && p as usize != child {
                children[p as usize].push(child);
            } else {
                return Err(Error::Config(format!(
                    "joint {child} has invalid parent {p}"
                )));
            }
        }
        if roots != 1 {
            return Err(Error::Config(format!(
                "parent tree must have exactly one root, found {roots}"
            )));
        }
        let root = parents.iter().position(|&p| p < 0).unwrap();
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            order.push(n);
            stack.extend(children[n].iter().rev());
        }
        if order.len() != j {
            return Err(Error::Config(
                "parent graph is not a tree (cycle detected)".into(),
            ));
        }
        Ok(order)
    }

    /// Parent-child joint pairs, in joint index order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        match &self.parent_index {
            Some(parents) => parents
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= 0)
                .map(|(c, &p)| (p as usize, c))
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub name: String,
    pub skeleton: SkeletonSpec,
    pub fps: f64,
    /// `[T_total x K]`
    pub frames: Array2<f64>,
    /// Ground-truth grouping for synthetic data.
    pub planted_groups: Option<Vec<usize>>,
}

impl MotionSequence {
    pub fn new(
        name: impl Into<String>,
        skeleton: SkeletonSpec,
        fps: f64,
        frames: Array2<f64>,
    ) -> Result<Self> {
        skeleton.validate()?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        if frames.nrows() == 0 {
            return Err(shape_err("sequence needs at least one frame"));
        }
        if frames.ncols() != skeleton.k() {
            return Err(shape_err(format!(
                "{} columns, skeleton expects {}",
                frames.ncols(),
                skeleton.k()
            )));
        }
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data {
                row: i / skeleton.k() + 1,
                msg: "non-finite value".into(),
            });
        }
        Ok(Self {
            name: name.into(),
            skeleton,
            fps,
            frames,
            planted_groups: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[T x K]`
    pub input: Array2<f64>,
    /// `[p x K]`
    pub target: Array2<f64>,
    pub source_id: String,
    pub start_frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub window_seconds: f64,
    pub stride_frames: usize,
    pub crop_seconds: f64,
    pub input_fraction: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            window_seconds: 3.0,
            stride_frames: 10,
            crop_seconds: 2.0,
            input_fraction: 0.5,
        }
    }
}

fn seconds_to_frames(seconds: f64, fps: f64, what: &str) -> Result<usize> {
    let exact = seconds * fps;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-6 || rounded < 2.0 {
        return Err(Error::Config(format!(
            "{what} of {seconds} s at {fps} fps is {exact} frames; need an integer >= 2"
        )));
    }
    Ok(rounded as usize)
}

impl WindowingConfig {
    pub fn window_frames(&self, fps: f64) -> Result<usize> {
        seconds_to_frames(self.window_seconds, fps, "window")
    }

    pub fn crop_frames(&self, fps: f64) -> Result<usize> {
        seconds_to_frames(self.crop_seconds, fps, "crop")
    }

    /// `(input rows, target rows)` of one crop.
    pub fn split_frames(&self, fps: f64) -> Result<(usize, usize)> {
        if !(self.input_fraction > 0.0 && self.input_fraction < 1.0) {
            return Err(Error::Config("input_fraction must lie in (0, 1)".into()));
        }
        let crop = self.crop_frames(fps)?;
        let n_in = (crop as f64 * self.input_fraction).round() as usize;
        if n_in == 0 || n_in >= crop {
            return Err(Error::Config(
                "input_fraction leaves an empty input or target".into(),
            ));
        }
        Ok((n_in, crop - n_in))
    }
}

// ---------------------------------------------------------------------------
// MTF

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MtfHeader {
    name: String,
    fps: f64,
    #[serde(rename = "J")]
    j: usize,
    #[serde(rename = "D")]
    d: usize,
    representation: Representation,
    joint_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    parents: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offsets: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    groups: Option<Vec<usize>>,
}

/// Parse MTF text. The skeleton is taken from the header.
pub fn parse_mtf(text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))?;
    let header: MtfHeader =
        serde_json::from_str(head).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let skeleton = SkeletonSpec {
        joint_count: header.j,
        per_joint_dim: header.d,
        joint_names: header.joint_names,
        parent_index: header.parents,
        bone_offsets: header.offsets,
        representation: header.representation,
    };
    skeleton
        .validate()
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let k = skeleton.k();
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Data {
                row: rows,
                msg: format!("unparseable token {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data {
                    row: rows,
                    msg: format!("non-finite value {tok}"),
                });
            }
            data.push(v);
        }
        if data.len() - before != k {
            return Err(shape_err(format!(
                "row {rows} has {} values, expected K = {k}",
                data.len() - before
            )));
        }
    }
    if rows == 0 {
        return Err(Error::Format("no frames".into()));
    }
    let frames = Array2::from_shape_vec((rows, k), data).expect("row lengths checked");
    let mut seq = MotionSequence::new(header.name, skeleton, header.fps, frames)?;
    if let Some(groups) = header.groups {
        if groups.len() != seq.skeleton.joint_count {
            return Err(Error::Format("groups length differs from J".into()));
        }
        seq.planted_groups = Some(groups);
    }
    Ok(seq)
}

/// Load an MTF file and check it against an expected skeleton.
pub fn load_sequence(path: impl AsRef<Path>, skeleton: &SkeletonSpec) -> Result<MotionSequence> {
    let seq = read_sequence(path)?;
    if seq.skeleton.joint_count != skeleton.joint_count
        || seq.skeleton.per_joint_dim != skeleton.per_joint_dim
    {
        return Err(Error::Format(format!(
            "file declares J={}, D={}; expected J={}, D={}",
            seq.skeleton.joint_count,
            seq.skeleton.per_joint_dim,
            skeleton.joint_count,
            skeleton.per_joint_dim
        )));
    }
    Ok(seq)
}

/// Load an MTF file trusting its own header.
pub fn read_sequence(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path)?;
    parse_mtf(&text)
}

pub fn format_mtf(seq: &MotionSequence) -> String {
    let sk = &seq.skeleton;
    let header = MtfHeader {
        name: seq.name.clone(),
        fps: seq.fps,
        j: sk.joint_count,
        d: sk.per_joint_dim,
        representation: sk.representation,
        joint_names: sk.joint_names.clone(),
        parents: sk.parent_index.clone(),
        offsets: sk.bone_offsets.clone(),
        groups: seq.planted_groups.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for row in seq.frames.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            // `{}` on f64 prints the shortest string that parses back exactly.
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_sequence(path: impl AsRef<Path>, seq: &MotionSequence) -> Result<()> {
    std::fs::write(path, format_mtf(seq))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Windowing

pub fn slide_windows(seq: &MotionSequence, cfg: &WindowingConfig) -> Result<Vec<Range<usize>>> {
    let w = cfg.window_frames(seq.fps)?;
    if cfg.stride_frames == 0 {
        return Err(Error::Config("stride_frames must be positive".into()));
    }
    let total = seq.len();
    if total < w {
        return Ok(Vec::new());
    }
    Ok((0..=total - w)
        .step_by(cfg.stride_frames)
        .map(|s| s..s + w)
        .collect())
}

pub fn crop_sample<R: Rng + ?Sized>(
    seq: &MotionSequence,
    range: Range<usize>,
    cfg: &WindowingConfig,
    rng: &mut R,
) -> Result<WindowSample> {
    let crop = cfg.crop_frames(seq.fps)?;
    let (n_in, _) = cfg.split_frames(seq.fps)?;
    if range.end > seq.len() || range.start >= range.end {
        return Err(Error::Config(format!(
            "range {range:?} outside sequence of {} frames",
            seq.len()
        )));
    }
    if crop > range.len() {
        return Err(Error::Config(format!(
            "crop of {crop} frames exceeds window of {}",
            range.len()
        )));
    }
    let start = rng.random_range(range.start..=range.end - crop);
    Ok(WindowSample {
        input: seq.frames.slice(s![start..start + n_in, ..]).to_owned(),
        target: seq
            .frames
            .slice(s![start + n_in..start + crop, ..])
            .to_owned(),
        source_id: seq.name.clone(),
        start_frame: start,
    })
}

// ---------------------------------------------------------------------------
// Forward kinematics

/// Rotation matrix of an angle-axis vector (Rodrigues).
pub fn angle_axis_to_matrix(v: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let (x, y, z) = (v[0] / theta, v[1] / theta, v[2] / theta);
    let (sn, cs) = theta.sin_cos();
    let t = 1.0 - cs;
    [
        [cs + x * x * t, x * y * t - z * sn, x * z * t + y * sn],
        [y * x * t + z * sn, cs + y * y * t, y * z * t - x * sn],
        [z * x * t - y * sn, z * y * t + x * sn, cs + z * z * t],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// 3D joint positions `[T x J x 3]` for a block of frames `[T x K]`.
pub fn frames_to_positions(
    frames: ArrayView2<'_, f64>,
    skeleton: &SkeletonSpec,
) -> Result<Array3<f64>> {
    let (t, k) = frames.dim();
    if k != skeleton.k() {
        return Err(shape_err(format!(
            "{k} columns, skeleton expects {}",
            skeleton.k()
        )));
    }
    let j = skeleton.joint_count;
    match skeleton.representation {
        Representation::Positions3d => {
            if skeleton.per_joint_dim != 3 {
                return Err(Error::Config("positions3d requires D = 3".into()));
            }
            Ok(frames
                .to_owned()
                .into_shape_with_order((t, j, 3))
                .expect("K = 3J"))
        }
        Representation::AngleAxis => {
            let (parents, offsets) = match (&skeleton.parent_index, &skeleton.bone_offsets) {
                (Some(p), Some(o)) => (p, o),
                _ => {
                    return Err(Error::Config(
                        "angle_axis requires parents and offsets".into(),
                    ))
                }
            };
            let order = skeleton.topological_order()?;
            let mut out = Array3::zeros((t, j, 3));
            let mut rot = vec![[[0.0; 3]; 3]; j];
            let mut pos = vec![[0.0; 3]; j];
            for f in 0..t {
                let row = frames.row(f);
                for &n in &order {
                    let local = angle_axis_to_matrix([row[3 * n], row[3 * n + 1], row[3 * n + 2]]);
                    let p = parents[n];
                    if p < 0 {
                        rot[n] = local;
                        pos[n] = [0.0; 3];
                    } else {
                        let p = p as usize;
                        let off = mat_vec(&rot[p], &offsets[n]);
                        pos[n] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
                        rot[n] = mat_mul(&rot[p], &local);
                    }
                    for c in 0..3 {
                        out[[f, n, c]] = pos[n][c];
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn to_positions(seq: &MotionSequence) -> Result<Array3<f64>> {
    frames_to_positions(seq.frames.view(), &seq.skeleton)
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: usize,
    /// Peak displacement of the oscillation, mm.
    pub amplitude: f64,
    /// Sinusoid components per group.
    pub components: usize,
    /// Frequencies are drawn uniformly from this band, Hz.
    pub min_hz: f64,
    pub max_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            amplitude: 100.0,
            components: 2,
            min_hz: 0.3,
            max_hz: 0.8,
        }
    }
}

/// Stick skeleton used for synthetic data: a root with up to five chains
/// (torso, two arms, two legs) filled round-robin.
pub fn synthetic_skeleton(joint_count: usize) -> SkeletonSpec {
    const LIMBS: [&str; 5] = ["torso", "larm", "rarm", "lleg", "rleg"];
    let mut parents = vec![-1i64; joint_count];
    let mut names = vec!["root".to_string(); joint_count];
    let mut tips = [0usize; 5];
    let mut depth = [0usize; 5];
    for jnt in 1..joint_count {
        let limb = (jnt - 1) % 5;
        parents[jnt] = tips[limb] as i64;
        tips[limb] = jnt;
        depth[limb] += 1;
        names[jnt] = format!("{}{}", LIMBS[limb], depth[limb]);
    }
    SkeletonSpec {
        joint_count,
        per_joint_dim: 3,
        joint_names: names,
        parent_index: Some(parents),
        bone_offsets: None,
        representation: Representation::Positions3d,
    }
}

fn rest_pose(joint_count: usize) -> Vec<[f64; 3]> {
    const DIRS: [[f64; 3]; 5] = [
        [0.0, 1.0, 0.0],
        [-1.0, 0.6, 0.0],
        [1.0, 0.6, 0.0],
        [-0.3, -1.0, 0.0],
        [0.3, -1.0, 0.0],
    ];
    let mut pose = vec![[0.0; 3]; joint_count];
    let mut tips = [0usize; 5];
    for jnt in 1..joint_count {
        let limb = (jnt - 1) % 5;
        let p = pose[tips[limb]];
        let d = DIRS[limb];
        pose[jnt] = [
            p[0] + 150.0 * d[0],
            p[1] + 150.0 * d[1],
            p[2] + 150.0 * d[2],
        ];
        tips[limb] = jnt;
    }
    pose
}

/// Planted grouping: contiguous blocks of joint indices.
pub fn planted_partition(joint_count: usize, groups: usize) -> Vec<usize> {
    let groups = groups.clamp(1, joint_count);
    (0..joint_count).map(|j| j * groups / joint_count).collect()
}

/// Sequences whose joints oscillate on sums of sinusoids; every joint in a
/// planted group shares the group's frequencies and phases, so correlated
/// groups exist by construction.
pub fn synth_dataset<R: Rng + ?Sized>(
    n_sequences: usize,
    skeleton_size: usize,
    fps: f64,
    seconds: f64,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<MotionSequence>> {
    if n_sequences == 0 || skeleton_size == 0 || !(fps > 0.0) || !(seconds > 0.0) || cfg.groups == 0
    {
        return Err(Error::Config(
            "synth_dataset arguments must be positive".into(),
        ));
    }
    let frames_total = (seconds * fps).round().max(1.0) as usize;
    let skeleton = synthetic_skeleton(skeleton_size);
    let rest = rest_pose(skeleton_size);
    let groups = planted_partition(skeleton_size, cfg.groups);
    let n_groups = groups.iter().max().unwrap() + 1;
    let mut out = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        // Per group: (freq, phase, weight) for each component.
        let waves: Vec<Vec<(f64, f64, f64)>> = (0..n_groups)
            .map(|_| {
                (0..cfg.components)
                    .map(|m| {
                        let f = rng.random_range(cfg.min_hz..=cfg.max_hz);
                        let ph = rng.random_range(0.0..std::f64::consts::TAU);
                        (f, ph, 1.0 / (m as f64 + 1.0))
                    })
                    .collect()
            })
            .collect();
        // Per joint: a direction of motion and a gain.
        let dirs: Vec<([f64; 3], f64)> = (0..skeleton_size)
            .map(|_| {
                let d = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                (d, rng.random_range(0.5..1.0))
            })
            .collect();
        let mut frames = Array2::zeros((frames_total, skeleton.k()));
        for t in 0..frames_total {
            let time = t as f64 / fps;
            for j in 0..skeleton_size {
                let g = groups[j];
                let osc: f64 = waves[g]
                    .iter()
                    .map(|&(f, ph, w)| w * (std::f64::consts::TAU * f * time + ph).sin())
                    .sum();
                let (d, gain) = dirs[j];
                for c in 0..3 {
                    frames[[t, 3 * j + c]] = rest[j][c] + cfg.amplitude * gain * d[c] * osc;
                }
            }
        }
        let mut seq = MotionSequence::new(format!("synth_{i:04}"), skeleton.clone(), fps, frames)?;
        seq.planted_groups = Some(groups.clone());
        out.push(seq);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Synthetic split rule: index mod 10 equal to 8 is validation, 9 is test.
pub fn synthetic_split(index: usize) -> Split {
    match index % 10 {
        8 => Split::Validation,
        9 => Split::Test,
        _ => Split::Train,
    }
}

/// Split manifest: one `<sequence name> <train|validation|test>` per line;
/// `#` starts a comment.
pub fn parse_split_manifest(text: &str) -> Result<HashMap<String, Split>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, split) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Format(format!(
                    "manifest line {}: expected `<name> <split>`",
                    n + 1
                )))
            }
        };
        let split = match split {
            "train" => Split::Train,
            "validation" | "val" => Split::Validation,
            "test" => Split::Test,
            other => {
                return Err(Error::Format(format!(
                    "manifest line {}: unknown split {other:?}",
                    n + 1
                )))
            }
        };
        out.insert(name.to_string(), split);
    }
    Ok(out)
}

/// Bone length helper used by FK checks.
pub fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(offset: [f64; 3]) -> SkeletonSpec {
        SkeletonSpec {
            joint_count: 2,
            per_joint_dim: 3,
            joint_names: vec!["root".into(), "child".into()],
            parent_index: Some(vec![-1, 0]),
            bone_offsets: Some(vec![[0.0; 3], offset]),
            representation: Representation::AngleAxis,
        }
    }

    fn seq_of_len(t: usize, fps: f64) -> MotionSequence {
        MotionSequence::new("s", SkeletonSpec::positions(1), fps, Array2::zeros((t, 3))).unwrap()
    }

    #[test]
    fn loads_zero_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mtf");
        std::fs::write(
            &path,
            "{\"name\":\"z\",\"fps\":50,\"J\":2,\"D\":3,\"representation\":\"positions3d\",\"joint_names\":[\"a\",\"b\"]}\n\
             0 0 0 0 0 0\n0 0 0 0 0 0\n",
        )
        .unwrap();
        let seq = load_sequence(&path, &SkeletonSpec::positions(2)).unwrap();
        assert_eq!(seq.frames, Array2::<f64>::zeros((2, 6)));
    }

    #[test]
    fn cmu_sized_header_gives_72_columns() {
        let names: Vec<String> = (0..24).map(|j| format!("\"j{j}\"")).collect();
        let row = vec!["0.5"; 72].join(" ");
        let text = format!(
            "{{\"name\":\"cmu\",\"fps\":25,\"J\":24,\"D\":3,\"representation\":\"positions3d\",\"joint_names\":[{}]}}\n{row}\n",
            names.join(",")
        );
        let seq = parse_mtf(&text).unwrap();
        assert_eq!(seq.frames.ncols(), 72);
    }

    #[test]
    fn nan_is_reported_with_row() {
        let mut text = String::from(
            "{\"name\":\"n\",\"fps\":50,\"J\":1,\"D\":3,\"representation\":\"positions3d\",\"joint_names\":[\"a\"]}\n",
        );
        for r in 1..=6 {
            text.push_str(if r == 5 { "1 NaN 2\n" } else { "1 2 3\n" });
        }
        match parse_mtf(&text) {
            Err(Error::Data { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            parse_mtf("{not json\n1 2 3\n"),
            Err(Error::Format(_))
        ));
        let head = "{\"name\":\"n\",\"fps\":50,\"J\":1,\"D\":3,\"representation\":\"positions3d\",\"joint_names\":[\"a\"]}\n";
        assert!(matches!(
            parse_mtf(&format!("{head}1 2\n")),
            Err(Error::Shape(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mtf");
        std::fs::write(&path, format!("{head}1 2 3\n")).unwrap();
        assert!(matches!(
            load_sequence(&path, &SkeletonSpec::positions(2)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn windows_enumerate_valid_starts() {
        let cfg = WindowingConfig::default();
        let starts = |t| {
            slide_windows(&seq_of_len(t, 50.0), &cfg)
                .unwrap()
                .iter()
                .map(|r| r.start)
                .collect::<Vec<_>>()
        };
        assert_eq!(starts(150), vec![0]);
        assert_eq!(starts(170), vec![0, 10, 20]);
        assert!(starts(100).is_empty());
    }

    #[test]
    fn crop_halves_and_determinism() {
        let mut seq = seq_of_len(150, 50.0);
        seq.frames
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64);
        let cfg = WindowingConfig::default();
        let a = crop_sample(&seq, 0..150, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = crop_sample(&seq, 0..150, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input.dim(), (50, 3));
        assert_eq!(a.target.dim(), (50, 3));
        assert_eq!(a.target.row(0), seq.frames.row(a.start_frame + 50));

        let full = WindowingConfig {
            crop_seconds: 3.0,
            ..cfg
        };
        for seed in 0..5 {
            let w = crop_sample(&seq, 0..150, &full, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(w.start_frame, 0);
        }
        let too_long = WindowingConfig {
            crop_seconds: 4.0,
            ..cfg
        };
        assert!(matches!(
            crop_sample(&seq, 0..150, &too_long, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fk_identity_and_quarter_turn() {
        let sk = chain([100.0, 0.0, 0.0]);
        let still = MotionSequence::new("a", sk.clone(), 50.0, Array2::zeros((1, 6))).unwrap();
        let p = to_positions(&still).unwrap();
        assert_eq!(p.slice(s![0, 1, ..]).to_vec(), vec![100.0, 0.0, 0.0]);

        let mut frames = Array2::zeros((1, 6));
        frames[[0, 2]] = std::f64::consts::FRAC_PI_2;
        let turned = MotionSequence::new("b", sk, 50.0, frames).unwrap();
        let p = to_positions(&turned).unwrap();
        assert_abs_diff_eq!(p[[0, 1, 0]], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[[0, 1, 1]], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[[0, 1, 2]], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn positions_pass_through_bit_identical() {
        let frames = Array2::from_shape_fn((3, 6), |(i, j)| (i * 7 + j) as f64 * 0.1);
        let seq =
            MotionSequence::new("p", SkeletonSpec::positions(2), 25.0, frames.clone()).unwrap();
        let p = to_positions(&seq).unwrap();
        assert_eq!(p.into_shape_with_order((3, 6)).unwrap(), frames);
    }

    #[test]
    fn angle_axis_needs_tree() {
        let mut sk = chain([1.0, 0.0, 0.0]);
        sk.bone_offsets = None;
        assert!(matches!(sk.validate(), Err(Error::Config(_))));
        let mut sk = chain([1.0, 0.0, 0.0]);
        sk.parent_index = Some(vec![1, 0]);
        assert!(matches!(sk.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn synth_contracts() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(1, 8, 25.0, 2.0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synth_dataset(1, 8, 25.0, 2.0, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let groups = a[0].planted_groups.as_ref().unwrap();
        assert_eq!(groups.iter().max().unwrap() + 1, 2);

        let flat = SynthConfig {
            amplitude: 0.0,
            ..cfg
        };
        let c = synth_dataset(1, 8, 25.0, 2.0, &flat, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let first = c[0].frames.row(0).to_owned();
        assert!(c[0].frames.rows().into_iter().all(|r| r == first));
    }

    #[test]
    fn manifest_parses() {
        let m = parse_split_manifest("S5_walk test\n# c\nS11_walk validation\nS1_walk train\n")
            .unwrap();
        assert_eq!(m["S5_walk"], Split::Test);
        assert_eq!(m["S11_walk"], Split::Validation);
        assert!(parse_split_manifest("a b c\n").is_err());
        assert_eq!(synthetic_split(18), Split::Validation);
        assert_eq!(synthetic_split(9), Split::Test);
    }
}

//! Data directories: loading, splitting and windowing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::motion_data::{
    crop_sample, parse_split_manifest, read_sequence, slide_windows, synthetic_split, MotionSequence, SkeletonSpec, Split,
    WindowSample, WindowingConfig,
};
use crate::rng::{stream, Stream};

/// Name of the optional split manifest inside a data directory.
pub const MANIFEST_FILE: &str = "splits.txt";

#[derive(Debug, Clone)]
pub struct Corpus {
    pub skeleton: SkeletonSpec,
    pub train: Vec<MotionSequence>,
    pub validation: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[MotionSequence] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Splits sequences by position: index mod 10 = 8 is validation, 9 is test.
    pub fn by_index(sequences: Vec<MotionSequence>) -> Result<Self> {
        Self::assemble(sequences.into_iter().enumerate().map(|(i, s)| (synthetic_split(i), s)).collect())
    }

    fn assemble(items: Vec<(Split, MotionSequence)>) -> Result<Self> {
        let skeleton = items.first().map(|(_, s)| s.skeleton.clone()).ok_or_else(|| Error::Config("no sequences".into()))?;
        let mut out = Corpus { skeleton, train: Vec::new(), validation: Vec::new(), test: Vec::new() };
        for (split, seq) in items {
            if seq.skeleton.k() != out.skeleton.k() || seq.skeleton.joint_count != out.skeleton.joint_count {
                return Err(Error::Format(format!("{}: skeleton differs from the first sequence", seq.name)));
            }
            match split {
                Split::Train => out.train.push(seq),
                Split::Validation => out.validation.push(seq),
                Split::Test => out.test.push(seq),
            }
        }
        Ok(out)
    }
}

/// Load every `*.mtf` file of `dir` in file-name order. With a
/// `splits.txt` manifest every sequence must be listed there; otherwise the
/// index rule of [`Corpus::by_index`] applies.
pub fn load_dir(dir: &Path) -> Result<Corpus> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mtf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .mtf files in {}", dir.display())));
    }
    let sequences = paths
        .iter()
        .map(|p| read_sequence(p).map_err(|e| Error::Format(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Corpus::by_index(sequences);
    }
    let splits = parse_split_manifest(&std::fs::read_to_string(&manifest)?)?;
    let items = sequences
        .into_iter()
        .map(|s| match splits.get(&s.name) {
            Some(&split) => Ok((split, s)),
            None => Err(Error::Config(format!("sequence {} is missing from {MANIFEST_FILE}", s.name))),
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::assemble(items)
}

/// Check that windows cut with `windowing` fit the model's `T` and `p`.
pub fn check_window_shape(windowing: &WindowingConfig, fps: f64, model: &ModelConfig) -> Result<()> {
    let (t, p) = windowing.split_frames(fps)?;
    if (t, p) != (model.input_frames, model.output_frames) {
        return Err(Error::Config(format!(
            "windowing gives T = {t}, p = {p} at {fps} fps but the model expects T = {}, p = {}",
            model.input_frames, model.output_frames
        )));
    }
    Ok(())
}

/// One random crop per sliding window. The crop of window `w` in sequence
/// `s` draws from its own stream, keyed by `split`.
pub fn make_windows(
    sequences: &[MotionSequence],
    windowing: &WindowingConfig,
    split: Split,
    seed: u64,
) -> Result<Vec<WindowSample>> {
    let tag = match split {
        Split::Train => 0u64,
        Split::Validation => 1,
        Split::Test => 2,
    };
    let mut out = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        for (wi, range) in slide_windows(seq, windowing)?.into_iter().enumerate() {
            let mut rng = stream(seed, Stream::Crop, (tag << 48) ^ ((si as u64) << 24) ^ wi as u64);
            out.push(crop_sample(seq, range, windowing, &mut rng)?);
        }
    }
    Ok(out)
}

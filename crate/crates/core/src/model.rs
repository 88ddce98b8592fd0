//! The two-scale network.
//!
//! Fine branch: a start layer lifts the `K` coordinate trajectories to `F`
//! features; each of the `n` stages runs a six-layer GCN block, merges its
//! input and output (concatenate + PONO, or a plain sum), and an end layer
//! reads out a residual chunk. Chunks chain as `ch_i = end_i + ch_{i-1}`,
//! starting from the last `c` observed frames.
//!
//! Coarse branch: the input is coarsened with a per-window joint grouping
//! and a single stage predicts the coarse future on top of one global
//! residual.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::edge_inference::{
    cluster_joints, coarsen, correlation_matrix, encode_edges_backward, encode_edges_cached,
    gumbel_noise, relaxed_sample, EdgeEncoder, EdgePosterior, EncoderCache, JointPartition,
    SampleMode,
};
use crate::error::{shape_err, Error, Result};
use crate::graph_layers::{
    join, Activation, GcnBlock, GraphConv, GraphConvCache, ParamSet, Pono, PonoCache, PonoVariant,
};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Edge encoder + clustering, per window.
    Learned,
    /// `ModelConfig::fixed_partition`, no encoder.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// Concatenate block input and output, then PONO.
    Pono,
    /// Elementwise sum of block input and output.
    Sum,
}

/// Which edge distribution drives grouping at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceEdges {
    Posterior,
    UniformPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub dim: usize,
    pub input_frames: usize,
    pub output_frames: usize,
    pub n_chunks: usize,
    pub features: usize,
    pub tau: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub kl_weight: f64,
    pub pono_variant: PonoVariant,
    pub pono_epsilon: f64,
    pub grouping_threshold: f64,
    pub edge_classes: usize,
    pub encoder_hidden: usize,
    pub coarse_branch: bool,
    pub grouping: Grouping,
    /// Group id per joint; used when `grouping = fixed`.
    pub fixed_partition: Option<Vec<usize>>,
    pub merge: Merge,
    pub inference_edges: InferenceEdges,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 8,
            dim: 3,
            input_frames: 24,
            output_frames: 24,
            n_chunks: 6,
            features: 256,
            tau: 0.5,
            sigma0: 1.0,
            sigma1: 1.0,
            kl_weight: 1.0,
            pono_variant: PonoVariant::Standard,
            pono_epsilon: 1e-5,
            grouping_threshold: 0.5,
            edge_classes: 2,
            encoder_hidden: 256,
            coarse_branch: true,
            grouping: Grouping::Learned,
            fixed_partition: None,
            merge: Merge::Pono,
            inference_edges: InferenceEdges::Posterior,
        }
    }
}

impl ModelConfig {
    pub fn k(&self) -> usize {
        self.joints * self.dim
    }

    /// Frames per chunk.
    pub fn chunk_len(&self) -> usize {
        self.output_frames / self.n_chunks.max(1)
    }

    pub fn uses_encoder(&self) -> bool {
        self.coarse_branch && self.grouping == Grouping::Learned
    }

    pub fn pono(&self) -> Pono {
        Pono {
            epsilon: self.pono_epsilon,
            variant: self.pono_variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("dim", self.dim),
            ("input_frames", self.input_frames),
            ("output_frames", self.output_frames),
            ("n_chunks", self.n_chunks),
            ("features", self.features),
            ("edge_classes", self.edge_classes),
            ("encoder_hidden", self.encoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.output_frames % self.n_chunks != 0 {
            return Err(Error::Config(format!(
                "output_frames = {} is not divisible by n_chunks = {}",
                self.output_frames, self.n_chunks
            )));
        }
        if self.input_frames < self.chunk_len() {
            return Err(Error::Config(format!(
                "input_frames = {} is shorter than one chunk of {} frames",
                self.input_frames,
                self.chunk_len()
            )));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("sigma0", self.sigma0),
            ("sigma1", self.sigma1),
            ("pono_epsilon", self.pono_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        if !(self.grouping_threshold > 0.0 && self.grouping_threshold < 1.0) {
            return Err(Error::Config(
                "grouping_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.uses_encoder() && self.joints < 2 {
            return Err(Error::Config(
                "learned grouping needs at least 2 joints".into(),
            ));
        }
        if self.coarse_branch && self.grouping == Grouping::Fixed {
            self.fixed()?;
        }
        Ok(())
    }

    /// The configured fixed partition.
    pub fn fixed(&self) -> Result<JointPartition> {
        let labels = self
            .fixed_partition
            .as_ref()
            .ok_or_else(|| Error::Config("grouping = fixed needs fixed_partition".into()))?;
        if labels.len() != self.joints {
            return Err(Error::Config(format!(
                "fixed_partition has {} entries for {} joints",
                labels.len(),
                self.joints
            )));
        }
        Ok(JointPartition::from_labels(labels))
    }

    /// `[start, end)` of every output chunk.
    pub fn chunk_boundaries(&self) -> Vec<Range<usize>> {
        let c = self.chunk_len();
        (0..self.n_chunks).map(|i| i * c..(i + 1) * c).collect()
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (k, f, t, p) = (
            self.k(),
            self.features,
            self.input_frames,
            self.output_frames,
        );
        let block = 6 * (k * k + f * f);
        let mut n = (k * k + t * f) + self.n_chunks * (block + k * k + f * t);
        if self.coarse_branch {
            n += (k * k + t * f) + block + (k * k + f * p);
        }
        if self.uses_encoder() {
            let mlp = |i: usize, h: usize, o: usize| i * h + h + h * o + o;
            let h = self.encoder_hidden;
            n += mlp(t * self.dim, h, h)
                + mlp(2 * h, h, h)
                + mlp(h, h, h)
                + mlp(2 * h, h, self.edge_classes);
        }
        n
    }
}

/// Per-coordinate standardization of network inputs. Frozen after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    pub fn identity(k: usize) -> Self {
        Self {
            mean: Array1::zeros(k),
            std: Array1::ones(k),
        }
    }

    /// Mean and population std of every coordinate over all given frames.
    pub fn fit<'a>(blocks: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let mut rows = Vec::new();
        for b in blocks {
            rows.push(b);
        }
        if rows.is_empty() {
            return Err(Error::Config("cannot fit a normalizer on no data".into()));
        }
        let all = concatenate(Axis(0), &rows).map_err(|e| shape_err(e.to_string()))?;
        let mean = all.mean_axis(Axis(0)).unwrap();
        let std = all
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-8 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    /// `[T x K]` frames to the network's `[K x T]` node-feature layout.
    fn nodes(&self, frames: &Array2<f64>) -> Array2<f64> {
        ((frames - &self.mean) / &self.std).reversed_axes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineBranch {
    pub start: GraphConv,
    pub blocks: Vec<GcnBlock>,
    pub ends: Vec<GraphConv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseBranch {
    pub start: GraphConv,
    pub block: GcnBlock,
    pub end: GraphConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fine: FineBranch,
    pub coarse: Option<CoarseBranch>,
    pub encoder: Option<EdgeEncoder>,
    /// Not trained; excluded from `ParamSet` traversal.
    pub normalizer: Normalizer,
}

impl ParamSet for FineBranch {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.start.visit(&join(prefix, "start"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        for (i, e) in self.ends.iter().enumerate() {
            e.visit(&join(prefix, &format!("end{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.start.visit_mut(&join(prefix, "start"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        for (i, e) in self.ends.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("end{i}")), f);
        }
    }
}

impl ParamSet for CoarseBranch {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.start.visit(&join(prefix, "start"), f);
        self.block.visit(&join(prefix, "block"), f);
        self.end.visit(&join(prefix, "end"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.start.visit_mut(&join(prefix, "start"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
        self.end.visit_mut(&join(prefix, "end"), f);
    }
}

impl ParamSet for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.fine.visit(&join(prefix, "fine"), f);
        if let Some(c) = &self.coarse {
            c.visit(&join(prefix, "coarse"), f);
        }
        if let Some(e) = &self.encoder {
            e.visit(&join(prefix, "encoder"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.fine.visit_mut(&join(prefix, "fine"), f);
        if let Some(c) = &mut self.coarse {
            c.visit_mut(&join(prefix, "coarse"), f);
        }
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&join(prefix, "encoder"), f);
        }
    }
}

impl ModelParams {
    /// Fresh parameters. Each branch draws from its own stream of `seed`, so
    /// branches are initialized identically whether or not the others exist.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (k, f, t, p) = (cfg.k(), cfg.features, cfg.input_frames, cfg.output_frames);
        let mut rng = stream(seed, Stream::InitFine, 0);
        let fine = FineBranch {
            start: GraphConv::init(k, t, f, Activation::Tanh, &mut rng),
            blocks: (0..cfg.n_chunks)
                .map(|_| GcnBlock::init(k, f, &mut rng))
                .collect(),
            ends: (0..cfg.n_chunks)
                .map(|_| GraphConv::init(k, f, t, Activation::Identity, &mut rng))
                .collect(),
        };
        let coarse = cfg.coarse_branch.then(|| {
            let mut rng = stream(seed, Stream::InitCoarse, 0);
            CoarseBranch {
                start: GraphConv::init(k, t, f, Activation::Tanh, &mut rng),
                block: GcnBlock::init(k, f, &mut rng),
                end: GraphConv::init(k, f, p, Activation::Identity, &mut rng),
            }
        });
        let encoder = cfg.uses_encoder().then(|| {
            let mut rng = stream(seed, Stream::InitEncoder, 0);
            EdgeEncoder::init(t * cfg.dim, cfg.encoder_hidden, cfg.edge_classes, &mut rng)
        });
        Ok(Self {
            fine,
            coarse,
            encoder,
            normalizer: Normalizer::identity(k),
        })
    }

    /// Zero every end-layer parameter so all residual chunks vanish.
    pub fn zero_end_layers(&mut self) {
        for e in &mut self.fine.ends {
            e.adjacency.fill(0.0);
            e.weight.fill(0.0);
        }
        if let Some(c) = &mut self.coarse {
            c.end.adjacency.fill(0.0);
            c.end.weight.fill(0.0);
        }
    }

    /// Check that the parameter structure matches a config.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (k, f, t, p) = (cfg.k(), cfg.features, cfg.input_frames, cfg.output_frames);
        let conv = |c: &GraphConv, fi: usize, fo: usize, what: &str| {
            if c.adjacency.dim() != (k, k) || c.weight.dim() != (fi, fo) {
                Err(shape_err(format!(
                    "{what} has shape A{:?} W{:?}",
                    c.adjacency.dim(),
                    c.weight.dim()
                )))
            } else {
                Ok(())
            }
        };
        conv(&self.fine.start, t, f, "fine.start")?;
        if self.fine.blocks.len() != cfg.n_chunks || self.fine.ends.len() != cfg.n_chunks {
            return Err(shape_err("fine branch stage count differs from n_chunks"));
        }
        for b in &self.fine.blocks {
            for l in &b.layers {
                conv(l, f, f, "fine block layer")?;
            }
        }
        for e in &self.fine.ends {
            conv(e, f, t, "fine end")?;
        }
        match (&self.coarse, cfg.coarse_branch) {
            (Some(c), true) => {
                conv(&c.start, t, f, "coarse.start")?;
                for l in &c.block.layers {
                    conv(l, f, f, "coarse block layer")?;
                }
                conv(&c.end, f, p, "coarse.end")?;
            }
            (None, false) => {}
            _ => return Err(shape_err("coarse branch presence differs from config")),
        }
        match (&self.encoder, cfg.uses_encoder()) {
            (Some(e), true) => {
                if e.traj_len() != t * cfg.dim || e.classes() != cfg.edge_classes {
                    return Err(shape_err("edge encoder shape differs from config"));
                }
            }
            (None, false) => {}
            _ => return Err(shape_err("edge encoder presence differs from config")),
        }
        if self.normalizer.mean.len() != k || self.normalizer.std.len() != k {
            return Err(shape_err("normalizer width differs from K"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// `[p x K]`
    pub y0_hat: Array2<f64>,
    /// `[p x K]`; absent without a coarse branch.
    pub y1_hat: Option<Array2<f64>>,
    /// `[T x K]`
    pub x1: Array2<f64>,
    pub partition: JointPartition,
    pub posterior: Option<EdgePosterior>,
    pub chunk_boundaries: Vec<Range<usize>>,
}

enum MergeCache {
    Pono(PonoCache),
    Sum,
}

struct StageTrace {
    block: Vec<GraphConvCache>,
    merge: MergeCache,
    end: GraphConvCache,
}

struct BranchTrace {
    start: GraphConvCache,
    stages: Vec<StageTrace>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct Trace {
    fine: BranchTrace,
    coarse: Option<BranchTrace>,
    encoder: Option<EncoderCache>,
}

/// Override of the end-layer readout, used to probe the chunk recursion.
pub type EndOverride<'a> = &'a dyn Fn(usize, &Array2<f64>) -> Array2<f64>;

fn run_stage(
    block: &GcnBlock,
    end: &GraphConv,
    h: &Array2<f64>,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, Array2<f64>, StageTrace)> {
    let (g, block_cache) = block.forward_cached(h)?;
    let (merged, merge) = match cfg.merge {
        Merge::Pono => {
            let cat = concatenate(Axis(0), &[h.view(), g.view()]).expect("same width");
            let (m, c) = cfg.pono().forward_cached(&cat)?;
            (m, MergeCache::Pono(c))
        }
        Merge::Sum => (h + &g, MergeCache::Sum),
    };
    let (e, end_cache) = end.forward_cached(&merged)?;
    Ok((
        merged,
        e,
        StageTrace {
            block: block_cache,
            merge,
            end: end_cache,
        },
    ))
}

/// Gradient into a stage's input, given gradients at its merged output and
/// its end-layer output; accumulates parameter gradients.
fn stage_backward(
    block: &GcnBlock,
    end: &GraphConv,
    trace: &StageTrace,
    cfg: &ModelConfig,
    d_merged_in: Array2<f64>,
    d_end: &Array2<f64>,
    g_block: &mut GcnBlock,
    g_end: &mut GraphConv,
) -> Array2<f64> {
    let d_merged = d_merged_in + end.backward(&trace.end, d_end, g_end);
    match &trace.merge {
        MergeCache::Pono(c) => {
            let d_cat = cfg.pono().backward(c, &d_merged);
            let k = d_merged.nrows();
            let d_g = d_cat.slice(s![k.., ..]).to_owned();
            let mut d_h = d_cat.slice(s![..k, ..]).to_owned();
            d_h += &block.backward(&trace.block, &d_g, g_block);
            d_h
        }
        MergeCache::Sum => {
            let d_g = block.backward(&trace.block, &d_merged, g_block);
            d_merged + d_g
        }
    }
}

/// Last `c` columns of a `[K x T]` end-layer output, as `[c x K]` frames
/// scaled back to data units.
fn read_chunk(e: &Array2<f64>, c: usize, std: &Array1<f64>) -> Array2<f64> {
    let t = e.ncols();
    let mut chunk = e.slice(s![.., t - c..]).t().to_owned();
    chunk *= std;
    chunk
}

/// Edge sampling noise for one forward pass.
pub enum EdgeNoise<'a> {
    /// Draw fresh Gumbel noise (train) or none (infer) according to the mode.
    Rng(&'a mut dyn RngCore),
    /// Use this exact noise tensor (train mode only).
    Frozen(&'a ndarray::Array3<f64>),
}

pub fn forward<R: Rng>(
    x0: &Array2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut R,
    mode: SampleMode,
) -> Result<ForwardResult> {
    Ok(forward_traced(x0, params, cfg, EdgeNoise::Rng(rng), mode, None)?.0)
}

pub fn forward_traced(
    x0: &Array2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
    noise: EdgeNoise<'_>,
    mode: SampleMode,
    end_override: Option<EndOverride<'_>>,
) -> Result<(ForwardResult, Trace)> {
    cfg.validate()?;
    let (t, k, p, c) = (
        cfg.input_frames,
        cfg.k(),
        cfg.output_frames,
        cfg.chunk_len(),
    );
    if x0.dim() != (t, k) {
        return Err(shape_err(format!(
            "x0 is {:?}, config expects [{t} x {k}]",
            x0.dim()
        )));
    }
    let norm = &params.normalizer;

    // fine branch
    let (mut h, start_cache) = params.fine.start.forward_cached(&norm.nodes(x0))?;
    let mut prev = x0.slice(s![t - c.., ..]).to_owned();
    let mut y0_hat = Array2::zeros((p, k));
    let mut stages = Vec::with_capacity(cfg.n_chunks);
    for (i, (block, end)) in params.fine.blocks.iter().zip(&params.fine.ends).enumerate() {
        let (merged, e, st) = run_stage(block, end, &h, cfg)?;
        let end_chunk = match end_override {
            Some(f) => f(i, &read_chunk(&e, c, &norm.std)),
            None => read_chunk(&e, c, &norm.std),
        };
        let ch = end_chunk + &prev;
        y0_hat.slice_mut(s![i * c..(i + 1) * c, ..]).assign(&ch);
        prev = ch;
        stages.push(st);
        h = merged;
    }
    let fine = BranchTrace {
        start: start_cache,
        stages,
    };

    // grouping
    let mut posterior = None;
    let mut enc_cache = None;
    let partition = if !cfg.coarse_branch {
        JointPartition::singletons(cfg.joints)
    } else {
        match cfg.grouping {
            Grouping::Fixed => cfg.fixed()?,
            Grouping::Learned => {
                let enc = params
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::Config("learned grouping without encoder".into()))?;
                let (post, cache) = encode_edges_cached(norm.nodes(x0).t(), cfg.joints, enc)?;
                let z = match (mode, noise) {
                    (SampleMode::Train, EdgeNoise::Frozen(n)) => {
                        relaxed_sample(&post.logits, cfg.tau, Some(n))?
                    }
                    (SampleMode::Train, EdgeNoise::Rng(r)) => {
                        let n = gumbel_noise(cfg.joints, cfg.edge_classes, r);
                        relaxed_sample(&post.logits, cfg.tau, Some(&n))?
                    }
                    (SampleMode::Infer, _) => match cfg.inference_edges {
                        InferenceEdges::Posterior => relaxed_sample(&post.logits, cfg.tau, None)?,
                        InferenceEdges::UniformPrior => {
                            relaxed_sample(&(&post.logits * 0.0), cfg.tau, None)?
                        }
                    },
                };
                posterior = Some(post);
                enc_cache = Some(cache);
                cluster_joints(&correlation_matrix(&z), cfg.grouping_threshold)?.partition
            }
        }
    };
    let x1 = coarsen(x0.view(), &partition, cfg.dim)?;

    // coarse branch
    let (y1_hat, coarse) = match &params.coarse {
        Some(cb) if cfg.coarse_branch => {
            let (h, start_cache) = cb.start.forward_cached(&norm.nodes(&x1))?;
            let (_, e, st) = run_stage(&cb.block, &cb.end, &h, cfg)?;
            let base = x1.slice(s![t - c.., ..]);
            let mut y1 = read_chunk(&e, p, &norm.std);
            for i in 0..cfg.n_chunks {
                let mut rows = y1.slice_mut(s![i * c..(i + 1) * c, ..]);
                rows += &base;
            }
            (
                Some(y1),
                Some(BranchTrace {
                    start: start_cache,
                    stages: vec![st],
                }),
            )
        }
        _ => (None, None),
    };

    let result = ForwardResult {
        y0_hat,
        y1_hat,
        x1,
        partition,
        posterior,
        chunk_boundaries: cfg.chunk_boundaries(),
    };
    Ok((
        result,
        Trace {
            fine,
            coarse,
            encoder: enc_cache,
        },
    ))
}

/// Reverse pass. `d_y1` is ignored without a coarse branch, `d_logits`
/// without an encoder.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &Trace,
    d_y0: &Array2<f64>,
    d_y1: Option<&Array2<f64>>,
    d_logits: Option<&ndarray::Array3<f64>>,
) -> ModelParams {
    let mut grads = params.zeroed();
    let (t, k, c) = (cfg.input_frames, cfg.k(), cfg.chunk_len());
    let std = &params.normalizer.std;

    // fine: walk stages in reverse, carrying the chunk-chain gradient and
    // the gradient arriving at each stage's merged output from the next stage.
    let mut d_chain = Array2::<f64>::zeros((c, k));
    let mut d_h = Array2::<f64>::zeros((k, cfg.features));
    for i in (0..cfg.n_chunks).rev() {
        d_chain += &d_y0.slice(s![i * c..(i + 1) * c, ..]);
        let mut d_e = Array2::zeros((k, t));
        d_e.slice_mut(s![.., t - c..]).assign(&(&d_chain * std).t());
        d_h = stage_backward(
            &params.fine.blocks[i],
            &params.fine.ends[i],
            &trace.fine.stages[i],
            cfg,
            d_h,
            &d_e,
            &mut grads.fine.blocks[i],
            &mut grads.fine.ends[i],
        );
    }
    params
        .fine
        .start
        .backward(&trace.fine.start, &d_h, &mut grads.fine.start);

    if let (Some(cb), Some(ct), Some(d_y1), Some(gc)) =
        (&params.coarse, &trace.coarse, d_y1, grads.coarse.as_mut())
    {
        let d_e = (d_y1 * std).reversed_axes();
        let d_h = stage_backward(
            &cb.block,
            &cb.end,
            &ct.stages[0],
            cfg,
            Array2::zeros((k, cfg.features)),
            &d_e,
            &mut gc.block,
            &mut gc.end,
        );
        cb.start.backward(&ct.start, &d_h, &mut gc.start);
    }

    if let (Some(enc), Some(cache), Some(d_l), Some(ge)) = (
        &params.encoder,
        &trace.encoder,
        d_logits,
        grads.encoder.as_mut(),
    ) {
        encode_edges_backward(enc, cache, d_l, ge);
    }
    grads
}

/// Deterministic inference: noise-free edges, fine-scale prediction and the
/// grouping used.
pub fn predict(
    x0: &Array2<f64>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Array2<f64>, JointPartition)> {
    // infer mode draws no noise
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let r = forward(x0, params, cfg, &mut unused, SampleMode::Infer)?;
    Ok((r.y0_hat, r.partition))
}

//! Relational inference over joints: a fully connected message-passing
//! encoder produces per-pair edge logits, a Gumbel-softmax relaxation samples
//! edges, and average-linkage clustering of the symmetrized "on" weights
//! groups joints into body components for the coarse scale.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph_layers::{join, ParamSet};

/// Edge class whose probability is read as a correlation weight.
pub const ON_CLASS: usize = 0;

/// Distances closer than this are treated as equal when clustering.
pub const TIE_EPS: f64 = 1e-12;

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Two affine layers with an ELU in between and optionally after.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub elu_output: bool,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    pre1: Array2<f64>,
    hidden: Array2<f64>,
    pre2: Array2<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        elu_output: bool,
        rng: &mut R,
    ) -> Self {
        let b_in = 1.0 / (input as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((input, hidden), |_| rng.random_range(-b_in..b_in)),
            b1: Array2::from_shape_fn((1, hidden), |_| rng.random_range(-b_in..b_in)),
            w2: Array2::from_shape_fn((hidden, output), |_| rng.random_range(-b_hid..b_hid)),
            b2: Array2::from_shape_fn((1, output), |_| rng.random_range(-b_hid..b_hid)),
            elu_output,
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize, elu_output: bool) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, output)),
            b2: Array2::zeros((1, output)),
            elu_output,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.w1.nrows() {
            return Err(shape_err(format!(
                "MLP expects width {}, got {}",
                self.w1.nrows(),
                x.ncols()
            )));
        }
        let pre1 = x.dot(&self.w1) + &self.b1;
        let hidden = pre1.mapv(elu);
        let pre2 = hidden.dot(&self.w2) + &self.b2;
        let out = if self.elu_output {
            pre2.mapv(elu)
        } else {
            pre2.clone()
        };
        Ok((
            out,
            MlpCache {
                input: x.clone(),
                pre1,
                hidden,
                pre2,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let d_pre2 = if self.elu_output {
            d_out * &cache.pre2.mapv(elu_grad)
        } else {
            d_out.clone()
        };
        grads.w2 += &cache.hidden.t().dot(&d_pre2);
        grads.b2 += &d_pre2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_pre1 = d_pre2.dot(&self.w2.t()) * cache.pre1.mapv(elu_grad);
        grads.w1 += &cache.input.t().dot(&d_pre1);
        grads.b1 += &d_pre1.sum_axis(Axis(0)).insert_axis(Axis(0));
        d_pre1.dot(&self.w1.t())
    }
}

impl ParamSet for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(join(prefix, "w1"), &mut self.w1);
        f(join(prefix, "b1"), &mut self.b1);
        f(join(prefix, "w2"), &mut self.w2);
        f(join(prefix, "b2"), &mut self.b2);
    }
}

/// The four networks of the two-round message passing encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEncoder {
    /// trajectory -> node embedding
    pub node_embed: Mlp,
    /// [node_i, node_j] -> edge embedding
    pub edge_embed: Mlp,
    /// summed incoming edges -> node embedding
    pub node_update: Mlp,
    /// [node_i, node_j] -> class logits
    pub edge_logits: Mlp,
}

impl EdgeEncoder {
    pub fn init<R: Rng + ?Sized>(
        traj_len: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            node_embed: Mlp::init(traj_len, hidden, hidden, true, rng),
            edge_embed: Mlp::init(2 * hidden, hidden, hidden, true, rng),
            node_update: Mlp::init(hidden, hidden, hidden, true, rng),
            edge_logits: Mlp::init(2 * hidden, hidden, classes, false, rng),
        }
    }

    pub fn zeros(traj_len: usize, hidden: usize, classes: usize) -> Self {
        Self {
            node_embed: Mlp::zeros(traj_len, hidden, hidden, true),
            edge_embed: Mlp::zeros(2 * hidden, hidden, hidden, true),
            node_update: Mlp::zeros(hidden, hidden, hidden, true),
            edge_logits: Mlp::zeros(2 * hidden, hidden, classes, false),
        }
    }

    pub fn classes(&self) -> usize {
        self.edge_logits.w2.ncols()
    }

    pub fn traj_len(&self) -> usize {
        self.node_embed.w1.nrows()
    }
}

impl ParamSet for EdgeEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.node_embed.visit(&join(prefix, "node_embed"), f);
        self.edge_embed.visit(&join(prefix, "edge_embed"), f);
        self.node_update.visit(&join(prefix, "node_update"), f);
        self.edge_logits.visit(&join(prefix, "edge_logits"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.node_embed.visit_mut(&join(prefix, "node_embed"), f);
        self.edge_embed.visit_mut(&join(prefix, "edge_embed"), f);
        self.node_update.visit_mut(&join(prefix, "node_update"), f);
        self.edge_logits.visit_mut(&join(prefix, "edge_logits"), f);
    }
}

/// `q(z_ij | x)` for every ordered pair; diagonal entries are unused and held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePosterior {
    /// `[J x J x C]`
    pub logits: Array3<f64>,
    /// softmax of `logits` over the class axis
    pub probs: Array3<f64>,
}

fn softmax_into(src: ndarray::ArrayView1<'_, f64>, mut dst: ndarray::ArrayViewMut1<'_, f64>) {
    let m = src.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (d, &v) in dst.iter_mut().zip(src.iter()) {
        *d = (v - m).exp();
        total += *d;
    }
    dst.mapv_inplace(|v| v / total);
}

impl EdgePosterior {
    pub fn from_logits(logits: Array3<f64>) -> Self {
        let (j, _, _) = logits.dim();
        let mut probs = Array3::zeros(logits.dim());
        for a in 0..j {
            for b in 0..j {
                if a != b {
                    softmax_into(logits.slice(s![a, b, ..]), probs.slice_mut(s![a, b, ..]));
                }
            }
        }
        Self { logits, probs }
    }

    pub fn joints(&self) -> usize {
        self.logits.dim().0
    }

    pub fn classes(&self) -> usize {
        self.logits.dim().2
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    joints: usize,
    node_embed: MlpCache,
    edge_embed: MlpCache,
    node_update: MlpCache,
    edge_logits: MlpCache,
}

fn ordered_pairs(j: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..j).flat_map(move |a| (0..j).filter(move |&b| b != a).map(move |b| (a, b)))
}

fn pair_features(nodes: &Array2<f64>, j: usize) -> Array2<f64> {
    let h = nodes.ncols();
    let mut out = Array2::zeros((j * (j - 1), 2 * h));
    for (e, (a, b)) in ordered_pairs(j).enumerate() {
        out.slice_mut(s![e, ..h]).assign(&nodes.row(a));
        out.slice_mut(s![e, h..]).assign(&nodes.row(b));
    }
    out
}

fn pair_features_backward(d_pairs: &Array2<f64>, j: usize) -> Array2<f64> {
    let h = d_pairs.ncols() / 2;
    let mut out = Array2::zeros((j, h));
    for (e, (a, b)) in ordered_pairs(j).enumerate() {
        let mut ra = out.row_mut(a);
        ra += &d_pairs.slice(s![e, ..h]);
        let mut rb = out.row_mut(b);
        rb += &d_pairs.slice(s![e, h..]);
    }
    out
}

/// Per-joint trajectories `[J x T*D]`: row j is joint j's D values frame after frame.
pub fn joint_trajectories(x0: ArrayView2<'_, f64>, joints: usize) -> Result<Array2<f64>> {
    let (t, k) = x0.dim();
    if joints == 0 || k % joints != 0 {
        return Err(shape_err(format!(
            "K = {k} is not a multiple of J = {joints}"
        )));
    }
    let d = k / joints;
    Ok(Array2::from_shape_fn((joints, t * d), |(j, idx)| {
        x0[[idx / d, j * d + idx % d]]
    }))
}

pub fn encode_edges(
    x0: ArrayView2<'_, f64>,
    joints: usize,
    enc: &EdgeEncoder,
) -> Result<EdgePosterior> {
    Ok(encode_edges_cached(x0, joints, enc)?.0)
}

pub fn encode_edges_cached(
    x0: ArrayView2<'_, f64>,
    joints: usize,
    enc: &EdgeEncoder,
) -> Result<(EdgePosterior, EncoderCache)> {
    if joints < 2 {
        return Err(Error::Domain(format!(
            "edge inference needs at least 2 joints, got {joints}"
        )));
    }
    let traj = joint_trajectories(x0, joints)?;
    let (h1, c0) = enc.node_embed.forward(&traj)?;
    let (e1, c1) = enc.edge_embed.forward(&pair_features(&h1, joints))?;
    // incoming messages: node b collects every edge (a, b)
    let mut agg = Array2::zeros((joints, e1.ncols()));
    for (e, (_, b)) in ordered_pairs(joints).enumerate() {
        let mut row = agg.row_mut(b);
        row += &e1.row(e);
    }
    let (h2, c2) = enc.node_update.forward(&agg)?;
    let (e2, c3) = enc.edge_logits.forward(&pair_features(&h2, joints))?;
    let classes = e2.ncols();
    let mut logits = Array3::zeros((joints, joints, classes));
    for (e, (a, b)) in ordered_pairs(joints).enumerate() {
        logits.slice_mut(s![a, b, ..]).assign(&e2.row(e));
    }
    let cache = EncoderCache {
        joints,
        node_embed: c0,
        edge_embed: c1,
        node_update: c2,
        edge_logits: c3,
    };
    Ok((EdgePosterior::from_logits(logits), cache))
}

/// Accumulate encoder parameter gradients from `d logits` (`[J x J x C]`, diagonal ignored).
pub fn encode_edges_backward(
    enc: &EdgeEncoder,
    cache: &EncoderCache,
    d_logits: &Array3<f64>,
    grads: &mut EdgeEncoder,
) {
    let j = cache.joints;
    let classes = d_logits.dim().2;
    let mut d_e2 = Array2::zeros((j * (j - 1), classes));
    for (e, (a, b)) in ordered_pairs(j).enumerate() {
        d_e2.row_mut(e).assign(&d_logits.slice(s![a, b, ..]));
    }
    let d_pairs2 = enc
        .edge_logits
        .backward(&cache.edge_logits, &d_e2, &mut grads.edge_logits);
    let d_h2 = pair_features_backward(&d_pairs2, j);
    let d_agg = enc
        .node_update
        .backward(&cache.node_update, &d_h2, &mut grads.node_update);
    let mut d_e1 = Array2::zeros((j * (j - 1), d_agg.ncols()));
    for (e, (_, b)) in ordered_pairs(j).enumerate() {
        d_e1.row_mut(e).assign(&d_agg.row(b));
    }
    let d_pairs1 = enc
        .edge_embed
        .backward(&cache.edge_embed, &d_e1, &mut grads.edge_embed);
    let d_h1 = pair_features_backward(&d_pairs1, j);
    enc.node_embed
        .backward(&cache.node_embed, &d_h1, &mut grads.node_embed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Gumbel-perturbed relaxed sample.
    Train,
    /// Noise-free tempered posterior.
    Infer,
}

/// Standard Gumbel draws shaped like a posterior.
pub fn gumbel_noise<R: Rng + ?Sized>(joints: usize, classes: usize, rng: &mut R) -> Array3<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    Array3::from_shape_simple_fn((joints, joints, classes), || g.sample(rng))
}

/// `softmax((logits + noise) / tau)` per ordered pair. `noise = None` is the
/// noise-free (inference) sample.
pub fn relaxed_sample(
    logits: &Array3<f64>,
    tau: f64,
    noise: Option<&Array3<f64>>,
) -> Result<Array3<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if let Some(n) = noise {
        if n.dim() != logits.dim() {
            return Err(shape_err("noise and logits differ in shape"));
        }
    }
    let (j, _, c) = logits.dim();
    let mut out = Array3::zeros((j, j, c));
    let mut buf = ndarray::Array1::zeros(c);
    for a in 0..j {
        for b in 0..j {
            if a == b {
                continue;
            }
            for k in 0..c {
                let g = noise.map_or(0.0, |n| n[[a, b, k]]);
                buf[k] = (logits[[a, b, k]] + g) / tau;
            }
            softmax_into(buf.view(), out.slice_mut(s![a, b, ..]));
        }
    }
    Ok(out)
}

/// Draw a relaxed edge sample. Train mode consumes fresh noise from `rng`.
pub fn sample_edges<R: Rng + ?Sized>(
    posterior: &EdgePosterior,
    tau: f64,
    rng: &mut R,
    mode: SampleMode,
) -> Result<Array3<f64>> {
    match mode {
        SampleMode::Train => {
            let noise = gumbel_noise(posterior.joints(), posterior.classes(), rng);
            relaxed_sample(&posterior.logits, tau, Some(&noise))
        }
        SampleMode::Infer => relaxed_sample(&posterior.logits, tau, None),
    }
}

/// Gradient of a relaxed sample with respect to its logits.
pub fn relaxed_sample_backward(
    sample: &Array3<f64>,
    tau: f64,
    d_sample: &Array3<f64>,
) -> Array3<f64> {
    let (j, _, c) = sample.dim();
    let mut out = Array3::zeros(sample.dim());
    for a in 0..j {
        for b in 0..j {
            if a == b {
                continue;
            }
            let dot: f64 = (0..c)
                .map(|k| sample[[a, b, k]] * d_sample[[a, b, k]])
                .sum();
            for k in 0..c {
                out[[a, b, k]] = sample[[a, b, k]] * (d_sample[[a, b, k]] - dot) / tau;
            }
        }
    }
    out
}

/// `C_ij = (z_ij[on] + z_ji[on]) / 2`, unit diagonal.
pub fn correlation_matrix(z: &Array3<f64>) -> Array2<f64> {
    let j = z.dim().0;
    Array2::from_shape_fn((j, j), |(a, b)| {
        if a == b {
            1.0
        } else {
            0.5 * (z[[a, b, ON_CLASS]] + z[[b, a, ON_CLASS]])
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointPartition {
    pub group_id: Vec<usize>,
    pub group_count: usize,
}

impl JointPartition {
    /// Relabel arbitrary labels so groups are numbered by their lowest joint.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let group_id = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            group_id,
            group_count: map.len(),
        }
    }

    pub fn singletons(joints: usize) -> Self {
        Self {
            group_id: (0..joints).collect(),
            group_count: joints,
        }
    }

    pub fn single_group(joints: usize) -> Self {
        Self {
            group_id: vec![0; joints],
            group_count: 1,
        }
    }

    pub fn joints(&self) -> usize {
        self.group_id.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.group_count];
        for (j, &g) in self.group_id.iter().enumerate() {
            out[g].push(j);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count == 0 || self.group_id.is_empty() {
            return Err(Error::Domain(
                "partition must have at least one group".into(),
            ));
        }
        let mut seen = vec![false; self.group_count];
        for &g in &self.group_id {
            if g >= self.group_count {
                return Err(Error::Domain(format!(
                    "group id {g} outside [0, {})",
                    self.group_count
                )));
            }
            seen[g] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Domain("group ids are not contiguous".into()));
        }
        Ok(())
    }

    /// Space-separated group ids, the diagnostic dump format.
    pub fn to_line(&self) -> String {
        self.group_id
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let labels: Vec<usize> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("bad group id {t:?}")))
            })
            .collect::<Result<_>>()?;
        if labels.is_empty() {
            return Err(Error::Format("empty partition line".into()));
        }
        Ok(Self::from_labels(&labels))
    }
}

/// Partition plus the linkage distance of every merge performed.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub partition: JointPartition,
    pub merge_distances: Vec<f64>,
}

pub fn group_joints(corr: &Array2<f64>, threshold: f64) -> Result<JointPartition> {
    Ok(cluster_joints(corr, threshold)?.partition)
}

/// Average-linkage agglomeration on `d = 1 - C`. Merging stops once the
/// closest pair of clusters is farther than `1 - threshold`. Clusters are
/// ordered by lowest member; equal distances resolve to the lowest pair.
pub fn cluster_joints(corr: &Array2<f64>, threshold: f64) -> Result<Clustering> {
    let j = corr.nrows();
    if !corr.is_square() || j == 0 {
        return Err(shape_err("correlation matrix must be square and nonempty"));
    }
    for a in 0..j {
        for b in 0..a {
            if (corr[[a, b]] - corr[[b, a]]).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "correlation matrix not symmetric at ({a}, {b})"
                )));
            }
        }
    }
    let cutoff = 1.0 - threshold;
    // Clusters in order of lowest member; `link[a][b]` is the summed
    // pairwise distance between clusters a and b.
    let mut members: Vec<Vec<usize>> = (0..j).map(|i| vec![i]).collect();
    let mut link: Vec<Vec<f64>> = (0..j)
        .map(|a| (0..j).map(|b| 1.0 - corr[[a, b]]).collect())
        .collect();
    let mut merges = Vec::new();
    while members.len() > 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                let d = link[a][b] / (members[a].len() * members[b].len()) as f64;
                if best.is_none_or(|(_, _, bd)| d < bd - TIE_EPS) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, d) = best.unwrap();
        if d > cutoff + TIE_EPS {
            break;
        }
        merges.push(d);
        let moved = members.remove(b);
        members[a].extend(moved);
        members[a].sort_unstable();
        for k in 0..link.len() {
            if k != a && k != b {
                link[a][k] += link[b][k];
                link[k][a] = link[a][k];
            }
        }
        link.remove(b);
        for row in link.iter_mut() {
            row.remove(b);
        }
    }
    let mut labels = vec![0; j];
    for (g, m) in members.iter().enumerate() {
        for &i in m {
            labels[i] = g;
        }
    }
    Ok(Clustering {
        partition: JointPartition::from_labels(&labels),
        merge_distances: merges,
    })
}

/// Replace every joint's D-vector by the mean of its group, frame by frame.
pub fn coarsen(
    seq: ArrayView2<'_, f64>,
    partition: &JointPartition,
    dim: usize,
) -> Result<Array2<f64>> {
    let (t, k) = seq.dim();
    let j = partition.joints();
    if dim == 0 || k != j * dim {
        return Err(shape_err(format!(
            "K = {k} does not match {j} joints x D = {dim}"
        )));
    }
    let groups = partition.members();
    let mut out = Array2::zeros((t, k));
    for f in 0..t {
        for members in &groups {
            for c in 0..dim {
                let mean = members.iter().map(|&m| seq[[f, m * dim + c]]).sum::<f64>()
                    / members.len() as f64;
                for &m in members {
                    out[[f, m * dim + c]] = mean;
                }
            }
        }
    }
    Ok(out)
}

/// Adjusted Rand index of two labelings of the same joints.
pub fn adjusted_rand_index(a: &JointPartition, b: &JointPartition) -> f64 {
    let n = a.joints();
    assert_eq!(n, b.joints(), "partitions cover different joint counts");
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table = vec![vec![0usize; b.group_count]; a.group_count];
    for i in 0..n {
        table[a.group_id[i]][b.group_id[i]] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&v| comb2(v)).sum();
    let rows: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let cols: f64 = (0..b.group_count)
        .map(|c| comb2(table.iter().map(|r| r[c]).sum()))
        .sum();
    let total = comb2(n);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-15 {
        // Both trivial (all singletons or one block): identical iff equal.
        return if a.group_id == b.group_id { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Eq.-by-eq. loop implementation of the encoder, written without matrix ops.
    fn reference_logits(x0: &Array2<f64>, j: usize, enc: &EdgeEncoder) -> Array3<f64> {
        fn mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
            let h: Vec<f64> = (0..m.w1.ncols())
                .map(|c| elu((0..x.len()).map(|r| x[r] * m.w1[[r, c]]).sum::<f64>() + m.b1[[0, c]]))
                .collect();
            (0..m.w2.ncols())
                .map(|c| {
                    let v = (0..h.len()).map(|r| h[r] * m.w2[[r, c]]).sum::<f64>() + m.b2[[0, c]];
                    if m.elu_output {
                        elu(v)
                    } else {
                        v
                    }
                })
                .collect()
        }
        let t = x0.nrows();
        let d = x0.ncols() / j;
        let r: Vec<Vec<f64>> = (0..j)
            .map(|jj| {
                let mut v = Vec::new();
                for f in 0..t {
                    for c in 0..d {
                        v.push(x0[[f, jj * d + c]]);
                    }
                }
                v
            })
            .collect();
        let h1: Vec<Vec<f64>> = r.iter().map(|v| mlp(&enc.node_embed, v)).collect();
        let cat =
            |a: &Vec<f64>, b: &Vec<f64>| a.iter().chain(b.iter()).copied().collect::<Vec<_>>();
        let mut h2 = Vec::new();
        for jj in 0..j {
            let mut sum = vec![0.0; h1[0].len()];
            for i in 0..j {
                if i != jj {
                    let e = mlp(&enc.edge_embed, &cat(&h1[i], &h1[jj]));
                    for (s, v) in sum.iter_mut().zip(e) {
                        *s += v;
                    }
                }
            }
            h2.push(mlp(&enc.node_update, &sum));
        }
        let c = enc.classes();
        let mut out = Array3::zeros((j, j, c));
        for i in 0..j {
            for jj in 0..j {
                if i != jj {
                    let l = mlp(&enc.edge_logits, &cat(&h2[i], &h2[jj]));
                    for k in 0..c {
                        out[[i, jj, k]] = l[k];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn encoder_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (j, t, d) = (3, 4, 3);
        let enc = EdgeEncoder::init(t * d, 5, 2, &mut rng);
        let x0 = Array2::from_shape_fn((t, j * d), |_| rng.random_range(-1.0..1.0));
        let post = encode_edges(x0.view(), j, &enc).unwrap();
        let reference = reference_logits(&x0, j, &enc);
        for (a, b) in post.logits.iter().zip(reference.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for a in 0..j {
            for b in 0..j {
                if a != b {
                    assert_abs_diff_eq!(post.probs.slice(s![a, b, ..]).sum(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn smallest_graph_and_zero_network() {
        let enc = EdgeEncoder::zeros(6, 4, 2);
        let x0 = Array2::from_elem((2, 6), 0.3);
        let post = encode_edges(x0.view(), 2, &enc).unwrap();
        assert_eq!(post.logits.dim(), (2, 2, 2));
        assert_eq!(post.probs[[0, 1, 0]], 0.5);
        assert_eq!(post.probs[[1, 0, 1]], 0.5);
        assert!(matches!(
            encode_edges(x0.slice(s![.., ..3]), 1, &EdgeEncoder::zeros(6, 4, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (j, t, d) = (3, 2, 3);
        let enc = EdgeEncoder::init(t * d, 4, 2, &mut rng);
        let x0 = Array2::from_shape_fn((t, j * d), |_| rng.random_range(-1.0..1.0));
        let up = Array3::from_shape_simple_fn((j, j, 2), || rng.random_range(-1.0..1.0));
        let loss = |e: &EdgeEncoder| {
            let p = encode_edges(x0.view(), j, e).unwrap();
            let mut s = 0.0;
            for a in 0..j {
                for b in 0..j {
                    if a != b {
                        for k in 0..2 {
                            s += p.logits[[a, b, k]] * up[[a, b, k]];
                        }
                    }
                }
            }
            s
        };
        let (_, cache) = encode_edges_cached(x0.view(), j, &enc).unwrap();
        let mut grads = enc.zeroed();
        encode_edges_backward(&enc, &cache, &up, &mut grads);
        let mut analytic = Vec::new();
        grads.visit("", &mut |_, a| analytic.extend(a.iter().copied()));
        let mut idx = 0;
        let mut probe = enc.clone();
        let mut count = 0;
        probe.visit_mut("", &mut |_, a| count += a.len());
        for flat in 0..count {
            let bump = |delta: f64| {
                let mut e = enc.clone();
                let mut seen = 0;
                e.visit_mut("", &mut |_, a| {
                    if flat >= seen && flat < seen + a.len() {
                        a.as_slice_mut().unwrap()[flat - seen] += delta;
                    }
                    seen += a.len();
                });
                loss(&e)
            };
            let num = (bump(1e-5) - bump(-1e-5)) / 2e-5;
            let a = analytic[idx];
            assert!(
                (a - num).abs() <= 1e-6 + 1e-4 * a.abs().max(num.abs()),
                "param {flat}: {a} vs {num}"
            );
            idx += 1;
        }
    }

    #[test]
    fn relaxed_sample_examples() {
        let mut logits = Array3::zeros((2, 2, 2));
        let z = relaxed_sample(&logits, 1.0, Some(&Array3::zeros((2, 2, 2)))).unwrap();
        assert_eq!(z[[0, 1, 0]], 0.5);
        logits[[0, 1, 0]] = 2.0;
        let z = relaxed_sample(&logits, 1.0, None).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(z[[0, 1, 0]], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(z[[0, 1, 1]], 1.0 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(z[[0, 1, 0]], 0.8808, epsilon = 1e-4);

        let noise = Array3::from_shape_vec((2, 2, 2), vec![0.0, 0.0, 0.3, 1.9, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let cold = relaxed_sample(&logits, 1e-3, Some(&noise)).unwrap();
        // 2.3 vs 1.9: class 0 wins
        assert_abs_diff_eq!(cold[[0, 1, 0]], 1.0, epsilon = 1e-12);

        assert!(matches!(
            relaxed_sample(&logits, 0.0, None),
            Err(Error::Domain(_))
        ));
        let post = EdgePosterior::from_logits(logits);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_edges(&post, -1.0, &mut rng, SampleMode::Train).is_err());
        let a = sample_edges(&post, 0.5, &mut rng, SampleMode::Infer).unwrap();
        let b = sample_edges(&post, 0.5, &mut rng, SampleMode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relaxed_sample_gradient_with_frozen_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Array3::from_shape_simple_fn((3, 3, 2), || rng.random_range(-2.0..2.0));
        let noise = gumbel_noise(3, 2, &mut rng);
        let up = Array3::from_shape_simple_fn((3, 3, 2), || rng.random_range(-1.0..1.0));
        let tau = 0.5;
        let f = |l: &Array3<f64>| (relaxed_sample(l, tau, Some(&noise)).unwrap() * &up).sum();
        let z = relaxed_sample(&logits, tau, Some(&noise)).unwrap();
        let g = relaxed_sample_backward(&z, tau, &up);
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.as_slice_mut().unwrap()[idx] += 1e-5;
            m.as_slice_mut().unwrap()[idx] -= 1e-5;
            let num = (f(&p) - f(&m)) / 2e-5;
            let a = g.as_slice().unwrap()[idx];
            assert!(
                (a - num).abs() <= 1e-7 + 1e-4 * a.abs().max(num.abs()),
                "{a} vs {num}"
            );
        }
    }

    #[test]
    fn correlation_examples() {
        let mut z = Array3::zeros((3, 3, 2));
        z.slice_mut(s![.., .., ON_CLASS]).fill(1.0);
        assert_eq!(correlation_matrix(&z), Array2::<f64>::ones((3, 3)));
        let mut z = Array3::zeros((2, 2, 2));
        z[[0, 1, ON_CLASS]] = 1.0;
        let c = correlation_matrix(&z);
        assert_eq!(c, array![[1.0, 0.5], [0.5, 1.0]]);
    }

    #[test]
    fn clustering_examples() {
        let block = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        assert_eq!(
            group_joints(&block, 0.5).unwrap().group_id,
            vec![0, 0, 1, 1]
        );
        let ones = Array2::ones((5, 5));
        assert_eq!(
            group_joints(&ones, 0.5).unwrap(),
            JointPartition::single_group(5)
        );
        let mut skew = Array2::eye(3);
        skew[[0, 1]] = 0.9;
        assert!(matches!(group_joints(&skew, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn coarsen_examples() {
        let x = array![[1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 7.0, 8.0, 9.0]];
        assert_eq!(
            coarsen(x.view(), &JointPartition::singletons(3), 3).unwrap(),
            x
        );
        let p = JointPartition::from_labels(&[0, 0, 1]);
        assert_eq!(
            coarsen(x.view(), &p, 3).unwrap(),
            array![[2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 7.0, 8.0, 9.0]]
        );
        let all = coarsen(x.view(), &JointPartition::single_group(3), 3).unwrap();
        assert_eq!(
            all.row(0).to_vec(),
            vec![
                11.0 / 3.0,
                4.0,
                13.0 / 3.0,
                11.0 / 3.0,
                4.0,
                13.0 / 3.0,
                11.0 / 3.0,
                4.0,
                13.0 / 3.0
            ]
        );
        assert!(matches!(
            coarsen(x.view(), &JointPartition::singletons(2), 3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn partition_helpers() {
        let p = JointPartition::from_labels(&[5, 5, 2, 7]);
        assert_eq!(p.group_id, vec![0, 0, 1, 2]);
        p.validate().unwrap();
        assert_eq!(JointPartition::parse_line(&p.to_line()).unwrap(), p);
        let q = JointPartition::from_labels(&[1, 1, 0, 0]);
        assert_eq!(adjusted_rand_index(&p, &p), 1.0);
        assert!(adjusted_rand_index(&p, &q) < 1.0);
        let bad = JointPartition {
            group_id: vec![0, 2],
            group_count: 3,
        };
        assert!(bad.validate().is_err());
    }
}

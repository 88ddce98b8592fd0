//! Graph convolution with a learnable adjacency, the six-layer GCN block and
//! position normalization, each with an explicit reverse pass.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Uniform walk over named parameter arrays. Gradients reuse the parameter
/// types, so anything that is `ParamSet` doubles as its own gradient buffer.
pub trait ParamSet: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>));

    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, a| a.fill(0.0));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    /// `self += other`, element by element. Panics on structural mismatch.
    fn add_assign(&mut self, other: &Self) {
        let mut theirs = Vec::new();
        other.visit("", &mut |_, a| theirs.push(a));
        let mut it = theirs.into_iter();
        self.visit_mut("", &mut |name, a| {
            let b = it.next().unwrap_or_else(|| panic!("missing tensor {name}"));
            *a += b;
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut("", &mut |_, a| a.mapv_inplace(|v| v * k));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// `sigma(A H W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConv {
    pub adjacency: Array2<f64>,
    pub weight: Array2<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GraphConvCache {
    input: Array2<f64>,
    propagated: Array2<f64>,
    output: Array2<f64>,
}

impl GraphConv {
    /// Adjacency starts at the identity plus U(-0.01, 0.01) noise; weights
    /// are U(-1/sqrt(f_in), 1/sqrt(f_in)).
    pub fn init<R: Rng + ?Sized>(
        nodes: usize,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let adjacency = Array2::from_shape_fn((nodes, nodes), |(i, j)| {
            let noise = rng.random_range(-0.01..0.01);
            if i == j {
                1.0 + noise
            } else {
                noise
            }
        });
        let bound = 1.0 / (f_in as f64).sqrt();
        let weight = Array2::from_shape_fn((f_in, f_out), |_| rng.random_range(-bound..bound));
        Self {
            adjacency,
            weight,
            activation,
        }
    }

    pub fn zeros(nodes: usize, f_in: usize, f_out: usize, activation: Activation) -> Self {
        Self {
            adjacency: Array2::zeros((nodes, nodes)),
            weight: Array2::zeros((f_in, f_out)),
            activation,
        }
    }

    pub fn identity(nodes: usize, features: usize, activation: Activation) -> Self {
        Self {
            adjacency: Array2::eye(nodes),
            weight: Array2::eye(features),
            activation,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, h: &Array2<f64>) -> Result<()> {
        if !self.adjacency.is_square() {
            return Err(shape_err("adjacency must be square"));
        }
        if h.nrows() != self.nodes() || h.ncols() != self.in_features() {
            return Err(shape_err(format!(
                "graph conv expects [{} x {}], got {:?}",
                self.nodes(),
                self.in_features(),
                h.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(h)?.0)
    }

    pub fn forward_cached(&self, h: &Array2<f64>) -> Result<(Array2<f64>, GraphConvCache)> {
        self.check(h)?;
        let propagated = self.adjacency.dot(h);
        let mut output = propagated.dot(&self.weight);
        if self.activation == Activation::Tanh {
            output.mapv_inplace(f64::tanh);
        }
        let cache = GraphConvCache {
            input: h.clone(),
            propagated,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(
        &self,
        cache: &GraphConvCache,
        d_out: &Array2<f64>,
        grads: &mut GraphConv,
    ) -> Array2<f64> {
        let d_pre = match self.activation {
            Activation::Tanh => d_out * &cache.output.mapv(|y| 1.0 - y * y),
            Activation::Identity => d_out.clone(),
        };
        grads.weight += &cache.propagated.t().dot(&d_pre);
        let hw = cache.input.dot(&self.weight);
        grads.adjacency += &d_pre.dot(&hw.t());
        self.adjacency.t().dot(&d_pre).dot(&self.weight.t())
    }
}

impl ParamSet for GraphConv {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "adjacency"), &self.adjacency);
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(join(prefix, "adjacency"), &mut self.adjacency);
        f(join(prefix, "weight"), &mut self.weight);
    }
}

pub const GCN_BLOCK_DEPTH: usize = 6;

/// Six width-preserving graph convolutions applied in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnBlock {
    pub layers: Vec<GraphConv>,
}

impl GcnBlock {
    pub fn init<R: Rng + ?Sized>(nodes: usize, features: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..GCN_BLOCK_DEPTH)
                .map(|_| GraphConv::init(nodes, features, features, Activation::Tanh, rng))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<GraphConv>) -> Result<Self> {
        if layers.len() != GCN_BLOCK_DEPTH {
            return Err(shape_err(format!(
                "GCN block needs {GCN_BLOCK_DEPTH} layers, got {}",
                layers.len()
            )));
        }
        let (n, f) = (layers[0].nodes(), layers[0].in_features());
        if layers
            .iter()
            .any(|l| l.nodes() != n || l.in_features() != f || l.out_features() != f)
        {
            return Err(shape_err(
                "GCN block layers must share node count and width",
            ));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(h)?.0)
    }

    pub fn forward_cached(&self, h: &Array2<f64>) -> Result<(Array2<f64>, Vec<GraphConvCache>)> {
        let mut x = h.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(
        &self,
        caches: &[GraphConvCache],
        d_out: &Array2<f64>,
        grads: &mut GcnBlock,
    ) -> Array2<f64> {
        let mut d = d_out.clone();
        for ((layer, cache), g) in self
            .layers
            .iter()
            .zip(caches)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            d = layer.backward(cache, &d, g);
        }
        d
    }
}

impl ParamSet for GcnBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PonoVariant {
    /// `(a - mean) / (std + eps)`
    Standard,
    /// `a - mean / (std + eps)`, the form some write-ups print.
    AsPrinted,
}

/// Split a `[2N x F]` concatenation into halves `a`, `b`; normalize `a` per
/// feature column over its N rows and gate it with `sigmoid(b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pono {
    pub epsilon: f64,
    pub variant: PonoVariant,
}

impl Default for Pono {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            variant: PonoVariant::Standard,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PonoCache {
    centered: Array2<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
    normalized: Array2<f64>,
    gate: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Pono {
    pub fn new(epsilon: f64, variant: PonoVariant) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Domain("PONO epsilon must be positive".into()));
        }
        Ok(Self { epsilon, variant })
    }

    /// The normalized `a` half before gating.
    pub fn normalize(&self, a: &Array2<f64>) -> Array2<f64> {
        self.stats(a).3
    }

    fn stats(&self, a: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>, Array2<f64>) {
        let n = a.nrows() as f64;
        let mean = a.sum_axis(Axis(0)) / n;
        let centered = a - &mean;
        let std = (centered.mapv(|v| v * v).sum_axis(Axis(0)) / n).mapv(f64::sqrt);
        let denom = std.mapv(|s| s + self.epsilon);
        let normalized = match self.variant {
            PonoVariant::Standard => &centered / &denom,
            PonoVariant::AsPrinted => a - &(&mean / &denom),
        };
        (centered, mean, std, normalized)
    }

    pub fn forward(&self, concat: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(concat)?.0)
    }

    pub fn forward_cached(&self, concat: &Array2<f64>) -> Result<(Array2<f64>, PonoCache)> {
        if concat.nrows() % 2 != 0 || concat.nrows() == 0 {
            return Err(shape_err(format!(
                "PONO needs an even, nonzero row count, got {}",
                concat.nrows()
            )));
        }
        let n = concat.nrows() / 2;
        let a = concat.slice(s![..n, ..]).to_owned();
        let gate = concat.slice(s![n.., ..]).mapv(sigmoid);
        let (centered, mean, std, normalized) = self.stats(&a);
        let out = &normalized * &gate;
        Ok((
            out,
            PonoCache {
                centered,
                mean,
                std,
                normalized,
                gate,
            },
        ))
    }

    /// Gradient with respect to the `[2N x F]` concatenation.
    pub fn backward(&self, cache: &PonoCache, d_out: &Array2<f64>) -> Array2<f64> {
        let n = cache.centered.nrows() as f64;
        let d_norm = d_out * &cache.gate;
        let d_b = d_out * &cache.normalized * &cache.gate.mapv(|g| g * (1.0 - g));
        let denom = cache.std.mapv(|s| s + self.epsilon);
        // d std / d a_i = centered_i / (N std); zero where std vanishes.
        let dstd_factor = cache
            .std
            .mapv(|s| if s > 0.0 { 1.0 / (n * s) } else { 0.0 });
        let d_a = match self.variant {
            PonoVariant::Standard => {
                let mean_dn = d_norm.sum_axis(Axis(0)) / n;
                let proj = (&d_norm * &cache.centered).sum_axis(Axis(0));
                let coef = &proj / &denom.mapv(|d| d * d) * &dstd_factor;
                (&d_norm - &mean_dn) / &denom - &cache.centered * &coef
            }
            PonoVariant::AsPrinted => {
                // out = a - m / (s + eps)
                let total = d_norm.sum_axis(Axis(0));
                let via_mean = &total / &denom / n;
                let via_std = &total * &cache.mean / &denom.mapv(|d| d * d) * &dstd_factor;
                &d_norm - &via_mean + &cache.centered * &via_std
            }
        };
        concatenate(Axis(0), &[d_a.view(), d_b.view()]).expect("halves share width")
    }
}

/// Common forward/backward surface so a forward pass can be recorded and
/// replayed in reverse.
pub trait Layer {
    type Cache;
    type Grads;
    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Self::Cache)>;
    fn backward_cached(
        &self,
        cache: &Self::Cache,
        d_out: &Array2<f64>,
    ) -> (Self::Grads, Array2<f64>);
}

impl Layer for GraphConv {
    type Cache = GraphConvCache;
    type Grads = GraphConv;
    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Self::Cache)> {
        GraphConv::forward_cached(self, x)
    }
    fn backward_cached(
        &self,
        cache: &Self::Cache,
        d_out: &Array2<f64>,
    ) -> (Self::Grads, Array2<f64>) {
        let mut g = self.zeroed();
        let d = self.backward(cache, d_out, &mut g);
        (g, d)
    }
}

impl Layer for GcnBlock {
    type Cache = Vec<GraphConvCache>;
    type Grads = GcnBlock;
    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Self::Cache)> {
        GcnBlock::forward_cached(self, x)
    }
    fn backward_cached(
        &self,
        cache: &Self::Cache,
        d_out: &Array2<f64>,
    ) -> (Self::Grads, Array2<f64>) {
        let mut g = self.zeroed();
        let d = self.backward(cache, d_out, &mut g);
        (g, d)
    }
}

impl Layer for Pono {
    type Cache = PonoCache;
    type Grads = ();
    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Self::Cache)> {
        Pono::forward_cached(self, x)
    }
    fn backward_cached(
        &self,
        cache: &Self::Cache,
        d_out: &Array2<f64>,
    ) -> (Self::Grads, Array2<f64>) {
        ((), self.backward(cache, d_out))
    }
}

/// Holds the cache of the most recent forward pass of one layer.
pub struct Recorder<'a, L: Layer> {
    layer: &'a L,
    cache: Option<L::Cache>,
}

impl<'a, L: Layer> Recorder<'a, L> {
    pub fn new(layer: &'a L) -> Self {
        Self { layer, cache: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let (y, c) = self.layer.forward_cached(x)?;
        self.cache = Some(c);
        Ok(y)
    }

    pub fn backward(&self, d_out: &Array2<f64>) -> Result<(L::Grads, Array2<f64>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward requested before any forward pass".into()))?;
        Ok(self.layer.backward_cached(cache, d_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` over every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: &mut dyn FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            m.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn assert_grad_close(analytic: &Array2<f64>, numeric: &Array2<f64>, what: &str) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            if a.abs() < 1e-6 && n.abs() < 1e-6 {
                assert!((a - n).abs() < 1e-7, "{what}: {a} vs {n}");
            } else {
                let rel = (a - n).abs() / a.abs().max(n.abs());
                assert!(rel < 1e-4, "{what}: analytic {a} numeric {n} rel {rel}");
            }
        }
    }

    #[test]
    fn graph_conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GraphConv::init(3, 2, 4, Activation::Tanh, &mut rng);
        assert_eq!(
            layer.forward(&Array2::zeros((3, 2))).unwrap(),
            Array2::<f64>::zeros((3, 4))
        );

        let swap = GraphConv {
            adjacency: array![[0.0, 1.0], [1.0, 0.0]],
            weight: array![[1.0]],
            activation: Activation::Tanh,
        };
        let out = swap.forward(&array![[0.5], [-0.5]]).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], -0.46211715726000974, epsilon = 1e-15);
        assert_abs_diff_eq!(out[[1, 0]], 0.46211715726000974, epsilon = 1e-15);

        let h = rand_mat(3, 3, &mut rng);
        assert_eq!(
            GraphConv::identity(3, 3, Activation::Identity)
                .forward(&h)
                .unwrap(),
            h
        );
        assert!(matches!(
            swap.forward(&Array2::zeros((3, 1))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn block_matches_six_manual_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = GcnBlock::init(3, 2, &mut rng);
        let h = rand_mat(3, 2, &mut rng);
        let mut manual = h.clone();
        for l in &block.layers {
            manual = l.forward(&manual).unwrap();
        }
        assert_eq!(block.forward(&h).unwrap(), manual);

        let ident = GcnBlock::from_layers(vec![GraphConv::identity(3, 2, Activation::Identity); 6])
            .unwrap();
        assert_eq!(ident.forward(&h).unwrap(), h);
        let zero_in = Array2::zeros((3, 2));
        assert_eq!(block.forward(&zero_in).unwrap(), zero_in);
        assert!(
            GcnBlock::from_layers(vec![GraphConv::identity(3, 2, Activation::Identity); 5])
                .is_err()
        );
    }

    #[test]
    fn pono_hand_example() {
        let concat = array![[1.0], [3.0], [0.0], [0.0]];
        let out = Pono {
            epsilon: 0.0,
            variant: PonoVariant::Standard,
        };
        // epsilon = 0 only for the exact hand value; construction via `new` rejects it.
        let y = out.forward(&concat).unwrap();
        assert_eq!(y, array![[-0.5], [0.5]]);
        let y = Pono::default().forward(&concat).unwrap();
        assert_abs_diff_eq!(y[[0, 0]], -0.5 / (1.0 + 1e-5), epsilon = 1e-15);

        let constant = array![[2.0], [2.0], [5.0], [-5.0]];
        let y = Pono::default().forward(&constant).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));

        let saturated = array![[1.0], [3.0], [800.0], [800.0]];
        let y = Pono::default().forward(&saturated).unwrap();
        assert_abs_diff_eq!(y[[1, 0]], 1.0, epsilon = 1e-4);

        assert!(matches!(
            Pono::default().forward(&Array2::zeros((3, 2))),
            Err(Error::Shape(_))
        ));
        assert!(Pono::new(0.0, PonoVariant::Standard).is_err());
    }

    #[test]
    fn graph_conv_sum_loss_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = GraphConv::init(4, 3, 2, Activation::Identity, &mut rng);
        let h = rand_mat(4, 3, &mut rng);
        let (y, cache) = layer.forward_cached(&h).unwrap();
        let mut g = layer.zeroed();
        layer.backward(&cache, &Array2::ones(y.dim()), &mut g);
        // dL/dW = H^T A^T 1
        let expected = h.t().dot(&layer.adjacency.t()).dot(&Array2::ones((4, 2)));
        for (a, b) in g.weight.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let mut gz = layer.zeroed();
        let d_in = layer.backward(&cache, &Array2::zeros(y.dim()), &mut gz);
        assert!(gz
            .weight
            .iter()
            .chain(gz.adjacency.iter())
            .chain(d_in.iter())
            .all(|v| *v == 0.0));

        // tanh at zero pre-activation behaves like identity.
        let h0 = Array2::zeros((4, 3));
        let (_, c_id) = layer.forward_cached(&h0).unwrap();
        let mut g_id = layer.zeroed();
        let d_id = layer.backward(&c_id, &Array2::ones((4, 2)), &mut g_id);
        layer.activation = Activation::Tanh;
        let (_, c_t) = layer.forward_cached(&h0).unwrap();
        let mut g_t = layer.zeroed();
        let d_t = layer.backward(&c_t, &Array2::ones((4, 2)), &mut g_t);
        assert_eq!(d_id, d_t);
        assert_eq!(g_id.weight, g_t.weight);
        assert_eq!(g_id.adjacency, g_t.adjacency);
    }

    #[test]
    fn graph_conv_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=6);
            let fi = rng.random_range(1..=4);
            let fo = rng.random_range(1..=4);
            let layer = GraphConv::init(n, fi, fo, Activation::Tanh, &mut rng);
            let h = rand_mat(n, fi, &mut rng);
            let up = rand_mat(n, fo, &mut rng);
            let loss = |l: &GraphConv, x: &Array2<f64>| (l.forward(x).unwrap() * &up).sum();
            let (_, cache) = layer.forward_cached(&h).unwrap();
            let mut g = layer.zeroed();
            let d_h = layer.backward(&cache, &up, &mut g);
            assert_grad_close(&d_h, &numeric_grad(&h, &mut |x| loss(&layer, x)), "input");
            let ga = numeric_grad(&layer.adjacency, &mut |a| {
                loss(
                    &GraphConv {
                        adjacency: a.clone(),
                        ..layer.clone()
                    },
                    &h,
                )
            });
            assert_grad_close(&g.adjacency, &ga, "adjacency");
            let gw = numeric_grad(&layer.weight, &mut |w| {
                loss(
                    &GraphConv {
                        weight: w.clone(),
                        ..layer.clone()
                    },
                    &h,
                )
            });
            assert_grad_close(&g.weight, &gw, "weight");
        }
    }

    #[test]
    fn block_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let block = GcnBlock::init(4, 3, &mut rng);
        let h = rand_mat(4, 3, &mut rng);
        let up = rand_mat(4, 3, &mut rng);
        let mut rec = Recorder::new(&block);
        rec.forward(&h).unwrap();
        let (g, d_h) = rec.backward(&up).unwrap();
        assert_grad_close(
            &d_h,
            &numeric_grad(&h, &mut |x| (block.forward(x).unwrap() * &up).sum()),
            "input",
        );
        for li in 0..GCN_BLOCK_DEPTH {
            let gw = numeric_grad(&block.layers[li].weight, &mut |w| {
                let mut b = block.clone();
                b.layers[li].weight = w.clone();
                (b.forward(&h).unwrap() * &up).sum()
            });
            assert_grad_close(&g.layers[li].weight, &gw, "weight");
            let ga = numeric_grad(&block.layers[li].adjacency, &mut |a| {
                let mut b = block.clone();
                b.layers[li].adjacency = a.clone();
                (b.forward(&h).unwrap() * &up).sum()
            });
            assert_grad_close(&g.layers[li].adjacency, &ga, "adjacency");
        }
    }

    #[test]
    fn pono_matches_finite_differences() {
        for variant in [PonoVariant::Standard, PonoVariant::AsPrinted] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let n = rng.random_range(2..=6);
                let f = rng.random_range(1..=4);
                let pono = Pono {
                    epsilon: 1e-5,
                    variant,
                };
                let x = rand_mat(2 * n, f, &mut rng);
                let up = rand_mat(n, f, &mut rng);
                let mut rec = Recorder::new(&pono);
                rec.forward(&x).unwrap();
                let ((), d_x) = rec.backward(&up).unwrap();
                let num = numeric_grad(&x, &mut |v| (pono.forward(v).unwrap() * &up).sum());
                assert_grad_close(&d_x, &num, "pono");
            }
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let pono = Pono::default();
        let rec = Recorder::new(&pono);
        assert!(matches!(
            rec.backward(&Array2::zeros((1, 1))),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn pono_normalized_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(6, 4, &mut rng) * 10.0;
        let z = Pono::default().normalize(&a);
        for col in z.columns() {
            let m = col.mean().unwrap();
            let s = (col.mapv(|v| (v - m) * (v - m)).mean().unwrap()).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((s - 1.0).abs() < 1e-4);
        }
    }
}

//! Negative-ELBO objective, Adam, the minibatch training loop with early
//! stopping, and the finite-difference gradient harness.

use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edge_inference::{coarsen, gumbel_noise, EdgePosterior, SampleMode};
use crate::error::{shape_err, Error, Result};
use crate::eval::{evaluate_windows, HorizonSpec};
use crate::graph_layers::ParamSet;
use crate::model::{
    backward, forward_traced, EdgeNoise, ForwardResult, ModelConfig, ModelParams, Normalizer,
};
use crate::motion_data::{SkeletonSpec, WindowSample};
use crate::par::{self, Execution};
use crate::rng::{gumbel_stream, stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub recon_fine: f64,
    pub recon_coarse: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.kl += o.kl;
        self.recon_fine += o.recon_fine;
        self.recon_coarse += o.recon_coarse;
        self.total += o.total;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.kl *= k;
        self.recon_fine *= k;
        self.recon_coarse *= k;
        self.total *= k;
        self
    }
}

/// `KL[q || uniform] = sum_{i != j} (log C - H(q_ij))`, in nats.
pub fn kl_loss(posterior: &EdgePosterior) -> f64 {
    let (j, _, c) = posterior.probs.dim();
    let log_c = (c as f64).ln();
    let mut total = 0.0;
    for a in 0..j {
        for b in 0..j {
            if a == b {
                continue;
            }
            let neg_entropy: f64 = (0..c)
                .map(|k| posterior.probs[[a, b, k]])
                .filter(|&q| q > 0.0)
                .map(|q| q * q.ln())
                .sum();
            total += log_c + neg_entropy;
        }
    }
    total
}

/// Gradient of [`kl_loss`] with respect to the logits.
pub fn kl_loss_grad(posterior: &EdgePosterior) -> Array3<f64> {
    let (j, _, c) = posterior.probs.dim();
    let mut out = Array3::zeros((j, j, c));
    let xlogx = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
    for a in 0..j {
        for b in 0..j {
            if a == b {
                continue;
            }
            let s: f64 = (0..c).map(|k| xlogx(posterior.probs[[a, b, k]])).sum();
            for k in 0..c {
                let q = posterior.probs[[a, b, k]];
                out[[a, b, k]] = xlogx(q) - q * s;
            }
        }
    }
    out
}

/// `sum ||y - y_hat||^2 / (2 sigma^2)` over all frames and coordinates.
pub fn recon_loss(y_hat: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> Result<f64> {
    if y_hat.dim() != y.dim() {
        return Err(shape_err(format!(
            "prediction {:?} vs target {:?}",
            y_hat.dim(),
            y.dim()
        )));
    }
    let sq: f64 = y_hat
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (2.0 * sigma * sigma))
}

fn recon_grad(y_hat: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> Array2<f64> {
    (y_hat - y) / (sigma * sigma)
}

/// Coarse-scale target: the window's partition applied to the fine target.
pub fn coarse_target(
    y0: &Array2<f64>,
    result: &ForwardResult,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    coarsen(y0.view(), &result.partition, cfg.dim)
}

/// `kl_weight * KL + recon(y0) + recon(y1)`; terms absent from the model are zero.
pub fn total_loss(
    result: &ForwardResult,
    y0: &Array2<f64>,
    y1: &Array2<f64>,
    cfg: &ModelConfig,
) -> Result<LossBreakdown> {
    let kl = result.posterior.as_ref().map_or(0.0, kl_loss);
    let recon_fine = recon_loss(&result.y0_hat, y0, cfg.sigma0)?;
    let recon_coarse = match &result.y1_hat {
        Some(y1_hat) => recon_loss(y1_hat, y1, cfg.sigma1)?,
        None => 0.0,
    };
    Ok(LossBreakdown {
        kl,
        recon_fine,
        recon_coarse,
        total: cfg.kl_weight * kl + recon_fine + recon_coarse,
    })
}

/// Loss of one window under the given edge noise.
pub fn window_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &WindowSample,
    noise: EdgeNoise<'_>,
) -> Result<LossBreakdown> {
    let (result, _) = forward_traced(&sample.input, params, cfg, noise, SampleMode::Train, None)?;
    let y1 = coarse_target(&sample.target, &result, cfg)?;
    total_loss(&result, &sample.target, &y1, cfg)
}

/// Loss and parameter gradient of one window.
pub fn window_loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &WindowSample,
    noise: EdgeNoise<'_>,
) -> Result<(LossBreakdown, ModelParams)> {
    let (result, trace) =
        forward_traced(&sample.input, params, cfg, noise, SampleMode::Train, None)?;
    let y1 = coarse_target(&sample.target, &result, cfg)?;
    let loss = total_loss(&result, &sample.target, &y1, cfg)?;
    let d_y0 = recon_grad(&result.y0_hat, &sample.target, cfg.sigma0);
    let d_y1 = result
        .y1_hat
        .as_ref()
        .map(|h| recon_grad(h, &y1, cfg.sigma1));
    let d_logits = result
        .posterior
        .as_ref()
        .map(|p| kl_loss_grad(p) * cfg.kl_weight);
    let grads = backward(params, cfg, &trace, &d_y0, d_y1.as_ref(), d_logits.as_ref());
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 16,
            max_steps: 500,
            patience: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config(
                "learning_rate and adam_epsilon must be positive, weight_decay nonnegative".into(),
            ));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{n} must lie in (0, 1)")));
            }
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "batch_size and max_steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }
}

fn layout(p: &impl ParamSet) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    p.visit("", &mut |n, a| out.push((n, a.dim())));
    out
}

/// One Adam update with decoupled weight decay (`theta *= 1 - lr * wd`
/// before the moment step).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let shape = layout(params);
    if layout(grads) != shape || layout(&state.m) != shape || layout(&state.v) != shape {
        return Err(Error::State(
            "parameter, gradient and optimizer trees differ".into(),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;

    let mut g_list = Vec::new();
    grads.visit("", &mut |_, a| g_list.push(a));
    let mut m_list = Vec::new();
    state
        .m
        .visit_mut("", &mut |_, a| m_list.push(a as *mut Array2<f64>));
    let mut v_list = Vec::new();
    state
        .v
        .visit_mut("", &mut |_, a| v_list.push(a as *mut Array2<f64>));
    let mut idx = 0;
    params.visit_mut("", &mut |_, p| {
        // SAFETY: m and v are distinct trees from params and grads; each
        // pointer is dereferenced exactly once, while no other borrow exists.
        let (m, v) = unsafe { (&mut *m_list[idx], &mut *v_list[idx]) };
        let g = g_list[idx];
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *p *= decay;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            });
        idx += 1;
    });
    Ok(())
}

/// Mean loss and gradient over a minibatch; Gumbel noise for window `i` at
/// `step` comes from its own stream, so the result does not depend on
/// execution order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &[WindowSample],
    batch: &[usize],
    seed: u64,
    step: u64,
    exec: Execution,
) -> Result<(LossBreakdown, ModelParams)> {
    let results = par::map(exec, batch, |_, &wi| {
        let mut rng = gumbel_stream(seed, step, wi as u64);
        window_loss_and_grad(params, cfg, &windows[wi], EdgeNoise::Rng(&mut rng))
    });
    let mut loss = LossBreakdown::default();
    let mut grads = params.zeroed();
    for r in results {
        let (l, g) = r?;
        loss.add(&l);
        grads.add_assign(&g);
    }
    let k = 1.0 / batch.len() as f64;
    grads.scale(k);
    Ok((loss.scaled(k), grads))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Parameters at the best validation epoch.
    pub params: ModelParams,
    pub step_losses: Vec<LossBreakdown>,
    /// Validation MPJPE per horizon, one entry per epoch.
    pub val_history: Vec<Vec<f64>>,
    pub best_epoch: usize,
    pub epochs: usize,
    /// Metrics log text.
    pub log: String,
}

/// Minibatch Adam with per-epoch validation and early stopping on the mean
/// validation MPJPE over all horizons.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    skeleton: &SkeletonSpec,
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    horizons: &HorizonSpec,
    seed: u64,
    exec: Execution,
) -> Result<TrainReport> {
    cfg.validate()?;
    opt.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be nonempty".into(),
        ));
    }
    let mut params = ModelParams::init(cfg, seed)?;
    params.normalizer = Normalizer::fit(train_set.iter().map(|w| w.input.view()))?;
    train_from(params, train_set, val_set, skeleton, cfg, opt, horizons, seed, exec)
}

/// [`train`] from given initial parameters (normalizer included).
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    mut params: ModelParams,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    skeleton: &SkeletonSpec,
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    horizons: &HorizonSpec,
    seed: u64,
    exec: Execution,
) -> Result<TrainReport> {
    cfg.validate()?;
    opt.validate()?;
    params.check(cfg)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    let frames = horizons.frames(cfg.output_frames)?;
    let mut state = AdamState::new(&params);
    let mut log = String::new();
    let mut step_losses = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut stale = 0;
    let mut epoch = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while step_losses.len() < opt.max_steps {
        let mut shuffle = stream(seed, Stream::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        for batch in order.chunks(opt.batch_size) {
            if step_losses.len() >= opt.max_steps {
                break;
            }
            let step = step_losses.len() as u64;
            let (loss, grads) =
                batch_loss_and_grad(&params, cfg, train_set, batch, seed, step, exec)?;
            if !loss.total.is_finite() {
                return Err(Error::Domain(format!("loss diverged at step {step}")));
            }
            adam_step(&mut params, &grads, &mut state, opt)?;
            writeln!(
                log,
                "step {step} {} {} {} {}",
                loss.kl, loss.recon_fine, loss.recon_coarse, loss.total
            )
            .unwrap();
            step_losses.push(loss);
        }
        let val = evaluate_windows(&params, cfg, val_set, skeleton, &frames, exec)?;
        let mean = val.iter().sum::<f64>() / val.len() as f64;
        write!(log, "epoch {epoch}").unwrap();
        for v in &val {
            write!(log, " {v}").unwrap();
        }
        log.push('\n');
        val_history.push(val);
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        epoch += 1;
        if stale >= opt.patience {
            break;
        }
    }
    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainReport {
        params: best_params,
        step_losses,
        val_history,
        best_epoch,
        epochs: epoch,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    /// Over entries whose analytic gradient is at least `ABS_FLOOR`.
    pub max_rel_error: f64,
    /// Over entries below `ABS_FLOOR`.
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            writeln!(
                out,
                "{:<40} n={:<6} max_rel={:.3e} max_abs={:.3e} {}",
                g.name,
                g.entries,
                g.max_rel_error,
                g.max_abs_error,
                if g.passed { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Analytic gradients below this are judged by absolute error.
pub const ABS_FLOOR: f64 = 1e-6;
pub const ABS_TOLERANCE: f64 = 1e-7;

/// A small instance for gradient checking: J = 4, D = 3, T = p = 12, F = 8,
/// three chunks, two edge classes.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        joints: 4,
        dim: 3,
        input_frames: 12,
        output_frames: 12,
        n_chunks: 3,
        features: 8,
        edge_classes: 2,
        encoder_hidden: 8,
        ..Default::default()
    }
}

/// Random window with unit-scale inputs and targets near the model's own
/// prediction, which keeps the loss small relative to its gradient.
pub fn grad_check_instance(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(ModelParams, WindowSample, Array3<f64>)> {
    let params = ModelParams::init(cfg, seed)?;
    let mut rng = stream(seed, Stream::Synth, 99);
    let input = Array2::from_shape_fn((cfg.input_frames, cfg.k()), |_| rng.random_range(-1.0..1.0));
    let noise = gumbel_noise(cfg.joints, cfg.edge_classes, &mut rng);
    let (result, _) = forward_traced(
        &input,
        &params,
        cfg,
        EdgeNoise::Frozen(&noise),
        SampleMode::Train,
        None,
    )?;
    let target = result.y0_hat.mapv(|v| v + rng.random_range(-0.1..0.1));
    let sample = WindowSample {
        input,
        target,
        source_id: "gradcheck".into(),
        start_frame: 0,
    };
    Ok((params, sample, noise))
}

/// `L(a) - L(b)` for two forward results of the same window. The squared
/// errors are differenced term by term as `(u - v)(u + v - 2y)`, which avoids
/// the cancellation of subtracting two nearly equal totals.
fn loss_difference(a: &ForwardResult, b: &ForwardResult, y0: &Array2<f64>, cfg: &ModelConfig) -> Result<f64> {
    if a.partition != b.partition {
        let ya = coarse_target(y0, a, cfg)?;
        let yb = coarse_target(y0, b, cfg)?;
        return Ok(total_loss(a, y0, &ya, cfg)?.total - total_loss(b, y0, &yb, cfg)?.total);
    }
    let sq_diff = |u: &Array2<f64>, v: &Array2<f64>, y: &Array2<f64>, sigma: f64| -> f64 {
        let s: f64 = ndarray::Zip::from(u).and(v).and(y).fold(0.0, |acc, &u, &v, &y| acc + (u - v) * (u + v - 2.0 * y));
        s / (2.0 * sigma * sigma)
    };
    let mut d = sq_diff(&a.y0_hat, &b.y0_hat, y0, cfg.sigma0);
    if let (Some(ua), Some(ub)) = (&a.y1_hat, &b.y1_hat) {
        d += sq_diff(ua, ub, &coarse_target(y0, a, cfg)?, cfg.sigma1);
    }
    if let (Some(pa), Some(pb)) = (&a.posterior, &b.posterior) {
        d += cfg.kl_weight * (kl_loss(pa) - kl_loss(pb));
    }
    Ok(d)
}

/// Compare analytic gradients of the total loss against central finite
/// differences, one report row per parameter tensor. `tamper` may alter the
/// analytic gradients before comparison.
pub fn grad_check_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &WindowSample,
    noise: &Array3<f64>,
    tolerance: f64,
    tamper: Option<&dyn Fn(&mut ModelParams)>,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, mut grads) = window_loss_and_grad(params, cfg, sample, EdgeNoise::Frozen(noise))?;
    if let Some(t) = tamper {
        t(&mut grads);
    }
    let mut names = Vec::new();
    let mut analytic = Vec::new();
    grads.visit("", &mut |n, a| {
        names.push(n);
        analytic.push(a.clone());
    });
    let tensor_ids: Vec<usize> = (0..names.len()).collect();
    let numeric = par::map(exec, &tensor_ids, |_, &ti| -> Result<Vec<f64>> {
        let len = analytic[ti].len();
        let mut out = Vec::with_capacity(len);
        for e in 0..len {
            let probe = |delta: f64| -> Result<ForwardResult> {
                let mut p = params.clone();
                let mut idx = 0;
                p.visit_mut("", &mut |_, a| {
                    if idx == ti {
                        let slot = a.iter_mut().nth(e).unwrap();
                        *slot += delta;
                    }
                    idx += 1;
                });
                let (r, _) = forward_traced(&sample.input, &p, cfg, EdgeNoise::Frozen(noise), SampleMode::Train, None)?;
                Ok(r)
            };
            let plus = probe(FD_STEP)?;
            let minus = probe(-FD_STEP)?;
            let diff = loss_difference(&plus, &minus, &sample.target, cfg)?;
            out.push(diff / (2.0 * FD_STEP));
        }
        Ok(out)
    });
    let mut groups = Vec::new();
    for ((name, a), n) in names.into_iter().zip(&analytic).zip(numeric) {
        let n = n?;
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut passed = true;
        for (&av, &nv) in a.iter().zip(&n) {
            if av.abs() < ABS_FLOOR {
                let e = (av - nv).abs();
                max_abs = max_abs.max(e);
                passed &= e < ABS_TOLERANCE;
            } else {
                let e = (av - nv).abs() / av.abs().max(nv.abs());
                max_rel = max_rel.max(e);
                passed &= e < tolerance;
            }
        }
        groups.push(GroupReport {
            name,
            entries: a.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed,
        });
    }
    Ok(GradCheckReport { tolerance, groups })
}

pub fn grad_check(cfg: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    if cfg.joints > 4 || cfg.input_frames > 12 || cfg.features > 8 {
        return Err(Error::Config(
            "grad_check is meant for J <= 4, T <= 12, F <= 8".into(),
        ));
    }
    let (params, sample, noise) = grad_check_instance(cfg, seed)?;
    grad_check_with(
        &params,
        cfg,
        &sample,
        &noise,
        tolerance,
        None,
        Execution::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posterior(logits: Array3<f64>) -> EdgePosterior {
        EdgePosterior::from_logits(logits)
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&posterior(Array3::zeros((3, 3, 2)))), 0.0);
        let mut probs = Array3::from_elem((2, 2, 2), 0.5);
        probs[[0, 1, 0]] = 1.0;
        probs[[0, 1, 1]] = 0.0;
        let p = EdgePosterior {
            logits: Array3::zeros((2, 2, 2)),
            probs,
        };
        assert_abs_diff_eq!(kl_loss(&p), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = posterior(Array3::from_shape_simple_fn((3, 3, 2), || {
            rng.random_range(-3.0..3.0)
        }));
        let mut direct = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    for k in 0..2 {
                        let q = p.probs[[a, b, k]];
                        direct += q * (q * 2.0).ln();
                    }
                }
            }
        }
        assert_abs_diff_eq!(kl_loss(&p), direct, epsilon = 1e-12);
        assert!(kl_loss(&p) > 0.0);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array3::from_shape_simple_fn((3, 3, 3), || rng.random_range(-2.0..2.0));
        let g = kl_loss_grad(&posterior(logits.clone()));
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.as_slice_mut().unwrap()[idx] += 1e-5;
            m.as_slice_mut().unwrap()[idx] -= 1e-5;
            let num = (kl_loss(&posterior(p)) - kl_loss(&posterior(m))) / 2e-5;
            assert_abs_diff_eq!(g.as_slice().unwrap()[idx], num, epsilon = 1e-8);
        }
    }

    #[test]
    fn recon_examples() {
        let y = Array2::from_elem((2, 3), 1.5);
        assert_eq!(recon_loss(&y, &y, 1.0).unwrap(), 0.0);
        let mut off = y.clone();
        off[[1, 2]] += 2.0;
        assert_eq!(recon_loss(&off, &y, 1.0).unwrap(), 2.0);
        assert_eq!(recon_loss(&off, &y, 2.0).unwrap(), 0.5);
        assert!(matches!(
            recon_loss(&off, &Array2::zeros((3, 3)), 1.0),
            Err(Error::Shape(_))
        ));
    }

    fn tiny_sample(cfg: &ModelConfig, seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowSample {
            input: Array2::from_shape_fn((cfg.input_frames, cfg.k()), |_| {
                rng.random_range(-1.0..1.0)
            }),
            target: Array2::from_shape_fn((cfg.output_frames, cfg.k()), |_| {
                rng.random_range(-1.0..1.0)
            }),
            source_id: "t".into(),
            start_frame: 0,
        }
    }

    #[test]
    fn total_loss_composition() {
        let cfg = grad_check_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let sample = tiny_sample(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = gumbel_noise(4, 2, &mut rng);
        let (r, _) = forward_traced(
            &sample.input,
            &params,
            &cfg,
            EdgeNoise::Frozen(&noise),
            SampleMode::Train,
            None,
        )
        .unwrap();
        let y1 = coarse_target(&sample.target, &r, &cfg).unwrap();
        let l = total_loss(&r, &sample.target, &y1, &cfg).unwrap();
        let kl = kl_loss(r.posterior.as_ref().unwrap());
        let rf = recon_loss(&r.y0_hat, &sample.target, 1.0).unwrap();
        let rc = recon_loss(r.y1_hat.as_ref().unwrap(), &y1, 1.0).unwrap();
        assert_eq!(l.total, kl + rf + rc);

        let no_kl = ModelConfig {
            kl_weight: 0.0,
            ..cfg.clone()
        };
        let l0 = total_loss(&r, &sample.target, &y1, &no_kl).unwrap();
        assert_eq!(l0.total, rf + rc);

        // perfect predictions and a uniform posterior
        let perfect = ForwardResult {
            posterior: Some(posterior(Array3::zeros((4, 4, 2)))),
            ..r.clone()
        };
        let y1p = perfect.y1_hat.clone().unwrap();
        assert_eq!(
            total_loss(&perfect, &perfect.y0_hat, &y1p, &cfg)
                .unwrap()
                .total,
            0.0
        );
    }

    #[test]
    fn total_loss_ignores_group_labels() {
        let cfg = grad_check_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let sample = tiny_sample(&cfg, 3);
        let mut r = crate::model::forward(
            &sample.input,
            &params,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            SampleMode::Train,
        )
        .unwrap();
        r.partition = crate::edge_inference::JointPartition::from_labels(&[0, 0, 1, 1]);
        let a = total_loss(
            &r,
            &sample.target,
            &coarse_target(&sample.target, &r, &cfg).unwrap(),
            &cfg,
        )
        .unwrap();
        r.partition = crate::edge_inference::JointPartition {
            group_id: vec![1, 1, 0, 0],
            group_count: 2,
        };
        let b = total_loss(
            &r,
            &sample.target,
            &coarse_target(&sample.target, &r, &cfg).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_examples() {
        let cfg = grad_check_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let opt = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };

        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &params.zeroed(), &mut st, &opt).unwrap();
        assert_eq!(p, params);

        // scalar recurrence by hand for one entry with gradient g
        let g = 0.3;
        let mut grads = params.zeroed();
        grads.fine.start.weight[[0, 0]] = g;
        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, &opt).unwrap();
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = params.fine.start.weight[[0, 0]] - 2e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_abs_diff_eq!(p.fine.start.weight[[0, 0]], expected, epsilon = 1e-15);

        // decay only
        let opt_wd = OptimizerConfig::default();
        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &params.zeroed(), &mut st, &opt_wd).unwrap();
        let factor = 1.0 - 2e-4 * 5e-4;
        assert_eq!(
            p.fine.ends[1].weight[[2, 3]],
            params.fine.ends[1].weight[[2, 3]] * factor
        );

        let other = ModelParams::init(
            &ModelConfig {
                coarse_branch: false,
                ..cfg
            },
            1,
        )
        .unwrap();
        let mut p = params.clone();
        assert!(matches!(
            adam_step(&mut p, &other, &mut st, &opt),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn tiny_grad_check_passes() {
        let report = grad_check(&grad_check_config(), 0, 1e-4).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let cfg = grad_check_config();
        let (params, sample, noise) = grad_check_instance(&cfg, 1).unwrap();
        let tamper =
            |g: &mut ModelParams| g.fine.blocks[1].layers[2].weight.mapv_inplace(|v| 2.0 * v);
        let report = grad_check_with(
            &params,
            &cfg,
            &sample,
            &noise,
            1e-4,
            Some(&tamper),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(report.flagged(), vec!["fine.block1.layer2.weight"]);
    }

    #[test]
    fn zero_model_gradients_vanish() {
        let cfg = ModelConfig {
            coarse_branch: false,
            ..grad_check_config()
        };
        let mut params = ModelParams::init(&cfg, 2).unwrap();
        params.visit_mut("", &mut |_, a| a.fill(0.0));
        let sample = tiny_sample(&cfg, 5);
        let noise = Array3::zeros((4, 4, 2));
        let (_, g) =
            window_loss_and_grad(&params, &cfg, &sample, EdgeNoise::Frozen(&noise)).unwrap();
        // with every layer zero, no parameter can move the output to first order
        g.visit("", &mut |n, a| assert!(a.iter().all(|v| *v == 0.0), "{n}"));
        let report = grad_check_with(
            &params,
            &cfg,
            &sample,
            &noise,
            1e-4,
            None,
            Execution::Sequential,
        )
        .unwrap();
        assert!(report.passed());
        let c = cfg.chunk_len();
        let (r, _) = forward_traced(
            &sample.input,
            &params,
            &cfg,
            EdgeNoise::Frozen(&noise),
            SampleMode::Train,
            None,
        )
        .unwrap();
        assert_eq!(
            r.y0_hat.slice(s![..c, ..]),
            sample.input.slice(s![cfg.input_frames - c.., ..])
        );
    }
}

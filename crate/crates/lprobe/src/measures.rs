//! Generalization measures: average margin, difference-based sharpness,
//! alpha-sharpness, and Frobenius distance from initialization.
//!
//! The sharpness measures are defined on flat weight vectors through the
//! [`LossSurface`] abstraction, so the same code paths run against both
//! real model loss graphs and closed-form test surfaces. Measures never
//! mutate the model: candidate weight vectors are bound onto the loss
//! graph directly.
//!
//! Difference-based sharpness follows the bounded gradient-ascent recipe:
//! perturb with small Gaussian noise, take one ascent step of size `n`
//! along the gradient, project back onto a ball of radius
//! `lambda * ||w'||` around the starting point, and report the loss
//! difference. Alpha-sharpness binary-searches the largest perturbation
//! radius `alpha` whose worst-case loss (projected sign-ascent) stays
//! under a target, then reports `||W - W0||^2 / (4 alpha^2)`.

use std::ops::Range;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::accuracy;
use crate::datagen::{derive_seed, Dataset, DomainSuite};
use crate::graph::{Bindings, ComputeGraph, GraphError};
use crate::model::{GraphIds, Model, ModelError};
use crate::tensor::Tensor;

/// Candidate noise scales for the sharpness sweep.
pub const NOISE_SCALE_CANDIDATES: [f64; 4] = [0.001, 0.005, 0.01, 0.02];

/// Default seed for measurement randomness (noise draws, probe starts,
/// batch sampling).
pub const DEFAULT_MEASURE_SEED: u64 = 90;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid measure config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters of difference-based sharpness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessConfig {
    /// Relative noise scale sigma_n; candidates in [`NOISE_SCALE_CANDIDATES`].
    pub noise_scale: f64,
    /// Ascent step coefficient n.
    pub ascent_coeff: f64,
    /// Projection radius factor lambda, in (0, 1).
    pub radius_lambda: f64,
    /// Rows in the fixed evaluation batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl SharpnessConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            noise_scale: 0.01,
            ascent_coeff: 0.05,
            radius_lambda: 0.05,
            batch_size: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if !(self.noise_scale > 0.0) {
            return Err(MeasureError::BadConfig(format!(
                "noise_scale must be > 0, got {}",
                self.noise_scale
            )));
        }
        if !(self.ascent_coeff > 0.0) {
            return Err(MeasureError::BadConfig(format!(
                "ascent_coeff must be > 0, got {}",
                self.ascent_coeff
            )));
        }
        if !(self.radius_lambda > 0.0 && self.radius_lambda < 1.0) {
            return Err(MeasureError::BadConfig(format!(
                "radius_lambda must lie in (0, 1), got {}",
                self.radius_lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(MeasureError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the alpha-sharpness search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSharpnessConfig {
    /// Feasibility target is `L(W) + loss_target_offset`.
    pub loss_target_offset: f64,
    /// Projected sign-ascent steps per feasibility probe.
    pub ascent_steps: usize,
    pub binary_search_iters: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub seed: u64,
}

impl AlphaSharpnessConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            loss_target_offset: 0.1,
            ascent_steps: 20,
            binary_search_iters: 40,
            alpha_lo: 1e-4,
            alpha_hi: 4.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if !(self.alpha_lo < self.alpha_hi) {
            return Err(MeasureError::BadConfig(format!(
                "alpha bounds must satisfy lo < hi, got ({}, {})",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if !(self.alpha_lo > 0.0) {
            return Err(MeasureError::BadConfig(format!(
                "alpha_lo must be > 0, got {}",
                self.alpha_lo
            )));
        }
        if self.binary_search_iters == 0 {
            return Err(MeasureError::BadConfig(
                "binary_search_iters must be >= 1".into(),
            ));
        }
        if self.ascent_steps == 0 {
            return Err(MeasureError::BadConfig("ascent_steps must be >= 1".into()));
        }
        if !self.loss_target_offset.is_finite() || !(self.loss_target_offset > 0.0) {
            return Err(MeasureError::BadConfig(format!(
                "loss_target_offset must be > 0, got {}",
                self.loss_target_offset
            )));
        }
        Ok(())
    }
}

/// A differentiable scalar loss over a flat weight vector.
pub trait LossSurface {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> Result<f64, MeasureError>;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, MeasureError>;
    /// Disjoint coordinate ranges, one per underlying tensor, used to scale
    /// perturbation noise per tensor. Defaults to one range for everything.
    fn tensor_ranges(&self) -> Vec<Range<usize>> {
        let everything = 0..self.dim();
        vec![everything]
    }
}

/// A model cross-entropy loss graph bound to one fixed batch.
pub struct GraphLossSurface<'a> {
    model: &'a Model,
    graph: ComputeGraph,
    ids: GraphIds,
    batch: (Tensor, Tensor),
}

impl<'a> GraphLossSurface<'a> {
    /// Cross-entropy surface of `model` on `batch`.
    pub fn new(model: &'a Model, batch: (Tensor, Tensor)) -> Result<Self, MeasureError> {
        let rows = batch.0.shape()[0];
        if rows == 0 {
            return Err(MeasureError::EmptyDataset);
        }
        let (graph, ids) = model.ce_loss_graph(rows);
        Ok(Self {
            model,
            graph,
            ids,
            batch,
        })
    }

    fn bindings(&self, w: &[f64]) -> Bindings {
        let mut b = Bindings::new();
        b.insert(self.ids.input, self.batch.0.clone());
        b.insert(self.ids.labels.expect("loss graph"), self.batch.1.clone());
        self.model.bind_weights(&self.ids, w, &mut b);
        b
    }
}

impl LossSurface for GraphLossSurface<'_> {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn loss(&self, w: &[f64]) -> Result<f64, MeasureError> {
        Ok(self.graph.evaluate(&self.bindings(w))?.data()[0])
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, MeasureError> {
        let grads = self.graph.gradient(&self.bindings(w), &self.ids.weights)?;
        Ok(self.model.flatten_gradient(&self.ids, &grads))
    }

    fn tensor_ranges(&self) -> Vec<Range<usize>> {
        self.model
            .weight_slices()
            .into_iter()
            .map(|s| s.range)
            .collect()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Average margin: mean over samples of
/// `logit(true class) - max logit(other classes)`.
pub fn margin(model: &Model, dataset: &Dataset) -> Result<f64, MeasureError> {
    if dataset.is_empty() {
        return Err(MeasureError::EmptyDataset);
    }
    let (x, _) = dataset.full_batch();
    let logits = model.forward(&x)?;
    Ok(margin_of_logits(&logits, dataset.labels()))
}

/// [`margin`] over precomputed logits.
pub fn margin_of_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best_other = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != y && v > best_other {
                best_other = v;
            }
        }
        debug_assert!(k >= 2);
        total += row[y] - best_other;
    }
    total / labels.len() as f64
}

/// Draw the sharpness perturbation: per-coordinate Gaussian noise scaled by
/// `noise_scale` times the RMS weight magnitude of the coordinate's tensor.
/// Tensors with vanishing RMS fall back to the absolute scale.
pub fn draw_sharpness_noise<S: LossSurface + ?Sized>(
    surface: &S,
    w0: &[f64],
    cfg: &SharpnessConfig,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;
    let mut eps = vec![0.0; w0.len()];
    for range in surface.tensor_ranges() {
        let slice = &w0[range.clone()];
        let rms = (slice.iter().map(|x| x * x).sum::<f64>() / slice.len() as f64).sqrt();
        let scale = cfg.noise_scale * if rms >= 1e-12 { rms } else { 1.0 };
        for i in range {
            let z: f64 = normal.sample(&mut rng);
            eps[i] = scale * z;
        }
    }
    eps
}

/// Difference-based sharpness with an explicitly injected noise vector.
///
/// Steps: `w = w0 + eps`; one gradient-ascent step `w' = w + n * grad L(w)`;
/// project `w'` back onto the ball of radius `lambda * ||w'||` around `w0`
/// if it escaped; return `L(w') - L(w0)`.
pub fn phi_difference_with_noise<S: LossSurface + ?Sized>(
    surface: &S,
    w0: &[f64],
    eps: &[f64],
    cfg: &SharpnessConfig,
) -> Result<f64, MeasureError> {
    cfg.validate()?;
    if w0.len() != surface.dim() || eps.len() != surface.dim() {
        return Err(MeasureError::BadConfig(format!(
            "weight/noise length {}/{} does not match surface dim {}",
            w0.len(),
            eps.len(),
            surface.dim()
        )));
    }
    let loss_at_origin = surface.loss(w0)?;

    let w: Vec<f64> = w0.iter().zip(eps).map(|(a, b)| a + b).collect();
    let delta = surface.grad(&w)?;
    let mut w_prime: Vec<f64> = w
        .iter()
        .zip(&delta)
        .map(|(wi, di)| wi + cfg.ascent_coeff * di)
        .collect();

    let radius = cfg.radius_lambda * l2(&w_prime);
    let offset: Vec<f64> = w_prime.iter().zip(w0).map(|(a, b)| a - b).collect();
    let dist = l2(&offset);
    if dist > radius {
        if dist == 0.0 {
            // Unreachable when radius >= 0, kept as a terminating guard.
            return Ok(0.0);
        }
        let shrink = radius / dist;
        for (wp, (o, w0v)) in w_prime.iter_mut().zip(offset.iter().zip(w0)) {
            *wp = w0v + shrink * o;
        }
    }
    let loss_at_perturbed = surface.loss(&w_prime)?;
    Ok(loss_at_perturbed - loss_at_origin)
}

/// Difference-based sharpness with the seeded noise draw.
pub fn phi_difference_on<S: LossSurface + ?Sized>(
    surface: &S,
    w0: &[f64],
    cfg: &SharpnessConfig,
) -> Result<f64, MeasureError> {
    cfg.validate()?;
    let eps = draw_sharpness_noise(surface, w0, cfg);
    phi_difference_with_noise(surface, w0, &eps, cfg)
}

/// Difference-based sharpness of a model on one evaluation batch.
///
/// The model is read-only; its stored weights are the `w0` of the ascent.
pub fn phi_difference(
    model: &Model,
    batch: (Tensor, Tensor),
    cfg: &SharpnessConfig,
) -> Result<f64, MeasureError> {
    let surface = GraphLossSurface::new(model, batch)?;
    phi_difference_on(&surface, model.weights(), cfg)
}

/// Outcome of the alpha-sharpness search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaOutcome {
    /// `||W - W0||^2 / (4 alpha^2)`; absent when the search failed.
    pub phi: Option<f64>,
    /// The largest feasible radius found; absent when the search failed.
    pub alpha: Option<f64>,
    pub failed: bool,
    /// Why the search failed, when it did.
    pub failure_reason: Option<String>,
}

impl AlphaOutcome {
    fn failure(reason: &str) -> Self {
        Self {
            phi: None,
            alpha: None,
            failed: true,
            failure_reason: Some(reason.to_string()),
        }
    }
}

/// Worst-case loss within the box `|u_i| <= alpha` around `w`, approximated
/// by seeded projected sign-ascent. Returns the largest loss seen along the
/// trajectory, or None when evaluation blows up (treated as ascent
/// divergence by the caller).
fn box_max_loss<S: LossSurface + ?Sized>(
    surface: &S,
    w: &[f64],
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Option<f64> {
    let dim = surface.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random interior start: a zero start has zero gradient at a local
    // optimum and the ascent would never move.
    let mut u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-alpha..=alpha)).collect();
    let step = 2.5 * alpha / steps as f64;
    let mut point = vec![0.0; dim];
    let mut best = f64::NEG_INFINITY;
    for k in 0..=steps {
        for i in 0..dim {
            point[i] = w[i] + u[i];
        }
        match surface.loss(&point) {
            Ok(l) if l.is_finite() => {
                if l > best {
                    best = l;
                }
            }
            _ => return None,
        }
        if k == steps {
            break;
        }
        let g = match surface.grad(&point) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => return None,
        };
        for i in 0..dim {
            u[i] = (u[i] + step * g[i].signum() * if g[i] == 0.0 { 0.0 } else { 1.0 })
                .clamp(-alpha, alpha);
        }
    }
    Some(best)
}

/// Alpha-sharpness on an arbitrary surface.
///
/// `w` is the point being measured; `w_init` is the initialization the
/// displacement is measured from. Binary-searches the largest `alpha` in
/// the configured bounds whose worst-case loss stays below
/// `L(w) + loss_target_offset`. Failure (flag, not error) occurs when no
/// bound is feasible, when the search pins to the upper bound, or when the
/// ascent diverges.
pub fn phi_alpha_on<S: LossSurface + ?Sized>(
    surface: &S,
    w: &[f64],
    w_init: &[f64],
    cfg: &AlphaSharpnessConfig,
) -> Result<AlphaOutcome, MeasureError> {
    cfg.validate()?;
    if w.len() != surface.dim() || w_init.len() != surface.dim() {
        return Err(MeasureError::BadConfig(format!(
            "weight lengths {}/{} do not match surface dim {}",
            w.len(),
            w_init.len(),
            surface.dim()
        )));
    }
    let base_loss = surface.loss(w)?;
    let target = base_loss + cfg.loss_target_offset;
    let displacement_sq: f64 = w
        .iter()
        .zip(w_init)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let mut probe_idx = 0u64;
    let mut feasible = |alpha: f64| -> Option<bool> {
        let seed = derive_seed(cfg.seed, &format!("alpha-probe/{probe_idx}"));
        probe_idx += 1;
        box_max_loss(surface, w, alpha, cfg.ascent_steps, seed).map(|max| max < target)
    };

    match feasible(cfg.alpha_lo) {
        None => return Ok(AlphaOutcome::failure("ascent diverged at the lower bound")),
        Some(false) => {
            return Ok(AlphaOutcome::failure(
                "no feasible alpha: the lower bound already exceeds the loss target",
            ))
        }
        Some(true) => {}
    }
    match feasible(cfg.alpha_hi) {
        None => return Ok(AlphaOutcome::failure("ascent diverged at the upper bound")),
        Some(true) => {
            return Ok(AlphaOutcome::failure(
                "search pinned to the upper extreme: the whole range is feasible",
            ))
        }
        Some(false) => {}
    }

    let (mut lo, mut hi) = (cfg.alpha_lo, cfg.alpha_hi);
    for _ in 0..cfg.binary_search_iters {
        let mid = 0.5 * (lo + hi);
        match feasible(mid) {
            None => return Ok(AlphaOutcome::failure("ascent diverged during the search")),
            Some(true) => lo = mid,
            Some(false) => hi = mid,
        }
    }
    let alpha = lo;
    Ok(AlphaOutcome {
        phi: Some(displacement_sq / (4.0 * alpha * alpha)),
        alpha: Some(alpha),
        failed: false,
        failure_reason: None,
    })
}

/// Alpha-sharpness of a model on one evaluation batch, measured against the
/// model's stored initialization.
pub fn phi_alpha(
    model: &Model,
    batch: (Tensor, Tensor),
    cfg: &AlphaSharpnessConfig,
) -> Result<AlphaOutcome, MeasureError> {
    let surface = GraphLossSurface::new(model, batch)?;
    phi_alpha_on(&surface, model.weights(), model.init_weights(), cfg)
}

/// `||W - W0||_F`: Euclidean distance of the current weights from
/// initialization.
pub fn frobenius_distance(model: &Model) -> f64 {
    model
        .weights()
        .iter()
        .zip(model.init_weights())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// One per-(model, domain) measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub model_id: String,
    pub objective: String,
    pub seed: u64,
    pub domain: String,
    pub accuracy: f64,
    pub margin: f64,
    pub phi_difference: f64,
    /// Absent exactly when the alpha search failed.
    pub phi_alpha: Option<f64>,
    pub phi_alpha_failed: bool,
    pub frobenius_distance: f64,
    /// Hash of the measure configs that produced this row.
    pub config_hash: String,
    /// Extra sweep values, one per [`NOISE_SCALE_CANDIDATES`] entry, when
    /// the noise sweep is enabled.
    pub phi_difference_sweep: Option<[f64; 4]>,
}

/// Fixed CSV header for measure reports (17-significant-digit floats).
pub fn report_csv_header(sweep: bool) -> String {
    let mut h = String::from(
        "model_id,objective,seed,domain,accuracy,margin,phi_difference,phi_alpha,phi_alpha_failed,frobenius_distance",
    );
    if sweep {
        for s in NOISE_SCALE_CANDIDATES {
            h.push_str(&format!(",phi_difference_sigma_{s}"));
        }
    }
    h.push('\n');
    h
}

/// Render rows under [`report_csv_header`].
pub fn reports_to_csv(reports: &[MeasureReport], sweep: bool) -> String {
    let mut out = report_csv_header(sweep);
    for r in reports {
        let alpha = match r.phi_alpha {
            Some(v) => format!("{v:.16e}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{},{},{:.16e}",
            r.model_id,
            r.objective,
            r.seed,
            r.domain,
            r.accuracy,
            r.margin,
            r.phi_difference,
            alpha,
            r.phi_alpha_failed,
            r.frobenius_distance
        ));
        if sweep {
            let values = r.phi_difference_sweep.unwrap_or([f64::NAN; 4]);
            for v in values {
                out.push_str(&format!(",{v:.16e}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Deterministic hash of the measure configs, recorded per report row.
pub fn config_hash(sharp: &SharpnessConfig, alpha: &AlphaSharpnessConfig) -> String {
    let repr = format!("{sharp:?}|{alpha:?}");
    format!("{:016x}", derive_seed(0, &repr))
}

/// Everything produced by [`measure_all`].
#[derive(Debug)]
pub struct MeasureOutcome {
    pub reports: Vec<MeasureReport>,
    /// Domains whose row failed, with the error text; successful rows are
    /// unaffected.
    pub row_errors: Vec<(String, String)>,
    /// Wall time of one model-level difference-sharpness evaluation.
    pub phi_difference_secs: f64,
    /// Wall time of the model-level alpha-sharpness search.
    pub phi_alpha_secs: f64,
}

/// Seeded sample of `count` distinct row indices.
///
/// The batch-selection rule behind every seeded evaluation batch; exposed
/// so other frontends can reproduce the exact batches used here.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(count.min(len));
    order
}

/// Identity of the model being measured, recorded on every row.
#[derive(Debug, Clone)]
pub struct MeasureIdentity {
    pub model_id: String,
    pub objective: String,
    pub seed: u64,
}

/// Measure a trained model across every shifted domain of a suite.
///
/// Per row: accuracy and margin on the domain's eval split, difference
/// sharpness on a seeded fixed-size batch from that split (same noise draw
/// for every domain, so rows differ only through the domain's loss
/// surface), plus the model-level alpha-sharpness (on a seeded
/// anchor-validation batch) and Frobenius distance repeated per row.
/// Individual row failures are recorded and skipped.
pub fn measure_all(
    identity: &MeasureIdentity,
    model: &Model,
    suite: &DomainSuite,
    sharp_cfg: &SharpnessConfig,
    alpha_cfg: &AlphaSharpnessConfig,
    sweep_noise: bool,
) -> Result<MeasureOutcome, MeasureError> {
    sharp_cfg.validate()?;
    alpha_cfg.validate()?;
    if suite.shifted.is_empty() {
        return Err(MeasureError::BadConfig(
            "suite has no shifted domains".into(),
        ));
    }
    if suite.anchor.val.is_empty() {
        return Err(MeasureError::EmptyDataset);
    }
    let hash = config_hash(sharp_cfg, alpha_cfg);

    // Model-level measures on a fixed, seeded anchor-validation batch.
    let anchor_idx = sample_indices(
        suite.anchor.val.len(),
        sharp_cfg.batch_size,
        derive_seed(sharp_cfg.seed, "anchor-batch"),
    );
    let anchor_batch = suite.anchor.val.batch(&anchor_idx);
    let anchor_surface = GraphLossSurface::new(model, anchor_batch)?;

    let t0 = Instant::now();
    let alpha_outcome = phi_alpha_on(
        &anchor_surface,
        model.weights(),
        model.init_weights(),
        alpha_cfg,
    )?;
    let phi_alpha_secs = t0.elapsed().as_secs_f64();

    // One noise draw per model, shared across domains.
    let eps = draw_sharpness_noise(&anchor_surface, model.weights(), sharp_cfg);
    let t1 = Instant::now();
    let _ = phi_difference_with_noise(&anchor_surface, model.weights(), &eps, sharp_cfg)?;
    let phi_difference_secs = t1.elapsed().as_secs_f64();

    let frob = frobenius_distance(model);

    let mut reports = Vec::with_capacity(suite.shifted.len());
    let mut row_errors = Vec::new();
    for shifted in &suite.shifted {
        let name = &shifted.spec.name;
        let row = (|| -> Result<MeasureReport, MeasureError> {
            let eval = &shifted.eval;
            if eval.is_empty() {
                return Err(MeasureError::EmptyDataset);
            }
            let (x, _) = eval.full_batch();
            let logits = model.forward(&x)?;
            let acc = accuracy(&logits, eval.labels())
                .map_err(|e| MeasureError::BadConfig(e.to_string()))?;
            let mar = margin_of_logits(&logits, eval.labels());

            let idx = sample_indices(
                eval.len(),
                sharp_cfg.batch_size,
                derive_seed(sharp_cfg.seed, &format!("batch/{name}")),
            );
            let surface = GraphLossSurface::new(model, eval.batch(&idx))?;
            let phi_diff =
                phi_difference_with_noise(&surface, model.weights(), &eps, sharp_cfg)?;

            let sweep = if sweep_noise {
                let mut values = [0.0; 4];
                for (slot, sigma) in values.iter_mut().zip(NOISE_SCALE_CANDIDATES) {
                    let cfg = SharpnessConfig {
                        noise_scale: sigma,
                        ..sharp_cfg.clone()
                    };
                    let eps_s = draw_sharpness_noise(&surface, model.weights(), &cfg);
                    *slot = phi_difference_with_noise(&surface, model.weights(), &eps_s, &cfg)?;
                }
                Some(values)
            } else {
                None
            };

            Ok(MeasureReport {
                model_id: identity.model_id.clone(),
                objective: identity.objective.clone(),
                seed: identity.seed,
                domain: name.clone(),
                accuracy: acc,
                margin: mar,
                phi_difference: phi_diff,
                phi_alpha: alpha_outcome.phi,
                phi_alpha_failed: alpha_outcome.failed,
                frobenius_distance: frob,
                config_hash: hash.clone(),
                phi_difference_sweep: sweep,
            })
        })();
        match row {
            Ok(r) => reports.push(r),
            Err(e) => row_errors.push((name.clone(), e.to_string())),
        }
    }

    Ok(MeasureOutcome {
        reports,
        row_errors,
        phi_difference_secs,
        phi_alpha_secs,
    })
}

//! Total objective, optimizer, gradient verification and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{indicator_weights, instance_temperature, NUM_MODALITIES};
use crate::error::{contract, Error, Result};
use crate::geometry::{
    apply_whitening, centroid_gap, coral_loss, covariance_gap, fit_whitening_grouped,
    WhiteningTransform,
};
use crate::negatives::{
    build_similarity_matrix, curriculum_ratio, dcl_loss, negative_mask, BatchTemperatures,
    CurriculumSchedule, NegativeMask,
};
use crate::numerics::{dot, seeded_rng, Matrix};
use crate::synth::{encode, encode_backward, Dataset, Encoded, Item, ModelParams, TrainingTuple};

/// Independent switches for the four components of the recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Per-modality learned temperatures; off means one fixed global temperature.
    pub calibration: bool,
    /// Rising mask ratio; off means a fixed ratio.
    pub curriculum: bool,
    /// Debiasing term; off means `γ₊ = 0`.
    pub dcl: bool,
    /// Batch whitening plus the covariance-alignment penalty.
    pub whitening_coral: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            calibration: true,
            curriculum: true,
            dcl: true,
            whitening_coral: true,
        }
    }
}

impl Toggles {
    pub const ALL_OFF: Toggles = Toggles {
        calibration: false,
        curriculum: false,
        dcl: false,
        whitening_coral: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps `T`.
    pub total_steps: u64,
    /// Curriculum warmup cutoff `t0`.
    pub t0: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of `total_steps` over which the learning rate ramps up from 0.
    pub warmup_ratio: f64,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub gamma_plus: f64,
    pub epsilon: f64,
    pub rho_init: f64,
    pub rho_final: f64,
    /// Mask ratio used when the curriculum is switched off.
    pub fixed_rho: f64,
    pub lambda_coral: f64,
    pub jitter: f64,
    /// Contiguous feature groups whitened independently.
    pub whitening_groups: usize,
    pub tau_init: f64,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            t0: 400,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_ratio: 0.005,
            accumulation: 1,
            gamma_plus: 0.1,
            epsilon: 1e-8,
            rho_init: 0.1,
            rho_final: 0.5,
            fixed_rho: 0.3,
            lambda_coral: 0.05,
            jitter: 1e-4,
            whitening_groups: 1,
            tau_init: 0.02,
            toggles: Toggles::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(contract(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.accumulation == 0 {
            return Err(contract("accumulation must be at least 1"));
        }
        if self.total_steps > 0 {
            self.schedule()?;
        }
        if !(0.0..1.0).contains(&self.fixed_rho) {
            return Err(contract(format!(
                "fixed_rho must lie in [0, 1), got {}",
                self.fixed_rho
            )));
        }
        if !(0.0..1.0).contains(&self.gamma_plus) {
            return Err(contract(format!(
                "gamma_plus must lie in [0, 1), got {}",
                self.gamma_plus
            )));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("tau_init", self.tau_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(contract(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_coral", self.lambda_coral),
            ("jitter", self.jitter),
            ("warmup_ratio", self.warmup_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(contract(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.whitening_groups == 0 {
            return Err(contract("whitening_groups must be at least 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        CurriculumSchedule::new(self.rho_init, self.rho_final, self.t0, self.total_steps)
    }

    /// Mask ratio in effect at optimizer step `t`.
    pub fn rho_at(&self, t: u64) -> Result<f64> {
        if self.toggles.curriculum {
            Ok(curriculum_ratio(t, &self.schedule()?))
        } else {
            Ok(self.fixed_rho)
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate at optimizer step `t` (0-based), ramped linearly from 0.
    pub fn lr_at(&self, t: u64) -> f64 {
        let w = self.warmup_steps();
        if w == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((t + 1) as f64 / w as f64).min(1.0)
        }
    }
}

/// Telemetry for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub rho: f64,
    pub loss_total: f64,
    pub loss_dcl: f64,
    pub loss_coral: f64,
    pub grad_norm: f64,
    pub centroid_gap: f64,
    pub covariance_gap: f64,
    pub tau: [f64; NUM_MODALITIES],
    /// Items whose instance temperature hit the floor.
    pub temperature_clamps: usize,
    /// Rows whose debiased negative mass hit `ε`.
    pub negative_clamps: usize,
}

/// Non-differentiable choices made on a batch, reusable for finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub mask: NegativeMask,
    pub whitening: Option<WhiteningTransform>,
}

/// Objective value, parameter gradients, and the frozen selections.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub record: StepRecord,
    pub grads: ModelParams,
    pub frozen: Frozen,
}

struct ItemPass<'a> {
    item: &'a Item,
    enc: Encoded,
    tau: f64,
    /// `None` when the temperature is constant in τ (floored or calibration off).
    weights: Option<[f64; NUM_MODALITIES]>,
}

fn encode_all<'a>(
    params: &ModelParams,
    items: impl Iterator<Item = &'a Item>,
    cfg: &TrainConfig,
    clamps: &mut usize,
) -> Result<Vec<ItemPass<'a>>> {
    items
        .map(|item| {
            let enc = encode(params, item)?;
            let (tau, weights) = if cfg.toggles.calibration {
                let w = indicator_weights(item.composition);
                let t = instance_temperature(&w, &params.tau);
                if t.floored {
                    *clamps += 1;
                }
                (t.value, (!t.floored).then_some(w.0))
            } else {
                (cfg.tau_init, None)
            };
            Ok(ItemPass {
                item,
                enc,
                tau,
                weights,
            })
        })
        .collect()
}

fn stack(passes: &[ItemPass<'_>], d: usize) -> Matrix {
    let mut m = Matrix::zeros(passes.len(), d);
    for (r, p) in passes.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&p.enc.embedding);
    }
    m
}

/// Evaluate `L = L_DCL + λ·L_coral` on one batch with gradients for every
/// parameter, including τ. Passing `frozen` reuses a mask and whitening
/// transform instead of recomputing them.
pub fn total_loss(
    batch: &[&TrainingTuple],
    params: &ModelParams,
    t: u64,
    cfg: &TrainConfig,
    frozen: Option<&Frozen>,
) -> Result<LossEval> {
    let b = batch.len();
    if b < 2 {
        return Err(contract(format!("batch needs at least 2 tuples, got {b}")));
    }
    let k = batch[0].hard_negatives.len();
    if batch.iter().any(|tp| tp.hard_negatives.len() != k) {
        return Err(contract(
            "tuples in a batch must share the hard-negative count",
        ));
    }
    let d = params.embed_dim();
    let mut temperature_clamps = 0;
    let queries = encode_all(
        params,
        batch.iter().map(|tp| &tp.query),
        cfg,
        &mut temperature_clamps,
    )?;
    let targets = encode_all(
        params,
        batch.iter().map(|tp| &tp.positive),
        cfg,
        &mut temperature_clamps,
    )?;
    let hards = encode_all(
        params,
        batch.iter().flat_map(|tp| tp.hard_negatives.iter()),
        cfg,
        &mut temperature_clamps,
    )?;
    let (q, p, h) = (stack(&queries, d), stack(&targets, d), stack(&hards, d));

    let temps = BatchTemperatures {
        queries: queries.iter().map(|x| x.tau).collect(),
        targets: targets.iter().map(|x| x.tau).collect(),
        hard_negatives: hards.iter().map(|x| x.tau).collect(),
    };
    let s = build_similarity_matrix(&q, &p, &h, &temps)?;
    let rho = cfg.rho_at(t)?;
    let mask = match frozen {
        Some(f) => f.mask.clone(),
        None => negative_mask(&s, rho)?,
    };
    let gamma = if cfg.toggles.dcl { cfg.gamma_plus } else { 0.0 };
    let dcl = dcl_loss(&s, &mask, gamma, cfg.epsilon)?;

    let mut dq = Matrix::zeros(b, d);
    let mut dp = Matrix::zeros(b, d);
    let mut dh = Matrix::zeros(b * k, d);
    let mut loss_coral = 0.0;
    let mut whitening = None;
    let lambda = if cfg.toggles.whitening_coral {
        cfg.lambda_coral
    } else {
        0.0
    };
    if cfg.toggles.whitening_coral {
        let w = match frozen.and_then(|f| f.whitening.as_ref()) {
            Some(w) => w.clone(),
            None => fit_whitening_grouped(&q, &p, cfg.jitter, cfg.whitening_groups)?,
        };
        let coral = coral_loss(&apply_whitening(&w, &q)?, &apply_whitening(&w, &p)?)?;
        loss_coral = coral.loss;
        // X̂ = (X − μ)·Wᵀ with W held fixed, so ∂L/∂X = ∂L/∂X̂ · W.
        dq = coral.grad_q.matmul(&w.map)?.scale(lambda);
        dp = coral.grad_p.matmul(&w.map)?.scale(lambda);
        whitening = Some(w);
    }

    // Back through the calibrated logits.
    let mut d_tau_q = vec![0.0; b];
    let mut d_tau_p = vec![0.0; b];
    let mut d_tau_h = vec![0.0; b * k];
    for i in 0..b {
        for j in 0..b + k {
            let g = dcl.grad[(i, j)];
            if g == 0.0 {
                continue;
            }
            let tau = s.pair_temps[(i, j)];
            let inv = g / tau;
            let d_pair = -g * s.logits[(i, j)] / tau;
            let (col_row, col_grad, col_tau) = if j < b {
                (p.row(j), dp.row_mut(j), &mut d_tau_p[j])
            } else {
                let idx = i * k + (j - b);
                (h.row(idx), dh.row_mut(idx), &mut d_tau_h[idx])
            };
            for (g_col, x) in col_grad.iter_mut().zip(q.row(i)) {
                *g_col += inv * x;
            }
            *col_tau += 0.5 * d_pair;
            for (g_q, x) in dq.row_mut(i).iter_mut().zip(col_row) {
                *g_q += inv * x;
            }
            d_tau_q[i] += 0.5 * d_pair;
        }
    }

    let mut grads = params.zeros_like();
    let groups = [
        (&queries, &dq, &d_tau_q),
        (&targets, &dp, &d_tau_p),
        (&hards, &dh, &d_tau_h),
    ];
    for (passes, d_emb, d_tau) in groups {
        for (r, pass) in passes.iter().enumerate() {
            encode_backward(pass.item, &pass.enc, d_emb.row(r), &mut grads);
            if let Some(w) = pass.weights {
                for (g, wm) in grads.tau.0.iter_mut().zip(w) {
                    *g += d_tau[r] * wm;
                }
            }
        }
    }

    let loss_total = dcl.loss + lambda * loss_coral;
    let grad_flat = grads.to_flat();
    let record = StepRecord {
        step: t,
        rho,
        loss_total,
        loss_dcl: dcl.loss,
        loss_coral,
        grad_norm: dot(&grad_flat, &grad_flat).sqrt(),
        centroid_gap: centroid_gap(&q, &p)?,
        covariance_gap: covariance_gap(&q, &p)?,
        tau: params.tau.0,
        temperature_clamps,
        negative_clamps: dcl.clamped_rows,
    };
    if !loss_total.is_finite() {
        return Err(Error::TrainingAborted {
            step: t,
            reason: format!("non-finite loss {loss_total}"),
            record: Some(Box::new(record)),
        });
    }
    Ok(LossEval {
        record,
        grads,
        frozen: Frozen { mask, whitening },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, elementwise.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(contract(format!(
            "adam shapes disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
}

/// Deterministic stream of micro-batches: reshuffle every pass over the data.
struct BatchOrder {
    order: Vec<usize>,
    cursor: usize,
    rng: crate::numerics::SeededRng,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchOrder {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        out
    }
}

/// Seed offsets so initialization and batch order draw from separate streams.
const INIT_STREAM: u64 = 0x5eed_0001;
const ORDER_STREAM: u64 = 0x5eed_0002;

pub fn initial_params(dataset: &Dataset, cfg: &TrainConfig) -> ModelParams {
    let w = &dataset.header.config;
    ModelParams::init(
        w.feature_dim,
        w.embed_dim,
        cfg.tau_init,
        cfg.seed ^ INIT_STREAM,
    )
}

/// Train from the dataset's initial parameters.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, cfg, |_| ())
}

/// [`train`] with a callback observing each step record as it is produced.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut params = initial_params(dataset, cfg);
    if cfg.total_steps == 0 {
        return Ok(TrainOutput {
            params,
            log: Vec::new(),
        });
    }
    if dataset.train.len() < cfg.batch_size {
        return Err(contract(format!(
            "training split has {} tuples, fewer than one batch of {}",
            dataset.train.len(),
            cfg.batch_size
        )));
    }
    let adam = AdamConfig::default();
    let mut state = OptimizerState::new(params.num_params());
    let mut order = BatchOrder::new(dataset.train.len(), cfg.seed ^ ORDER_STREAM);
    let mut log = Vec::with_capacity(cfg.total_steps as usize);
    let scale = 1.0 / cfg.accumulation as f64;
    for t in 0..cfg.total_steps {
        let mut grad = vec![0.0; params.num_params()];
        let mut record: Option<StepRecord> = None;
        for _ in 0..cfg.accumulation {
            let idx = order.next(cfg.batch_size);
            let batch: Vec<&TrainingTuple> = idx.iter().map(|&i| &dataset.train[i]).collect();
            let eval = total_loss(&batch, &params, t, cfg, None).map_err(|e| abort(t, e))?;
            for (g, x) in grad.iter_mut().zip(eval.grads.to_flat()) {
                *g += scale * x;
            }
            record = Some(match record {
                None => scaled(eval.record, scale),
                Some(acc) => accumulate(acc, &eval.record, scale),
            });
        }
        let mut record = record.expect("accumulation >= 1");
        record.grad_norm = dot(&grad, &grad).sqrt();
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::TrainingAborted {
                step: t,
                reason: "non-finite gradient".into(),
                record: Some(Box::new(record)),
            });
        }
        let mut flat = params.to_flat();
        adam_step(&mut flat, &grad, &mut state, cfg.lr_at(t), &adam)?;
        params.set_flat(&flat)?;
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutput { params, log })
}

/// Attach step context to failures raised inside a step.
fn abort(step: u64, e: Error) -> Error {
    match e {
        Error::Numerical(_) | Error::DegenerateEmbedding { .. } => Error::TrainingAborted {
            step,
            reason: e.to_string(),
            record: None,
        },
        other => other,
    }
}

fn scaled(mut r: StepRecord, s: f64) -> StepRecord {
    r.loss_total *= s;
    r.loss_dcl *= s;
    r.loss_coral *= s;
    r.centroid_gap *= s;
    r.covariance_gap *= s;
    r
}

fn accumulate(mut acc: StepRecord, r: &StepRecord, s: f64) -> StepRecord {
    acc.loss_total += s * r.loss_total;
    acc.loss_dcl += s * r.loss_dcl;
    acc.loss_coral += s * r.loss_coral;
    acc.centroid_gap += s * r.centroid_gap;
    acc.covariance_gap += s * r.covariance_gap;
    acc.temperature_clamps += r.temperature_clamps;
    acc.negative_clamps += r.negative_clamps;
    acc
}

/// Denominator floor for relative errors, so near-zero gradients compare absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Central differences of `f` at `theta` on `coords`, compared with `analytic`.
/// `steps[n]` is the step for `coords[n]`. Infinite error if any analytic
/// entry is non-finite or `f` fails numerically.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    steps: &[f64],
) -> Result<GradCheckReport> {
    if theta.len() != analytic.len() {
        return Err(contract(format!(
            "theta has {} entries, gradient {}",
            theta.len(),
            analytic.len()
        )));
    }
    if coords.len() != steps.len() {
        return Err(contract(format!(
            "{} coordinates but {} steps",
            coords.len(),
            steps.len()
        )));
    }
    if let Some(h) = steps.iter().find(|h| !(**h > 0.0)) {
        return Err(contract(format!("steps must be positive, got {h}")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        report.max_rel_error = f64::INFINITY;
        report.worst_index = i;
        report.analytic = analytic[i];
        return Ok(report);
    }
    let mut probe = theta.to_vec();
    for (&i, &h) in coords.iter().zip(steps) {
        if i >= theta.len() {
            return Err(contract(format!(
                "coordinate {i} out of range {}",
                theta.len()
            )));
        }
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        let numeric = match (plus, minus) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            (Err(e), _) | (_, Err(e)) if !e.is_numerical() => return Err(e),
            _ => f64::NAN,
        };
        let err = if numeric.is_finite() {
            relative_error(analytic[i], numeric)
        } else {
            f64::INFINITY
        };
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Fraction of non-temperature coordinates probed by [`finite_diff_check`].
pub const GRADCHECK_SUBSAMPLE: f64 = 0.05;

/// Coordinates probed for `params`: a seeded 5% subsample of projection and
/// bias entries plus every temperature entry.
pub fn gradcheck_coordinates(params: &ModelParams, seed: u64) -> Vec<usize> {
    let offset = params.tau_offset();
    let take = ((offset as f64) * GRADCHECK_SUBSAMPLE).ceil() as usize;
    let mut rng = seeded_rng(seed);
    let mut coords: Vec<usize> =
        rand::seq::index::sample(&mut rng, offset, take.min(offset)).into_vec();
    coords.sort_unstable();
    coords.extend(offset..params.num_params());
    coords
}

/// Verify [`total_loss`] gradients against central differences with the
/// negative mask and whitening transform frozen at `params`.
///
/// Temperatures use the relative step `h·|τ|`: the loss varies like `1/τ`, so an
/// absolute step of `h` would dominate the error at `τ ≈ 0.02`.
pub fn finite_diff_check(
    batch: &[&TrainingTuple],
    params: &ModelParams,
    t: u64,
    cfg: &TrainConfig,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    finite_diff_check_at(
        batch,
        params,
        t,
        cfg,
        h,
        &gradcheck_coordinates(params, seed),
    )
}

/// [`finite_diff_check`] over explicit flat coordinates.
pub fn finite_diff_check_at(
    batch: &[&TrainingTuple],
    params: &ModelParams,
    t: u64,
    cfg: &TrainConfig,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    let base = match total_loss(batch, params, t, cfg, None) {
        Ok(base) => base,
        Err(e) if e.is_numerical() => {
            return Ok(GradCheckReport {
                max_rel_error: f64::INFINITY,
                checked: 0,
                worst_index: 0,
                analytic: f64::NAN,
                numeric: f64::NAN,
            })
        }
        Err(e) => return Err(e),
    };
    let theta = params.to_flat();
    let analytic = base.grads.to_flat();
    let offset = params.tau_offset();
    let steps: Vec<f64> = coords
        .iter()
        .map(|&i| {
            if i >= offset && theta[i] != 0.0 {
                h * theta[i].abs().min(1.0)
            } else {
                h
            }
        })
        .collect();
    let mut probe = params.clone();
    check_gradient(
        |x| {
            probe.set_flat(x)?;
            Ok(total_loss(batch, &probe, t, cfg, Some(&base.frozen))?
                .record
                .loss_total)
        },
        &theta,
        &analytic,
        coords,
        &steps,
    )
}

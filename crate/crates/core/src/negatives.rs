//! Similarity-matrix assembly, quantile negative masking, the mask-ratio
//! curriculum, and the masked debiased contrastive loss.

use serde::{Deserialize, Serialize};

use crate::calibration::{check_unit, pair_temperature};
use crate::error::{contract, Result};
use crate::numerics::{dot, Matrix};

/// Instance temperatures for every item in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTemperatures {
    pub queries: Vec<f64>,
    pub targets: Vec<f64>,
    /// Row-major `B × K`: entry `i * K + k` belongs to query `i`'s `k`-th hard negative.
    pub hard_negatives: Vec<f64>,
}

impl BatchTemperatures {
    pub fn uniform(batch: usize, hard: usize, tau: f64) -> Self {
        BatchTemperatures {
            queries: vec![tau; batch],
            targets: vec![tau; batch],
            hard_negatives: vec![tau; batch * hard],
        }
    }
}

/// Calibrated logits for a batch: `B` rows and `B + K` columns.
///
/// Column `j < B` scores query `i` against target `j`; column `B + k` scores
/// it against its own `k`-th hard negative. The diagonal holds positives.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub logits: Matrix,
    /// Pair temperature used for each entry.
    pub pair_temps: Matrix,
    pub batch: usize,
    pub hard: usize,
}

impl SimilarityMatrix {
    /// Wrap precomputed logits, e.g. for testing the loss on its own.
    pub fn from_logits(logits: Matrix, hard: usize) -> Result<Self> {
        let batch = logits.rows();
        if logits.cols() != batch + hard {
            return Err(contract(format!(
                "similarity matrix of {batch} rows needs {} columns, got {}",
                batch + hard,
                logits.cols()
            )));
        }
        if !logits.is_finite() {
            return Err(contract("similarity matrix has non-finite entries"));
        }
        let pair_temps = Matrix::from_vec(batch, batch + hard, vec![1.0; batch * (batch + hard)])?;
        Ok(SimilarityMatrix {
            logits,
            pair_temps,
            batch,
            hard,
        })
    }

    pub fn width(&self) -> usize {
        self.batch + self.hard
    }

    pub fn positive(&self, i: usize) -> f64 {
        self.logits[(i, i)]
    }
}

pub fn build_similarity_matrix(
    queries: &Matrix,
    targets: &Matrix,
    hard_negatives: &Matrix,
    temps: &BatchTemperatures,
) -> Result<SimilarityMatrix> {
    let b = queries.rows();
    let d = queries.cols();
    if b < 2 {
        return Err(contract(format!("similarity matrix needs B >= 2, got {b}")));
    }
    if targets.shape() != (b, d) {
        return Err(contract(format!(
            "targets shape {:?} does not match queries {:?}",
            targets.shape(),
            queries.shape()
        )));
    }
    if !hard_negatives.rows().is_multiple_of(b)
        || (hard_negatives.rows() > 0 && hard_negatives.cols() != d)
    {
        return Err(contract(format!(
            "hard negatives shape {:?} is not (B*K) x {d} for B = {b}",
            hard_negatives.shape()
        )));
    }
    let k = hard_negatives.rows() / b;
    if temps.queries.len() != b || temps.targets.len() != b || temps.hard_negatives.len() != b * k {
        return Err(contract("temperature counts do not match the batch layout"));
    }
    for (i, row) in queries.row_iter().enumerate() {
        check_unit(row, &format!("query {i}"))?;
    }
    for (i, row) in targets.row_iter().enumerate() {
        check_unit(row, &format!("target {i}"))?;
    }
    for (i, row) in hard_negatives.row_iter().enumerate() {
        check_unit(row, &format!("hard negative {i}"))?;
    }

    let width = b + k;
    let mut logits = Matrix::zeros(b, width);
    let mut pair_temps = Matrix::zeros(b, width);
    for i in 0..b {
        let q = queries.row(i);
        for j in 0..width {
            let (item, tau_item) = if j < b {
                (targets.row(j), temps.targets[j])
            } else {
                let idx = i * k + (j - b);
                (hard_negatives.row(idx), temps.hard_negatives[idx])
            };
            let tau = pair_temperature(temps.queries[i], tau_item)?;
            logits[(i, j)] = dot(q, item) / tau;
            pair_temps[(i, j)] = tau;
        }
    }
    Ok(SimilarityMatrix {
        logits,
        pair_temps,
        batch: b,
        hard: k,
    })
}

/// Linear mask-ratio schedule with a flat warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub rho_init: f64,
    pub rho_final: f64,
    /// Step after which the ratio starts rising.
    pub t0: u64,
    /// Total optimizer steps.
    pub total: u64,
}

impl CurriculumSchedule {
    pub fn new(rho_init: f64, rho_final: f64, t0: u64, total: u64) -> Result<Self> {
        let s = CurriculumSchedule {
            rho_init,
            rho_final,
            t0,
            total,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("rho_init", self.rho_init), ("rho_final", self.rho_final)] {
            if !(0.0..1.0).contains(&r) {
                return Err(contract(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.t0 >= self.total {
            return Err(contract(format!(
                "warmup cutoff t0 = {} must be below total steps {}",
                self.t0, self.total
            )));
        }
        Ok(())
    }
}

/// `ρ_init + (ρ_final − ρ_init) · clip((t − t0) / (T − t0), 0, 1)`.
pub fn curriculum_ratio(t: u64, sched: &CurriculumSchedule) -> f64 {
    if t <= sched.t0 {
        return sched.rho_init;
    }
    if t >= sched.total {
        return sched.rho_final;
    }
    let frac = (t - sched.t0) as f64 / (sched.total - sched.t0) as f64;
    sched.rho_init + (sched.rho_final - sched.rho_init) * frac.clamp(0.0, 1.0)
}

/// Number of negatives kept per row: `max(1, ⌊(1 − ρ)(B + K − 1)⌋)`.
///
/// A relative slack of 1e-9 absorbs rounding in products that are integers
/// in exact arithmetic (for example `0.7 · 10`).
pub fn kept_negatives(rho: f64, batch: usize, hard: usize) -> usize {
    let candidates = batch + hard - 1;
    let raw = (1.0 - rho) * candidates as f64;
    let k = (raw + 1e-9 * raw.abs().max(1.0)).floor() as usize;
    k.clamp(1, candidates)
}

/// Boolean selection of the hardest negatives per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeMask {
    pub batch: usize,
    pub width: usize,
    pub per_row: usize,
    keep: Vec<bool>,
}

impl NegativeMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.width + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.width..(i + 1) * self.width]
    }

    /// Column indices kept in row `i`, ascending.
    pub fn kept(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(j, _)| j)
            .collect()
    }

    /// Mask that keeps every off-diagonal entry.
    pub fn all_negatives(batch: usize, hard: usize) -> Self {
        let width = batch + hard;
        let keep = (0..batch * width)
            .map(|idx| idx / width != idx % width)
            .collect();
        NegativeMask {
            batch,
            width,
            per_row: width - 1,
            keep,
        }
    }
}

/// Keep the `k` largest off-positive logits in each row. Ties go to the lower
/// column index.
pub fn negative_mask(s: &SimilarityMatrix, rho: f64) -> Result<NegativeMask> {
    if !(0.0..1.0).contains(&rho) {
        return Err(contract(format!(
            "mask ratio must lie in [0, 1), got {rho}"
        )));
    }
    let (b, width) = (s.batch, s.width());
    let k = kept_negatives(rho, b, s.hard);
    let mut keep = vec![false; b * width];
    let mut candidates: Vec<usize> = Vec::with_capacity(width);
    for i in 0..b {
        let row = s.logits.row(i);
        candidates.clear();
        candidates.extend((0..width).filter(|&j| j != i));
        candidates.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &j in &candidates[..k] {
            keep[i * width + j] = true;
        }
    }
    Ok(NegativeMask {
        batch: b,
        width,
        per_row: k,
        keep,
    })
}

/// Loss value, gradient with respect to the logits, and clamp telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct DclOutput {
    pub loss: f64,
    /// `∂L/∂S`, zero outside the positives and the kept negatives.
    pub grad: Matrix,
    /// Rows whose debiased negative mass hit the `ε` floor.
    pub clamped_rows: usize,
}

/// Masked debiased contrastive loss over a batch.
///
/// Per row, `Ñ = max(Σ_kept exp(S_ij) − γ₊ exp(S_ii), ε)` and the row loss is
/// `−log(exp(S_ii) / (exp(S_ii) + Ñ))`; the batch loss is the row mean. Rows
/// are evaluated after subtracting their maximum over the positive and kept
/// negatives.
pub fn dcl_loss(
    s: &SimilarityMatrix,
    mask: &NegativeMask,
    gamma_plus: f64,
    epsilon: f64,
) -> Result<DclOutput> {
    if !(0.0..1.0).contains(&gamma_plus) {
        return Err(contract(format!(
            "gamma_plus must lie in [0, 1), got {gamma_plus}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let (b, width) = (s.batch, s.width());
    if mask.batch != b || mask.width != width {
        return Err(contract("mask shape does not match the similarity matrix"));
    }
    let ln_eps = epsilon.ln();
    let mut grad = Matrix::zeros(b, width);
    let mut total = 0.0;
    let mut clamped_rows = 0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        if mask.get(i, i) {
            return Err(contract(format!("mask selects the positive in row {i}")));
        }
        let row = s.logits.row(i);
        let pos = row[i];
        let mut shift = pos;
        for (j, &x) in row.iter().enumerate() {
            if mask.get(i, j) && x > shift {
                shift = x;
            }
        }
        let pos_exp = (pos - shift).exp();
        let mut neg_sum = 0.0;
        for (j, &x) in row.iter().enumerate() {
            if mask.get(i, j) {
                neg_sum += (x - shift).exp();
            }
        }
        let debiased = neg_sum - gamma_plus * pos_exp;
        // Compare against ε in the unshifted scale: Ñ·e^shift < ε.
        let clamped = debiased <= 0.0 || debiased.ln() + shift < ln_eps;
        let n_tilde = if clamped {
            (ln_eps - shift).exp()
        } else {
            debiased
        };
        let z = pos_exp + n_tilde;
        total += z.ln() - (pos - shift);

        let g = grad.row_mut(i);
        if clamped {
            clamped_rows += 1;
            g[i] = (-1.0 + pos_exp / z) * inv_b;
        } else {
            g[i] = (-1.0 + (1.0 - gamma_plus) * pos_exp / z) * inv_b;
            for (j, &x) in row.iter().enumerate() {
                if mask.get(i, j) {
                    g[j] = (x - shift).exp() / z * inv_b;
                }
            }
        }
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(crate::Error::Numerical(format!(
            "debiased contrastive loss is not finite ({loss})"
        )));
    }
    Ok(DclOutput {
        loss,
        grad,
        clamped_rows,
    })
}

//! Batch whitening, covariance alignment, and embedding-space diagnostics.
//!
//! The whitening transform is fitted on the row concatenation of query and
//! target embeddings and applied to both. [`coral_loss`] then penalizes the
//! squared Frobenius gap between the two whitened covariances. The diagnostics
//! (centroid gap, covariance gap, shared-basis PCA with 2σ ellipses, and a
//! random-projection covariance-difference heatmap) compare two embedding
//! clouds without training anything.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{covariance, frobenius_distance, gaussian_matrix, sym_eig, Matrix};

/// Jitter added to the covariance before inversion.
pub const DEFAULT_JITTER: f64 = 1e-4;

/// Affine map `x ↦ map · (x − mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    pub map: Matrix,
}

impl WhiteningTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// ZCA whitening `(Cov + δI)^{-1/2}` fitted on `[Q; P]`.
pub fn fit_whitening(q: &Matrix, p: &Matrix, jitter: f64) -> Result<WhiteningTransform> {
    fit_whitening_grouped(q, p, jitter, 1)
}

/// Like [`fit_whitening`], but contiguous feature groups of equal size are
/// whitened independently (block-diagonal map). `groups` must divide `D`.
pub fn fit_whitening_grouped(
    q: &Matrix,
    p: &Matrix,
    jitter: f64,
    groups: usize,
) -> Result<WhiteningTransform> {
    if q.cols() != p.cols() {
        return Err(contract(format!(
            "whitening inputs differ in width: {} vs {}",
            q.cols(),
            p.cols()
        )));
    }
    if !(jitter >= 0.0) {
        return Err(contract(format!(
            "jitter must be non-negative, got {jitter}"
        )));
    }
    let d = q.cols();
    if groups == 0 || !d.is_multiple_of(groups) {
        return Err(contract(format!(
            "{groups} whitening groups do not evenly split {d} features"
        )));
    }
    let x = q.vstack(p)?;
    if x.rows() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "whitening needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    let mean = x.column_means();
    let cov = covariance(&x)?;
    if !cov.is_finite() {
        return Err(Error::Numerical(
            "whitening covariance is not finite".into(),
        ));
    }
    let size = d / groups;
    let mut map = Matrix::zeros(d, d);
    for g in 0..groups {
        let lo = g * size;
        let mut block = Matrix::zeros(size, size);
        for a in 0..size {
            for b in 0..size {
                block[(a, b)] = cov[(lo + a, lo + b)];
            }
        }
        let eig = sym_eig(&block)?;
        let top = eig.values.last().copied().unwrap_or(0.0).max(0.0);
        for &l in &eig.values {
            let v = (l + jitter).max(jitter);
            if !(v > 0.0) || !v.is_finite() || (jitter == 0.0 && l <= 1e-12 * top) {
                return Err(Error::Numerical(format!(
                    "covariance is singular (eigenvalue {l:e}) and no jitter was given"
                )));
            }
        }
        let inv_sqrt = eig.reconstruct_with(|l| 1.0 / (l + jitter).max(jitter).sqrt());
        for a in 0..size {
            for b in 0..size {
                map[(lo + a, lo + b)] = inv_sqrt[(a, b)];
            }
        }
    }
    Ok(WhiteningTransform { mean, map })
}

/// `(X − mean) · mapᵀ` applied row-wise.
pub fn apply_whitening(w: &WhiteningTransform, x: &Matrix) -> Result<Matrix> {
    if x.cols() != w.dim() {
        return Err(contract(format!(
            "whitening fitted on width {}, got {}",
            w.dim(),
            x.cols()
        )));
    }
    x.center(&w.mean).matmul(&w.map.transpose())
}

/// CORAL loss and its gradients with respect to both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoralOutput {
    pub loss: f64,
    pub grad_q: Matrix,
    pub grad_p: Matrix,
}

/// `‖Cov(Q̂) − Cov(P̂)‖²_F / (4D²)`.
pub fn coral_loss(q_hat: &Matrix, p_hat: &Matrix) -> Result<CoralOutput> {
    if q_hat.cols() != p_hat.cols() {
        return Err(contract(format!(
            "CORAL inputs differ in width: {} vs {}",
            q_hat.cols(),
            p_hat.cols()
        )));
    }
    let d = q_hat.cols() as f64;
    let cq = covariance(q_hat)?;
    let cp = covariance(p_hat)?;
    let diff = cq.sub(&cp)?;
    let fro = diff.frobenius_norm();
    let loss = fro * fro / (4.0 * d * d);
    // ∂L/∂Cov(Q̂) = diff / (2D²); ∂L/∂X = 2 Xc G / (n − 1) for a symmetric G.
    let g = diff.scale(1.0 / (2.0 * d * d));
    let grad_of = |x: &Matrix, sign: f64| -> Result<Matrix> {
        let xc = x.center(&x.column_means());
        Ok(xc.matmul(&g)?.scale(sign * 2.0 / (x.rows() - 1) as f64))
    };
    Ok(CoralOutput {
        loss,
        grad_q: grad_of(q_hat, 1.0)?,
        grad_p: grad_of(p_hat, -1.0)?,
    })
}

/// `‖μ_Q − μ_P‖₂`.
pub fn centroid_gap(q: &Matrix, p: &Matrix) -> Result<f64> {
    if q.rows() == 0 || p.rows() == 0 {
        return Err(contract("centroid gap of an empty set"));
    }
    if q.cols() != p.cols() {
        return Err(contract(format!(
            "centroid gap width mismatch: {} vs {}",
            q.cols(),
            p.cols()
        )));
    }
    let (mq, mp) = (q.column_means(), p.column_means());
    Ok(mq
        .iter()
        .zip(&mp)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `‖Cov(Q) − Cov(P)‖_F`.
pub fn covariance_gap(q: &Matrix, p: &Matrix) -> Result<f64> {
    if q.cols() != p.cols() {
        return Err(contract(format!(
            "covariance gap width mismatch: {} vs {}",
            q.cols(),
            p.cols()
        )));
    }
    frobenius_distance(&covariance(q)?, &covariance(p)?)
}

/// One embedding set projected into the shared PCA plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSet {
    pub points: Vec<[f64; 2]>,
    pub ellipse: Ellipse,
}

/// Mean and covariance of a 2D cloud, plus its 2σ ellipse axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    /// Semi-axis lengths `2·√λ`, major first.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis in radians.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaOverlap {
    /// `D × 2`, first column is the leading component.
    pub basis: Matrix,
    pub origin: Vec<f64>,
    /// Variance of the union along each component.
    pub explained_variance: [f64; 2],
    /// In input order: `runs[0].0, runs[0].1, runs[1].0, ...`.
    pub sets: Vec<ProjectedSet>,
}

/// Fit one 2-component PCA basis on the union of every supplied set and
/// project each set into it.
pub fn pca_overlap(runs: &[(&Matrix, &Matrix)]) -> Result<PcaOverlap> {
    let sets: Vec<&Matrix> = runs.iter().flat_map(|(q, p)| [*q, *p]).collect();
    let d = sets
        .first()
        .map(|m| m.cols())
        .ok_or_else(|| contract("pca_overlap needs at least one run"))?;
    if sets.iter().any(|m| m.cols() != d) {
        return Err(contract("pca_overlap inputs must share one width"));
    }
    let mut union = Matrix::zeros(0, d);
    for m in &sets {
        union = union.vstack(m)?;
    }
    if union.rows() < 3 {
        return Err(Error::DegenerateBatch(format!(
            "pca_overlap needs at least 3 rows, got {}",
            union.rows()
        )));
    }
    if d < 2 {
        return Err(Error::Numerical(
            "pca_overlap needs at least 2 features".into(),
        ));
    }
    let origin = union.column_means();
    let eig = sym_eig(&covariance(&union)?)?;
    let (l1, l2) = (eig.values[d - 1], eig.values[d - 2]);
    if !(l2 > 1e-12 * l1.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical(format!(
            "union has rank below 2 (eigenvalues {l1:e}, {l2:e})"
        )));
    }
    let mut basis = Matrix::zeros(d, 2);
    for r in 0..d {
        basis[(r, 0)] = eig.vectors[(r, d - 1)];
        basis[(r, 1)] = eig.vectors[(r, d - 2)];
    }
    let sets = sets
        .iter()
        .map(|m| {
            let proj = m.center(&origin).matmul(&basis)?;
            let points: Vec<[f64; 2]> = proj.row_iter().map(|r| [r[0], r[1]]).collect();
            Ok(ProjectedSet {
                ellipse: ellipse_of(&proj)?,
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PcaOverlap {
        basis,
        origin,
        explained_variance: [l1, l2],
        sets,
    })
}

fn ellipse_of(points: &Matrix) -> Result<Ellipse> {
    let mean = points.column_means();
    let cov = if points.rows() >= 2 {
        covariance(points)?
    } else {
        Matrix::zeros(2, 2)
    };
    let eig = sym_eig(&cov)?;
    let major = [eig.vectors[(0, 1)], eig.vectors[(1, 1)]];
    Ok(Ellipse {
        center: [mean[0], mean[1]],
        covariance: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        semi_axes: [
            2.0 * eig.values[1].max(0.0).sqrt(),
            2.0 * eig.values[0].max(0.0).sqrt(),
        ],
        angle: major[1].atan2(major[0]),
    })
}

/// Entrywise magnitude of the projected covariance difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovDiffHeatmap {
    pub heatmap: Matrix,
    pub frobenius: f64,
}

/// Project `Cov(Q) − Cov(P)` with a seeded Gaussian `D × k` matrix scaled by
/// `1/√k` and report `|Rᵀ Δ R|` entrywise.
pub fn covdiff_heatmap(q: &Matrix, p: &Matrix, k: usize, seed: u64) -> Result<CovDiffHeatmap> {
    if k == 0 {
        return Err(contract("heatmap projection needs k >= 1"));
    }
    let r = gaussian_matrix(q.cols(), k, seed).scale(1.0 / (k as f64).sqrt());
    covdiff_heatmap_with_projection(q, p, &r)
}

/// [`covdiff_heatmap`] with an explicit projection (used unscaled).
pub fn covdiff_heatmap_with_projection(
    q: &Matrix,
    p: &Matrix,
    projection: &Matrix,
) -> Result<CovDiffHeatmap> {
    if q.cols() != p.cols() || projection.rows() != q.cols() {
        return Err(contract(format!(
            "heatmap shapes disagree: Q {:?}, P {:?}, R {:?}",
            q.shape(),
            p.shape(),
            projection.shape()
        )));
    }
    let diff = covariance(q)?.sub(&covariance(p)?)?;
    let projected = projection.transpose().matmul(&diff)?.matmul(projection)?;
    Ok(CovDiffHeatmap {
        frobenius: projected.frobenius_norm(),
        heatmap: projected.map(f64::abs),
    })
}

/// Summary of the query/target mismatch for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub centroid_gap: f64,
    pub covariance_gap: f64,
    pub heatmap_frobenius: f64,
}

pub fn diagnostics(
    q: &Matrix,
    p: &Matrix,
    heatmap_dim: usize,
    seed: u64,
) -> Result<DiagnosticsReport> {
    Ok(DiagnosticsReport {
        centroid_gap: centroid_gap(q, p)?,
        covariance_gap: covariance_gap(q, p)?,
        heatmap_frobenius: covdiff_heatmap(q, p, heatmap_dim, seed)?.frobenius,
    })
}

/// Text renderings of the diagnostics.
pub mod export {
    use std::fmt::Write;

    use super::{PcaOverlap, ProjectedSet};
    use crate::numerics::Matrix;

    /// Scientific notation with 9 significant digits.
    pub fn sig9(x: f64) -> String {
        format!("{x:.8e}")
    }

    /// One line per row, comma separated, no header.
    pub fn heatmap_csv(m: &Matrix) -> String {
        let mut out = String::new();
        for row in m.row_iter() {
            let cells: Vec<String> = row.iter().map(|&x| sig9(x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// `set_id,x,y` rows for every projected point.
    pub fn pca_points_csv(pca: &PcaOverlap, labels: &[String]) -> String {
        let mut out = String::from("set_id,x,y\n");
        for (set, label) in pca.sets.iter().zip(labels) {
            for p in &set.points {
                let _ = writeln!(out, "{label},{},{}", sig9(p[0]), sig9(p[1]));
            }
        }
        out
    }

    const PALETTE: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];

    /// Scatter plot with 2σ ellipses. Contains no timestamps.
    pub fn pca_svg(pca: &PcaOverlap, labels: &[String]) -> String {
        let (w, h, pad) = (640.0, 640.0, 40.0);
        let all = pca.sets.iter().flat_map(|s| s.points.iter());
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in all.clone() {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let sx = |x: f64| pad + (x - lo[0]) / span * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - lo[1]) / span * (h - 2.0 * pad);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (i, (set, label)) in pca.sets.iter().zip(labels).enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.35">"#);
            for p in &set.points {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#,
                    sx(p[0]),
                    sy(p[1])
                );
            }
            let _ = writeln!(out, "</g>");
            out.push_str(&ellipse_svg(set, color, span, w - 2.0 * pad, &sx, &sy));
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-size="12" fill="{color}">{label}</text>"#,
                pad,
                16.0 + 14.0 * i as f64
            );
        }
        out.push_str("</svg>\n");
        out
    }

    fn ellipse_svg(
        set: &ProjectedSet,
        color: &str,
        span: f64,
        extent: f64,
        sx: &dyn Fn(f64) -> f64,
        sy: &dyn Fn(f64) -> f64,
    ) -> String {
        let e = &set.ellipse;
        let scale = extent / span;
        format!(
            r#"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({:.3} {:.2} {:.2})" fill="none" stroke="{color}" stroke-width="2"/>
"#,
            sx(e.center[0]),
            sy(e.center[1]),
            e.semi_axes[0] * scale,
            e.semi_axes[1] * scale,
            -e.angle.to_degrees(),
            sx(e.center[0]),
            sy(e.center[1]),
        )
    }
}

//! Synthetic omni-modal world and the toy encoder trained on it.
//!
//! Each tuple shares a Gaussian latent between query and positive. Every
//! modality renders the latent through its own fixed linear map with a
//! prescribed singular-value spread and adds anisotropic Gaussian noise, so
//! modalities differ in both sharpness and second-order geometry. Hard
//! negatives come from latents correlated with the query's at a configurable
//! closeness.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{Modality, ModalityComposition, TemperatureVector, NUM_MODALITIES};
use crate::error::{contract, Error, Result};
use crate::numerics::{
    dot, gaussian_matrix_from, gaussian_vec, norm, seeded_rng, sym_eig, Matrix, SeededRng,
};

/// Format tag written in every dataset header.
pub const DATASET_FORMAT: &str = "omni-synth/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub latent_dim: usize,
    /// Raw feature width of every modality.
    pub feature_dim: usize,
    /// Shared embedding width `D`.
    pub embed_dim: usize,
    /// Per-modality noise scale, ordered T, I, A, V.
    pub noise_scale: [f64; NUM_MODALITIES],
    /// Per-modality condition number of the rendering map and of the noise covariance.
    pub anisotropy: [f64; NUM_MODALITIES],
    /// Latent correlation between a query and its hard negatives, in `[0, 1)`.
    pub hard_negative_closeness: f64,
    /// Hard negatives per tuple (`K`).
    pub hard_negatives: usize,
    /// Number of tuples generated.
    pub pairs: usize,
    /// Fraction of tuples held out for evaluation.
    pub eval_fraction: f64,
    /// Sampling weights keyed by composition, e.g. `{"T": 1.0, "AV": 0.5}`.
    pub composition_weights: BTreeMap<String, f64>,
    /// Separate weights for positives and hard negatives; `None` samples
    /// them from `composition_weights` like the queries.
    pub target_composition_weights: Option<BTreeMap<String, f64>>,
}

impl Default for WorldConfig {
    /// The reference world: audio is 4× noisier with an anisotropic render,
    /// queries lean on text and targets on audio/video.
    fn default() -> Self {
        let weights =
            |pairs: &[(&str, f64)]| pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        WorldConfig {
            latent_dim: 16,
            feature_dim: 24,
            embed_dim: 32,
            noise_scale: [1.0, 1.0, 4.0, 1.0],
            anisotropy: [1.0, 1.0, 4.0, 1.0],
            hard_negative_closeness: 0.8,
            hard_negatives: 2,
            pairs: 4000,
            eval_fraction: 0.1,
            composition_weights: weights(&[
                ("T", 3.0),
                ("I", 1.0),
                ("A", 1.0),
                ("V", 1.0),
                ("TI", 1.0),
            ]),
            target_composition_weights: Some(weights(&[
                ("T", 1.0),
                ("I", 1.0),
                ("A", 2.0),
                ("V", 2.0),
                ("AV", 1.0),
            ])),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(contract("world dimensions must be at least 1"));
        }
        for m in Modality::ALL {
            let (s, a) = (self.noise_scale[m.index()], self.anisotropy[m.index()]);
            if !(s >= 0.0 && s.is_finite()) {
                return Err(contract(format!(
                    "noise_scale for {m} must be finite and non-negative, got {s}"
                )));
            }
            if !(a >= 1.0 && a.is_finite()) {
                return Err(contract(format!(
                    "anisotropy for {m} must be finite and >= 1, got {a}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.hard_negative_closeness) {
            return Err(contract(format!(
                "hard_negative_closeness must lie in [0, 1), got {}",
                self.hard_negative_closeness
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(contract(format!(
                "eval_fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.pairs < 2 {
            return Err(contract("pairs must be at least 2"));
        }
        self.composition_table()?;
        self.target_composition_table().map(|_| ())
    }

    /// Parsed query composition weights in a canonical order.
    pub fn composition_table(&self) -> Result<Vec<(ModalityComposition, f64)>> {
        parse_weights(&self.composition_weights)
    }

    /// Parsed target composition weights in a canonical order.
    pub fn target_composition_table(&self) -> Result<Vec<(ModalityComposition, f64)>> {
        parse_weights(
            self.target_composition_weights
                .as_ref()
                .unwrap_or(&self.composition_weights),
        )
    }

    pub fn eval_count(&self) -> usize {
        ((self.pairs as f64 * self.eval_fraction).round() as usize).clamp(1, self.pairs - 1)
    }
}

fn parse_weights(weights: &BTreeMap<String, f64>) -> Result<Vec<(ModalityComposition, f64)>> {
    let mut merged: BTreeMap<ModalityComposition, f64> = BTreeMap::new();
    for (key, &w) in weights {
        let c: ModalityComposition = key.parse()?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(contract(format!(
                "composition weight for {key:?} must be finite and non-negative"
            )));
        }
        *merged.entry(c).or_default() += w;
    }
    if merged.values().all(|&w| w == 0.0) {
        return Err(contract("composition weights are all zero"));
    }
    Ok(merged.into_iter().collect())
}

/// Fixed per-world rendering maps and noise factors.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    /// `feature_dim × latent_dim` per modality.
    pub render: Vec<Matrix>,
    /// `feature_dim × feature_dim` per modality; noise is `scale · factor · ξ`.
    pub noise_factor: Vec<Matrix>,
    compositions: Vec<(ModalityComposition, f64)>,
    target_compositions: Vec<(ModalityComposition, f64)>,
}

/// Orthonormalize the columns of `m` (modified Gram–Schmidt).
fn orthonormal_columns(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| m.column(j)).collect();
    for j in 0..c {
        for i in 0..j {
            let proj = dot(&cols[i], &cols[j]);
            let (head, tail) = cols.split_at_mut(j);
            for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                *x -= proj * y;
            }
        }
        let n = norm(&cols[j]);
        cols[j].iter_mut().for_each(|x| *x /= n);
    }
    let mut out = Matrix::zeros(r, c);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..r {
            out[(i, j)] = col[i];
        }
    }
    out
}

/// Geometric spread from 1 to `cond`, rescaled so the squares average to 1.
fn spread(n: usize, cond: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                cond.powf(-(i as f64) / (n - 1) as f64)
            }
        })
        .collect();
    let ms = raw.iter().map(|x| x * x).sum::<f64>() / n as f64;
    raw.iter().map(|x| x / ms.sqrt()).collect()
}

fn draw(table: &[(ModalityComposition, f64)], rng: &mut SeededRng) -> ModalityComposition {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(c, w) in table {
        if u < w {
            return c;
        }
        u -= w;
    }
    // Rounding can leave u just above the last bucket.
    table
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|(c, _)| *c)
        .unwrap()
}

impl World {
    pub fn new(config: &WorldConfig, rng: &mut SeededRng) -> Result<World> {
        config.validate()?;
        let (f, l) = (config.feature_dim, config.latent_dim);
        let mut render = Vec::with_capacity(NUM_MODALITIES);
        let mut noise_factor = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let cond = config.anisotropy[m.index()];
            // Render map U·diag(σ)·Vᵀ, rank min(F, L). Mean squared singular
            // value F/min(F, L) gives unit variance per feature.
            let r = f.min(l);
            let u = orthonormal_columns(&gaussian_matrix_from(f, r, rng));
            let v = orthonormal_columns(&gaussian_matrix_from(l, r, rng));
            let sigma: Vec<f64> = spread(r, cond)
                .iter()
                .map(|s| s * (f as f64 / r as f64).sqrt())
                .collect();
            let mut us = u.clone();
            for i in 0..f {
                for j in 0..r {
                    us[(i, j)] *= sigma[j];
                }
            }
            render.push(us.matmul(&v.transpose())?);

            let o = orthonormal_columns(&gaussian_matrix_from(f, f, rng));
            let s = spread(f, cond.sqrt());
            let mut factor = o;
            for i in 0..f {
                for j in 0..f {
                    factor[(i, j)] *= s[j];
                }
            }
            noise_factor.push(factor);
        }
        Ok(World {
            compositions: config.composition_table()?,
            target_compositions: config.target_composition_table()?,
            config: config.clone(),
            render,
            noise_factor,
        })
    }

    /// Draw a query composition.
    pub fn sample_composition(&self, rng: &mut SeededRng) -> ModalityComposition {
        draw(&self.compositions, rng)
    }

    /// Draw a composition for a positive or hard negative.
    pub fn sample_target_composition(&self, rng: &mut SeededRng) -> ModalityComposition {
        draw(&self.target_compositions, rng)
    }

    /// Features for one modality: `A_m z + noise_m · L_m ξ`.
    pub fn render_modality(&self, z: &[f64], m: Modality, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let mut x = self.render[m.index()].mul_vec(z)?;
        let scale = self.config.noise_scale[m.index()];
        if scale > 0.0 {
            let xi = gaussian_vec(self.config.feature_dim, rng);
            let eta = self.noise_factor[m.index()].mul_vec(&xi)?;
            for (a, b) in x.iter_mut().zip(&eta) {
                *a += scale * b;
            }
        }
        Ok(x)
    }

    /// Render a latent under a composition.
    pub fn render(
        &self,
        z: &[f64],
        composition: ModalityComposition,
        rng: &mut SeededRng,
    ) -> Result<Item> {
        let features = composition
            .modalities()
            .map(|m| self.render_modality(z, m, rng))
            .collect::<Result<_>>()?;
        Ok(Item {
            composition,
            features,
        })
    }
}

/// One input: a composition and the features of each active modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub composition: ModalityComposition,
    /// One vector per active modality, in T, I, A, V order.
    pub features: Vec<Vec<f64>>,
}

impl Item {
    pub fn modality_features(&self) -> impl Iterator<Item = (Modality, &[f64])> {
        self.composition
            .modalities()
            .zip(self.features.iter().map(Vec::as_slice))
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.features.len() != self.composition.len() {
            return Err(contract(format!(
                "item with composition {} carries {} feature vectors",
                self.composition,
                self.features.len()
            )));
        }
        if self
            .features
            .iter()
            .any(|f| f.len() != feature_dim || f.iter().any(|x| !x.is_finite()))
        {
            return Err(contract(format!(
                "item features must be {feature_dim} finite values per modality"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    /// Latent identity; unique across the dataset.
    pub id: u64,
    pub query: Item,
    pub positive: Item,
    pub hard_negatives: Vec<Item>,
}

/// Latents behind one tuple, kept only by the generator.
#[derive(Debug, Clone)]
pub struct TupleLatents {
    pub anchor: Vec<f64>,
    pub hard_negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub config: WorldConfig,
    pub train: usize,
    pub eval: usize,
    /// Hash of the run configuration that produced the file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<TrainingTuple>,
    pub eval: Vec<TrainingTuple>,
}

impl Dataset {
    pub fn hard_negatives(&self) -> usize {
        self.header.config.hard_negatives
    }

    /// Split `count` tuples off the end of the training set.
    pub fn hold_out(&self, count: usize) -> Result<Dataset> {
        if count == 0 || count >= self.train.len() {
            return Err(contract(format!(
                "cannot hold out {count} of {} training tuples",
                self.train.len()
            )));
        }
        let cut = self.train.len() - count;
        let mut header = self.header.clone();
        header.train = cut;
        header.eval = count;
        Ok(Dataset {
            header,
            train: self.train[..cut].to_vec(),
            eval: self.train[cut..].to_vec(),
        })
    }
}

/// Streaming tuple generator for one world.
pub struct Generator {
    pub world: World,
    rng: SeededRng,
    next_id: u64,
}

impl Generator {
    pub fn new(config: &WorldConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let world = World::new(config, &mut rng)?;
        Ok(Generator {
            world,
            rng,
            next_id: 0,
        })
    }

    pub fn sample(&mut self) -> Result<(TrainingTuple, TupleLatents)> {
        let cfg = &self.world.config;
        let c = cfg.hard_negative_closeness;
        let z = gaussian_vec(cfg.latent_dim, &mut self.rng);
        let qc = self.world.sample_composition(&mut self.rng);
        let pc = self.world.sample_target_composition(&mut self.rng);
        let query = self.world.render(&z, qc, &mut self.rng)?;
        let positive = self.world.render(&z, pc, &mut self.rng)?;
        let mut negatives = Vec::with_capacity(cfg.hard_negatives);
        let mut neg_latents = Vec::with_capacity(cfg.hard_negatives);
        for _ in 0..cfg.hard_negatives {
            let xi = gaussian_vec(cfg.latent_dim, &mut self.rng);
            let zn: Vec<f64> = z
                .iter()
                .zip(&xi)
                .map(|(a, b)| c * a + (1.0 - c * c).sqrt() * b)
                .collect();
            let nc = self.world.sample_target_composition(&mut self.rng);
            negatives.push(self.world.render(&zn, nc, &mut self.rng)?);
            neg_latents.push(zn);
        }
        let id = self.next_id;
        self.next_id += 1;
        Ok((
            TrainingTuple {
                id,
                query,
                positive,
                hard_negatives: negatives,
            },
            TupleLatents {
                anchor: z,
                hard_negatives: neg_latents,
            },
        ))
    }
}

/// Generate a full dataset; the last `eval_fraction` of tuples form the eval split.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    let mut gen = Generator::new(config, seed)?;
    let tuples = (0..config.pairs)
        .map(|_| gen.sample().map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let eval_n = config.eval_count();
    let cut = tuples.len() - eval_n;
    let (train, eval) = tuples.split_at(cut);
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            seed,
            config: config.clone(),
            train: train.len(),
            eval: eval.len(),
            config_hash: None,
        },
        train: train.to_vec(),
        eval: eval.to_vec(),
    })
}

/// Per-modality affine projections into the shared space, plus temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `embed_dim × feature_dim` per modality, ordered T, I, A, V.
    pub projection: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
    pub tau: TemperatureVector,
}

impl ModelParams {
    pub fn init(feature_dim: usize, embed_dim: usize, tau_init: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let scale = 1.0 / (feature_dim as f64).sqrt();
        ModelParams {
            projection: (0..NUM_MODALITIES)
                .map(|_| gaussian_matrix_from(embed_dim, feature_dim, &mut rng).scale(scale))
                .collect(),
            bias: vec![vec![0.0; embed_dim]; NUM_MODALITIES],
            tau: TemperatureVector::constant(tau_init),
        }
    }

    /// All-zero parameters with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            projection: self
                .projection
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            bias: self.bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            tau: TemperatureVector::constant(0.0),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.bias[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection[0].cols()
    }

    pub fn num_params(&self) -> usize {
        self.projection
            .iter()
            .map(|p| p.as_slice().len())
            .sum::<usize>()
            + self.bias.iter().map(Vec::len).sum::<usize>()
            + NUM_MODALITIES
    }

    /// Flat index of the first temperature entry; τ occupies the last four slots.
    pub fn tau_offset(&self) -> usize {
        self.num_params() - NUM_MODALITIES
    }

    /// Layout: per modality the projection then the bias, then τ.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (p, b) in self.projection.iter().zip(&self.bias) {
            out.extend_from_slice(p.as_slice());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.tau.0);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (p, b) in self.projection.iter_mut().zip(self.bias.iter_mut()) {
            let n = p.as_slice().len();
            p.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = b.len();
            b.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        self.tau.0.copy_from_slice(&flat[at..]);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    /// Parameters that invert each modality's rendering map exactly, placing
    /// the latent in the first `latent_dim` embedding coordinates. On a
    /// noise-free world every item embeds to its normalized latent.
    pub fn oracle(world: &World, tau: f64) -> Result<Self> {
        let cfg = &world.config;
        if cfg.embed_dim < cfg.latent_dim || cfg.feature_dim < cfg.latent_dim {
            return Err(contract(
                "oracle parameters need embed_dim and feature_dim >= latent_dim",
            ));
        }
        let mut projection = Vec::with_capacity(NUM_MODALITIES);
        for a in &world.render {
            // pinv(A) = (AᵀA)⁻¹Aᵀ
            let ata = a.transpose().matmul(a)?;
            let inv = sym_eig(&ata)?.reconstruct_with(|l| 1.0 / l);
            let pinv = inv.matmul(&a.transpose())?;
            let mut p = Matrix::zeros(cfg.embed_dim, cfg.feature_dim);
            for i in 0..cfg.latent_dim {
                p.row_mut(i).copy_from_slice(pinv.row(i));
            }
            projection.push(p);
        }
        Ok(ModelParams {
            projection,
            bias: vec![vec![0.0; cfg.embed_dim]; NUM_MODALITIES],
            tau: TemperatureVector::constant(tau),
        })
    }
}

/// An embedding and the pre-normalization norm needed for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub embedding: Vec<f64>,
    pub pre_norm: f64,
}

const MIN_PRE_NORM: f64 = 1e-12;

/// Mean of the active modality projections, L2-normalized.
pub fn encode(params: &ModelParams, item: &Item) -> Result<Encoded> {
    let d = params.embed_dim();
    let mut h = vec![0.0; d];
    for (m, f) in item.modality_features() {
        let p = &params.projection[m.index()];
        if f.len() != p.cols() {
            return Err(contract(format!(
                "{m} features have width {}, encoder expects {}",
                f.len(),
                p.cols()
            )));
        }
        for (r, out) in h.iter_mut().enumerate() {
            *out += dot(p.row(r), f) + params.bias[m.index()][r];
        }
    }
    let share = 1.0 / item.composition.len() as f64;
    h.iter_mut().for_each(|x| *x *= share);
    let n = norm(&h);
    if !n.is_finite() {
        return Err(Error::Numerical(format!("pre-normalization norm is {n}")));
    }
    if !(n > MIN_PRE_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok(Encoded {
        embedding: h.iter().map(|x| x / n).collect(),
        pre_norm: n,
    })
}

/// Accumulate `∂L/∂θ` into `grads` given `∂L/∂e` for one encoded item.
pub fn encode_backward(
    item: &Item,
    encoded: &Encoded,
    d_embedding: &[f64],
    grads: &mut ModelParams,
) {
    let e = &encoded.embedding;
    let ge = dot(d_embedding, e);
    let share = 1.0 / item.composition.len() as f64;
    // ∂L/∂h = (g − (g·e) e) / ‖h‖, then each active modality receives share of it.
    let dh: Vec<f64> = d_embedding
        .iter()
        .zip(e)
        .map(|(g, x)| (g - ge * x) / encoded.pre_norm * share)
        .collect();
    for (m, f) in item.modality_features() {
        let gp = &mut grads.projection[m.index()];
        for (r, &dhr) in dh.iter().enumerate() {
            if dhr == 0.0 {
                continue;
            }
            for (g, x) in gp.row_mut(r).iter_mut().zip(f) {
                *g += dhr * x;
            }
        }
        for (g, x) in grads.bias[m.index()].iter_mut().zip(&dh) {
            *g += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::covariance;

    fn small_config() -> WorldConfig {
        WorldConfig {
            pairs: 200,
            ..WorldConfig::default()
        }
    }

    fn comp(s: &str) -> ModalityComposition {
        s.parse().unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config(), 5).unwrap();
        let b = generate_dataset(&small_config(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_config(), 6).unwrap();
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let d = generate_dataset(&small_config(), 1).unwrap();
        assert_eq!(d.eval.len(), 20);
        assert_eq!(d.train.len(), 180);
        let train_ids: std::collections::BTreeSet<u64> = d.train.iter().map(|t| t.id).collect();
        assert!(d.eval.iter().all(|t| !train_ids.contains(&t.id)));
        for t in d.train.iter().chain(&d.eval) {
            assert_eq!(t.hard_negatives.len(), 2);
            t.query.validate(24).unwrap();
        }
    }

    #[test]
    fn text_only_distribution() {
        let cfg = WorldConfig {
            composition_weights: [("T".to_string(), 1.0)].into_iter().collect(),
            target_composition_weights: None,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 2).unwrap();
        for t in d.train.iter().chain(&d.eval) {
            assert_eq!(t.query.composition, comp("T"));
            assert_eq!(t.positive.composition, comp("T"));
            assert!(t.hard_negatives.iter().all(|n| n.composition == comp("T")));
        }
    }

    #[test]
    fn target_weights_apply_to_positives_and_negatives() {
        let cfg = WorldConfig {
            composition_weights: [("T".to_string(), 1.0)].into_iter().collect(),
            target_composition_weights: Some([("AV".to_string(), 1.0)].into_iter().collect()),
            ..small_config()
        };
        let d = generate_dataset(&cfg, 2).unwrap();
        for t in &d.train {
            assert_eq!(t.query.composition, comp("T"));
            assert_eq!(t.positive.composition, comp("AV"));
            assert!(t.hard_negatives.iter().all(|n| n.composition == comp("AV")));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            WorldConfig {
                composition_weights: [("X".to_string(), 1.0)].into_iter().collect(),
                ..small_config()
            },
            WorldConfig {
                composition_weights: [("T".to_string(), 0.0)].into_iter().collect(),
                ..small_config()
            },
            WorldConfig {
                anisotropy: [0.5, 1.0, 1.0, 1.0],
                ..small_config()
            },
            WorldConfig {
                hard_negative_closeness: 1.0,
                ..small_config()
            },
            WorldConfig {
                latent_dim: 0,
                ..small_config()
            },
        ];
        for cfg in bad {
            assert!(generate_dataset(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn independent_hard_negatives_at_zero_closeness() {
        let cfg = WorldConfig {
            hard_negative_closeness: 0.0,
            ..small_config()
        };
        let mut gen = Generator::new(&cfg, 9).unwrap();
        let mut corr = 0.0;
        let n = 1000;
        for _ in 0..n {
            let (_, lat) = gen.sample().unwrap();
            let zn = &lat.hard_negatives[0];
            corr += dot(&lat.anchor, zn) / (norm(&lat.anchor) * norm(zn));
        }
        let mean = corr / n as f64;
        assert!(mean.abs() < 0.05, "mean latent correlation {mean}");
    }

    #[test]
    fn noise_free_render_is_linear_and_repeatable() {
        let cfg = WorldConfig {
            noise_scale: [0.0; 4],
            ..small_config()
        };
        let mut rng = seeded_rng(0);
        let world = World::new(&cfg, &mut rng).unwrap();
        let z = gaussian_vec(16, &mut rng);
        let z2: Vec<f64> = z.iter().map(|x| 3.0 * x).collect();
        let a = world.render(&z, comp("TA"), &mut rng).unwrap();
        let b = world.render(&z, comp("TA"), &mut rng).unwrap();
        assert_eq!(a, b);
        let c = world.render(&z2, comp("TA"), &mut rng).unwrap();
        for (x, y) in a.features[1].iter().zip(&c.features[1]) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_noise_is_well_conditioned() {
        let cfg = WorldConfig {
            anisotropy: [1.0; 4],
            noise_scale: [1.0; 4],
            ..small_config()
        };
        let mut rng = seeded_rng(4);
        let world = World::new(&cfg, &mut rng).unwrap();
        let zero = vec![0.0; 16];
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                world
                    .render_modality(&zero, Modality::Image, &mut rng)
                    .unwrap()
            })
            .collect();
        let eig = sym_eig(&covariance(&Matrix::from_rows(&rows).unwrap()).unwrap()).unwrap();
        let cond = eig.values[23] / eig.values[0];
        assert!((cond - 1.0).abs() < 1.5, "condition number {cond}");
    }

    #[test]
    fn anisotropic_noise_has_prescribed_spread() {
        let s = spread(24, 4.0);
        assert!((s[0] / s[23] - 4.0).abs() < 1e-12);
        assert!((s.iter().map(|x| x * x).sum::<f64>() / 24.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_outputs_unit_vectors() {
        let d = generate_dataset(&small_config(), 3).unwrap();
        let params = ModelParams::init(24, 32, 0.02, 1);
        for t in d.train.iter().take(50) {
            let e = encode(&params, &t.query).unwrap();
            assert!((norm(&e.embedding) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_modality_encoding_is_normalized_affine_map() {
        let params = ModelParams::init(3, 2, 0.02, 2);
        let item = Item {
            composition: comp("I"),
            features: vec![vec![1.0, -2.0, 0.5]],
        };
        let e = encode(&params, &item).unwrap();
        let mut h = params.projection[1].mul_vec(&item.features[0]).unwrap();
        h.iter_mut().zip(&params.bias[1]).for_each(|(a, b)| *a += b);
        let n = norm(&h);
        for (a, b) in e.embedding.iter().zip(&h) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let params = ModelParams::init(3, 2, 0.02, 2);
        let item = Item {
            composition: comp("T"),
            features: vec![vec![0.0; 3]],
        };
        assert!(matches!(
            encode(&params, &item),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn encoder_vjp_matches_finite_differences() {
        let mut rng = seeded_rng(12);
        for trial in 0..10 {
            let (f, d) = (8, 8);
            let params = ModelParams::init(f, d, 0.02, 100 + trial);
            let compositions = ["T", "IA", "TIAV", "V"];
            let c = comp(compositions[trial as usize % 4]);
            let item = Item {
                composition: c,
                features: (0..c.len()).map(|_| gaussian_vec(f, &mut rng)).collect(),
            };
            let u = gaussian_vec(d, &mut rng);
            let v = gaussian_vec(params.num_params(), &mut rng);
            let enc = encode(&params, &item).unwrap();
            let mut grads = params.zeros_like();
            encode_backward(&item, &enc, &u, &mut grads);
            let analytic = dot(&grads.to_flat(), &v);
            let theta = params.to_flat();
            let h = 1e-6;
            let eval = |sign: f64| {
                let mut p = params.clone();
                let moved: Vec<f64> = theta
                    .iter()
                    .zip(&v)
                    .map(|(t, x)| t + sign * h * x)
                    .collect();
                p.set_flat(&moved).unwrap();
                dot(&u, &encode(&p, &item).unwrap().embedding)
            };
            let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-5, "trial {trial}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn oracle_params_recover_latents() {
        let cfg = WorldConfig {
            noise_scale: [0.0; 4],
            ..small_config()
        };
        let mut gen = Generator::new(&cfg, 8).unwrap();
        let params = ModelParams::oracle(&gen.world, 0.02).unwrap();
        for _ in 0..20 {
            let (t, lat) = gen.sample().unwrap();
            let e = encode(&params, &t.positive).unwrap().embedding;
            let n = norm(&lat.anchor);
            for i in 0..16 {
                assert!((e[i] - lat.anchor[i] / n).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn paired_items_are_closer_than_random_ones() {
        let cfg = WorldConfig {
            noise_scale: [0.9; 4],
            ..small_config()
        };
        let mut gen = Generator::new(&cfg, 21).unwrap();
        let params = ModelParams::oracle(&gen.world, 0.02).unwrap();
        let tuples: Vec<TrainingTuple> = (0..600).map(|_| gen.sample().unwrap().0).collect();
        let emb = |it: &Item| encode(&params, it).unwrap().embedding;
        let (mut paired, mut random) = (0.0, 0.0);
        for (i, t) in tuples.iter().enumerate() {
            let q = emb(&t.query);
            paired += dot(&q, &emb(&t.positive));
            random += dot(&q, &emb(&tuples[(i + 1) % tuples.len()].positive));
        }
        let n = tuples.len() as f64;
        assert!(
            paired / n - random / n > 0.05,
            "paired {} random {}",
            paired / n,
            random / n
        );
    }

    #[test]
    fn anisotropy_widens_the_gap_to_text() {
        let gap = |cond: f64| {
            let cfg = WorldConfig {
                anisotropy: [1.0, 1.0, cond, 1.0],
                ..small_config()
            };
            let mut rng = seeded_rng(4);
            let world = World::new(&cfg, &mut rng).unwrap();
            let params = ModelParams::init(cfg.feature_dim, cfg.embed_dim, 0.02, 9);
            let n = 3000;
            let mut text = Matrix::zeros(n, cfg.embed_dim);
            let mut audio = Matrix::zeros(n, cfg.embed_dim);
            for r in 0..n {
                let z = gaussian_vec(cfg.latent_dim, &mut rng);
                let t = world
                    .render(&z, ModalityComposition::single(Modality::Text), &mut rng)
                    .unwrap();
                let a = world
                    .render(&z, ModalityComposition::single(Modality::Audio), &mut rng)
                    .unwrap();
                text.row_mut(r)
                    .copy_from_slice(&encode(&params, &t).unwrap().embedding);
                audio
                    .row_mut(r)
                    .copy_from_slice(&encode(&params, &a).unwrap().embedding);
            }
            crate::geometry::covariance_gap(&text, &audio).unwrap()
        };
        let gaps: Vec<f64> = [1.0, 4.0, 16.0].into_iter().map(gap).collect();
        assert!(gaps[0] < gaps[1] && gaps[1] < gaps[2], "{gaps:?}");
    }

    #[test]
    fn flat_round_trip() {
        let mut p = ModelParams::init(5, 3, 0.02, 1);
        let mut flat = p.to_flat();
        assert_eq!(flat.len(), 4 * (15 + 3) + 4);
        assert_eq!(flat[p.tau_offset()], 0.02);
        flat[0] = 9.0;
        p.set_flat(&flat).unwrap();
        assert_eq!(p.projection[0][(0, 0)], 9.0);
    }
}

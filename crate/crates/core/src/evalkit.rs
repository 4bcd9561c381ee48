//! Retrieval metrics and the evaluation harness.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::geometry::{
    apply_whitening, diagnostics, fit_whitening, DiagnosticsReport, DEFAULT_JITTER,
};
use crate::numerics::{dot, Matrix};
use crate::synth::{encode, Dataset, Item, ModelParams};

/// Candidates for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u64,
    pub candidates: Vec<u64>,
    /// Relevance per candidate, aligned with `candidates`.
    pub relevance: Vec<f64>,
}

impl RankedList {
    pub fn new(query_id: u64, candidates: Vec<u64>, relevance: Vec<f64>) -> Result<Self> {
        let list = RankedList {
            query_id,
            candidates,
            relevance,
        };
        list.validate()?;
        Ok(list)
    }

    /// Rank candidates by descending score, ties broken by ascending id.
    pub fn from_scores(
        query_id: u64,
        scored: &[(u64, f64)],
        relevant: impl Fn(u64) -> f64,
    ) -> Result<Self> {
        let mut order: Vec<(u64, f64)> = scored.to_vec();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let candidates: Vec<u64> = order.iter().map(|c| c.0).collect();
        let relevance = candidates.iter().map(|&c| relevant(c)).collect();
        RankedList::new(query_id, candidates, relevance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.relevance.len() {
            return Err(contract(format!(
                "query {}: {} candidates but {} relevance labels",
                self.query_id,
                self.candidates.len(),
                self.relevance.len()
            )));
        }
        let mut seen = self.candidates.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract(format!(
                "query {}: duplicate candidate ids",
                self.query_id
            )));
        }
        if self
            .relevance
            .iter()
            .any(|&r| !(r >= 0.0) || !r.is_finite())
        {
            return Err(contract(format!(
                "query {}: relevance must be finite and non-negative",
                self.query_id
            )));
        }
        if !self.relevance.iter().any(|&r| r > 0.0) {
            return Err(contract(format!(
                "query {} has no relevant candidate",
                self.query_id
            )));
        }
        Ok(())
    }
}

fn non_empty(ranked: &[RankedList]) -> Result<()> {
    if ranked.is_empty() {
        return Err(contract("no ranked lists to score"));
    }
    ranked.iter().try_for_each(RankedList::validate)
}

/// Fraction of queries whose top candidate is relevant.
pub fn hit_at_1(ranked: &[RankedList]) -> Result<f64> {
    recall_at_k(ranked, 1)
}

/// Fraction of queries with at least one relevant candidate in the top `k`.
pub fn recall_at_k(ranked: &[RankedList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract("k must be at least 1"));
    }
    non_empty(ranked)?;
    let hits = ranked
        .iter()
        .filter(|r| r.relevance.iter().take(k).any(|&x| x > 0.0))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean NDCG@k with gain = relevance and discount `1/log₂(rank+1)`.
pub fn ndcg_at_k(ranked: &[RankedList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract("k must be at least 1"));
    }
    non_empty(ranked)?;
    let dcg = |rels: &[f64]| -> f64 {
        rels.iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| r / ((i + 2) as f64).log2())
            .sum()
    };
    let total: f64 = ranked
        .iter()
        .map(|r| {
            let mut ideal = r.relevance.clone();
            ideal.sort_by(|a, b| b.total_cmp(a));
            dcg(&r.relevance) / dcg(&ideal)
        })
        .sum();
    Ok(total / ranked.len() as f64)
}

/// Similarity used for scoring candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// Cosine on the encoder's normalized embeddings, as in training.
    #[default]
    Raw,
    /// Dot product after whitening fitted on eval queries and positives.
    Whitened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub score: ScoreSpace,
    /// Cutoff for Recall@k besides k = 1.
    pub recall_k: usize,
    pub ndcg_k: usize,
    /// Projected dimension of the covariance-difference heatmap.
    pub heatmap_dim: usize,
    pub heatmap_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            score: ScoreSpace::Raw,
            recall_k: 5,
            ndcg_k: 5,
            heatmap_dim: 8,
            heatmap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hit_at_1: f64,
    pub recall_at_1: f64,
    pub recall_at_k: f64,
    pub recall_k: usize,
    pub ndcg_at_k: f64,
    pub ndcg_k: usize,
    pub queries: usize,
    pub pool_size: usize,
    /// Query-vs-positive geometry on the raw eval embeddings.
    pub diagnostics: DiagnosticsReport,
}

/// Normalized embeddings of eval queries, positives and the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEmbeddings {
    pub queries: Matrix,
    pub positives: Matrix,
    /// Positives first (id = eval index), then hard negatives in tuple order.
    pub pool: Matrix,
}

fn embed(params: &ModelParams, items: &[&Item]) -> Result<Matrix> {
    let mut m = Matrix::zeros(items.len(), params.embed_dim());
    for (r, item) in items.iter().enumerate() {
        m.row_mut(r)
            .copy_from_slice(&encode(params, item)?.embedding);
    }
    Ok(m)
}

pub fn embed_eval(params: &ModelParams, dataset: &Dataset) -> Result<EvalEmbeddings> {
    if dataset.eval.is_empty() {
        return Err(contract("dataset has an empty eval split"));
    }
    let queries = embed(
        params,
        &dataset.eval.iter().map(|t| &t.query).collect::<Vec<_>>(),
    )?;
    let positives = embed(
        params,
        &dataset.eval.iter().map(|t| &t.positive).collect::<Vec<_>>(),
    )?;
    let hard: Vec<&Item> = dataset
        .eval
        .iter()
        .flat_map(|t| t.hard_negatives.iter())
        .collect();
    let pool = if hard.is_empty() {
        positives.clone()
    } else {
        positives.vstack(&embed(params, &hard)?)?
    };
    Ok(EvalEmbeddings {
        queries,
        positives,
        pool,
    })
}

/// Rank the pool for every query; query `i`'s only relevant candidate is `i`.
pub fn rank_pool(queries: &Matrix, pool: &Matrix) -> Result<Vec<RankedList>> {
    if queries.cols() != pool.cols() {
        return Err(contract(format!(
            "query dim {} but pool dim {}",
            queries.cols(),
            pool.cols()
        )));
    }
    if queries.rows() > pool.rows() {
        return Err(contract("pool must contain every query's positive"));
    }
    (0..queries.rows())
        .map(|i| {
            let scored: Vec<(u64, f64)> = pool
                .row_iter()
                .enumerate()
                .map(|(j, c)| (j as u64, dot(queries.row(i), c)))
                .collect();
            RankedList::from_scores(i as u64, &scored, |c| if c == i as u64 { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Encode the eval split, rank the closed candidate pool, and summarize.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    let emb = embed_eval(params, dataset)?;
    let ranked = match options.score {
        ScoreSpace::Raw => rank_pool(&emb.queries, &emb.pool)?,
        ScoreSpace::Whitened => {
            let w = fit_whitening(&emb.queries, &emb.positives, DEFAULT_JITTER)?;
            rank_pool(
                &apply_whitening(&w, &emb.queries)?,
                &apply_whitening(&w, &emb.pool)?,
            )?
        }
    };
    let heatmap_dim = options.heatmap_dim.min(params.embed_dim()).max(1);
    Ok(MetricsReport {
        hit_at_1: hit_at_1(&ranked)?,
        recall_at_1: recall_at_k(&ranked, 1)?,
        recall_at_k: recall_at_k(&ranked, options.recall_k)?,
        recall_k: options.recall_k,
        ndcg_at_k: ndcg_at_k(&ranked, options.ndcg_k)?,
        ndcg_k: options.ndcg_k,
        queries: emb.queries.rows(),
        pool_size: emb.pool.rows(),
        diagnostics: diagnostics(
            &emb.queries,
            &emb.positives,
            heatmap_dim,
            options.heatmap_seed,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centroid_gap, covdiff_heatmap};
    use crate::numerics::seeded_rng;
    use crate::synth::{generate_dataset, Generator, WorldConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn list(q: u64, rel_at: usize, n: usize) -> RankedList {
        let rel = (0..n)
            .map(|i| if i == rel_at { 1.0 } else { 0.0 })
            .collect();
        RankedList::new(q, (0..n as u64).collect(), rel).unwrap()
    }

    #[test]
    fn hit_at_1_examples() {
        assert_eq!(hit_at_1(&[list(0, 0, 3), list(1, 0, 3)]).unwrap(), 1.0);
        assert_eq!(hit_at_1(&[list(0, 1, 2), list(1, 1, 2)]).unwrap(), 0.0);
        let ranked = [list(0, 0, 4), list(1, 0, 4), list(2, 3, 4), list(3, 0, 4)];
        assert_eq!(hit_at_1(&ranked).unwrap(), 0.75);
        assert!(hit_at_1(&[]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[list(0, 2, 3)], 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[list(0, 2, 3)], 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[list(0, 1, 3)], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[list(0, 1, 3)], 2).unwrap(), 1.0);
        assert!(recall_at_k(&[list(0, 1, 3)], 0).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[list(0, 0, 6)], 5).unwrap(), 1.0);
        let second = ndcg_at_k(&[list(0, 1, 6)], 5).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.630_93).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&[list(0, 5, 6)], 5).unwrap(), 0.0);
    }

    #[test]
    fn lists_must_be_well_formed() {
        assert!(RankedList::new(0, vec![1, 1], vec![1.0, 0.0]).is_err());
        assert!(RankedList::new(0, vec![1, 2], vec![0.0, 0.0]).is_err());
        assert!(RankedList::new(0, vec![1, 2], vec![1.0]).is_err());
    }

    #[test]
    fn ties_break_toward_lower_ids() {
        let r = RankedList::from_scores(0, &[(7, 0.5), (3, 0.5), (5, 0.9), (1, 0.5)], |c| {
            (c == 3) as u8 as f64
        })
        .unwrap();
        assert_eq!(r.candidates, vec![5, 1, 3, 7]);
    }

    #[test]
    fn recall_at_1_is_hit_at_1_on_random_rankings() {
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            let n = rng.random_range(2..10);
            let ranked: Vec<RankedList> = (0..20)
                .map(|q| list(q, rng.random_range(0..n), n))
                .collect();
            assert_eq!(recall_at_k(&ranked, 1).unwrap(), hit_at_1(&ranked).unwrap());
        }
    }

    proptest! {
        #[test]
        fn metrics_are_rank_based_and_bounded(
            scores in prop::collection::vec(-5.0f64..5.0, 2..12),
            rel in 0usize..12,
            relabel in 0u64..1000,
        ) {
            let n = scores.len();
            let rel = rel % n;
            let scored: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
            let base = RankedList::from_scores(0, &scored, |c| (c == rel as u64) as u8 as f64).unwrap();
            // strictly increasing transform
            let warped: Vec<(u64, f64)> = scored.iter().map(|&(c, s)| (c, s.exp() * 3.0 + s)).collect();
            let warp = RankedList::from_scores(0, &warped, |c| (c == rel as u64) as u8 as f64).unwrap();
            prop_assert_eq!(&base.relevance, &warp.relevance);
            // relabeling ids preserving order leaves NDCG unchanged
            let shifted: Vec<(u64, f64)> = scored.iter().map(|&(c, s)| (c * 7 + relabel, s)).collect();
            let moved = RankedList::from_scores(0, &shifted, |c| (c == rel as u64 * 7 + relabel) as u8 as f64).unwrap();
            for k in [1, 3, 5] {
                let a = ndcg_at_k(std::slice::from_ref(&base), k).unwrap();
                prop_assert_eq!(a, ndcg_at_k(std::slice::from_ref(&moved), k).unwrap());
                prop_assert!((0.0..=1.0).contains(&a));
                let r = recall_at_k(std::slice::from_ref(&base), k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }

    fn world(pairs: usize) -> WorldConfig {
        WorldConfig {
            pairs,
            eval_fraction: 0.5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn oracle_params_on_a_clean_world_are_perfect() {
        let cfg = WorldConfig {
            noise_scale: [0.0; 4],
            ..world(100)
        };
        let ds = generate_dataset(&cfg, 3).unwrap();
        let gen = Generator::new(&cfg, 3).unwrap();
        let params = ModelParams::oracle(&gen.world, 0.02).unwrap();
        let m = evaluate(&params, &ds, &EvalOptions::default()).unwrap();
        assert_eq!(m.hit_at_1, 1.0);
        assert_eq!(m.ndcg_at_k, 1.0);
        assert_eq!(m.pool_size, 50 * 3);
    }

    #[test]
    fn random_params_score_near_chance() {
        // A random projection shared by query and target keeps their geometry,
        // so chance level is only expected when the two never share a modality.
        let weights = |k: &str| [(k.to_string(), 1.0)].into_iter().collect();
        let cfg = WorldConfig {
            composition_weights: weights("T"),
            target_composition_weights: Some(weights("A")),
            ..world(200)
        };
        let mut hits = Vec::new();
        let mut pool = 0;
        for seed in 0..12 {
            let ds = generate_dataset(&cfg, 100 + seed).unwrap();
            let params = ModelParams::init(cfg.feature_dim, cfg.embed_dim, 0.02, seed);
            let m = evaluate(&params, &ds, &EvalOptions::default()).unwrap();
            pool = m.pool_size;
            hits.push(m.hit_at_1);
        }
        // Per-query success is Bernoulli(1/pool); pooled over all queries.
        let chance = 1.0 / pool as f64;
        let queries = 100.0 * hits.len() as f64;
        let mean = hits.iter().sum::<f64>() / hits.len() as f64;
        let se = (chance * (1.0 - chance) / queries).sqrt();
        assert!(
            (mean - chance).abs() <= 3.0 * se + 1.0 / queries,
            "mean {mean} chance {chance}"
        );
    }

    #[test]
    fn diagnostics_match_geometry_calls() {
        let ds = generate_dataset(&world(80), 5).unwrap();
        let params = ModelParams::init(24, 32, 0.02, 1);
        let opts = EvalOptions::default();
        let m = evaluate(&params, &ds, &opts).unwrap();
        let emb = embed_eval(&params, &ds).unwrap();
        assert_eq!(
            m.diagnostics.centroid_gap,
            centroid_gap(&emb.queries, &emb.positives).unwrap()
        );
        assert_eq!(
            m.diagnostics.covariance_gap,
            crate::geometry::covariance_gap(&emb.queries, &emb.positives).unwrap()
        );
        let heat = covdiff_heatmap(
            &emb.queries,
            &emb.positives,
            opts.heatmap_dim,
            opts.heatmap_seed,
        )
        .unwrap();
        assert_eq!(m.diagnostics.heatmap_frobenius, heat.frobenius);
    }

    #[test]
    fn whitened_scoring_runs() {
        let ds = generate_dataset(&world(120), 5).unwrap();
        let params = ModelParams::init(24, 32, 0.02, 1);
        let opts = EvalOptions {
            score: ScoreSpace::Whitened,
            ..EvalOptions::default()
        };
        let m = evaluate(&params, &ds, &opts).unwrap();
        assert!((0.0..=1.0).contains(&m.hit_at_1));
    }

    #[test]
    fn empty_eval_split_is_rejected() {
        let mut ds = generate_dataset(&world(20), 5).unwrap();
        ds.eval.clear();
        let params = ModelParams::init(24, 32, 0.02, 1);
        assert!(matches!(
            evaluate(&params, &ds, &EvalOptions::default()),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn rank_pool_uses_dot_products() {
        let q = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8]]).unwrap();
        let pool = q.clone();
        let ranked = rank_pool(&q, &pool).unwrap();
        // each row scores highest against itself
        assert_eq!(hit_at_1(&ranked).unwrap(), 1.0);
    }
}

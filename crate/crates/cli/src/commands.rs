//! The seven commands and the files they leave behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use omni_align::calibration::NUM_MODALITIES;
use omni_align::evalkit::{embed_eval, evaluate, EvalOptions, MetricsReport};
use omni_align::geometry::export::{heatmap_csv, pca_points_csv, pca_svg, sig9};
use omni_align::geometry::{
    covdiff_heatmap, diagnostics, pca_overlap, DiagnosticsReport, PcaOverlap,
};
use omni_align::io::{read_dataset, write_dataset, Checkpoint};
use omni_align::synth::{generate_dataset, Dataset, WorldConfig};
use omni_align::trainer::{
    finite_diff_check, initial_params, train, train_with, GradCheckReport, Toggles, TrainConfig,
};

use crate::config::{apply_sweep_value, ConfigError, RunConfig};

/// Fixed file names under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset/dataset.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("ckpt/model.json")
    }

    pub fn steps(&self) -> PathBuf {
        self.root.join("logs/steps.jsonl")
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    pub fn diagnostics(&self, name: &str) -> PathBuf {
        self.root.join("diagnostics").join(name)
    }
}

/// Provenance wrapper shared by every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_hash: String,
    pub seed: u64,
    pub result: T,
    /// The effective configuration, after file and flag overrides.
    pub config: RunConfig,
}

impl<T> Envelope<T> {
    fn new(cfg: &RunConfig, result: T) -> Self {
        Envelope {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            result,
            config: cfg.clone(),
        }
    }
}

/// What a command reports back to the process.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Files written, in order.
    pub written: Vec<PathBuf>,
    /// One line per fact worth printing.
    pub summary: Vec<String>,
    /// Nonzero when the command ran but its check failed.
    pub status: u8,
}

impl Outcome {
    fn ok() -> Self {
        Outcome {
            written: Vec::new(),
            summary: Vec::new(),
            status: 0,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8], outcome: &mut Outcome) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    outcome.written.push(path.to_path_buf());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, outcome: &mut Outcome) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing artifact")?;
    text.push('\n');
    write_file(path, text.as_bytes(), outcome)
}

fn with_dataset_hash(mut ds: Dataset, cfg: &RunConfig) -> Dataset {
    ds.header.config_hash = Some(cfg.dataset_hash());
    ds
}

fn store_dataset(ds: &Dataset, layout: &Layout, outcome: &mut Outcome) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    write_file(&layout.dataset(), &buf, outcome)
}

/// Read the dataset under `layout`, or generate and store it when absent.
/// A stored dataset from a different world or seed is an error.
pub fn load_or_generate(
    cfg: &RunConfig,
    layout: &Layout,
    outcome: &mut Outcome,
) -> Result<Dataset> {
    let path = layout.dataset();
    if path.exists() {
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let ds = read_dataset(BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))?;
        if ds.header.seed != cfg.seed || ds.header.config != cfg.world {
            return Err(ConfigError(format!(
                "{} was generated from a different world or seed; rerun gen or pick another --out",
                path.display()
            ))
            .into());
        }
        return Ok(ds);
    }
    let ds = with_dataset_hash(generate_dataset(&cfg.world, cfg.seed)?, cfg);
    store_dataset(&ds, layout, outcome)?;
    Ok(ds)
}

fn load_checkpoint(layout: &Layout, ds: &Dataset) -> Result<Checkpoint> {
    let path = layout.checkpoint();
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run train first)", path.display()))?;
    let ckpt =
        Checkpoint::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ckpt.dataset_seed != ds.header.seed
        || ckpt.params.feature_dim() != ds.header.config.feature_dim
    {
        return Err(ConfigError(format!(
            "{} was trained on a different dataset",
            path.display()
        ))
        .into());
    }
    Ok(ckpt)
}

pub fn gen(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = with_dataset_hash(generate_dataset(&cfg.world, cfg.seed)?, cfg);
    store_dataset(&ds, layout, &mut outcome)?;
    outcome.summary.push(format!(
        "generated {} train and {} eval tuples",
        ds.train.len(),
        ds.eval.len()
    ));
    Ok(outcome)
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config_hash: &'a str,
    seed: u64,
}

pub fn train_cmd(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = load_or_generate(cfg, layout, &mut outcome)?;
    let hash = cfg.hash();
    let log_path = layout.steps();
    fs::create_dir_all(log_path.parent().expect("log path has a parent"))?;
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(
        log,
        "{}",
        serde_json::to_string(&LogHeader {
            config_hash: &hash,
            seed: cfg.seed
        })?
    )?;
    // Records stream out as they are produced, so an aborted run keeps its history.
    let mut io_error = None;
    let result = train_with(&ds, &cfg.train, |rec| {
        if io_error.is_none() {
            let line = serde_json::to_string(rec).expect("step records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_error = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    outcome.written.push(log_path);
    let out = result?;
    let mut ckpt = Checkpoint::new(out.params, cfg.train.clone(), ds.header.seed);
    ckpt.config_hash = Some(hash);
    let mut text = ckpt.to_json()?;
    text.push('\n');
    write_file(&layout.checkpoint(), text.as_bytes(), &mut outcome)?;
    if let Some(last) = out.log.last() {
        outcome.summary.push(format!(
            "step {} loss {:.4} tau {:?}",
            last.step, last.loss_total, last.tau
        ));
    }
    Ok(outcome)
}

pub fn eval_cmd(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = load_or_generate(cfg, layout, &mut outcome)?;
    let ckpt = load_checkpoint(layout, &ds)?;
    let report = evaluate(&ckpt.params, &ds, &cfg.eval)?;
    outcome.summary.push(format!(
        "hit@1 {:.4} recall@{} {:.4} ndcg@{} {:.4} ({} queries, pool {})",
        report.hit_at_1,
        report.recall_k,
        report.recall_at_k,
        report.ndcg_k,
        report.ndcg_at_k,
        report.queries,
        report.pool_size
    ));
    write_json(
        &layout.metrics("metrics.json"),
        &Envelope::new(cfg, report),
        &mut outcome,
    )?;
    Ok(outcome)
}

/// Labels of the four point sets in the PCA overlap, in plotting order.
pub const PCA_SETS: [&str; 4] = [
    "init_query",
    "init_target",
    "trained_query",
    "trained_target",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseResult {
    pub heatmap_dim: usize,
    pub init: DiagnosticsReport,
    pub trained: DiagnosticsReport,
    pub pca: PcaOverlap,
    /// CSV files this result describes.
    pub files: Vec<String>,
}

pub fn diagnose(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = load_or_generate(cfg, layout, &mut outcome)?;
    let ckpt = load_checkpoint(layout, &ds)?;
    let init = initial_params(&ds, &ckpt.config);
    let before = embed_eval(&init, &ds)?;
    let after = embed_eval(&ckpt.params, &ds)?;
    let k = cfg.diagnose.heatmap_dim.min(ckpt.params.embed_dim()).max(1);
    let seed = cfg.diagnose.heatmap_seed;
    let pca = pca_overlap(&[
        (&before.queries, &before.positives),
        (&after.queries, &after.positives),
    ])?;
    let labels: Vec<String> = PCA_SETS.iter().map(|s| s.to_string()).collect();
    write_file(
        &layout.diagnostics("pca_points.csv"),
        pca_points_csv(&pca, &labels).as_bytes(),
        &mut outcome,
    )?;
    let trained_map = covdiff_heatmap(&after.queries, &after.positives, k, seed)?;
    let init_map = covdiff_heatmap(&before.queries, &before.positives, k, seed)?;
    write_file(
        &layout.diagnostics("heatmap.csv"),
        heatmap_csv(&trained_map.heatmap).as_bytes(),
        &mut outcome,
    )?;
    write_file(
        &layout.diagnostics("heatmap_init.csv"),
        heatmap_csv(&init_map.heatmap).as_bytes(),
        &mut outcome,
    )?;
    if cfg.diagnose.svg {
        write_file(
            &layout.diagnostics("pca.svg"),
            pca_svg(&pca, &labels).as_bytes(),
            &mut outcome,
        )?;
    }
    let result = DiagnoseResult {
        heatmap_dim: k,
        init: diagnostics(&before.queries, &before.positives, k, seed)?,
        trained: diagnostics(&after.queries, &after.positives, k, seed)?,
        pca,
        files: ["pca_points.csv", "heatmap.csv", "heatmap_init.csv"]
            .map(String::from)
            .to_vec(),
    };
    outcome.summary.push(format!(
        "covariance gap {:.4} -> {:.4}, centroid gap {:.4} -> {:.4}",
        result.init.covariance_gap,
        result.trained.covariance_gap,
        result.init.centroid_gap,
        result.trained.centroid_gap
    ));
    write_json(
        &layout.diagnostics("diagnostics.json"),
        &Envelope::new(cfg, result),
        &mut outcome,
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSeed {
    pub seed: u64,
    pub step: u64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seeds: Vec<GradcheckSeed>,
}

/// Finite-difference check of the full loss on small worlds, one per seed.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckResult> {
    let g = &cfg.gradcheck;
    let world = WorldConfig {
        embed_dim: g.embed_dim,
        pairs: 10 * g.batch_size,
        ..cfg.world.clone()
    };
    let train = TrainConfig {
        batch_size: g.batch_size,
        ..cfg.train.clone()
    };
    world
        .validate()
        .map_err(|e| ConfigError(format!("gradcheck world: {e}")))?;
    let step = g
        .step
        .unwrap_or(train.t0 + train.total_steps.saturating_sub(train.t0) / 2);
    let mut seeds = Vec::with_capacity(g.seeds.len());
    for &seed in &g.seeds {
        let ds = generate_dataset(&world, seed)?;
        let mut params = initial_params(
            &ds,
            &TrainConfig {
                seed,
                ..train.clone()
            },
        );
        // Distinct temperatures, so the check does not sit on the symmetric start.
        for (t, f) in params.tau.0.iter_mut().zip([0.9, 1.05, 1.25, 1.0]) {
            *t *= f;
        }
        let batch: Vec<_> = ds.train[..g.batch_size].iter().collect();
        let report = finite_diff_check(&batch, &params, step, &train, g.h, seed)?;
        seeds.push(GradcheckSeed { seed, step, report });
    }
    let max_rel_error = seeds
        .iter()
        .map(|s| s.report.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradcheckResult {
        max_rel_error,
        tolerance: g.tolerance,
        passed: max_rel_error <= g.tolerance,
        seeds,
    })
}

pub fn gradcheck(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let result = run_gradcheck(cfg)?;
    outcome.summary.push(format!(
        "max relative error {:.3e} over {} seeds (tolerance {:.1e})",
        result.max_rel_error,
        result.seeds.len(),
        result.tolerance
    ));
    if !result.passed {
        outcome.status = 1;
    }
    write_json(
        &layout.metrics("gradcheck.json"),
        &Envelope::new(cfg, result),
        &mut outcome,
    )?;
    Ok(outcome)
}

/// Run `f` over `items` on up to `threads` workers; results keep input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(items.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub tau: [f64; NUM_MODALITIES],
    pub final_loss: f64,
}

fn train_and_eval(
    ds: &Dataset,
    train_cfg: &TrainConfig,
    eval: &EvalOptions,
) -> omni_align::Result<RunResult> {
    let out = train(ds, train_cfg)?;
    Ok(RunResult {
        seed: train_cfg.seed,
        metrics: evaluate(&out.params, ds, eval)?,
        tau: out.params.tau.0,
        final_loss: out.log.last().map_or(f64::NAN, |r| r.loss_total),
    })
}

/// The full recipe plus each single-component removal.
pub fn ablation_variants() -> Vec<(&'static str, Toggles)> {
    let full = Toggles::default();
    vec![
        ("full", full),
        (
            "no_calibration",
            Toggles {
                calibration: false,
                ..full
            },
        ),
        (
            "no_curriculum",
            Toggles {
                curriculum: false,
                ..full
            },
        ),
        ("no_dcl", Toggles { dcl: false, ..full }),
        (
            "no_whitening_coral",
            Toggles {
                whitening_coral: false,
                ..full
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub toggles: Toggles,
    pub hit_at_1_mean: f64,
    /// Standard error of the mean across seeds.
    pub hit_at_1_se: f64,
    pub recall_at_k_mean: f64,
    pub ndcg_at_k_mean: f64,
    pub centroid_gap_mean: f64,
    pub covariance_gap_mean: f64,
    pub runs: Vec<RunResult>,
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Train every (variant, seed) pair on `ds` and aggregate per variant.
pub fn run_variants(
    ds: &Dataset,
    variants: &[(String, TrainConfig)],
    seeds: &[u64],
    eval: &EvalOptions,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, TrainConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(v, (_, cfg))| {
            seeds.iter().map(move |&seed| {
                (
                    v,
                    TrainConfig {
                        seed,
                        ..cfg.clone()
                    },
                )
            })
        })
        .collect();
    let results = par_map(&jobs, threads, |(_, cfg)| train_and_eval(ds, cfg, eval));
    let mut runs: Vec<Vec<RunResult>> = vec![Vec::new(); variants.len()];
    for ((v, cfg), r) in jobs.iter().zip(results) {
        let r = r.with_context(|| format!("variant {} seed {}", variants[*v].0, cfg.seed))?;
        runs[*v].push(r);
    }
    Ok(variants
        .iter()
        .zip(runs)
        .map(|((name, cfg), runs)| {
            let col = |f: fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<_>>();
            let (hit, se) = mean_se(&col(|r| r.metrics.hit_at_1));
            AblationRow {
                variant: name.clone(),
                toggles: cfg.toggles,
                hit_at_1_mean: hit,
                hit_at_1_se: se,
                recall_at_k_mean: mean_se(&col(|r| r.metrics.recall_at_k)).0,
                ndcg_at_k_mean: mean_se(&col(|r| r.metrics.ndcg_at_k)).0,
                centroid_gap_mean: mean_se(&col(|r| r.metrics.diagnostics.centroid_gap)).0,
                covariance_gap_mean: mean_se(&col(|r| r.metrics.diagnostics.covariance_gap)).0,
                runs,
            }
        })
        .collect())
}

pub const ABLATION_HEADER: &str = "variant,calibration,curriculum,dcl,whitening_coral,seeds,hit_at_1_mean,hit_at_1_se,recall_at_k_mean,ndcg_at_k_mean,centroid_gap_mean,covariance_gap_mean";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let t = r.toggles;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            t.calibration,
            t.curriculum,
            t.dcl,
            t.whitening_coral,
            r.runs.len(),
            sig9(r.hit_at_1_mean),
            sig9(r.hit_at_1_se),
            sig9(r.recall_at_k_mean),
            sig9(r.ndcg_at_k_mean),
            sig9(r.centroid_gap_mean),
            sig9(r.covariance_gap_mean)
        );
    }
    out
}

pub fn ablate(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = load_or_generate(cfg, layout, &mut outcome)?;
    let variants: Vec<(String, TrainConfig)> = ablation_variants()
        .into_iter()
        .map(|(name, toggles)| {
            (
                name.to_string(),
                TrainConfig {
                    toggles,
                    ..cfg.train.clone()
                },
            )
        })
        .collect();
    let rows = run_variants(
        &ds,
        &variants,
        &cfg.ablate.seeds,
        &cfg.eval,
        cfg.ablate.threads,
    )?;
    for r in &rows {
        outcome.summary.push(format!(
            "{:<20} hit@1 {:.4} ± {:.4}",
            r.variant, r.hit_at_1_mean, r.hit_at_1_se
        ));
    }
    write_file(
        &layout.metrics("ablation.csv"),
        ablation_csv(&rows).as_bytes(),
        &mut outcome,
    )?;
    write_json(
        &layout.metrics("ablation.json"),
        &Envelope::new(cfg, rows),
        &mut outcome,
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: BTreeMap<String, f64>,
    pub result: RunResult,
}

/// Every combination of grid values, keys in sorted order, last key fastest.
pub fn grid_points(grid: &BTreeMap<String, Vec<f64>>) -> Vec<BTreeMap<String, f64>> {
    grid.iter()
        .fold(vec![BTreeMap::new()], |acc, (key, values)| {
            acc.iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut p = p.clone();
                        p.insert(key.clone(), v);
                        p
                    })
                })
                .collect()
        })
}

pub fn sweep(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let mut outcome = Outcome::ok();
    let ds = load_or_generate(cfg, layout, &mut outcome)?;
    // Validation tuples come off the training split; the eval split stays untouched.
    let split = ds
        .hold_out(cfg.sweep.validation)
        .map_err(|e| ConfigError(format!("sweep.validation: {e}")))?;
    let points = grid_points(&cfg.sweep.grid);
    let configs = points
        .iter()
        .map(|p| {
            let mut t = cfg.train.clone();
            for (k, &v) in p {
                apply_sweep_value(&mut t, k, v)?;
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let results = par_map(&configs, cfg.sweep.threads, |t| {
        train_and_eval(&split, t, &cfg.eval)
    });
    let mut rows = Vec::with_capacity(points.len());
    for (point, r) in points.into_iter().zip(results) {
        let result = r.with_context(|| format!("sweep point {point:?}"))?;
        rows.push(SweepRow { point, result });
    }
    let keys: Vec<&String> = cfg.sweep.grid.keys().collect();
    let mut csv = keys
        .iter()
        .map(|k| k.as_str())
        .collect::<Vec<_>>()
        .join(",");
    csv.push_str(",hit_at_1,recall_at_k,ndcg_at_k,centroid_gap,covariance_gap,final_loss\n");
    for row in &rows {
        let m = &row.result.metrics;
        let cells: Vec<String> = keys
            .iter()
            .map(|k| sig9(row.point[*k]))
            .chain(
                [
                    m.hit_at_1,
                    m.recall_at_k,
                    m.ndcg_at_k,
                    m.diagnostics.centroid_gap,
                    m.diagnostics.covariance_gap,
                    row.result.final_loss,
                ]
                .map(sig9),
            )
            .collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    if let Some(best) = rows.iter().max_by(|a, b| {
        a.result
            .metrics
            .hit_at_1
            .total_cmp(&b.result.metrics.hit_at_1)
    }) {
        outcome.summary.push(format!(
            "best {:?} hit@1 {:.4}",
            best.point, best.result.metrics.hit_at_1
        ));
    }
    write_file(&layout.metrics("sweep.csv"), csv.as_bytes(), &mut outcome)?;
    write_json(
        &layout.metrics("sweep.json"),
        &Envelope::new(cfg, rows),
        &mut outcome,
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_full_product_in_key_order() {
        let grid: BTreeMap<String, Vec<f64>> = [
            ("t0".to_string(), vec![1.0, 2.0]),
            ("gamma_plus".to_string(), vec![0.0, 0.1, 0.2]),
        ]
        .into_iter()
        .collect();
        let pts = grid_points(&grid);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0]["gamma_plus"], 0.0);
        assert_eq!(pts[0]["t0"], 1.0);
        assert_eq!(pts[1]["t0"], 2.0);
        assert_eq!(pts[5]["gamma_plus"], 0.2);
        assert_eq!(grid_points(&BTreeMap::new()).len(), 1);
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<u64> = (0..57).collect();
        for threads in [0, 1, 3, 100] {
            assert_eq!(
                par_map(&items, threads, |x| x * x),
                items.iter().map(|x| x * x).collect::<Vec<_>>()
            );
        }
        assert!(par_map(&Vec::<u8>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn mean_se_matches_hand_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, over n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn five_variants_remove_one_component_each() {
        let v = ablation_variants();
        assert_eq!(v.len(), 5);
        assert_eq!(v[0].1, Toggles::default());
        for (_, t) in &v[1..] {
            let on = [t.calibration, t.curriculum, t.dcl, t.whitening_coral]
                .iter()
                .filter(|b| **b)
                .count();
            assert_eq!(on, 3);
        }
    }

    #[test]
    fn ablation_csv_has_a_header_and_one_line_per_row() {
        let row = AblationRow {
            variant: "full".into(),
            toggles: Toggles::default(),
            hit_at_1_mean: 0.5,
            hit_at_1_se: 0.0,
            recall_at_k_mean: 0.5,
            ndcg_at_k_mean: 0.5,
            centroid_gap_mean: 0.1,
            covariance_gap_mean: 0.2,
            runs: Vec::new(),
        };
        let csv = ablation_csv(&[row.clone(), row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(
            lines[1].split(',').count(),
            ABLATION_HEADER.split(',').count()
        );
    }
}

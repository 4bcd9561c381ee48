//! Run configuration: one JSON document, layered as
//! defaults ← file ← `--set` overrides ← `--seed`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use omni_align::evalkit::EvalOptions;
use omni_align::synth::WorldConfig;
use omni_align::trainer::TrainConfig;

/// Hyperparameters a sweep may vary.
pub const SWEEPABLE: [&str; 6] = [
    "tau_init",
    "gamma_plus",
    "lambda_coral",
    "rho_init",
    "rho_final",
    "t0",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    /// Each seed draws its own small world, initialization and batch.
    pub seeds: Vec<u64>,
    pub embed_dim: usize,
    pub batch_size: usize,
    /// Step at which the loss is probed; defaults to the curriculum midpoint.
    pub step: Option<u64>,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: (0..5).collect(),
            embed_dim: 16,
            batch_size: 8,
            step: None,
            h: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateOptions {
    /// Training seeds averaged per row; the dataset always uses `seed`.
    pub seeds: Vec<u64>,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            seeds: (42..47).collect(),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    /// Values per hyperparameter; the sweep runs the full product.
    pub grid: BTreeMap<String, Vec<f64>>,
    /// Training tuples held out for validation.
    pub validation: usize,
    pub threads: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        let grid = [
            ("tau_init".to_string(), vec![0.01, 0.02, 0.05]),
            ("lambda_coral".to_string(), vec![0.0, 0.05, 0.5]),
        ]
        .into_iter()
        .collect();
        SweepOptions {
            grid,
            validation: 1000,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOptions {
    /// Projected dimension of the heatmap; clipped to the embedding width.
    pub heatmap_dim: usize,
    pub heatmap_seed: u64,
    pub svg: bool,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            heatmap_dim: 32,
            heatmap_seed: 0,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the dataset and training; `train.seed` always mirrors it.
    pub seed: u64,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    pub ablate: AblateOptions,
    pub sweep: SweepOptions,
    pub diagnose: DiagnoseOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            gradcheck: GradcheckOptions::default(),
            ablate: AblateOptions::default(),
            sweep: SweepOptions::default(),
            diagnose: DiagnoseOptions::default(),
        }
    }
}

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Parse `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(raw: &str) -> Result<(String, Value), ConfigError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| err(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(err(format!("override {raw:?} has an empty key segment")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(|| {
            err(format!(
                "cannot set {key}: parent of {part:?} is not an object"
            ))
        })?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("split yields at least one segment")
}

/// Build the effective configuration.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, ConfigError> {
    let mut doc = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| err(format!("{}: invalid JSON: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(err("config must be a JSON object"));
    }
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        set_path(&mut doc, &key, value)?;
    }
    if let Some(s) = seed {
        set_path(&mut doc, "seed", Value::from(s))?;
    }
    let user_train_seed = doc.pointer("/train/seed").cloned();
    let mut cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        err(format!("config key {path}: {}", e.into_inner()))
    })?;
    if let Some(v) = user_train_seed {
        if v.as_u64() != Some(cfg.seed) {
            return Err(err(
                "train.seed is derived from seed; set seed (or --seed) instead",
            ));
        }
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world
            .validate()
            .map_err(|e| err(format!("world: {e}")))?;
        self.train
            .validate()
            .map_err(|e| err(format!("train: {e}")))?;
        if self.eval.recall_k == 0 || self.eval.ndcg_k == 0 {
            return Err(err("eval: recall_k and ndcg_k must be at least 1"));
        }
        if self.train.batch_size > self.world.pairs - self.world.eval_count() {
            return Err(err("train.batch_size exceeds the training split"));
        }
        let g = &self.gradcheck;
        if g.seeds.is_empty()
            || g.batch_size < 2
            || g.embed_dim == 0
            || g.h.is_nan()
            || g.h <= 0.0
            || g.tolerance.is_nan()
            || g.tolerance <= 0.0
        {
            return Err(err(
                "gradcheck: needs seeds, batch_size >= 2, embed_dim >= 1, h > 0, tolerance > 0",
            ));
        }
        if self.ablate.seeds.is_empty() {
            return Err(err("ablate.seeds must not be empty"));
        }
        for (key, values) in &self.sweep.grid {
            if !SWEEPABLE.contains(&key.as_str()) {
                return Err(err(format!(
                    "sweep.grid key {key:?} is not one of {SWEEPABLE:?}"
                )));
            }
            if values.is_empty() {
                return Err(err(format!("sweep.grid.{key} has no values")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&canonical))
    }

    /// Hash of what determines the dataset: the seed and the world.
    pub fn dataset_hash(&self) -> String {
        let canonical = serde_json::to_vec(&(self.seed, &self.world)).expect("world serializes");
        hex(&Sha256::digest(&canonical))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Apply one sweep coordinate to a training config.
pub fn apply_sweep_value(cfg: &mut TrainConfig, key: &str, value: f64) -> Result<(), ConfigError> {
    match key {
        "tau_init" => cfg.tau_init = value,
        "gamma_plus" => cfg.gamma_plus = value,
        "lambda_coral" => cfg.lambda_coral = value,
        "rho_init" => cfg.rho_init = value,
        "rho_final" => cfg.rho_final = value,
        "t0" => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(err(format!("sweep value t0={value} is not a step count")));
            }
            cfg.t0 = value as u64;
        }
        other => return Err(err(format!("{other:?} is not sweepable"))),
    }
    cfg.validate()
        .map_err(|e| err(format!("sweep point {key}={value}: {e}")))
}

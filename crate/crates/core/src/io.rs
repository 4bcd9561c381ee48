//! On-disk containers: the JSON-lines dataset and the JSON checkpoint.
//!
//! Dataset: the first line is a [`DatasetHeader`]; each following line is a
//! [`TupleRecord`]. Checkpoint: one [`Checkpoint`] document.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::synth::{Dataset, DatasetHeader, ModelParams, TrainingTuple, DATASET_FORMAT};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "omni-ckpt/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleRecord {
    pub split: Split,
    #[serde(flatten)]
    pub tuple: TrainingTuple,
}

fn json_err(what: &str, e: serde_json::Error) -> crate::Error {
    contract(format!("{what}: {e}"))
}

fn io_err(e: std::io::Error) -> crate::Error {
    crate::Error::Io(e.to_string())
}

pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    let header =
        serde_json::to_string(&dataset.header).map_err(|e| json_err("dataset header", e))?;
    writeln!(out, "{header}").map_err(io_err)?;
    let splits = [(Split::Train, &dataset.train), (Split::Eval, &dataset.eval)];
    for (split, tuples) in splits {
        for tuple in tuples {
            let rec = TupleRecord {
                split,
                tuple: tuple.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| json_err("tuple record", e))?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| contract("dataset file is empty"))?
        .map_err(io_err)?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| json_err("dataset header", e))?;
    if header.format != DATASET_FORMAT {
        return Err(contract(format!(
            "dataset format {:?}, expected {DATASET_FORMAT:?}",
            header.format
        )));
    }
    header.config.validate()?;
    let mut train = Vec::with_capacity(header.train);
    let mut eval = Vec::with_capacity(header.eval);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TupleRecord =
            serde_json::from_str(&line).map_err(|e| json_err(&format!("record {}", n + 1), e))?;
        for item in std::iter::once(&rec.tuple.query)
            .chain(std::iter::once(&rec.tuple.positive))
            .chain(&rec.tuple.hard_negatives)
        {
            item.validate(header.config.feature_dim)?;
        }
        if rec.tuple.hard_negatives.len() != header.config.hard_negatives {
            return Err(contract(format!(
                "record {} has {} hard negatives, header says {}",
                n + 1,
                rec.tuple.hard_negatives.len(),
                header.config.hard_negatives
            )));
        }
        match rec.split {
            Split::Train => train.push(rec.tuple),
            Split::Eval => eval.push(rec.tuple),
        }
    }
    if train.len() != header.train || eval.len() != header.eval {
        return Err(contract(format!(
            "header promises {}/{} train/eval tuples, file holds {}/{}",
            header.train,
            header.eval,
            train.len(),
            eval.len()
        )));
    }
    Ok(Dataset {
        header,
        train,
        eval,
    })
}

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, config: TrainConfig, dataset_seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            seed: config.seed,
            dataset_seed,
            config,
            config_hash: None,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| json_err("checkpoint", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s).map_err(|e| json_err("checkpoint", e))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(contract(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        if !ckpt.params.is_finite() {
            return Err(contract("checkpoint holds non-finite parameters"));
        }
        Ok(ckpt)
    }
}

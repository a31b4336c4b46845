use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::PreparedData;
use crate::corpus::Example;
use crate::encoders::OmakeModel;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::numerics::{checkpoint, Graph, OptimizerState};

pub const CHECKPOINT_FILE: &str = "checkpoint.omke";
pub const CONFIG_FILE: &str = "checkpoint.config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

const SHUFFLE_STREAM: u64 = 0x5eed_0002;

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mkia_i2t: f64,
    pub mkia_t2i: f64,
    pub fga: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, b: LossBreakdown) -> Self {
        Self { step, mkia_i2t: b.mkia_i2t, mkia_t2i: b.mkia_t2i, fga: b.fga, total: b.total }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: OmakeModel,
    pub history: Vec<StepRecord>,
}

/// Runs the optimisation loop on `model`, reporting every step to `on_step`.
///
/// On a non-finite loss or update the error is returned and `model` keeps the
/// parameters from before the failing step.
pub fn train_model(
    cfg: &RunConfig,
    data: &PreparedData,
    model: &mut OmakeModel,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let record = train_step(cfg, data, model, &mut opt, &batch, step)?;
            on_step(&record)?;
            history.push(record);
        }
    }
    Ok(history)
}

fn train_step(
    cfg: &RunConfig,
    data: &PreparedData,
    model: &mut OmakeModel,
    opt: &mut OptimizerState,
    batch: &[&Example],
    step: usize,
) -> Result<StepRecord> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let items: Vec<_> = batch.iter().map(|e| (&e.sample, &e.image)).collect();
    let vars = model.encode_batch_graph(&mut g, &bound, &items)?;
    let labels: Vec<&str> = batch.iter().map(|e| e.sample.disease_label.as_str()).collect();
    let loss = total_loss(&mut g, &vars, &labels, data.tree.as_ref(), &cfg.loss, None)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step} is {}", loss.breakdown.total)));
    }
    let grads = g.backward(loss.loss)?;
    let per_param: Vec<Option<&[f64]>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
    let snapshot = model.params().clone();
    opt.step(model.params_mut(), &per_param)?;
    let bad = model.params().iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.to_owned());
    if let Some(name) = bad {
        *model.params_mut() = snapshot;
        return Err(Error::NonFinite(format!("parameter `{name}` after step {step}")));
    }
    Ok(StepRecord::new(step, loss.breakdown))
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join(CHECKPOINT_FILE), config: dir.join(CONFIG_FILE), metrics: dir.join(METRICS_FILE) }
    }
}

/// Trains and writes the checkpoint, its config and the per-step metrics to `out_dir`.
pub fn train(cfg: &RunConfig, data: &PreparedData, out_dir: &Path) -> Result<(TrainOutcome, RunArtifacts)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let art = RunArtifacts::in_dir(out_dir);
    cfg.save(&art.config)?;
    let file = File::create(&art.metrics).map_err(|e| Error::io(&art.metrics, e))?;
    let mut metrics = BufWriter::new(file);
    let mut model = OmakeModel::new(cfg.encoder.clone(), cfg.seed)?;
    let result = train_model(cfg, data, &mut model, |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n").map_err(|e| Error::io(&art.metrics, e))
    });
    metrics.flush().map_err(|e| Error::io(&art.metrics, e))?;
    drop(metrics);
    checkpoint::save(model.params(), &art.checkpoint)?;
    let history = result?;
    Ok((TrainOutcome { model, history }, art))
}

/// Loads a trained model from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, OmakeModel)> {
    let art = RunArtifacts::in_dir(dir);
    let cfg = RunConfig::load(&art.config)?;
    let params = checkpoint::load(&art.checkpoint)?;
    let model = OmakeModel::from_params(cfg.encoder.clone(), params)?;
    Ok((cfg, model))
}

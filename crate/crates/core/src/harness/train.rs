use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::autodiff::{BnMode, SgdState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossTerms, Stage, Supervision};
use crate::model::{save_checkpoint, Framework, ModelState};
use crate::scenegen::{annotate_lc, make_rlc_split, Dataset, RlcSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
    /// Categories in `S` whose peak map was empty in this step.
    pub empty_peak_maps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_total: f64,
    pub empty_peak_maps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config_hash: String,
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub empty_peak_maps: usize,
    pub wall_clock_seconds: f64,
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub optimizer: SgdState,
    pub split: RlcSplit,
    pub log: TrainingLog,
}

/// Category split used by a run: every category annotated for LC.
pub fn run_split(cfg: &RunConfig) -> Result<RlcSplit> {
    match cfg.framework {
        Framework::Lc => Ok(RlcSplit::all(cfg.num_categories)),
        Framework::Rlc => make_rlc_split(cfg.num_categories, cfg.annotated_count, cfg.split_seed),
    }
}

pub fn supervision(cfg: &RunConfig, data: &Dataset, split: &RlcSplit) -> Vec<Supervision> {
    data.samples
        .iter()
        .map(|s| match cfg.framework {
            Framework::Lc => Supervision::lc(&annotate_lc(s, cfg.t_tilde)),
            Framework::Rlc => Supervision::rlc(s, split, cfg.t_tilde),
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Stage of an epoch. RLC is single-stage unless `rlc_two_stage` is set.
pub fn stage_of(cfg: &RunConfig, epoch: usize) -> Stage {
    let staged = cfg.framework == Framework::Lc || cfg.rlc_two_stage;
    if staged && epoch < cfg.epochs_stage1 {
        Stage::One
    } else {
        Stage::Two
    }
}

struct StepResult {
    loss: LossBreakdown,
    empty: usize,
}

fn train_step(
    cfg: &RunConfig,
    model: &mut ModelState,
    opt: &mut SgdState,
    lrs: &[f32],
    images: Tensor,
    sup: &[Supervision],
    stage: Stage,
) -> Result<Option<StepResult>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(images);
    let fwd = model.forward(&mut tape, &bound, x, BnMode::Train)?;
    let mut terms = LossTerms {
        class: Some(losses::loss_class(&mut tape, fwd.scores, sup)?),
        ..Default::default()
    };
    let counts = losses::predicted_counts(&mut tape, fwd.density)?;
    let mut empty = 0;
    let (total, loss) = match fwd.rlc {
        None => {
            terms.mse = losses::loss_mse_count(&mut tape, counts, sup)?;
            terms.rank = losses::loss_rank(&mut tape, counts, sup)?;
            if stage == Stage::Two {
                let masks = losses::pseudo_masks(tape.value(fwd.peaks), sup)?;
                empty = masks.empty;
                terms.sp_plus = losses::loss_sp_plus(&mut tape, fwd.density, &masks.masks, sup)?;
                terms.sp_minus = losses::loss_sp_minus(&mut tape, fwd.density, sup)?;
            }
            losses::assemble_lc(&mut tape, &terms, stage, cfg.lambda)?
        }
        Some(r) => {
            if stage == Stage::Two {
                let (mse, rank) = losses::loss_rcount(&mut tape, counts, sup, cfg.rlc_absent_mse)?;
                terms.rcount_mse = mse;
                terms.rcount_rank = rank;
            }
            let n = sup.len();
            let total = tape.reshape(r.total, &[n, tape.value(r.total).len() / n])?;
            let total = tape.sum_axes(total, &[1])?;
            terms.tot = Some(losses::loss_tot(&mut tape, total, sup)?);
            losses::assemble_rlc(&mut tape, &terms)?
        }
    };
    if !loss.total.is_finite() {
        return Ok(None);
    }
    tape.backward(total)?;
    let grads = bound.grads(&tape);
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Ok(None);
    }
    opt.step(&mut model.params, &grads, lrs)?;
    Ok(Some(StepResult { loss, empty }))
}

/// Trains a model on `data`. With `out` set, writes the split, a checkpoint
/// per epoch (`checkpoints/epoch_NNN`), the final checkpoint and the log.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.spec.num_categories != cfg.num_categories {
        return Err(Error::Config(format!(
            "dataset has {} categories, config {}",
            data.spec.num_categories, cfg.num_categories
        )));
    }
    let started = Instant::now();
    let split = run_split(cfg)?;
    let sup = supervision(cfg, data, &split);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("split.json"), &split)?;
        write_json(&dir.join("config.json"), cfg)?;
    }
    let mut model = ModelState::new(cfg.model_config())?;
    let mut opt = model.new_optimizer(cfg.sgd());
    let lrs = model.learning_rates(cfg.lr_backbone, cfg.lr_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        empty_peak_maps: 0,
        wall_clock_seconds: 0.0,
    };
    for epoch in 0..cfg.total_epochs() {
        let stage = stage_of(cfg, epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut n, mut empty) = (0.0, 0usize, 0usize);
        for batch in order.chunks_exact(cfg.batch_size) {
            let imgs: Vec<Tensor> = batch.iter().map(|&i| data.samples[i].image.clone()).collect();
            let bsup: Vec<Supervision> = batch.iter().map(|&i| sup[i].clone()).collect();
            let step = log.steps.len();
            let r = train_step(cfg, &mut model, &mut opt, &lrs, Tensor::stack(&imgs)?, &bsup, stage)?
                .ok_or(Error::Diverged { step })?;
            sum += r.loss.total;
            n += 1;
            empty += r.empty;
            log.steps.push(StepRecord {
                step,
                epoch,
                stage,
                loss: r.loss,
                empty_peak_maps: r.empty,
            });
        }
        let summary = EpochSummary {
            epoch,
            stage,
            mean_total: if n > 0 { sum / n as f64 } else { 0.0 },
            empty_peak_maps: empty,
        };
        log::info!(
            "epoch {epoch} ({stage:?}): mean loss {:.4}, empty peak maps {empty}",
            summary.mean_total
        );
        log.empty_peak_maps += empty;
        log.epochs.push(summary);
        if let Some(dir) = out {
            let ck = dir.join("checkpoints").join(format!("epoch_{:03}", epoch + 1));
            save_checkpoint(&ck, &model, Some(&opt), Some(epoch + 1))?;
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), &model, Some(&opt), Some(cfg.total_epochs()))?;
        write_json(&dir.join("training_log.json"), &log)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        split,
        log,
    })
}

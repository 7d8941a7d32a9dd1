//! Three-stage training schedule and evaluation.
//!
//! 1. pretrain the single-frame network,
//! 2. warm up the attention block with everything else frozen,
//! 3. fine-tune jointly, halving the learning rate after `patience`
//!    epochs without a new best loss.
//!
//! The single-frame baseline runs stages 1 and 3 without attention.
//! Updates are per sample, in an order shuffled per epoch from the seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassTable;
use crate::metrics::{accumulate_confusion, miou, ConfusionMatrix, IouReport};
use crate::model::{ModelConfig, Sample, SegmentationModel, Trainable};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_lr: f64,
    pub warmup_lr: f64,
    pub finetune_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 4,
            warmup_epochs: 2,
            finetune_epochs: 4,
            pretrain_lr: 1e-3,
            warmup_lr: 1e-3,
            finetune_lr: 1e-5,
            plateau_patience: 3,
            plateau_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Warmup,
    Finetune,
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegmentationModel,
    pub log: Vec<EpochLog>,
}

/// One stage of the schedule.
struct StagePlan {
    stage: Stage,
    epochs: usize,
    lr: f64,
    /// `(patience, factor)` of the plateau decay, if any.
    plateau: Option<(usize, f64)>,
}

fn run_epochs(
    model: &mut SegmentationModel,
    samples: &[Sample],
    table: &ClassTable,
    plan: StagePlan,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let stage = plan.stage;
    let (use_stela, train) = match stage {
        Stage::Pretrain => (false, Trainable::ALL),
        Stage::Warmup => (true, Trainable::STELA_ONLY),
        Stage::Finetune => (model.stela.is_some(), Trainable::ALL),
    };
    let mut lr = plan.lr;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..plan.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.loss_and_grads(&samples[i], table, use_stela, train)?;
            model.apply(&grads, lr);
            total += loss;
        }
        let loss = total / samples.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("{stage:?} epoch {epoch}: mean loss {loss}")));
        }
        log.push(EpochLog { stage, epoch, lr, loss });
        if let Some((patience, factor)) = plan.plateau {
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    lr *= factor;
                    stale = 0;
                }
            }
        }
    }
    Ok(())
}

/// Trains a freshly initialised model. With `with_stela` the attention
/// block is attached after pretraining; otherwise this is the baseline.
pub fn train(
    cfg: &ModelConfig,
    init: SegmentationModel,
    samples: &[Sample],
    table: &ClassTable,
    schedule: &Schedule,
    with_stela: bool,
    seed: u64,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init;
    let mut log = Vec::new();
    let pretrain = StagePlan {
        stage: Stage::Pretrain,
        epochs: schedule.pretrain_epochs,
        lr: schedule.pretrain_lr,
        plateau: None,
    };
    run_epochs(&mut model, samples, table, pretrain, &mut rng, &mut log)?;
    if with_stela {
        model.attach_stela(cfg, &mut rng)?;
        let warmup = StagePlan {
            stage: Stage::Warmup,
            epochs: schedule.warmup_epochs,
            lr: schedule.warmup_lr,
            plateau: None,
        };
        run_epochs(&mut model, samples, table, warmup, &mut rng, &mut log)?;
    }
    let finetune = StagePlan {
        stage: Stage::Finetune,
        epochs: schedule.finetune_epochs,
        lr: schedule.finetune_lr,
        plateau: Some((schedule.plateau_patience, schedule.plateau_factor)),
    };
    run_epochs(&mut model, samples, table, finetune, &mut rng, &mut log)?;
    Ok(TrainOutcome { model, log })
}

/// Point-level confusion over the current frames of `samples`.
pub fn evaluate(
    model: &SegmentationModel,
    samples: &[Sample],
    table: &ClassTable,
) -> Result<(ConfusionMatrix, IouReport)> {
    let use_stela = model.stela.is_some();
    let mut cm = ConfusionMatrix::new(table.num_classes());
    for s in samples {
        let pred = model.predict_points(s, use_stela)?;
        cm = accumulate_confusion(&pred, &s.current.point_labels, table, cm)?;
    }
    let report = miou(&cm)?;
    Ok((cm, report))
}

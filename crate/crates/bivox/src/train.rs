//! Training loops: stage training, refiner pretraining and the two-stage
//! interpolated pipeline.
//!
//! Everything is teacher-forced: backbone inputs are the ground-truth
//! combined embeddings, the refiner conditions on chunks of the resulting
//! hidden states. Runs are deterministic per schedule seed — batches are
//! drawn by an epoch permutation from a seeded generator and all kernels
//! are single-threaded.

use crate::align::{build_pattern_sample, AlignedSequence};
use crate::checkpoint::{merge_checkpoints, Checkpoint};
use crate::config::{ModelConfig, Stage, TrainSchedule};
use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::graph::{batch_forward, TapedModel};
use crate::model::{is_srh_pretrain_param, Model};
use crate::optim::AdamW;
use crate::pattern::InteractionPattern;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sequences padded to a common step count with mask-false positions.
pub struct Batch {
    pub sequences: Vec<AlignedSequence>,
}

impl Batch {
    pub fn new(mut sequences: Vec<AlignedSequence>) -> Batch {
        let steps = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        for s in &mut sequences {
            s.pad_to_steps(steps);
        }
        Batch { sequences }
    }
}

/// Per-step loss trace of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
}

fn build_samples(
    corpus: &[CorpusRecord],
    config: &ModelConfig,
    pattern_override: Option<InteractionPattern>,
) -> Result<Vec<AlignedSequence>> {
    let vocab = config.vocab()?;
    corpus
        .iter()
        .map(|r| {
            let p = pattern_override.unwrap_or(r.pattern);
            build_pattern_sample(&r.turns, p, &vocab, config.k)
        })
        .collect()
}

struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            cursor: n, // force a shuffle on first use
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn optimize<S: Scalar, F: Fn(&str) -> bool>(
    model: &mut Model<S>,
    samples: &[AlignedSequence],
    schedule: &TrainSchedule,
    trainable: F,
    srh_only_objective: bool,
) -> Result<TrainReport> {
    schedule.validate()?;
    if samples.is_empty() && schedule.total_steps > 0 {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut sampler = EpochSampler::new(samples.len(), schedule.seed);
    let mut opt = AdamW::new(model);
    let mut losses = Vec::with_capacity(schedule.total_steps);
    for step in 0..schedule.total_steps {
        let idx = sampler.next_batch(schedule.batch_size);
        let batch = Batch::new(idx.iter().map(|&i| samples[i].clone()).collect());
        let mut tm = TapedModel::new(model);
        let fwd = batch_forward(&mut tm, &batch.sequences)?;
        let objective = if srh_only_objective { fwd.l_srh } else { fwd.total };
        let loss = tm.tape.scalar_value(objective).as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss={loss}, l_th={}, l_srh={}",
                    tm.tape.scalar_value(fwd.l_th).as_f64(),
                    tm.tape.scalar_value(fwd.l_srh).as_f64()
                ),
            });
        }
        losses.push(loss);
        let mut grads = tm.tape.backward(objective);
        let grad_map = tm.grad_map(&mut grads);
        drop(tm);
        opt.step(model, &grad_map, schedule.lr_at(step), &trainable);
    }
    Ok(TrainReport {
        stage: schedule.stage,
        steps: schedule.total_steps,
        first_loss: losses.first().copied().unwrap_or(0.0),
        final_loss: losses.last().copied().unwrap_or(0.0),
        losses,
    })
}

/// Full-parameter optimization of the multi-task loss over a pattern-mixed
/// corpus. `schedule.stage` must be one of the two fine-tuning stages.
pub fn train_stage<S: Scalar>(
    init: &Checkpoint,
    corpus: &[CorpusRecord],
    config: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<(Checkpoint, TrainReport)> {
    if schedule.stage == Stage::PretrainSrh {
        return Err(Error::WrongStage {
            expected: "stage1 or stage2".into(),
            found: schedule.stage.name().into(),
        });
    }
    let mut model = Model::<S>::from_checkpoint(init, Some(config.clone()))?;
    let samples = build_samples(corpus, config, None)?;
    let report = optimize(&mut model, &samples, schedule, |_| true, false)?;
    Ok((model.to_checkpoint(), report))
}

/// Streaming text-to-speech pretraining of the refiner: every dialogue is
/// rendered as a text-in, parallel-out sample, only the refiner loss is
/// optimized, and only the refiner (plus its input projections) trains.
/// Everything else stays bitwise frozen.
pub fn pretrain_srh<S: Scalar>(
    init: &Checkpoint,
    corpus: &[CorpusRecord],
    config: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<(Checkpoint, TrainReport)> {
    if schedule.stage != Stage::PretrainSrh {
        return Err(Error::WrongStage {
            expected: Stage::PretrainSrh.name().into(),
            found: schedule.stage.name().into(),
        });
    }
    if !config.srh_enabled {
        return Err(Error::Config(
            "refiner pretraining needs the refiner enabled".into(),
        ));
    }
    let mut model = Model::<S>::from_checkpoint(init, Some(config.clone()))?;
    let samples = build_samples(corpus, config, Some(InteractionPattern::T2M))?;
    let report = optimize(&mut model, &samples, schedule, is_srh_pretrain_param, true)?;
    Ok((model.to_checkpoint(), report))
}

/// Output of the two-stage pipeline with the intermediate artifacts.
pub struct CocktailOutput {
    pub stage1: Checkpoint,
    pub merged: Checkpoint,
    pub stage2: Checkpoint,
    pub report1: TrainReport,
    pub report2: TrainReport,
}

/// The two-stage recipe: aggressive stage-one fine-tune, interpolation of
/// the shared parameters back toward the base model, then a low-rate
/// stage-two fine-tune of the merged model.
pub fn train_core_cocktail<S: Scalar>(
    init: &Checkpoint,
    corpus: &[CorpusRecord],
    config: &ModelConfig,
    sched1: &TrainSchedule,
    sched2: &TrainSchedule,
    alpha: f64,
) -> Result<CocktailOutput> {
    let mut base = init.clone();
    base.retain(crate::model::is_base_param);
    let (stage1, report1) = train_stage::<S>(init, corpus, config, sched1)?;
    let merged = merge_checkpoints(&stage1, &base, alpha)?;
    let (stage2, report2) = train_stage::<S>(&merged, corpus, config, sched2)?;
    Ok(CocktailOutput {
        stage1,
        merged,
        stage2,
        report1,
        report2,
    })
}

//! The training loop and per-step evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ExperimentConfig, TrainingState};
use crate::data::FeatureDataset;
use crate::embedder::EmbeddingBatch;
use crate::error::{MdrError, Result};
use crate::evaluation::{
    self, LossComponents, MetricsRecord, SplitMetrics, METRICS_SCHEMA_VERSION,
};
use crate::losses::{self, LossKind, Mined, ObjectiveParams};
use crate::mdr::{batch_statistics, DistanceStats, PairSet, DISTANCE_EPS};
use crate::numerics::{Tape, Tensor};
use crate::sampling::{self, BatchSpec, SamplerState, SamplingStrategy};

/// Offsets separating the random streams derived from one run seed.
const SAMPLER_STREAM: u64 = 0x5a17_0001;
const EVAL_STREAM: u64 = 0x5a17_0002;

/// Plain-value distances for every pair, computed like the tape does.
pub fn pair_distance_values(embeddings: &Tensor, pairs: &PairSet) -> Vec<f64> {
    pairs
        .pairs
        .iter()
        .map(|&(i, j)| {
            let sq: f64 = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (sq + DISTANCE_EPS).sqrt()
        })
        .collect()
}

/// Picks the pairs or triplets the base loss trains on.
pub fn mine(
    kind: LossKind,
    embeddings: &Tensor,
    labels: &[usize],
    sampler: &mut SamplerState,
) -> Mined {
    match (kind, sampler.strategy) {
        (LossKind::Triplet, _) => {
            Mined::Triplets(sampling::mine_triplets(embeddings, labels, sampler))
        }
        (_, SamplingStrategy::AllValid) => Mined::Pairs(sampling::all_pairs(labels)),
        _ => Mined::Pairs(sampling::mine_triplets(embeddings, labels, sampler).to_pairs()),
    }
}

struct StepOutcome {
    loss: LossComponents,
    batch_mean: f64,
    batch_std: f64,
}

/// Records the objective for one batch and returns its components; when
/// `update` is set the running statistics absorb the batch first and the
/// optimizer applies the gradient.
fn run_batch(
    state: &mut TrainingState,
    inputs: Tensor,
    labels: Vec<usize>,
    sampler: &mut SamplerState,
    update: bool,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs);
    let e = state.embedder.embed(&mut tape, &state.params, x)?;
    let batch = EmbeddingBatch::new(&tape, e, labels)?;
    let embeddings = tape.value(e).clone();

    let distances = pair_distance_values(&embeddings, &PairSet::all(&batch.labels));
    let (batch_mean, batch_std) = batch_statistics(&distances);
    if update {
        state.stats.update(&distances);
    }
    let stats = if state.stats.initialized {
        state.stats.clone()
    } else {
        let mut s = DistanceStats::new(0.0)?;
        s.update(&distances);
        s
    };

    let mined = mine(state.config.loss.kind, &embeddings, &batch.labels, sampler);
    let levels = tape.param(&state.params, state.levels.param_id());
    let beta = state.beta.map(|b| tape.param(&state.params, b));
    let objective = losses::objective(
        &mut tape,
        &batch,
        &mined,
        &stats,
        ObjectiveParams {
            levels: state.config.mdr.enabled.then_some(levels),
            beta,
        },
        &state.config.loss,
    )?;
    let loss = LossComponents {
        dml: tape.value(objective.dml).item(),
        mdr: objective
            .mdr
            .as_ref()
            .map_or(0.0, |t| tape.value(t.loss).item()),
        total: tape.value(objective.total).item(),
    };
    if !loss.total.is_finite() {
        return Err(MdrError::NonFinite(format!("loss {loss:?}")));
    }
    if update {
        let grads = tape.backward(objective.total)?;
        state.adam.step(&mut state.params, &grads)?;
        state.step += 1;
    }
    Ok(StepOutcome {
        loss,
        batch_mean,
        batch_std,
    })
}

fn unit_rows(t: &Tensor) -> Tensor {
    let data = t
        .row_iter()
        .flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(move |x| if n > 0.0 { x / n } else { 0.0 })
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Full evaluation battery on one split. `tag` separates the random stream
/// of the loss batch between splits.
pub fn evaluate_split(
    state: &TrainingState,
    split: &FeatureDataset,
    tag: u64,
) -> Result<SplitMetrics> {
    let config = &state.config;
    let embeddings = state
        .embedder
        .embed_values(&state.params, split.features())?;
    let recall =
        evaluation::recall_at_k_within(&embeddings, split.labels(), &config.evaluation.ks)?;
    let recall_l2 = if config.evaluation.l2_pass {
        Some(evaluation::recall_at_k_within(
            &unit_rows(&embeddings),
            split.labels(),
            &config.evaluation.ks,
        )?)
    } else {
        None
    };
    let norms = evaluation::norm_statistics(&embeddings);

    // Loss components on a fixed batch, without touching the running state.
    let spec = BatchSpec::new(
        config.sampler.classes_per_batch.min(split.classes().len()),
        config.sampler.instances_per_class,
    )?;
    let mut sampler = SamplerState::new(&config.sampler, state.seed ^ EVAL_STREAM ^ tag);
    let (inputs, labels) = sampling::sample_batch(split, &spec, &mut sampler)?;
    let mut probe = state.clone();
    let outcome = run_batch(&mut probe, inputs, labels, &mut sampler, false)?;

    let stats = if state.stats.initialized {
        state.stats.clone()
    } else {
        let mut s = DistanceStats::new(0.0)?;
        s.mu_star = outcome.batch_mean;
        s.sigma_star = outcome.batch_std.max(crate::mdr::SIGMA_FLOOR);
        s.initialized = true;
        s
    };
    let level_counts = evaluation::split_level_histogram(
        &embeddings,
        split.labels(),
        &stats,
        state.level_values(),
    );

    Ok(SplitMetrics {
        recall,
        recall_l2,
        norms,
        level_counts,
        loss: outcome.loss,
    })
}

pub const TRAIN_TAG: u64 = 1;
pub const TEST_TAG: u64 = 2;

/// A run in progress: state plus the data and sampler it draws from.
pub struct Trainer {
    pub state: TrainingState,
    pub train: FeatureDataset,
    pub test: FeatureDataset,
    sampler: SamplerState,
    spec: BatchSpec,
    last_loss: LossComponents,
    order_warned: bool,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.load_splits()?;
        let state = TrainingState::new(config, train.dim(), seed)?;
        Self::resume(state, train, test)
    }

    pub fn resume(
        state: TrainingState,
        train: FeatureDataset,
        test: FeatureDataset,
    ) -> Result<Self> {
        let spec = state.config.sampler.batch_spec()?;
        if train.classes().len() < spec.classes_per_batch {
            return Err(MdrError::config(format!(
                "training split has {} classes but batches need {}",
                train.classes().len(),
                spec.classes_per_batch
            )));
        }
        let sampler = SamplerState::new(&state.config.sampler, state.seed ^ SAMPLER_STREAM);
        Ok(Self {
            state,
            train,
            test,
            sampler,
            spec,
            last_loss: LossComponents::default(),
            order_warned: false,
        })
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossComponents> {
        let (inputs, labels) = sampling::sample_batch(&self.train, &self.spec, &mut self.sampler)?;
        let before = self.state.stats.clone();
        let outcome =
            run_batch(&mut self.state, inputs, labels, &mut self.sampler, true).map_err(|e| {
                MdrError::NonFinite(format!(
                    "training aborted at step {}: {e}; running stats mu*={} sigma*={}; levels {:?}",
                    self.state.step + 1,
                    before.mu_star,
                    before.sigma_star,
                    self.state.level_values()
                ))
            })?;
        if !self.order_warned && self.state.levels.order_violated(&self.state.params) {
            log::warn!(
                "step {}: levels left ascending order: {:?}",
                self.state.step,
                self.state.level_values()
            );
            self.order_warned = true;
        }
        log::trace!(
            "step {} loss {:?} batch distance mean {} std {}",
            self.state.step,
            outcome.loss,
            outcome.batch_mean,
            outcome.batch_std
        );
        self.last_loss = outcome.loss;
        Ok(outcome.loss)
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let train = evaluate_split(&self.state, &self.train, TRAIN_TAG)?;
        let test = evaluate_split(&self.state, &self.test, TEST_TAG)?;
        let r1 = |m: &SplitMetrics| m.recall.first().map_or(0.0, |r| r.recall);
        Ok(MetricsRecord {
            schema: METRICS_SCHEMA_VERSION,
            seed: self.state.seed,
            step: self.state.step,
            levels: self.state.level_values().to_vec(),
            mu_star: self.state.stats.mu_star,
            sigma_star: self.state.stats.sigma_star,
            step_loss: self.last_loss,
            gap: r1(&train) - r1(&test),
            train,
            test,
        })
    }
}

/// Result of one seed of a run.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

/// Trains one seed, writing `metrics.jsonl` and `checkpoint.json` under `dir`.
pub fn train_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| MdrError::io(dir, e))?;
    let metrics_path = dir.join(super::METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| MdrError::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    let mut trainer = Trainer::new(config, seed)?;
    let mut records = Vec::new();

    let mut emit = |record: MetricsRecord, out: &mut BufWriter<File>| -> Result<()> {
        let line = serde_json::to_string(&record)?;
        writeln!(out, "{line}").map_err(|e| MdrError::io(&metrics_path, e))?;
        records.push(record);
        Ok(())
    };

    emit(trainer.evaluate()?, &mut out)?;
    let steps = config.optimizer.steps;
    for step in 1..=steps {
        trainer.step()?;
        if step % config.optimizer.eval_interval == 0 || step == steps {
            emit(trainer.evaluate()?, &mut out)?;
            log::info!("seed {seed} step {step}/{steps}");
        }
        let every = config.optimizer.checkpoint_interval;
        if every > 0 && step % every == 0 && step != steps {
            trainer
                .state
                .save(&dir.join(format!("checkpoint-{step}.json")))?;
        }
    }
    out.flush().map_err(|e| MdrError::io(dir, e))?;
    trainer.state.save(&dir.join(super::CHECKPOINT_FILE))?;
    Ok(SeedOutcome { seed, records })
}

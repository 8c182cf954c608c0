//! Pre-training and fine-tuning loops: batching, optimization, loss curves,
//! and per-epoch checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{AspectExample, LabeledSentence};
use crate::error::{Result, ScaptError};
use crate::finetune::finetune_loss;
use crate::model::{add_classifier_head, check_compatible, init_params, HeadSet};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::pretrain::joint_pretrain_loss;
use crate::sampler::balanced_batches;
use crate::tape::Tape;
use crate::vocab::Vocab;

/// One logged optimizer step of the pre-training loop.
#[derive(Debug, Clone)]
pub struct PretrainStepLog {
    pub step: u64,
    pub total: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub masked_prediction: f64,
    pub masked_prediction_raw: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub params: ParamSet,
    pub steps: u64,
    pub logs: Vec<PretrainStepLog>,
    pub checkpoint_path: PathBuf,
}

fn write_curves(path: &Path, logs: &[PretrainStepLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,total,contrastive,reconstruction,masked_prediction,lr")?;
    for log in logs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            log.step, log.total, log.contrastive, log.reconstruction, log.masked_prediction, log.lr
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Fresh parameters for a pre-training run, seeded from the run config.
pub fn init_pretrain_params(config: &RunConfig, vocab: &Vocab) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_params(
        &config.encoder,
        vocab.len(),
        HeadSet {
            pretrain: true,
            classifier: false,
        },
        &mut rng,
    )
}

/// Runs the joint pre-training objective over the corpus. Checkpoints after
/// every epoch; a non-finite loss aborts the run but leaves the last healthy
/// checkpoint on disk.
pub fn pretrain_loop(
    config: &RunConfig,
    vocab: &Vocab,
    corpus: &[LabeledSentence],
    out_dir: &Path,
    dropout_rate: f64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut params = init_pretrain_params(config, vocab)?;
    let mut adam = AdamState::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let labels: Vec<_> = corpus.iter().map(|s| s.label).collect();
    let mut logs: Vec<PretrainStepLog> = Vec::new();
    let checkpoint_path = out_dir.join("pretrain.ckpt.json");
    let curves_path = out_dir.join("pretrain_curves.csv");
    let run_config = config.to_json()?;
    let mut checkpointed = false;
    for epoch in 0..config.epochs {
        let batches = balanced_batches(&labels, config.batch_size, &mut rng)?;
        if batches.is_empty() {
            return Err(ScaptError::Config(
                "corpus too small for any label-balanced batch".into(),
            ));
        }
        for batch_indices in &batches {
            let batch: Vec<LabeledSentence> =
                batch_indices.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let joint = joint_pretrain_loss(
                &mut tape,
                &binding,
                &config.encoder,
                &config.pretrain,
                vocab,
                &batch,
                &mut rng,
                dropout_rate,
            );
            let joint = match joint {
                Ok(j) => j,
                Err(ScaptError::NonFinite(what)) => {
                    write_curves(&curves_path, &logs)?;
                    return Err(ScaptError::TrainingAborted(format!(
                        "non-finite value in {what} at step {}; last checkpoint kept",
                        adam.step
                    )));
                }
                Err(e) => return Err(e),
            };
            let total = tape.value(joint.total).data[0];
            if !total.is_finite() {
                write_curves(&curves_path, &logs)?;
                return Err(ScaptError::TrainingAborted(format!(
                    "non-finite loss at step {}; last checkpoint kept",
                    adam.step
                )));
            }
            let log_entry = PretrainStepLog {
                step: adam.step,
                total,
                contrastive: tape.value(joint.contrastive).data[0],
                reconstruction: tape.value(joint.reconstruction_sum).data[0],
                masked_prediction: tape.value(joint.masked_prediction_sum).data[0],
                masked_prediction_raw: joint.masked_prediction_raw_sum,
                lr: adam.effective_lr(),
            };
            tape.backward(joint.total)?;
            let grads = binding.grads(&tape);
            adam.step(&mut params, &grads)?;
            log::info!(
                "pretrain step {} total {:.4} sup {:.4} rec {:.4} map {:.4}",
                log_entry.step,
                log_entry.total,
                log_entry.contrastive,
                log_entry.reconstruction,
                log_entry.masked_prediction
            );
            logs.push(log_entry);
        }
        checkpoint::save(&checkpoint_path, &params, Some(run_config.clone()))?;
        checkpointed = true;
        log::info!("epoch {} done, checkpoint written", epoch + 1);
    }
    if !checkpointed {
        // zero-epoch runs still produce a usable (untrained) checkpoint
        checkpoint::save(&checkpoint_path, &params, Some(run_config))?;
    }
    write_curves(&curves_path, &logs)?;
    Ok(PretrainOutcome {
        params,
        steps: adam.step,
        logs,
        checkpoint_path,
    })
}

/// Loads pre-trained weights and attaches a freshly initialized classifier
/// head. The sentiment projection travels with the encoder unchanged.
pub fn prepare_finetune_params(
    checkpoint_path: &Path,
    config: &RunConfig,
) -> Result<ParamSet> {
    let (mut params, _) = checkpoint::load(checkpoint_path)?;
    check_compatible(&params, &config.encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    add_classifier_head(&mut params, &config.encoder, &mut rng);
    Ok(params)
}

/// Randomly initialized encoder plus classifier head, the no-pretrain control.
pub fn init_finetune_params(config: &RunConfig, vocab: &Vocab) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_params(
        &config.encoder,
        vocab.len(),
        HeadSet {
            pretrain: false,
            classifier: true,
        },
        &mut rng,
    )
}

pub struct FinetuneOutcome {
    pub params: ParamSet,
    pub steps: u64,
    /// (step, loss, lr) per optimizer step.
    pub logs: Vec<(u64, f64, f64)>,
}

/// Supervised fine-tuning over aspect examples with shuffled mini-batches.
/// Zero epochs returns the starting weights untouched.
pub fn finetune_loop(
    config: &RunConfig,
    vocab: &Vocab,
    mut params: ParamSet,
    train: &[AspectExample],
    dropout_rate: f64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() && config.epochs > 0 {
        return Err(ScaptError::Contract("finetune_loop: empty training set".into()));
    }
    let mut adam = AdamState::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<AspectExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let dropout_on = dropout_rate > 0.0;
            let loss = {
                let mut ctx = crate::model::DropoutCtx {
                    rate: dropout_rate,
                    rng: &mut rng,
                };
                finetune_loss(
                    &mut tape,
                    &binding,
                    &config.encoder,
                    vocab,
                    &batch,
                    if dropout_on { Some(&mut ctx) } else { None },
                    None,
                )?
            };
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(ScaptError::TrainingAborted(format!(
                    "non-finite fine-tune loss at step {}",
                    adam.step
                )));
            }
            logs.push((adam.step, value, adam.effective_lr()));
            tape.backward(loss)?;
            let grads = binding.grads(&tape);
            adam.step(&mut params, &grads)?;
        }
    }
    Ok(FinetuneOutcome {
        params,
        steps: adam.step,
        logs,
    })
}

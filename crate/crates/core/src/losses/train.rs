use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, LossKind};
use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Mode, ModelParams};
use crate::numcore::{adam_step, AdamConfig, Matrix, OptimState};

/// One labelled recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: ActivityMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub s_max: usize,
    pub adam: AdamConfig,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    /// Mean over examples of the loss per scored entry.
    pub mean_loss: f64,
    /// Optimizer steps taken in this epoch.
    pub steps: u64,
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One shuffled pass of minibatch Adam steps.
///
/// Each recording in a batch is evaluated on its own graph at its own
/// length and the gradients are summed in batch order, which equals
/// padding to a common length with a frame mask. Shuffling and dropout
/// depend only on `(hyper.seed, epoch, optimizer step)`, so a run resumed
/// from a checkpoint replays the same sequence.
pub fn train_epoch(
    params: &mut ModelParams,
    data: &[Example],
    kind: LossKind,
    optim: &mut OptimState,
    hyper: &TrainHyper,
    epoch: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, epoch)));

    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(hyper.batch_size) {
        let mut sum: Option<Vec<Matrix>> = None;
        for (k, &i) in batch.iter().enumerate() {
            let ex = &data[i];
            let dropout_seed = mix_seed(mix_seed(hyper.seed, optim.step), k as u64);
            let eval = evaluate(
                params,
                &ex.features,
                &ex.labels,
                kind,
                hyper.s_max,
                Mode::Train { seed: dropout_seed },
                true,
            )?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    example: ex.id.clone(),
                    value: eval.loss,
                });
            }
            total += eval.normalized();
            let grads = eval.grads.expect("requested gradients");
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let grads = sum.expect("non-empty batch");
        adam_step(params.tensors_mut(), &grads, optim, &hyper.adam)?;
        steps += 1;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: total / data.len() as f64,
        steps,
    })
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{backward_raw, validate_batch, Layout};
use super::optim::OptimizerState;
use super::state::ModelState;
use crate::data::{Corpus, Pair};
use crate::error::{Error, Result};

/// Result of a local training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub optimizer: OptimizerState,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
}

/// `steps` optimizer updates on seeded-shuffled minibatches, reshuffling at
/// each epoch boundary.
pub fn train_steps(
    model: ModelState,
    optimizer: OptimizerState,
    corpus: &Corpus,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    validate_batch(model.config(), corpus.pairs())?;
    let mut model = model;
    let mut optimizer = optimizer;
    let layout = Layout::new(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.n_k()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(steps);
    let mut batch: Vec<Pair> = Vec::with_capacity(batch_size);
    for _ in 0..steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus.pairs()[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = backward_raw(&model, &layout, &batch);
        losses.push(loss);
        optimizer.apply(&mut model, &grads);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        losses,
    })
}

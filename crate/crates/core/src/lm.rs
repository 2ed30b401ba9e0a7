//! Plain next-token training on token sequences with a target mask. Used to
//! pretrain the shared base model and to fine-tune the teacher.

use crate::actor::ce_on_tape;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Input, ModelParams, ParamSet, Segment, TapeCache};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A token sequence where `targets[j]` marks token j as predicted (from
/// position j−1). `targets[0]` is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<bool>,
}

impl LmExample {
    /// (predicting positions, target tokens)
    pub fn supervision(&self) -> (Vec<usize>, Vec<u32>) {
        (1..self.tokens.len()).filter(|&j| self.targets[j]).map(|j| (j - 1, self.tokens[j])).unzip()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { steps: 6000, batch_size: 8, optim: AdamWConfig { lr: 2e-3, ..Default::default() }, seed: 0 }
    }
}

/// Mean CE (nats) of one example without gradients.
pub fn lm_loss(model: &ModelParams, ex: &LmExample) -> Result<f64> {
    let (pos, tgt) = ex.supervision();
    let out = model.forward(&[Input::Tokens(&ex.tokens)])?;
    Ok(crate::actor::mean_ce(&out.logits.gather_rows(&pos), &tgt))
}

/// Minibatch AdamW on the masked next-token loss. Returns the per-step
/// training loss.
pub fn train_lm(
    model: &mut ModelParams,
    data: &[LmExample],
    cfg: &LmTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InsufficientData("no language-model examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim.clone(), &model.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let (pos, tgt) = ex.supervision();
            if pos.is_empty() {
                continue;
            }
            let mut cache = TapeCache::new();
            let h = vars.forward(&mut tape, &mut cache, &[Segment::Tokens(&ex.tokens)])?;
            let rows = tape.gather_rows(h, &pos);
            let logits = vars.logits(&mut tape, rows);
            terms.push(ce_on_tape(&mut tape, logits, &tgt));
        }
        if terms.is_empty() {
            continue;
        }
        let stacked = tape.concat_rows(&terms);
        let loss = tape.mean_all(stacked);
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::TrainingFault(format!("non-finite language-model loss at step {step}")));
        }
        let mut grads = tape.backward(loss);
        let mut g: Vec<Tensor> = vars
            .all()
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).rows(), tape.value(v).cols())))
            .collect();
        clip_global_norm(&mut g, cfg.optim.grad_clip);
        opt.step(model.tensors_mut(), &g, cfg.optim.lr_at(step, cfg.steps));
        on_step(step, value);
        losses.push(value);
    }
    Ok(losses)
}

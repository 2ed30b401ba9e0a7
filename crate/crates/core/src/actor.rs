//! Actor objective and training loop: task cross-entropy under curriculum
//! mixed payloads, Jensen-Shannon separation between matched and mismatched
//! latents, and alignment of latent-conditioned predictions to the
//! plan-conditioned ones.

use crate::autograd::{Tape, Var};
use crate::channel::{
    compose_actor_input, curriculum_replace, AdapterParams, AdapterVars, ComposedInput, LatentMessage, Payload,
};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars, ParamSet, TapeCache};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::tensor::{cst, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::io::Write;

/// Replacement rates sampled during training.
pub const RATE_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Guard added to squared norms before normalizing logit vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    Linear,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorLossWeights {
    pub lambda_sep_range: [f64; 2],
    pub lambda_align_range: [f64; 2],
    pub beta: f64,
    pub alpha: f64,
    pub sep_schedule: Anneal,
    /// Fraction of training over which a linear ramp runs.
    pub ramp_frac: f64,
}

impl Default for ActorLossWeights {
    fn default() -> Self {
        Self {
            lambda_sep_range: [0.1, 2.0],
            lambda_align_range: [0.1, 0.2],
            beta: 1.0,
            alpha: 1.0,
            sep_schedule: Anneal::Linear,
            ramp_frac: 0.5,
        }
    }
}

impl ActorLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("lambda_sep_range", self.lambda_sep_range), ("lambda_align_range", self.lambda_align_range)] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::Config(format!("{name} must satisfy 0 < low <= high, got {r:?}")));
            }
        }
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("beta and alpha must be non-negative".into()));
        }
        Ok(())
    }

    /// (λ_sep, λ_align) at `step` of `total`. λ_sep ramps linearly from the
    /// low to the high end over the first `ramp_frac` of training (or stays
    /// at the midpoint when constant); λ_align is the midpoint of its range.
    pub fn lambdas(&self, step: usize, total: usize) -> (f64, f64) {
        let [lo, hi] = self.lambda_sep_range;
        let sep = match self.sep_schedule {
            Anneal::Constant => 0.5 * (lo + hi),
            Anneal::Linear => {
                let horizon = (self.ramp_frac * total as f64).max(1.0);
                lo + (hi - lo) * (step as f64 / horizon).min(1.0)
            }
        };
        let [alo, ahi] = self.lambda_align_range;
        (sep, 0.5 * (alo + ahi))
    }
}

/// Per-step decomposition of the actor objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean cross-entropy over supervised positions, nats.
    pub task: f64,
    /// Negative mean Jensen-Shannon divergence, nats.
    pub sep: f64,
    pub align: f64,
    pub lambda_sep: f64,
    pub lambda_align: f64,
    pub total: f64,
}

impl LossReport {
    pub fn js(&self) -> f64 {
        -self.sep
    }
}

/// Index of the message each batch slot receives as its mismatched negative:
/// a cyclic shift by one, which has no fixed points.
pub fn mismatch_permute(n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config("mismatched negatives need a batch of at least 2".into()));
    }
    Ok((0..n).map(|i| (i + 1) % n).collect())
}

fn check_rows(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<()> {
    if p.len() != q.len() || p.iter().zip(q).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Input("distribution shapes differ".into()));
    }
    Ok(())
}

/// KL(p ∥ q) in nats; terms with p = 0 contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Jensen-Shannon divergence with equal weights, nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

/// −mean JS over positions, in [−ln 2, 0].
pub fn js_separation_loss(p_matched: &[Vec<f64>], p_mismatched: &[Vec<f64>]) -> Result<f64> {
    check_rows(p_matched, p_mismatched)?;
    if p_matched.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = p_matched.iter().zip(p_mismatched).map(|(p, q)| js_divergence(p, q)).sum();
    Ok(-s / p_matched.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = (a.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean over positions of β·KL(p_latent ∥ p_plan) + α·(1 − cos(ℓ_latent, ℓ_plan)).
pub fn plan_alignment_loss(
    p_latent: &[Vec<f64>],
    logits_latent: &[Vec<f64>],
    p_plan: &[Vec<f64>],
    logits_plan: &[Vec<f64>],
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    check_rows(p_latent, p_plan)?;
    check_rows(logits_latent, logits_plan)?;
    if p_latent.len() != logits_latent.len() {
        return Err(Error::Input("distribution and logit row counts differ".into()));
    }
    if p_latent.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = (0..p_latent.len())
        .map(|t| beta * kl_divergence(&p_latent[t], &p_plan[t]) + alpha * (1.0 - cosine(&logits_latent[t], &logits_plan[t])))
        .sum();
    Ok(s / p_latent.len() as f64)
}

/// Mean cross-entropy (nats) of `targets` under row-wise softmax of `logits`.
pub fn ce_on_tape<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &[u32]) -> Var {
    let lp = tape.log_softmax(logits);
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = tape.pick_cols(lp, &idx);
    let m = tape.mean_all(picked);
    tape.scale(m, -S::one())
}

/// Mean over rows of JS(softmax(a), softmax(b)), nats.
pub fn js_on_tape<S: Scalar>(tape: &mut Tape<S>, logits_a: Var, logits_b: Var) -> Var {
    let la = tape.log_softmax(logits_a);
    let lb = tape.log_softmax(logits_b);
    let lm = tape.log_add_exp(la, lb);
    let lm = tape.add_scalar(lm, cst(-LN_2));
    let pa = tape.exp(la);
    let pb = tape.exp(lb);
    let da = tape.sub(la, lm);
    let db = tape.sub(lb, lm);
    let ta = tape.mul(pa, da);
    let tb = tape.mul(pb, db);
    let t = tape.add(ta, tb);
    let rows = tape.sum_each_row(t);
    let m = tape.mean_all(rows);
    tape.scale(m, cst(0.5))
}

/// Rows of `x` scaled to unit norm (with a small guard).
pub fn normalize_rows_on_tape<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let sq = tape.mul(x, x);
    let n2 = tape.sum_each_row(sq);
    let n2 = tape.add_scalar(n2, cst(NORM_EPS));
    let n = tape.sqrt(n2);
    let inv = tape.recip(n);
    tape.mul_col(x, inv)
}

/// Mean over rows of β·KL(softmax(ℓ) ∥ softmax(ℓ_plan)) + α·(1 − cos(ℓ, ℓ_plan)).
pub fn align_on_tape<S: Scalar>(tape: &mut Tape<S>, logits: Var, plan_logits: Var, beta: f64, alpha: f64) -> Var {
    let lp = tape.log_softmax(logits);
    let lq = tape.log_softmax(plan_logits);
    let p = tape.exp(lp);
    let d = tape.sub(lp, lq);
    let pd = tape.mul(p, d);
    let kl_rows = tape.sum_each_row(pd);
    let kl = tape.mean_all(kl_rows);
    let a = normalize_rows_on_tape(tape, logits);
    let b = normalize_rows_on_tape(tape, plan_logits);
    let ab = tape.mul(a, b);
    let cos_rows = tape.sum_each_row(ab);
    let cos = tape.mean_all(cos_rows);
    let one_minus = tape.scale(cos, -S::one());
    let one_minus = tape.add_scalar(one_minus, S::one());
    let kl = tape.scale(kl, cst(beta));
    let c = tape.scale(one_minus, cst(alpha));
    tape.add(kl, c)
}

/// One training instance: the receiver's view, the teacher-forced
/// continuation and the sender's message for this task.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorExample {
    pub task_tokens: Vec<u32>,
    pub continuation: Vec<u32>,
    pub mask: Vec<bool>,
    pub message: LatentMessage,
}

impl ActorExample {
    fn compose<S: Scalar>(&self, payload: Payload<'_, S>, bop: u32, eop: u32) -> Result<ComposedInput<S>> {
        compose_actor_input(&self.task_tokens, payload, &self.continuation, &self.mask, bop, eop)
    }

    /// Input with the full message in the slot; the caller supplies the
    /// adapted rows on its tape.
    pub fn latent_input<S: Scalar>(&self, bop: u32, eop: u32) -> Result<ComposedInput<S>> {
        let lat: Tensor<S> = self.message.values.cast();
        self.compose(Payload::Latent(&lat), bop, eop)
    }

    pub fn text_input<S: Scalar>(&self, bop: u32, eop: u32) -> Result<ComposedInput<S>> {
        self.compose(Payload::Text(&self.message.plan_tokens), bop, eop)
    }

    pub fn empty_input<S: Scalar>(&self, bop: u32, eop: u32) -> Result<ComposedInput<S>> {
        self.compose(Payload::None, bop, eop)
    }
}

fn supervised_logits_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    actor: &ModelVars,
    adapter: &AdapterVars,
    input: &ComposedInput<S>,
    raw_latent: Option<&Tensor<S>>,
) -> Result<Var> {
    let adapted = raw_latent.map(|l| {
        let v = tape.constant(l.clone());
        adapter.apply(tape, v)
    });
    let mut cache = TapeCache::new();
    let hidden = actor.forward(tape, &mut cache, &input.segments(adapted))?;
    let rows = tape.gather_rows(hidden, &input.supervised);
    Ok(actor.logits(tape, rows))
}

/// Everything needed to score one batch on a tape.
pub struct ActorBatch<'a> {
    pub examples: Vec<&'a ActorExample>,
    /// Replacement rate per example.
    pub rates: Vec<f64>,
}

/// Builds the composite loss for a batch on `tape` and returns the total
/// node with its report. Task CE uses the curriculum-mixed payload; the
/// separation and alignment terms use the full message, with the
/// plan-conditioned logits computed off-tape and entering as constants.
pub fn actor_batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    actor: &ModelParams<S>,
    vars: (&ModelVars, &AdapterVars),
    batch: &ActorBatch<'_>,
    weights: &ActorLossWeights,
    lambdas: (f64, f64),
) -> Result<(Var, LossReport)> {
    let (av, adv) = vars;
    let n = batch.examples.len();
    let perm = mismatch_permute(n)?;
    let (bop, eop) = (actor.config.bop(), actor.config.eop());
    let mut terms = Vec::with_capacity(n);
    let (mut ce_sum, mut js_sum, mut al_sum) = (0.0, 0.0, 0.0);
    for (i, ex) in batch.examples.iter().enumerate() {
        let r = batch.rates[i];
        let (prefix, rest) = curriculum_replace(&ex.message, r)?;
        let prefix: Tensor<S> = prefix.cast();
        let mixed = ex.compose(Payload::Mixed(&prefix, &rest), bop, eop)?;
        let raw = (prefix.rows() > 0).then_some(&prefix);
        let task_logits = supervised_logits_on_tape(tape, av, adv, &mixed, raw)?;
        let ce = ce_on_tape(tape, task_logits, &mixed.targets);

        let full: Tensor<S> = ex.message.values.cast();
        let latent_in = ex.latent_input::<S>(bop, eop)?;
        let full_logits =
            if rest.is_empty() { task_logits } else { supervised_logits_on_tape(tape, av, adv, &latent_in, Some(&full))? };
        let other = batch.examples[perm[i]];
        let other_vals: Tensor<S> = other.message.values.cast();
        let mm_in = ex.compose(Payload::Latent(&other_vals), bop, eop)?;
        let mm_logits = supervised_logits_on_tape(tape, av, adv, &mm_in, Some(&other_vals))?;
        let js = js_on_tape(tape, full_logits, mm_logits);

        let plan_logits = ex.text_input::<S>(bop, eop)?.supervised_logits(actor)?;
        let plan = tape.constant(plan_logits);
        let al = align_on_tape(tape, full_logits, plan, weights.beta, weights.alpha);

        ce_sum += tape.value(ce).item().to_f64().unwrap_or(f64::NAN);
        js_sum += tape.value(js).item().to_f64().unwrap_or(f64::NAN);
        al_sum += tape.value(al).item().to_f64().unwrap_or(f64::NAN);
        let sep = tape.scale(js, cst(-lambdas.0));
        let al = tape.scale(al, cst(lambdas.1));
        let t = tape.add(ce, sep);
        terms.push(tape.add(t, al));
    }
    let stacked = tape.concat_rows(&terms);
    let total = tape.mean_all(stacked);
    let nf = n as f64;
    let report = LossReport {
        task: ce_sum / nf,
        sep: -js_sum / nf,
        align: al_sum / nf,
        lambda_sep: lambdas.0,
        lambda_align: lambdas.1,
        total: tape.value(total).item().to_f64().unwrap_or(f64::NAN),
    };
    Ok((total, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub weights: ActorLossWeights,
    /// Validation every this many steps.
    pub eval_every: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ActorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            optim: AdamWConfig { lr: 1e-3, ..Default::default() },
            weights: ActorLossWeights::default(),
            eval_every: 100,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorLogRow {
    pub step: usize,
    pub ce: f64,
    pub js: f64,
    pub align: f64,
    pub lambda_sep: f64,
    pub lambda_align: f64,
    pub val_loss: Option<f64>,
    /// ln 2 − JS, the distance from maximal separation.
    pub js_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorTrainOutcome {
    pub log: Vec<ActorLogRow>,
    pub best_val: f64,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Composite objective on the validation set with the full message in the
/// slot (r = 1) and fixed `lambdas`. Mismatched messages are a cyclic shift
/// within consecutive chunks of `chunk` examples; a trailing remainder joins
/// the previous chunk.
pub fn validation_loss(
    actor: &ModelParams,
    adapter: &AdapterParams,
    val: &[ActorExample],
    weights: &ActorLossWeights,
    lambdas: (f64, f64),
    chunk: usize,
) -> Result<f64> {
    if val.len() < 2 {
        return Err(Error::InsufficientData(format!("validation needs at least 2 examples, got {}", val.len())));
    }
    let chunk = chunk.max(2);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < val.len() {
        let end = if val.len() - start < 2 * chunk { val.len() } else { start + chunk };
        bounds.push((start, end));
        start = end;
    }
    let mut total = 0.0;
    for (a, b) in bounds {
        let batch = ActorBatch { examples: val[a..b].iter().collect(), rates: vec![1.0; b - a] };
        let mut tape = Tape::new();
        let av = actor.register(&mut tape, false);
        let adv = adapter.register(&mut tape, false);
        let (_, report) = actor_batch_loss(&mut tape, actor, (&av, &adv), &batch, weights, lambdas)?;
        total += report.total * (b - a) as f64;
    }
    Ok(total / val.len() as f64)
}

/// Mean cross-entropy (nats) of `targets` under row-wise softmax, in f64.
pub fn mean_ce(logits: &Tensor, targets: &[u32]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = mx + row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
        s += lse - row[t as usize] as f64;
    }
    s / targets.len() as f64
}

pub fn sample_rate(rng: &mut impl Rng) -> f64 {
    RATE_GRID[rng.random_range(0..RATE_GRID.len())]
}

/// Trains actor and adapter jointly. On return both hold the parameters
/// with the best validation loss seen. A non-finite loss restores those
/// parameters and returns a training fault.
pub fn train_actor(
    actor: &mut ModelParams,
    adapter: &mut AdapterParams,
    train: &[ActorExample],
    val: &[ActorExample],
    cfg: &ActorTrainConfig,
    mut on_step: impl FnMut(&ActorLogRow),
) -> Result<ActorTrainOutcome> {
    cfg.weights.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Config("actor batch size must be at least 2".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!("{} training examples for batch size {}", train.len(), cfg.batch_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_actor = actor.tensors().len();
    let mut params: Vec<&Tensor> = actor.tensors();
    params.extend(adapter.tensors());
    let mut opt = AdamW::new(cfg.optim.clone(), &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    // Model selection uses the objective at the end of the schedule so that
    // scores from different steps are comparable.
    let val_lambdas = cfg.weights.lambdas(cfg.steps.saturating_sub(1), cfg.steps);
    let validate = |actor: &ModelParams, adapter: &AdapterParams| {
        validation_loss(actor, adapter, val, &cfg.weights, val_lambdas, cfg.batch_size)
    };
    let mut best = (validate(actor, adapter)?, 0usize, actor.clone(), adapter.clone());
    let mut since_best = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let mut examples = Vec::with_capacity(cfg.batch_size);
        while examples.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            examples.push(&train[order[cursor]]);
            cursor += 1;
        }
        let rates = (0..examples.len()).map(|_| sample_rate(&mut rng)).collect();
        let batch = ActorBatch { examples, rates };
        let lambdas = cfg.weights.lambdas(step, cfg.steps);
        let mut tape = Tape::new();
        let av = actor.register(&mut tape, true);
        let adv = adapter.register(&mut tape, true);
        let (total, report) = actor_batch_loss(&mut tape, actor, (&av, &adv), &batch, &cfg.weights, lambdas)?;
        if !report.total.is_finite() {
            *actor = best.2;
            *adapter = best.3;
            return Err(Error::TrainingFault(format!(
                "non-finite loss at step {step}: ce={} sep={} align={}",
                report.task, report.sep, report.align
            )));
        }
        let mut grads = tape.backward(total);
        let mut g: Vec<Tensor> = av
            .all()
            .iter()
            .chain(adv.all())
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).rows(), tape.value(v).cols())))
            .collect();
        drop(tape);
        clip_global_norm(&mut g, cfg.optim.grad_clip);
        let lr = cfg.optim.lr_at(step, cfg.steps);
        let mut dst = actor.tensors_mut();
        dst.extend(adapter.tensors_mut());
        debug_assert_eq!(dst.len(), n_actor + g.len() - n_actor);
        opt.step(dst, &g, lr);

        let mut row = ActorLogRow {
            step,
            ce: report.task,
            js: report.js(),
            align: report.align,
            lambda_sep: lambdas.0,
            lambda_align: lambdas.1,
            val_loss: None,
            js_gap: LN_2 - report.js(),
        };
        let last = step + 1 == cfg.steps;
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last) {
            let v = validate(actor, adapter)?;
            row.val_loss = Some(v);
            if v < best.0 {
                best = (v, step + 1, actor.clone(), adapter.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        on_step(&row);
        log.push(row);
        if since_best >= cfg.patience && cfg.patience > 0 {
            stopped_early = true;
            break;
        }
    }
    let (best_val, best_step) = (best.0, best.1);
    *actor = best.2;
    *adapter = best.3;
    Ok(ActorTrainOutcome { log, best_val, best_step, stopped_early })
}

pub fn write_actor_log(w: impl Write, rows: &[ActorLogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "ce", "js", "align", "lambda_sep", "lambda_align", "val_loss", "js_gap"])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            format!("{:.6}", r.ce),
            format!("{:.6}", r.js),
            format!("{:.6}", r.align),
            format!("{:.4}", r.lambda_sep),
            format!("{:.4}", r.lambda_align),
            r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", r.js_gap),
        ])?;
    }
    out.flush()?;
    Ok(())
}

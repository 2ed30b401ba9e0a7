//! Compressed latent messages: the reasoner rolls out K hidden states by
//! feeding each last hidden state back through a small bridge, and is
//! trained against a frozen actor with a task, agreement and geometry loss.

use crate::actor::{ce_on_tape, mean_ce, ActorExample};
use crate::autograd::{Tape, Var};
use crate::channel::{AdapterParams, AdapterVars, ComposedInput, GeneratorTag, LatentMessage};
use crate::error::{Error, Result};
use crate::model::{normal_tensor, Input, ModelParams, ModelVars, ParamSet, Segment, Session, TapeCache};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::tensor::{cst, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const K_GRID: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub k: usize,
    pub temperature: f64,
    /// Clip bound for raw uncertainty weights; `None` means ln(vocab size).
    pub tau: Option<f64>,
    pub lambda_task: f64,
    pub lambda_pref: f64,
    pub lambda_geom: f64,
    pub epsilon: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { k: 8, temperature: 2.0, tau: None, lambda_task: 1.0, lambda_pref: 1.0, lambda_geom: 1.0, epsilon: 1e-8 }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("compression length K must be at least 1".into()));
        }
        if !(self.temperature >= 1.0) {
            return Err(Error::Config(format!("temperature must be >= 1, got {}", self.temperature)));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Config(format!("tau must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn tau_for(&self, vocab_size: usize) -> f64 {
        self.tau.unwrap_or((vocab_size as f64).ln())
    }
}

/// Layer norm followed by a dense d→d map; turns a last hidden state into
/// the next input embedding during rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjBridge<S = f32> {
    pub ln_g: Tensor<S>,
    pub ln_b: Tensor<S>,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> ParamSet<S> for ProjBridge<S> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![&self.ln_g, &self.ln_b, &self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.ln_g, &mut self.ln_b, &mut self.w, &mut self.b]
    }
}

impl<S: Scalar> ProjBridge<S> {
    /// Starts near `scale · I` so bridged states sit at token-embedding scale.
    pub fn init(d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut w: Tensor<S> = normal_tensor(rng, d, d, 0.01);
        for i in 0..d {
            w.set(i, i, w.get(i, i) + cst(scale));
        }
        Self { ln_g: Tensor::filled(1, d, S::one()), ln_b: Tensor::zeros(1, d), w, b: Tensor::zeros(1, d) }
    }

    pub fn cast<T: Scalar>(&self) -> ProjBridge<T> {
        ProjBridge { ln_g: self.ln_g.cast(), ln_b: self.ln_b.cast(), w: self.w.cast(), b: self.b.cast() }
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> BridgeVars {
        BridgeVars(self.register_all(tape, trainable))
    }

    pub fn apply(&self, h: &Tensor<S>) -> Tensor<S> {
        let (n, _, _) = crate::tensor::layer_norm(h, self.ln_g.data(), self.ln_b.data());
        let mut y = n.matmul(&self.w);
        y.add_row_assign(self.b.data());
        y
    }
}

#[derive(Clone, Debug)]
pub struct BridgeVars(Vec<Var>);

impl BridgeVars {
    pub fn all(&self) -> &[Var] {
        &self.0
    }

    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, h: Var) -> Var {
        let n = tape.layer_norm(h, self.0[0], self.0[1]);
        tape.linear(n, self.0[2], self.0[3])
    }
}

/// Differentiable K-step rollout. Returns the K×d message node (row i is
/// the last hidden state at the final position of E_i, where E_1 is the
/// prompt and E_{i+1} = E_i ⊕ bridge(h_i)) and the K appended embeddings.
pub fn latent_rollout_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    reasoner: &ModelVars,
    bridge: &BridgeVars,
    prompt: &[u32],
    k: usize,
) -> Result<(Var, Vec<Var>)> {
    let cfg = &reasoner.config;
    if prompt.is_empty() {
        return Err(Error::Input("rollout needs a non-empty prompt".into()));
    }
    if prompt.len() + k > cfg.max_seq_len {
        return Err(Error::Capacity { len: prompt.len() + k, max: cfg.max_seq_len });
    }
    if k == 0 {
        return Ok((tape.constant(Tensor::zeros(0, cfg.d_model)), Vec::new()));
    }
    let mut cache = TapeCache::new();
    let h = reasoner.forward(tape, &mut cache, &[Segment::Tokens(prompt)])?;
    let mut last = tape.slice_rows(h, prompt.len() - 1, prompt.len());
    let mut rows = Vec::with_capacity(k);
    let mut appended = Vec::with_capacity(k);
    for i in 0..k {
        rows.push(last);
        let e = bridge.apply(tape, last);
        appended.push(e);
        if i + 1 < k {
            last = reasoner.forward(tape, &mut cache, &[Segment::Vectors(e)])?;
        }
    }
    Ok((tape.concat_rows(&rows), appended))
}

/// Inference-time rollout over a KV-cached session.
pub fn latent_rollout(
    reasoner: &ModelParams,
    bridge: &ProjBridge,
    prompt: &[u32],
    k: usize,
    task_id: &str,
) -> Result<LatentMessage> {
    let cfg = &reasoner.config;
    if prompt.is_empty() {
        return Err(Error::Input("rollout needs a non-empty prompt".into()));
    }
    if prompt.len() + k > cfg.max_seq_len {
        return Err(Error::Capacity { len: prompt.len() + k, max: cfg.max_seq_len });
    }
    let mut values = Tensor::zeros(0, cfg.d_model);
    if k > 0 {
        let mut session = Session::new(reasoner);
        let h = session.extend(&[Input::Tokens(prompt)])?;
        let mut last = h.slice_rows(h.rows() - 1, h.rows());
        for i in 0..k {
            values.append_rows(&last);
            if i + 1 < k {
                let e = bridge.apply(&last);
                last = session.extend(&[Input::Vectors(&e)])?;
            }
        }
    }
    Ok(LatentMessage {
        values,
        source_task_id: task_id.to_string(),
        plan_tokens: Vec::new(),
        generator_tag: GeneratorTag::TrainedReasoner,
    })
}

/// Row-wise softmax of `logits / t` and its entropy, in f64.
pub fn tempered(logits: &Tensor, t: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut probs = Vec::with_capacity(logits.rows());
    let mut ent = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let p = crate::model::distribution(logits.row(r), t).expect("temperature validated");
        ent.push(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>());
        probs.push(p);
    }
    (probs, ent)
}

/// Actor-scored fixed paths for one instance: B (empty slot) and D (full
/// teacher message), at the supervised positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePaths {
    pub logits_b: Tensor,
    pub logits_d: Tensor,
    /// Adapter outputs for the teacher message (the D-path slot features).
    pub features_d: Tensor,
    pub weights: Vec<f64>,
}

/// Raw weight max(H_B − H_D, 0) clipped to [0, τ], normalized to unit mean.
/// When every raw weight is (numerically) zero the weights fall back to 1.
pub fn uncertainty_weights(entropies_b: &[f64], entropies_d: &[f64], tau: f64, epsilon: f64) -> Result<Vec<f64>> {
    if entropies_b.len() != entropies_d.len() {
        return Err(Error::Input("entropy sequences differ in length".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("tau must be positive, got {tau}")));
    }
    let raw: Vec<f64> = entropies_b.iter().zip(entropies_d).map(|(b, d)| (b - d).max(0.0).min(tau)).collect();
    let n = raw.len().max(1) as f64;
    let mean = raw.iter().sum::<f64>() / n;
    if mean <= epsilon {
        return Ok(vec![1.0; raw.len()]);
    }
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Nearest-index resampling of L step indices onto K: monotone, identity
/// when K = L, and covering both endpoints when K ≥ 2.
pub fn resample_indices(l: usize, k: usize) -> Vec<usize> {
    if l == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|j| ((j as f64) * (l - 1) as f64 / (k - 1) as f64).round() as usize).collect()
}

/// 1 − cos of the step-averaged feature directions; `features_d` is first
/// resampled onto `k` steps.
pub fn geom_loss(features_a: &Tensor, features_d: &Tensor, k: usize, epsilon: f64) -> f64 {
    let d = features_d.gather_rows(&resample_indices(features_d.rows(), k));
    let za = features_a.column_means();
    let zd = d.column_means();
    let dot: f64 = za.iter().zip(&zd).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
    let na = (za.iter().map(|a| (*a as f64).powi(2)).sum::<f64>() + epsilon).sqrt();
    let nd = (zd.iter().map(|a| (*a as f64).powi(2)).sum::<f64>() + epsilon).sqrt();
    1.0 - dot / (na * nd)
}

/// T² · (Σ w_t KL(p_D,t ∥ p_A,t)) / Σ w_t with p = softmax(ℓ / T).
pub fn pref_loss(logits_d: &Tensor, logits_a: &Tensor, weights: &[f64], t: f64) -> f64 {
    let (pd, _) = tempered(logits_d, t);
    let (pa, _) = tempered(logits_a, t);
    let sw: f64 = weights.iter().sum();
    if sw <= 0.0 {
        return 0.0;
    }
    let s: f64 = (0..weights.len()).map(|i| weights[i] * crate::actor::kl_divergence(&pd[i], &pa[i])).sum();
    t * t * s / sw
}

fn pref_on_tape<S: Scalar>(tape: &mut Tape<S>, logits_a: Var, logits_d: &Tensor, weights: &[f64], t: f64) -> Var {
    let inv_t = cst::<S>(1.0 / t);
    let la = tape.scale(logits_a, inv_t);
    let la = tape.log_softmax(la);
    let mut ld: Tensor<S> = logits_d.cast();
    ld.scale_assign(inv_t);
    for r in 0..ld.rows() {
        crate::tensor::log_softmax_inplace(ld.row_mut(r));
    }
    let pd = ld.map(|x| x.exp());
    let ld = tape.constant(ld);
    let pd = tape.constant(pd);
    let diff = tape.sub(ld, la);
    let prod = tape.mul(pd, diff);
    let kl = tape.sum_each_row(prod);
    let sw: f64 = weights.iter().sum();
    let w = tape.constant(Tensor::from_vec(weights.len(), 1, weights.iter().map(|&x| cst::<S>(x / sw)).collect()));
    let wk = tape.mul(kl, w);
    let s = tape.sum_all(wk);
    tape.scale(s, cst(t * t))
}

fn geom_on_tape<S: Scalar>(tape: &mut Tape<S>, features_a: Var, features_d: &Tensor, k: usize, epsilon: f64) -> Var {
    let d: Tensor<S> = features_d.gather_rows(&resample_indices(features_d.rows(), k)).cast();
    let zd = Tensor::from_vec(1, d.cols(), d.column_means());
    let nd = (zd.data().iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>() + epsilon).sqrt();
    let zd_unit = tape.constant(zd.map(|x| x / cst(nd)));
    let rows = tape.value(features_a).rows();
    let col = tape.sum_each_col(features_a);
    let za = tape.scale(col, cst(1.0 / rows as f64));
    let sq = tape.mul(za, za);
    let n2 = tape.sum_all(sq);
    let n2 = tape.add_scalar(n2, cst(epsilon));
    let na = tape.sqrt(n2);
    let dot = tape.mul(za, zd_unit);
    let dot = tape.sum_all(dot);
    let inv = tape.recip(na);
    let cos = tape.mul(dot, inv);
    let neg = tape.scale(cos, -S::one());
    tape.add_scalar(neg, S::one())
}

/// One compression instance.
#[derive(Clone, Debug)]
pub struct CompressionExample {
    /// Sender-side prompt the reasoner rolls out from.
    pub prompt: Vec<u32>,
    pub actor: ActorExample,
}

/// Computes path B and D scores and the uncertainty weights.
pub fn reference_paths(
    actor: &ModelParams,
    adapter: &AdapterParams,
    ex: &ActorExample,
    cfg: &CompressionConfig,
) -> Result<ReferencePaths> {
    let (bop, eop) = (actor.config.bop(), actor.config.eop());
    let logits_b = ex.empty_input::<f32>(bop, eop)?.supervised_logits(actor)?;
    let features_d = adapter.apply(&ex.message.values)?;
    let mut d_in = ex.latent_input::<f32>(bop, eop)?;
    d_in.latent = features_d.clone();
    let logits_d = d_in.supervised_logits(actor)?;
    let (_, hb) = tempered(&logits_b, cfg.temperature);
    let (_, hd) = tempered(&logits_d, cfg.temperature);
    let weights = uncertainty_weights(&hb, &hd, cfg.tau_for(actor.config.vocab_size), cfg.epsilon)?;
    Ok(ReferencePaths { logits_b, logits_d, features_d, weights })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub task: f64,
    pub pref: f64,
    pub geom: f64,
    pub total: f64,
}

/// Builds the compression objective for a batch on `tape`. The actor and
/// adapter enter as constants; only the reasoner and bridge handles passed
/// in receive gradients.
pub fn compression_batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    frozen: (&ModelVars, &AdapterVars),
    trained: (&ModelVars, &BridgeVars),
    batch: &[(&CompressionExample, &ReferencePaths)],
    cfg: &CompressionConfig,
) -> Result<(Var, CompressionReport)> {
    let (actor, adapter) = frozen;
    let (reasoner, bridge) = trained;
    let (bop, eop) = (actor.config.bop(), actor.config.eop());
    let mut terms = Vec::with_capacity(batch.len());
    let mut rep = CompressionReport::default();
    for (ex, refs) in batch {
        let (msg, _) = latent_rollout_on_tape(tape, reasoner, bridge, &ex.prompt, cfg.k)?;
        let features = adapter.apply(tape, msg);
        let zeros = Tensor::<S>::zeros(cfg.k, actor.config.d_model);
        let input: ComposedInput<S> = crate::channel::compose_actor_input(
            &ex.actor.task_tokens,
            crate::channel::Payload::Latent(&zeros),
            &ex.actor.continuation,
            &ex.actor.mask,
            bop,
            eop,
        )?;
        let mut cache = TapeCache::new();
        let hidden = actor.forward(tape, &mut cache, &input.segments(Some(features)))?;
        let rows = tape.gather_rows(hidden, &input.supervised);
        let logits_a = actor.logits(tape, rows);
        let task = ce_on_tape(tape, logits_a, &input.targets);
        let pref = pref_on_tape(tape, logits_a, &refs.logits_d, &refs.weights, cfg.temperature);
        let geom = geom_on_tape(tape, features, &refs.features_d, cfg.k, cfg.epsilon);
        let val = |tape: &Tape<S>, v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        rep.task += val(tape, task);
        rep.pref += val(tape, pref);
        rep.geom += val(tape, geom);
        let a = tape.scale(task, cst(cfg.lambda_task));
        let b = tape.scale(pref, cst(cfg.lambda_pref));
        let c = tape.scale(geom, cst(cfg.lambda_geom));
        let ab = tape.add(a, b);
        terms.push(tape.add(ab, c));
    }
    let n = batch.len().max(1) as f64;
    let stacked = tape.concat_rows(&terms);
    let total = tape.mean_all(stacked);
    rep.task /= n;
    rep.pref /= n;
    rep.geom /= n;
    rep.total = tape.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((total, rep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for ReasonerTrainConfig {
    fn default() -> Self {
        Self { steps: 6000, batch_size: 4, optim: AdamWConfig { lr: 5e-4, ..Default::default() }, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionLogRow {
    pub step: usize,
    pub task: f64,
    pub pref: f64,
    pub geom: f64,
    pub total: f64,
    pub k: usize,
}

/// Gradients of the compression loss for the reasoner and bridge, plus the
/// gradient the tape assigns to each frozen actor and adapter tensor (all
/// zero, since they are registered as constants).
pub struct CompressionGrads {
    pub trained: Vec<Tensor>,
    pub frozen: Vec<Tensor>,
    pub report: CompressionReport,
}

pub fn compression_grads(
    actor: &ModelParams,
    adapter: &AdapterParams,
    reasoner: &ModelParams,
    bridge: &ProjBridge,
    batch: &[(&CompressionExample, &ReferencePaths)],
    cfg: &CompressionConfig,
) -> Result<CompressionGrads> {
    let mut tape = Tape::new();
    let av = actor.register(&mut tape, false);
    let adv = adapter.register(&mut tape, false);
    let rv = reasoner.register(&mut tape, true);
    let bv = bridge.register(&mut tape, true);
    let (total, report) = compression_batch_loss(&mut tape, (&av, &adv), (&rv, &bv), batch, cfg)?;
    if !report.total.is_finite() {
        return Err(Error::TrainingFault(format!(
            "non-finite compression loss: task={} pref={} geom={}",
            report.task, report.pref, report.geom
        )));
    }
    let mut grads = tape.backward(total);
    let mut take = |vars: &[Var]| -> Vec<Tensor> {
        vars.iter().map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).rows(), tape.value(v).cols()))).collect()
    };
    let trained = take(&[rv.all(), bv.all()].concat());
    let frozen = take(&[av.all(), adv.all()].concat());
    Ok(CompressionGrads { trained, frozen, report })
}

/// Trains reasoner and bridge for one K against the frozen actor.
pub fn train_reasoner(
    reasoner: &mut ModelParams,
    bridge: &mut ProjBridge,
    actor: &ModelParams,
    adapter: &AdapterParams,
    data: &[CompressionExample],
    cfg: &CompressionConfig,
    train: &ReasonerTrainConfig,
    mut on_step: impl FnMut(&CompressionLogRow),
) -> Result<Vec<CompressionLogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no compression examples".into()));
    }
    if let Some(bad) = data.iter().find(|e| e.actor.message.is_empty()) {
        return Err(Error::Config(format!("missing teacher message for task {}", bad.actor.message.source_task_id)));
    }
    let refs = data.iter().map(|e| reference_paths(actor, adapter, &e.actor, cfg)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = reasoner.tensors();
    params.extend(bridge.tensors());
    let mut opt = AdamW::new(train.optim.clone(), &params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push((&data[order[cursor]], &refs[order[cursor]]));
            cursor += 1;
        }
        let mut g = compression_grads(actor, adapter, reasoner, bridge, &batch, cfg)?;
        clip_global_norm(&mut g.trained, train.optim.grad_clip);
        let mut dst = reasoner.tensors_mut();
        dst.extend(bridge.tensors_mut());
        opt.step(dst, &g.trained, train.optim.lr_at(step, train.steps));
        let row = CompressionLogRow {
            step,
            task: g.report.task,
            pref: g.report.pref,
            geom: g.report.geom,
            total: g.report.total,
            k: cfg.k,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

/// Actor CE (nats) on one instance with a given message in the slot.
pub fn actor_ce_with(actor: &ModelParams, adapter: &AdapterParams, ex: &ActorExample, msg: &Tensor) -> Result<f64> {
    let (bop, eop) = (actor.config.bop(), actor.config.eop());
    let mut input = if msg.rows() == 0 { ex.empty_input::<f32>(bop, eop)? } else { ex.latent_input::<f32>(bop, eop)? };
    if msg.rows() > 0 {
        let adapted = adapter.apply(msg)?;
        input = crate::channel::compose_actor_input(
            &ex.task_tokens,
            crate::channel::Payload::Latent(&adapted),
            &ex.continuation,
            &ex.mask,
            bop,
            eop,
        )?;
    }
    Ok(mean_ce(&input.supervised_logits(actor)?, &input.targets))
}

pub fn write_compression_log(w: impl Write, rows: &[CompressionLogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "task", "pref", "geom", "total", "K"])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            format!("{:.6}", r.task),
            format!("{:.6}", r.pref),
            format!("{:.6}", r.geom),
            format!("{:.6}", r.total),
            r.k.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_reference_cases() {
        assert_eq!(uncertainty_weights(&[1.0, 2.0], &[1.0, 2.0], 5.0, 1e-12).unwrap(), vec![1.0, 1.0]);
        assert_eq!(uncertainty_weights(&[2.0, 1.0], &[1.0, 1.0], f64::INFINITY, 1e-12).unwrap(), vec![2.0, 0.0]);
        // 5.3 is clipped to 2 before normalization.
        let w = uncertainty_weights(&[5.3, 1.0], &[0.0, 0.0], 2.0, 1e-12).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(uncertainty_weights(&[1.0], &[1.0, 2.0], 1.0, 1e-12).is_err());
    }

    #[test]
    fn resampling_properties() {
        assert_eq!(resample_indices(5, 5), vec![0, 1, 2, 3, 4]);
        for (l, k) in [(40, 8), (3, 8), (17, 16), (2, 2)] {
            let idx = resample_indices(l, k);
            assert_eq!(idx.len(), k);
            assert_eq!((idx[0], *idx.last().unwrap()), (0, l - 1));
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn geom_reference_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        assert!(geom_loss(&a, &a, 2, 1e-12).abs() < 1e-9);
        let neg = a.map(|x| -x);
        assert!((geom_loss(&a, &neg, 2, 1e-12) - 2.0).abs() < 1e-9);
        let orth = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]);
        assert!((geom_loss(&a, &orth, 2, 1e-12) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pref_reference_cases() {
        // logits whose softmax is (0.9, 0.1) and (0.5, 0.5)
        let d = Tensor::from_rows(&[vec![(9.0f32).ln(), 0.0]]);
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]);
        assert!((pref_loss(&d, &a, &[1.0], 1.0) - 0.3681).abs() < 1e-4);
        assert_eq!(pref_loss(&d, &d, &[1.0], 1.0), 0.0);
    }

    fn tiny_reasoner() -> (ModelParams, ProjBridge) {
        use crate::model::{ModelConfig, BOP, EOP, PAD};
        let sp = [(BOP, 0u32), (EOP, 1), (PAD, 2)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let cfg =
            ModelConfig { vocab_size: 12, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 32, special_tokens: sp };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelParams::init(cfg, &mut rng).unwrap();
        let b = ProjBridge::init(16, 0.3, &mut rng);
        (m, b)
    }

    #[test]
    fn rollout_replays_and_matches_tape() {
        let (m, bridge) = tiny_reasoner();
        let prompt = [3u32, 4, 5, 6, 7];
        let k = 3;
        let mut tape = Tape::new();
        let mv = m.register(&mut tape, false);
        let bv = bridge.register(&mut tape, false);
        let (msg, appended) = latent_rollout_on_tape(&mut tape, &mv, &bv, &prompt, k).unwrap();
        assert_eq!(appended.len(), k);
        let on_tape = tape.value(msg).clone();
        let cached = latent_rollout(&m, &bridge, &prompt, k, "t").unwrap().values;
        assert!(on_tape.zip_map(&cached, |a, b| a - b).max_abs() < 1e-5);

        // Re-running the full sequence (prompt plus all K bridged embeddings)
        // reproduces the message at positions |prompt|-1 .. |prompt|+K-2.
        let mut emb = Tensor::zeros(0, 16);
        for &e in &appended {
            emb.append_rows(tape.value(e));
        }
        assert_eq!(prompt.len() + emb.rows(), prompt.len() + k);
        let out = m.forward(&[Input::Tokens(&prompt), Input::Vectors(&emb)]).unwrap();
        let replay = out.last_hidden.slice_rows(prompt.len() - 1, prompt.len() - 1 + k);
        assert!(replay.zip_map(&on_tape, |a, b| a - b).max_abs() < 1e-5);
    }

    #[test]
    fn rollout_rejects_overflow() {
        let (m, bridge) = tiny_reasoner();
        assert!(matches!(latent_rollout(&m, &bridge, &[3; 30], 3, "t"), Err(Error::Capacity { .. })));
    }
}

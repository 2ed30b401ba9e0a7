//! Measurements over messages: ΔCE% under truncation or compression,
//! top-k probability bands under the LM head, and message-production
//! latency.

use crate::actor::ActorExample;
use crate::channel::{AdapterParams, LatentMessage};
use crate::compression::actor_ce_with;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Largest k reported in the cumulative top-k bands.
pub const BAND_MAX_K: usize = 6;
/// Size of the renormalization window.
pub const TOP_WINDOW: usize = 10;

/// The first floor(r·L) rows of `msg`; r = 0 gives the empty message.
pub fn truncate_ratio(msg: &LatentMessage, r: f64) -> Result<LatentMessage> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Input(format!("retained ratio must be in [0, 1], got {r}")));
    }
    Ok(truncate_len(msg, (r * msg.len() as f64).floor() as usize))
}

/// The first min(k, L) rows of `msg`.
pub fn truncate_len(msg: &LatentMessage, k: usize) -> LatentMessage {
    let keep = k.min(msg.len());
    LatentMessage {
        values: msg.values.slice_rows(0, keep),
        source_task_id: msg.source_task_id.clone(),
        plan_tokens: msg.plan_tokens.iter().copied().take(keep).collect(),
        generator_tag: msg.generator_tag.clone(),
    }
}

pub fn nats_to_bits(x: f64) -> f64 {
    x / std::f64::consts::LN_2
}

pub fn delta_ce_percent(ce_comp: f64, ce_full: f64) -> f64 {
    100.0 * (ce_comp - ce_full) / ce_full
}

/// Teacher-forced actor CE in bits, averaged per task then over tasks, with
/// `messages[i]` (raw rows, possibly empty) in the slot of `examples[i]`.
pub fn mean_ce_bits(actor: &ModelParams, adapter: &AdapterParams, examples: &[ActorExample], messages: &[Tensor]) -> Result<f64> {
    if examples.is_empty() || examples.len() != messages.len() {
        return Err(Error::Input("need one message per evaluation example".into()));
    }
    let mut total = 0.0;
    for (ex, m) in examples.iter().zip(messages) {
        total += nats_to_bits(actor_ce_with(actor, adapter, ex, m)?);
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Retained ratio R, or the message length K for fixed-length sources.
    pub grid: f64,
    pub mean_len: f64,
    pub ce_bits: f64,
    pub delta_ce_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub source: String,
    pub ce_full_bits: f64,
    pub points: Vec<SweepPoint>,
}

/// Training-free ratio sweep: each example's own message truncated to
/// floor(R·L) rows.
pub fn delta_ce_sweep(
    actor: &ModelParams,
    adapter: &AdapterParams,
    examples: &[ActorExample],
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Input("empty sweep grid".into()));
    }
    let full: Vec<Tensor> = examples.iter().map(|e| e.message.values.clone()).collect();
    let ce_full = mean_ce_bits(actor, adapter, examples, &full)?;
    let mut points = Vec::with_capacity(grid.len());
    for &r in grid {
        let msgs = examples.iter().map(|e| truncate_ratio(&e.message, r).map(|m| m.values)).collect::<Result<Vec<_>>>()?;
        // R = 1 is the reference itself; reuse it so the identity is exact.
        let ce = if r == 1.0 { ce_full } else { mean_ce_bits(actor, adapter, examples, &msgs)? };
        let mean_len = msgs.iter().map(|m| m.rows() as f64).sum::<f64>() / msgs.len() as f64;
        points.push(SweepPoint { grid: r, mean_len, ce_bits: ce, delta_ce_percent: delta_ce_percent(ce, ce_full) });
    }
    Ok(SweepResult { source: "truncated-teacher".into(), ce_full_bits: ce_full, points })
}

/// Fixed-length sweep: `messages_by_k[j][i]` is the length-`ks[j]` message
/// for example i (truncated teacher rows or a reasoner rollout).
pub fn length_sweep(
    actor: &ModelParams,
    adapter: &AdapterParams,
    examples: &[ActorExample],
    source: &str,
    ks: &[usize],
    messages_by_k: &[Vec<Tensor>],
) -> Result<SweepResult> {
    if ks.is_empty() || ks.len() != messages_by_k.len() {
        return Err(Error::Input("need one message set per grid length".into()));
    }
    let full: Vec<Tensor> = examples.iter().map(|e| e.message.values.clone()).collect();
    let ce_full = mean_ce_bits(actor, adapter, examples, &full)?;
    let mut points = Vec::with_capacity(ks.len());
    for (&k, msgs) in ks.iter().zip(messages_by_k) {
        let ce = mean_ce_bits(actor, adapter, examples, msgs)?;
        let mean_len = msgs.iter().map(|m| m.rows() as f64).sum::<f64>() / msgs.len().max(1) as f64;
        points.push(SweepPoint { grid: k as f64, mean_len, ce_bits: ce, delta_ce_percent: delta_ce_percent(ce, ce_full) });
    }
    Ok(SweepResult { source: source.into(), ce_full_bits: ce_full, points })
}

pub fn write_sweep_csv(w: impl Write, sweeps: &[SweepResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["source", "grid", "mean_len", "ce_bits", "ce_full_bits", "delta_ce_percent"])?;
    for s in sweeps {
        for p in &s.points {
            out.write_record([
                s.source.clone(),
                format!("{}", p.grid),
                format!("{:.3}", p.mean_len),
                format!("{:.6}", p.ce_bits),
                format!("{:.6}", s.ce_full_bits),
                format!("{:.4}", p.delta_ce_percent),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Median; for an even count, the mean of the two middle order statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBands {
    /// Cumulative top-k mass for k = 1..=BAND_MAX_K, renormalized within the
    /// top-10 window.
    pub bands: Vec<f64>,
    /// Un-renormalized top-10 mass S₁₀.
    pub s10: f64,
}

/// Bands of one probability distribution.
pub fn step_bands(probs: &[f64]) -> StepBands {
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(TOP_WINDOW);
    let s10: f64 = sorted.iter().sum();
    let mut bands = Vec::with_capacity(BAND_MAX_K);
    let mut acc = 0.0;
    for k in 0..BAND_MAX_K {
        acc += sorted.get(k).copied().unwrap_or(0.0);
        bands.push((acc / s10).min(1.0));
    }
    StepBands { bands, s10 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelismProfile {
    pub steps: Vec<StepBands>,
    pub p50_s10: f64,
}

/// LM-head bands for the first `steps` rows of `msg`.
pub fn parallelism_profile(msg: &LatentMessage, model: &ModelParams, steps: usize) -> Result<ParallelismProfile> {
    if steps > msg.len() {
        return Err(Error::Input(format!("asked for {steps} steps of a {}-row message", msg.len())));
    }
    if steps == 0 {
        return Err(Error::Input("parallelism profile needs at least one step".into()));
    }
    let logits = model.logits(&msg.values.slice_rows(0, steps));
    let mut out = Vec::with_capacity(steps);
    for r in 0..steps {
        let p = crate::model::distribution(logits.row(r), 1.0)?;
        out.push(step_bands(&p));
    }
    let s10: Vec<f64> = out.iter().map(|s| s.s10).collect();
    Ok(ParallelismProfile { p50_s10: median(&s10).expect("steps > 0"), steps: out })
}

/// Mean of per-message P50(S₁₀) and the pooled median over all steps.
pub fn aggregate_p50(profiles: &[ParallelismProfile]) -> (f64, f64) {
    let mean = profiles.iter().map(|p| p.p50_s10).sum::<f64>() / profiles.len().max(1) as f64;
    let pooled: Vec<f64> = profiles.iter().flat_map(|p| p.steps.iter().map(|s| s.s10)).collect();
    (mean, median(&pooled).unwrap_or(f64::NAN))
}

pub fn write_profile_csv(w: impl Write, rows: &[(String, usize, &ParallelismProfile)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["source".to_string(), "message".into(), "step".into(), "s10".into()];
    header.extend((1..=BAND_MAX_K).map(|k| format!("top{k}")));
    out.write_record(&header)?;
    for (source, idx, prof) in rows {
        for (i, s) in prof.steps.iter().enumerate() {
            let mut rec = vec![source.clone(), idx.to_string(), (i + 1).to_string(), format!("{:.6}", s.s10)];
            rec.extend(s.bands.iter().map(|b| format!("{b:.6}")));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub case: String,
    pub repetitions: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

pub const WARMUP_REPS: usize = 5;

/// Times `f` with a monotonic clock after `WARMUP_REPS` unmeasured calls.
pub fn latency_bench(case: &str, repetitions: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::Input("latency benchmark needs at least one repetition".into()));
    }
    for _ in 0..WARMUP_REPS {
        f()?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 { times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(LatencyStats { case: case.into(), repetitions, mean_s: mean, std_s: var.sqrt() })
}

pub fn write_latency_csv(w: impl Write, rows: &[LatencyStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["case", "repetitions", "mean_s", "std_s"])?;
    for r in rows {
        out.write_record([r.case.clone(), r.repetitions.to_string(), format!("{:.6}", r.mean_s), format!("{:.6}", r.std_s)])?;
    }
    out.flush()?;
    Ok(())
}

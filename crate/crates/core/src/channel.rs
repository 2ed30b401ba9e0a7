//! Latent messages and the receiver-side channel: extraction of a sender's
//! hidden states, the communication adapter, `<bop>`/`<eop>` framing of the
//! actor input and left-to-right curriculum mixing.

use crate::autograd::{Tape, Var};
use crate::checkpoint::read_f32s;
use crate::error::{Error, Result};
use crate::model::{normal_tensor, Input, ModelParams, ModelVars, ParamSet, Segment};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Who produced a message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GeneratorTag {
    InstructTeacher,
    TrainedReasoner,
    Perturbed(String),
}

impl fmt::Display for GeneratorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorTag::InstructTeacher => f.write_str("instruct-teacher"),
            GeneratorTag::TrainedReasoner => f.write_str("trained-reasoner"),
            GeneratorTag::Perturbed(k) => write!(f, "perturbed:{k}"),
        }
    }
}

impl FromStr for GeneratorTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instruct-teacher" => Ok(GeneratorTag::InstructTeacher),
            "trained-reasoner" => Ok(GeneratorTag::TrainedReasoner),
            _ => s
                .strip_prefix("perturbed:")
                .map(|k| GeneratorTag::Perturbed(k.to_string()))
                .ok_or_else(|| Error::Format(format!("unknown generator tag {s:?}"))),
        }
    }
}

impl Serialize for GeneratorTag {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GeneratorTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An L×d matrix of sender hidden states with provenance. L = 0 is the empty
/// (no communication) message.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMessage {
    pub values: Tensor,
    pub source_task_id: String,
    pub plan_tokens: Vec<u32>,
    pub generator_tag: GeneratorTag,
}

impl LatentMessage {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Hidden states of `sender` over `prompt ⊕ completion`. Row ℓ (0-based) is
/// the last hidden state at 0-based position m−1+ℓ, i.e. the state from
/// which completion token ℓ is predicted; in 1-based terms row ℓ comes from
/// position m+ℓ−1.
pub fn extract_latents(sender: &ModelParams, prompt: &[u32], completion: &[u32], task_id: &str) -> Result<LatentMessage> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::Input("extraction needs a non-empty prompt and completion".into()));
    }
    let out = sender.forward(&[Input::Tokens(prompt), Input::Tokens(completion)])?;
    let m = prompt.len();
    Ok(LatentMessage {
        values: out.last_hidden.slice_rows(m - 1, m - 1 + completion.len()),
        source_task_id: task_id.to_string(),
        plan_tokens: completion.to_vec(),
        generator_tag: GeneratorTag::InstructTeacher,
    })
}

/// Receiver-side communication adapter: multi-head self-attention over the
/// message rows with a residual connection, layer normalization, then a
/// per-dimension gain/bias and a dense d→d map.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<S = f32> {
    pub heads: usize,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln_g: Tensor<S>,
    pub ln_b: Tensor<S>,
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    pub proj: Tensor<S>,
    pub proj_b: Tensor<S>,
}

pub const ADAPTER_HEADS: usize = 8;

impl<S: Scalar> ParamSet<S> for AdapterParams<S> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        vec![
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln_g,
            &self.ln_b,
            &self.gain,
            &self.bias,
            &self.proj,
            &self.proj_b,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.gain,
            &mut self.bias,
            &mut self.proj,
            &mut self.proj_b,
        ]
    }
}

/// Tape handles for an adapter.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    heads: usize,
    vars: Vec<Var>,
}

impl AdapterVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    /// Adapter output for an L×d node; an empty input passes through.
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Var {
        if tape.value(x).rows() == 0 {
            return x;
        }
        let v = &self.vars;
        let q = tape.linear(x, v[0], v[1]);
        let k = tape.linear(x, v[2], v[3]);
        let val = tape.linear(x, v[4], v[5]);
        let att = tape.attention(q, k, val, self.heads, false);
        let o = tape.linear(att, v[6], v[7]);
        let h = tape.add(x, o);
        let n = tape.layer_norm(h, v[8], v[9]);
        let g = tape.mul_row(n, v[10]);
        let g = tape.add_row(g, v[11]);
        tape.linear(g, v[12], v[13])
    }
}

impl<S: Scalar> AdapterParams<S> {
    /// Attention projections start small and the dense map starts at the
    /// identity, so a fresh adapter is close to a layer norm.
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("adapter width {d} not divisible by {heads} heads")));
        }
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = Tensor::zeros(d, d);
        for i in 0..d {
            proj.set(i, i, S::one());
        }
        Ok(Self {
            heads,
            wq: normal_tensor(rng, d, d, std),
            bq: Tensor::zeros(1, d),
            wk: normal_tensor(rng, d, d, std),
            bk: Tensor::zeros(1, d),
            wv: normal_tensor(rng, d, d, std),
            bv: Tensor::zeros(1, d),
            wo: normal_tensor(rng, d, d, 0.1 * std),
            bo: Tensor::zeros(1, d),
            ln_g: Tensor::filled(1, d, S::one()),
            ln_b: Tensor::zeros(1, d),
            gain: Tensor::filled(1, d, S::one()),
            bias: Tensor::zeros(1, d),
            proj,
            proj_b: Tensor::zeros(1, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn cast<T: Scalar>(&self) -> AdapterParams<T> {
        let t: Vec<Tensor<T>> = self.tensors().into_iter().map(|x| x.cast()).collect();
        let mut it = t.into_iter();
        let mut n = || it.next().expect("fixed tensor count");
        AdapterParams {
            heads: self.heads,
            wq: n(),
            bq: n(),
            wk: n(),
            bk: n(),
            wv: n(),
            bv: n(),
            wo: n(),
            bo: n(),
            ln_g: n(),
            ln_b: n(),
            gain: n(),
            bias: n(),
            proj: n(),
            proj_b: n(),
        }
    }

    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> AdapterVars {
        AdapterVars { heads: self.heads, vars: self.register_all(tape, trainable) }
    }

    /// Adapter output without gradient tracking. Same arithmetic as
    /// [`AdapterVars::apply`].
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.rows() == 0 {
            return Ok(Tensor::zeros(0, self.dim()));
        }
        if x.cols() != self.dim() {
            return Err(Error::Input(format!("message width {} != adapter width {}", x.cols(), self.dim())));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = vars.apply(&mut tape, xv);
        Ok(tape.value(y).clone())
    }
}

/// Adapter output for a message.
pub fn adapter_apply(params: &AdapterParams, msg: &LatentMessage) -> Result<Tensor> {
    params.apply(&msg.values)
}

/// What occupies the slot between `<bop>` and `<eop>`.
#[derive(Clone, Copy, Debug)]
pub enum Payload<'a, S = f32> {
    /// Adapted latent rows.
    Latent(&'a Tensor<S>),
    /// Plan token ids (the text variant).
    Text(&'a [u32]),
    /// Adapted latent prefix followed by plan tokens (curriculum mixing).
    Mixed(&'a Tensor<S>, &'a [u32]),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Latent,
    Text,
    None,
}

/// Actor input: `task ⊕ <bop> ⊕ slot ⊕ <eop> ⊕ continuation`, where the slot
/// holds latent rows followed by slot tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedInput<S = f32> {
    pub prefix: Vec<u32>,
    pub latent: Tensor<S>,
    pub slot_tokens: Vec<u32>,
    pub suffix: Vec<u32>,
    /// 0-based positions of `<bop>` and `<eop>`.
    pub bop_pos: usize,
    pub eop_pos: usize,
    /// 0-based positions whose next-token prediction is trained.
    pub supervised: Vec<usize>,
    /// Target token for each supervised position.
    pub targets: Vec<u32>,
}

impl<S: Scalar> ComposedInput<S> {
    pub fn len(&self) -> usize {
        self.suffix.len() + self.eop_pos
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slot_len(&self) -> usize {
        self.eop_pos - self.bop_pos - 1
    }

    pub fn inputs(&self) -> [Input<'_, S>; 4] {
        [Input::Tokens(&self.prefix), Input::Vectors(&self.latent), Input::Tokens(&self.slot_tokens), Input::Tokens(&self.suffix)]
    }

    /// Tape segments, with `latent` standing in for the stored latent rows.
    pub fn segments(&self, latent: Option<Var>) -> Vec<Segment<'_>> {
        let mut s = vec![Segment::Tokens(&self.prefix)];
        if let Some(v) = latent {
            s.push(Segment::Vectors(v));
        }
        s.push(Segment::Tokens(&self.slot_tokens));
        s.push(Segment::Tokens(&self.suffix));
        s
    }

    /// Actor forward returning logits rows at the supervised positions.
    pub fn supervised_logits(&self, actor: &ModelParams<S>) -> Result<Tensor<S>> {
        let out = actor.forward(&self.inputs())?;
        Ok(out.logits.gather_rows(&self.supervised))
    }
}

/// Frames a payload for the actor. `supervised_mask[j]` marks continuation
/// token j as a training target; the position predicting it is supervised.
pub fn compose_actor_input<S: Scalar>(
    task_tokens: &[u32],
    payload: Payload<'_, S>,
    continuation: &[u32],
    supervised_mask: &[bool],
    bop: u32,
    eop: u32,
) -> Result<ComposedInput<S>> {
    if supervised_mask.len() != continuation.len() {
        return Err(Error::Input("supervision mask length differs from continuation".into()));
    }
    let (latent, slot_tokens) = match payload {
        Payload::Latent(l) => (l.clone(), Vec::new()),
        Payload::Text(t) => (Tensor::zeros(0, 0), t.to_vec()),
        Payload::Mixed(l, t) => (l.clone(), t.to_vec()),
        Payload::None => (Tensor::zeros(0, 0), Vec::new()),
    };
    let mut prefix = task_tokens.to_vec();
    prefix.push(bop);
    let bop_pos = task_tokens.len();
    let eop_pos = bop_pos + 1 + latent.rows() + slot_tokens.len();
    let mut suffix = vec![eop];
    suffix.extend_from_slice(continuation);
    let (supervised, targets) = supervised_mask
        .iter()
        .zip(continuation)
        .enumerate()
        .filter(|(_, (&m, _))| m)
        .map(|(j, (_, &t))| (eop_pos + j, t))
        .unzip();
    Ok(ComposedInput { prefix, latent, slot_tokens, suffix, bop_pos, eop_pos, supervised, targets })
}

/// Number of latent rows kept at replacement rate `r` for a message of
/// length `len`: floor(r·len).
pub fn replaced_len(r: f64, len: usize) -> usize {
    ((r * len as f64) + 1e-9).floor().min(len as f64) as usize
}

/// Left-to-right replacement: the first floor(r·L) positions carry hidden
/// states, the rest carry plan tokens. Returns the raw latent prefix and the
/// remaining plan tokens.
pub fn curriculum_replace(msg: &LatentMessage, r: f64) -> Result<(Tensor, Vec<u32>)> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Input(format!("replacement rate {r} outside [0, 1]")));
    }
    if msg.plan_tokens.len() != msg.len() {
        return Err(Error::Config(format!(
            "curriculum mixing needs one plan token per latent row ({} tokens, {} rows)",
            msg.plan_tokens.len(),
            msg.len()
        )));
    }
    let k = replaced_len(r, msg.len());
    Ok((msg.values.slice_rows(0, k), msg.plan_tokens[k..].to_vec()))
}

/// Registers actor and adapter on `tape` and runs the actor over `input`,
/// passing `raw_latent` (if any) through the adapter into the slot. Returns
/// logits rows at the supervised positions.
pub fn actor_logits_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    actor: &ModelVars,
    adapter: &AdapterVars,
    input: &ComposedInput<S>,
    raw_latent: Option<Var>,
) -> Result<Var> {
    let adapted = raw_latent.map(|v| adapter.apply(tape, v));
    let mut cache = crate::model::TapeCache::new();
    let hidden = actor.forward(tape, &mut cache, &input.segments(adapted))?;
    let rows = tape.gather_rows(hidden, &input.supervised);
    Ok(actor.logits(tape, rows))
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    task_id: String,
    generator_tag: GeneratorTag,
    plan_tokens: Vec<u32>,
}

pub const TRACE_MAGIC: &[u8; 4] = b"ILTC";
pub const TRACE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes a message as a binary trace plus a `<path>.json` metadata sidecar.
pub fn write_trace(path: &Path, msg: &LatentMessage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    for v in [TRACE_VERSION, msg.len() as u32, msg.dim() as u32, DTYPE_F32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &x in msg.values.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    let meta = TraceMeta {
        task_id: msg.source_task_id.clone(),
        generator_tag: msg.generator_tag.clone(),
        plan_tokens: msg.plan_tokens.clone(),
    };
    std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<LatentMessage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..4] != TRACE_MAGIC {
        return Err(Error::Format(format!("{}: not a trace file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]);
    if word(4) != TRACE_VERSION || word(16) != DTYPE_F32 {
        return Err(Error::Format("unsupported trace version or dtype".into()));
    }
    let (l, d) = (word(8) as usize, word(12) as usize);
    let values = Tensor::from_vec(l, d, read_f32s(&mut r, l * d)?);
    let meta: TraceMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    Ok(LatentMessage { values, source_task_id: meta.task_id, plan_tokens: meta.plan_tokens, generator_tag: meta.generator_tag })
}

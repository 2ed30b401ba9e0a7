//! Model-driven agents: greedy plan generation for the sender and a greedy
//! turn-by-turn actor policy for the environment harness.

use crate::channel::{AdapterParams, GeneratorTag, LatentMessage};
use crate::error::{Error, Result};
use crate::minihouse::env::observation_tokens;
use crate::minihouse::episode::{task_tokens, TURN_TOKEN_BUDGET};
use crate::minihouse::vocab::{ACT, END};
use crate::minihouse::{Agent, TaskInstance, Vocab};
use crate::model::{Input, ModelParams, Session};
use crate::tensor::Tensor;

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `prompt` until `stop` (excluded) or `max_len`
/// tokens. Returns the generated tokens and, for each, the hidden state it
/// was predicted from.
pub fn greedy_generate(model: &ModelParams, prompt: &[u32], stop: u32, max_len: usize) -> Result<(Vec<u32>, Tensor)> {
    let mut session = Session::new(model);
    let h = session.extend(&[Input::Tokens(prompt)])?;
    let mut last = h.slice_rows(h.rows() - 1, h.rows());
    let mut tokens = Vec::new();
    let mut hiddens = Tensor::zeros(0, model.config.d_model);
    while tokens.len() < max_len {
        let logits = model.logits(&last);
        let t = argmax(logits.row(0)) as u32;
        if t == stop {
            break;
        }
        hiddens.append_rows(&last);
        tokens.push(t);
        if session.len() >= model.config.max_seq_len {
            break;
        }
        last = session.step_token(t)?.0;
    }
    Ok((tokens, hiddens))
}

/// The sender decodes its plan greedily and the message is the hidden
/// states along the decode.
pub fn generate_message(sender: &ModelParams, prompt: &[u32], stop: u32, max_len: usize, task_id: &str) -> Result<LatentMessage> {
    let (plan_tokens, values) = greedy_generate(sender, prompt, stop, max_len)?;
    Ok(LatentMessage { values, source_task_id: task_id.to_string(), plan_tokens, generator_tag: GeneratorTag::InstructTeacher })
}

/// What the actor receives between `<bop>` and `<eop>`.
#[derive(Clone, Debug)]
pub enum SlotContent {
    /// Raw message rows; the adapter is applied before insertion.
    Latent(Tensor),
    Text(Vec<u32>),
    None,
}

/// Greedy actor policy over a KV-cached session.
pub struct ActorAgent<'a> {
    session: Session<'a>,
    vocab: &'a Vocab,
    act: u32,
    end: u32,
}

impl<'a> ActorAgent<'a> {
    pub fn new(
        actor: &'a ModelParams,
        adapter: &AdapterParams,
        vocab: &'a Vocab,
        task: &TaskInstance,
        slot: &SlotContent,
    ) -> Result<Self> {
        let mut session = Session::new(actor);
        let mut prefix = task_tokens(&task.initial, vocab);
        prefix.push(actor.config.bop());
        let eop = [actor.config.eop()];
        match slot {
            SlotContent::Latent(raw) => {
                let adapted = adapter.apply(raw)?;
                session.extend(&[Input::Tokens(&prefix), Input::Vectors(&adapted), Input::Tokens(&eop)])?;
            }
            SlotContent::Text(t) => {
                session.extend(&[Input::Tokens(&prefix), Input::Tokens(t), Input::Tokens(&eop)])?;
            }
            SlotContent::None => {
                session.extend(&[Input::Tokens(&prefix), Input::Tokens(&eop)])?;
            }
        }
        Ok(Self { session, vocab, act: vocab.tok(ACT), end: vocab.tok(END) })
    }

    fn decode_turn(&mut self, observation: Option<&str>) -> Result<Option<String>> {
        if let Some(obs) = observation {
            self.session.extend(&[Input::Tokens(&observation_tokens(self.vocab, obs))])?;
        }
        let (mut h, _) = self.session.step_token(self.act)?;
        let mut out = Vec::new();
        while out.len() < TURN_TOKEN_BUDGET {
            let logits = self.session.params().logits(&h);
            let t = argmax(logits.row(0)) as u32;
            let (next, _) = self.session.step_token(t)?;
            if t == self.end {
                return Ok(Some(self.vocab.decode(&out)));
            }
            out.push(t);
            h = next;
        }
        Ok(None)
    }
}

impl Agent for ActorAgent<'_> {
    fn act(&mut self, observation: Option<&str>) -> Result<Option<String>> {
        match self.decode_turn(observation) {
            // Running out of context counts as a failed turn, not a fault.
            Err(Error::Capacity { .. }) => Ok(None),
            other => other,
        }
    }
}

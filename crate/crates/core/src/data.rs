//! Builds model-facing training examples from environment tasks and teacher
//! traces.

use crate::actor::ActorExample;
use crate::channel::{extract_latents, LatentMessage};
use crate::error::Result;
use crate::lm::LmExample;
use crate::minihouse::episode::{sender_prompt, teacher_transcript};
use crate::minihouse::vocab::END;
use crate::minihouse::{TaskInstance, TeacherTrace, Vocab};
use crate::model::{ModelConfig, ModelParams, BOP, EOP};

pub fn model_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig::desk(vocab.len(), vocab.special_tokens())
}

/// Sender role: layout prompt followed by the plan and `<end>`.
pub fn sender_example(task: &TaskInstance, trace: &TeacherTrace, vocab: &Vocab) -> LmExample {
    let mut tokens = sender_prompt(&task.initial, vocab);
    let m = tokens.len();
    tokens.extend(&trace.plan_tokens);
    tokens.push(vocab.tok(END));
    let targets = (0..tokens.len()).map(|j| j >= m).collect();
    LmExample { tokens, targets }
}

/// Receiver role with the plan as text between `<bop>` and `<eop>`.
pub fn actor_text_example(task: &TaskInstance, trace: &TeacherTrace, vocab: &Vocab) -> Result<LmExample> {
    let tr = teacher_transcript(task, trace, vocab)?;
    let mut tokens = tr.task_tokens.clone();
    tokens.push(vocab.tok(BOP));
    tokens.extend(&trace.plan_tokens);
    tokens.push(vocab.tok(EOP));
    let mut targets = vec![false; tokens.len()];
    tokens.extend(&tr.continuation);
    targets.extend(&tr.supervised);
    Ok(LmExample { tokens, targets })
}

/// The teacher's hidden states over its own plan for this task.
pub fn teacher_message(teacher: &ModelParams, task: &TaskInstance, trace: &TeacherTrace, vocab: &Vocab) -> Result<LatentMessage> {
    extract_latents(teacher, &sender_prompt(&task.initial, vocab), &trace.plan_tokens, &task.task_id)
}

pub fn actor_example(task: &TaskInstance, trace: &TeacherTrace, message: LatentMessage, vocab: &Vocab) -> Result<ActorExample> {
    let tr = teacher_transcript(task, trace, vocab)?;
    Ok(ActorExample { task_tokens: tr.task_tokens, continuation: tr.continuation, mask: tr.supervised, message })
}

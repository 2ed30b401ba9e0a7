use super::env::{observation_tokens, plan_solution, Action, State, INVALID_OBSERVATION, STEP_CAP};
use super::tasks::{TaskInstance, TeacherTrace};
use super::vocab::{Vocab, ACT, BOS, END, PLAN};
use crate::error::Result;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Per-turn decode budget in tokens.
pub const TURN_TOKEN_BUDGET: usize = 48;
/// Consecutive unparseable turns after which an episode is abandoned.
pub const MAX_UNPARSEABLE_RUN: usize = 3;

/// Receiver-side task prompt: `<bos>` followed by the room listing and goal.
pub fn task_tokens(state: &State, vocab: &Vocab) -> Vec<u32> {
    let mut out = vec![vocab.tok(BOS)];
    out.extend(vocab.encode(&state.task_text()).expect("task text uses the vocabulary"));
    out
}

/// Sender-side prompt with the full layout, ending in `<plan>`.
pub fn sender_prompt(state: &State, vocab: &Vocab) -> Vec<u32> {
    let mut out = vec![vocab.tok(BOS)];
    out.extend(vocab.encode(&state.layout_text()).expect("layout text uses the vocabulary"));
    out.push(vocab.tok(PLAN));
    out
}

/// Action-turn text as the actor emits it: `seek cup : go to drawer 1`.
pub fn turn_text(thought: &str, action: &Action) -> String {
    format!("{thought} : {action}")
}

/// Extracts the action from a generated turn, ignoring any thought prefix.
pub fn parse_turn(text: &str) -> Option<Action> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let start = words.iter().rposition(|w| *w == ":").map_or(0, |i| i + 1);
    Action::parse(&words[start..])
}

/// Teacher-forced receiver continuation with its supervision mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub task_tokens: Vec<u32>,
    /// Alternating `<act> ... <end>` and `<obs> ... <end>` turns.
    pub continuation: Vec<u32>,
    /// `supervised[j]` marks continuation token j as a training target.
    pub supervised: Vec<bool>,
}

pub fn teacher_transcript(task: &TaskInstance, trace: &TeacherTrace, vocab: &Vocab) -> Result<Transcript> {
    let mut state = task.initial.clone();
    let mut continuation = Vec::new();
    let mut supervised = Vec::new();
    let (act, end) = (vocab.tok(ACT), vocab.tok(END));
    for (i, step) in trace.steps.iter().enumerate() {
        continuation.push(act);
        supervised.push(false);
        for t in vocab.encode(&turn_text(&step.thought, &step.action))? {
            continuation.push(t);
            supervised.push(true);
        }
        continuation.push(end);
        supervised.push(true);
        let (obs, next, _) = state.step(Some(&step.action));
        state = next;
        if i + 1 < trace.steps.len() {
            let toks = observation_tokens(vocab, &obs);
            supervised.extend(std::iter::repeat_n(false, toks.len()));
            continuation.extend(toks);
        }
    }
    Ok(Transcript { task_tokens: task_tokens(&task.initial, vocab), continuation, supervised })
}

/// An acting policy driven turn by turn by the episode harness.
pub trait Agent {
    /// Returns the generated turn text for the current turn, given the
    /// observation produced by the previous action (`None` on the first turn).
    /// `Ok(None)` means the turn exceeded its decode budget.
    fn act(&mut self, observation: Option<&str>) -> Result<Option<String>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub action: Option<String>,
    pub observation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub success: bool,
    pub steps_taken: usize,
    pub transcript: Vec<TurnRecord>,
}

/// Runs one episode under the step cap. An episode that produces
/// `MAX_UNPARSEABLE_RUN` unparseable turns in a row is stopped and charged
/// the full cap.
pub fn run_episode(agent: &mut dyn Agent, task: &TaskInstance) -> Result<EpisodeResult> {
    let mut state = task.initial.clone();
    let mut transcript = Vec::new();
    let mut last_obs: Option<String> = None;
    let mut unparseable = 0;
    for step in 1..=STEP_CAP {
        let text = agent.act(last_obs.as_deref())?;
        let action = text.as_deref().and_then(parse_turn);
        unparseable = if action.is_none() { unparseable + 1 } else { 0 };
        let (obs, next, done) = state.step(action.as_ref());
        state = next;
        transcript.push(TurnRecord { action: text, observation: obs.clone() });
        if done {
            return Ok(EpisodeResult { task_id: task.task_id.clone(), success: true, steps_taken: step, transcript });
        }
        if unparseable >= MAX_UNPARSEABLE_RUN {
            break;
        }
        last_obs = Some(obs);
    }
    Ok(EpisodeResult { task_id: task.task_id.clone(), success: false, steps_taken: STEP_CAP, transcript })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub results: Vec<EpisodeResult>,
    pub success_rate: f64,
    /// Mean steps over successful episodes; `None` when nothing succeeded.
    pub steps_success: Option<f64>,
    pub steps_all: f64,
}

impl SuiteReport {
    pub fn from_results(results: Vec<EpisodeResult>) -> Self {
        let n = results.len().max(1) as f64;
        let wins: Vec<f64> = results.iter().filter(|r| r.success).map(|r| r.steps_taken as f64).collect();
        let steps_success = (!wins.is_empty()).then(|| wins.iter().sum::<f64>() / wins.len() as f64);
        let steps_all = results.iter().map(|r| r.steps_taken as f64).sum::<f64>() / n;
        Self { success_rate: wins.len() as f64 / n, steps_success, steps_all, results }
    }

    /// Steps formatted as `success/all`.
    pub fn steps_label(&self) -> String {
        match self.steps_success {
            Some(s) => format!("{s:.1}/{:.1}", self.steps_all),
            None => format!("-/{:.1}", self.steps_all),
        }
    }
}

/// Evaluates every task with an agent built per episode; `make` receives the
/// task and its episode index (usable as an episode seed).
pub fn evaluate_suite<A: Agent>(
    tasks: &[TaskInstance],
    mut make: impl FnMut(&TaskInstance, usize) -> Result<A>,
) -> Result<SuiteReport> {
    let mut results = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let mut agent = make(t, i)?;
        results.push(run_episode(&mut agent, t)?);
    }
    Ok(SuiteReport::from_results(results))
}

/// Writes per-task rows: task_id, split, payload_kind, success, steps.
pub fn write_results_csv(w: impl Write, tasks: &[TaskInstance], payload_kind: &str, report: &SuiteReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task_id", "split", "payload_kind", "success", "steps"])?;
    for (t, r) in tasks.iter().zip(&report.results) {
        out.write_record([
            r.task_id.as_str(),
            t.split.name(),
            payload_kind,
            if r.success { "1" } else { "0" },
            &r.steps_taken.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Replays the scripted optimal solution; an upper-bound reference policy.
pub struct ScriptedAgent {
    turns: std::vec::IntoIter<String>,
}

impl ScriptedAgent {
    pub fn new(state: &State) -> Self {
        let turns: Vec<String> =
            plan_solution(state).unwrap_or_default().iter().map(|s| turn_text(&s.thought, &s.action)).collect();
        Self { turns: turns.into_iter() }
    }
}

impl Agent for ScriptedAgent {
    fn act(&mut self, _observation: Option<&str>) -> Result<Option<String>> {
        Ok(Some(self.turns.next().unwrap_or_default()))
    }
}

/// Picks uniformly among all grammatical actions over the room.
pub struct RandomAgent {
    actions: Vec<Action>,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(state: &State, seed: u64) -> Self {
        Self { actions: state.candidate_actions(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _observation: Option<&str>) -> Result<Option<String>> {
        Ok(self.actions.choose(&mut self.rng).map(|a| a.to_string()))
    }
}

/// Always emits text that does not parse as an action.
pub struct BabblingAgent;

impl Agent for BabblingAgent {
    fn act(&mut self, _observation: Option<&str>) -> Result<Option<String>> {
        Ok(Some("seek".into()))
    }
}

pub fn is_invalid_observation(obs: &str) -> bool {
    obs == INVALID_OBSERVATION
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minihouse::tasks::{generate_tasks, teacher_trace, TaskCounts};
    use crate::minihouse::vocab::WorldKinds;

    fn fixture() -> (Vocab, Vec<TaskInstance>) {
        let kinds = WorldKinds::default();
        let vocab = Vocab::new(&kinds).unwrap();
        let c = TaskCounts { train: 50, validation: 10, seen_eval: 200, unseen_eval: 20 };
        let s = generate_tasks(11, c, &kinds, &vocab).unwrap();
        (vocab, s.seen_eval)
    }

    #[test]
    fn scripted_agent_always_succeeds() {
        let (_, tasks) = fixture();
        let rep = evaluate_suite(&tasks, |t, _| Ok(ScriptedAgent::new(&t.initial))).unwrap();
        assert_eq!(rep.success_rate, 1.0);
        assert!(rep.results.iter().all(|r| r.steps_taken <= STEP_CAP));
    }

    #[test]
    fn random_agent_rarely_succeeds() {
        let (_, tasks) = fixture();
        let rep = evaluate_suite(&tasks, |t, i| Ok(RandomAgent::new(&t.initial, i as u64))).unwrap();
        assert!(rep.success_rate <= 0.02, "random success {}", rep.success_rate);
    }

    #[test]
    fn unparseable_turns_fail_at_cap() {
        let (_, tasks) = fixture();
        let r = run_episode(&mut BabblingAgent, &tasks[0]).unwrap();
        assert!(!r.success);
        assert_eq!(r.steps_taken, STEP_CAP);
        assert!(r.transcript.iter().all(|t| is_invalid_observation(&t.observation)));
    }

    #[test]
    fn suite_arithmetic() {
        let mk = |ok: bool, steps| EpisodeResult { task_id: String::new(), success: ok, steps_taken: steps, transcript: vec![] };
        let rep = SuiteReport::from_results(vec![mk(true, 10), mk(true, 10)]);
        assert_eq!(rep.steps_label(), "10.0/10.0");
        let rep = SuiteReport::from_results(vec![mk(true, 10), mk(false, 20)]);
        assert_eq!(rep.steps_label(), "10.0/15.0");
        assert_eq!(rep.success_rate, 0.5);
    }

    #[test]
    fn transcript_round_trips_through_vocab() {
        let (vocab, tasks) = fixture();
        for t in tasks.iter().take(20) {
            let trace = teacher_trace(t, &vocab).unwrap();
            let tr = teacher_transcript(t, &trace, &vocab).unwrap();
            assert_eq!(tr.continuation.len(), tr.supervised.len());
            let text = vocab.decode(&tr.continuation);
            assert_eq!(vocab.encode(&text).unwrap(), tr.continuation);
            assert_eq!(vocab.decode(&tr.task_tokens[1..]), t.initial.task_text());
        }
    }

    #[test]
    fn parse_turn_skips_thought() {
        assert_eq!(parse_turn("seek cup : go to drawer 1").unwrap().to_string(), "go to drawer 1");
        assert!(parse_turn("seek cup :").is_none());
    }
}

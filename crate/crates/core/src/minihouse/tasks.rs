use super::env::{plan_solution, plan_text, Entity, Goal, Receptacle, State, TeacherStep, STEP_CAP};
use super::vocab::{Vocab, WorldKinds, MAX_INSTANCE};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

pub const MAX_RECEPTACLES: usize = 6;
pub const MAX_OBJECTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub split: Split,
    pub initial: State,
}

impl TaskInstance {
    /// The (object kind, destination kind) pair that defines held-out splits.
    pub fn combo(&self) -> (String, String) {
        (self.initial.goal.object.clone(), self.initial.goal.dest.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherTrace {
    pub task_id: String,
    /// Plan words as token ids, without a terminator.
    pub plan_tokens: Vec<u32>,
    pub steps: Vec<TeacherStep>,
}

pub fn teacher_trace(task: &TaskInstance, vocab: &Vocab) -> Result<TeacherTrace> {
    let steps = plan_solution(&task.initial).ok_or_else(|| Error::Input(format!("task {} has no solution", task.task_id)))?;
    let plan_tokens = vocab.encode(&plan_text(&task.initial, &steps))?;
    Ok(TeacherTrace { task_id: task.task_id.clone(), plan_tokens, steps })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCounts {
    pub train: usize,
    pub validation: usize,
    pub seen_eval: usize,
    pub unseen_eval: usize,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self { train: 20000, validation: 100, seen_eval: 300, unseen_eval: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSets {
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub seen_eval: Vec<TaskInstance>,
    pub unseen_eval: Vec<TaskInstance>,
    pub train_traces: Vec<TeacherTrace>,
    pub unseen_combos: BTreeSet<(String, String)>,
}

/// Fraction of (object, destination) kind pairs held out for the unseen split.
pub const UNSEEN_FRACTION: f64 = 0.2;

fn split_seed(seed: u64, split: Split) -> u64 {
    let salt = match split {
        Split::Train => 0x5452_4149,
        Split::Validation => 0x5641_4c49,
        Split::Seen => 0x5345_454e,
        Split::Unseen => 0x554e_5345,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

pub fn generate_tasks(seed: u64, counts: TaskCounts, kinds: &WorldKinds, vocab: &Vocab) -> Result<TaskSets> {
    if counts.train == 0 || counts.validation == 0 || counts.seen_eval == 0 || counts.unseen_eval == 0 {
        return Err(Error::Config("all task counts must be positive".into()));
    }
    if kinds.objects.len() < 2 || kinds.receptacles.len() < 3 {
        return Err(Error::Config("at least 2 object kinds and 3 receptacle kinds are needed for task diversity".into()));
    }
    for w in kinds.objects.iter().chain(&kinds.receptacles) {
        if vocab.id(w).is_none() {
            return Err(Error::Config(format!("kind {w:?} missing from vocabulary")));
        }
    }
    let mut combos: Vec<(String, String)> =
        kinds.objects.iter().flat_map(|o| kinds.receptacles.iter().map(move |r| (o.clone(), r.clone()))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    let n_unseen = ((combos.len() as f64) * UNSEEN_FRACTION).round() as usize;
    if n_unseen == 0 || n_unseen == combos.len() {
        return Err(Error::Config("too few kind combinations to hold out an unseen split".into()));
    }
    let unseen: Vec<(String, String)> = combos[..n_unseen].to_vec();
    let seen: Vec<(String, String)> = combos[n_unseen..].to_vec();

    let make = |split: Split, n: usize, pool: &[(String, String)]| -> Result<Vec<TaskInstance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, split));
        (0..n)
            .map(|i| {
                let combo = pool.choose(&mut rng).expect("pool is non-empty");
                let initial = sample_room(&mut rng, kinds, combo)?;
                Ok(TaskInstance { task_id: format!("{}-{i:04}", split.name()), split, initial })
            })
            .collect()
    };
    let train = make(Split::Train, counts.train, &seen)?;
    let train_traces = train.iter().map(|t| teacher_trace(t, vocab)).collect::<Result<Vec<_>>>()?;
    Ok(TaskSets {
        validation: make(Split::Validation, counts.validation, &seen)?,
        seen_eval: make(Split::Seen, counts.seen_eval, &seen)?,
        unseen_eval: make(Split::Unseen, counts.unseen_eval, &unseen)?,
        train,
        train_traces,
        unseen_combos: unseen.into_iter().collect(),
    })
}

fn sample_room(rng: &mut ChaCha8Rng, kinds: &WorldKinds, combo: &(String, String)) -> Result<State> {
    let (object, dest) = combo;
    let count: u32 = if rng.random_bool(0.3) { 2 } else { 1 };
    let n_rec = rng.random_range(3..=MAX_RECEPTACLES);
    let mut rec_kinds = vec![dest.clone()];
    // Goal objects must start outside the destination kind.
    let others: Vec<&String> = kinds.receptacles.iter().filter(|k| *k != dest).collect();
    rec_kinds.push(others.choose(rng).expect("at least two receptacle kinds").to_string());
    while rec_kinds.len() < n_rec {
        rec_kinds.push(kinds.receptacles.choose(rng).expect("non-empty").clone());
    }
    rec_kinds.shuffle(rng);

    let mut numbering: BTreeMap<String, u32> = BTreeMap::new();
    let mut next_num = |kind: &str| -> Result<u32> {
        let n = numbering.entry(kind.to_string()).or_insert(0);
        *n += 1;
        if *n > MAX_INSTANCE {
            return Err(Error::Config(format!("more than {MAX_INSTANCE} instances of {kind}")));
        }
        Ok(*n)
    };
    let mut receptacles = Vec::with_capacity(n_rec);
    for k in &rec_kinds {
        receptacles.push(Receptacle {
            id: Entity::new(k, next_num(k)?),
            openable: kinds.is_openable(k),
            open: false,
            contents: Vec::new(),
        });
    }
    let sources: Vec<usize> = (0..n_rec).filter(|&i| receptacles[i].id.kind != *dest).collect();
    for _ in 0..count {
        let i = *sources.choose(rng).expect("a non-destination receptacle exists");
        receptacles[i].contents.push(Entity::new(object, next_num(object)?));
    }
    let n_distractors = rng.random_range(1..=MAX_OBJECTS - count as usize);
    let distractor_kinds: Vec<&String> = kinds.objects.iter().filter(|k| *k != object).collect();
    for _ in 0..n_distractors {
        let k = distractor_kinds.choose(rng).expect("at least two object kinds").to_string();
        let i = rng.random_range(0..n_rec);
        receptacles[i].contents.push(Entity::new(&k, next_num(&k)?));
    }
    for r in &mut receptacles {
        r.contents.shuffle(rng);
    }
    let state =
        State { receptacles, location: None, holding: None, goal: Goal { object: object.clone(), count, dest: dest.clone() } };
    debug_assert!(plan_solution(&state).is_some_and(|s| s.len() <= STEP_CAP));
    Ok(state)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

use super::vocab::{Vocab, END, OBS};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const STEP_CAP: usize = 20;
pub const INVALID_OBSERVATION: &str = "nothing happened";

/// A numbered instance such as `cup 1` or `drawer 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub num: u32,
}

impl Entity {
    pub fn new(kind: &str, num: u32) -> Self {
        Self { kind: kind.to_string(), num }
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.num)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Receptacle {
    pub id: Entity,
    pub openable: bool,
    pub open: bool,
    pub contents: Vec<Entity>,
}

impl Receptacle {
    fn accessible(&self) -> bool {
        !self.openable || self.open
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Goal {
    pub object: String,
    pub count: u32,
    pub dest: String,
}

impl Goal {
    pub fn text(&self) -> String {
        let qty = if self.count >= 2 { "two" } else { "a" };
        format!("task : put {qty} {} in {} .", self.object, self.dest)
    }
}

/// Full environment state. `step` is a pure function of this and an action.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub receptacles: Vec<Receptacle>,
    pub location: Option<usize>,
    pub holding: Option<Entity>,
    pub goal: Goal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    GoTo(Entity),
    Take(Entity, Entity),
    Put(Entity, Entity),
    Open(Entity),
    Close(Entity),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::GoTo(r) => write!(f, "go to {r}"),
            Action::Take(o, r) => write!(f, "take {o} from {r}"),
            Action::Put(o, r) => write!(f, "put {o} in {r}"),
            Action::Open(r) => write!(f, "open {r}"),
            Action::Close(r) => write!(f, "close {r}"),
        }
    }
}

fn entity(kind: &str, num: &str) -> Option<Entity> {
    let n: u32 = num.parse().ok()?;
    Some(Entity::new(kind, n))
}

impl Action {
    /// Parses the action grammar from words; anything else is `None`.
    pub fn parse(words: &[&str]) -> Option<Action> {
        match words {
            ["go", "to", r, n] => Some(Action::GoTo(entity(r, n)?)),
            ["take", o, on, "from", r, rn] => Some(Action::Take(entity(o, on)?, entity(r, rn)?)),
            ["put", o, on, "in", r, rn] => Some(Action::Put(entity(o, on)?, entity(r, rn)?)),
            ["open", r, n] => Some(Action::Open(entity(r, n)?)),
            ["close", r, n] => Some(Action::Close(entity(r, n)?)),
            _ => None,
        }
    }
}

fn list(items: &[Entity]) -> String {
    if items.is_empty() {
        "nothing".to_string()
    } else {
        items.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" , ")
    }
}

impl State {
    pub fn find(&self, id: &Entity) -> Option<usize> {
        self.receptacles.iter().position(|r| &r.id == id)
    }

    pub fn is_goal(&self) -> bool {
        let placed = self
            .receptacles
            .iter()
            .filter(|r| r.id.kind == self.goal.dest)
            .flat_map(|r| r.contents.iter())
            .filter(|o| o.kind == self.goal.object)
            .count();
        placed as u32 >= self.goal.count
    }

    /// The receiver's view: receptacle names and the goal, no contents.
    pub fn task_text(&self) -> String {
        let names: Vec<String> = self.receptacles.iter().map(|r| r.id.to_string()).collect();
        format!("you see {} . {}", names.join(" , "), self.goal.text())
    }

    /// The sender's privileged view: the full layout and the goal.
    pub fn layout_text(&self) -> String {
        let parts: Vec<String> = self.receptacles.iter().map(|r| format!("{} has {}", r.id, list(&r.contents))).collect();
        format!("room : {} . {}", parts.join(" ; "), self.goal.text())
    }

    /// Applies `action`; `None` stands for an unparseable action. Invalid
    /// actions leave the state unchanged.
    pub fn step(&self, action: Option<&Action>) -> (String, State, bool) {
        match action.and_then(|a| self.apply(a)) {
            Some((obs, next)) => {
                let done = next.is_goal();
                (obs, next, done)
            }
            None => (INVALID_OBSERVATION.to_string(), self.clone(), self.is_goal()),
        }
    }

    fn apply(&self, action: &Action) -> Option<(String, State)> {
        let mut s = self.clone();
        let here = |s: &State, r: &Entity| -> Option<usize> {
            let i = s.find(r)?;
            (s.location == Some(i)).then_some(i)
        };
        let obs = match action {
            Action::GoTo(r) => {
                let i = s.find(r)?;
                s.location = Some(i);
                let rec = &s.receptacles[i];
                if rec.accessible() {
                    format!("on {} you see {}", rec.id, list(&rec.contents))
                } else {
                    format!("{} is closed", rec.id)
                }
            }
            Action::Open(r) => {
                let i = here(&s, r)?;
                let rec = &mut s.receptacles[i];
                if !rec.openable || rec.open {
                    return None;
                }
                rec.open = true;
                format!("you open {} . you see {}", rec.id, list(&rec.contents))
            }
            Action::Close(r) => {
                let i = here(&s, r)?;
                let rec = &mut s.receptacles[i];
                if !rec.openable || !rec.open {
                    return None;
                }
                rec.open = false;
                format!("you close {}", rec.id)
            }
            Action::Take(o, r) => {
                let i = here(&s, r)?;
                if s.holding.is_some() || !s.receptacles[i].accessible() {
                    return None;
                }
                let pos = s.receptacles[i].contents.iter().position(|c| c == o)?;
                let obj = s.receptacles[i].contents.remove(pos);
                s.holding = Some(obj);
                format!("you pick up {o}")
            }
            Action::Put(o, r) => {
                let i = here(&s, r)?;
                if s.holding.as_ref() != Some(o) || !s.receptacles[i].accessible() {
                    return None;
                }
                let obj = s.holding.take()?;
                s.receptacles[i].contents.push(obj);
                format!("you put {o} in {r}")
            }
        };
        Some((obs, s))
    }

    /// Every grammatical action over this room's receptacles and objects.
    pub fn candidate_actions(&self) -> Vec<Action> {
        let mut objects: Vec<Entity> = self.receptacles.iter().flat_map(|r| r.contents.iter().cloned()).collect();
        objects.extend(self.holding.iter().cloned());
        objects.sort();
        let mut out = Vec::new();
        for r in &self.receptacles {
            out.push(Action::GoTo(r.id.clone()));
            out.push(Action::Open(r.id.clone()));
            out.push(Action::Close(r.id.clone()));
            for o in &objects {
                out.push(Action::Take(o.clone(), r.id.clone()));
                out.push(Action::Put(o.clone(), r.id.clone()));
            }
        }
        out
    }
}

/// Observation tokens `<obs> ... <end>` for an observation string.
pub fn observation_tokens(vocab: &Vocab, obs: &str) -> Vec<u32> {
    let mut out = vec![vocab.tok(OBS)];
    out.extend(vocab.encode(obs).expect("observations use the environment vocabulary"));
    out.push(vocab.tok(END));
    out
}

/// One step of a teacher trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherStep {
    pub thought: String,
    pub action: Action,
}

/// Optimal scripted solution from `state`: fetch each required object from
/// its receptacle and put it in the first receptacle of the goal kind.
pub fn plan_solution(state: &State) -> Option<Vec<TeacherStep>> {
    let goal = &state.goal;
    let dest_idx = state.receptacles.iter().position(|r| r.id.kind == goal.dest)?;
    let dest = state.receptacles[dest_idx].id.clone();
    let mut sources: Vec<(Entity, usize)> = Vec::new();
    for (i, r) in state.receptacles.iter().enumerate() {
        if r.id.kind == goal.dest {
            continue;
        }
        for o in &r.contents {
            if o.kind == goal.object {
                sources.push((o.clone(), i));
            }
        }
    }
    if sources.len() < goal.count as usize {
        return None;
    }
    let mut steps = Vec::new();
    let mut opened = vec![false; state.receptacles.len()];
    let kind = &goal.object;
    let mut push = |thought: &str, action: Action| {
        steps.push(TeacherStep { thought: format!("{thought} {kind}"), action });
    };
    for (obj, src) in sources.into_iter().take(goal.count as usize) {
        let src_rec = &state.receptacles[src];
        push("seek", Action::GoTo(src_rec.id.clone()));
        if src_rec.openable && !src_rec.open && !opened[src] {
            push("unlock", Action::Open(src_rec.id.clone()));
            opened[src] = true;
        }
        push("grab", Action::Take(obj.clone(), src_rec.id.clone()));
        push("carry", Action::GoTo(dest.clone()));
        let dest_rec = &state.receptacles[dest_idx];
        if dest_rec.openable && !dest_rec.open && !opened[dest_idx] {
            push("unlock", Action::Open(dest.clone()));
            opened[dest_idx] = true;
        }
        push("place", Action::Put(obj, dest.clone()));
    }
    Some(steps)
}

/// The language-space plan text for a solution.
pub fn plan_text(state: &State, steps: &[TeacherStep]) -> String {
    let mut facts = Vec::new();
    for s in steps {
        if let Action::Take(o, r) = &s.action {
            facts.push(format!("{o} is in {r}"));
        }
    }
    let actions: Vec<String> = steps.iter().map(|s| s.action.to_string()).collect();
    let _ = state;
    format!("think : {} . {}", facts.join(" , "), actions.join(" , "))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_state() -> State {
        State {
            receptacles: vec![
                Receptacle {
                    id: Entity::new("drawer", 1),
                    openable: true,
                    open: false,
                    contents: vec![Entity::new("cup", 1), Entity::new("key", 1)],
                },
                Receptacle { id: Entity::new("shelf", 1), openable: false, open: false, contents: vec![] },
                Receptacle { id: Entity::new("table", 1), openable: false, open: false, contents: vec![Entity::new("apple", 1)] },
            ],
            location: None,
            holding: None,
            goal: Goal { object: "cup".into(), count: 1, dest: "shelf".into() },
        }
    }

    #[test]
    fn go_to_lists_contents() {
        let s = sample_state();
        let (obs, next, done) = s.step(Some(&Action::GoTo(Entity::new("shelf", 1))));
        assert_eq!(obs, "on shelf 1 you see nothing");
        assert_eq!(next.location, Some(1));
        assert!(!done);
        let (obs, _, _) = s.step(Some(&Action::GoTo(Entity::new("table", 1))));
        assert_eq!(obs, "on table 1 you see apple 1");
        let (obs, _, _) = s.step(Some(&Action::GoTo(Entity::new("drawer", 1))));
        assert_eq!(obs, "drawer 1 is closed");
    }

    #[test]
    fn take_from_wrong_place_is_invalid() {
        let s = sample_state();
        let (_, at_shelf, _) = s.step(Some(&Action::GoTo(Entity::new("shelf", 1))));
        let (obs, next, _) = at_shelf.step(Some(&Action::Take(Entity::new("cup", 1), Entity::new("shelf", 1))));
        assert_eq!(obs, INVALID_OBSERVATION);
        assert_eq!(next, at_shelf);
        let (obs, next, _) = s.step(None);
        assert_eq!(obs, INVALID_OBSERVATION);
        assert_eq!(next, s);
    }

    #[test]
    fn teacher_solution_completes_goal() {
        let s = sample_state();
        let steps = plan_solution(&s).unwrap();
        let mut cur = s.clone();
        let mut done = false;
        for (i, st) in steps.iter().enumerate() {
            let (obs, next, d) = cur.step(Some(&st.action));
            assert_ne!(obs, INVALID_OBSERVATION, "step {i} {:?}", st.action);
            cur = next;
            done = d;
        }
        assert!(done);
        assert_eq!(plan_text(&s, &steps), "think : cup 1 is in drawer 1 . go to drawer 1 , open drawer 1 , take cup 1 from drawer 1 , go to shelf 1 , put cup 1 in shelf 1");
    }

    #[test]
    fn action_text_round_trips() {
        for a in sample_state().candidate_actions() {
            let text = a.to_string();
            let words: Vec<&str> = text.split_whitespace().collect();
            assert_eq!(Action::parse(&words), Some(a));
        }
        assert_eq!(Action::parse(&["go", "to", "shelf"]), None);
    }
}

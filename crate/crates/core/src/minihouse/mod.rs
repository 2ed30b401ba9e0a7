//! Synthetic household text environment: rooms of receptacles holding
//! objects, a small action grammar, scripted teacher plans and an episode
//! harness with a 20-step cap.

pub mod env;
pub mod episode;
pub mod tasks;
pub mod vocab;

pub use env::{Action, Entity, Goal, Receptacle, State, TeacherStep, INVALID_OBSERVATION, STEP_CAP};
pub use episode::{evaluate_suite, run_episode, Agent, EpisodeResult, SuiteReport, Transcript};
pub use tasks::{generate_tasks, Split, TaskCounts, TaskInstance, TaskSets, TeacherTrace};
pub use vocab::{Vocab, WorldKinds};

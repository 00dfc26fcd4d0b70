//! Task-oriented conversation: fixture database, belief states, fuzzy
//! name annotation, rule policy, a two-phase model engine and a goal-driven
//! user simulator.

pub mod annotate;
pub mod corpus;
pub mod db;
pub mod engine;
pub mod policy;
pub mod simulator;
pub mod state;

pub use annotate::{fuzzy_annotate, prepare_utterance, Annotation, NameSpan};
pub use corpus::{gen_task_corpus, gen_task_dialogues, task_vocab_texts, OracleBot, TaskDialogue};
pub use db::{normalize, Database, DbRecord};
pub use engine::{Engine, EngineConfig, ModelBot, Session, TurnTrace};
pub use policy::{clarify_policy, needs_phase_two, refresh_action};
pub use simulator::{evaluate_bot, sample_goals, simulate, BotTurn, DialogueOutcome, Goal, SuccessRates, TaskBot, UserTurn};
pub use state::{ActType, BeliefState, SystemAction};

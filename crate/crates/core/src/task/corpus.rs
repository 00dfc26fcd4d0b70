//! Task-oriented training dialogues from the simulator talking to a rule
//! bot with access to the true user meaning.

use serde::{Deserialize, Serialize};

use crate::data::sample::DialogueSample;
use crate::error::Result;

use super::annotate::{fuzzy_annotate, prepare_utterance, tagged_name};
use super::db::{normalize, Database};
use super::engine::{target_text, turn_context, Session};
use super::policy::{lexicalize, oracle_action, response_template, select_record};
use super::simulator::{sample_goals, simulate, BotTurn, DialogueOutcome, Goal, TaskBot, UserTurn};
use super::state::SystemAction;

/// Reference bot: tracks the state from the user's intended meaning and
/// acts by [`oracle_action`]. Records one training sample per turn.
pub struct OracleBot<'a> {
    db: &'a Database,
    session: Session,
    pub samples: Vec<DialogueSample>,
}

impl<'a> OracleBot<'a> {
    pub fn new(db: &'a Database) -> Self {
        Self {
            db,
            session: Session::default(),
            samples: Vec::new(),
        }
    }
}

impl TaskBot for OracleBot<'_> {
    fn reset(&mut self) {
        self.session = Session::default();
    }

    fn respond(&mut self, user: &UserTurn) -> Result<BotTurn> {
        let annotation = fuzzy_annotate(&prepare_utterance(&user.text), self.db);
        let context = turn_context(&self.session.state, &self.session.prev_delex, &annotation.canonical);
        let mut state = self.session.state.clone();
        state.touch(&user.domain)?;
        for (slot, value) in &user.informs {
            // Names enter the state as the model sees them.
            let value = match slot.as_str() {
                "name" => tagged_name(&annotation.canonical).unwrap_or_else(|| normalize(value)),
                _ => value.clone(),
            };
            state.set(&user.domain, slot, &value)?;
        }
        let domain = user.domain.as_str();
        let records = self.db.query(domain, &state.constraints(domain))?;
        let action: SystemAction = oracle_action(domain, &state, &records, &user.intent);
        let delex = response_template(&action, domain, &records);
        let record = select_record(&records, self.session.offered.as_deref());
        let (text, filled) = lexicalize(&delex, domain, record);
        let entity = (!filled.is_empty()).then(|| record.map(|r| r["name"].clone())).flatten();
        if delex.split_whitespace().any(|w| w == "@name") {
            self.session.offered = entity.clone();
        }
        let mut sample = DialogueSample::new(context, target_text(&state, &action, &delex));
        sample.belief_state = Some(state.to_string());
        sample.system_action = Some(action.to_string());
        self.samples.push(sample);
        self.session.state = state;
        self.session.prev_delex = delex.clone();
        Ok(BotTurn {
            text,
            delex,
            action: Some(action),
            entity,
            filled,
        })
    }
}

/// One generated dialogue with its per-turn samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDialogue {
    pub outcome: DialogueOutcome,
    pub samples: Vec<DialogueSample>,
}

/// `n` dialogues from goals sampled with `seed`; dialogue `i` runs with
/// seed `seed + i`.
pub fn gen_task_dialogues(db: &Database, n: usize, seed: u64) -> Result<Vec<TaskDialogue>> {
    let goals: Vec<Goal> = sample_goals(db, n, seed)?;
    let mut bot = OracleBot::new(db);
    goals
        .iter()
        .enumerate()
        .map(|(i, g)| {
            bot.samples.clear();
            let outcome = simulate(&mut bot, g, seed.wrapping_add(i as u64))?;
            Ok(TaskDialogue {
                outcome,
                samples: std::mem::take(&mut bot.samples),
            })
        })
        .collect()
}

/// Samples of `n` dialogues, flattened in dialogue order. Each response is
/// the full `<state> .. <action> .. <response> ..` target.
pub fn gen_task_corpus(db: &Database, n: usize, seed: u64) -> Result<Vec<DialogueSample>> {
    Ok(gen_task_dialogues(db, n, seed)?
        .into_iter()
        .flat_map(|d| d.samples)
        .collect())
}

/// Every text a task vocabulary must cover: corpus samples plus all
/// lowercased entity names.
pub fn task_vocab_texts<'a>(db: &'a Database, samples: &'a [DialogueSample]) -> Vec<String> {
    let mut texts: Vec<String> = db.names().iter().map(|(_, n)| n.to_lowercase()).collect();
    for s in samples {
        texts.extend(s.context.iter().cloned());
        texts.push(s.response.clone());
    }
    texts
}

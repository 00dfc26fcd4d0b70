//! Two-phase turn engine: decode state and action, consult the database,
//! refresh the action and, when it changed or nothing matched, decode the
//! reply again under the refreshed action.

use serde::{Deserialize, Serialize};

use crate::data::encode::{encode_prompt, SegmentScheme, Slot};
use crate::data::vocab::{Vocab, ACTION, EOS, RESPONSE, SPECIALS, STATE};
use crate::decode::search::{beam_search, PromptModel};
use crate::error::{Error, Result};
use crate::model::{Parameters, Role};

use super::annotate::{fuzzy_annotate, prepare_utterance};
use super::db::Database;
use super::policy::{lexicalize, needs_phase_two, refresh_action, select_record};
use super::simulator::{BotTurn, TaskBot, UserTurn};
use super::state::{BeliefState, SystemAction};

/// Model context for one turn: previous state, previous delexicalized
/// reply, annotated user utterance.
pub fn turn_context(prev_state: &BeliefState, prev_delex: &str, annotated_user: &str) -> Vec<String> {
    vec![prev_state.to_string(), prev_delex.to_string(), annotated_user.to_string()]
}

/// `<state> S <action> A <response> R`
pub fn target_text(state: &BeliefState, action: &SystemAction, delex: &str) -> String {
    format!(
        "{} {state} {} {action} {} {delex}",
        SPECIALS[STATE], SPECIALS[ACTION], SPECIALS[RESPONSE]
    )
}

/// Words of the three target sections; a missing marker leaves its
/// section `None`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TargetParts {
    pub state: Option<String>,
    pub action: Option<String>,
    pub response: Option<String>,
}

/// Splits a decoded target. Tokens before the first marker are dropped.
pub fn parse_target(tokens: &[usize], vocab: &Vocab) -> TargetParts {
    let mut parts = TargetParts::default();
    let mut current: Option<usize> = None;
    let mut words: Vec<usize> = Vec::new();
    let flush = |marker: Option<usize>, words: &mut Vec<usize>, parts: &mut TargetParts| {
        let text = Some(vocab.detokenize(words));
        match marker {
            Some(STATE) => parts.state = parts.state.take().or(text),
            Some(ACTION) => parts.action = parts.action.take().or(text),
            Some(RESPONSE) => parts.response = parts.response.take().or(text),
            _ => {}
        }
        words.clear();
    };
    for &t in tokens {
        match t {
            STATE | ACTION | RESPONSE => {
                flush(current, &mut words, &mut parts);
                current = Some(t);
            }
            EOS => break,
            _ => words.push(t),
        }
    }
    flush(current, &mut words, &mut parts);
    parts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub max_len: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_new_tokens: 48,
            max_len: 128,
        }
    }
}

/// Dialogue memory carried between turns.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub state: BeliefState,
    pub prev_delex: String,
    /// Database name of the entity last offered.
    pub offered: Option<String>,
}

/// Everything one turn decided, for inspection and tests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTrace {
    /// Annotated utterance the model saw.
    pub annotated: String,
    pub state: BeliefState,
    /// The decoded state did not parse; the previous state was kept.
    pub state_fallback: bool,
    /// First-phase action, `None` when it did not parse.
    pub predicted: Option<SystemAction>,
    pub results: usize,
    pub refreshed: SystemAction,
    pub phase_two: bool,
    pub phase_one_delex: String,
    pub delex: String,
}

/// A trained coarse model, its vocabulary and the database.
#[derive(Clone, Debug)]
pub struct Engine {
    pub params: Parameters,
    pub vocab: Vocab,
    pub db: Database,
    pub config: EngineConfig,
}

impl Engine {
    pub fn new(params: Parameters, vocab: Vocab, db: Database, config: EngineConfig) -> Result<Self> {
        if params.role() != Role::Coarse {
            return Err(Error::InvalidArgument("the task engine needs a coarse model".into()));
        }
        if config.beam_size == 0 || config.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("beam size and token budget must be positive".into()));
        }
        Ok(Self { params, vocab, db, config })
    }

    /// Beam-decodes after `forced` and returns the forced tokens followed
    /// by the continuation.
    fn decode(&self, context: &[String], forced: Vec<usize>) -> Result<Vec<usize>> {
        let prompt = encode_prompt(
            &[],
            context,
            &forced,
            &self.vocab,
            &SegmentScheme::default(),
            self.config.max_len,
            Slot::None,
        )?;
        let model = PromptModel { params: &self.params, prompt };
        let budget = self
            .config
            .max_new_tokens
            .min(self.config.max_len.saturating_sub(model.prompt.len()))
            .max(1);
        let hyp = beam_search(&model, self.config.beam_size, budget)?;
        let mut out = forced;
        out.extend_from_slice(hyp.body());
        Ok(out)
    }

    /// One system turn for the raw user text.
    pub fn turn(&self, session: &mut Session, user_text: &str) -> Result<(BotTurn, TurnTrace)> {
        let annotation = fuzzy_annotate(&prepare_utterance(user_text), &self.db);
        let context = turn_context(&session.state, &session.prev_delex, &annotation.canonical);
        let parts = parse_target(&self.decode(&context, vec![STATE])?, &self.vocab);

        let parsed = parts.state.as_deref().map(str::parse::<BeliefState>);
        let (state, state_fallback) = match parsed {
            Some(Ok(s)) => (s, false),
            _ => (session.state.clone(), true),
        };
        let predicted = parts.action.as_deref().and_then(|a| a.parse::<SystemAction>().ok());
        let domain = state.active_domain().unwrap_or_default().to_string();
        let records = if domain.is_empty() {
            Vec::new()
        } else {
            self.db.query(&domain, &state.constraints(&domain)).unwrap_or_default()
        };
        let refreshed = refresh_action(predicted.as_ref(), &domain, &state, &records);
        let phase_two = needs_phase_two(predicted.as_ref(), &refreshed, records.len());
        let phase_one_delex = parts.response.unwrap_or_default();
        let delex = if phase_two {
            let prefix = format!(
                "{} {state} {} {refreshed} {}",
                SPECIALS[STATE], SPECIALS[ACTION], SPECIALS[RESPONSE]
            );
            let forced = self.vocab.tokenize(&prefix);
            parse_target(&self.decode(&context, forced)?, &self.vocab)
                .response
                .unwrap_or_default()
        } else {
            phase_one_delex.clone()
        };

        let record = select_record(&records, session.offered.as_deref());
        let (text, filled) = lexicalize(&delex, &domain, record);
        let entity = (!filled.is_empty()).then(|| record.map(|r| r["name"].clone())).flatten();
        if delex.split_whitespace().any(|w| w == "@name") {
            session.offered = entity.clone();
        }
        session.state = state.clone();
        session.prev_delex = delex.clone();
        let bot = BotTurn {
            text,
            delex: delex.clone(),
            action: Some(refreshed.clone()),
            entity,
            filled,
        };
        let trace = TurnTrace {
            annotated: annotation.canonical,
            state,
            state_fallback,
            predicted,
            results: records.len(),
            refreshed,
            phase_two,
            phase_one_delex,
            delex,
        };
        Ok((bot, trace))
    }
}

/// [`Engine`] plus one session, for the simulator.
pub struct ModelBot<'a> {
    pub engine: &'a Engine,
    pub session: Session,
    pub traces: Vec<TurnTrace>,
}

impl<'a> ModelBot<'a> {
    pub fn new(engine: &'a Engine) -> Self {
        Self {
            engine,
            session: Session::default(),
            traces: Vec::new(),
        }
    }
}

impl TaskBot for ModelBot<'_> {
    fn reset(&mut self) {
        self.session = Session::default();
        self.traces.clear();
    }

    fn respond(&mut self, user: &UserTurn) -> Result<BotTurn> {
        let (bot, trace) = self.engine.turn(&mut self.session, &user.text)?;
        self.traces.push(trace);
        Ok(bot)
    }
}

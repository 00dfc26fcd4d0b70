//! Chat sessions shared by the terminal REPL and the HTTP service. Both
//! call [`reply`], so the two surfaces answer identically.

use duet_core::decode::{
    generate_candidates, respond, score_backward, score_coherence, score_forward, select, Candidate, Prompt,
};
use duet_core::task::{Goal, Session, TurnTrace};
use serde::{Deserialize, Serialize};

use crate::config::CorpusKind;
use crate::run::{LoadedRun, Responder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Open,
    Knowledge,
    Task,
}

impl Mode {
    pub fn of(kind: CorpusKind) -> Self {
        match kind {
            CorpusKind::Open | CorpusKind::OpenDeterministic => Mode::Open,
            CorpusKind::Knowledge => Mode::Knowledge,
            CorpusKind::Task => Mode::Task,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// One conversation. `history` only grows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    pub mode: Mode,
    pub knowledge: Vec<String>,
    pub goal: Option<Goal>,
    pub history: Vec<Utterance>,
    /// Task mode only.
    pub task: Session,
    pub traces: Vec<TurnTrace>,
}

impl ChatSession {
    pub fn new(id: impl Into<String>, mode: Mode, knowledge: Vec<String>, goal: Option<Goal>) -> Self {
        Self {
            id: id.into(),
            mode,
            knowledge,
            goal,
            history: Vec::new(),
            task: Session::default(),
            traces: Vec::new(),
        }
    }

    fn user_turns(&self) -> u64 {
        self.history.iter().filter(|u| u.speaker == Speaker::User).count() as u64
    }
}

/// A candidate as shown to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub z: usize,
    pub text: String,
    pub log_likelihood: f64,
    pub coherence: Option<f64>,
    pub forward: Option<f64>,
    pub backward: Option<f64>,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub reply: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<CandidateView>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<TurnTrace>,
}

/// Generates every latent candidate for `context` and scores it three ways.
pub fn scored_candidates(
    run: &LoadedRun,
    knowledge: &[String],
    context: &[String],
    seed: u64,
) -> anyhow::Result<Vec<Candidate>> {
    let Responder::Select { generation, evaluation } = &run.responder else {
        anyhow::bail!("{} has no stage-2 models", run.dir.display());
    };
    let prompt = Prompt::new(&run.vocab, knowledge, context, run.config.train.max_len);
    let mut decode = run.config.decode.clone();
    decode.seed = seed;
    let mut cands = generate_candidates(generation, &run.vocab, &prompt, &decode)?;
    score_forward(generation, &prompt, &mut cands)?;
    score_backward(generation, &prompt, &mut cands)?;
    score_coherence(evaluation, &prompt, &mut cands)?;
    Ok(cands)
}

/// Answers `text`, appending both turns to the session. Turn `i` decodes
/// with seed `decode.seed + i`.
pub fn reply(run: &LoadedRun, session: &mut ChatSession, text: &str) -> anyhow::Result<TurnReply> {
    if session.mode != run.mode() {
        anyhow::bail!("session is in {:?} mode but the run serves {:?}", session.mode, run.mode());
    }
    let seed = run.config.decode.seed.wrapping_add(session.user_turns());
    let mut context: Vec<String> = session.history.iter().map(|u| u.text.clone()).collect();
    context.push(text.to_string());
    let out = match &run.responder {
        Responder::Task(engine) => {
            let (bot, trace) = engine.turn(&mut session.task, text)?;
            session.traces.push(trace.clone());
            TurnReply {
                reply: bot.text,
                candidates: None,
                trace: Some(trace),
            }
        }
        Responder::Coarse { params } => {
            let prompt = Prompt::new(&run.vocab, &session.knowledge, &context, run.config.train.max_len);
            let mut decode = run.config.decode.clone();
            decode.seed = seed;
            TurnReply {
                reply: respond(params, &run.vocab, &prompt, &decode)?,
                candidates: None,
                trace: None,
            }
        }
        Responder::Select { .. } => {
            let cands = scored_candidates(run, &session.knowledge, &context, seed)?;
            let chosen = select(&cands)?;
            let (best, reply) = (chosen.z, chosen.text.clone());
            let views = cands
                .iter()
                .map(|c| CandidateView {
                    z: c.z,
                    text: c.text.clone(),
                    log_likelihood: c.log_likelihood,
                    coherence: c.coherence,
                    forward: c.forward,
                    backward: c.backward,
                    selected: c.z == best,
                })
                .collect();
            TurnReply {
                reply,
                candidates: Some(views),
                trace: None,
            }
        }
    };
    session.history.push(Utterance {
        speaker: Speaker::User,
        text: text.to_string(),
    });
    session.history.push(Utterance {
        speaker: Speaker::Bot,
        text: out.reply.clone(),
    });
    Ok(out)
}

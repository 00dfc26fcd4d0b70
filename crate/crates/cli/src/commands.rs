//! Subcommand bodies, kept apart from argument parsing so tests can call
//! them directly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context};
use duet_core::data::corpus::{knowledge, open_domain};
use duet_core::data::{encode_sample, save_corpus, SegmentScheme, Slot};
use duet_core::decode::{DecodeConfig, Strategy};
use duet_core::eval::{
    coherence_accuracy, coverage_rate, knowledge_grounding, open_domain_candidates, posterior_cluster_mi,
    selection_rates,
};
use duet_core::model::next_token_accuracy;
use duet_core::task::{evaluate_bot, sample_goals, ModelBot};
use duet_core::train::{NegativePool, Stage, StageCheckpoint};
use serde_json::json;

use crate::chat::{reply, scored_candidates, ChatSession};
use crate::config::{CorpusKind, RunConfig};
use crate::report::Report;
use crate::run::{generate_corpus, stage_dir, train, LoadedRun, Responder, StageSel};

pub const REPORTS_FILE: &str = "reports.jsonl";

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn gen_corpus(config: &RunConfig, out: &Path) -> anyhow::Result<Report> {
    config.validate()?;
    let samples = generate_corpus(config)?;
    save_corpus(out, &samples)?;
    Ok(Report::new(
        "gen-corpus",
        config,
        BTreeMap::new(),
        json!({"path": out, "samples": samples.len()}),
    ))
}

pub fn train_run(config: &RunConfig, stage: StageSel, corpus: Option<&Path>) -> anyhow::Result<Report> {
    let hashes = train(config, stage, corpus)?;
    let report = Report::new(
        "train",
        config,
        hashes,
        json!({"stage": format!("{stage:?}").to_lowercase(), "loss_log": config.paths.run.join("loss.jsonl")}),
    );
    report.append(&config.paths.run.join(REPORTS_FILE))?;
    Ok(report)
}

/// Every latent candidate for the context (one turn per line) with its
/// likelihood and three scores.
pub fn score(run_dir: &Path, context: &Path, knowledge: Option<&Path>) -> anyhow::Result<Report> {
    let run = LoadedRun::load(run_dir)?;
    let context = read_lines(context)?;
    let knowledge = knowledge.map(read_lines).transpose()?.unwrap_or_default();
    let cands = scored_candidates(&run, &knowledge, &context, run.config.decode.seed)?;
    let report = Report::new(
        "score",
        &run.config,
        run.hashes.clone(),
        json!({"context": context, "knowledge": knowledge, "candidates": cands.iter().map(|c| json!({
            "z": c.z,
            "text": c.text,
            "log_likelihood": c.log_likelihood,
            "coherence": c.coherence,
            "forward": c.forward,
            "backward": c.backward,
        })).collect::<Vec<_>>()}),
    );
    report.append(&run_dir.join(REPORTS_FILE))?;
    Ok(report)
}

/// Task success over `goals` simulator goals seeded with `seed`.
pub fn simulate(run_dir: &Path, goals: usize, seed: u64, dialogues: Option<&Path>) -> anyhow::Result<Report> {
    let run = LoadedRun::load(run_dir)?;
    let Responder::Task(engine) = &run.responder else {
        bail!("{} is not a task run", run_dir.display());
    };
    let goal_list = sample_goals(&engine.db, goals, seed)?;
    let mut bot = ModelBot::new(engine);
    let (rates, outcomes) = evaluate_bot(&mut bot, &goal_list, &engine.db, seed)?;
    if let Some(path) = dialogues {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for o in &outcomes {
            serde_json::to_writer(&mut f, o)?;
            writeln!(f)?;
        }
    }
    let mut config = run.config.clone();
    config.task.goals = goals;
    let report = Report::new(
        "simulate",
        &config,
        run.hashes.clone(),
        json!({
            "goals": goals,
            "goal_seed": seed,
            "success_without_grounding": rates.without_grounding,
            "success_with_grounding": rates.with_grounding,
            "average_success": rates.average,
        }),
    );
    report.append(&run_dir.join(REPORTS_FILE))?;
    Ok(report)
}

/// Held-out measurements suited to the run's corpus.
pub fn metrics(run_dir: &Path) -> anyhow::Result<Report> {
    let run = LoadedRun::load(run_dir)?;
    let c = &run.config;
    let max_len = c.train.max_len;
    let held_seed = c.seed.wrapping_add(1);
    let results = match (c.corpus.kind, &run.responder) {
        (CorpusKind::Task, _) => {
            return simulate(run_dir, c.task.goals, held_seed, None);
        }
        (CorpusKind::Knowledge, _) => {
            // Grounding is measured on the single-reply stage-1 model.
            let params = &StageCheckpoint::load(&stage_dir(run_dir, Stage::Coarse))?.params;
            let held = knowledge::gen_knowledge_corpus(held_seed, 200);
            let decode = DecodeConfig { strategy: Strategy::Beam, ..c.decode.clone() };
            let rate = |with: bool| -> anyhow::Result<f64> {
                let cases = knowledge_grounding(params, &run.vocab, &held, with, &decode, max_len)?;
                Ok(cases.iter().filter(|g| g.correct).count() as f64 / cases.len() as f64)
            };
            json!({"grounded_with_knowledge": rate(true)?, "grounded_without_knowledge": rate(false)?})
        }
        (_, Responder::Coarse { params }) => {
            let held = match c.corpus.kind {
                CorpusKind::OpenDeterministic => open_domain::gen_open_domain_deterministic(held_seed, 500),
                _ => open_domain::gen_open_domain_corpus(held_seed, 500),
            };
            let inputs = held
                .iter()
                .map(|s| encode_sample(s, &run.vocab, &SegmentScheme::default(), max_len, Slot::None))
                .collect::<duet_core::Result<Vec<_>>>()?;
            let (right, total) = next_token_accuracy(params, &inputs)?;
            json!({"next_token_accuracy": right as f64 / total.max(1) as f64})
        }
        (_, Responder::Select { generation, evaluation }) => {
            let (_, held_kinds) = open_domain::split_kinds();
            let held = open_domain::gen_open_domain_from(held_seed, 500, &held_kinds, 0.0);
            let mi = posterior_cluster_mi(generation, &run.vocab, &held, max_len)?;
            let pool = NegativePool::new(held.iter().map(|s| s.response.as_str()))?;
            let rce = coherence_accuracy(evaluation, &run.vocab, &held, &pool, held_seed, max_len)?;
            let decode = DecodeConfig { strategy: Strategy::Beam, ..c.decode.clone() };
            let sets = open_domain_candidates(generation, Some(evaluation), &run.vocab, &held_kinds, &decode, max_len)?;
            let sel = selection_rates(&sets)?;
            json!({
                "mutual_information_bits": mi,
                "coverage_3_clusters": coverage_rate(&sets, 3),
                "coherence_accuracy": rce,
                "selection_valid_random": sel.random,
                "selection_valid_coherence": sel.coherence,
                "selection_valid_forward": sel.forward,
            })
        }
        (_, Responder::Task(_)) => unreachable!("task runs are handled above"),
    };
    let report = Report::new("metrics", c, run.hashes.clone(), results);
    report.append(&run_dir.join(REPORTS_FILE))?;
    Ok(report)
}

/// Terminal chat: one user line in, one bot line out. `:debug` toggles
/// candidate or trace display; `:quit` or end of input stops.
pub fn chat(run_dir: &Path, knowledge: Option<&Path>, input: impl BufRead, mut output: impl Write) -> anyhow::Result<ChatSession> {
    let run = LoadedRun::load(run_dir)?;
    let knowledge = knowledge.map(read_lines).transpose()?.unwrap_or_default();
    let mut session = ChatSession::new("repl", run.mode(), knowledge, None);
    let mut debug = false;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => continue,
            ":quit" => break,
            ":debug" => {
                debug = !debug;
                writeln!(output, "debug {}", if debug { "on" } else { "off" })?;
                continue;
            }
            _ => {}
        }
        let r = reply(&run, &mut session, text)?;
        writeln!(output, "bot: {}", r.reply)?;
        if debug {
            for c in r.candidates.iter().flatten() {
                writeln!(
                    output,
                    "  {} z={} coherence={:.3} forward={:.3} backward={:.3} {}",
                    if c.selected { "*" } else { " " },
                    c.z,
                    c.coherence.unwrap_or(f64::NAN),
                    c.forward.unwrap_or(f64::NAN),
                    c.backward.unwrap_or(f64::NAN),
                    c.text
                )?;
            }
            if let Some(t) = &r.trace {
                writeln!(
                    output,
                    "  state: {} | action: {} | results: {} | phase 2: {}",
                    t.state, t.refreshed, t.results, t.phase_two
                )?;
            }
        }
    }
    Ok(session)
}

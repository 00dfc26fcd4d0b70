//! Rule policy: clarification, action refresh, response templates and
//! lexicalization from database records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::db::{schema, DbRecord};
use super::state::{ActType, BeliefState, SystemAction};

/// A clarifying question needs strictly more results than this.
pub const CLARIFY_MIN_RESULTS: usize = 2;

/// `clarify(slot)` for the first discriminating slot that is unfilled and
/// takes more than one value over more than [`CLARIFY_MIN_RESULTS`]
/// records.
pub fn clarify_policy(domain: &str, state: &BeliefState, records: &[&DbRecord]) -> Option<SystemAction> {
    if records.len() <= CLARIFY_MIN_RESULTS {
        return None;
    }
    let s = schema(domain).ok()?;
    s.discriminating
        .iter()
        .find(|slot| {
            state.get(domain, slot).is_none()
                && records.iter().map(|r| &r[**slot]).collect::<BTreeSet<_>>().len() > 1
        })
        .map(|slot| SystemAction::bare(ActType::Clarify, &[slot]))
}

/// What the user asked for in the current turn.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserIntent {
    pub requests: Vec<String>,
    pub bye: bool,
}

/// Reference action given the true state, the query results and the
/// user's intent.
pub fn oracle_action(
    domain: &str,
    state: &BeliefState,
    records: &[&DbRecord],
    intent: &UserIntent,
) -> SystemAction {
    if intent.bye {
        return SystemAction::bare(ActType::Bye, &[]);
    }
    if records.is_empty() {
        return SystemAction::no_match();
    }
    if !intent.requests.is_empty() {
        let slots: Vec<&str> = intent.requests.iter().map(String::as_str).collect();
        return SystemAction::bare(ActType::Inform, &slots);
    }
    if let Some(c) = clarify_policy(domain, state, records) {
        return c;
    }
    if state.get(domain, "area").is_none() && records.len() > CLARIFY_MIN_RESULTS {
        return SystemAction::bare(ActType::Request, &["area"]);
    }
    SystemAction::bare(ActType::Offer, &["name"])
}

/// Action after the database was consulted. `None` stands for an
/// unparseable first-phase action.
///
/// An empty result set always yields `inform count = 0`. A clarification
/// the results do not warrant becomes an offer, an offer the results make
/// ambiguous becomes a clarification, and a predicted no-match with
/// results becomes whichever of the two the results warrant. Everything
/// else is kept, so refreshing a refreshed action is the identity.
pub fn refresh_action(
    predicted: Option<&SystemAction>,
    domain: &str,
    state: &BeliefState,
    records: &[&DbRecord],
) -> SystemAction {
    let offer = || SystemAction::bare(ActType::Offer, &["name"]);
    if predicted.is_some_and(|a| a.act == ActType::Bye) {
        return SystemAction::bare(ActType::Bye, &[]);
    }
    if records.is_empty() {
        return SystemAction::no_match();
    }
    let clarify = clarify_policy(domain, state, records);
    match predicted {
        None => clarify.unwrap_or_else(offer),
        Some(a) if a.is_no_match() => clarify.unwrap_or_else(offer),
        Some(a) if a.act == ActType::Clarify && clarify.is_none() => offer(),
        Some(a) if a.act == ActType::Offer && clarify.is_some() => clarify.expect("checked"),
        Some(a) => a.clone(),
    }
}

/// Second decoding phase runs exactly when the refreshed action differs
/// from the first-phase one or the query found nothing.
pub fn needs_phase_two(predicted: Option<&SystemAction>, refreshed: &SystemAction, n_results: usize) -> bool {
    predicted != Some(refreshed) || n_results == 0
}

fn slot_phrase(slot: &str) -> String {
    match slot {
        "phone" => "the phone number is @phone".into(),
        "address" => "the address is @address".into(),
        "area" => "it is in the @area".into(),
        "price" => "it has @price prices".into(),
        "type" => "it is a @type".into(),
        "food" => "it serves @food food".into(),
        "name" => "it is called @name".into(),
        other => format!("the {other} is @{other}"),
    }
}

/// Delexicalized response for an action. Placeholders are `@slot`, plus
/// `@domain`.
pub fn response_template(action: &SystemAction, domain: &str, records: &[&DbRecord]) -> String {
    match action.act {
        ActType::Bye => "thank you for using our service , goodbye .".into(),
        ActType::Inform if action.is_no_match() => {
            "sorry , there is no @domain matching your request .".into()
        }
        ActType::Inform => {
            let parts: Vec<String> = action.slots().map(slot_phrase).collect();
            format!("for @name , {} .", parts.join(" and "))
        }
        ActType::Offer if domain == "restaurant" => {
            "how about @name ? it serves @food food in the @area .".into()
        }
        ActType::Offer => "how about @name ? it is a @type in the @area with @price prices .".into(),
        ActType::Clarify => {
            let slot = action.slots().next().unwrap_or("type");
            let values: BTreeSet<&str> = records.iter().filter_map(|r| r.get(slot)).map(String::as_str).collect();
            let options: Vec<String> = values.iter().map(|v| format!("a {v}")).collect();
            format!("would you like {} ?", options.join(" or "))
        }
        ActType::Request => match action.slots().next() {
            Some("area") => "which area would you like ?".into(),
            Some("price") => "what price range would you like ?".into(),
            Some(s) => format!("which {s} would you like ?"),
            None => "what are you looking for ?".into(),
        },
    }
}

/// The record a response talks about: the one offered earlier if it is
/// still among the results, otherwise the first result.
pub fn select_record<'a>(records: &[&'a DbRecord], offered: Option<&str>) -> Option<&'a DbRecord> {
    offered
        .and_then(|o| records.iter().find(|r| r["name"] == o).copied())
        .or_else(|| records.first().copied())
}

/// Fills placeholders from `record`; returns the text and every
/// `(slot, value)` it stated. Placeholders without a value stay verbatim.
pub fn lexicalize(delex: &str, domain: &str, record: Option<&DbRecord>) -> (String, Vec<(String, String)>) {
    let mut filled = Vec::new();
    let words: Vec<String> = delex
        .split_whitespace()
        .map(|w| match w.strip_prefix('@') {
            Some("domain") => domain.to_string(),
            Some(slot) => match record.and_then(|r| r.get(slot)) {
                Some(v) => {
                    if !filled.iter().any(|(s, _): &(String, String)| s == slot) {
                        filled.push((slot.to_string(), v.clone()));
                    }
                    v.clone()
                }
                None => w.to_string(),
            },
            None => w.to_string(),
        })
        .collect();
    (words.join(" "), filled)
}

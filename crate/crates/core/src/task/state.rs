//! Belief states and system actions with their flat text forms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::db::schema;

/// Domain to slot to value. Serializes as
/// `hotel area = north ; hotel type = guesthouse`, sorted by domain then
/// slot. A domain without slots is the bare item `hotel`; the empty state
/// is the empty string.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefState {
    pub domains: BTreeMap<String, BTreeMap<String, String>>,
}

fn parse_err(span: &str, reason: &str) -> Error {
    Error::Parse {
        span: span.to_string(),
        reason: reason.to_string(),
    }
}

fn check_value(v: &str) -> Result<()> {
    if v.split_whitespace().next().is_none() || v.contains(['=', ';', ',']) {
        return Err(parse_err(v, "bad slot value"));
    }
    Ok(())
}

impl BeliefState {
    pub fn is_empty(&self) -> bool {
        self.domains.values().all(BTreeMap::is_empty)
    }

    /// Opens a domain without constraining it.
    pub fn touch(&mut self, domain: &str) -> Result<()> {
        schema(domain)?;
        self.domains.entry(domain.to_string()).or_default();
        Ok(())
    }

    /// Sets a slot after checking it against the domain schema.
    pub fn set(&mut self, domain: &str, slot: &str, value: &str) -> Result<()> {
        if !schema(domain)?.informable.contains(&slot) {
            return Err(parse_err(slot, &format!("not a {domain} slot")));
        }
        let value = value.split_whitespace().collect::<Vec<_>>().join(" ");
        check_value(&value)?;
        self.domains
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value);
        Ok(())
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.domains.get(domain)?.get(slot).map(String::as_str)
    }

    /// The last domain holding constraints, else the last open one.
    pub fn active_domain(&self) -> Option<&str> {
        self.domains
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(d, _)| d.as_str())
            .last()
            .or_else(|| self.domains.keys().last().map(String::as_str))
    }

    pub fn constraints(&self, domain: &str) -> BTreeMap<String, String> {
        self.domains.get(domain).cloned().unwrap_or_default()
    }
}

impl fmt::Display for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut sep = |f: &mut fmt::Formatter<'_>| {
            let out = if first { Ok(()) } else { f.write_str(" ; ") };
            first = false;
            out
        };
        for (d, slots) in &self.domains {
            if slots.is_empty() {
                sep(f)?;
                f.write_str(d)?;
            }
            for (s, v) in slots {
                sep(f)?;
                write!(f, "{d} {s} = {v}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for BeliefState {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut state = BeliefState::default();
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Ok(state);
        }
        for item in words.split(|w| *w == ";") {
            let span = item.join(" ");
            let bad = |why: &str| parse_err(&span, why);
            match item {
                [domain, slot, "=", value @ ..] if !value.is_empty() => {
                    state.set(domain, slot, &value.join(" ")).map_err(|e| bad(&e.to_string()))?;
                }
                [_, _, "="] => return Err(bad("missing value")),
                [domain] => state.touch(domain).map_err(|e| bad(&e.to_string()))?,
                _ => return Err(bad("expected `domain slot = value`")),
            }
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActType {
    Inform,
    Request,
    Clarify,
    Offer,
    Bye,
}

impl ActType {
    pub const ALL: [ActType; 5] = [
        ActType::Inform,
        ActType::Request,
        ActType::Clarify,
        ActType::Offer,
        ActType::Bye,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActType::Inform => "inform",
            ActType::Request => "request",
            ActType::Clarify => "clarify",
            ActType::Offer => "offer",
            ActType::Bye => "bye",
        }
    }
}

/// One act with slot arguments, e.g. `inform phone , address`,
/// `inform count = 0` or `clarify type`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemAction {
    pub act: ActType,
    pub args: Vec<(String, Option<String>)>,
}

impl SystemAction {
    pub fn new(act: ActType, args: Vec<(String, Option<String>)>) -> Result<Self> {
        if act == ActType::Clarify && (args.len() != 1 || args[0].1.is_some()) {
            return Err(parse_err(act.as_str(), "clarify takes exactly one bare slot"));
        }
        for (slot, value) in &args {
            if slot.contains(char::is_whitespace) || slot.is_empty() {
                return Err(parse_err(slot, "bad slot name"));
            }
            if let Some(v) = value {
                check_value(v)?;
            }
        }
        Ok(Self { act, args })
    }

    pub fn bare(act: ActType, slots: &[&str]) -> Self {
        Self::new(act, slots.iter().map(|s| (s.to_string(), None)).collect()).expect("valid slots")
    }

    pub fn no_match() -> Self {
        Self::new(ActType::Inform, vec![("count".into(), Some("0".into()))]).expect("valid")
    }

    pub fn is_no_match(&self) -> bool {
        self.act == ActType::Inform && self.args == [("count".to_string(), Some("0".to_string()))]
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.args.iter().map(|(s, _)| s.as_str())
    }
}

impl fmt::Display for SystemAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.act.as_str())?;
        for (i, (slot, value)) in self.args.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { " , " })?;
            f.write_str(slot)?;
            if let Some(v) = value {
                write!(f, " = {v}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for SystemAction {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let Some((head, rest)) = words.split_first() else {
            return Err(parse_err("", "empty action"));
        };
        let act = ActType::ALL
            .into_iter()
            .find(|a| a.as_str() == *head)
            .ok_or_else(|| parse_err(head, "unknown act"))?;
        let mut args = Vec::new();
        if !rest.is_empty() {
            for item in rest.split(|w| *w == ",") {
                match item {
                    [slot] => args.push((slot.to_string(), None)),
                    [slot, "=", value @ ..] if !value.is_empty() => {
                        args.push((slot.to_string(), Some(value.join(" "))))
                    }
                    _ => return Err(parse_err(&item.join(" "), "expected `slot` or `slot = value`")),
                }
            }
        }
        Self::new(act, args)
    }
}

//! Goal-driven user simulator and task success measures.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::db::{normalize, Database, DbRecord};
use super::policy::UserIntent;
use super::state::{ActType, SystemAction};

/// User turns per dialogue before the user gives up.
pub const MAX_TURNS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub domain: String,
    /// Informable slot constraints; a named goal holds only `name`.
    pub constraints: BTreeMap<String, String>,
    /// Slots the user wants to hear about the entity.
    pub requests: Vec<String>,
    /// How the user writes the entity name, for named goals.
    pub mention: Option<String>,
    /// Replacement `(slot, value)` the user accepts after a no-match.
    pub fallback: Option<(String, String)>,
}

impl Goal {
    /// Constraints after the fallback, which applies exactly when the
    /// original constraints match nothing.
    pub fn final_constraints(&self, db: &Database) -> Result<BTreeMap<String, String>> {
        let mut c = self.constraints.clone();
        if let Some((slot, value)) = &self.fallback {
            if db.query(&self.domain, &c)?.is_empty() {
                c.insert(slot.clone(), value.clone());
            }
        }
        Ok(c)
    }
}

/// One user utterance with the meaning the simulator intended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTurn {
    pub text: String,
    pub domain: String,
    /// Constraints stated in this turn.
    pub informs: Vec<(String, String)>,
    pub intent: UserIntent,
}

/// One system reply as the user perceives it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotTurn {
    pub text: String,
    /// Reply before lexicalization.
    pub delex: String,
    pub action: Option<SystemAction>,
    /// Database name of the entity the reply talks about.
    pub entity: Option<String>,
    /// `(slot, value)` pairs the reply states.
    pub filled: Vec<(String, String)>,
}

pub trait TaskBot {
    /// Starts a new dialogue.
    fn reset(&mut self);
    fn respond(&mut self, user: &UserTurn) -> Result<BotTurn>;
}

/// Case changes, hyphen/space swaps and a dropped leading article.
pub fn name_variant<R: Rng + ?Sized>(name: &str, rng: &mut R) -> String {
    let mut v = match rng.gen_range(0..3) {
        0 => name.to_string(),
        1 => name.to_lowercase(),
        _ => name.to_uppercase(),
    };
    if v.contains('-') && rng.gen_bool(0.5) {
        v = v.replace('-', " ");
    }
    if rng.gen_bool(0.5) {
        for article in ["the ", "The ", "THE "] {
            if let Some(rest) = v.strip_prefix(article) {
                v = rest.to_string();
            }
        }
    }
    v
}

fn pick<'a, R: Rng + ?Sized>(items: &'a [&'a str], rng: &mut R) -> &'a str {
    items.choose(rng).copied().expect("non-empty choice list")
}

fn requests<R: Rng + ?Sized>(rng: &mut R) -> Vec<String> {
    match rng.gen_range(0..3) {
        0 => vec!["phone".into()],
        1 => vec!["address".into()],
        _ => vec!["phone".into(), "address".into()],
    }
}

fn describe(domain: &str, r: &DbRecord, with_price: bool) -> BTreeMap<String, String> {
    let mut slots = vec![if domain == "hotel" { "type" } else { "food" }, "area"];
    if with_price {
        slots.push("price");
    }
    slots.into_iter().map(|s| (s.to_string(), r[s].clone())).collect()
}

/// Named goals (20%), satisfiable constraint goals and goals whose area
/// matches nothing until the fallback area is accepted (15%).
pub fn sample_goals(db: &Database, n: usize, seed: u64) -> Result<Vec<Goal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains: Vec<&str> = db.domains().collect();
    let mut goals = Vec::with_capacity(n);
    while goals.len() < n {
        let domain = *domains.choose(&mut rng).expect("database has a domain");
        let table = db.table(domain)?;
        let r = table.choose(&mut rng).expect("non-empty table");
        let roll: f64 = rng.gen();
        let mut goal = Goal {
            domain: domain.to_string(),
            constraints: BTreeMap::new(),
            requests: requests(&mut rng),
            mention: None,
            fallback: None,
        };
        if roll < 0.2 {
            goal.constraints.insert("name".into(), r["name"].clone());
            goal.mention = Some(name_variant(&r["name"], &mut rng));
        } else {
            goal.constraints = describe(domain, r, rng.gen_bool(0.3));
            if roll > 0.85 {
                let mut areas = db.values(domain, "area");
                areas.shuffle(&mut rng);
                let empty = areas.into_iter().find(|a| {
                    let mut c = goal.constraints.clone();
                    c.insert("area".into(), a.clone());
                    db.query(domain, &c).map(|m| m.is_empty()).unwrap_or(false)
                });
                if let Some(a) = empty {
                    goal.fallback = Some(("area".into(), r["area"].clone()));
                    goal.constraints.insert("area".into(), a);
                }
            }
        }
        goals.push(goal);
    }
    Ok(goals)
}

fn inform_phrase(slot: &str, value: &str) -> String {
    match slot {
        "area" => format!("i would prefer something in the {value}"),
        "type" => format!("i would prefer a {value}"),
        "price" => format!("i would prefer something {value}"),
        "food" => format!("i would prefer {value} food"),
        _ => format!("i am looking for {value}"),
    }
}

fn request_phrase(slots: &[String]) -> String {
    let names: Vec<&str> = slots
        .iter()
        .map(|s| match s.as_str() {
            "phone" => "phone number",
            other => other,
        })
        .collect();
    format!("what is the {} ?", names.join(" and "))
}

/// Simulated user pursuing one goal.
pub struct UserSimulator<'a> {
    goal: &'a Goal,
    rng: ChaCha8Rng,
    target: BTreeMap<String, String>,
    told: BTreeMap<String, String>,
    fallback_used: bool,
    entity: Option<String>,
    received: BTreeMap<String, String>,
    satisfied: bool,
}

impl<'a> UserSimulator<'a> {
    pub fn new(goal: &'a Goal, seed: u64) -> Self {
        Self {
            goal,
            rng: ChaCha8Rng::seed_from_u64(seed),
            target: goal.constraints.clone(),
            told: BTreeMap::new(),
            fallback_used: false,
            entity: None,
            received: BTreeMap::new(),
            satisfied: false,
        }
    }

    fn turn(&mut self, text: String, informs: Vec<(String, String)>, intent: UserIntent) -> UserTurn {
        for (s, v) in &informs {
            self.told.insert(s.clone(), v.clone());
        }
        UserTurn {
            text,
            domain: self.goal.domain.clone(),
            informs,
            intent,
        }
    }

    pub fn opening(&mut self) -> UserTurn {
        let g = self.goal;
        let c = &g.constraints;
        if let Some(m) = &g.mention {
            let frame = pick(
                &["i am looking for {}", "can you tell me about {} ?", "i would like some information on {}"],
                &mut self.rng,
            );
            let text = frame.replace("{}", m);
            return self.turn(text, vec![("name".into(), c["name"].clone())], UserIntent::default());
        }
        let price = c.get("price").map(|p| format!(" with {p} prices")).unwrap_or_default();
        let mut informs: Vec<(String, String)> = c.get("price").map(|p| ("price".into(), p.clone())).into_iter().collect();
        let text = if g.domain == "hotel" {
            let (ty, area) = (&c["type"], &c["area"]);
            match self.rng.gen_range(0..10) {
                0..=2 => {
                    informs.extend([("type".into(), ty.clone()), ("area".into(), area.clone())]);
                    format!("i am looking for a {ty} in the {area}{price}")
                }
                3..=4 => {
                    informs.push(("area".into(), area.clone()));
                    format!("i need a place to stay in the {area}{price}")
                }
                5..=6 => {
                    informs.push(("type".into(), ty.clone()));
                    format!("i am looking for a {ty}{price}")
                }
                _ => format!("i need a place to stay{price}"),
            }
        } else {
            let (food, area) = (&c["food"], &c["area"]);
            informs.push(("food".into(), food.clone()));
            if self.rng.gen_bool(0.8) {
                informs.push(("area".into(), area.clone()));
                format!("i want {food} food in the {area}{price}")
            } else {
                format!("i am looking for a {food} restaurant{price}")
            }
        };
        self.turn(text, informs, UserIntent::default())
    }

    /// Next user turn, or `None` once the dialogue is over.
    pub fn react(&mut self, bot: &BotTurn) -> Option<UserTurn> {
        let act = bot.action.as_ref();
        if act.is_some_and(|a| a.act == ActType::Bye) {
            return None;
        }
        if let Some(e) = &bot.entity {
            if self.entity.as_ref() != Some(e) {
                self.entity = Some(e.clone());
                self.received.clear();
            }
        }
        for (s, v) in &bot.filled {
            if self.goal.requests.contains(s) {
                self.received.insert(s.clone(), v.clone());
            }
        }
        // Offered attributes that contradict the goal get corrected.
        for (s, v) in &bot.filled {
            let Some(want) = self.target.get(s) else { continue };
            if normalize(want) != normalize(v) {
                let (s, want) = (s.clone(), want.clone());
                self.entity = None;
                let text = match (&self.goal.mention, s.as_str()) {
                    (Some(m), "name") => format!("no , i am looking for {m}"),
                    _ => inform_phrase(&s, &want),
                };
                return Some(self.turn(text, vec![(s, want)], UserIntent::default()));
            }
        }
        let bye = |sim: &mut Self, text: &str| {
            Some(sim.turn(text.into(), vec![], UserIntent { requests: vec![], bye: true }))
        };
        match act {
            Some(a) if a.is_no_match() => match (&self.goal.fallback, self.fallback_used) {
                (Some((slot, value)), false) => {
                    self.fallback_used = true;
                    self.target.insert(slot.clone(), value.clone());
                    let text = format!("how about one in the {value} then ?");
                    Some(self.turn(text, vec![(slot.clone(), value.clone())], UserIntent::default()))
                }
                _ => bye(self, "okay , goodbye ."),
            },
            Some(a) if matches!(a.act, ActType::Clarify | ActType::Request) => {
                let slot = a.slots().next().unwrap_or_default().to_string();
                match self.target.get(&slot).cloned() {
                    Some(v) => {
                        let text = match slot.as_str() {
                            "area" => format!("in the {v} please"),
                            "type" => format!("a {v} please"),
                            "price" => format!("something {v} please"),
                            _ => format!("{v} please"),
                        };
                        Some(self.turn(text, vec![(slot, v)], UserIntent::default()))
                    }
                    None => Some(self.turn("i do not mind".into(), vec![], UserIntent::default())),
                }
            }
            _ if self.entity.is_some() => {
                let pending: Vec<String> = self
                    .goal
                    .requests
                    .iter()
                    .filter(|r| !self.received.contains_key(*r))
                    .cloned()
                    .collect();
                if pending.is_empty() {
                    self.satisfied = true;
                    return bye(self, "thank you , that is all . goodbye .");
                }
                let text = request_phrase(&pending);
                Some(self.turn(text, vec![], UserIntent { requests: pending, bye: false }))
            }
            _ => {
                // Nothing usable came back: restate everything told so far.
                let informs: Vec<(String, String)> = self.told.clone().into_iter().collect();
                let text = informs
                    .iter()
                    .map(|(s, v)| match (&self.goal.mention, s.as_str()) {
                        (Some(m), "name") => format!("i am looking for {m}"),
                        _ => inform_phrase(s, v),
                    })
                    .collect::<Vec<_>>()
                    .join(" and ");
                let text = if text.is_empty() { "can you help me ?".to_string() } else { text };
                Some(self.turn(text, informs, UserIntent::default()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub goal: Goal,
    pub turns: Vec<(UserTurn, BotTurn)>,
    /// The user ended the dialogue with every request answered.
    pub satisfied: bool,
    /// Entity the user settled on.
    pub entity: Option<String>,
}

impl DialogueOutcome {
    pub fn success_without_grounding(&self) -> bool {
        self.satisfied && self.entity.is_some()
    }

    /// Success that also holds against the database: the entity exists,
    /// meets the final goal constraints, and every value stated about it
    /// matches its record.
    pub fn success_with_grounding(&self, db: &Database) -> Result<bool> {
        let Some(entity) = self.entity.as_deref() else { return Ok(false) };
        if !self.satisfied {
            return Ok(false);
        }
        let Some(record) = db.find(&self.goal.domain, entity) else { return Ok(false) };
        let meets = self
            .goal
            .final_constraints(db)?
            .iter()
            .all(|(s, v)| record.get(s).is_some_and(|r| normalize(r) == normalize(v)));
        let consistent = self
            .turns
            .iter()
            .filter(|(_, b)| b.entity.as_deref() == Some(entity))
            .flat_map(|(_, b)| &b.filled)
            .all(|(s, v)| record.get(s).is_some_and(|r| normalize(r) == normalize(v)));
        Ok(meets && consistent)
    }
}

/// Runs one dialogue; the user speaks first and has [`MAX_TURNS`] turns.
pub fn simulate(bot: &mut dyn TaskBot, goal: &Goal, seed: u64) -> Result<DialogueOutcome> {
    bot.reset();
    let mut user = UserSimulator::new(goal, seed);
    let mut turns = Vec::new();
    let mut next = Some(user.opening());
    while let Some(u) = next.take() {
        if turns.len() == MAX_TURNS {
            break;
        }
        let b = bot.respond(&u)?;
        if !u.intent.bye {
            next = user.react(&b);
        }
        turns.push((u, b));
    }
    Ok(DialogueOutcome {
        goal: goal.clone(),
        turns,
        satisfied: user.satisfied,
        entity: user.entity.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    pub dialogues: usize,
    pub without_grounding: f64,
    pub with_grounding: f64,
    /// Mean of the two rates.
    pub average: f64,
}

pub fn success_rates(outcomes: &[DialogueOutcome], db: &Database) -> Result<SuccessRates> {
    let n = outcomes.len().max(1) as f64;
    let plain = outcomes.iter().filter(|o| o.success_without_grounding()).count() as f64 / n;
    let mut grounded = 0usize;
    for o in outcomes {
        grounded += usize::from(o.success_with_grounding(db)?);
    }
    let grounded = grounded as f64 / n;
    Ok(SuccessRates {
        dialogues: outcomes.len(),
        without_grounding: plain,
        with_grounding: grounded,
        average: (plain + grounded) / 2.0,
    })
}

/// Simulates every goal; dialogue `i` uses seed `seed + i`.
pub fn evaluate_bot(bot: &mut dyn TaskBot, goals: &[Goal], db: &Database, seed: u64) -> Result<(SuccessRates, Vec<DialogueOutcome>)> {
    let outcomes = goals
        .iter()
        .enumerate()
        .map(|(i, g)| simulate(bot, g, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((success_rates(&outcomes, db)?, outcomes))
}

//! Fixture database and constraint queries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slot layout of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainSchema {
    pub name: &'static str,
    /// Slots a user can constrain; `name` is always among them.
    pub informable: &'static [&'static str],
    /// Slots a user can ask for once an entity is on the table.
    pub requestable: &'static [&'static str],
    /// Unfilled slots worth a clarifying question.
    pub discriminating: &'static [&'static str],
}

pub const SCHEMAS: [DomainSchema; 2] = [
    DomainSchema {
        name: "hotel",
        informable: &["name", "type", "area", "price"],
        requestable: &["phone", "address"],
        discriminating: &["type"],
    },
    DomainSchema {
        name: "restaurant",
        informable: &["name", "food", "area", "price"],
        requestable: &["phone", "address"],
        discriminating: &[],
    },
];

pub fn schema(domain: &str) -> Result<&'static DomainSchema> {
    SCHEMAS
        .iter()
        .find(|s| s.name == domain)
        .ok_or_else(|| Error::Data(format!("unknown domain `{domain}`")))
}

/// Lowercase, hyphens as spaces, articles dropped, single spaces.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .replace('-', " ")
        .split_whitespace()
        .filter(|w| !matches!(*w, "the" | "a" | "an"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub type DbRecord = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Database {
    tables: BTreeMap<String, Vec<DbRecord>>,
}

const FIXTURE: &str = include_str!("../../data/db.json");

impl Database {
    /// The database shipped with the crate.
    pub fn fixture() -> Self {
        Self::from_json(FIXTURE).expect("fixture database is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Parses and checks every record against its domain schema. Names must
    /// be unique per domain after normalization.
    pub fn from_json(text: &str) -> Result<Self> {
        let db: Database = serde_json::from_str(text)?;
        for (domain, rows) in &db.tables {
            let s = schema(domain)?;
            let mut seen = std::collections::BTreeSet::new();
            for r in rows {
                for slot in s.informable.iter().chain(s.requestable) {
                    if !r.contains_key(*slot) {
                        return Err(Error::Data(format!("{domain} record lacks `{slot}`")));
                    }
                }
                if let Some(extra) = r
                    .keys()
                    .find(|k| !s.informable.contains(&k.as_str()) && !s.requestable.contains(&k.as_str()))
                {
                    return Err(Error::Data(format!("{domain} record has unknown slot `{extra}`")));
                }
                if !seen.insert(normalize(&r["name"])) {
                    return Err(Error::Data(format!("duplicate {domain} name `{}`", r["name"])));
                }
            }
        }
        Ok(db)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn table(&self, domain: &str) -> Result<&[DbRecord]> {
        schema(domain)?;
        Ok(self.tables.get(domain).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Records of `domain` whose slots equal every constraint after
    /// normalization, in table order.
    pub fn query(&self, domain: &str, constraints: &BTreeMap<String, String>) -> Result<Vec<&DbRecord>> {
        let s = schema(domain)?;
        if let Some(bad) = constraints.keys().find(|k| !s.informable.contains(&k.as_str())) {
            return Err(Error::Data(format!("`{bad}` is not a {domain} constraint")));
        }
        let wanted: Vec<(&String, String)> = constraints.iter().map(|(k, v)| (k, normalize(v))).collect();
        Ok(self
            .table(domain)?
            .iter()
            .filter(|r| wanted.iter().all(|(k, v)| normalize(&r[k.as_str()]) == *v))
            .collect())
    }

    /// The record named `name` (normalized comparison).
    pub fn find(&self, domain: &str, name: &str) -> Option<&DbRecord> {
        let n = normalize(name);
        self.tables.get(domain)?.iter().find(|r| normalize(&r["name"]) == n)
    }

    /// Every distinct value of `slot` in `domain`, sorted.
    pub fn values(&self, domain: &str, slot: &str) -> Vec<String> {
        let set: std::collections::BTreeSet<String> = self
            .tables
            .get(domain)
            .into_iter()
            .flatten()
            .filter_map(|r| r.get(slot).cloned())
            .collect();
        set.into_iter().collect()
    }

    /// Every entity name of every domain.
    pub fn names(&self) -> Vec<(&str, &str)> {
        self.tables
            .iter()
            .flat_map(|(d, rows)| rows.iter().map(move |r| (d.as_str(), r["name"].as_str())))
            .collect()
    }
}

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (knowledge, context, response) training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub context: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief_state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_action: Option<String>,
    /// Ground-truth response cluster, set only by the one-to-many generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

impl DialogueSample {
    pub fn new(context: Vec<String>, response: impl Into<String>) -> Self {
        Self {
            context,
            response: response.into(),
            knowledge: Vec::new(),
            belief_state: None,
            system_action: None,
            cluster_id: None,
        }
    }

    pub fn with_knowledge(mut self, knowledge: Vec<String>) -> Self {
        self.knowledge = knowledge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.response.split_whitespace().next().is_none() {
            return Err(Error::Data("empty response".into()));
        }
        Ok(())
    }
}

/// Writes one JSON record per line.
pub fn save_corpus(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: DialogueSample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        s.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

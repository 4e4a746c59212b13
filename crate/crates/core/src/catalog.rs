//! Pass pipelines and fixed action spaces.
//!
//! The canonical data lives in `data/`: the 90-pass `Oz` schedule, the 15
//! hand-grouped sub-sequences, and the 34 graph-derived sub-sequences. All
//! three are embedded at build time and parsed through the same text format:
//! whitespace-separated `-passname` tokens with `#` line comments.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const OZ_PIPELINE_TEXT: &str = include_str!("../data/oz_pipeline.txt");
const MANUAL_SUBSEQUENCES_TEXT: &str = include_str!("../data/manual_subsequences.txt");
const ODG_SUBSEQUENCES_TEXT: &str = include_str!("../data/odg_subsequences.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("pipeline contains no passes")]
    EmptyPipeline,
    #[error("bad pass token {0:?}: expected [a-z0-9-]+ with an optional leading dash")]
    BadToken(String),
    #[error("action-space file contains no sub-sequences")]
    EmptyActionSpace,
    #[error("sub-sequence {0} is empty")]
    EmptySubsequence(usize),
}

/// Interned pass name, stored without the leading dash.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PassId(String);

impl PassId {
    /// Parses a token, stripping one leading dash if present.
    pub fn parse(token: &str) -> Result<Self, CatalogError> {
        let name = token.strip_prefix('-').unwrap_or(token);
        if name.is_empty()
            || !name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        {
            return Err(CatalogError::BadToken(token.to_string()));
        }
        Ok(PassId(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The dash-prefixed form used on optimizer command lines.
    pub fn to_flag(&self) -> String {
        format!("-{}", self.0)
    }
}

impl fmt::Display for PassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered pass list; repetitions allowed and meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassPipeline {
    label: String,
    passes: Vec<PassId>,
}

impl PassPipeline {
    /// Parses the pipeline text format: whitespace-separated `-pass` tokens,
    /// `#` starts a comment that runs to end of line.
    pub fn parse(source: &str, label: &str) -> Result<Self, CatalogError> {
        let mut passes = Vec::new();
        for line in source.lines() {
            let line = line.split('#').next().unwrap_or("");
            for token in line.split_whitespace() {
                passes.push(PassId::parse(token)?);
            }
        }
        if passes.is_empty() {
            return Err(CatalogError::EmptyPipeline);
        }
        Ok(PassPipeline {
            label: label.to_string(),
            passes,
        })
    }

    pub fn from_passes(passes: Vec<PassId>, label: &str) -> Result<Self, CatalogError> {
        if passes.is_empty() {
            return Err(CatalogError::EmptyPipeline);
        }
        Ok(PassPipeline {
            label: label.to_string(),
            passes,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn passes(&self) -> &[PassId] {
        &self.passes
    }

    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn distinct_count(&self) -> usize {
        self.passes.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn contains(&self, pass: &PassId) -> bool {
        self.passes.contains(pass)
    }

    /// Re-serializes to the command-line token form (round-trips `parse`).
    pub fn to_flag_string(&self) -> String {
        self.passes
            .iter()
            .map(PassId::to_flag)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One ordered pass group used as a single RL action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSequence {
    pub id: u32,
    pub passes: Vec<PassId>,
}

impl SubSequence {
    pub fn new(id: u32, passes: Vec<PassId>) -> Self {
        SubSequence { id, passes }
    }

    pub fn to_flag_string(&self) -> String {
        self.passes
            .iter()
            .map(PassId::to_flag)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// True iff `s` is non-empty and every pass of `s` occurs in `catalog`.
pub fn validate_subsequence(s: &SubSequence, catalog: &PassPipeline) -> bool {
    !s.passes.is_empty() && s.passes.iter().all(|p| catalog.contains(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpaceKind {
    Manual,
    Odg,
    Custom,
}

impl fmt::Display for ActionSpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionSpaceKind::Manual => f.write_str("manual"),
            ActionSpaceKind::Odg => f.write_str("odg"),
            ActionSpaceKind::Custom => f.write_str("custom"),
        }
    }
}

/// Dense, ordered set of sub-sequences; the agent's action ids index into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub kind: ActionSpaceKind,
    subsequences: Vec<SubSequence>,
}

impl ActionSpace {
    pub fn new(
        kind: ActionSpaceKind,
        passes_per_action: Vec<Vec<PassId>>,
    ) -> Result<Self, CatalogError> {
        if passes_per_action.is_empty() {
            return Err(CatalogError::EmptyActionSpace);
        }
        let mut subsequences = Vec::with_capacity(passes_per_action.len());
        for (id, passes) in passes_per_action.into_iter().enumerate() {
            if passes.is_empty() {
                return Err(CatalogError::EmptySubsequence(id));
            }
            subsequences.push(SubSequence::new(id as u32, passes));
        }
        Ok(ActionSpace { kind, subsequences })
    }

    /// Parses an action-space file: one sub-sequence per line in the pipeline
    /// token format. Comment and blank lines are skipped; ids are assigned by
    /// the order of the remaining lines, starting at 0.
    pub fn parse(kind: ActionSpaceKind, source: &str) -> Result<Self, CatalogError> {
        let mut rows = Vec::new();
        for line in source.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let passes = line
                .split_whitespace()
                .map(PassId::parse)
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(passes);
        }
        ActionSpace::new(kind, rows)
    }

    pub fn len(&self) -> usize {
        self.subsequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsequences.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&SubSequence> {
        self.subsequences.get(id as usize)
    }

    pub fn subsequences(&self) -> &[SubSequence] {
        &self.subsequences
    }

    /// One sub-sequence per line, in the file format `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.subsequences {
            out.push_str(&s.to_flag_string());
            out.push('\n');
        }
        out
    }

    /// Content fingerprint over kind and pass lists; checkpoints embed it so
    /// a network is never evaluated against a different action space.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.to_string().as_bytes());
        for s in &self.subsequences {
            hasher.update(b"\n");
            hasher.update(s.to_flag_string().as_bytes());
        }
        hasher.finalize().into()
    }
}

/// The bundled 90-pass `Oz` schedule.
pub fn oz_pipeline() -> &'static PassPipeline {
    static OZ: OnceLock<PassPipeline> = OnceLock::new();
    OZ.get_or_init(|| PassPipeline::parse(OZ_PIPELINE_TEXT, "oz").expect("bundled Oz pipeline"))
}

/// The 15 hand-grouped sub-sequences, in table order.
pub fn manual_action_space() -> &'static ActionSpace {
    static MANUAL: OnceLock<ActionSpace> = OnceLock::new();
    MANUAL.get_or_init(|| {
        ActionSpace::parse(ActionSpaceKind::Manual, MANUAL_SUBSEQUENCES_TEXT)
            .expect("bundled manual action space")
    })
}

/// The 34 graph-derived sub-sequences as shipped. The `odg` module's walk
/// enumeration is required to reproduce this set from `oz_pipeline()`.
pub fn odg_action_space() -> &'static ActionSpace {
    static ODG: OnceLock<ActionSpace> = OnceLock::new();
    ODG.get_or_init(|| {
        ActionSpace::parse(ActionSpaceKind::Odg, ODG_SUBSEQUENCES_TEXT)
            .expect("bundled odg action space")
    })
}

/// Generic pipeline-text loader (see `PassPipeline::parse`); kept as a free
/// function because callers usually have a file, not a pipeline, in hand.
pub fn load_pipeline(source: &str, label: &str) -> Result<PassPipeline, CatalogError> {
    PassPipeline::parse(source, label)
}

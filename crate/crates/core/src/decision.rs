use serde::{Deserialize, Serialize};

/// Final open-set outcome for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Known(usize),
    Unknown,
}

impl Outcome {
    pub fn is_unknown(self) -> bool {
        matches!(self, Outcome::Unknown)
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Known(c) => write!(f, "{c}"),
            Outcome::Unknown => f.write_str("unknown"),
        }
    }
}

/// Decision plus a score where larger means "more likely unknown".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetDecision {
    pub outcome: Outcome,
    pub unknownness: f64,
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ClanError, Result};

/// Input domain of a tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Time,
    Frequency,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Time, Domain::Frequency];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Time => "time",
            Domain::Frequency => "frequency",
        }
    }

    /// Small integer tag mixed into random-stream keys.
    pub fn tag(self) -> u64 {
        match self {
            Domain::Time => 0,
            Domain::Frequency => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = ClanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Domain::Time),
            "frequency" => Ok(Domain::Frequency),
            _ => Err(ClanError::Config(format!("unknown domain `{s}`"))),
        }
    }
}

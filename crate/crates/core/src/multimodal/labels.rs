use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed label vocabularies of the classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSet {
    /// CAD, CHF, MI, HOTN.
    Cvd4,
    /// Normal, Diabetes.
    Binary,
}

impl LabelSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            LabelSet::Cvd4 => &["CAD", "CHF", "MI", "HOTN"],
            LabelSet::Binary => &["Normal", "Diabetes"],
        }
    }

    pub fn len(self) -> usize {
        self.names().len()
    }

    pub fn index_of(self, label: &str) -> Result<usize> {
        self.names()
            .iter()
            .position(|&n| n == label)
            .ok_or_else(|| Error::Input(format!("label `{label}` is not in the {self} label set {:?}", self.names())))
    }

    pub fn name(self, index: usize) -> &'static str {
        self.names()[index]
    }

    pub fn owned_names(self) -> Vec<String> {
        self.names().iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSet::Cvd4 => "cvd4",
            LabelSet::Binary => "binary",
        })
    }
}

impl FromStr for LabelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvd4" => Ok(LabelSet::Cvd4),
            "binary" => Ok(LabelSet::Binary),
            _ => Err(Error::Config(format!("unknown label set `{s}` (expected cvd4 or binary)"))),
        }
    }
}

//! Self-checks runnable from the command line: numerical oracles, gradient
//! checks and structural invariants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod invariants;
pub mod oracles;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        if self.detail.is_empty() {
            write!(f, "{verdict} {}", self.name)
        } else {
            write!(f, "{verdict} {}: {}", self.name, self.detail)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Grads,
    Invariants,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "grads" => Ok(Suite::Grads),
            "invariants" => Ok(Suite::Invariants),
            other => Err(Error::invalid("suite", format!("unknown suite {other:?}"))),
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckRecord>> {
    match suite {
        Suite::Oracles => oracles::run(),
        Suite::Grads => gradcheck::run(),
        Suite::Invariants => invariants::run(),
    }
}

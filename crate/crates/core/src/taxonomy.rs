//! Probe domains and their subtasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Math,
    Nonmath,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Math, Domain::Nonmath];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Math => "math",
            Domain::Nonmath => "nonmath",
        }
    }

    pub fn subtasks(self) -> &'static [Subtask] {
        match self {
            Domain::Math => &Subtask::ALL[..5],
            Domain::Nonmath => &Subtask::ALL[5..],
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "math" => Ok(Domain::Math),
            "nonmath" => Ok(Domain::Nonmath),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

/// The nine probing subtasks, in canonical order (five math, then four
/// non-math). Feature matrices for the baselines stack rows in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtask {
    #[serde(rename = "Math-CoT")]
    MathCot,
    #[serde(rename = "Math-Direct")]
    MathDirect,
    #[serde(rename = "Math-Rephrase")]
    MathRephrase,
    #[serde(rename = "Math-Formalize")]
    MathFormalize,
    #[serde(rename = "Math-Verify")]
    MathVerify,
    Captioning,
    EntityListing,
    CountingVQA,
    Grounding,
}

impl Subtask {
    pub const ALL: [Subtask; 9] = [
        Subtask::MathCot,
        Subtask::MathDirect,
        Subtask::MathRephrase,
        Subtask::MathFormalize,
        Subtask::MathVerify,
        Subtask::Captioning,
        Subtask::EntityListing,
        Subtask::CountingVQA,
        Subtask::Grounding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtask::MathCot => "Math-CoT",
            Subtask::MathDirect => "Math-Direct",
            Subtask::MathRephrase => "Math-Rephrase",
            Subtask::MathFormalize => "Math-Formalize",
            Subtask::MathVerify => "Math-Verify",
            Subtask::Captioning => "Captioning",
            Subtask::EntityListing => "EntityListing",
            Subtask::CountingVQA => "CountingVQA",
            Subtask::Grounding => "Grounding",
        }
    }

    pub fn domain(self) -> Domain {
        if (self as usize) < 5 {
            Domain::Math
        } else {
            Domain::Nonmath
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::schema(None, "subtask", format!("unknown subtask `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_names() {
        let math: Vec<_> = Domain::Math.subtasks().iter().map(|s| s.as_str()).collect();
        assert_eq!(
            math,
            [
                "Math-CoT",
                "Math-Direct",
                "Math-Rephrase",
                "Math-Formalize",
                "Math-Verify"
            ]
        );
        let nonmath: Vec<_> = Domain::Nonmath.subtasks().iter().map(|s| s.as_str()).collect();
        assert_eq!(nonmath, ["Captioning", "EntityListing", "CountingVQA", "Grounding"]);
        for s in Subtask::ALL {
            assert_eq!(s.as_str().parse::<Subtask>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
            assert!(s.domain().subtasks().contains(&s));
        }
        assert!(matches!("vision".parse::<Domain>(), Err(Error::UnknownDomain(_))));
    }
}

//! Machine-readable certificates: verdicts, per-node traces, and witnesses.
//!
//! A certificate records what was proven (or not) and how: the verdict, the
//! method that produced it, an ordered trace of per-node conclusions
//! (intervals for the Hessian method, curvature labels for the rule engine),
//! the rendered Hessian when one was computed, and an optional non-convexity
//! witness found by sampling. The JSON form is stable and used by the CLI's
//! `--json` mode and golden tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Convex,
    Concave,
    Affine,
    Unknown,
    NonConvexWitness,
}

impl Verdict {
    /// The CLI exit code documented for this verdict.
    pub fn exit_code(self) -> i32 {
        match self {
            // Affine functions are convex; exit code follows the stronger
            // convex claim.
            Verdict::Convex | Verdict::Affine => 0,
            Verdict::Concave => 1,
            Verdict::Unknown => 2,
            Verdict::NonConvexWitness => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Convex => "convex",
            Verdict::Concave => "concave",
            Verdict::Affine => "affine",
            Verdict::Unknown => "unknown",
            Verdict::NonConvexWitness => "non-convex-witness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hessian,
    Dcp,
}

/// One rule firing: the node it concluded something about, the rendered
/// subexpression, the conclusion (an interval or a curvature label), the rule
/// or template that fired, and any template bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub node: u32,
    pub expr: String,
    pub info: String,
    pub rule: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bindings: BTreeMap<String, String>,
}

/// A feasible point with a negative Hessian eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub point: BTreeMap<String, serde_json::Value>,
    pub eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub method: Method,
    pub trace: Vec<TraceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessReport>,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

//! Convexity certification for differentiable functions written in a small
//! vectorized expression language.
//!
//! The pipeline: parse ([`parser`]), shape-check and hash-cons into a DAG
//! ([`dag`]), differentiate twice symbolically ([`calculus`]), simplify
//! ([`simplify`]), then try to prove the Hessian positive semidefinite by
//! propagating sign intervals and matching structured psd templates
//! ([`positivity`], [`templates`]). A composition-rule engine ([`dcp`]) and a
//! sampling-based numeric falsifier ([`oracle`]) complement the symbolic
//! route.

pub mod ast;
pub mod calculus;
pub mod certificate;
pub mod cli;
pub mod dag;
pub mod dcp;
pub mod interval;
pub mod oracle;
pub mod parser;
pub mod positivity;
pub mod shape;
pub mod simplify;
pub mod templates;
pub mod token;

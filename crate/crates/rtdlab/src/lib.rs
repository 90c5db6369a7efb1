//! Desk-scale laboratory for replaced-token-detection pre-training.
//!
//! A small generator proposes replacements for masked-out tokens and a
//! discriminator learns to tell, at every position, whether the token it sees
//! is the original or a sample. The crate implements the whole pipeline in
//! plain `f64` on the CPU:
//!
//! - [`corpus`]: synthetic Markov corpora, vocabularies, batching
//! - [`corruption`]: masking, generator/unigram replacement, BERT-style noise
//! - [`encoder`]: a hand-differentiated transformer encoder pair with tied
//!   token embeddings
//! - [`objectives`]: the six pre-training losses and their exact gradients
//! - [`trainer`]: Adam with warmup/decay, joint / two-stage / adversarial
//!   training loops, checkpointing
//! - [`evaluation`]: masked-LM accuracy, detection metrics, the closed-form
//!   optimal discriminator and its inversion, a two-regime probe task
//! - [`flopcount`]: an analytic FLOPs model so variants can be compared at
//!   matched compute
//! - [`cli`]: flat key=value run configs and the four subcommands
//!
//! Everything is deterministic. Randomness comes from counter-based streams
//! keyed by `(seed, step, purpose)` ([`rng`]), so a run can be reproduced
//! byte-for-byte, resumed from a checkpoint, or replayed step by step.

pub mod cli;
pub mod corpus;
pub mod corruption;
pub mod encoder;
pub mod evaluation;
pub mod flopcount;
pub mod objectives;
pub mod rng;
pub mod trainer;

use std::fmt;

/// Crate-wide error type. Variants map to exit codes in the CLI: `Config`
/// exits 2, everything else exits 1.
#[derive(Debug)]
pub enum Error {
    /// Unknown key, unparsable value, or an invalid setting combination.
    Config(String),
    /// Empty corpus, corpus shorter than one window, bad synthetic spec.
    Corpus(String),
    /// Dimension mismatch or out-of-range index.
    Shape(String),
    /// Probabilities that do not normalize, or a zero-mass stream.
    Distribution(String),
    /// NaN gradient, undefined optimum, or another numeric degeneracy.
    Numeric(String),
    /// Unreadable, truncated, or version-mismatched checkpoint.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Corpus(m) => write!(f, "corpus error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Distribution(m) => write!(f, "distribution error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

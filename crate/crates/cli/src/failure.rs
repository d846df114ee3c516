//! Error classes and their process exit codes.

use std::fmt;
use std::process::ExitCode;

use valdec_core::config::ConfigError;
use valdec_core::evaluator::EvalError;
use valdec_core::protocol::ProtocolError;
use valdec_core::{EngineError, EnvError, PpoError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    /// Invalid configuration, env spec, prompt or flag combination.
    Config,
    /// Reading or writing files.
    Io,
    /// Remote evaluator unreachable, timed out or misbehaving.
    Remote,
    /// PPO training failed or diverged.
    Training,
    /// Any other decoding failure.
    Decode,
}

impl Class {
    pub fn exit_code(self) -> ExitCode {
        ExitCode::from(match self {
            Class::Config => 3,
            Class::Io => 4,
            Class::Remote => 5,
            Class::Training => 6,
            Class::Decode => 7,
        })
    }
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T> = Result<T, Failure>;

pub fn fail(class: Class, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        class,
        error: error.into(),
    }
}

pub trait Classify<T> {
    fn class(self, class: Class) -> Outcome<T>;
    fn class_with(self, class: Class, context: impl FnOnce() -> String) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, class: Class) -> Outcome<T> {
        self.map_err(|e| fail(class, e))
    }

    fn class_with(self, class: Class, context: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| fail(class, e.into().context(context())))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let class = if matches!(e, ConfigError::Io { .. }) { Class::Io } else { Class::Config };
        fail(class, e)
    }
}

impl From<EnvError> for Failure {
    fn from(e: EnvError) -> Self {
        fail(Class::Config, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Protocol(_) => fail(Class::Remote, e),
            EvalError::Env(_) | EvalError::VocabularyMismatch { .. } => fail(Class::Config, e),
            EvalError::NoTerminalReward => fail(Class::Decode, e),
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        fail(Class::Remote, e)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Eval(inner) => inner.into(),
            EngineError::Config(_) | EngineError::VocabularyMismatch { .. } => fail(Class::Config, e),
            _ => fail(Class::Decode, e),
        }
    }
}

impl From<PpoError> for Failure {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Config(_) => fail(Class::Config, e),
            PpoError::FormatVersion(_) | PpoError::Artifact(_) => fail(Class::Config, e),
            _ => fail(Class::Training, e),
        }
    }
}

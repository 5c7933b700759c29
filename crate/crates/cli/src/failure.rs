//! Command failures and their exit codes.

use std::process::ExitCode;

use serde::Serialize;

/// 1 for domain errors, 2 for usage errors.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub usage: bool,
}

impl Failure {
    pub fn domain(err: shape_evade::Error) -> Self {
        Failure {
            kind: err.kind().to_string(),
            message: err.to_string(),
            usage: false,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: "usage".into(),
            message: message.into(),
            usage: true,
        }
    }

    pub fn other(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            kind: kind.into(),
            message: message.into(),
            usage: false,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(if self.usage { 2 } else { 1 })
    }

    /// Single-line `{"error": {"kind": .., "message": ..}}`.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body {
                kind: &self.kind,
                message: &self.message,
            },
        })
        .expect("error body serialises")
    }
}

impl From<shape_evade::Error> for Failure {
    fn from(err: shape_evade::Error) -> Self {
        Failure::domain(err)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(err: serde_json::Error) -> Self {
        Failure::domain(err.into())
    }
}

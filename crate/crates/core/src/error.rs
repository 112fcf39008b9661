//! One error type for every module, with a machine-readable JSON form.

use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Malformed tree spec, matrix, or other input.
    Schema,
    Io,
    /// Ultrametric hypothesis H1..H4 failed or undecided.
    Hypothesis,
    /// A series tail could not be bounded.
    UncertifiedTail,
    /// A runtime certificate (residual, symmetry, statistic) failed.
    Certification,
    /// Caller violated a precondition.
    Domain,
    /// Chain is recurrent, so boundary objects do not exist.
    Recurrent,
    /// A cylinder with zero exit mass was used where a positive mass is needed.
    ZeroMass,
    /// Node or level outside the realized window.
    Unrealized,
    /// Singular system or overflow.
    Numeric,
}

impl ErrorKind {
    /// Process exit code used by the CLI.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Schema => 2,
            ErrorKind::Io => 3,
            ErrorKind::Hypothesis => 4,
            ErrorKind::UncertifiedTail => 5,
            ErrorKind::Certification => 6,
            ErrorKind::Domain => 7,
            ErrorKind::Recurrent => 8,
            ErrorKind::ZeroMass => 9,
            ErrorKind::Unrealized => 10,
            ErrorKind::Numeric => 11,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("[{module}] {kind:?}: {message}")]
pub struct Error {
    pub kind: ErrorKind,
    pub module: &'static str,
    pub message: String,
    pub context: Value,
}

impl Error {
    pub fn new(kind: ErrorKind, module: &'static str, message: impl Into<String>) -> Self {
        Error {
            kind,
            module,
            message: message.into(),
            context: Value::Null,
        }
    }

    pub fn with_context(mut self, context: Value) -> Self {
        self.context = context;
        self
    }

    pub fn code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// `{code, module, message, context}`
    pub fn to_json(&self) -> Value {
        json!({
            "code": self.code(),
            "kind": self.kind,
            "module": self.module,
            "message": self.message,
            "context": self.context,
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn schema(module: &'static str, msg: impl Into<String>) -> Error {
    Error::new(ErrorKind::Schema, module, msg)
}

pub(crate) fn domain(module: &'static str, msg: impl Into<String>) -> Error {
    Error::new(ErrorKind::Domain, module, msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        use ErrorKind::*;
        let all = [
            Schema,
            Io,
            Hypothesis,
            UncertifiedTail,
            Certification,
            Domain,
            Recurrent,
            ZeroMass,
            Unrealized,
            Numeric,
        ];
        let mut codes: Vec<i32> = all.iter().map(|k| k.exit_code()).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(codes.iter().all(|&c| c > 1));
    }

    #[test]
    fn json_shape() {
        let e = schema("tree_core", "bad").with_context(json!({"path": "0.1"}));
        let v = e.to_json();
        assert_eq!(v["code"], 2);
        assert_eq!(v["module"], "tree_core");
        assert_eq!(v["context"]["path"], "0.1");
    }
}

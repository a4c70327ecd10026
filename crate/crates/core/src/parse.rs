//! Error type shared by the text-format readers.

use thiserror::Error;

/// A malformed record in one of the text inputs. `line` is 1-based; 0 means
/// the error is not tied to a particular line.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

pub(crate) fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, ParseError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| ParseError::new(line, format!("{what}: expected a number, got {tok:?}")))?;
    if !v.is_finite() {
        return Err(ParseError::new(line, format!("{what}: non-finite value")));
    }
    Ok(v)
}

pub(crate) fn parse_usize(tok: &str, line: usize, what: &str) -> Result<usize, ParseError> {
    tok.parse()
        .map_err(|_| ParseError::new(line, format!("{what}: expected an integer, got {tok:?}")))
}

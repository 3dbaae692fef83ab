use std::fmt;

use afft_core::{Error, ErrorKind};

/// A command failure with its exit status class.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

/// `error kind=<usage|data|numeric> code=<n> msg="<escaped message>"`
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={} code={} msg={:?}", self.kind_name(), self.code(), self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_line_with_escaped_message() {
        let f = Failure::data("bad\nfile \"x\"");
        let line = f.to_string();
        assert!(!line.contains('\n'));
        assert_eq!(line, r#"error kind=data code=2 msg="bad\nfile \"x\"""#);
        let n: Failure = Error::NonFiniteLoss {
            epoch: 0,
            param: "w".into(),
        }
        .into();
        assert_eq!(n.code(), 3);
    }
}

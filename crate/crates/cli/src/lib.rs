//! Command-line driver: configuration, commands and reports.

pub mod commands;
pub mod config;
pub mod report;

use performer_core::Error;

/// Process exit status for an error: 2 for usage and input problems, 3 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Input(_) | Error::Parameter(_) => 2,
        Error::Numeric { .. } | Error::State(_) | Error::Dimension { .. } => 3,
    }
}

/// Single-line `error kind=<kind> message="<text>"` form of `err`.
pub fn error_line(err: &Error) -> String {
    let msg = err.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={} message=\"{msg}\"", err.kind())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runtime_failures_exit_3() {
        let numeric = Error::Numeric { op: "train", detail: "loss NaN".into() };
        assert_eq!(exit_code(&numeric), 3);
        assert_eq!(exit_code(&Error::State("x".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Parameter("x".into())), 2);
    }

    #[test]
    fn error_line_is_single_quoted_line() {
        let e = Error::Input("bad \"value\"\nnext".into());
        assert_eq!(error_line(&e), r#"error kind=input message="input error: bad \"value\" next""#);
    }
}

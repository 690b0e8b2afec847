use std::fmt;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const CHECK: u8 = 3;

/// Why a command failed; each kind has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    /// A check ran and failed; the report still goes to stdout.
    Check { message: String, report: String },
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => USAGE,
            Failure::Data(_) => DATA,
            Failure::Check { .. } => CHECK,
        }
    }

    pub fn stdout(&self) -> &str {
        match self {
            Failure::Check { report, .. } => report,
            _ => "",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Data(m) => f.write_str(m),
            Failure::Check { message, .. } => write!(f, "check failed: {message}"),
        }
    }
}

impl From<satmap_core::Error> for Failure {
    fn from(e: satmap_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<satmap_net::Error> for Failure {
    fn from(e: satmap_net::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type Outcome = Result<String, Failure>;

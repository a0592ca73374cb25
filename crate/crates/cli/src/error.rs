use std::fmt;
use std::process::ExitCode;

/// Coarse failure class; each maps to its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Bad flags or config keys.
    Usage,
    /// Missing, corrupt or mismatched datasets and checkpoints.
    Data,
    /// Connection, protocol or peer failures.
    Network,
    /// Non-finite values or failed optimization.
    Training,
    /// The gradient audit found a mismatch.
    Audit,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Usage => 2,
            Category::Data => 3,
            Category::Network => 4,
            Category::Training => 5,
            Category::Audit => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Usage => "usage error",
            Category::Data => "data error",
            Category::Network => "network error",
            Category::Training => "training error",
            Category::Audit => "audit failure",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:#}", self.category.label(), self.error)
    }
}

impl From<Failure> for ExitCode {
    fn from(f: Failure) -> Self {
        ExitCode::from(f.category.exit_code())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub trait Categorize<T> {
    fn category(self, c: Category) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn category(self, c: Category) -> CliResult<T> {
        self.map_err(|e| Failure {
            category: c,
            error: e.into(),
        })
    }
}

pub fn fail<T>(c: Category, msg: impl fmt::Display) -> CliResult<T> {
    Err(Failure {
        category: c,
        error: anyhow::anyhow!("{msg}"),
    })
}

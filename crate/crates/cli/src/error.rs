use std::fmt;
use std::path::Path;

use policy_align::analytics::AnalyticsError;
use policy_align::config::ConfigError;
use policy_align::corpus::CorpusError;
use policy_align::loss::export::ExportError;
use policy_align::loss::gradcheck::GradCheckError;
use policy_align::policy::PolicyError;
use policy_align::rewriter::RewriteError;
use policy_align::verifier::CorpusFileError;

/// Exit status for a check that ran and came out negative (wrong answer,
/// failed gradient check).
pub const EXIT_NEGATIVE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Capability,
    VerifierCorpus,
    Endpoint,
    Data,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Config => 3,
            Category::Io => 4,
            Category::Capability => 5,
            Category::VerifierCorpus => 6,
            Category::Endpoint => 7,
            Category::Data => 8,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Config => "config error",
            Category::Io => "I/O error",
            Category::Capability => "endpoint capability error",
            Category::VerifierCorpus => "verifier corpus error",
            Category::Endpoint => "endpoint error",
            Category::Data => "data error",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Category::Io, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.label(), self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(Category::Config, e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let category = match e {
            CorpusError::Io { .. } => Category::Io,
            _ => Category::Data,
        };
        Self::new(category, e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        let category = match e {
            PolicyError::Capability(_) => Category::Capability,
            PolicyError::InvalidConfig(_) => Category::Config,
            _ => Category::Endpoint,
        };
        Self::new(category, e.to_string())
    }
}

impl From<RewriteError> for CliError {
    fn from(e: RewriteError) -> Self {
        match e {
            RewriteError::Policy(p) => p.into(),
            RewriteError::Template(_) => Self::new(Category::Config, e.to_string()),
            RewriteError::Checkpoint(_) | RewriteError::Input(_) => Self::new(Category::Data, e.to_string()),
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Capability(p) => p.into(),
            AnalyticsError::Scoring { .. } => Self::new(Category::Endpoint, e.to_string()),
            AnalyticsError::Io { .. } => Self::new(Category::Io, e.to_string()),
            _ => Self::new(Category::Data, e.to_string()),
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        let category = match e {
            ExportError::Io { .. } => Category::Io,
            _ => Category::Data,
        };
        Self::new(category, e.to_string())
    }
}

impl From<GradCheckError> for CliError {
    fn from(e: GradCheckError) -> Self {
        let category = match e {
            GradCheckError::Epsilon(_) => Category::Config,
            _ => Category::Data,
        };
        Self::new(category, e.to_string())
    }
}

impl From<CorpusFileError> for CliError {
    fn from(e: CorpusFileError) -> Self {
        let category = match e {
            CorpusFileError::Io { .. } => Category::Io,
            CorpusFileError::Malformed { .. } => Category::VerifierCorpus,
        };
        Self::new(category, e.to_string())
    }
}

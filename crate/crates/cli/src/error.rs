use std::fmt;

/// Failure of a CLI command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration; message starts with the field path.
    Config(String),
    Diverged(String),
    EmptyCalibration(String),
    UnknownName(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::EmptyCalibration(_) => 4,
            CliError::UnknownName(_) => 5,
        }
    }

    pub fn config(field: &str, msg: impl fmt::Display) -> Self {
        CliError::Config(format!("{field}: {msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error at {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
            CliError::EmptyCalibration(m) => write!(f, "empty calibration split: {m}"),
            CliError::UnknownName(m) | CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<kgcp::Error> for CliError {
    fn from(e: kgcp::Error) -> Self {
        match e {
            kgcp::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Up to three dictionary names closest to `name` by edit distance.
pub fn nearest<'a>(name: &str, candidates: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut scored: Vec<(usize, &str)> = candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(name, c), c))
        .collect();
    scored.sort();
    scored.into_iter().take(3).map(|(_, c)| c).collect()
}

pub fn unknown(what: &str, name: &str, candidates: Vec<&str>) -> CliError {
    let near = nearest(name, candidates);
    CliError::UnknownName(format!("unknown {what} {name:?}; nearest matches: {}", near.join(", ")))
}

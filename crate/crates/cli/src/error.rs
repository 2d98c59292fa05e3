use qupel::QupelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) | CliError::Failed(_) => 1,
        }
    }
}

impl From<QupelError> for CliError {
    fn from(e: QupelError) -> Self {
        match e {
            QupelError::Diverged { .. } | QupelError::NonFinite { .. } => CliError::Diverged(e.to_string()),
            QupelError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(QupelError::config("eta1", "must be positive")).exit_code(), 2);
        let d = QupelError::Diverged { step: 3, detail: "total 1e9".into() };
        assert_eq!(CliError::from(d).exit_code(), 3);
        assert_eq!(CliError::Failed("gradcheck".into()).exit_code(), 1);
    }
}

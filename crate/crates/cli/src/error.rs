use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("config error in {file}: {message}")]
    ConfigIn { file: String, message: String },

    #[error(transparent)]
    Core(#[from] eqst_core::CoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("toml parse error in {file}: {message}")]
    Toml { file: String, message: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

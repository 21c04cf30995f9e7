use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range user input (molecule, table, manifest).
    #[error("input error: {0}")]
    Input(String),

    /// A parse failure tied to a specific line of an input file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Parameters or geometry that cannot form a valid problem.
    #[error("configuration error: {0}")]
    Config(String),

    /// Evaluation at a singular point (e.g. zero separation).
    #[error("domain error: {0}")]
    Domain(String),

    /// Krylov or Newton iteration failed to converge.
    #[error("solver error: {message} (residual history tail: {residuals:?})")]
    Solver {
        message: String,
        residuals: Vec<f64>,
    },

    /// Non-finite value or a runtime sanity bound violated.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The potential passed to an energy routine does not solve the
    /// Poisson-Boltzmann problem for the supplied interface field.
    #[error("stale potential: relative residual {residual:.3e} exceeds {tolerance:.3e}")]
    StalePotential { residual: f64, tolerance: f64 },

    /// Parameter fitting could not proceed.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("matrix not positive definite after jitter up to {max_jitter:e}")]
    Decomposition { max_jitter: f64 },

    #[error("hyperparameter optimization failed: {0}")]
    Optimization(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("integration blew up at t = {t} (state component {component})")]
    BlowUp { t: f64, component: usize },

    #[error("sensitivity: integration failed for state {state}, parameter {param}: {source}")]
    Sensitivity {
        state: usize,
        param: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty chain: no retained samples")]
    EmptyChain,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

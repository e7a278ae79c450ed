use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure mode of the lab. Variants are grouped by the stage that
/// raises them so that orchestration code can tag errors with a stage name.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid resolution: n_cells = {0}, need at least 2")]
    InvalidResolution(usize),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("field shape {found:?} does not match grid shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("mask touches {count} node(s) where the field is not defined (first at index {first})")]
    MaskedValue { count: usize, first: usize },
    #[error("exponent error: {0}")]
    Exponent(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("node {node} at ({x:.6}, {y:.6}) is not covered by any coefficient piece")]
    Coverage { node: usize, x: f64, y: f64 },
    #[error("expression error: {0}")]
    Expression(String),
    #[error("coefficient validation failed: {0}")]
    Coefficient(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("resonance or ill-posed problem: {0}")]
    Resonance(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("sectors are not admissible: witness angle {witness:.6} rad has level measure {measure:.4e}")]
    NotAdmissible { witness: f64, measure: f64 },
    #[error("degenerate field: {0}")]
    DegenerateField(String),
    #[error("degenerate stratum: {0}")]
    DegenerateStratum(String),
    #[error("refused: {0}")]
    Refusal(String),
    #[error("empty reconstruction: {0}")]
    EmptyReconstruction(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Strips stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}

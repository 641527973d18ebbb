use std::fmt;

/// Pipeline stage, used to name the failing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Field,
    Classifier,
    Adversarial,
    Scoring,
    Metrics,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Field => "field",
            Stage::Classifier => "classifier",
            Stage::Adversarial => "adversarial",
            Stage::Scoring => "scoring",
            Stage::Metrics => "metrics",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct RunError {
    pub stage: Stage,
    #[source]
    pub source: ddpood::Error,
}

impl RunError {
    pub fn new(stage: Stage, source: impl Into<ddpood::Error>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

/// Tags a core result with the stage it belongs to.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, RunError>;
}

impl<T, E: Into<ddpood::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, RunError> {
        self.map_err(|e| RunError::new(stage, e))
    }
}

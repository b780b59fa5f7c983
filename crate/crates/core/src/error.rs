use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    ConfigInvalid(String),
    #[error("invalid grid state: {0}")]
    StateInvalid(String),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("text encoding supports only 6x6 grids with 3x3 quadrants, got {grid_size}x{grid_size}")]
    UnsupportedLayout { grid_size: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum MoralMachineError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("need at least 2 vectors to standardize, got {0}")]
    TooFewSamples(usize),
    #[error("missing CSV column `{0}`")]
    MissingColumn(String),
    #[error("CSV row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("need at least k = {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("points have inconsistent dimensions")]
    DimensionMismatch,
    #[error("probability {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
    #[error("candidate set is empty")]
    EmptySubset,
    #[error("classifying `{id}` failed: {source}")]
    Classification {
        id: String,
        #[source]
        source: Box<RewardError>,
    },
    #[error("answer source failed for `{id}`: {message}")]
    AnswerSource { id: String, message: String },
    #[error("unknown trajectory `{0}`")]
    UnknownTrajectory(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("the endpoint rejected the credential")]
    BadCredential,
    #[error("the response carries no token log-probabilities")]
    NoLogprobsAvailable,
    #[error("no recorded response for request fingerprint {0}")]
    UnknownFingerprint(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("cassette I/O: {0}")]
    Cassette(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid reward-model context: {0}")]
    ContextInvalid(String),
    #[error("model output has no parsable answer line")]
    MalformedAnswer,
    #[error("dialogue has not completed the required stage: {0}")]
    StageIncomplete(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("pool has {available} trajectories, need {needed}")]
    TooFewTrajectories { available: usize, needed: usize },
    #[error("message not accepted in state {0}")]
    UnexpectedState(String),
    #[error("could not read a label from the answer")]
    UnparsableLabel,
    #[error("hypothesis response could not be parsed")]
    HypothesisUnparsable,
    #[error("session is not finished: {0}")]
    StageIncomplete(String),
    #[error("invalid session config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisedError {
    #[error("expected input dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid MLP config: {0}")]
    ConfigInvalid(String),
    #[error("participant `{pid}` has {available} samples, need {needed}")]
    InsufficientSamples { pid: String, available: usize, needed: usize },
    #[error("labeled set is empty")]
    EmptyData,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label matrix needs at least 2 raters and 2 items")]
    MatrixTooSmall,
    #[error("label matrix is ragged or holds labels other than 0/1")]
    MatrixInvalid,
    #[error("expected agreement is 1 but observed agreement is {observed}")]
    DegenerateMarginals { observed: f64 },
    #[error("balanced accuracy needs both classes in the ground truth")]
    SingleClassTruth,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("need at least 2 participants")]
    TooFewParticipants,
    #[error("confidence level {0} is outside (0, 1)")]
    BadLevel(f64),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("session `{0}` already exists")]
    AlreadyExists(String),
    #[error("invalid session id `{0}`")]
    InvalidId(String),
    #[error("expected message seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("corrupt event log for `{id}` at line {line}: {message}")]
    Corrupt { id: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

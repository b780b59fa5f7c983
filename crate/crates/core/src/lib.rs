//! Interactive reward design: a grid-world environment and its text encoding,
//! an in-context language-model reward model, the elicitation dialogue that
//! builds it, and the baselines and statistics used to evaluate it.

pub mod dialogue;
pub mod encoding;
pub mod env;
pub mod error;
pub mod llm;
pub mod metrics;
pub mod moral_machine;
pub mod reward;
pub mod sampling;
pub mod store;
pub mod stub;
pub mod supervised;
pub mod synthetic;

pub use dialogue::{Dialogue, DialogueSession, DialogueState, SessionConfig, SystemTurn};
pub use encoding::{encode_ascii, encode_numeric, parse_ascii, Legend};
pub use env::{generate_pool, rollout, EnvConfig, Policy, Trajectory, TrajectoryPool};
pub use error::*;
pub use llm::{Completion, LanguageModel, LlmRequest};
pub use reward::{classify, FeedbackRecord, RewardModelContext};
pub use store::{SessionService, SessionStore, StoredSession};
pub use stub::RuleAwareStub;
pub use supervised::{train_mlp, LabeledSet, Mlp, MlpConfig};

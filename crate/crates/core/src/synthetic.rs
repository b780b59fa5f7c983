//! Scripted participant for offline end-to-end runs.
//!
//! Labels follow a hidden rule over trajectories. Assessment explanations are
//! deliberately vague, so the only statement of the rule reaches the reward
//! model through the reflection.

use crate::dialogue::{DialogueSession, DialogueState, SystemTurn};
use crate::env::{Trajectory, TrajectoryPool};

pub struct SyntheticUser {
    pub value: String,
    pub rule: fn(&Trajectory) -> bool,
    pub reflection: String,
    pub clarify: bool,
}

impl SyntheticUser {
    /// Judges "respectful" as never leaving the agent's own orchard.
    pub fn respectful() -> Self {
        Self {
            value: "respectful".into(),
            rule: Trajectory::main_stays_home,
            reflection: "Not quite. What matters to me is that the agent stays in its own orchard and does not leave it.".into(),
            clarify: false,
        }
    }

    pub fn label(&self, traj: &Trajectory) -> u8 {
        u8::from((self.rule)(traj))
    }

    /// Reply to the latest system turn.
    pub fn respond(&self, session: &DialogueSession, turn: &SystemTurn, pool: &TrajectoryPool) -> String {
        match &session.state {
            DialogueState::AwaitValue => self.value.clone(),
            DialogueState::AwaitAnswerWords => format!("dis{}", self.value),
            DialogueState::AwaitReflection => self.reflection.clone(),
            DialogueState::ClarifyDecision => if self.clarify { "yes" } else { "no" }.into(),
            DialogueState::Stage1 { .. } | DialogueState::Clarify { .. } | DialogueState::Stage3 { .. } => {
                let traj = turn.attachment.as_deref().and_then(|id| pool.get(id));
                match traj.map(|t| self.label(t)) {
                    Some(1) => "Yes. It seemed fine to me.".into(),
                    _ => "No. I did not like what it did.".into(),
                }
            }
            _ => String::new(),
        }
    }
}

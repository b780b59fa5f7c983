//! In-context reward model.
//!
//! Elicited feedback is compiled into a fixed six-part prompt; the language
//! model reasons, then ends with `ANSWER: <word>`. The reward is read from the
//! token probabilities of the two answer words at that position.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dialogue::DialogueSession;
use crate::encoding::{encode_ascii, Legend};
use crate::env::Trajectory;
use crate::error::{LlmError, RewardError};
use crate::llm::{Completion, LanguageModel, LlmRequest};
use crate::sampling::{confidence_from_probs, Confidence};

pub const CONTEXT_SCHEMA: &str = "irda-context/1";
pub const ANSWER_MARKER: &str = "ANSWER:";

pub const SYSTEM_PROMPT: &str = "You judge the behaviour of agents on behalf of a user. \
Follow the user's own definition of their value as shown by their feedback.";

pub const REFORMAT_INSTRUCTION: &str = "Your previous reply did not end with a valid answer line. \
Reply again and finish with exactly one final line of the form `ANSWER: <word>` using one of the two allowed words.";

pub const SECTION_ENVIRONMENT: &str = "## Environment";
pub const SECTION_FEEDBACK: &str = "## Feedback from the user";
pub const SECTION_REFLECTION: &str = "## Reflection";
pub const SECTION_TASK: &str = "## Task";
pub const SECTION_TARGET: &str = "## Trajectory to assess";
pub const SECTION_REASONING: &str = "## Reasoning";
pub const SECTION_FORMAT: &str = "## Answer format";
pub const EXAMPLE_HEADER: &str = "### Example";
pub const LABEL_PREFIX: &str = "User's label: ";
pub const EXPLANATION_PREFIX: &str = "User's explanation: ";
pub const REFLECTION_PREFIX: &str = "User's reflection: ";

pub const GRID_ENVIRONMENT: &str = "The environment is a 6x6 grid split into four 3x3 quadrants (orchards). \
The main agent owns the upper-left quadrant and each background agent owns one of the other three. \
Apples and garbage lie on the grid; an agent that enters a cell collects everything on it. \
Each trajectory is shown step by step: a step header, sentences describing what happened, then the grid.";

pub const MORAL_MACHINE_ENVIRONMENT: &str = "Each scenario describes a self-driving car whose brakes have failed. \
The car either continues straight ahead or swerves, and each choice kills a different group of characters.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Clarification,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub trajectory_id: String,
    pub ascii_text: String,
    pub user_label: u8,
    pub user_explanation: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub hypothesis: String,
    pub alternative_features: Vec<String>,
    pub user_reflection: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardModelContext {
    pub value_name: String,
    pub pos_word: String,
    pub neg_word: String,
    pub env_description: String,
    pub feedback: Vec<FeedbackRecord>,
    pub reflection: Option<ReflectionRecord>,
    pub task_description: String,
    pub format_instructions: String,
}

impl RewardModelContext {
    /// Context for judging grid-world trajectories.
    pub fn grid(value_name: &str, pos_word: &str, neg_word: &str) -> Self {
        let env_description = format!("{GRID_ENVIRONMENT}\n{}", Legend::default().describe());
        Self::with_environment(value_name, pos_word, neg_word, env_description, "the main agent's behaviour in the trajectory")
    }

    /// Context for Moral Machine scenarios; the answer words name the car's choice.
    pub fn moral_machine(value_name: &str) -> Self {
        Self::with_environment(value_name, "stay", "swerve", MORAL_MACHINE_ENVIRONMENT.to_string(), "the choice the car should make in the scenario")
    }

    fn with_environment(value_name: &str, pos_word: &str, neg_word: &str, env_description: String, subject: &str) -> Self {
        Self {
            value_name: value_name.to_string(),
            pos_word: pos_word.to_string(),
            neg_word: neg_word.to_string(),
            env_description,
            feedback: Vec::new(),
            reflection: None,
            task_description: format!(
                "Using the user's feedback above, decide whether {subject} below is `{pos_word}` or `{neg_word}` \
                 according to what the user means by \"{value_name}\"."
            ),
            format_instructions: format!(
                "After your reasoning, end with exactly one final line of the form `ANSWER: {pos_word}` or `ANSWER: {neg_word}`."
            ),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: &str| Err(RewardError::ContextInvalid(m.to_string()));
        let word_ok = |w: &str| !w.is_empty() && !w.contains(char::is_whitespace);
        if !word_ok(&self.pos_word) || !word_ok(&self.neg_word) {
            return bad("answer words must be single non-empty words");
        }
        if self.pos_word.eq_ignore_ascii_case(&self.neg_word) {
            return bad("answer words must differ");
        }
        for r in &self.feedback {
            if r.user_label > 1 {
                return bad("labels must be 0 or 1");
            }
            if r.ascii_text.trim().is_empty() {
                return bad("feedback records need the trajectory text");
            }
        }
        if let Some(r) = &self.reflection {
            if r.alternative_features.is_empty() {
                return bad("a reflection needs at least one alternative feature");
            }
        }
        Ok(())
    }

    pub fn label_word(&self, label: u8) -> &str {
        if label == 1 {
            &self.pos_word
        } else {
            &self.neg_word
        }
    }

    /// Same context restricted to first-pass Stage 1 feedback, without reflection.
    pub fn baseline(&self) -> Self {
        Self {
            feedback: self.feedback.iter().filter(|r| r.stage == Stage::Stage1).cloned().collect(),
            reflection: None,
            ..self.clone()
        }
    }

    /// One `### Example n` block per feedback record.
    pub fn examples_text(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.feedback.iter().enumerate() {
            let _ = writeln!(out, "{EXAMPLE_HEADER} {}", i + 1);
            let _ = writeln!(out, "{}", r.ascii_text.trim_end_matches('\n'));
            let _ = writeln!(out, "{LABEL_PREFIX}{}", self.label_word(r.user_label));
            let _ = writeln!(out, "{EXPLANATION_PREFIX}{}\n", r.user_explanation.trim());
        }
        out
    }

    /// Prompt text before and after the target trajectory.
    pub fn prompt_parts(&self) -> Result<(String, String), RewardError> {
        self.validate()?;
        let mut pre = String::new();
        let _ = writeln!(pre, "{SECTION_ENVIRONMENT}\n{}\n", self.env_description);
        let _ = writeln!(pre, "{SECTION_FEEDBACK}");
        if self.feedback.is_empty() {
            pre.push_str("No feedback has been collected yet.\n\n");
        }
        pre.push_str(&self.examples_text());
        if let Some(r) = &self.reflection {
            let _ = writeln!(pre, "{SECTION_REFLECTION}");
            let _ = writeln!(pre, "Hypothesis about the user's criteria: {}", r.hypothesis.trim());
            let _ = writeln!(pre, "Alternative features offered to the user:");
            for (i, f) in r.alternative_features.iter().enumerate() {
                let _ = writeln!(pre, "{}. {}", i + 1, f.trim());
            }
            let _ = writeln!(pre, "{REFLECTION_PREFIX}{}\n", r.user_reflection.trim());
        }
        let _ = writeln!(pre, "{SECTION_TASK}\n{}\n", self.task_description);
        let post = format!(
            "{SECTION_REASONING}\nThink step by step. Compare the trajectory with the user's examples and explanations, \
             name the features the user cares about, and check each one before deciding.\n\n{SECTION_FORMAT}\n{}\n",
            self.format_instructions
        );
        Ok((pre, post))
    }
}

/// Builds the reward-model request for one target text.
pub fn assemble_prompt(ctx: &RewardModelContext, target: &str) -> Result<LlmRequest, RewardError> {
    if target.trim().is_empty() {
        return Err(RewardError::ContextInvalid("target text is empty".into()));
    }
    let (pre, post) = ctx.prompt_parts()?;
    let user = format!("{pre}{SECTION_TARGET}\n{}\n\n{post}", target.trim_end_matches('\n'));
    Ok(LlmRequest::new(SYSTEM_PROMPT, user))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: u8,
    pub confidence: Confidence,
    /// Set when both answer words had equal probability; the label is then 1.
    pub tie: bool,
    pub rationale: String,
    pub raw: Completion,
}

/// Probability mass an alternative token lends to `word`: it must be a
/// non-empty prefix of `word` and not of `other`.
fn lends_to(alt: &str, word: &str, other: &str) -> bool {
    let a = alt.trim().trim_start_matches(['`', '*', '"', '\'']).to_lowercase();
    !a.is_empty() && word.starts_with(&a) && !other.starts_with(&a)
}

/// Word after the last answer marker and its byte offset.
fn answer_word(text: &str) -> Option<(usize, String)> {
    let at = text.rfind(ANSWER_MARKER)? + ANSWER_MARKER.len();
    let rest = &text[at..];
    let start = rest.find(|c: char| c.is_alphanumeric())?;
    let word: String = rest[start..].chars().take_while(|c| c.is_alphanumeric() || *c == '-').collect();
    Some((at + start, word.to_lowercase()))
}

pub fn parse_answer(ctx: &RewardModelContext, completion: &Completion) -> Result<Classification, RewardError> {
    let (offset, word) = answer_word(&completion.text).ok_or(RewardError::MalformedAnswer)?;
    let (pos_word, neg_word) = (ctx.pos_word.to_lowercase(), ctx.neg_word.to_lowercase());
    if word != pos_word && word != neg_word {
        return Err(RewardError::MalformedAnswer);
    }
    if completion.token_probs.is_empty() {
        return Err(LlmError::NoLogprobsAvailable.into());
    }
    let position = completion.position_covering(offset).ok_or(LlmError::NoLogprobsAvailable)?;
    let mass = |w: &str, o: &str| {
        position
            .alternatives
            .iter()
            .filter(|(alt, _)| lends_to(alt, w, o))
            .map(|(_, p)| p)
            .sum::<f64>()
            .min(1.0)
    };
    let pos = mass(&pos_word, &neg_word);
    let neg = mass(&neg_word, &pos_word);
    let confidence = confidence_from_probs(pos, neg).map_err(|e| RewardError::ContextInvalid(e.to_string()))?;
    let marker = completion.text.rfind(ANSWER_MARKER).unwrap_or(0);
    Ok(Classification {
        label: u8::from(pos >= neg),
        confidence,
        tie: pos == neg,
        rationale: completion.text[..marker].trim().to_string(),
        raw: completion.clone(),
    })
}

/// Classifies an already-encoded target text, retrying once on a malformed answer.
pub fn classify_text(ctx: &RewardModelContext, target: &str, llm: &dyn LanguageModel) -> Result<Classification, RewardError> {
    let request = assemble_prompt(ctx, target)?;
    match parse_answer(ctx, &llm.complete(&request)?) {
        Err(RewardError::MalformedAnswer) => {
            let mut retry = request;
            retry.user_text.push('\n');
            retry.user_text.push_str(REFORMAT_INSTRUCTION);
            retry.user_text.push('\n');
            parse_answer(ctx, &llm.complete(&retry)?)
        }
        other => other,
    }
}

pub fn classify(ctx: &RewardModelContext, traj: &Trajectory, llm: &dyn LanguageModel) -> Result<Classification, RewardError> {
    let ascii = encode_ascii(traj, &Legend::default())?;
    classify_text(ctx, &ascii.text, llm)
}

/// Context from the first-pass Stage 1 feedback of a session.
pub fn build_baseline_context(session: &DialogueSession) -> Result<RewardModelContext, RewardError> {
    let ctx = session.context_so_far();
    let stage1 = ctx.feedback.iter().filter(|r| r.stage == Stage::Stage1).count();
    if stage1 < session.config.k || stage1 == 0 {
        return Err(RewardError::StageIncomplete(format!("{stage1} of {} stage 1 answers", session.config.k)));
    }
    Ok(ctx.baseline())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelReport {
    pub labels: BTreeMap<String, Classification>,
    pub failures: BTreeMap<String, String>,
}

/// Classifies `(id, target text)` items; failures are collected, not fatal.
pub fn label_texts(ctx: &RewardModelContext, items: &[(String, String)], llm: &dyn LanguageModel) -> LabelReport {
    let mut report = LabelReport::default();
    for (id, text) in items {
        match classify_text(ctx, text, llm) {
            Ok(c) => {
                report.labels.insert(id.clone(), c);
            }
            Err(e) => {
                report.failures.insert(id.clone(), e.to_string());
            }
        }
    }
    report
}

pub fn label_set(ctx: &RewardModelContext, trajectories: &[&Trajectory], llm: &dyn LanguageModel) -> LabelReport {
    let mut report = LabelReport::default();
    for t in trajectories {
        match classify(ctx, t, llm) {
            Ok(c) => {
                report.labels.insert(t.id.clone(), c);
            }
            Err(e) => {
                report.failures.insert(t.id.clone(), e.to_string());
            }
        }
    }
    report
}

/// Exported reward model: the assembled prompt around the target slot plus the structured records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextExport {
    pub schema: String,
    pub system_text: String,
    pub preamble: String,
    pub postamble: String,
    pub context: RewardModelContext,
}

impl ContextExport {
    pub fn new(ctx: &RewardModelContext) -> Result<Self, RewardError> {
        let (preamble, postamble) = ctx.prompt_parts()?;
        Ok(Self {
            schema: CONTEXT_SCHEMA.to_string(),
            system_text: SYSTEM_PROMPT.to_string(),
            preamble,
            postamble,
            context: ctx.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RewardError> {
        let export: Self = serde_json::from_str(text).map_err(|e| RewardError::ContextInvalid(e.to_string()))?;
        if export.schema != CONTEXT_SCHEMA {
            return Err(RewardError::ContextInvalid(format!("unsupported schema `{}`", export.schema)));
        }
        export.context.validate()?;
        Ok(export)
    }
}

//! Elicitation dialogue.
//!
//! The session walks the user through: naming a value, labelling and
//! explaining `k` diverse trajectories, reflecting on a model-generated
//! hypothesis (optionally re-explaining the same trajectories), and answering
//! about the trajectories the reward model is least sure of. Every transition
//! is decided here; clients only render [`SystemTurn`]s.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_ascii, Legend};
use crate::env::TrajectoryPool;
use crate::error::DialogueError;
use crate::llm::{LanguageModel, LlmRequest};
use crate::reward::{FeedbackRecord, ReflectionRecord, RewardModelContext, Stage, SECTION_ENVIRONMENT, SECTION_FEEDBACK};
use crate::sampling::{diversity_sample, UncertaintyLoop, DEFAULT_EPSILON, DEFAULT_K, DEFAULT_UNCERTAINTY_SUBSET};

pub const SESSION_SCHEMA: &str = "irda-session/1";
pub const SECTION_HYPOTHESIS: &str = "## Hypothesis request";
pub const LABELS_PREFIX: &str = "Labels: ";

const HYPOTHESIS_SYSTEM: &str = "You help a user understand the criteria behind their own judgements of agent behaviour.";
const HYPOTHESIS_RETRY: &str = "Your previous reply could not be read. Write the hypothesis paragraph, one introductory line, \
then between 2 and 4 numbered alternative features formatted as `1. <feature>`.";

/// Value adjectives with their opposites. Lookups also accept adverbs ("respectfully").
pub const ANTONYMS: &[(&str, &str)] = &[
    ("respectful", "disrespectful"),
    ("fair", "unfair"),
    ("kind", "unkind"),
    ("honest", "dishonest"),
    ("helpful", "unhelpful"),
    ("polite", "impolite"),
    ("safe", "unsafe"),
    ("cooperative", "uncooperative"),
    ("friendly", "unfriendly"),
    ("considerate", "inconsiderate"),
    ("responsible", "irresponsible"),
    ("ethical", "unethical"),
    ("moral", "immoral"),
    ("loyal", "disloyal"),
    ("trustworthy", "untrustworthy"),
    ("careful", "careless"),
    ("generous", "ungenerous"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub k: usize,
    pub epsilon: f64,
    pub max_clarify_passes: usize,
    /// `None` keeps asking until every candidate reaches `epsilon`.
    pub max_uncertainty_rounds: Option<usize>,
    pub uncertainty_subset: usize,
    pub max_reprompts: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            epsilon: DEFAULT_EPSILON,
            max_clarify_passes: 1,
            max_uncertainty_rounds: Some(1),
            uncertainty_subset: DEFAULT_UNCERTAINTY_SUBSET,
            max_reprompts: 2,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.k == 0 {
            return Err(DialogueError::ConfigInvalid("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(DialogueError::ConfigInvalid(format!("epsilon {} is outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DialogueState {
    Greeting,
    AwaitValue,
    /// The value word has no known opposite; the user supplies it.
    AwaitAnswerWords,
    Stage1 { i: usize },
    HypothesisShown,
    AwaitReflection,
    ClarifyDecision,
    Clarify { i: usize, pass: usize },
    Stage3 { round: usize },
    Done,
}

impl DialogueState {
    pub fn name(&self) -> &'static str {
        match self {
            DialogueState::Greeting => "greeting",
            DialogueState::AwaitValue => "await_value",
            DialogueState::AwaitAnswerWords => "await_answer_words",
            DialogueState::Stage1 { .. } => "stage1",
            DialogueState::HypothesisShown => "hypothesis_shown",
            DialogueState::AwaitReflection => "await_reflection",
            DialogueState::ClarifyDecision => "clarify_decision",
            DialogueState::Clarify { .. } => "clarify",
            DialogueState::Stage3 { .. } => "stage3",
            DialogueState::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expects {
    FreeText,
    YesNo,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemTurn {
    pub messages: Vec<String>,
    /// Trajectory to show alongside the messages.
    pub attachment: Option<String>,
    pub expects: Expects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub actor: Actor,
    pub text: String,
    pub timestamp_ms: u64,
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always reports the same instant.
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub config: SessionConfig,
    pub state: DialogueState,
    pub value_text: Option<String>,
    pub pos_word: Option<String>,
    pub neg_word: Option<String>,
    pub pool_seed: u64,
    pub pool_len: usize,
    pub stage1_ids: Vec<String>,
    pub uncertainty_subset_ids: Vec<String>,
    pub transcript: Vec<Message>,
    pub records: Vec<FeedbackRecord>,
    pub reflection: Option<ReflectionRecord>,
    /// Hypothesis shown to the user but not yet reflected on.
    pub pending_hypothesis: Option<Hypothesis>,
    pub clarify_passes: usize,
    pub reprompts: usize,
    pub uncertainty: Option<UncertaintyLoop>,
    /// Trajectory currently shown in Stage 3.
    pub pending_query: Option<String>,
    pub last_turn: Option<SystemTurn>,
}

impl DialogueSession {
    /// Reward-model context built from everything collected so far.
    pub fn context_so_far(&self) -> RewardModelContext {
        let value = self.value_text.clone().unwrap_or_default();
        let pos = self.pos_word.clone().unwrap_or_else(|| "yes".into());
        let neg = self.neg_word.clone().unwrap_or_else(|| "no".into());
        let mut ctx = RewardModelContext::grid(&value, &pos, &neg);
        ctx.feedback = self.records.clone();
        ctx.reflection = self.reflection.clone();
        ctx
    }

    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &FeedbackRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn user_turns(&self) -> usize {
        self.transcript.iter().filter(|m| m.actor == Actor::User).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub hypothesis: String,
    pub alternative_features: Vec<String>,
}

/// Opposite of a value word, accepting adverb forms.
pub fn lookup_value_word(word: &str) -> Option<(&'static str, &'static str)> {
    let w = word.trim().to_lowercase();
    let base = |w: &str| ANTONYMS.iter().find(|(p, _)| *p == w).copied();
    base(&w)
        .or_else(|| w.strip_suffix("ly").and_then(base))
        .or_else(|| w.strip_suffix("ily").and_then(|s| base(&format!("{s}y"))))
        .or_else(|| w.strip_suffix("ly").and_then(|s| base(&format!("{s}le"))))
}

/// "respectful" → "respectfully", "responsible" → "responsibly".
pub fn adverb(word: &str) -> String {
    if let Some(stem) = word.strip_suffix("le") {
        format!("{stem}ly")
    } else if let Some(stem) = word.strip_suffix('y') {
        format!("{stem}ily")
    } else if word.ends_with("ic") {
        format!("{word}ally")
    } else {
        format!("{word}ly")
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '’'))
        .filter(|w| !w.is_empty())
        .map(|w| w.replace('’', "'"))
        .collect()
}

const NEGATORS: &[&str] = &["not", "never", "no", "isn't", "wasn't", "didn't", "doesn't", "hardly", "nor", "aren't", "weren't", "don't"];
const YES: &[&str] = &["yes", "yeah", "yep", "y", "sure", "ok", "okay"];
const NO: &[&str] = &["no", "nope", "n", "nah"];

fn matches_word(token: &str, word: &str) -> bool {
    token == word || token.strip_suffix("ly").is_some_and(|s| s == word) || adverb(word) == token
}

/// Reads a binary label from a free-text answer.
///
/// Precedence: the negative word (or a negated positive word) gives 0; then the
/// positive word (or a negated negative word) gives 1; then a leading yes/no.
/// The explanation is the text without a leading yes/no token.
pub fn parse_user_label(text: &str, pos_word: &str, neg_word: &str) -> Result<(u8, String), DialogueError> {
    let toks = words(text);
    let (pos, neg) = (pos_word.to_lowercase(), neg_word.to_lowercase());
    let negated = |i: usize| (i.saturating_sub(2)..i).any(|j| NEGATORS.contains(&toks[j].as_str()));
    let mut neg_signal = false;
    let mut pos_signal = false;
    for (i, t) in toks.iter().enumerate() {
        if matches_word(t, &neg) {
            if negated(i) {
                pos_signal = true;
            } else {
                neg_signal = true;
            }
        } else if matches_word(t, &pos) {
            if negated(i) {
                neg_signal = true;
            } else {
                pos_signal = true;
            }
        }
    }
    let label = if neg_signal {
        0
    } else if pos_signal {
        1
    } else {
        match toks.first().map(String::as_str) {
            Some(w) if YES.contains(&w) => 1,
            Some(w) if NO.contains(&w) => 0,
            _ => return Err(DialogueError::UnparsableLabel),
        }
    };
    Ok((label, strip_leading_answer(text)))
}

fn strip_leading_answer(text: &str) -> String {
    let trimmed = text.trim();
    let first: String = trimmed.chars().take_while(|c| c.is_alphabetic()).collect();
    let lower = first.to_lowercase();
    if YES.contains(&lower.as_str()) || NO.contains(&lower.as_str()) {
        let rest = trimmed[first.len()..].trim_start_matches([',', '.', '!', ';', ':', '-', ' ']).trim();
        if !rest.is_empty() {
            return rest.to_string();
        }
    }
    trimmed.to_string()
}

pub fn parse_yes_no(text: &str) -> Option<bool> {
    let first = words(text).into_iter().next()?;
    if YES.contains(&first.as_str()) {
        Some(true)
    } else if NO.contains(&first.as_str()) {
        Some(false)
    } else {
        None
    }
}

/// Hypothesis-request prompt over the given records.
pub fn hypothesis_request(records: &[FeedbackRecord], pos_word: &str, neg_word: &str, value: &str) -> LlmRequest {
    let mut ctx = RewardModelContext::grid(value, pos_word, neg_word);
    ctx.feedback = records.to_vec();
    let mut user = String::new();
    let _ = writeln!(user, "{SECTION_ENVIRONMENT}\n{}\n", ctx.env_description);
    let _ = writeln!(user, "{SECTION_FEEDBACK}");
    user.push_str(&ctx.examples_text());
    let _ = writeln!(user, "{SECTION_HYPOTHESIS}");
    let _ = writeln!(user, "{LABELS_PREFIX}`{pos_word}` and `{neg_word}`.");
    let _ = writeln!(
        user,
        "The user labelled each trajectory as `{pos_word}` or `{neg_word}` and explained why. \
         State a hypothesis about which features of the main agent's behaviour the user bases these decisions on, \
         as a short paragraph addressed to the user. Then write one introductory line followed by a numbered list \
         of 2 to 4 alternative features the user might also want to weigh, one per line, formatted as `1. <feature>`."
    );
    LlmRequest::new(HYPOTHESIS_SYSTEM, user)
}

/// Splits a hypothesis reply into the paragraph and the numbered alternatives.
pub fn parse_hypothesis(text: &str) -> Option<Hypothesis> {
    let mut paragraph = Vec::new();
    let mut items = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        let digits = t.chars().take_while(char::is_ascii_digit).count();
        let rest = &t[digits..];
        if digits > 0 && (rest.starts_with(". ") || rest.starts_with(") ")) {
            let item = rest[2..].trim();
            if !item.is_empty() {
                items.push(item.to_string());
            }
        } else if items.is_empty() && !t.is_empty() {
            paragraph.push(t.to_string());
        }
    }
    // The last paragraph line introduces the list when it ends with a colon.
    if paragraph.len() > 1 && paragraph.last().is_some_and(|l| l.ends_with(':')) {
        paragraph.pop();
    }
    let hypothesis = paragraph.join(" ");
    ((2..=4).contains(&items.len()) && !hypothesis.is_empty()).then_some(Hypothesis {
        hypothesis,
        alternative_features: items,
    })
}

/// One hypothesis call with a single reformat retry.
pub fn generate_hypothesis(
    records: &[FeedbackRecord],
    pos_word: &str,
    neg_word: &str,
    value: &str,
    llm: &dyn LanguageModel,
) -> Result<Hypothesis, DialogueError> {
    if records.is_empty() {
        return Err(DialogueError::StageIncomplete("no feedback to form a hypothesis from".into()));
    }
    let request = hypothesis_request(records, pos_word, neg_word, value);
    if let Some(h) = parse_hypothesis(&llm.complete(&request)?.text) {
        return Ok(h);
    }
    let mut retry = request;
    retry.user_text.push('\n');
    retry.user_text.push_str(HYPOTHESIS_RETRY);
    retry.user_text.push('\n');
    parse_hypothesis(&llm.complete(&retry)?.text).ok_or(DialogueError::HypothesisUnparsable)
}

/// Drives sessions against a fixed pool and language model.
pub struct Dialogue<'a> {
    pub pool: &'a TrajectoryPool,
    pub llm: &'a dyn LanguageModel,
    pub clock: &'a dyn Clock,
}

impl<'a> Dialogue<'a> {
    pub fn new(pool: &'a TrajectoryPool, llm: &'a dyn LanguageModel, clock: &'a dyn Clock) -> Self {
        Self { pool, llm, clock }
    }

    pub fn start_session(&self, session_id: &str, config: SessionConfig) -> Result<(DialogueSession, SystemTurn), DialogueError> {
        config.validate()?;
        let needed = config.k + config.uncertainty_subset;
        if self.pool.len() < needed {
            return Err(DialogueError::TooFewTrajectories { available: self.pool.len(), needed });
        }
        let stage1_ids = diversity_sample(self.pool, config.k, config.seed)?;
        let mut rest: Vec<String> = self.pool.ids().filter(|id| !stage1_ids.iter().any(|s| s == id)).map(str::to_string).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f5a_b5e7);
        rest.shuffle(&mut rng);
        let mut subset: Vec<String> = rest.into_iter().take(config.uncertainty_subset).collect();
        subset.sort();

        let mut session = DialogueSession {
            session_id: session_id.to_string(),
            config,
            state: DialogueState::Greeting,
            value_text: None,
            pos_word: None,
            neg_word: None,
            pool_seed: self.pool.seed,
            pool_len: self.pool.len(),
            stage1_ids,
            uncertainty_subset_ids: subset,
            transcript: Vec::new(),
            records: Vec::new(),
            reflection: None,
            pending_hypothesis: None,
            clarify_passes: 0,
            reprompts: 0,
            uncertainty: None,
            pending_query: None,
            last_turn: None,
        };
        session.state = DialogueState::AwaitValue;
        let turn = SystemTurn {
            messages: vec![
                "Hello! I will help you describe how you want an agent to behave, so that your description can be used to reward it.".into(),
                "The agent lives in a grid world with apples, garbage and other agents. I will show you some of its behaviour and ask what you think.".into(),
                "Which value should the agent have? Please answer with a single word, for example: respectful.".into(),
            ],
            attachment: None,
            expects: Expects::FreeText,
        };
        self.emit(&mut session, &turn);
        Ok((session, turn))
    }

    fn emit(&self, session: &mut DialogueSession, turn: &SystemTurn) {
        let now = self.clock.now_ms();
        for m in &turn.messages {
            session.transcript.push(Message { actor: Actor::System, text: m.clone(), timestamp_ms: now });
        }
        session.last_turn = Some(turn.clone());
    }

    /// Applies one user message. On error the input session is left untouched.
    pub fn submit(&self, session: &DialogueSession, text: &str) -> Result<(DialogueSession, SystemTurn), DialogueError> {
        let mut s = session.clone();
        if matches!(s.state, DialogueState::Done | DialogueState::Greeting | DialogueState::HypothesisShown) {
            return Err(DialogueError::UnexpectedState(s.state.name().into()));
        }
        s.transcript.push(Message { actor: Actor::User, text: text.to_string(), timestamp_ms: self.clock.now_ms() });
        let turn = match s.state {
            DialogueState::AwaitValue => self.on_value(&mut s, text),
            DialogueState::AwaitAnswerWords => self.on_answer_words(&mut s, text),
            DialogueState::Stage1 { i } => self.on_assessment(&mut s, text, i, None)?,
            DialogueState::Clarify { i, pass } => self.on_assessment(&mut s, text, i, Some(pass))?,
            DialogueState::AwaitReflection => self.on_reflection(&mut s, text),
            DialogueState::ClarifyDecision => self.on_clarify_decision(&mut s, text)?,
            DialogueState::Stage3 { .. } => self.on_uncertainty_answer(&mut s, text)?,
            DialogueState::Done | DialogueState::Greeting | DialogueState::HypothesisShown => unreachable!(),
        };
        self.emit(&mut s, &turn);
        Ok((s, turn))
    }

    fn words_of(s: &DialogueSession) -> (String, String) {
        (s.pos_word.clone().unwrap_or_default(), s.neg_word.clone().unwrap_or_default())
    }

    fn question(s: &DialogueSession) -> String {
        format!(
            "Does the agent act {}? Please explain your reasoning using 1-3 sentences.",
            adverb(s.pos_word.as_deref().unwrap_or_default())
        )
    }

    fn assessment_turn(&self, s: &DialogueSession, i: usize, pass: Option<usize>) -> SystemTurn {
        let k = s.stage1_ids.len();
        let mut messages = Vec::new();
        if i == 0 && pass.is_some() {
            messages.push("Let's look at the same trajectories again. Feel free to update your answers and explanations.".into());
        }
        messages.push(format!("Trajectory {} of {k}.", i + 1));
        messages.push(Self::question(s));
        SystemTurn { messages, attachment: Some(s.stage1_ids[i].clone()), expects: Expects::FreeText }
    }

    fn start_assessment(&self, s: &mut DialogueSession) -> SystemTurn {
        s.state = DialogueState::Stage1 { i: 0 };
        let mut turn = self.assessment_turn(s, 0, None);
        turn.messages.insert(
            0,
            format!(
                "Thanks. I will now show you {} trajectories of the main agent (M), one at a time.",
                s.stage1_ids.len()
            ),
        );
        turn
    }

    fn on_value(&self, s: &mut DialogueSession, text: &str) -> SystemTurn {
        let toks = words(text);
        if let Some((pos, neg)) = toks.iter().find_map(|t| lookup_value_word(t)) {
            s.value_text = Some(pos.to_string());
            s.pos_word = Some(pos.to_string());
            s.neg_word = Some(neg.to_string());
            return self.start_assessment(s);
        }
        if toks.len() == 1 && toks[0].chars().all(char::is_alphabetic) {
            s.value_text = Some(toks[0].clone());
            s.pos_word = Some(toks[0].clone());
            s.state = DialogueState::AwaitAnswerWords;
            return SystemTurn {
                messages: vec![format!(
                    "Which single word describes the opposite of \"{}\" behaviour?",
                    toks[0]
                )],
                attachment: None,
                expects: Expects::FreeText,
            };
        }
        SystemTurn {
            messages: vec!["Please name the value as a single word, for example: respectful.".into()],
            attachment: None,
            expects: Expects::FreeText,
        }
    }

    fn on_answer_words(&self, s: &mut DialogueSession, text: &str) -> SystemTurn {
        let toks = words(text);
        let pos = s.pos_word.clone().unwrap_or_default();
        match toks.as_slice() {
            [w] if *w != pos && w.chars().all(char::is_alphabetic) => {
                s.neg_word = Some(w.clone());
                self.start_assessment(s)
            }
            _ => SystemTurn {
                messages: vec![format!("Please reply with one word that is different from \"{pos}\".")],
                attachment: None,
                expects: Expects::FreeText,
            },
        }
    }

    fn reprompt(&self, s: &mut DialogueSession, attachment: Option<String>) -> Result<SystemTurn, DialogueError> {
        if s.reprompts >= s.config.max_reprompts {
            return Err(DialogueError::UnparsableLabel);
        }
        s.reprompts += 1;
        let (pos, neg) = Self::words_of(s);
        Ok(SystemTurn {
            messages: vec![format!(
                "Sorry, I could not tell whether you found the agent {pos} or {neg}. Please start with yes or no, then explain."
            )],
            attachment,
            expects: Expects::FreeText,
        })
    }

    fn on_assessment(&self, s: &mut DialogueSession, text: &str, i: usize, pass: Option<usize>) -> Result<SystemTurn, DialogueError> {
        let (pos, neg) = Self::words_of(s);
        let id = s.stage1_ids[i].clone();
        let Ok((label, explanation)) = parse_user_label(text, &pos, &neg) else {
            return self.reprompt(s, Some(id));
        };
        s.reprompts = 0;
        let traj = self.pool.get(&id).ok_or_else(|| DialogueError::UnexpectedState(format!("trajectory {id} missing from pool")))?;
        s.records.push(FeedbackRecord {
            trajectory_id: id,
            ascii_text: encode_ascii(traj, &Legend::default())?.text,
            user_label: label,
            user_explanation: explanation,
            stage: if pass.is_some() { Stage::Clarification } else { Stage::Stage1 },
        });
        let k = s.stage1_ids.len();
        if i + 1 < k {
            s.state = match pass {
                Some(p) => DialogueState::Clarify { i: i + 1, pass: p },
                None => DialogueState::Stage1 { i: i + 1 },
            };
            return Ok(self.assessment_turn(s, i + 1, pass));
        }
        // The hypothesis is formed from the latest explanation of each trajectory.
        let latest: Vec<FeedbackRecord> = match pass {
            Some(_) => s.records.iter().rev().take(k).rev().cloned().collect(),
            None => s.stage_records(Stage::Stage1).cloned().collect(),
        };
        let value = s.value_text.clone().unwrap_or_default();
        s.state = DialogueState::HypothesisShown;
        let h = generate_hypothesis(&latest, &pos, &neg, &value, self.llm)?;
        let mut list = String::from("You could weigh these features as well:");
        for (n, f) in h.alternative_features.iter().enumerate() {
            let _ = write!(list, "\n{}. {f}", n + 1);
        }
        let turn = SystemTurn {
            messages: vec![
                h.hypothesis.clone(),
                list,
                "Does this describe how you judged the trajectories? Please reflect on the hypothesis and the other features, and tell me which ones matter to you.".into(),
            ],
            attachment: None,
            expects: Expects::FreeText,
        };
        s.pending_hypothesis = Some(h);
        s.state = DialogueState::AwaitReflection;
        Ok(turn)
    }

    fn on_reflection(&self, s: &mut DialogueSession, text: &str) -> SystemTurn {
        let h = s.pending_hypothesis.take().unwrap_or(Hypothesis { hypothesis: String::new(), alternative_features: Vec::new() });
        s.reflection = Some(ReflectionRecord {
            hypothesis: h.hypothesis,
            alternative_features: h.alternative_features,
            user_reflection: text.trim().to_string(),
        });
        s.state = DialogueState::ClarifyDecision;
        SystemTurn {
            messages: vec!["Would you like to go through the same trajectories again and update your explanations? (yes/no)".into()],
            attachment: None,
            expects: Expects::YesNo,
        }
    }

    fn on_clarify_decision(&self, s: &mut DialogueSession, text: &str) -> Result<SystemTurn, DialogueError> {
        let Some(yes) = parse_yes_no(text) else {
            if s.reprompts >= s.config.max_reprompts {
                return Err(DialogueError::UnparsableLabel);
            }
            s.reprompts += 1;
            return Ok(SystemTurn {
                messages: vec!["Please answer yes or no.".into()],
                attachment: None,
                expects: Expects::YesNo,
            });
        };
        s.reprompts = 0;
        if yes && s.clarify_passes < s.config.max_clarify_passes {
            s.clarify_passes += 1;
            s.state = DialogueState::Clarify { i: 0, pass: s.clarify_passes };
            return Ok(self.assessment_turn(s, 0, Some(s.clarify_passes)));
        }
        let mut turn = self.enter_stage3(s)?;
        if yes {
            turn.messages.insert(0, "We have reached the limit of review passes for this session, so let's move on.".into());
        }
        Ok(turn)
    }

    fn enter_stage3(&self, s: &mut DialogueSession) -> Result<SystemTurn, DialogueError> {
        let state = UncertaintyLoop::new(s.uncertainty_subset_ids.clone(), s.config.epsilon, s.config.max_uncertainty_rounds)?;
        s.uncertainty = Some(state);
        s.state = DialogueState::Stage3 { round: 0 };
        let mut turn = self.next_uncertainty_turn(s)?;
        if s.state != DialogueState::Done {
            turn.messages.insert(0, "Now I will show you trajectories that I am unsure how you would judge.".into());
        }
        Ok(turn)
    }

    fn next_uncertainty_turn(&self, s: &mut DialogueSession) -> Result<SystemTurn, DialogueError> {
        let ctx = s.context_so_far();
        let state = s.uncertainty.as_ref().expect("stage 3 has loop state");
        match state.next_query(&ctx, self.pool, self.llm)? {
            Some((id, _)) => {
                s.state = DialogueState::Stage3 { round: state.rounds };
                s.pending_query = Some(id.clone());
                Ok(SystemTurn { messages: vec![Self::question(s)], attachment: Some(id), expects: Expects::FreeText })
            }
            None => {
                s.state = DialogueState::Done;
                s.pending_query = None;
                Ok(SystemTurn {
                    messages: vec!["Thank you! Your feedback is complete and your reward model is ready.".into()],
                    attachment: None,
                    expects: Expects::None,
                })
            }
        }
    }

    fn on_uncertainty_answer(&self, s: &mut DialogueSession, text: &str) -> Result<SystemTurn, DialogueError> {
        let (pos, neg) = Self::words_of(s);
        let id = s.pending_query.clone().ok_or_else(|| DialogueError::UnexpectedState("stage3".into()))?;
        let Ok((label, explanation)) = parse_user_label(text, &pos, &neg) else {
            return self.reprompt(s, Some(id));
        };
        s.reprompts = 0;
        let traj = self.pool.get(&id).ok_or_else(|| DialogueError::UnexpectedState(format!("trajectory {id} missing from pool")))?;
        s.records.push(FeedbackRecord {
            trajectory_id: id.clone(),
            ascii_text: encode_ascii(traj, &Legend::default())?.text,
            user_label: label,
            user_explanation: explanation,
            stage: Stage::Uncertainty,
        });
        if let Some(state) = s.uncertainty.as_mut() {
            state.record_answer(&id);
        }
        self.next_uncertainty_turn(s)
    }
}

/// The finished reward-model context.
pub fn finalize(session: &DialogueSession) -> Result<RewardModelContext, DialogueError> {
    if session.state != DialogueState::Done {
        return Err(DialogueError::StageIncomplete(session.state.name().into()));
    }
    let ctx = session.context_so_far();
    ctx.validate().map_err(DialogueError::Reward)?;
    Ok(ctx)
}

/// Runs a whole session from scripted user answers; returns the final session.
pub fn run_script(
    dialogue: &Dialogue<'_>,
    session_id: &str,
    config: SessionConfig,
    answers: &[String],
) -> Result<(DialogueSession, Vec<SystemTurn>), DialogueError> {
    let (mut session, turn) = dialogue.start_session(session_id, config)?;
    let mut turns = vec![turn];
    for a in answers {
        if session.state == DialogueState::Done {
            break;
        }
        let (next, turn) = dialogue.submit(&session, a)?;
        session = next;
        turns.push(turn);
    }
    if session.state != DialogueState::Done {
        return Err(DialogueError::StageIncomplete(format!("script ended in state {}", session.state.name())));
    }
    Ok((session, turns))
}

/// Answers in a script file: one answer per non-empty line; `#` starts a comment line.
pub fn parse_script(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

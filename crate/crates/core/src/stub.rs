//! Deterministic offline language model.
//!
//! [`RuleAwareStub`] reads the prompts built by [`crate::reward`] and
//! [`crate::dialogue`], finds the catalog features consistent with the
//! labelled examples, and answers with calibrated probabilities on the answer
//! token. Among consistent features it prefers those the user's reflection
//! names, then those named in explanations, then catalog order. It never sees
//! ground truth; it only reproduces what the context supports.

use crate::dialogue::{LABELS_PREFIX, SECTION_HYPOTHESIS};
use crate::error::LlmError;
use crate::llm::{Completion, LanguageModel, LlmRequest};
use crate::reward::{
    EXAMPLE_HEADER, EXPLANATION_PREFIX, LABEL_PREFIX, REFLECTION_PREFIX, SECTION_FORMAT, SECTION_REASONING, SECTION_TARGET,
};

/// Probability on the chosen word when every consistent feature agrees.
pub const AGREE_PROB: f64 = 0.95;
/// Probability on the chosen word when consistent features disagree.
pub const SPLIT_PROB: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Grid,
    MoralMachine,
}

/// A binary feature of an encoded item.
pub struct Feature {
    pub name: &'static str,
    pub description: &'static str,
    pub keywords: &'static [&'static str],
    pub eval: fn(&str) -> bool,
}

const MAIN_APPLE: &str = "Main agent collected an apple at ";
const MAIN_GARBAGE: &str = "Main agent collected garbage at ";
const MAIN_LEFT: &str = "Main agent left the quadrant";

fn collects_apples(t: &str) -> bool {
    t.contains(MAIN_APPLE)
}

fn collects_garbage(t: &str) -> bool {
    t.contains(MAIN_GARBAGE)
}

fn parse_position(s: &str) -> Option<(usize, usize)> {
    let inner = s.strip_prefix('[')?.split(']').next()?;
    let mut it = inner.split(',').map(|p| p.trim().parse::<usize>());
    Some((it.next()?.ok()?, it.next()?.ok()?))
}

// Main agent owns the upper-left quadrant.
fn no_stealing(t: &str) -> bool {
    t.match_indices(MAIN_APPLE)
        .filter_map(|(i, _)| parse_position(&t[i + MAIN_APPLE.len()..]))
        .all(|(x, y)| x < 3 && y < 3)
}

fn garbage_before_apple(t: &str) -> bool {
    match (t.find(MAIN_GARBAGE), t.find(MAIN_APPLE)) {
        (_, None) => true,
        (Some(g), Some(a)) => g < a,
        (None, Some(_)) => false,
    }
}

fn stays_home(t: &str) -> bool {
    !t.contains(MAIN_LEFT)
}

pub const GRID_FEATURES: &[Feature] = &[
    Feature {
        name: "collects_apples",
        description: "Whether the main agent collects any apples.",
        keywords: &["apple", "harvest", "productive"],
        eval: collects_apples,
    },
    Feature {
        name: "collects_garbage",
        description: "Whether the main agent picks up garbage.",
        keywords: &["garbage", "trash", "clean"],
        eval: collects_garbage,
    },
    Feature {
        name: "no_stealing",
        description: "Whether the main agent only takes apples from its own orchard.",
        keywords: &["steal", "belong", "someone else", "other agents' apples"],
        eval: no_stealing,
    },
    Feature {
        name: "garbage_before_apple",
        description: "Whether the main agent clears garbage before it takes an apple.",
        keywords: &["before", "first"],
        eval: garbage_before_apple,
    },
    Feature {
        name: "stays_home",
        description: "Whether the main agent stays inside its own orchard.",
        keywords: &["own orchard", "own quadrant", "stays", "leave", "left", "boundar", "enter"],
        eval: stays_home,
    },
];

struct Side {
    deaths: u32,
    barrier: bool,
    // 0 = crossing against red, 1 = no signal or passengers, 2 = crossing on green
    lawfulness: u8,
}

fn scenario_sides(t: &str) -> Option<(Side, Side)> {
    let stay_at = t.find("If the car continues straight ahead, ")?;
    let swerve_at = t.find("If the car swerves, ")?;
    let (a, b) = if stay_at < swerve_at {
        (&t[stay_at..swerve_at], &t[swerve_at..])
    } else {
        (&t[stay_at..], &t[swerve_at..stay_at])
    };
    Some((side(a), side(b)))
}

fn side(t: &str) -> Side {
    let deaths = t
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("- "))
        .map(|b| b.split_whitespace().next().and_then(|w| w.parse::<u32>().ok()).unwrap_or(1))
        .sum();
    let lawfulness = if t.contains("against a red") {
        0
    } else if t.contains("green walk") {
        2
    } else {
        1
    };
    Side { deaths, barrier: t.contains("barrier"), lawfulness }
}

// Positive means the car should stay.
fn fewer_deaths(t: &str) -> bool {
    scenario_sides(t).is_some_and(|(stay, swerve)| stay.deaths <= swerve.deaths)
}

fn spare_lawful(t: &str) -> bool {
    scenario_sides(t).is_some_and(|(stay, swerve)| stay.lawfulness <= swerve.lawfulness)
}

fn spare_passengers(t: &str) -> bool {
    scenario_sides(t).is_some_and(|(stay, _)| !stay.barrier)
}

pub const MORAL_MACHINE_FEATURES: &[Feature] = &[
    Feature {
        name: "fewer_deaths",
        description: "Whether the choice kills fewer characters.",
        keywords: &["fewer", "more lives", "number", "count"],
        eval: fewer_deaths,
    },
    Feature {
        name: "spare_lawful",
        description: "Whether the choice spares pedestrians who obey the signal.",
        keywords: &["law", "signal", "red", "legal"],
        eval: spare_lawful,
    },
    Feature {
        name: "spare_passengers",
        description: "Whether the choice spares the passengers of the car.",
        keywords: &["passenger", "barrier", "inside the car"],
        eval: spare_passengers,
    },
];

pub fn features(domain: Domain) -> &'static [Feature] {
    match domain {
        Domain::Grid => GRID_FEATURES,
        Domain::MoralMachine => MORAL_MACHINE_FEATURES,
    }
}

/// A labelled example recovered from prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExample {
    pub text: String,
    pub label_word: String,
    pub explanation: String,
}

/// The parts of a prompt the stub reasons over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub examples: Vec<ParsedExample>,
    pub reflection: Option<String>,
    pub target: Option<String>,
    pub pos_word: String,
    pub neg_word: String,
}

fn parse_examples(text: &str) -> (Vec<ParsedExample>, Option<String>) {
    let mut examples = Vec::new();
    let mut reflection = None;
    let mut current: Option<ParsedExample> = None;
    for line in text.lines() {
        if line.starts_with(EXAMPLE_HEADER) {
            examples.extend(current.take());
            current = Some(ParsedExample { text: String::new(), label_word: String::new(), explanation: String::new() });
        } else if line.starts_with("## ") {
            examples.extend(current.take());
            if line.starts_with(SECTION_TARGET) {
                break;
            }
        } else if let Some(r) = line.strip_prefix(REFLECTION_PREFIX) {
            reflection = Some(r.trim().to_string());
        } else if let Some(ex) = current.as_mut() {
            if let Some(w) = line.strip_prefix(LABEL_PREFIX) {
                ex.label_word = w.trim().to_lowercase();
            } else if let Some(e) = line.strip_prefix(EXPLANATION_PREFIX) {
                ex.explanation = e.trim().to_string();
            } else if ex.label_word.is_empty() {
                ex.text.push_str(line);
                ex.text.push('\n');
            }
        }
    }
    examples.extend(current);
    (examples, reflection)
}

fn backticked(text: &str) -> Vec<String> {
    text.split('`').skip(1).step_by(2).map(str::to_string).collect()
}

/// Recovers examples, target and answer words from a reward or hypothesis prompt.
pub fn parse_prompt(user_text: &str) -> Option<ParsedPrompt> {
    let (examples, reflection) = parse_examples(user_text);
    if user_text.contains(SECTION_HYPOTHESIS) {
        let line = user_text.lines().find_map(|l| l.strip_prefix(LABELS_PREFIX))?;
        let words = backticked(line);
        return Some(ParsedPrompt {
            examples,
            reflection,
            target: None,
            pos_word: words.first()?.to_lowercase(),
            neg_word: words.get(1)?.to_lowercase(),
        });
    }
    let target_at = user_text.find(SECTION_TARGET)? + SECTION_TARGET.len();
    let target_end = user_text[target_at..].find(SECTION_REASONING).map_or(user_text.len(), |i| target_at + i);
    let format_at = user_text.find(SECTION_FORMAT)?;
    let words: Vec<String> = backticked(&user_text[format_at..])
        .into_iter()
        .filter_map(|w| w.strip_prefix("ANSWER:").map(|s| s.trim().to_lowercase()))
        .collect();
    Some(ParsedPrompt {
        examples,
        reflection,
        target: Some(user_text[target_at..target_end].trim().to_string()),
        pos_word: words.first()?.clone(),
        neg_word: words.get(1)?.clone(),
    })
}

/// A feature with a polarity: `inverted` flips which value is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub index: usize,
    pub inverted: bool,
}

impl Candidate {
    pub fn predict(&self, domain: Domain, text: &str) -> u8 {
        u8::from((features(domain)[self.index].eval)(text) != self.inverted)
    }
}

pub fn detect_domain(p: &ParsedPrompt) -> Domain {
    let probe = p.target.as_deref().or(p.examples.first().map(|e| e.text.as_str())).unwrap_or("");
    if probe.contains("self-driving car") {
        Domain::MoralMachine
    } else {
        Domain::Grid
    }
}

fn mentions(text: &str, f: &Feature) -> usize {
    let lower = text.to_lowercase();
    f.keywords.iter().filter(|k| lower.contains(*k)).count()
}

/// Candidates consistent with every example, most preferred first.
pub fn ranked_candidates(p: &ParsedPrompt, domain: Domain) -> Vec<Candidate> {
    let catalog = features(domain);
    let label = |e: &ParsedExample| u8::from(e.label_word == p.pos_word);
    let mut out: Vec<(usize, Candidate)> = Vec::new();
    for (index, f) in catalog.iter().enumerate() {
        for inverted in [false, true] {
            let c = Candidate { index, inverted };
            if p.examples.iter().all(|e| c.predict(domain, &e.text) == label(e)) {
                let reflected = p.reflection.as_deref().map_or(0, |r| mentions(r, f));
                let explained: usize = p.examples.iter().map(|e| mentions(&e.explanation, f)).sum();
                out.push((reflected * 1000 + explained, c));
            }
        }
    }
    // Stable sort keeps catalog order among equal scores.
    out.sort_by_key(|(score, _)| std::cmp::Reverse(*score));
    out.into_iter().map(|(_, c)| c).collect()
}

/// Offline model that answers reward and hypothesis prompts from the examples they contain.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleAwareStub;

impl RuleAwareStub {
    fn classify(&self, p: &ParsedPrompt) -> Completion {
        let domain = detect_domain(p);
        let target = p.target.as_deref().unwrap_or("");
        let ranked = ranked_candidates(p, domain);
        let (label, prob, reason) = match ranked.first() {
            Some(best) => {
                let label = best.predict(domain, target);
                let agree = ranked.iter().all(|c| c.predict(domain, target) == label);
                let f = &features(domain)[best.index];
                let polarity = if best.inverted { "absent" } else { "present" };
                let reason = format!(
                    "The labelled examples fit the rule that `{}` matters, with the positive label when it is {polarity}.",
                    f.name
                );
                (label, if agree { AGREE_PROB } else { SPLIT_PROB }, reason)
            }
            None => {
                let pos = p.examples.iter().filter(|e| e.label_word == p.pos_word).count();
                let label = u8::from(2 * pos >= p.examples.len());
                (label, 0.5 + 0.05 * f64::from(!p.examples.is_empty()), "No single feature explains every example; following the majority label.".to_string())
            }
        };
        let (word, other) = if label == 1 { (&p.pos_word, &p.neg_word) } else { (&p.neg_word, &p.pos_word) };
        let text = format!("{reason}\nANSWER: {word}");
        Completion::with_answer(text, &[(word.as_str(), prob), (other.as_str(), 1.0 - prob - 0.01)])
    }

    fn hypothesis(&self, p: &ParsedPrompt) -> Completion {
        let domain = detect_domain(p);
        let catalog = features(domain);
        let ranked = ranked_candidates(p, domain);
        let lead = ranked.first().map_or(0, |c| c.index);
        let mut text = format!(
            "Your labels line up with one question: {} That single check separates every `{}` example from every `{}` example so far.\n\
             Other things you may want to consider:\n",
            catalog[lead].description, p.pos_word, p.neg_word
        );
        for (n, f) in catalog.iter().enumerate().filter(|(i, _)| *i != lead).map(|(_, f)| f).take(3).enumerate() {
            text.push_str(&format!("{}. {}\n", n + 1, f.description));
        }
        Completion::text_only(text)
    }
}

impl LanguageModel for RuleAwareStub {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let parsed = parse_prompt(&request.user_text)
            .ok_or_else(|| LlmError::InvalidRequest("prompt has no recognisable task section".into()))?;
        if parsed.target.is_some() {
            Ok(self.classify(&parsed))
        } else {
            Ok(self.hypothesis(&parsed))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_features_read_annotations() {
        let t = "Main agent collected garbage at [1, 1]. \nMain agent left the quadrant (orchard) that it owns. \nMain agent collected an apple at [4, 1]. \n";
        assert!(collects_apples(t));
        assert!(collects_garbage(t));
        assert!(!no_stealing(t));
        assert!(garbage_before_apple(t));
        assert!(!stays_home(t));
        assert!(no_stealing("Main agent collected an apple at [2, 2]. "));
    }

    #[test]
    fn backticks() {
        assert_eq!(backticked("Labels: `good` and `bad`."), vec!["good", "bad"]);
    }
}

//! Trajectory encodings.
//!
//! [`encode_numeric`] produces a `(steps + 1) x 3 x grid x grid` occupancy
//! tensor used for clustering and the supervised baseline. [`encode_ascii`]
//! produces the annotated text format (`irda-ascii/1`) shown to the language
//! model. The text format is part of the reward-model prompt contract: any
//! change to glyphs, spacing or annotation sentences changes every prompt.
//!
//! Text layout of one step block:
//!
//! ```text
//! ----- Step: 1 -----
//! Main agent moved from [0, 0] to [1, 0].
//!  .   M   . | .   G   .
//!  ...three rows, a dash separator row, three rows...
//! ```
//!
//! Cells are right-aligned to width 2 and separated by two spaces, or by
//! `" |"` at the vertical quadrant boundary. Blocks are separated by a row of
//! `=`. Annotation lines end with a single trailing space.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{cell_glyphs, AgentId, Event, GridState, Position, QuadrantId, Trajectory, MAIN_AGENT};
use crate::error::EncodingError;

pub const ASCII_SCHEMA: &str = "irda-ascii/1";

const GRID: usize = 6;
const QUADRANT: usize = 3;
const CHANNELS: usize = 3;
const HORIZONTAL_RULE_LEN: usize = 23;
const STEP_SEPARATOR: &str = "=========================";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Legend {
    pub main: char,
    pub background: char,
    pub apple: char,
    pub garbage: char,
    pub empty: char,
    pub vertical: char,
    pub horizontal: char,
}

impl Default for Legend {
    fn default() -> Self {
        Self {
            main: 'M',
            background: 'B',
            apple: 'A',
            garbage: 'G',
            empty: '.',
            vertical: '|',
            horizontal: '-',
        }
    }
}

impl Legend {
    /// Plain-language description of the glyphs, used in reward-model prompts.
    pub fn describe(&self) -> String {
        format!(
            "\"{}\" is the main agent whose behaviour is being judged, \"{}\" is a background agent, \
             \"{}\" is an apple, \"{}\" is a piece of garbage, \"{}\" is an empty cell, and \"{}\" and \"{}\" \
             mark the boundaries between the four quadrants (orchards). A cell with several items shows \
             one glyph per item, so \"{}{}\" is two apples.",
            self.main, self.background, self.apple, self.garbage, self.empty, self.vertical,
            self.horizontal, self.apple, self.apple
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericEncoding {
    pub steps: usize,
    pub grid_size: usize,
    /// Row-major `[step][channel][y][x]`. Channel 0 counts agents, 1 apples, 2 garbage.
    pub flat: Vec<f64>,
}

impl NumericEncoding {
    pub const CHANNELS: usize = CHANNELS;

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.steps + 1, CHANNELS, self.grid_size, self.grid_size)
    }

    pub fn get(&self, step: usize, channel: usize, x: usize, y: usize) -> f64 {
        let g = self.grid_size;
        self.flat[((step * CHANNELS + channel) * g + y) * g + x]
    }

    pub fn channel_sum(&self, step: usize, channel: usize) -> f64 {
        let g2 = self.grid_size * self.grid_size;
        let start = (step * CHANNELS + channel) * g2;
        self.flat[start..start + g2].iter().sum()
    }
}

pub fn encode_numeric(traj: &Trajectory) -> NumericEncoding {
    let g = traj.config.grid_size;
    let g2 = g * g;
    let mut flat = vec![0.0; traj.states.len() * CHANNELS * g2];
    for (t, state) in traj.states.iter().enumerate() {
        let base = t * CHANNELS * g2;
        for pos in state.agent_positions() {
            flat[base + pos.y * g + pos.x] += 1.0;
        }
        for (pos, n) in &state.apples {
            flat[base + g2 + pos.y * g + pos.x] = *n as f64;
        }
        for (pos, n) in &state.garbage {
            flat[base + 2 * g2 + pos.y * g + pos.x] = *n as f64;
        }
    }
    NumericEncoding {
        steps: traj.states.len() - 1,
        grid_size: g,
        flat,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsciiEncoding {
    pub text: String,
    /// Byte offset of each `----- Step: n -----` header.
    pub per_step_offsets: Vec<usize>,
}

impl AsciiEncoding {
    pub fn step_block(&self, step: usize) -> &str {
        let start = self.per_step_offsets[step];
        let end = self
            .per_step_offsets
            .get(step + 1)
            .copied()
            .unwrap_or(self.text.len());
        &self.text[start..end]
    }
}

fn agent_name(agent: AgentId) -> String {
    if agent.is_main() {
        "Main agent".to_string()
    } else {
        format!("Background agent {}", agent.0)
    }
}

fn owner_phrase(actor: AgentId, owner: AgentId) -> String {
    if actor == owner {
        "that it owns".to_string()
    } else if owner.is_main() {
        "owned by the main agent".to_string()
    } else {
        format!("owned by background agent {}", owner.0)
    }
}

fn event_sentence(event: &Event, before: &GridState) -> String {
    match event {
        Event::Moved { agent, from, to } => {
            format!("{} moved from {from} to {to}. ", agent_name(*agent))
        }
        Event::LeftQuadrant { agent, quadrant } => format!(
            "{} left the quadrant (orchard) {}. ",
            agent_name(*agent),
            owner_phrase(*agent, before.owner_of(*quadrant))
        ),
        Event::EnteredQuadrant { agent, quadrant } => format!(
            "{} entered the quadrant (orchard) {}. ",
            agent_name(*agent),
            owner_phrase(*agent, before.owner_of(*quadrant))
        ),
        Event::CollectedApple { agent, at } => {
            format!("{} collected an apple at {at}. ", agent_name(*agent))
        }
        Event::CollectedGarbage { agent, at } => {
            format!("{} collected garbage at {at}. ", agent_name(*agent))
        }
    }
}

fn initial_annotation(state: &GridState, legend: &Legend) -> Vec<String> {
    let q = quadrant_of(state.main_agent);
    let phrase = owner_phrase(MAIN_AGENT, state.owner_of(q));
    vec![
        format!("The main agent ({}) is in the ", legend.main),
        format!("quadrant (orchard) {phrase}."),
    ]
}

fn quadrant_of(pos: Position) -> QuadrantId {
    QuadrantId(u8::from(pos.x >= QUADRANT) + 2 * u8::from(pos.y >= QUADRANT))
}

fn write_row(out: &mut String, cells: &[String], legend: &Legend) {
    for (x, cell) in cells.iter().enumerate() {
        if x == QUADRANT {
            out.push(' ');
            out.push(legend.vertical);
        } else if x > 0 {
            out.push_str("  ");
        }
        let _ = write!(out, "{cell:>2}");
    }
    out.push('\n');
}

fn write_block(
    out: &mut String,
    offsets: &mut Vec<usize>,
    step: usize,
    annotations: &[String],
    grid: &[Vec<String>],
    legend: &Legend,
) {
    if !offsets.is_empty() {
        out.push_str(STEP_SEPARATOR);
        out.push('\n');
    }
    offsets.push(out.len());
    let _ = writeln!(out, "----- Step: {step} -----");
    for line in annotations {
        out.push_str(line);
        out.push('\n');
    }
    for (y, row) in grid.iter().enumerate() {
        if y == QUADRANT {
            out.extend(std::iter::repeat_n(legend.horizontal, HORIZONTAL_RULE_LEN));
            out.push('\n');
        }
        write_row(out, row, legend);
    }
}

fn state_cells(state: &GridState, legend: &Legend) -> Vec<Vec<String>> {
    (0..GRID)
        .map(|y| (0..GRID).map(|x| cell_glyphs(state, Position::new(x, y), legend)).collect())
        .collect()
}

/// Annotation lines for step `t` of a trajectory.
pub fn step_annotations(traj: &Trajectory, t: usize, legend: &Legend) -> Vec<String> {
    if t == 0 {
        initial_annotation(&traj.states[0], legend)
    } else {
        traj.events[t - 1]
            .iter()
            .map(|e| event_sentence(e, &traj.states[t - 1]))
            .collect()
    }
}

pub fn encode_ascii(traj: &Trajectory, legend: &Legend) -> Result<AsciiEncoding, EncodingError> {
    if traj.config.grid_size != GRID || traj.config.quadrant_size != QUADRANT {
        return Err(EncodingError::UnsupportedLayout {
            grid_size: traj.config.grid_size,
        });
    }
    let mut text = String::new();
    let mut offsets = Vec::with_capacity(traj.states.len());
    for (t, state) in traj.states.iter().enumerate() {
        let annotations = step_annotations(traj, t, legend);
        write_block(&mut text, &mut offsets, state.step_index, &annotations, &state_cells(state, legend), legend);
    }
    Ok(AsciiEncoding {
        text,
        per_step_offsets: offsets,
    })
}

/// One step recovered from the text format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedStep {
    pub step: usize,
    pub annotations: Vec<String>,
    pub main_agent: Option<Position>,
    /// Background agent positions in row-major order (identities are not encoded).
    pub background_agents: Vec<Position>,
    pub apples: BTreeMap<Position, u8>,
    pub garbage: BTreeMap<Position, u8>,
}

impl ParsedStep {
    /// Projection of a full state onto what the text format carries.
    pub fn from_state(state: &GridState, annotations: Vec<String>) -> Self {
        let mut background_agents: Vec<Position> =
            state.background_agents.iter().map(|a| a.position).collect();
        background_agents.sort();
        Self {
            step: state.step_index,
            annotations,
            main_agent: Some(state.main_agent),
            background_agents,
            apples: state.apples.clone(),
            garbage: state.garbage.clone(),
        }
    }

    fn cells(&self, legend: &Legend) -> Vec<Vec<String>> {
        (0..GRID)
            .map(|y| {
                (0..GRID)
                    .map(|x| {
                        let pos = Position::new(x, y);
                        let mut s = String::new();
                        if self.main_agent == Some(pos) {
                            s.push(legend.main);
                        }
                        for b in &self.background_agents {
                            if *b == pos {
                                s.push(legend.background);
                            }
                        }
                        s.extend(std::iter::repeat_n(legend.apple, self.apples.get(&pos).copied().unwrap_or(0) as usize));
                        s.extend(std::iter::repeat_n(legend.garbage, self.garbage.get(&pos).copied().unwrap_or(0) as usize));
                        if s.is_empty() {
                            s.push(legend.empty);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }
}

/// Re-renders parsed steps; `render_parsed(parse_ascii(t)) == t` for encoder output.
pub fn render_parsed(steps: &[ParsedStep], legend: &Legend) -> String {
    let mut text = String::new();
    let mut offsets = Vec::new();
    for s in steps {
        write_block(&mut text, &mut offsets, s.step, &s.annotations, &s.cells(legend), legend);
    }
    text
}

fn parse_error(line: usize, message: impl Into<String>) -> EncodingError {
    EncodingError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line: &str) -> Option<usize> {
    line.strip_prefix("----- Step: ")?
        .strip_suffix(" -----")?
        .parse()
        .ok()
}

/// Cell tokens of a grid row. Wide cells may touch the vertical boundary, so
/// the row is split on the boundary glyph before splitting on whitespace.
fn row_tokens<'a>(line: &'a str, legend: &Legend) -> Option<Vec<&'a str>> {
    let (left, right) = line.split_once(legend.vertical)?;
    let l: Vec<&str> = left.split_whitespace().collect();
    let r: Vec<&str> = right.split_whitespace().collect();
    (l.len() == QUADRANT && r.len() == GRID - QUADRANT).then(|| l.into_iter().chain(r).collect())
}

fn is_grid_row(line: &str, legend: &Legend) -> bool {
    row_tokens(line, legend).is_some()
}

fn parse_row(
    line_no: usize,
    line: &str,
    y: usize,
    legend: &Legend,
    step: &mut ParsedStep,
) -> Result<(), EncodingError> {
    let cells = row_tokens(line, legend).ok_or_else(|| parse_error(line_no, format!("malformed grid row `{line}`")))?;
    for (x, token) in cells.into_iter().enumerate() {
        let pos = Position::new(x, y);
        if token.chars().eq([legend.empty]) {
            continue;
        }
        for c in token.chars() {
            if c == legend.main {
                if step.main_agent.replace(pos).is_some() {
                    return Err(parse_error(line_no, "more than one main agent"));
                }
            } else if c == legend.background {
                step.background_agents.push(pos);
            } else if c == legend.apple {
                *step.apples.entry(pos).or_insert(0) += 1;
            } else if c == legend.garbage {
                *step.garbage.entry(pos).or_insert(0) += 1;
            } else {
                return Err(parse_error(line_no, format!("unknown glyph `{c}` in cell `{token}`")));
            }
        }
    }
    Ok(())
}

/// Recovers agent positions and item counts (plus raw annotation lines) per step.
pub fn parse_ascii(text: &str, legend: &Legend) -> Result<Vec<ParsedStep>, EncodingError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut steps = Vec::new();
    let mut i = 0;
    // Trailing blank lines are tolerated.
    let end = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |p| p + 1);

    while i < end {
        if !steps.is_empty() {
            if lines[i] != STEP_SEPARATOR {
                return Err(parse_error(i + 1, format!("expected step separator, found `{}`", lines[i])));
            }
            i += 1;
        }
        let step_index = lines
            .get(i)
            .filter(|_| i < end)
            .and_then(|l| parse_header(l))
            .ok_or_else(|| parse_error(i + 1, "expected `----- Step: n -----` header"))?;
        i += 1;

        let mut step = ParsedStep {
            step: step_index,
            annotations: Vec::new(),
            main_agent: None,
            background_agents: Vec::new(),
            apples: BTreeMap::new(),
            garbage: BTreeMap::new(),
        };
        while i < end && !is_grid_row(lines[i], legend) {
            step.annotations.push(lines[i].to_string());
            i += 1;
        }
        for y in 0..GRID {
            if y == QUADRANT {
                let rule = lines.get(i).filter(|_| i < end).copied().unwrap_or("");
                if rule.is_empty() || !rule.chars().all(|c| c == legend.horizontal) {
                    return Err(parse_error(i + 1, format!("malformed boundary row `{rule}`")));
                }
                i += 1;
            }
            let line = lines
                .get(i)
                .filter(|_| i < end)
                .ok_or_else(|| parse_error(i + 1, "unexpected end of input inside a grid"))?;
            parse_row(i + 1, line, y, legend, &mut step)?;
            i += 1;
        }
        step.background_agents.sort();
        steps.push(step);
    }
    if steps.is_empty() {
        return Err(parse_error(1, "no step blocks found"));
    }
    Ok(steps)
}

use std::collections::BTreeMap;

use irda_core::encoding::{encode_ascii, parse_ascii, render_parsed, Legend};
use irda_core::env::{AgentId, BackgroundAgent, EnvConfig, Event, GridState, Policy, Position, Trajectory, MAIN_AGENT};
use irda_core::moral_machine::{render_text, CharacterType, CrossingSignal, MoralMachineScenario, Outcome};

const ASCII_GOLDEN: &str = include_str!("fixtures/ascii_two_step.txt");
const MM_GOLDEN: &str = include_str!("fixtures/mm_scenario.txt");

fn items(cells: &[(usize, usize, u8)]) -> BTreeMap<Position, u8> {
    cells.iter().map(|(x, y, n)| (Position::new(*x, *y), *n)).collect()
}

fn two_step_fixture() -> Trajectory {
    let agent = |x, y| BackgroundAgent { position: Position::new(x, y), mobile: false };
    let s0 = GridState {
        step_index: 0,
        main_agent: Position::new(0, 0),
        background_agents: [agent(5, 2), agent(0, 4), agent(3, 4)],
        apples: items(&[(0, 1, 1), (4, 2, 2), (2, 4, 1), (0, 5, 1), (3, 5, 1), (4, 5, 1)]),
        garbage: items(&[(4, 0, 1), (3, 1, 1)]),
        ownership: [MAIN_AGENT, AgentId(1), AgentId(2), AgentId(3)],
    };
    let s1 = GridState { step_index: 1, main_agent: Position::new(1, 0), ..s0.clone() };
    Trajectory {
        id: "fixture".into(),
        seed: 0,
        policy: Policy::UniformRandom,
        config: EnvConfig { episode_length: 1, n_apples: 7, n_garbage: 2, ..EnvConfig::default() },
        states: vec![s0, s1],
        events: vec![vec![Event::Moved { agent: MAIN_AGENT, from: Position::new(0, 0), to: Position::new(1, 0) }]],
    }
}

#[test]
fn ascii_two_step_fixture_is_byte_exact() {
    let enc = encode_ascii(&two_step_fixture(), &Legend::default()).unwrap();
    assert_eq!(enc.text, ASCII_GOLDEN);
}

#[test]
fn ascii_golden_parses_back_to_itself() {
    let legend = Legend::default();
    let parsed = parse_ascii(ASCII_GOLDEN, &legend).unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[1].main_agent, Some(Position::new(1, 0)));
    assert_eq!(render_parsed(&parsed, &legend), ASCII_GOLDEN);
}

fn outcome(chars: &[(CharacterType, u8)], signal: CrossingSignal, intervention: u8) -> Outcome {
    let mut counts = [0u8; 20];
    for (c, n) in chars {
        counts[*c as usize] = *n;
    }
    let n: u8 = counts.iter().sum();
    Outcome {
        intervention,
        ped_ped: 1,
        barrier: 0,
        crossing_signal: signal,
        character_counts: counts,
        number_of_characters: n,
        diff_number_of_characters: 0,
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[test]
fn moral_machine_text_matches_golden() {
    let scenario = MoralMachineScenario {
        id: "fixture".into(),
        stay: outcome(&[(CharacterType::Girl, 4), (CharacterType::FemaleDoctor, 1)], CrossingSignal::Red, 0),
        swerve: outcome(&[(CharacterType::Boy, 4), (CharacterType::MaleDoctor, 1)], CrossingSignal::Green, 1),
    };
    scenario.validate().unwrap();
    let text = render_text(&scenario);
    assert_eq!(normalize(&text), normalize(MM_GOLDEN));
    for bullet in ["    - 4 girls", "    - A female doctor", "    - 4 boys", "    - A male doctor"] {
        assert!(text.lines().any(|l| l == bullet), "missing `{bullet}`");
        assert!(MM_GOLDEN.lines().any(|l| l == bullet));
    }
}

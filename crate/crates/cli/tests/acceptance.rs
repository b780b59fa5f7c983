//! Acceptance suite: one line per criterion, nonzero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use irda_cli::commands::{evaluate, EvalInput, Item, GROUP_BASELINE, GROUP_FULL};
use irda_core::dialogue::{finalize, Dialogue, FixedClock, SessionConfig};
use irda_core::encoding::{encode_ascii, encode_numeric, parse_ascii, render_parsed, Legend};
use irda_core::env::{
    generate_pool, rollout, AgentId, BackgroundAgent, EnvConfig, Event, GridState, Policy, Position, Trajectory, MAIN_AGENT,
};
use irda_core::llm::{Completion, LanguageModel, LlmRequest};
use irda_core::metrics::{
    average_ranks, balanced_accuracy, bootstrap_ci, fleiss_kappa, jaccard_mean, wilcoxon_signed_rank, LabelMatrix,
};
use irda_core::moral_machine::{
    generate_scenarios, render_text, standardize, vectorize, CharacterType, CrossingSignal, MoralMachineScenario, Outcome,
};
use irda_core::reward::classify;
use irda_core::sampling::{
    confidence_from_probs, diversity_sample, diversity_sample_points, kmeans, squared_distance, uncertainty_loop, KmeansConfig, UncertaintyLoop,
};
use irda_core::stub::RuleAwareStub;
use irda_core::supervised::{learning_curve, train_mlp, Adam, CurveMode, CurveSettings, LabeledSet, Mlp, MlpConfig};
use irda_core::synthetic::SyntheticUser;
use irda_core::{DialogueState, LlmError, RewardModelContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ASCII_GOLDEN: &str = include_str!("../../core/tests/fixtures/ascii_two_step.txt");
const MM_GOLDEN: &str = include_str!("../../core/tests/fixtures/mm_scenario.txt");

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);
type LabelRule = (&'static str, fn(f64, f64) -> bool);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:.2?}, limit {limit:?}"))?;
    Ok(t)
}

// ---------------------------------------------------------------- ASCII

fn two_step_fixture() -> Trajectory {
    let agent = |x, y| BackgroundAgent { position: Position::new(x, y), mobile: false };
    let items = |cells: &[(usize, usize, u8)]| cells.iter().map(|(x, y, n)| (Position::new(*x, *y), *n)).collect();
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

fn ascii_golden() -> Verdict {
    let start = Instant::now();
    let legend = Legend::default();
    let enc = encode_ascii(&two_step_fixture(), &legend).map_err(|e| e.to_string())?;
    check(enc.text == ASCII_GOLDEN, || "fixture encoding differs from the golden text".into())?;
    let policies = [Policy::UniformRandom, Policy::StayHome, Policy::GreedyApple];
    for seed in 0..100u64 {
        let t = rollout(&EnvConfig::default(), seed, policies[seed as usize % policies.len()]).map_err(|e| e.to_string())?;
        let text = encode_ascii(&t, &legend).map_err(|e| e.to_string())?.text;
        let parsed = parse_ascii(&text, &legend).map_err(|e| format!("seed {seed}: {e}"))?;
        check(parsed.len() == t.states.len(), || format!("seed {seed}: {} steps parsed", parsed.len()))?;
        check(render_parsed(&parsed, &legend) == text, || format!("seed {seed}: parse/encode is not a fixpoint"))?;
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("golden byte-exact, 100/100 fixpoints, {t:.2?}"))
}

// ---------------------------------------------------------------- diversity

/// Points around `k` centres spaced far apart relative to their spread.
fn planted(k: usize, per: usize, seed: u64) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let centres: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..dim).map(|d| if d == c { 50.0 } else { 0.0 } + rng.random_range(-5.0..5.0)).collect())
        .collect();
    let (mut ids, mut pts, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..k * per {
        let c = rng.random_range(0..k);
        // Guarantee every cluster is populated.
        let c = if i < k { i } else { c };
        pts.push(centres[c].iter().map(|v| v + rng.random_range(-1.0..1.0)).collect());
        ids.push(format!("t{i:04}"));
        truth.push(c);
    }
    (ids, pts, truth)
}

fn diversity_oracle() -> Verdict {
    let start = Instant::now();
    let mut summary = Vec::new();
    for k in [2usize, 3, 4] {
        let mut recovered = 0;
        for run in 0..100u64 {
            let seed = run * 31 + k as u64;
            let (ids, pts, truth) = planted(k, 25, seed);
            let chosen = diversity_sample_points(&ids, &pts, k, seed).map_err(|e| e.to_string())?;
            // Brute force over every point, not only cluster members.
            let clusters = kmeans(&pts, k, seed, KmeansConfig::default()).map_err(|e| e.to_string())?;
            for (c, id) in chosen.iter().enumerate() {
                let centroid = &clusters.centroids[c];
                let nearest = (0..pts.len())
                    .min_by(|a, b| {
                        squared_distance(&pts[*a], centroid).total_cmp(&squared_distance(&pts[*b], centroid)).then(ids[*a].cmp(&ids[*b]))
                    })
                    .expect("non-empty");
                check(&ids[nearest] == id, || format!("k={k} run={run}: {id} is not the point nearest centroid {c}"))?;
            }
            let planted_hit: BTreeSet<usize> =
                chosen.iter().map(|id| truth[ids.iter().position(|x| x == id).expect("known id")]).collect();
            recovered += usize::from(planted_hit.len() == k);
        }
        check(recovered >= 95, || format!("k={k}: only {recovered}/100 runs covered every planted cluster"))?;
        summary.push(format!("k={k} {recovered}/100"));
    }
    // The pool entry point samples the numeric encoding of each trajectory.
    let pool = generate_pool(&EnvConfig::default(), 40, 2).map_err(|e| e.to_string())?;
    let ids: Vec<String> = pool.ids().map(str::to_string).collect();
    let pts: Vec<Vec<f64>> = pool.trajectories.iter().map(|t| encode_numeric(t).flat).collect();
    for k in [2usize, 3, 4] {
        let via_pool = diversity_sample(&pool, k, 5).map_err(|e| e.to_string())?;
        let via_points = diversity_sample_points(&ids, &pts, k, 5).map_err(|e| e.to_string())?;
        check(via_pool == via_points, || format!("k={k}: pool sampling disagrees with point sampling"))?;
    }
    let t = within(start, Duration::from_secs(30))?;
    Ok(format!("{}, {t:.2?}", summary.join(", ")))
}

// ---------------------------------------------------------------- uncertainty

const MARK: &str = "scripted-answer-marker";

/// Confidence grows with the number of recorded answers visible in the prompt.
struct Rising {
    base: f64,
    step: f64,
}

impl LanguageModel for Rising {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        let n = request.user_text.matches(MARK).count() as f64;
        let c = (self.base + self.step * n).min(0.98);
        let pos = (1.0 + c) / 2.0 - 0.005;
        let neg = pos - c;
        Ok(Completion::with_answer("ANSWER: respectful", &[("respectful", pos), ("disrespectful", neg)]))
    }
}

fn uncertainty_mechanics() -> Verdict {
    let start = Instant::now();
    let c = confidence_from_probs(0.99, 0.01).map_err(|e| e.to_string())?;
    check(c.value == 0.98, || format!("confidence(0.99, 0.01) = {}", c.value))?;

    let pool = generate_pool(&EnvConfig::default(), 30, 1).map_err(|e| e.to_string())?;
    let ids: Vec<String> = pool.ids().map(str::to_string).collect();
    let epsilon = 0.8;
    let answer = |_: &Trajectory| Ok::<_, String>((1, MARK.to_string()));
    let ctx0 = RewardModelContext::grid("respectful", "respectful", "disrespectful");

    // Never confident: the round cap or the subset size must stop the loop.
    let flat = Rising { base: 0.1, step: 0.0 };
    for (subset, max_rounds) in [(5usize, Some(3usize)), (4, Some(10)), (6, None), (3, Some(0))] {
        let mut ctx = ctx0.clone();
        let mut state = UncertaintyLoop::new(ids[..subset].to_vec(), epsilon, max_rounds).map_err(|e| e.to_string())?;
        let out = uncertainty_loop(&mut ctx, &pool, &mut state, &flat, answer).map_err(|e| e.to_string())?;
        let bound = max_rounds.map_or(subset, |m| m.min(subset));
        check(out.rounds == bound && ctx.feedback.len() == bound, || {
            format!("subset {subset}, cap {max_rounds:?}: {} rounds, bound {bound}", out.rounds)
        })?;
    }

    // Rising confidence: the loop stops once every candidate clears epsilon.
    let rising = Rising { base: 0.2, step: 0.25 };
    let mut ctx = ctx0.clone();
    let mut state = UncertaintyLoop::new(ids[..20].to_vec(), epsilon, None).map_err(|e| e.to_string())?;
    let out = uncertainty_loop(&mut ctx, &pool, &mut state, &rising, answer).map_err(|e| e.to_string())?;
    check(out.rounds < 20, || "loop did not stop early".into())?;
    for id in &state.candidates {
        let t = pool.get(id).expect("pool member");
        let conf = classify(&ctx, t, &rising).map_err(|e| e.to_string())?.confidence.value;
        check(conf >= epsilon, || format!("{id} left at confidence {conf}"))?;
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("confidence exact, caps respected, rising stub stopped after {} rounds, {t:.2?}", out.rounds))
}

// ---------------------------------------------------------------- end to end

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let pool = generate_pool(&EnvConfig::default(), 100, 7).map_err(|e| e.to_string())?;
    let stub = RuleAwareStub;
    let clock = FixedClock(0);
    let dialogue = Dialogue::new(&pool, &stub, &clock);
    let user = SyntheticUser::respectful();
    let (mut session, mut turn) = dialogue.start_session("acceptance", SessionConfig::default()).map_err(|e| e.to_string())?;
    while session.state != DialogueState::Done {
        let reply = user.respond(&session, &turn, &pool);
        (session, turn) = dialogue.submit(&session, &reply).map_err(|e| e.to_string())?;
    }
    let ctx = finalize(&session).map_err(|e| e.to_string())?;
    let items: Vec<Item> = pool
        .trajectories
        .iter()
        .map(|t| Ok(Item { id: t.id.clone(), text: encode_ascii(t, &Legend::default())?.text, features: encode_numeric(t).flat }))
        .collect::<Result<_, irda_core::EncodingError>>()
        .map_err(|e| e.to_string())?;
    let truth = BTreeMap::from([("*".to_string(), pool.trajectories.iter().map(|t| (t.id.clone(), user.label(t))).collect())]);
    let contexts = vec![("synthetic".to_string(), ctx.clone())];
    let input = EvalInput { contexts: &contexts, items: &items, truth: &truth, n_test: 40, mlp_train: 0, resamples: 1000, seed: 0 };
    let eval = evaluate(&input, &stub).map_err(|e| e.to_string())?;
    let scores = &eval.scores["synthetic"];
    let (full, base) = (scores[GROUP_FULL], scores[GROUP_BASELINE]);
    check(eval.failures == 0, || format!("{} classifications failed", eval.failures))?;
    check(full >= base, || format!("full {full:.3} < baseline {base:.3}"))?;
    check(full >= 0.9, || format!("full {full:.3} < 0.9"))?;
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("{} records, full {full:.3} >= baseline {base:.3}, {t:.2?}", ctx.feedback.len()))
}

// ---------------------------------------------------------------- metrics

fn wilcoxon_enumerated(pairs: &[(f64, f64)]) -> f64 {
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let total = 1u64 << n;
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0..total {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += u64::from(w <= observed + 1e-9);
        ge += u64::from(w >= observed - 1e-9);
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

fn metrics_oracles() -> Verdict {
    let start = Instant::now();
    // Fleiss: 5 items, 3 raters.
    let rows = vec![vec![1, 1, 1], vec![1, 0, 0], vec![0, 0, 0], vec![1, 1, 0], vec![0, 1, 0]];
    let (n, items) = (3.0, 5.0);
    let ones: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| f64::from(*v)).sum()).collect();
    let p_bar = ones.iter().map(|o| (o * (o - 1.0) + (n - o) * (n - o - 1.0)) / (n * (n - 1.0))).sum::<f64>() / items;
    let p1 = ones.iter().sum::<f64>() / (items * n);
    let expected = (p_bar - (p1 * p1 + (1.0 - p1) * (1.0 - p1))) / (1.0 - (p1 * p1 + (1.0 - p1) * (1.0 - p1)));
    let kappa = fleiss_kappa(&LabelMatrix::new(rows).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.value;
    check((kappa - expected).abs() < 1e-12, || format!("kappa {kappa} vs {expected}"))?;

    // Jaccard: {a,b,c}, {b,c,d}, {e}: pairs 2/4, 0, 0.
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let sets = BTreeMap::from([("p1".to_string(), set(&["a", "b", "c"])), ("p2".into(), set(&["b", "c", "d"])), ("p3".into(), set(&["e"]))]);
    let jm = jaccard_mean(&sets).map_err(|e| e.to_string())?.mean;
    check((jm - 0.5 / 3.0).abs() < 1e-12, || format!("jaccard mean {jm}"))?;

    // Balanced accuracy: recall 3/4 on positives, 1/2 on negatives.
    let ba = balanced_accuracy(&[1, 1, 1, 1, 0, 0], &[1, 1, 1, 0, 0, 1]).map_err(|e| e.to_string())?;
    check((ba - 0.625).abs() < 1e-12, || format!("balanced accuracy {ba}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fixtures = 0;
    for _ in 0..300 {
        let n = rng.random_range(1..=12);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (f64::from(rng.random_range(0..6u8)), f64::from(rng.random_range(0..6u8)))).collect();
        if let Ok(r) = wilcoxon_signed_rank(&pairs) {
            let e = wilcoxon_enumerated(&pairs);
            check(r.exact && (r.p_value - e).abs() < 1e-12, || format!("{pairs:?}: p {} vs enumerated {e}", r.p_value))?;
            fixtures += 1;
        }
    }

    let sample: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
    let a = bootstrap_ci(&sample, 10_000, 0.95, 9).map_err(|e| e.to_string())?;
    let b = bootstrap_ci(&sample, 10_000, 0.95, 9).map_err(|e| e.to_string())?;
    check(a == b, || "bootstrap is not seed-deterministic".into())?;
    check(a.contains(a.mean), || format!("CI [{}, {}] misses mean {}", a.lo, a.hi, a.mean))?;
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("closed forms exact, {fixtures} Wilcoxon fixtures enumerated, bootstrap deterministic, {t:.2?}"))
}

// ---------------------------------------------------------------- MLP

fn blobs(n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledSet::default();
    for i in 0..n {
        let label = (i % 2) as u8;
        let c = if label == 1 { 2.0 } else { -2.0 };
        set.inputs.push(vec![c + rng.random_range(-1.0..1.0), c + rng.random_range(-1.0..1.0)]);
        set.labels.push(label);
    }
    set
}

fn mlp_contract() -> Verdict {
    let start = Instant::now();
    let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
    let mut params = vec![0.3, -0.7, 1.5, 0.0];
    let grads = [vec![0.2, -0.1, 0.0, 1.0], vec![-0.3, 0.4, 0.25, -2.0], vec![0.05, 0.0, -0.6, 0.5]];
    let mut adam = Adam::new(4, lr, b1, b2, eps);
    let (mut expected, mut m, mut v) = (params.clone(), vec![0.0; 4], vec![0.0; 4]);
    for (t, g) in grads.iter().enumerate() {
        adam.step(&mut params, g);
        let t = (t + 1) as i32;
        for i in 0..4 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            expected[i] -= lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
            check((params[i] - expected[i]).abs() < 1e-12, || format!("Adam step {t}, param {i}"))?;
        }
    }

    let config = MlpConfig { hidden_dim: 6, seed: 4, ..MlpConfig::new(3) };
    let mut mlp = Mlp::init(&config).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = LabeledSet::new(
        (0..10).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        (0..10).map(|i| (i % 2) as u8).collect(),
    );
    let (_, grad) = mlp.loss_and_grad(&data);
    let h = 1e-5;
    for (i, analytic) in grad.iter().enumerate() {
        let orig = mlp.params[i];
        mlp.params[i] = orig + h;
        let up = mlp.loss(&data);
        mlp.params[i] = orig - h;
        let down = mlp.loss(&data);
        mlp.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
        check(rel < 1e-4, || format!("param {i}: analytic {analytic} numeric {numeric}"))?;
    }

    let data = blobs(200, 3);
    let config = MlpConfig::new(2);
    check(config.hidden_dim == 32 && config.learning_rate == 0.001, || "default config drifted".into())?;
    let model = train_mlp(&data, &config).map_err(|e| e.to_string())?.model;
    let pred = model.predict_all(&data.inputs).map_err(|e| e.to_string())?;
    let acc = pred.iter().zip(&data.labels).filter(|(p, t)| p == t).count() as f64 / data.len() as f64;
    check(acc >= 0.95, || format!("blob accuracy {acc}"))?;
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("Adam exact, gradients match, blob accuracy {acc:.3}, {t:.2?}"))
}

// ---------------------------------------------------------------- individual vs collective

fn participant_data(rule: fn(f64, f64) -> bool, pid: &str, n: usize, rng: &mut ChaCha8Rng) -> LabeledSet {
    let mut set = LabeledSet::default();
    for _ in 0..n {
        let (x1, x2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        set.inputs.push(vec![x1, x2]);
        set.labels.push(u8::from(rule(x1, x2)));
        set.participants.push(pid.to_string());
    }
    set
}

fn individual_vs_collective() -> Verdict {
    let start = Instant::now();
    let rules: [LabelRule; 3] =
        [("A", |x1, _| x1 > 0.0), ("B", |x1, _| x1 < 0.0), ("C", |x1, x2| (x1 > 0.0) ^ (x2 > 0.0))];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut train, mut test) = (BTreeMap::new(), BTreeMap::new());
    for (pid, rule) in rules {
        train.insert(pid.to_string(), participant_data(rule, pid, 30, &mut rng));
        test.insert(pid.to_string(), participant_data(rule, pid, 20, &mut rng));
    }
    let config = MlpConfig { seed: 1, ..MlpConfig::new(2) };
    let run = |mode| {
        let settings = CurveSettings { mode, sample_grid: vec![30], n_resamples: 10_000, level: 0.95, seed: 3 };
        learning_curve(&train, &test, &config, &settings).map(|mut p| p.remove(0)).map_err(|e| e.to_string())
    };
    let individual = run(CurveMode::Individual)?;
    let collective = run(CurveMode::Collective)?;
    for (pid, s) in &individual.scores {
        check(*s > 0.6, || format!("individual model for {pid} scored {s:.3}"))?;
    }
    check(collective.ci_lo <= 0.5 && 0.5 <= collective.ci_hi, || {
        format!("collective mean {:.3}, CI [{:.3}, {:.3}] excludes 0.5", collective.mean, collective.ci_lo, collective.ci_hi)
    })?;
    let t = within(start, Duration::from_secs(120))?;
    let fmt = |s: &BTreeMap<String, f64>| s.iter().map(|(k, v)| format!("{k}={v:.2}")).collect::<Vec<_>>().join(" ");
    Ok(format!(
        "individual {}, collective mean {:.3} CI [{:.3}, {:.3}], {t:.2?}",
        fmt(&individual.scores),
        collective.mean,
        collective.ci_lo,
        collective.ci_hi
    ))
}

// ---------------------------------------------------------------- Moral Machine

fn mm_outcome(chars: &[(CharacterType, u8)], signal: CrossingSignal, intervention: u8) -> Outcome {
    let mut counts = [0u8; 20];
    for (c, n) in chars {
        counts[*c as usize] = *n;
    }
    Outcome {
        intervention,
        ped_ped: 1,
        barrier: 0,
        crossing_signal: signal,
        number_of_characters: counts.iter().sum(),
        character_counts: counts,
        diff_number_of_characters: 0,
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn moral_machine() -> Verdict {
    let start = Instant::now();
    let scenarios = generate_scenarios(1000, 17);
    for s in &scenarios {
        let (a, b) = (vectorize(s), vectorize(&s.swapped()));
        check(a.values().iter().zip(b.values()).all(|(x, y)| *x == -*y), || format!("{} is not antisymmetric", s.id))?;
    }
    let fixture = MoralMachineScenario {
        id: "fixture".into(),
        stay: mm_outcome(&[(CharacterType::Girl, 4), (CharacterType::FemaleDoctor, 1)], CrossingSignal::Red, 0),
        swerve: mm_outcome(&[(CharacterType::Boy, 4), (CharacterType::MaleDoctor, 1)], CrossingSignal::Green, 1),
    };
    fixture.validate().map_err(|e| e.to_string())?;
    check(normalize(&render_text(&fixture)) == normalize(MM_GOLDEN), || "render_text differs from the golden text".into())?;

    let vectors: Vec<_> = scenarios.iter().map(vectorize).collect();
    let (scaled, _) = standardize(&vectors).map_err(|e| e.to_string())?;
    let n = scaled.len() as f64;
    for d in 0..scaled[0].values().len() {
        let col: Vec<f64> = scaled.iter().map(|v| v.values()[d]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // Constant columns stay at zero.
        let ok = mean.abs() < 1e-9 && ((var.sqrt() - 1.0).abs() < 1e-9 || col.iter().all(|x| *x == 0.0));
        check(ok, || format!("dimension {d}: mean {mean}, std {}", var.sqrt()))?;
    }
    Ok(format!("1000/1000 antisymmetric, golden text matches, standardized, {:.2?}", start.elapsed()))
}

// ---------------------------------------------------------------- crash recovery

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(store: &Path) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_irda"))
            .args(["serve", "--llm", "stub", "--addr", "127.0.0.1:0", "--store"])
            .arg(store)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).map_err(|e| e.to_string())?;
        let base = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner `{line}`"))?.to_string();
        Ok(Self { child, base })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

fn crash_recovery() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let http = reqwest::blocking::Client::new();
    let get = |base: &str| -> Result<String, String> {
        let r = http.get(format!("{base}/sessions/crash")).send().map_err(|e| e.to_string())?;
        check(r.status().is_success(), || format!("GET session returned {}", r.status()))?;
        r.text().map_err(|e| e.to_string())
    };
    let post = |base: &str, seq: u64, text: &str| -> Result<u16, String> {
        let r = http
            .post(format!("{base}/sessions/crash/messages"))
            .json(&serde_json::json!({ "seq": seq, "text": text }))
            .send()
            .map_err(|e| e.to_string())?;
        Ok(r.status().as_u16())
    };

    let server = Server::start(dir.path())?;
    let r = http
        .post(format!("{}/sessions", server.base))
        .json(&serde_json::json!({ "session_id": "crash" }))
        .send()
        .map_err(|e| e.to_string())?;
    check(r.status().as_u16() == 201, || format!("create returned {}", r.status()))?;
    for (seq, text) in [(1, "respectful"), (2, "No. I did not like what it did.")] {
        let status = post(&server.base, seq, text)?;
        check(status == 200, || format!("message {seq} returned {status}"))?;
    }
    let before = get(&server.base)?;
    server.kill();

    let server = Server::start(dir.path())?;
    let after = get(&server.base)?;
    check(before == after, || "session state changed across the restart".into())?;
    let status = post(&server.base, 3, "Yes. It seemed fine to me.")?;
    check(status == 200, || format!("message after restart returned {status}"))?;
    server.kill();
    Ok(format!("{} bytes identical after kill and restart, session continues, {:.2?}", before.len(), start.elapsed()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ascii-golden", ascii_golden),
        ("diversity-oracle", diversity_oracle),
        ("uncertainty-mechanics", uncertainty_mechanics),
        ("end-to-end-synthetic-user", end_to_end),
        ("metrics-oracles", metrics_oracles),
        ("mlp-contract", mlp_contract),
        ("individual-vs-collective", individual_vs_collective),
        ("moral-machine", moral_machine),
        ("crash-recovery", crash_recovery),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match std::panic::catch_unwind(run) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

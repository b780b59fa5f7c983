//! Command-line interface.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use irda_core::dialogue::{finalize, parse_script, run_script, Dialogue, SessionConfig, SystemClock};
use irda_core::encoding::{encode_ascii, encode_numeric, Legend};
use irda_core::env::{generate_pool, read_pool, write_pool, EnvConfig, Trajectory, TrajectoryPool};
use irda_core::metrics::{balanced_accuracy, bootstrap_ci, wilcoxon_signed_rank, write_report, ReportRow, DEFAULT_RESAMPLES};
use irda_core::moral_machine::{generate_scenarios, import_csv, read_scenarios, render_text, standardize, vectorize, write_scenarios};
use irda_core::reward::{label_texts, ContextExport};
use irda_core::sampling::diversity_sample;
use irda_core::store::{SessionService, SessionStore};
use irda_core::supervised::{learning_curve, save_model, train_mlp, write_curve, CurveMode, CurveSettings, LabeledSet, MlpConfig};
use irda_core::{LanguageModel, RewardModelContext};
use serde::Serialize;

use crate::api::{router, AppState};
use crate::backend::{build_llm, LlmChoice};
use crate::labels::LabelsFile;

#[derive(Debug, Parser)]
#[command(name = "irda", version, about = "Interactive reward design workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trajectory pools.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Item selection.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Elicitation sessions.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Reward-model contexts.
    #[command(subcommand)]
    Context(ContextCmd),
    /// Apply a context to trajectories or scenarios.
    Label(LabelArgs),
    /// Compare full-context, baseline-context and MLP reward models.
    Evaluate(EvaluateArgs),
    /// Supervised MLP baseline.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Moral Machine scenarios.
    #[command(subcommand)]
    Mm(MmCmd),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Seed of the pool generated when no --pool is given.
pub const DEFAULT_POOL_SEED: u64 = 7;

#[derive(Debug, Args)]
pub struct PoolSource {
    /// Pool file (`irda-pool/1`); generated from --seed when absent.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Seed for the generated pool; also seeds sampling and MLP training.
    #[arg(long, default_value_t = DEFAULT_POOL_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub pool_size: usize,
}

impl PoolSource {
    pub fn load(&self) -> anyhow::Result<TrajectoryPool> {
        match &self.pool {
            Some(path) => read_pool(File::open(path).with_context(|| format!("opening {}", path.display()))?)
                .with_context(|| format!("reading {}", path.display())),
            None => Ok(generate_pool(&EnvConfig::default(), self.pool_size, self.seed)?),
        }
    }
}

#[derive(Debug, Args)]
pub struct LlmArgs {
    #[arg(long, value_enum, default_value_t = LlmChoice::Stub)]
    pub llm: LlmChoice,
    /// Cassette to replay from (`replay`) or record to (`http`).
    #[arg(long)]
    pub cassette: Option<PathBuf>,
}

impl LlmArgs {
    pub fn build(&self) -> anyhow::Result<Arc<dyn LanguageModel>> {
        build_llm(self.llm, self.cassette.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long, default_value_t = irda_core::sampling::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = irda_core::sampling::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Seed for item selection.
    #[arg(long, default_value_t = 0)]
    pub session_seed: u64,
}

impl SessionArgs {
    pub fn config(&self) -> SessionConfig {
        SessionConfig { k: self.k, epsilon: self.epsilon, seed: self.session_seed, ..SessionConfig::default() }
    }
}

#[derive(Debug, Subcommand)]
pub enum PoolCmd {
    /// Generate a seeded pool of trajectories.
    Gen {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SampleCmd {
    /// Pick k varied trajectories (one per k-means cluster).
    Diversity {
        #[command(flatten)]
        pool: PoolSource,
        #[arg(long, default_value_t = irda_core::sampling::DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCmd {
    /// Drive a whole session from a file of answers.
    Run {
        #[arg(long)]
        script: PathBuf,
        #[command(flatten)]
        pool: PoolSource,
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        session: SessionArgs,
        /// Persist the session log in this directory.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value = "scripted")]
        session_id: String,
        /// Where to write the finished context (`irda-context/1`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ContextCmd {
    /// Export the context of a finished stored session.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ItemSource {
    #[command(flatten)]
    pub pool: PoolSource,
    /// Moral Machine scenarios (`irda-mm/1`) instead of trajectories.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub context: PathBuf,
    #[command(flatten)]
    pub items: ItemSource,
    /// Comma-separated item ids; all items when absent.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    /// Positive when the main agent never leaves its own quadrant.
    StaysHome,
}

impl Rule {
    pub fn label(self, t: &Trajectory) -> u8 {
        match self {
            Rule::StaysHome => u8::from(t.main_stays_home()),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// One context per participant; the participant id is the file stem.
    #[arg(long = "context", required = true)]
    pub contexts: Vec<PathBuf>,
    #[command(flatten)]
    pub items: ItemSource,
    /// Ground-truth labels (`irda-labels/1`).
    #[arg(long, conflicts_with = "rule")]
    pub truth: Option<PathBuf>,
    /// Label trajectories with a known rule instead of a truth file.
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
    #[arg(long, default_value_t = 40)]
    pub n_test: usize,
    /// Training items for the MLP; 0 skips it.
    #[arg(long, default_value_t = 30)]
    pub mlp_train: usize,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Tab-separated report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCmd {
    /// Train one participant's MLP on its first n labelled items.
    Train {
        #[command(flatten)]
        items: ItemSource,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        participant: String,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning curves over participants.
    Curve {
        #[command(flatten)]
        items: ItemSource,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Individual)]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5usize, 10, 20, 30])]
        grid: Vec<usize>,
        /// Items per participant reserved for training; the rest are test items.
        #[arg(long, default_value_t = 30)]
        n_train: usize,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Individual,
    Collective,
}

#[derive(Debug, Subcommand)]
pub enum MmCmd {
    /// Generate synthetic scenarios.
    Gen {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a Moral Machine CSV export.
    Import {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub pool: PoolSource,
    #[command(flatten)]
    pub llm: LlmArgs,
    #[command(flatten)]
    pub session: SessionArgs,
    #[arg(long, default_value = "sessions")]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn read_context(path: &Path) -> anyhow::Result<RewardModelContext> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ContextExport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?.context)
}

/// Items to label: id, text shown to the model, numeric features.
pub struct Item {
    pub id: String,
    pub text: String,
    pub features: Vec<f64>,
}

impl ItemSource {
    pub fn load(&self) -> anyhow::Result<(Vec<Item>, Option<TrajectoryPool>)> {
        if let Some(path) = &self.scenarios {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let scenarios = read_scenarios(BufReader::new(file))?;
            let vectors: Vec<_> = scenarios.iter().map(vectorize).collect();
            let (scaled, _) = standardize(&vectors)?;
            let items = scenarios
                .iter()
                .zip(scaled)
                .map(|(s, v)| Item { id: s.id.clone(), text: render_text(s), features: v.values().to_vec() })
                .collect();
            return Ok((items, None));
        }
        let pool = self.pool.load()?;
        let items = pool
            .trajectories
            .iter()
            .map(|t| {
                Ok(Item { id: t.id.clone(), text: encode_ascii(t, &Legend::default())?.text, features: encode_numeric(t).flat })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Ok((items, Some(pool)))
    }
}

#[derive(Debug, Serialize)]
struct LabelLine<'a> {
    id: &'a str,
    label: Option<u8>,
    confidence: Option<f64>,
    pos_prob: Option<f64>,
    neg_prob: Option<f64>,
    error: Option<&'a str>,
}

/// Per-participant scores for one model family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    /// participant → group → balanced accuracy.
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
    pub rows: Vec<ReportRow>,
    pub failures: usize,
}

pub const GROUP_FULL: &str = "irda";
pub const GROUP_BASELINE: &str = "baseline";
pub const GROUP_MLP: &str = "mlp";

pub struct EvalInput<'a> {
    pub contexts: &'a [(String, RewardModelContext)],
    pub items: &'a [Item],
    /// participant → item id → label.
    pub truth: &'a BTreeMap<String, BTreeMap<String, u8>>,
    pub n_test: usize,
    pub mlp_train: usize,
    pub resamples: usize,
    pub seed: u64,
}

/// Scores every participant's full and baseline contexts (and an MLP trained on
/// the same participant's truth labels) on held-out items.
pub fn evaluate(input: &EvalInput<'_>, llm: &dyn LanguageModel) -> anyhow::Result<Evaluation> {
    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut failures = 0;
    for (pid, ctx) in input.contexts {
        let truth = input
            .truth
            .get(pid)
            .or_else(|| input.truth.get("*"))
            .ok_or_else(|| anyhow!("no truth labels for participant `{pid}`"))?;
        let seen: Vec<&str> = ctx.feedback.iter().map(|r| r.trajectory_id.as_str()).collect();
        let labelled: Vec<&Item> = input.items.iter().filter(|i| truth.contains_key(&i.id) && !seen.contains(&i.id.as_str())).collect();
        if labelled.len() < input.n_test {
            bail!("participant `{pid}` has {} unseen labelled items, need {}", labelled.len(), input.n_test);
        }
        let (test, rest) = labelled.split_at(input.n_test);
        let y: Vec<u8> = test.iter().map(|i| truth[&i.id]).collect();
        let targets: Vec<(String, String)> = test.iter().map(|i| (i.id.clone(), i.text.clone())).collect();
        let mut row = BTreeMap::new();
        for (group, c) in [(GROUP_FULL, ctx.clone()), (GROUP_BASELINE, ctx.baseline())] {
            let report = label_texts(&c, &targets, llm);
            failures += report.failures.len();
            // Unanswered items count as wrong: predict the opposite of the truth.
            let pred: Vec<u8> = test
                .iter()
                .zip(&y)
                .map(|(i, t)| report.labels.get(&i.id).map_or(1 - t, |c| c.label))
                .collect();
            row.insert(group.to_string(), balanced_accuracy(&y, &pred)?);
        }
        if input.mlp_train > 0 && rest.len() >= input.mlp_train {
            let train = LabeledSet::new(
                rest[..input.mlp_train].iter().map(|i| i.features.clone()).collect(),
                rest[..input.mlp_train].iter().map(|i| truth[&i.id]).collect(),
            );
            let config = MlpConfig { seed: input.seed, ..MlpConfig::new(train.inputs[0].len()) };
            let model = train_mlp(&train, &config)?.model;
            let pred = model.predict_all(&test.iter().map(|i| i.features.clone()).collect::<Vec<_>>())?;
            row.insert(GROUP_MLP.to_string(), balanced_accuracy(&y, &pred)?);
        } else if input.mlp_train > 0 {
            tracing::warn!(participant = %pid, "too few labelled items to train the MLP baseline");
        }
        scores.insert(pid.clone(), row);
    }
    let mut rows = Vec::new();
    for group in [GROUP_FULL, GROUP_BASELINE, GROUP_MLP] {
        let values: Vec<f64> = scores.values().filter_map(|r| r.get(group).copied()).collect();
        if values.is_empty() {
            continue;
        }
        let ci = bootstrap_ci(&values, input.resamples, 0.95, input.seed)?;
        let p = if group == GROUP_FULL {
            None
        } else {
            let pairs: Vec<(f64, f64)> = scores.values().filter_map(|r| Some((r[GROUP_FULL], *r.get(group)?))).collect();
            wilcoxon_signed_rank(&pairs).ok().map(|w| w.p_value)
        };
        rows.push(ReportRow {
            metric: "balanced_accuracy".into(),
            group: group.into(),
            mean: ci.mean,
            ci_lo: Some(ci.lo),
            ci_hi: Some(ci.hi),
            p,
        });
    }
    Ok(Evaluation { scores, rows, failures })
}

fn participants_sets(
    items: &[Item],
    labels: &LabelsFile,
) -> BTreeMap<String, LabeledSet> {
    let by_id: BTreeMap<&str, &Item> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    labels
        .participants
        .iter()
        .map(|(pid, map)| {
            let mut set = LabeledSet::default();
            for (id, label) in map {
                if let Some(item) = by_id.get(id.as_str()) {
                    set.inputs.push(item.features.clone());
                    set.labels.push(*label);
                    set.participants.push(pid.clone());
                }
            }
            (pid.clone(), set)
        })
        .collect()
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pool(PoolCmd::Gen { n, seed, out }) => {
            let pool = generate_pool(&EnvConfig::default(), n, seed)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            write_pool(&mut w, &pool)?;
            w.flush()?;
            eprintln!("wrote {} trajectories to {}", pool.len(), out.display());
        }
        Command::Sample(SampleCmd::Diversity { pool, k, out }) => {
            let ids = diversity_sample(&pool.load()?, k, pool.seed)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&ids)?)?;
        }
        Command::Session(SessionCmd::Run { script, pool, llm, session, store, session_id, out }) => {
            let pool = pool.load()?;
            let llm = llm.build()?;
            let answers = parse_script(&std::fs::read_to_string(&script).with_context(|| format!("reading {}", script.display()))?);
            let clock = SystemClock;
            let dialogue = Dialogue::new(&pool, llm.as_ref(), &clock);
            let finished = match store {
                Some(dir) => {
                    let store = SessionStore::open(dir)?;
                    let svc = SessionService::new(dialogue, &store);
                    svc.create(&session_id, session.config())?;
                    for (i, a) in answers.iter().enumerate() {
                        if store.load(&session_id)?.session.state == irda_core::DialogueState::Done {
                            break;
                        }
                        svc.submit(&session_id, i as u64 + 1, a)?;
                    }
                    store.load(&session_id)?.session
                }
                None => run_script(&dialogue, &session_id, session.config(), &answers)?.0,
            };
            let ctx = finalize(&finished)?;
            eprintln!("session {} finished with {} feedback records", finished.session_id, ctx.feedback.len());
            write_output(out.as_deref(), &serde_json::to_string_pretty(&ContextExport::new(&ctx)?)?)?;
        }
        Command::Context(ContextCmd::Export { store, session_id, out }) => {
            let store = SessionStore::open(store)?;
            let stored = store.load(&session_id)?;
            if let Some((seq, _)) = stored.pending {
                bail!("session `{session_id}` has an unanswered message {seq}; start the service to recover it");
            }
            let ctx = finalize(&stored.session)?;
            write_output(out.as_deref(), &serde_json::to_string_pretty(&ContextExport::new(&ctx)?)?)?;
        }
        Command::Label(args) => {
            let ctx = read_context(&args.context)?;
            let (items, _) = args.items.load()?;
            let chosen: Vec<(String, String)> = items
                .iter()
                .filter(|i| args.ids.is_empty() || args.ids.contains(&i.id))
                .map(|i| (i.id.clone(), i.text.clone()))
                .collect();
            if let Some(missing) = args.ids.iter().find(|id| !items.iter().any(|i| &i.id == *id)) {
                bail!("unknown item id `{missing}`");
            }
            let llm = args.llm.build()?;
            let report = label_texts(&ctx, &chosen, llm.as_ref());
            let mut text = String::new();
            for (id, _) in &chosen {
                let line = match (report.labels.get(id), report.failures.get(id)) {
                    (Some(c), _) => LabelLine {
                        id,
                        label: Some(c.label),
                        confidence: Some(c.confidence.value),
                        pos_prob: Some(c.confidence.pos_prob),
                        neg_prob: Some(c.confidence.neg_prob),
                        error: None,
                    },
                    (None, e) => LabelLine { id, label: None, confidence: None, pos_prob: None, neg_prob: None, error: e.map(String::as_str) },
                };
                text.push_str(&serde_json::to_string(&line)?);
                text.push('\n');
            }
            write_output(args.out.as_deref(), &text)?;
            if !report.failures.is_empty() {
                eprintln!("{} of {} items could not be labelled", report.failures.len(), chosen.len());
            }
        }
        Command::Evaluate(args) => {
            let contexts = args
                .contexts
                .iter()
                .map(|p| {
                    let pid = p.file_stem().and_then(|s| s.to_str()).unwrap_or("participant").to_string();
                    Ok((pid, read_context(p)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let (items, pool) = args.items.load()?;
            let truth = match (&args.truth, args.rule) {
                (Some(path), _) => LabelsFile::read(path)?.participants,
                (None, Some(rule)) => {
                    let pool = pool.as_ref().ok_or_else(|| anyhow!("--rule applies to trajectory pools only"))?;
                    let map = pool.trajectories.iter().map(|t| (t.id.clone(), rule.label(t))).collect();
                    BTreeMap::from([("*".to_string(), map)])
                }
                (None, None) => bail!("evaluate needs --truth or --rule"),
            };
            let llm = args.llm.build()?;
            let input = EvalInput {
                contexts: &contexts,
                items: &items,
                truth: &truth,
                n_test: args.n_test,
                mlp_train: args.mlp_train,
                resamples: args.resamples,
                seed: args.items.pool.seed,
            };
            let eval = evaluate(&input, llm.as_ref())?;
            let mut buf = Vec::new();
            write_report(&mut buf, &eval.rows)?;
            write_output(args.out.as_deref(), &String::from_utf8(buf)?)?;
            let mut ranked: Vec<&ReportRow> = eval.rows.iter().collect();
            ranked.sort_by(|a, b| b.mean.total_cmp(&a.mean));
            eprintln!("ranking: {}", ranked.iter().map(|r| format!("{} {:.3}", r.group, r.mean)).collect::<Vec<_>>().join(" > "));
            if eval.failures > 0 {
                eprintln!("{} classifications failed and were scored as wrong", eval.failures);
            }
        }
        Command::Baseline(BaselineCmd::Train { items, labels, participant, n, out }) => {
            let (all, _) = items.load()?;
            let labels = LabelsFile::read(&labels)?;
            let sets = participants_sets(&all, &labels);
            let set = sets.get(&participant).ok_or_else(|| anyhow!("no labels for participant `{participant}`"))?;
            if set.len() < n {
                bail!("participant `{participant}` has {} labelled items, need {n}", set.len());
            }
            let train = set.head(n);
            let config = MlpConfig { seed: items.pool.seed, ..MlpConfig::new(train.inputs[0].len()) };
            let trained = train_mlp(&train, &config)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            save_model(BufWriter::new(file), &trained.model)?;
            eprintln!("final training loss {:.4}", trained.loss_history.last().copied().unwrap_or(f64::NAN));
        }
        Command::Baseline(BaselineCmd::Curve { items, labels, mode, grid, n_train, resamples, out }) => {
            let (all, _) = items.load()?;
            let sets = participants_sets(&all, &LabelsFile::read(&labels)?);
            let mut train = BTreeMap::new();
            let mut test = BTreeMap::new();
            for (pid, set) in sets {
                if set.len() <= n_train {
                    bail!("participant `{pid}` needs more than {n_train} labelled items");
                }
                let tail = LabeledSet {
                    inputs: set.inputs[n_train..].to_vec(),
                    labels: set.labels[n_train..].to_vec(),
                    participants: set.participants[n_train..].to_vec(),
                };
                train.insert(pid.clone(), set.head(n_train));
                test.insert(pid, tail);
            }
            let dim = train.values().next().and_then(|s| s.inputs.first()).map(Vec::len).ok_or_else(|| anyhow!("no labelled items"))?;
            let settings = CurveSettings {
                mode: match mode {
                    ModeArg::Individual => CurveMode::Individual,
                    ModeArg::Collective => CurveMode::Collective,
                },
                sample_grid: grid,
                n_resamples: resamples,
                level: 0.95,
                seed: items.pool.seed,
            };
            let config = MlpConfig { seed: items.pool.seed, ..MlpConfig::new(dim) };
            let points = learning_curve(&train, &test, &config, &settings)?;
            let mut buf = Vec::new();
            write_curve(&mut buf, &points)?;
            write_output(out.as_deref(), &String::from_utf8(buf)?)?;
        }
        Command::Mm(MmCmd::Gen { n, seed, out }) => {
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            write_scenarios(&mut w, &generate_scenarios(n, seed))?;
            w.flush()?;
        }
        Command::Mm(MmCmd::Import { csv, out }) => {
            let scenarios = import_csv(File::open(&csv).with_context(|| format!("opening {}", csv.display()))?)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            write_scenarios(&mut w, &scenarios)?;
            w.flush()?;
            eprintln!("imported {} scenarios", scenarios.len());
        }
        Command::Serve(args) => serve(args)?,
    }
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    // The blocking HTTP client must be built outside the async runtime.
    let pool = args.pool.load()?;
    let llm = args.llm.build()?;
    let config = args.session.config();
    config.validate()?;
    let store = SessionStore::open(&args.store)?;
    let state = Arc::new(AppState::new(pool, llm, store, Arc::new(SystemClock), config));
    let recovered = state.recover_all()?;
    tracing::info!(sessions = recovered, "session logs scanned");
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        // Tests and scripts read the bound address from this line.
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathgrid::checkpoint::{self, Checkpoint};
use pathgrid::config::RunConfig;
use pathgrid::error::{Error, Result};
use pathgrid::manifest::Manifest;
use pathgrid::scenarios::{self, ScenarioResult};
use pathgrid::{pipeline, records, report, trainer};
use pathgrid_core::corpus::{generate_corpus, SplitTag};
use pathgrid_core::decoder::DecodeMode;
use pathgrid_core::evaluator::EvalReport;
use pathgrid_core::model::{OptimizerKind, OptimizerState, PathModel};
use pathgrid_core::rng::derive_seed;
use pathgrid_core::twinsim::{ModelPlanner, OraclePlanner, OutcomeTable};
use serde::{Deserialize, Serialize};

const CORPUS_FILE: &str = "corpus.jsonl";
const CHECKPOINT_FILE: &str = "model.ckpt";
const LOSS_FILE: &str = "loss.csv";
const PREDICTIONS_FILE: &str = "predictions.jsonl";
const REPORT_JSON: &str = "report.json";
const SIM_JSON: &str = "sim.json";

const BUNDLED_PACK: &str = include_str!("../scenarios/pack.json");

#[derive(Parser)]
#[command(name = "pathgrid", version, about = "Lattice trajectory generation, training, decoding and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tagged corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        train_frac: Option<f64>,
        #[arg(long)]
        obstacle_density: Option<f64>,
        #[arg(long)]
        max_path_len: Option<u32>,
    },
    /// Train on the train split of a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus file, or a directory holding corpus.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
    },
    /// Decode every record of a split with a trained model.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a directory holding model.ckpt.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score predictions against gold records with matching seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Run a scenario pack through the simulator.
    Sim {
        #[command(flatten)]
        common: Common,
        /// Scenario file; the bundled pack when omitted.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Plan with this model instead of the BFS oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        global_replan: bool,
    },
    /// Render saved evaluation and simulation results as text.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        sim: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct SimOutput {
    table: OutcomeTable,
    results: Vec<ScenarioResult>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// A directory argument names its default file.
fn input(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            common,
            count,
            train_frac,
            obstacle_density,
            max_path_len,
        } => {
            let mut cfg = resolve(&common)?;
            let g = &mut cfg.generation;
            if let Some(v) = count {
                g.count = v;
            }
            if let Some(v) = train_frac {
                g.train_fraction = v;
            }
            if let Some(v) = obstacle_density {
                g.obstacle_density = v;
            }
            if let Some(v) = max_path_len {
                g.max_path_len = v;
            }
            cfg.validate()?;
            let recs = generate_corpus(&cfg.generation, cfg.seed)?;
            create_dir(&common.out)?;
            records::write_records(&common.out.join(CORPUS_FILE), &recs)?;
            let mut m = Manifest::new("gen", &cfg);
            m.outputs.push(CORPUS_FILE.into());
            m.write(&common.out)?;
            let n_train = recs.iter().filter(|r| r.split_tag == SplitTag::Train).count();
            println!("wrote {} records ({} train, {} validation)", recs.len(), n_train, recs.len() - n_train);
        }
        Command::Train {
            common,
            data,
            resume,
            epochs,
            batch_size,
            lr,
            optimizer,
        } => {
            let mut cfg = resolve(&common)?;
            let t = &mut cfg.training;
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = lr {
                t.optimizer.learning_rate = v;
            }
            if let Some(o) = optimizer {
                t.optimizer.kind = match o {
                    OptimizerArg::Sgd => OptimizerKind::Sgd,
                    OptimizerArg::Momentum => OptimizerKind::Momentum { beta: 0.9 },
                    OptimizerArg::Adam => OptimizerKind::adam(),
                };
            }
            cfg.validate()?;
            let data = input(&data, CORPUS_FILE);
            let recs = pipeline::with_split(&records::read_records(&data)?, SplitTag::Train);
            let mut ck = match &resume {
                Some(p) => {
                    let ck = checkpoint::load(&input(p, CHECKPOINT_FILE))?;
                    if ck.model.config() != &cfg.model_config() {
                        return Err(Error::Mismatch(format!(
                            "{}: model shape differs from the resolved config",
                            p.display()
                        )));
                    }
                    ck
                }
                None => Checkpoint {
                    model: PathModel::new(cfg.model_config(), cfg.seed)?,
                    optimizer: cfg.training.optimizer,
                    state: OptimizerState::new(),
                    generation_seed: cfg.seed,
                    init_seed: cfg.seed,
                    epochs_completed: 0,
                },
            };
            let logs = trainer::train(&mut ck, &recs, &cfg.training, derive_seed(cfg.seed, 1), |l| {
                println!(
                    "epoch {} step {} lr {:.4} total {:.5} seq {:.5}",
                    l.epoch, l.step, l.learning_rate, l.total, l.seq
                );
            })?;
            create_dir(&common.out)?;
            checkpoint::save(&common.out.join(CHECKPOINT_FILE), &ck)?;
            trainer::write_loss_log(&common.out.join(LOSS_FILE), &logs)?;
            let mut m = Manifest::new("train", &cfg);
            m.inputs.push(data.display().to_string());
            if let Some(p) = resume {
                m.inputs.push(p.display().to_string());
            }
            m.outputs = vec![CHECKPOINT_FILE.into(), LOSS_FILE.into()];
            m.write(&common.out)?;
        }
        Command::Decode {
            common,
            checkpoint: ck_path,
            data,
            split,
            mode,
            beam_width,
            max_steps,
        } => {
            let mut cfg = resolve(&common)?;
            let d = &mut cfg.decode;
            if let Some(m) = mode {
                d.mode = match m {
                    ModeArg::Greedy => DecodeMode::Greedy,
                    ModeArg::Beam => DecodeMode::Beam,
                };
            }
            if let Some(v) = beam_width {
                d.beam_width = v;
            }
            if let Some(v) = max_steps {
                d.max_steps = v;
            }
            cfg.validate()?;
            let ck_path = input(&ck_path, CHECKPOINT_FILE);
            let data = input(&data, CORPUS_FILE);
            let ck = checkpoint::load(&ck_path)?;
            let all = records::read_records(&data)?;
            let recs = match split {
                SplitArg::Train => pipeline::with_split(&all, SplitTag::Train),
                SplitArg::Validation => pipeline::with_split(&all, SplitTag::Validation),
                SplitArg::All => all,
            };
            let preds = pipeline::decode_records(&ck.model, &recs, &cfg.decode)?;
            create_dir(&common.out)?;
            records::write_records(&common.out.join(PREDICTIONS_FILE), &preds)?;
            let mut m = Manifest::new("decode", &cfg);
            m.inputs = vec![ck_path.display().to_string(), data.display().to_string()];
            m.outputs.push(PREDICTIONS_FILE.into());
            m.write(&common.out)?;
            println!("decoded {} records", preds.len());
        }
        Command::Eval { common, pred, gold } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let pred = input(&pred, PREDICTIONS_FILE);
            let gold = input(&gold, CORPUS_FILE);
            let r = pipeline::evaluate_records(&records::read_records(&pred)?, &records::read_records(&gold)?)?;
            create_dir(&common.out)?;
            write_text(&common.out, REPORT_JSON, &to_json(&r))?;
            write_text(&common.out, "report.csv", &report::eval_csv(&r))?;
            let mut m = Manifest::new("eval", &cfg);
            m.inputs = vec![pred.display().to_string(), gold.display().to_string()];
            m.outputs = vec![REPORT_JSON.into(), "report.csv".into()];
            m.write(&common.out)?;
            print!("{}", report::eval_text(&r));
        }
        Command::Sim {
            common,
            scenarios: pack_path,
            checkpoint: ck_path,
            global_replan,
        } => {
            let mut cfg = resolve(&common)?;
            if global_replan {
                cfg.sim.allow_global_replan = true;
            }
            cfg.validate()?;
            let pack = match &pack_path {
                Some(p) => scenarios::load(p)?,
                None => serde_json::from_str::<scenarios::ScenarioFile>(BUNDLED_PACK)
                    .expect("bundled pack parses")
                    .scenarios,
            };
            let (results, table) = match &ck_path {
                Some(p) => {
                    let ck = checkpoint::load(&input(p, CHECKPOINT_FILE))?;
                    let planner = ModelPlanner {
                        model: &ck.model,
                        decode: cfg.decode,
                        max_len: cfg.generation.max_path_len,
                    };
                    scenarios::run_pack(&pack, &planner, &cfg.sim)?
                }
                None => scenarios::run_pack(&pack, &OraclePlanner, &cfg.sim)?,
            };
            create_dir(&common.out)?;
            let out = SimOutput { table, results };
            write_text(&common.out, SIM_JSON, &to_json(&out))?;
            write_text(&common.out, "outcomes.csv", &report::outcome_csv(&out.table))?;
            let mut m = Manifest::new("sim", &cfg);
            m.inputs.push(pack_path.map_or_else(|| "bundled".into(), |p| p.display().to_string()));
            if let Some(p) = ck_path {
                m.inputs.push(p.display().to_string());
            }
            m.outputs = vec![SIM_JSON.into(), "outcomes.csv".into()];
            m.write(&common.out)?;
            print!("{}", report::outcome_text(&out.table));
            let unexpected: Vec<&str> = out
                .results
                .iter()
                .filter(|r| r.as_expected == Some(false))
                .map(|r| r.name.as_str())
                .collect();
            if !unexpected.is_empty() {
                println!("not as expected: {}", unexpected.join(", "));
            }
        }
        Command::Report { common, eval, sim } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            if eval.is_none() && sim.is_none() {
                return Err(Error::Usage("report needs --eval, --sim or both".into()));
            }
            let mut text = String::new();
            let mut m = Manifest::new("report", &cfg);
            if let Some(p) = &eval {
                let p = input(p, REPORT_JSON);
                let r: EvalReport = read_json(&p)?;
                text.push_str("# Evaluation\n\n");
                text.push_str(&report::eval_text(&r));
                m.inputs.push(p.display().to_string());
            }
            if let Some(p) = &sim {
                let p = input(p, SIM_JSON);
                let s: SimOutput = read_json(&p)?;
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str("# Simulation\n\n");
                text.push_str(&report::outcome_text(&s.table));
                m.inputs.push(p.display().to_string());
            }
            create_dir(&common.out)?;
            write_text(&common.out, "report.txt", &text)?;
            m.outputs.push("report.txt".into());
            m.write(&common.out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let head = msg.split("\n\n").next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error code=USAGE: {}", one_line(head));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={}: {}", e.code(), one_line(&e.to_string()));
            if matches!(e, Error::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

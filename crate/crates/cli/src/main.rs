use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use neat_core::eval::{compare, evaluate};
use neat_core::lm::{greedy_response, sample_response, ModelConfig, ModelParams};
use neat_core::prefdata::{Dataset, Split};
use neat_core::reward::{score, RewardSpec};
use neat_core::sampler::{PromptKind, PromptSet};
use neat_core::synth::{load_corpus, save_corpus, ReferenceTask, TaskConfig};
use neat_core::tokens::{query_context, TokenSeq};
use neat_core::trainer::{
    pretrain, read_curve_csv, write_sidecar, Mode, PretrainConfig, TrainConfig, TrainOutputs, Trainer,
};
use neat_core::{NeatError, Result};

#[derive(Parser)]
#[command(name = "neat", version, about = "Preference alignment for a tiny language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Neat,
    RrhfLike,
    SftOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Neat => Mode::Neat,
            ModeArg::RrhfLike => Mode::RrhfLike,
            ModeArg::SftOnly => Mode::SftOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Positive,
    Negative,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic pretraining corpus, preference splits, reward
    /// spec and prompt set into a directory.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model on a pretraining corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Align a checkpoint on a preference dataset. Writes the final
    /// checkpoint, its sidecar and the training log.
    Train {
        /// Training split (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint, usually the pretrained base model.
        #[arg(long)]
        init: PathBuf,
        /// JSON file with TrainConfig fields; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Reward spec; defaults to `spec.json` next to the data.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Prompt set; defaults to `prompts.json` next to the data.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dedup: Option<bool>,
    },
    /// Perplexity and greedy average reward on a held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Oracle-judged win/lose/tie of checkpoint A against checkpoint B.
    Compare {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Draw one response for a dataset query and print it with its reward.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset holding the query.
        #[arg(long)]
        data: PathBuf,
        /// Zero-based record index.
        #[arg(long)]
        query_id: usize,
        #[arg(long, value_enum, default_value = "none")]
        template: TemplateArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Reduce a training log to plot-ready `step,reward` rows.
    Curve {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit the exact expected reward rows instead of the batch reward.
        #[arg(long)]
        exact: bool,
    },
}

fn sibling(data: &Path, name: &str) -> PathBuf {
    data.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_spec(explicit: Option<PathBuf>, data: &Path) -> Result<RewardSpec> {
    RewardSpec::load(&explicit.unwrap_or_else(|| sibling(data, "spec.json")))
}

fn load_prompts(explicit: Option<PathBuf>, data: &Path) -> Result<PromptSet> {
    PromptSet::load(&explicit.unwrap_or_else(|| sibling(data, "prompts.json")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| NeatError::Io {
        path: tmp.clone(),
        source: e,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| NeatError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[derive(Serialize)]
struct SampleOutput {
    query: TokenSeq,
    context: TokenSeq,
    tokens: TokenSeq,
    text: String,
    reward: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { seed, out } => {
            let task = ReferenceTask::generate(TaskConfig {
                seed,
                ..TaskConfig::default()
            })?;
            std::fs::create_dir_all(&out).map_err(|e| NeatError::Io {
                path: out.clone(),
                source: e,
            })?;
            save_corpus(&out.join("corpus.jsonl"), &task.pretraining_corpus())?;
            task.train.save(&out.join("train.jsonl"))?;
            task.test.save(&out.join("test.jsonl"))?;
            task.spec.save(&out.join("spec.json"))?;
            task.prompts.save(&out.join("prompts.json"))?;
        }
        Command::Pretrain {
            corpus,
            steps,
            out,
            seed,
            batch_size,
            lr,
        } => {
            let examples = load_corpus(&corpus)?;
            let defaults = PretrainConfig::default();
            let cfg = PretrainConfig {
                steps,
                seed,
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                lr: lr.unwrap_or(defaults.lr),
            };
            let params = pretrain(&examples, ModelConfig::default(), &cfg)?;
            params.save(&out)?;
        }
        Command::Train {
            data,
            init,
            config,
            mode,
            out,
            log,
            checkpoint_dir,
            spec,
            prompts,
            alpha,
            beta,
            lambda,
            lr,
            iterations,
            batch_size,
            tau,
            seed,
            dedup,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| NeatError::Io { path, source: e })?;
                    serde_json::from_str::<TrainConfig>(&text)?
                }
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { cfg.$f = v; })* };
            }
            set!(alpha, beta, lambda, lr, iterations, batch_size, tau, seed, dedup);

            let spec = load_spec(spec, &data)?;
            let prompts = load_prompts(prompts, &data)?;
            let dataset = Dataset::load(&data, &spec, Split::Train)?;
            let params = ModelParams::load(&init)?;
            let log = log.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".log.csv");
                PathBuf::from(s)
            });
            let trainer = Trainer::new(&spec, &prompts, cfg.clone())?;
            let outputs = TrainOutputs {
                log: Some(log),
                checkpoint_dir,
            };
            let result = trainer.train_with_outputs(params, dataset, &outputs)?;
            result.params.save(&out)?;
            write_sidecar(&out, &cfg, cfg.iterations as u64)?;
        }
        Command::Eval { ckpt, test, spec } => {
            let spec = load_spec(spec, &test)?;
            let ds = Dataset::load(&test, &spec, Split::Test)?;
            let params = ModelParams::load(&ckpt)?;
            print_json(&evaluate(&params, &ds, &spec)?)?;
        }
        Command::Compare {
            ckpt_a,
            ckpt_b,
            test,
            margin,
            spec,
        } => {
            let spec = load_spec(spec, &test)?;
            let ds = Dataset::load(&test, &spec, Split::Test)?;
            let a = ModelParams::load(&ckpt_a)?;
            let b = ModelParams::load(&ckpt_b)?;
            print_json(&compare(&a, &b, &ds, &spec, margin)?)?;
        }
        Command::Sample {
            ckpt,
            data,
            query_id,
            template,
            seed,
            lambda,
            spec,
            prompts,
        } => {
            let spec = load_spec(spec, &data)?;
            let ds = Dataset::load(&data, &spec, Split::Train)?;
            let record = ds.records().get(query_id).ok_or_else(|| {
                NeatError::Lookup(format!("query id {query_id} is outside the {} records", ds.len()))
            })?;
            let query = record.query.clone();
            let context = match template {
                TemplateArg::None => TokenSeq::new(query_context(&query)),
                TemplateArg::Positive | TemplateArg::Negative => {
                    let kind = match template {
                        TemplateArg::Positive => PromptKind::Positive,
                        _ => PromptKind::Negative,
                    };
                    let set = load_prompts(prompts, &data)?;
                    let t = set
                        .get(kind)
                        .ok_or_else(|| NeatError::Lookup(format!("no {kind:?} template in the prompt set")))?;
                    t.render(&query)
                }
            };
            let params = ModelParams::load(&ckpt)?;
            let tokens = if lambda == 0.0 {
                greedy_response(&params, &context, spec.max_len)?
            } else {
                sample_response(&params, &context, lambda, spec.max_len, seed)?
            };
            let reward = score(&spec, &query, &tokens)?;
            print_json(&SampleOutput {
                text: tokens.to_string(),
                query,
                context,
                tokens,
                reward,
            })?;
        }
        Command::Curve { log, out, exact } => {
            let points = read_curve_csv(&log)?;
            let mut text = String::from("step,reward\n");
            for p in &points {
                let r = if exact { p.exact_expected_reward } else { Some(p.mean_batch_reward) };
                if let Some(r) = r {
                    text.push_str(&format!("{},{}\n", p.step, r));
                }
            }
            write_text(&out, &text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use udoc::checkpoint::{read_manifest, Checkpoint};
use udoc::config::{RunConfig, TaskSet};
use udoc::corpus::{generate_corpus_with_threads, load_corpus, save_corpus};
use udoc::downstream::{self, FinetuneModel, Task};
use udoc::gradcheck::gradcheck;
use udoc::model::{prepare_docs, UdocModel};
use udoc::trainer::{self, Trainer};

#[derive(Parser, Debug)]
#[command(name = "udoc", about = "Multimodal document pretraining on synthetic pages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Config file or preset name (tiny, desk, full).
        #[arg(long)]
        config: Option<String>,
    },
    /// Pretrain on a corpus, writing metrics and checkpoints to --out.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Pretraining tasks, e.g. msm+vcl+vla.
        #[arg(long)]
        task: Option<TaskSet>,
        /// Resume from a pretraining checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable tensor; exit 0 iff all pass.
    Gradcheck {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune on entity or document classification.
    Finetune {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint; random initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a fine-tuned model on every document of a corpus.
    Eval {
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tensor table of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(arg: Option<&str>) -> Result<RunConfig> {
    match arg {
        None => Ok(RunConfig::desk()),
        Some(s) if Path::new(s).exists() => {
            RunConfig::load(Path::new(s)).with_context(|| format!("loading config {s}"))
        }
        Some(s) => {
            let name = s.strip_suffix(".cfg").unwrap_or(s);
            let name = Path::new(name).file_name().and_then(|n| n.to_str()).unwrap_or(name);
            RunConfig::preset(name).with_context(|| format!("{s} is neither a file nor a preset"))
        }
    }
}

fn threads() -> usize {
    std::env::var("UDOC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus {
            seed,
            count,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = generate_corpus_with_threads(seed, count, &cfg.corpus, threads())?;
            save_corpus(&corpus, &out)?;
            println!("wrote {} documents to {}", corpus.len(), out.display());
        }
        Command::Pretrain {
            corpus,
            out,
            config,
            seed,
            steps,
            task,
            init,
        } => {
            let corpus = load_corpus(&corpus)?;
            let summary = match init {
                Some(ckpt) => {
                    let mut t = Trainer::resume(&corpus, &ckpt)?;
                    let until = steps.unwrap_or(t.cfg.train.total_steps);
                    std::fs::create_dir_all(&out)?;
                    std::fs::write(out.join(trainer::CONFIG_ECHO_FILE), t.cfg.to_text())?;
                    t.run(until, Some(&out))?;
                    t.best
                }
                None => {
                    let mut cfg = load_config(config.as_deref())?;
                    if let Some(s) = seed {
                        cfg.train.seed = s;
                    }
                    if let Some(s) = steps {
                        cfg.train.total_steps = s;
                    }
                    if let Some(t) = task {
                        cfg.loss.tasks = t;
                    }
                    cfg.validate()?;
                    trainer::pretrain(&corpus, &cfg, &out)?.best
                }
            };
            match summary {
                Some((loss, step)) => println!("best checkpoint at step {step}, smoothed loss {loss:.6}"),
                None => println!("finished; see {}", out.display()),
            }
        }
        Command::Gradcheck { config, seed } => {
            let mut cfg = load_config(Some(config.as_deref().unwrap_or("tiny")))?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let report = gradcheck(&cfg, None)?;
            println!("{report}");
            if !report.passed() {
                bail!("{} tensors exceed the tolerance", report.failures().len());
            }
        }
        Command::Finetune {
            task,
            corpus,
            out,
            init,
            config,
            seed,
            steps,
        } => {
            let corpus = load_corpus(&corpus)?;
            let (mut cfg, model) = match &init {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let mut cfg = ckpt.config.clone();
                    if let Some(c) = config.as_deref() {
                        cfg.finetune = load_config(Some(c))?.finetune;
                    }
                    (cfg, UdocModel::from_checkpoint(&ckpt, path)?)
                }
                None => {
                    let cfg = load_config(config.as_deref())?;
                    let m = UdocModel::new(&cfg, seed.unwrap_or(cfg.train.seed));
                    (cfg, m)
                }
            };
            if let Some(s) = seed {
                cfg.finetune.seed = s;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            let result = downstream::finetune(model, &corpus, task, &cfg)?;
            std::fs::create_dir_all(&out)?;
            result.model.checkpoint(&cfg).save(&out.join("model.ckpt"))?;
            std::fs::write(out.join("eval.txt"), result.report.to_text())?;
            print!("{}", result.report.to_text());
        }
        Command::Eval { model, corpus, out } => {
            let ckpt = Checkpoint::load(&model)?;
            let m = FinetuneModel::from_checkpoint(&ckpt, &model)?;
            let corpus = load_corpus(&corpus)?;
            let docs = prepare_docs(&corpus.docs, &m.model.text)?;
            let labels: Vec<Vec<usize>> = corpus.docs.iter().map(|d| downstream::labels(d, m.task)).collect();
            let all: Vec<usize> = (0..docs.len()).collect();
            let report = downstream::evaluate(&m, &docs, &labels, &all)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_text())?;
            }
            print!("{}", report.to_text());
        }
        Command::Inspect { checkpoint } => {
            let m = read_manifest(&checkpoint)?;
            println!("kind\t{}", m.kind);
            if let Some(t) = &m.training {
                println!("step\t{}\ntau\t{:?}", t.step, t.tau);
            }
            for e in &m.tensors {
                println!("{}\t{:?}\t{}\t{}", e.name, e.shape, e.dtype, e.offset);
            }
        }
    }
    Ok(())
}

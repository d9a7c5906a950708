use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xlrc_core::corpus::{
    build_parallel_corpus, gold_answers, load_dataset, parse_squad, pseudo_translate_all, read_translations_jsonl,
    write_corpus_jsonl, write_squad, Lexicon, RawExample, Translation,
};
use xlrc_core::exec::Exec;
use xlrc_core::gradcheck::{random_configs, run_suite, DEFAULT_CONFIGS};
use xlrc_core::metrics::evaluate;
use xlrc_core::span::{read_predictions, write_predictions};
use xlrc_core::synth::{self, SynthConfig};
use xlrc_core::train::{prediction_input, predict_examples, run_schedule, Checkpoint, Schedule};

#[derive(Parser)]
#[command(name = "xlrc", version, about = "Multilingual span-extraction reading comprehension")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExecArgs {
    /// Run per-example work on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Align a SQuAD file with its translations into a parallel JSONL corpus.
    BuildCorpus {
        #[arg(long)]
        target: PathBuf,
        /// A directory of `<lang>.jsonl` translations and/or `<lang>.tsv`
        /// lexicons, or a single lexicon file named `<lang>.tsv`.
        #[arg(long)]
        translations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "zh")]
        language: String,
    },
    /// Run a staged training schedule and save the final checkpoint.
    Train {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Decode answers for a dataset (`.jsonl` corpus or SQuAD JSON).
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every fusion intermediate, one JSON line per example.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "zh")]
        language: String,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Score a prediction file against gold answers.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write the per-question report here.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value = "zh")]
        language: String,
    },
    /// Finite-difference gradient suite; exits nonzero on any failure.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_CONFIGS)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Write the synthetic trilingual corpus with ready-made schedules.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn lang_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("cannot read a language code from {}", path.display()))
}

fn load_translations(path: &Path, targets: &[RawExample]) -> Result<BTreeMap<String, Vec<Translation>>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = BTreeMap::new();
    for file in files {
        let records = match file.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => read_translations_jsonl(&file)?,
            Some("tsv") => pseudo_translate_all(targets, &lang_of(&file)?, &Lexicon::load(&file)?),
            _ => continue,
        };
        let lang = lang_of(&file)?;
        if out.insert(lang.clone(), records).is_some() {
            bail!("language {lang} is given twice in {}", path.display());
        }
    }
    if out.is_empty() {
        bail!("no <lang>.jsonl or <lang>.tsv files in {}", path.display());
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildCorpus {
            target,
            translations,
            out,
            language,
        } => {
            let targets = parse_squad(&target, &language)?;
            let trans = load_translations(&translations, &targets)?;
            let corpus = build_parallel_corpus(&targets, &trans)?;
            write_corpus_jsonl(&out, &corpus.examples)?;
            println!(
                "{} examples, sources {:?}, {} missing translations",
                corpus.examples.len(),
                trans.keys().collect::<Vec<_>>(),
                corpus.missing.len()
            );
        }
        Command::Train {
            schedule,
            seed,
            out,
            exec,
        } => {
            let schedule = Schedule::load(&schedule)?;
            let (ckpt, report) = run_schedule(&schedule, seed, exec.exec())?;
            ckpt.save(&out)?;
            for (i, log) in ckpt.history.iter().enumerate() {
                println!(
                    "stage {i} {}: loss {:.6} -> {:.6}",
                    log.data,
                    log.initial_loss,
                    log.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
            }
            if let Some(r) = report {
                write_json(&out.join("dev_eval.json"), &r)?;
                print!("{}", r.summary());
            }
        }
        Command::Predict {
            ckpt,
            data,
            out,
            trace,
            language,
            exec,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let examples = load_dataset(&data, &language)?;
            let preds = predict_examples(&ckpt.model, &examples, ckpt.max_seq_len, exec.exec())?;
            write_predictions(&out, &preds)?;
            if let Some(path) = trace {
                let mut file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                for ex in &examples {
                    let input = prediction_input(&ckpt.model, ex, ckpt.max_seq_len)?;
                    let line = serde_json::json!({"id": ex.id(), "trace": ckpt.model.trace(&input)?});
                    writeln!(file, "{line}")?;
                }
            }
            println!("{} predictions", preds.len());
        }
        Command::Eval {
            pred,
            gold,
            json,
            language,
        } => {
            let preds: HashMap<String, String> = read_predictions(&pred)?.into_iter().collect();
            let targets: Vec<RawExample> = load_dataset(&gold, &language)?.into_iter().map(|e| e.target).collect();
            let report = evaluate(&preds, &gold_answers(&targets))?;
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
            print!("{}", report.summary());
        }
        Command::Gradcheck { configs, seed, exec } => {
            let reports = run_suite(&random_configs(configs, seed), exec.exec())?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                println!("{r}");
            }
            println!("{} of {} configurations passed", reports.len() - failed, reports.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { out, seed } => write_synth(&out, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn write_synth(out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let corpus = synth::generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    });
    for (name, split) in [("train", &corpus.train), ("sibling", &corpus.sibling), ("dev", &corpus.dev)] {
        let targets: Vec<RawExample> = split.iter().map(|e| e.target.clone()).collect();
        write_squad(out.join(format!("{name}.json")), &targets)?;
        write_corpus_jsonl(out.join(format!("{name}.jsonl")), split)?;
    }
    let lex_dir = out.join("lexicons");
    fs::create_dir_all(&lex_dir)?;
    for (lang, lex) in &corpus.lexicons {
        fs::write(lex_dir.join(format!("{lang}.tsv")), lex.to_tsv())?;
    }
    let encoder = serde_json::json!({"hidden_dim": 16, "num_layers": 2, "num_heads": 2, "max_position": 64});
    let stage = |data: &str| serde_json::json!({"data": data, "hparams": "100,100,8,64", "multilingual": true});
    write_json(
        &out.join("schedule-1stage.json"),
        &serde_json::json!({"stages": [stage("train.jsonl")], "target_dev": "dev.jsonl", "encoder": encoder}),
    )?;
    write_json(
        &out.join("schedule-2stage.json"),
        &serde_json::json!({"stages": [stage("sibling.jsonl"), stage("train.jsonl")], "target_dev": "dev.jsonl", "encoder": encoder}),
    )?;
    println!(
        "wrote {} train, {} sibling, {} dev examples to {}",
        corpus.train.len(),
        corpus.sibling.len(),
        corpus.dev.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

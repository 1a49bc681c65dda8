use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sigprompt_core::config::RunConfig;
use sigprompt_core::harness::{ablation_annotations, ablation_table, AblationCell};
use sigprompt_core::lm::ToyLm;
use sigprompt_core::pipeline::{load_domains, run_ablation, Pipeline};
use sigprompt_core::{Error, Result};

/// Time-series classification through prompts for a small generative model.
/// Everything that affects results lives in the config file.
#[derive(Parser, Debug)]
#[command(name = "sigprompt", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every configured domain (unsplit) as dataset files.
    Synth {
        #[arg(short, long)]
        config: PathBuf,
        /// Destination directory; defaults to <output_dir>/synth.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one tokenizer per domain.
    TrainTokenizer(Args),
    /// Encode every split with the trained tokenizers.
    Tokenize(Args),
    /// Compute statistical features for every split.
    ExtractFeatures(Args),
    /// Caption every split with the configured provider.
    Caption(Args),
    /// Assemble pretraining, finetuning and evaluation prompts.
    BuildPrompts(Args),
    /// Initialise the language model and run the pretraining phase.
    Pretrain(Args),
    /// Finetune the pretrained model on the target domain.
    Finetune(Args),
    /// Score the finetuned model on the held-out split.
    Evaluate(Args),
    /// Run the instruction-text by implicit-feature grid.
    Ablate(Args),
    /// Token-usage heatmap and reconstruction overlays.
    Plots(Args),
    /// The whole pipeline from one config.
    RunAll(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    #[arg(short, long)]
    config: PathBuf,
}

fn load_lm(path: &Path, hint: &str) -> Result<ToyLm> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "no model at {} (run {hint} first)",
            path.display()
        )));
    }
    ToyLm::load(path)
}

fn pipeline(args: &Args) -> Result<Pipeline> {
    let p = Pipeline::new(RunConfig::load(&args.config)?)?;
    std::fs::create_dir_all(&p.out).map_err(|e| Error::Config(format!("{}: {e}", p.out.display())))?;
    p.write_resolved_config()?;
    Ok(p)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("synth"));
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            for ds in load_domains(&cfg)? {
                let path = out.join(format!("{}.jsonl", ds.domain));
                ds.save(&path)?;
                println!("{} ({} instances)", path.display(), ds.len());
            }
        }
        Command::TrainTokenizer(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            for tok in p.train_tokenizers(&data)? {
                println!("tokenizer {} trained", tok.domain);
            }
        }
        Command::Tokenize(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            for (i, (ds, tag)) in p.splits(&data).into_iter().enumerate() {
                // The eval split comes last and belongs to the target domain.
                let tok = toks
                    .get(i)
                    .filter(|_| i < data.train.len())
                    .unwrap_or(&toks[data.target]);
                p.tokenize_split(tok, ds, &tag)?;
            }
        }
        Command::ExtractFeatures(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            for (ds, tag) in p.splits(&data) {
                p.stat_texts(ds, &tag)?;
            }
        }
        Command::Caption(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            for (ds, tag) in p.splits(&data) {
                p.caption_texts(ds, &tag)?;
            }
        }
        Command::BuildPrompts(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            let sets = p.build_prompt_sets(&data, &toks)?;
            println!(
                "{} pretraining, {} finetuning, {} evaluation prompts",
                sets.pretrain.iter().map(Vec::len).sum::<usize>(),
                sets.finetune.len(),
                sets.eval.len()
            );
        }
        Command::Pretrain(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            let sets = p.build_prompt_sets(&data, &toks)?;
            let mut lm = p.init_lm(&data, &sets, &toks)?;
            let log = p.run_pretrain(&mut lm, &sets)?;
            if !log.steps.is_empty() {
                println!("pretraining loss (last 20 steps) {:.4}", log.mean_loss(20, true));
            }
        }
        Command::Finetune(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            let sets = p.build_prompt_sets(&data, &toks)?;
            let mut lm = load_lm(&p.path("lm-pretrained.ckpt"), "pretrain")?;
            let log = p.run_finetune(&mut lm, &sets)?;
            if !log.steps.is_empty() {
                println!("finetuning loss (last 20 steps) {:.4}", log.mean_loss(20, true));
            }
        }
        Command::Evaluate(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            let sets = p.build_prompt_sets(&data, &toks)?;
            let lm = load_lm(&p.path("lm.ckpt"), "finetune")?;
            let report = p.run_evaluate(&lm, &data, &sets)?;
            println!(
                "accuracy {:.4} macro-F1 {:.4} (n = {})",
                report.accuracy, report.macro_f1, report.n
            );
        }
        Command::Ablate(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let rows = run_ablation(&cfg, &AblationCell::standard_grid())?;
            print!("{}\n{}", ablation_table(&rows), ablation_annotations(&rows));
        }
        Command::Plots(a) => {
            let p = pipeline(&a)?;
            let data = p.prepare_data()?;
            let toks = p.load_tokenizers(&data)?;
            p.run_plots(&data, &toks)?;
        }
        Command::RunAll(a) => {
            let report = pipeline(&a)?.run_all()?;
            println!(
                "accuracy {:.4} macro-F1 {:.4} (n = {})",
                report.accuracy, report.macro_f1, report.n
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

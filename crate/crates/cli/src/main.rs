//! `biacl`: dictionary pivoting, corpus preparation, Bi-ACL training, decoding,
//! evaluation and the synthetic desk-scale experiment.

mod commands;
mod error;
mod manifest;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::EXIT_CODES;

#[derive(Debug, Parser)]
#[command(name = "biacl", version, about, after_help = exit_code_help())]
pub struct Cli {
    /// Where to write the run manifest (each command has a default next to its outputs).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

fn exit_code_help() -> String {
    let mut s = String::from("Exit status:\n");
    for (code, what) in EXIT_CODES {
        s.push_str(&format!("  {code}  {what}\n"));
    }
    s
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compose source-pivot and pivot-target dictionaries into source-target.
    PivotDict(PivotArgs),
    /// Filter a monolingual corpus and build vocabulary and curriculum.
    Prepare(PrepareArgs),
    /// Train with the Bi-ACL objective.
    Train(TrainArgs),
    /// Translate one sentence per line.
    Decode(DecodeArgs),
    /// BLEU against references, optionally with isotropy of pooled states.
    Evaluate(EvaluateArgs),
    /// Run warm start, Bi-ACL and syn_lexicon on a generated language pair.
    SynthExperiment(SynthArgs),
    /// Rerun the command recorded in a manifest and verify its output checksums.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PivotArgs {
    #[arg(long)]
    pub src_en: PathBuf,
    #[arg(long)]
    pub en_tgt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "en")]
    pub pivot_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Monolingual corpus, one sentence per line.
    #[arg(long)]
    pub mono: PathBuf,
    /// Dictionary whose first column is the corpus language.
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub cap: usize,
    #[arg(long, default_value_t = biacl::data::DEFAULT_PHI)]
    pub phi: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Language of the corpus.
    #[arg(long, default_value = "tgt")]
    pub lang: String,
    /// The dictionary's other language.
    #[arg(long, default_value = "src")]
    pub other_lang: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Four 0/1 flags: ae_bkd, ae_fwd, cl_bkd, cl_fwd.
    #[arg(long, default_value = "1111")]
    pub ablation: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the model.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Input language.
    #[arg(long = "from")]
    pub from_lang: String,
    /// Output language.
    #[arg(long = "to")]
    pub to_lang: String,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Maximum output length, end token included.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// `none`, or `dict PATH` with a dictionary from the input language.
    #[arg(long, num_args = 1..=2, value_names = ["MODE", "PATH"], default_value = "none")]
    pub constraints: Vec<String>,
    /// Write translations here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub isotropy: bool,
    /// Sentences sampled for the isotropy measures.
    #[arg(long, default_value_t = 128)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as TSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also run all 15 non-empty loss masks for these seeds.
    #[arg(long, value_delimiter = ',')]
    pub ablation_seeds: Vec<u64>,
    /// Target-side monolingual sentences.
    #[arg(long)]
    pub mono: Option<usize>,
    /// Bi-ACL epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest_path: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.code()).unwrap_or(1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CliError;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_constraint_forms() {
        let base = ["biacl", "decode", "--model", "m", "--from", "a", "--to", "b", "--input", "i"];
        let c = Cli::try_parse_from(base).unwrap();
        let Command::Decode(d) = c.command else { panic!() };
        assert_eq!(d.constraints, vec!["none"]);
        let c = Cli::try_parse_from(base.iter().copied().chain(["--constraints", "dict", "d.tsv"])).unwrap();
        let Command::Decode(d) = c.command else { panic!() };
        assert_eq!(d.constraints, vec!["dict", "d.tsv"]);
    }

    #[test]
    fn usage_error_is_distinct() {
        let e: CliError = CliError::Usage("x".into());
        assert_eq!(e.code(), 2);
    }
}

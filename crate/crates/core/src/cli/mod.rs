//! Command-line front end. Every subcommand reads one flat key/value
//! configuration: defaults, then `--config FILE`, then `--key value`
//! overrides.

mod commands;
mod config;

pub use commands::{
    cmd_evaluate, cmd_gradcheck, cmd_predict_vocab, cmd_synth, cmd_train, cmd_translate,
    SRC_VOCAB_FILE, TGT_VOCAB_FILE,
};
pub use config::{RunConfig, KEYS};

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::info;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "wpnmt", version, about = "Word-prediction supervised neural machine translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on files or a synthetic task
    Train(Overrides),
    /// Translate an input file with one model or an ensemble
    Translate(Overrides),
    /// Score hypotheses with BLEU, token accuracy and word-prediction recall
    Evaluate(Overrides),
    /// Print each sentence's top-n predicted target word ids
    PredictVocab(Overrides),
    /// Compare analytic gradients with finite differences on a tiny model
    Gradcheck(Overrides),
    /// Write a synthetic parallel corpus
    Synth(Overrides),
}

#[derive(Debug, clap::Args)]
pub struct Overrides {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` pairs overriding the configuration
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub rest: Vec<String>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_args(&self.rest)?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let (args, cmd): (&Overrides, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Translate(a) => (a, cmd_translate),
        Command::Evaluate(a) => (a, cmd_evaluate),
        Command::PredictVocab(a) => (a, cmd_predict_vocab),
        Command::Gradcheck(a) => (a, cmd_gradcheck),
        Command::Synth(a) => (a, cmd_synth),
    };
    let cfg = args.resolve()?;
    info!("configuration:\n{}", cfg.render().trim_end());
    cmd(&cfg)
}

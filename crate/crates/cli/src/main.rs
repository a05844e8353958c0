//! `lco`: command-line front end for the toy-world experiments.
//!
//! Every command writes its outputs, a `provenance.json` (resolved config,
//! seeds, input hashes) and a `summary.json` into `--out-dir`. Exit codes:
//! 0 success, 1 validation error, 2 I/O error or truncated input.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lco", version, about = "Toy-world latent alignment and contrastive refinement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run seed (world, initialization and every derived stream).
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// `key = value` configuration file; unset keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world and export a sample dataset.
    #[command(after_help = "Writes dataset.jsonl and world_tokens.csv (class,page,tokens).")]
    GenWorld(commands::GenWorld),
    /// Generatively pretrain a fresh model.
    #[command(after_help = "Writes pretrained.ckpt and pretrain_trace.csv (step,loss); \
                            --dump-emb adds <modality>.emb held-out dumps.")]
    Pretrain(commands::Pretrain),
    /// Text-only contrastive refinement of a checkpoint.
    #[command(after_help = "Writes refined.ckpt and cl_trace.csv (step,loss); \
                            --dump-emb adds <modality>.emb held-out dumps.")]
    ClTrain(commands::ClTrain),
    /// Uniform weight average of checkpoints.
    #[command(after_help = "Writes soup.ckpt.")]
    Soup(commands::Soup),
    /// Anisotropy or mutual-kNN alignment of dumps or of a checkpoint.
    #[command(after_help = "Writes analyze.csv (seed,dataset,modality,metric,layer,k,n,value).")]
    Analyze(commands::Analyze),
    /// Evaluation suite for a checkpoint, or retrieval between two dumps.
    #[command(after_help = "Checkpoint mode writes metrics.csv (seed,dataset,arm,modality,metric,value). \
                            Dump mode writes retrieval.csv (seed,dataset,metric,k,n,value); rows of a \
                            dump are identified by their decimal index.")]
    Eval(commands::Eval),
    /// Fit the generation-representation scaling relation.
    #[command(after_help = "With --points writes grsl_fit.csv (n,pearson,spearman,slope,intercept); \
                            without it runs the pretraining-budget sweep and writes grsl_points.csv \
                            (model_id,gen_score,gen_direction,rep_score) and grsl_fit.csv.")]
    Grsl(commands::Grsl),
    /// PAC-Bayes bound: evaluate the formula, or run the seeded sweep.
    #[command(after_help = "Sweep mode writes bound_sweep.csv (seed,empirical_pop_risk,bound,holds,batch_size_n,i_p,eps_p,kl,\
                            n_samples,delta,train_loss,h_y,lg); formula mode (--kl given) writes \
                            bound.csv (batch_size_n,i_p,eps_p,kl,n_samples,delta,bound).")]
    Bound(commands::Bound),
    /// Validate an external `.emb` dump and copy it into the output directory.
    #[command(after_help = "Writes <modality>.emb and import.csv (file,modality,dim,count,hash).")]
    ImportEmb(commands::ImportEmb),
    /// Run a named replication pipeline over the configured seeds.
    #[command(after_help = "Targets and files: fig1 (fig1_anisotropy.csv: seed,dataset,modality,pre,post,rel_change); \
                            fig2 (fig2_alignment.csv: seed,dataset,modality,stage,layer,alignment); \
                            table4 (table4_metrics.csv: seed,dataset,arm,modality,metric,value); \
                            grsl | fig5 (grsl_points.csv: model_id,gen_score,gen_direction,rep_score); \
                            seadoc-protocol (seadoc_protocol.csv: seed,dataset,arm,ndcg_at_<k>,recall_at_1); \
                            bound (bound_sweep.csv, as for `bound`); \
                            info-check (info_check.csv: seed,modality,h_y,lg,i_estimate,i_true,i_true_std_err,gap).")]
    Replicate(commands::Replicate),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::GenWorld(c) => commands::gen_world(c),
        Command::Pretrain(c) => commands::pretrain(c),
        Command::ClTrain(c) => commands::cl_train(c),
        Command::Soup(c) => commands::soup(c),
        Command::Analyze(c) => commands::analyze(c),
        Command::Eval(c) => commands::eval(c),
        Command::Grsl(c) => commands::grsl(c),
        Command::Bound(c) => commands::bound(c),
        Command::ImportEmb(c) => commands::import_emb(c),
        Command::Replicate(c) => commands::replicate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use xdistill::commands::{self, BiasArgs, MineArgs, Overrides, RunConfig, VectorSource};
use xdistill::eval_sts::JointWeighting;
use xdistill::mining::{Direction, MiningConfig};
use xdistill::Error;

#[derive(Parser)]
#[command(name = "xdistill", version, about = "Multilingual sentence encoder distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. `--config` accepts a run config or a
/// manifest; for commands other than `train` only its seed, threads and
/// out_dir are used. Explicit flags win.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

struct Settings {
    seed: u64,
    threads: usize,
    out_dir: PathBuf,
}

impl Common {
    fn flags(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            out_dir: self.out_dir.clone(),
        }
    }

    fn resolve(&self) -> xdistill::Result<Settings> {
        let merged = match &self.config {
            Some(path) => self.flags().or(Overrides::from_config_file(path)?),
            None => self.flags(),
        };
        Ok(Settings {
            seed: merged.seed.unwrap_or(0),
            threads: merged.threads.unwrap_or(1),
            out_dir: merged.out_dir.unwrap_or_else(|| PathBuf::from(".")),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Distill a student encoder from a run config (or a manifest).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Embed one sentence per input line.
    Embed {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out-dir>/embeddings.xemb`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-subset Spearman correlations on an STS file.
    EvalSts {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        sts: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Joint-pool bias report with a permutation test.
    Bias {
        #[arg(long)]
        sts: PathBuf,
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
        params: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 999)]
        trials: usize,
        /// Weight subsets by size when forming the expected joint score.
        #[arg(long)]
        by_size: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Margin-based bitext mining.
    Mine {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        src_ids: Option<PathBuf>,
        #[arg(long)]
        tgt_ids: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value = "union_max")]
        direction: Direction,
        #[command(flatten)]
        common: Common,
    },
    /// Top-1 retrieval accuracy between row-aligned embedding files.
    Tatoeba {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Project embeddings onto their top two principal components.
    Pca {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Defaults to `<out-dir>/projection.tsv`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cmd: Command) -> xdistill::Result<()> {
    match cmd {
        Command::Train { common } => {
            let Some(path) = &common.config else {
                Cli::command()
                    .error(ErrorKind::MissingRequiredArgument, "train requires --config")
                    .exit();
            };
            let cfg = RunConfig::load(path)?.apply(&common.flags());
            let run = commands::cmd_train(&cfg)?;
            println!("steps\t{}", run.manifest.summary.total_steps);
            if let Some(m) = run.manifest.summary.final_holdout_mse {
                println!("holdout_mse\t{m}");
            }
        }
        Command::Embed { params, input, output, common } => {
            let s = common.resolve()?;
            let output = output.unwrap_or_else(|| s.out_dir.join("embeddings.xemb"));
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
            }
            let m = commands::cmd_embed(&params, &input, &output, s.threads)?;
            println!("rows\t{}", m.rows());
        }
        Command::EvalSts { params, sts, common } => {
            let s = common.resolve()?;
            let r = commands::cmd_eval_sts(&params, &sts, &s.out_dir, s.threads)?;
            print!("{}", r.to_tsv());
        }
        Command::Bias { sts, params, embeddings, trials, by_size, common } => {
            let s = common.resolve()?;
            let vectors = match (params, embeddings) {
                (Some(p), _) => VectorSource::Params(p),
                (None, Some(e)) => VectorSource::Embeddings(e),
                (None, None) => unreachable!("clap requires one of --params/--embeddings"),
            };
            let r = commands::cmd_bias(&BiasArgs {
                sts,
                vectors,
                trials,
                seed: s.seed,
                weighting: if by_size { JointWeighting::BySize } else { JointWeighting::Unweighted },
                out_dir: s.out_dir,
                threads: s.threads,
            })?;
            print!("{}", r.to_tsv());
        }
        Command::Mine { src, tgt, src_ids, tgt_ids, gold, threshold, k, direction, common } => {
            let s = common.resolve()?;
            let r = commands::cmd_mine(&MineArgs {
                src,
                tgt,
                src_ids,
                tgt_ids,
                gold,
                threshold,
                config: MiningConfig { k, direction, ..MiningConfig::default() },
                out_dir: s.out_dir,
                threads: s.threads,
            })?;
            println!("candidates\t{}", r.candidates);
            if let Some(m) = r.metrics {
                println!("precision\t{}\nrecall\t{}\nf1\t{}", m.precision, m.recall, m.f1);
            }
        }
        Command::Tatoeba { src, tgt, common } => {
            let s = common.resolve()?;
            let r = commands::cmd_tatoeba(&src, &tgt, &s.out_dir, s.threads)?;
            println!("forward\t{}\nbackward\t{}\nmean\t{}", r.forward, r.backward, r.mean);
        }
        Command::Pca { embeddings, labels, output, common } => {
            let s = common.resolve()?;
            let output = output.unwrap_or_else(|| s.out_dir.join("projection.tsv"));
            let p = commands::cmd_pca(&embeddings, &labels, &output)?;
            println!("explained_variance\t{}\t{}", p.explained_variance[0], p.explained_variance[1]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.kind(), single_line(&e));
            ExitCode::from(1)
        }
    }
}

fn single_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\t'], " ")
}

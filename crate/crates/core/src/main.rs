use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stacking::commands::{self, Settings};

#[derive(Parser)]
#[command(name = "stacking", version, about = "Stacking with sum-to-m constraints and data-driven bases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, per-variable bases, m-sweep on validation error, plot.
    Run(PipelineArgs),
    /// Per-variable basis search on all rows.
    GenBasis(PipelineArgs),
    /// Held-out predictions of univariate polynomial models.
    Loo(LooArgs),
    /// Constrained stacking weights over an m grid from a held-out prediction file.
    SweepM(SweepArgs),
    /// Posterior risk versus cross-validation risk convergence experiment.
    VerifyBayes(BayesArgs),
    /// Write the synthetic additive dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// key = value file; flags override its entries.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Response column name or 0-based index.
    #[arg(long)]
    response: Option<String>,
    /// Training share of the rows.
    #[arg(long)]
    split: Option<String>,
    /// Candidate basis size.
    #[arg(long = "J")]
    j: Option<String>,
    /// nw or gp.
    #[arg(long)]
    generator: Option<String>,
    /// rbf:<lengthscale> or poly:<degree>,<offset>.
    #[arg(long)]
    kernel: Option<String>,
    /// GP noise variance.
    #[arg(long)]
    noise: Option<String>,
    /// lo:hi:count.
    #[arg(long = "m-grid")]
    m_grid: Option<String>,
    /// Permutations of the sequential criterion.
    #[arg(long = "K")]
    permutations: Option<String>,
    #[arg(long)]
    restarts: Option<String>,
    /// sequential or cv.
    #[arg(long)]
    select: Option<String>,
    /// Held-out block size.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct LooArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    response: Option<String>,
    /// Polynomial degree of each univariate model.
    #[arg(long)]
    degree: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<String>,
    /// Held-out prediction file: response column plus one column per model.
    #[arg(long)]
    loo: Option<String>,
    /// Response column (default y).
    #[arg(long)]
    response: Option<String>,
    #[arg(long = "m-grid")]
    m_grid: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct BayesArgs {
    #[arg(long)]
    config: Option<String>,
    /// m-complete or inside.
    #[arg(long)]
    truth: Option<String>,
    /// all, squared, absolute or log.
    #[arg(long)]
    loss: Option<String>,
    /// all, bayes or plugin.
    #[arg(long)]
    predictor: Option<String>,
    /// Comma-separated increasing sample sizes.
    #[arg(long = "n-grid")]
    n_grid: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<String>,
}

fn settings(pairs: Vec<(&str, Option<String>)>) -> Settings {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
}

impl PipelineArgs {
    fn settings(self) -> Settings {
        settings(vec![
            ("config", self.config),
            ("data", self.data),
            ("response", self.response),
            ("split", self.split),
            ("J", self.j),
            ("generator", self.generator),
            ("kernel", self.kernel),
            ("noise", self.noise),
            ("m-grid", self.m_grid),
            ("K", self.permutations),
            ("restarts", self.restarts),
            ("select", self.select),
            ("k", self.k),
            ("seed", self.seed),
            ("out-dir", self.out_dir),
        ])
    }
}

fn dispatch(command: Command) -> stacking::Result<String> {
    match command {
        Command::Run(a) => commands::cmd_run(&commands::merge_settings(a.settings())?),
        Command::GenBasis(a) => commands::cmd_gen_basis(&commands::merge_settings(a.settings())?),
        Command::Loo(a) => commands::cmd_loo(&commands::merge_settings(settings(vec![
            ("config", a.config),
            ("data", a.data),
            ("response", a.response),
            ("degree", a.degree),
            ("k", a.k),
            ("seed", a.seed),
            ("out-dir", a.out_dir),
        ]))?),
        Command::SweepM(a) => commands::cmd_sweep_m(&commands::merge_settings(settings(vec![
            ("config", a.config),
            ("loo", a.loo),
            ("response", a.response),
            ("m-grid", a.m_grid),
            ("k", a.k),
            ("out-dir", a.out_dir),
        ]))?),
        Command::VerifyBayes(a) => commands::cmd_verify_bayes(&commands::merge_settings(settings(vec![
            ("config", a.config),
            ("truth", a.truth),
            ("loss", a.loss),
            ("predictor", a.predictor),
            ("n-grid", a.n_grid),
            ("reps", a.reps),
            ("seed", a.seed),
            ("out-dir", a.out_dir),
        ]))?),
        Command::Synth(a) => commands::cmd_synth(&settings(vec![("n", a.n), ("seed", a.seed), ("out", a.out)])),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

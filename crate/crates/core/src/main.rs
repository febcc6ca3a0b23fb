//! Command-line runner: single experiments, scheme comparisons, BER tables,
//! and one-shot importance reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedwave::config::{load_config, ExperimentConfig, Scheme};
use fedwave::error::Result;
use fedwave::modem::{ber, ChannelConfig};
use fedwave::orchestrator::{Experiment, ExperimentResult};
use fedwave::output::{write_outputs, write_summary, SummaryEntry};

#[derive(Parser)]
#[command(
    name = "fedwave",
    version,
    about = "Wireless federated-learning simulator with layer-wise adaptive PSK modulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Run every scheme on a shared config and summarize latency-to-target.
    Compare(RunArgs),
    /// Print the analytic BER over an SNR grid for each candidate level.
    BerTable(BerTableArgs),
    /// Report per-layer importance of the freshly initialized model.
    Importance(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's scheme (e.g. layerwise, am, fixed4, grouped2).
    #[arg(long)]
    scheme: Option<String>,
    /// Force sequential execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct BerTableArgs {
    /// Optional config supplying the candidate levels (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    /// Load the config and apply command-line overrides.
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(scheme) = &self.scheme {
            config.scheme = scheme.parse()?;
        }
        if self.deterministic {
            config.deterministic = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn report(result: &ExperimentResult, scheme: &str) {
    match result.reached_target {
        Some(hit) => println!(
            "{scheme}: reached target at round {} with cumulative latency {:.3} s \
             (final accuracy {:.4})",
            hit.round,
            hit.cumulative_latency_s,
            result.final_accuracy()
        ),
        None => println!(
            "{scheme}: ran {} rounds, final accuracy {:.4}",
            result.records.len(),
            result.final_accuracy()
        ),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let scheme = config.scheme.to_string();
    let seed = config.seed;
    let experiment = Experiment::build(config)?;
    let result = experiment.run()?;
    write_outputs(&result.metrics_rows(&scheme, seed), &result.plan_log(), &args.out)?;
    report(&result, &scheme);
    println!("wrote {}", args.out.join("metrics.csv").display());
    Ok(())
}

const COMPARE_SCHEMES: [&str; 6] = ["layerwise", "am", "fixed2", "fixed4", "fixed8", "fixed16"];

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let base = args.load()?;
    let Some(target) = base.target_accuracy else {
        return Err(fedwave::Error::config(
            "compare needs target_accuracy set in the config",
        ));
    };
    let mut entries = Vec::new();
    for name in COMPARE_SCHEMES {
        let mut config = base.clone();
        config.scheme = name.parse::<Scheme>()?;
        config.validate()?;
        let seed = config.seed;
        let experiment = Experiment::build(config)?;
        let result = experiment.run()?;
        write_outputs(
            &result.metrics_rows(name, seed),
            &result.plan_log(),
            &args.out.join(name),
        )?;
        report(&result, name);
        entries.push(SummaryEntry {
            scheme: name.into(),
            reached: result
                .reached_target
                .map(|hit| (hit.round, hit.cumulative_latency_s)),
            final_accuracy: result.final_accuracy(),
        });
    }
    let summary_path = args.out.join("summary.txt");
    write_summary(&entries, target, &summary_path)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_ber_table(args: &BerTableArgs) -> Result<()> {
    let channel = match &args.config {
        Some(path) => load_config(path)?.channel,
        None => ChannelConfig::default(),
    };
    let mut table = String::from("es_n0");
    for m in &channel.candidate_levels {
        table.push_str(&format!(",ber_m{m}"));
    }
    table.push('\n');
    const POINTS: usize = 41;
    for i in 0..POINTS {
        let exponent = -2.0 + 5.0 * i as f64 / (POINTS - 1) as f64;
        let es_n0 = 10f64.powf(exponent);
        table.push_str(&format!("{es_n0:.6e}"));
        for &m in &channel.candidate_levels {
            table.push_str(&format!(",{:.12e}", ber(m, es_n0)?));
        }
        table.push('\n');
    }
    use std::io::Write;
    match std::io::stdout().write_all(table.as_bytes()) {
        Ok(()) => Ok(()),
        // A closed pipe (e.g. piping into head) is not an error.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(fedwave::Error::io("stdout", e)),
    }
}

fn cmd_importance(args: &RunArgs) -> Result<()> {
    let config = args.load()?;
    let experiment = Experiment::build(config)?;
    let state = experiment.initial_state();
    let importance = experiment.importance_now(&state.model, 0)?;
    let names = experiment.arch.layer_names();
    let sizes = experiment.arch.layer_sizes();
    println!("{:<10} {:>10} {:>16} {:>10}", "layer", "params", "eigenvalue", "weight");
    for k in 0..names.len() {
        println!(
            "{:<10} {:>10} {:>16.6e} {:>10.4}",
            names[k], sizes[k], importance.eigenvalues[k], importance.weights[k]
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::BerTable(args) => cmd_ber_table(args),
        Command::Importance(args) => cmd_importance(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are successes; bad usage is not.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

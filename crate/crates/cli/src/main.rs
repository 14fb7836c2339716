// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedsc_cli::checks::{run_checks, Fault};
use fedsc_cli::config::{defaults_table, parse_config};
use fedsc_cli::error::{CliError, EXIT_CHECKS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK};
use fedsc_cli::experiment::{output_dir, output_root, parse_vary, run_experiment, run_sweep, Outcome};
use fedsc_core::privacy::{dp_from_rdp, dp_preset, sensitivity_bound, share_count};

/// Federated spectral contrastive learning lab.
///
/// Exit status: 0 success, 1 divergence, 2 configuration error, 3 check failure.
/// The default output root is `$FEDSC_OUTPUT_ROOT`, or `runs`.
#[derive(Parser)]
#[command(name = "fedsc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the methods and seeds of a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing output directory.
        #[arg(long)]
        overwrite: bool,
        /// Output directory; overrides `run.output_dir` and the output root.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the identity and oracle suites.
    Checks {
        /// Inject a fault to confirm the suites detect it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Privacy loss of repeated releases.
    Privacy {
        /// Number of releases by the client.
        #[arg(long = "Tj", alias = "tj")]
        tj: Option<u64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Client dataset size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        /// Take mu, sigma, n, delta and the share schedule from a named preset.
        #[arg(long)]
        preset: Option<String>,
        /// Total rounds, used with --preset to count releases.
        #[arg(long, default_value_t = 200)]
        rounds: usize,
    },
    /// Run a config over the cartesian product of key values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for more keys.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run entries concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Print every config key with its default.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Flip the sign of the inter-client gradient term.
    InterSign,
}

fn print_outcome(outcome: &Outcome) {
    println!("wrote {} ({} metric rows)", outcome.dir.display(), outcome.metrics_rows);
    for r in &outcome.results {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "  {:9} seed {:3}: loss {}  knn {}  linear {}",
            r.method.name(),
            r.seed,
            fmt(r.last.global_loss),
            fmt(r.last.knn_accuracy),
            fmt(r.last.linear_accuracy)
        );
    }
}

fn privacy(
    tj: Option<u64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    n: Option<usize>,
    delta: Option<f64>,
    preset: Option<String>,
    rounds: usize,
) -> Result<(), CliError> {
    let base = preset.as_deref().map(dp_preset).transpose()?;
    let need = |v: Option<f64>, from: Option<f64>, name: &str| {
        v.or(from).ok_or_else(|| CliError::Config(format!("--{name} is required without --preset")))
    };
    let mu = need(mu, base.map(|p| p.mu), "mu")?;
    let sigma = need(sigma, base.map(|p| p.sigma), "sigma")?;
    let delta = need(delta, base.map(|p| p.delta), "delta")?;
    let n = n
        .or(base.map(|p| p.dataset_size))
        .ok_or_else(|| CliError::Config("--n is required without --preset".into()))?;
    let tj = tj
        .or(base.map(|p| share_count(rounds, p.share_start_round, p.share_period)))
        .ok_or_else(|| CliError::Config("--Tj is required without --preset".into()))?;
    println!("Tj = {tj}\nmu = {mu}\nsigma = {sigma}\nn = {n}\ndelta = {delta}");
    println!("sensitivity = {}", sensitivity_bound(mu, n)?);
    match dp_from_rdp(tj, mu, sigma, n, delta) {
        Ok(g) => {
            println!("epsilon = {}\noptimal_alpha = {}", g.epsilon, g.alpha);
            if let Some(p) = base {
                println!("preset_target_epsilon = {}", p.target_epsilon);
            }
            Ok(())
        }
        Err(fedsc_core::Error::UnboundedPrivacyLoss) => {
            println!("epsilon = inf\noptimal_alpha = none");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, overwrite, output } => {
            let cfg = parse_config(&config)?;
            let dir = output.unwrap_or_else(|| output_dir(&cfg, &output_root()));
            let outcome = run_experiment(&cfg, &dir, overwrite)?;
            print_outcome(&outcome);
            Ok(EXIT_OK)
        }
        Command::Checks { inject_fault } => {
            let fault = match inject_fault {
                Some(FaultArg::InterSign) => Fault::InterClientSign,
                None => Fault::None,
            };
            let results = run_checks(fault);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::Checks(format!("{failed} of {} suites failed", results.len())));
            }
            println!("all {} suites passed", results.len());
            Ok(EXIT_OK)
        }
        Command::Privacy {
            tj,
            mu,
            sigma,
            n,
            delta,
            preset,
            rounds,
        } => privacy(tj, mu, sigma, n, delta, preset, rounds).map(|()| EXIT_OK),
        Command::Sweep {
            config,
            vary,
            overwrite,
            output,
            parallel,
        } => {
            let cfg = parse_config(&config)?;
            let vary = vary.iter().map(|v| parse_vary(v)).collect::<Result<Vec<_>, _>>()?;
            let base = output.unwrap_or_else(|| output_dir(&cfg, &output_root()));
            let results = run_sweep(&cfg, &vary, &base, overwrite, parallel)?;
            let mut code = EXIT_OK;
            for (entry, r) in &results {
                match r {
                    Ok(o) => print_outcome(o),
                    Err(e) => {
                        eprintln!("{}: {e}", entry.dir.display());
                        code = code.max(if e.exit_code() == EXIT_DIVERGED { EXIT_DIVERGED } else { EXIT_CONFIG });
                    }
                }
            }
            println!("wrote {}", base.join("sweep.csv").display());
            Ok(code)
        }
        Command::Defaults => {
            print!("{}", defaults_table());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    debug_assert!([EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_CHECKS].contains(&code));
    ExitCode::from(code as u8)
}

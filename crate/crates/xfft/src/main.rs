use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xfft::run::{self, Overrides};

#[derive(Parser)]
#[command(name = "xfft", version, about = "FFT-preconditioned X-FEM homogenization of periodic cells")]
struct Cli {
    /// Worker threads; overrides XFFT_THREADS.
    #[arg(long, global = true, env = "XFFT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Relative residual tolerance, replacing solver.tol.
    #[arg(long)]
    tol: Option<f64>,
    /// basic, bb, lcg or ncg, replacing solver.scheme.
    #[arg(long)]
    scheme: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            tol: self.tol,
            scheme: self.scheme.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one load case.
    Solve(RunArgs),
    /// Resolution study over outputs.study.ns.
    Sweep(RunArgs),
    /// Run a built-in golden case: homogeneous, laminate or hashin.
    Validate {
        case: String,
    },
    /// Write the discrete Green symbol of the configured grid.
    SymbolDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Solve(a) => {
            let cfg = run::load_config(&a.config, &a.overrides())?;
            let o = run::run_solve(&cfg, &a.out)?;
            let s = &o.summary;
            println!(
                "N={:?} {} {}: {} iterations, residual {:.3e}, <sigma> = {:?}",
                s.n, s.discretization, s.scheme, s.iterations, s.residual, s.stress
            );
            if let Some(k) = s.bulk_modulus {
                println!("bulk modulus {k:.10}");
            }
            if !s.converged {
                eprintln!("warning: not converged within {} iterations", cfg.solver.maxit);
                return Ok(run::EXIT_NOT_CONVERGED);
            }
            Ok(run::EXIT_OK)
        }
        Command::Sweep(a) => {
            let cfg = run::load_config(&a.config, &a.overrides())?;
            let r = run::run_sweep(&cfg, &a.out)?;
            for row in &r.rows {
                println!(
                    "N={:4} h={:.4e} {}={:.10} error={} iterations={}",
                    row.n,
                    row.h,
                    r.metric,
                    row.metric,
                    row.error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "-".into()),
                    row.iterations
                );
            }
            match r.slope {
                Some(s) => println!("slope {s:.3}"),
                None => println!("slope -"),
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if r.rows.iter().all(|r| r.converged) {
                run::EXIT_OK
            } else {
                run::EXIT_NOT_CONVERGED
            })
        }
        Command::Validate { case } => {
            let r = run::validate_builtin(&case)?;
            print!("{r}");
            Ok(if r.pass { run::EXIT_OK } else { run::EXIT_FAILURE })
        }
        Command::SymbolDump { config, out } => {
            let cfg = run::load_config(&config, &Overrides::default())?;
            let d = run::run_symbol_dump(&cfg, &out)?;
            println!("wrote {} ({:?} x {})", out.join(&d.file).display(), d.dims, d.components);
            Ok(run::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(run::EXIT_INVALID_CONFIG as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(run::EXIT_FAILURE as u8);
        }
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}

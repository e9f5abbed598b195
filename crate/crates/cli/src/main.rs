//! `distcrb` command-line driver.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use distcrb::config::{ConfigDocument, Manifest, SweepKind, DEFAULT_CONFIG};
use distcrb::estimator::{ml_estimate, LikelihoodEvaluator};
use distcrb::fim_crb::{crb_for_bits, fim_report_csv, fim_summary, Component};
use distcrb::montecarlo::{
    run_correlation_sweep, run_mismatch_experiment, run_offset_sweep, run_rmse_sweep, CorrelationKind, SweepResult,
};
use distcrb::rng::substream;
use distcrb::validation::run_suite;
use distcrb::waveform::random_bits;
use distcrb::Error;

#[derive(Parser)]
#[command(name = "distcrb", version, about = "Bounds and ML estimation for distributed passive radar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; the built-in reference scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seeds.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Bound for one bit draw at `scnr.point_db`.
    Crb,
    /// Bound averaged over bit draws on the SCNR grid.
    Ecrbob,
    /// One synthetic observation and its ML estimate at `scnr.point_db`.
    Mle,
    /// ML RMSE against the averaged bound; see `experiment.sweep`.
    Sweep,
    /// RMSE and bound when the estimator assumes a perturbed signal.
    Mismatch,
    /// Oracle and invariant checks.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Crb => "crb",
            Command::Ecrbob => "ecrbob",
            Command::Mle => "mle",
            Command::Sweep => "sweep",
            Command::Mismatch => "mismatch",
            Command::Validate => "validate",
        }
    }
}

enum Failure {
    Validation(String),
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Invalid { .. } | Error::Dimension { .. } | Error::Colocated { .. } => {
                Failure::Config(e.into())
            }
            _ => Failure::Numerical(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Numerical(e)
    }
}

fn load_config(cli: &Cli) -> Result<ConfigDocument, Failure> {
    let (text, origin) = match &cli.config {
        Some(p) => (
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Config)?,
            p.display().to_string(),
        ),
        None => (DEFAULT_CONFIG.to_string(), "built-in default".to_string()),
    };
    let mut doc = ConfigDocument::parse(&text).map_err(|e| Failure::Config(anyhow::Error::from(e).context(origin)))?;
    if let Some(seed) = cli.seed {
        doc.seeds.seed = seed;
    }
    Ok(doc)
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn print_sweep(result: &SweepResult<f64>) {
    println!("{}", result.label);
    for p in &result.points {
        let s = p.get(Component::Position);
        let v = p.get(Component::Velocity);
        let f = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4e}"));
        println!(
            "  {:>6.1} dB  position rmse {} bound {}  velocity rmse {} bound {}{}",
            p.scnr_db,
            f(s.rmse),
            f(s.recrbob),
            f(v.rmse),
            f(v.recrbob),
            if p.flagged { "  [flagged]" } else { "" }
        );
    }
    if let Some(t) = result.threshold() {
        println!("  threshold: {t} dB");
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let doc = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")
            .map_err(Failure::Config)?;
    }
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))
        .map_err(Failure::Config)?;
    let mut out = Outputs {
        dir: &cli.out,
        written: Vec::new(),
    };
    let seed = doc.seeds.seed;
    let mut verdict = Ok(());
    match cli.command {
        Command::Crb => {
            let sc = doc.scenario::<f64>()?;
            let model = sc.covariance_model()?;
            let mut rng = substream(seed, 0);
            let bits = random_bits(sc.layout.num_tx(), sc.gmsk.num_bits, &mut rng);
            let res = crb_for_bits(&sc, &model, bits)?;
            let summary = fim_summary(&res);
            print!("{summary}");
            out.write("crb.csv", &fim_report_csv(&res))?;
            out.write("crb_summary.txt", &summary)?;
        }
        Command::Ecrbob => {
            let mut plan = doc.plan::<f64>()?;
            plan.trials = 0;
            let res = run_rmse_sweep(&plan, "ecrbob")?;
            print_sweep(&res);
            out.write("ecrbob.csv", &res.to_csv())?;
        }
        Command::Mle => {
            let sc = doc.scenario::<f64>()?;
            let model = sc.covariance_model()?;
            let search = doc.search::<f64>();
            let mut rng = substream(seed, 0);
            let bits = random_bits(sc.layout.num_tx(), sc.gmsk.num_bits, &mut rng);
            let waveform = sc.waveform(bits)?;
            let r = model.synthesize(&sc.steering(&waveform, &sc.truth, None)?, &mut rng);
            let eval = LikelihoodEvaluator::new(&sc, &model, &waveform, None, &r)?;
            let est = ml_estimate(&eval, &search)?;
            let (t, h) = (sc.truth, est.theta_hat);
            let csv = format!(
                "quantity,x_m,y_m,vx_mps,vy_mps,log_likelihood\ntruth,{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\nestimate,{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                t.x,
                t.y,
                t.vx,
                t.vy,
                eval.evaluate(&t),
                h.x,
                h.y,
                h.vx,
                h.vy,
                est.log_likelihood
            );
            println!(
                "estimate ({:.3}, {:.3}) m, ({:.4}, {:.4}) m/s after {} simplex iterations{}",
                h.x,
                h.y,
                h.vx,
                h.vy,
                est.iterations,
                if est.converged { "" } else { " (not converged)" }
            );
            if !search.contains(&h) {
                verdict = Err(Failure::Numerical(anyhow::anyhow!("estimate left the search box")));
            }
            out.write("mle.csv", &csv)?;
        }
        Command::Sweep => {
            let plan = doc.plan::<f64>()?;
            let results = match doc.experiment.sweep {
                SweepKind::Scnr => vec![run_rmse_sweep(&plan, "scnr")?],
                SweepKind::FreqOffset => run_offset_sweep(&plan, &doc.experiment.freq_offsets_hz)?,
                SweepKind::Reflection => {
                    run_correlation_sweep(&plan, CorrelationKind::Reflection, &doc.reflection_decays())?
                }
                SweepKind::Noise => run_correlation_sweep(&plan, CorrelationKind::Noise, &doc.noise_decays())?,
            };
            if results.is_empty() {
                return Err(Failure::Config(anyhow::anyhow!(
                    "the experiment section lists no values for the selected sweep"
                )));
            }
            for r in &results {
                print_sweep(r);
                out.write(&format!("sweep_{}.csv", r.label), &r.to_csv())?;
            }
        }
        Command::Mismatch => {
            let plan = doc.plan::<f64>()?;
            let res = run_mismatch_experiment(&plan)?;
            print_sweep(&res.mismatched);
            print_sweep(&res.matched_bound);
            for (p, unstable) in res.mismatched.points.iter().zip(&res.unstable_draws) {
                if *unstable > 0 {
                    eprintln!(
                        "warning: {unstable} of {} draws at {} dB failed the mismatch stability or weight coverage check",
                        plan.bit_draws, p.scnr_db
                    );
                }
            }
            out.write("mismatch.csv", &res.mismatched.to_csv())?;
            out.write("mismatch_matched_bound.csv", &res.matched_bound.to_csv())?;
        }
        Command::Validate => {
            let sc = doc.scenario::<f64>()?;
            let report = run_suite(&sc, seed, doc.experiment.mismatch_samples.max(2))?;
            for c in &report.checks {
                println!(
                    "{} {:<32} {:.3e} (tolerance {:e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            out.write("validation.csv", &report.to_csv())?;
            if !report.passed() {
                verdict = Err(Failure::Validation("one or more checks failed".into()));
            }
        }
    }
    let manifest = Manifest::new(cli.command.name(), &doc, out.written.clone());
    out.write("manifest.json", &manifest.to_json())?;
    verdict
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ncssl_core::experiment::runner::{ablation_path, aggregate_path};
use ncssl_core::experiment::{compare_head_ablation, parse_config, run_experiment, ExperimentConfig, RunSummary};
use ncssl_core::population::audit::{run_audit, AuditConfig};
use ncssl_core::tpm::{run_suite, TpmConfig};
use ncssl_core::Error;

#[derive(Parser)]
#[command(name = "ncssl", version, about = "Synthetic non-contrastive SSL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write CSV/JSON outputs.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fail unless at least this fraction of seeds ends diverse.
        #[arg(long)]
        min_diverse: Option<f64>,
    },
    /// Run matched seeds with and without head training.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Check the power-sequence growth bounds numerically.
    TpmCheck {
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Multiplier standing in for hidden constants.
        #[arg(long, default_value_t = 4.0)]
        slack: f64,
        /// Approximate iterations per grid point.
        #[arg(long, default_value_t = 2.0e7)]
        target_steps: f64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Audit population formulas against Monte-Carlo on random states.
    Popcheck {
        #[arg(long, default_value_t = 10)]
        states: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the batch-gradient comparison.
        #[arg(long)]
        no_gradients: bool,
        #[arg(long)]
        json: bool,
    },
}

/// Config file plus per-key overrides. Values stay strings here so parse
/// errors name the flag.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    d: Option<String>,
    /// Patches per sample.
    #[arg(long = "P")]
    patches: Option<String>,
    /// Feature patches per sample.
    #[arg(long = "P0")]
    feature_patches: Option<String>,
    #[arg(long)]
    alpha1: Option<String>,
    #[arg(long)]
    alpha2: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    /// `canonical` or `random`.
    #[arg(long)]
    basis: Option<String>,
    /// Batch size.
    #[arg(long = "N")]
    batch_size: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long = "etaE")]
    eta_head: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// Train the head (`true`/`false`).
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "log_every")]
    log_every: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long = "eval_samples")]
    eval_samples: Option<String>,
    #[arg(long = "corr_samples")]
    corr_samples: Option<String>,
    #[arg(long = "emit_population")]
    emit_population: Option<String>,
    #[arg(long = "output_dir")]
    output_dir: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(String, String)> {
        let pairs = [
            ("name", &self.name),
            ("d", &self.d),
            ("P", &self.patches),
            ("P0", &self.feature_patches),
            ("alpha1", &self.alpha1),
            ("alpha2", &self.alpha2),
            ("sigma", &self.sigma),
            ("basis", &self.basis),
            ("N", &self.batch_size),
            ("m", &self.m),
            ("eta", &self.eta),
            ("etaE", &self.eta_head),
            ("steps", &self.steps),
            ("head", &self.head),
            ("seed", &self.seed),
            ("log_every", &self.log_every),
            ("repeats", &self.repeats),
            ("eval_samples", &self.eval_samples),
            ("corr_samples", &self.corr_samples),
            ("emit_population", &self.emit_population),
            ("output_dir", &self.output_dir),
            ("threads", &self.threads),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    fn load(&self) -> Result<ExperimentConfig, Error> {
        // Warnings are logged when the experiment starts.
        let (config, _warnings) = parse_config(self.config.as_deref(), &self.flags())?;
        Ok(config)
    }
}

/// Outcome of a subcommand: `Ok(true)` when every assertion held.
type Verdict = anyhow::Result<bool>;

fn fmt_phase(t: Option<usize>) -> String {
    t.map_or_else(|| "-".into(), |t| t.to_string())
}

fn print_runs(runs: &[RunSummary]) {
    println!(
        "{:>6}  {:<22} {:>7} {:>9} {:>9} {:>7} {:>7} {:>7} {:>8} {:>7}",
        "seed", "class", "|corr|", "L_corr", "L-OPT", "T1", "T2", "T3", "E_peak", "fall"
    );
    for s in runs {
        println!(
            "{:>6}  {:<22} {:>7.3} {:>9.4} {:>9.4} {:>7} {:>7} {:>7} {:>8.3} {:>7.3}",
            s.seed,
            s.classification.to_string(),
            s.max_abs_corr(),
            s.loss_corr,
            s.excess_loss(),
            fmt_phase(s.phases.t1),
            fmt_phase(s.phases.t2),
            fmt_phase(s.phases.t3),
            s.head_rise_fall.peak,
            s.head_rise_fall.ratio
        );
    }
}

fn cmd_run(args: &ConfigArgs, min_diverse: Option<f64>) -> Verdict {
    let config = args.load()?;
    let outcome = run_experiment(&config).with_context(|| format!("experiment `{}`", config.name))?;
    print_runs(&outcome.summaries());
    let agg = &outcome.aggregate;
    println!(
        "{}: {}/{} diverse, {} collapsed, {} failed, OPT {:.4}; aggregate at {}",
        agg.name,
        agg.diverse,
        agg.runs + agg.failures.len(),
        agg.dimensional_collapse,
        agg.failures.len(),
        agg.opt,
        aggregate_path(&config).display()
    );
    for f in &agg.failures {
        println!("failed: {}", f.error);
    }
    let mut ok = agg.failures.is_empty();
    if let Some(min) = min_diverse {
        let frac = agg.diverse_fraction();
        let pass = frac >= min;
        println!("{} diverse fraction {frac:.3} (need {min})", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    }
    Ok(ok)
}

fn cmd_ablate(args: &ConfigArgs) -> Verdict {
    let config = args.load()?;
    let (report, with, without) = compare_head_ablation(&config)?;
    println!("with head:");
    print_runs(&with.summaries());
    println!("without head:");
    print_runs(&without.summaries());
    println!(
        "{:>6}  {:>10} {:>10}  {:<22} {:<22} {:>9} {:>9}",
        "seed", "corr(E)", "corr(I)", "class(E)", "class(I)", "L-OPT(E)", "L-OPT(I)"
    );
    for r in &report.rows {
        println!(
            "{:>6}  {:>10.3} {:>10.3}  {:<22} {:<22} {:>9.4} {:>9.4}",
            r.seed,
            r.with_head_corr,
            r.without_head_corr,
            r.with_head_class.to_string(),
            r.without_head_class.to_string(),
            r.with_head_excess_loss,
            r.without_head_excess_loss
        );
    }
    let (a, b) = (report.with_head.mean_abs_corr, report.without_head.mean_abs_corr);
    let pass = a < b;
    println!(
        "{} mean |corr| with head {a:.3} vs without {b:.3}; report at {}",
        if pass { "PASS" } else { "FAIL" },
        ablation_path(&config).display()
    );
    Ok(pass && report.with_head.failures.is_empty() && report.without_head.failures.is_empty())
}

fn cmd_tpm(delta: f64, slack: f64, target_steps: f64, json: bool) -> Verdict {
    let config = TpmConfig {
        delta,
        slack,
        target_steps,
        ..TpmConfig::default()
    };
    let report = run_suite(&config)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(report.all_pass());
    }
    let mark = |b: bool| if b { "PASS" } else { "FAIL" };
    println!(
        "{:>5} {:>2} {:>4} {:>10} {:>9}  {:>12} {:>12} {:>12}  {:<4}  {:>9} {:>9} {:>9}  {:<4}",
        "x0", "q", "A", "eta", "steps", "lower", "sum eta C", "upper", "", "lower'", "sum'", "upper'", ""
    );
    for r in &report.grid {
        let deg = r.degree.map_or_else(
            || format!("{:>9} {:>9} {:>9}  {:<4}", "-", "-", "-", "n/a"),
            |d| format!("{:>9.3} {:>9.3} {:>9.3}  {:<4}", d.lower, d.sum, d.upper, mark(d.pass)),
        );
        println!(
            "{:>5} {:>2} {:>4} {:>10.3e} {:>9}  {:>12.4e} {:>12.4e} {:>12.4e}  {:<4}  {deg}",
            r.x0,
            r.q,
            r.a,
            r.eta,
            r.steps,
            r.growth_lower,
            r.sum_eta_c,
            r.growth_upper,
            mark(r.growth_pass)
        );
    }
    let l = &report.lottery;
    println!("{} coupled growth: max y/y0 = {:.5} (bound {})", mark(l.pass), l.ratio, l.bound);
    let s = &report.sqrt_growth;
    println!(
        "{} sqrt growth: C = {:.6}, x_T = {:.6}, sqrt(C) = {:.6}, |x_T - sqrt(C)| = {:.3e} (tol {:e}); sqrt(x0^2 + 2C) = {:.6}",
        mark(s.pass),
        s.c,
        s.x_final,
        s.sqrt_c,
        s.deviation,
        s.tolerance,
        (s.x0 * s.x0 + 2.0 * s.c).sqrt()
    );
    Ok(report.all_pass())
}

fn cmd_popcheck(states: usize, samples: usize, seed: u64, no_gradients: bool, json: bool) -> Verdict {
    let config = AuditConfig {
        states,
        samples,
        seed,
        ..AuditConfig::default()
    };
    let report = run_audit(&config, !no_gradients)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{:>3} {:>9} {:>9} {:>8} {:>6} {:>6}", "#", "L_pop", "L_emp", "rel", "max z", "grad z");
        for s in &report.states {
            let zmax = s.u_z.iter().chain(&s.q_inv_sq_z).fold(0.0f64, |a, &b| a.max(b));
            let gmax = s.grad_z.iter().fold(0.0f64, |a, &b| a.max(b));
            println!(
                "{:>3} {:>9.5} {:>9.5} {:>8.2e} {:>6.2} {:>6.2}",
                s.index, s.pop_loss, s.emp_loss, s.loss_rel_err, zmax, gmax
            );
        }
        println!(
            "loss {} moments {} gradients {}",
            report.loss_pass(),
            report.moments_pass(),
            if no_gradients { "skipped".to_string() } else { report.grad_pass().to_string() }
        );
    }
    Ok(report.loss_pass() && report.moments_pass() && report.grad_pass())
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Parse { .. } | Error::InvalidParameter(_))
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let verdict = match &cli.command {
        Command::Run { config, min_diverse } => cmd_run(config, *min_diverse),
        Command::Ablate { config } => cmd_ablate(config),
        Command::TpmCheck {
            delta,
            slack,
            target_steps,
            json,
        } => cmd_tpm(*delta, *slack, *target_steps, *json),
        Command::Popcheck {
            states,
            samples,
            seed,
            no_gradients,
            json,
        } => cmd_popcheck(*states, *samples, *seed, *no_gradients, *json),
    };
    match verdict {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}

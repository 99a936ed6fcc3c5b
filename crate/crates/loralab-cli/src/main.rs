//! Thin command-line front end. All real work lives in `loralab::commands`;
//! this binary parses flags, prints outcomes, and maps errors to exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use loralab::commands::{
    cmd_audit, cmd_count_params, cmd_gradcheck, cmd_merge, cmd_sweep, cmd_train, RunOverrides,
    SweepOutcome,
};
use loralab::train::Precision;
use loralab::verify::GradCheckReport;
use loralab::Error;

/// Exit status vocabulary: success and passing checks exit 0, spec or
/// input validation problems exit 2, training divergence exits 3, and
/// failing checks or runtime errors exit 1.
const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "loralab", version, about = "Desk-scale fine-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Run-spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Directory for artifacts; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the spec's numeric precision.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl SpecArgs {
    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            seed: self.seed,
            precision: self.precision.map(|p| match p {
                PrecisionArg::Single => Precision::Single,
                PrecisionArg::Double => Precision::Double,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per the spec and write metrics plus a checkpoint.
    Train(SpecArgs),
    /// Run the spec's sweep: rank grid, or budget-matched placements when
    /// the spec lists two or more.
    Sweep(SpecArgs),
    /// Finite-difference gradient checks on the ops and the spec's model.
    Gradcheck(SpecArgs),
    /// Cross-check parameter counts on the spec's placement and 50 random ones.
    Audit(SpecArgs),
    /// Fold a checkpoint's adapters into its base weights and verify.
    Merge {
        /// Checkpoint with unmerged adapters.
        input: PathBuf,
        /// Destination for the merged checkpoint.
        output: PathBuf,
    },
    /// Report trainable-parameter counts and the encoder-scale comparison.
    CountParams(SpecArgs),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Spec { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidInput(_)
        | Error::AdapterState(_) => EXIT_INVALID,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> loralab::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let outcome = cmd_train(&args.spec, &args.out, &args.overrides())?;
            println!(
                "trained {} steps on {:?} ({} trainable params)",
                outcome.spec.train.steps,
                outcome.spec.task.kind,
                outcome.records.last().map_or(0, |r| r.trainable_param_count),
            );
            if let Some(last) = outcome.records.last() {
                println!(
                    "final: step {} train loss {:.6} val accuracy {:.4}",
                    last.step, last.train_loss, last.val_accuracy
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let outcome = cmd_sweep(&args.spec, &args.out, &args.overrides())?;
            let failures = outcome.failures();
            match &outcome {
                SweepOutcome::Rank(report) => {
                    for cell in &report.cells {
                        match &cell.error {
                            None => println!(
                                "{:8} r{:<3} seed {:<3} params {:>8} acc {}",
                                cell.method,
                                cell.rank,
                                cell.seed,
                                cell.trainable_param_count,
                                fmt_acc(cell.final_accuracy),
                            ),
                            Some(e) => println!(
                                "{:8} r{:<3} seed {:<3} failed: {e}",
                                cell.method, cell.rank, cell.seed
                            ),
                        }
                    }
                    for agg in &report.aggregates {
                        println!(
                            "aggregate {:8} r{:<3} mean acc {:.4} +- {:.4} over {} seeds",
                            agg.method, agg.rank, agg.mean_accuracy, agg.std_accuracy, agg.cells
                        );
                    }
                }
                SweepOutcome::Placement(report) => {
                    println!("budget: {} attachment params (first placement)", report.budget);
                    for cell in &report.cells {
                        match &cell.error {
                            None => println!(
                                "{} -> rank {} ({} params, within budget: {}) acc {}",
                                cell.placement,
                                cell.realized_rank,
                                cell.realized_count,
                                cell.within_budget,
                                fmt_acc(cell.final_accuracy),
                            ),
                            Some(e) => println!("{} failed: {e}", cell.placement),
                        }
                    }
                }
            }
            if failures > 0 {
                println!("{failures} cell(s) failed");
                Ok(ExitCode::from(EXIT_FAILURE))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Gradcheck(args) => {
            let outcome = cmd_gradcheck(&args.spec, &args.out, &args.overrides())?;
            print_gradcheck(&outcome.filter);
            print_gradcheck(&outcome.lora);
            print_gradcheck(&outcome.model);
            Ok(pass_code(outcome.pass))
        }
        Command::Audit(args) => {
            let outcome = cmd_audit(&args.spec, &args.out, &args.overrides())?;
            let b = &outcome.spec_report.production;
            println!(
                "{}: adapters {} + filters {} + head {} = {} trainable ({})",
                outcome.spec_placement,
                b.adapters,
                b.filters,
                b.head,
                b.total(),
                agreement(outcome.spec_report.agree),
            );
            let agreed = outcome.random.iter().filter(|r| r.agree).count();
            println!("random placements: {agreed}/{} agree", outcome.random.len());
            Ok(pass_code(outcome.pass))
        }
        Command::Merge { input, output } => {
            let outcome = cmd_merge(&input, &output)?;
            let v = &outcome.verification;
            println!(
                "merged {} adapter-free tensors into {}",
                outcome.manifest.tensors.len(),
                output.display()
            );
            println!(
                "verification: max logit diff {:.3e} over {} inputs (tolerance {:.0e}): {}",
                v.max_logit_diff,
                v.inputs,
                v.tolerance,
                if v.pass { "pass" } else { "FAIL" }
            );
            Ok(pass_code(v.pass))
        }
        Command::CountParams(args) => {
            let outcome = cmd_count_params(&args.spec, &args.out, &args.overrides())?;
            println!(
                "{}: adapters {} + filters {} + head {} = {} trainable",
                outcome.placement,
                outcome.breakdown.adapters,
                outcome.breakdown.filters,
                outcome.breakdown.head,
                outcome.total
            );
            let r = &outcome.reference;
            println!("reference comparison at d=768, d_ff=3072, L=12 (attachments only):");
            println!("  {}: {}", r.baseline_placement, r.baseline_attachments);
            println!("  {}: {}", r.analogous_placement, r.analogous_attachments);
            println!("  ratio: {:.4}", r.ratio);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_gradcheck(report: &GradCheckReport) {
    println!(
        "{}: max rel error {:.3e} (tolerance {:.0e}, {} draws): {}",
        report.subject,
        report.max_rel_error(),
        report.tolerance,
        report.draws,
        if report.pass { "pass" } else { "FAIL" }
    );
}

fn fmt_acc(acc: Option<f64>) -> String {
    acc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
}

fn agreement(agree: bool) -> &'static str {
    if agree {
        "audit agrees"
    } else {
        "AUDIT MISMATCH"
    }
}

fn pass_code(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}

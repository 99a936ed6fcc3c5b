//! Command drivers behind the CLI subcommands. Each loads a run spec,
//! resolves overrides, does the work, and writes its artifacts under the
//! output directory; the thin binary maps outcomes to exit codes.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, save_checkpoint_with, Manifest,
    MergeVerification,
};
use crate::error::{Error, Result};
use crate::metrics::write_jsonl;
use crate::model::{AdaptedModel, AdapterPlacement, MatrixName, ModelConfig};
use crate::rng::stream;
use crate::runspec::RunSpec;
use crate::sweep::{placement_sweep, rank_sweep, PlacementReport, SweepReport};
use crate::task::generate_task;
use crate::tensor::Element;
use crate::train::{train, MetricsRecord, Precision, TrainConfig};
use crate::verify::{
    audit_counts, check_filter_gradients, check_lora_gradients, check_model_gradients,
    merge_equivalence, random_placement, GradCheckReport, GradCheckSettings,
};

/// Flag-level overrides applied on top of the spec file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(precision) = self.precision {
            cfg.precision = precision;
        }
    }
}

/// Wall-clock entry for the timing sidecar file; measured values stay out
/// of the deterministic metrics files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub label: String,
    pub wall_ms: u64,
}

fn load_spec(spec_path: &Path, overrides: &RunOverrides) -> Result<RunSpec> {
    let mut spec = RunSpec::load(spec_path)?;
    overrides.apply(&mut spec.train);
    Ok(spec)
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

fn write_resolved(out_dir: &Path, spec: &RunSpec) -> Result<()> {
    std::fs::write(out_dir.join("resolved.toml"), spec.resolved()?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// What `cmd_train` produced; paths included so callers can inspect files.
#[derive(Debug)]
pub struct TrainOutcome {
    pub spec: RunSpec,
    pub records: Vec<MetricsRecord>,
    pub manifest: Manifest,
    pub final_accuracy: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Train per the spec; write the resolved spec, metrics, timing, and the
/// final checkpoint into `out_dir`.
pub fn cmd_train(
    spec_path: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<TrainOutcome> {
    let spec = load_spec(spec_path, overrides)?;
    prepare_out(out_dir)?;
    write_resolved(out_dir, &spec)?;
    match spec.train.precision {
        Precision::Single => train_impl::<f32>(spec, out_dir),
        Precision::Double => train_impl::<f64>(spec, out_dir),
    }
}

fn train_impl<E: Element>(spec: RunSpec, out_dir: &Path) -> Result<TrainOutcome> {
    let (train_data, val_data) = generate_task(&spec.task, spec.train.seed)?;
    let mut model = AdaptedModel::<E>::build(&spec.model, &spec.placement, spec.train.seed)?;
    let records = train(&mut model, &train_data, &val_data, &spec.train)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &records)?;
    let timings: Vec<TimingRecord> = records
        .iter()
        .map(|r| TimingRecord { label: format!("step.{}", r.step), wall_ms: r.wall_ms })
        .collect();
    write_jsonl(&out_dir.join("timing.jsonl"), &timings)?;

    let checkpoint_path = out_dir.join("model.ckpt");
    let manifest = save_checkpoint(&checkpoint_path, &model)?;
    Ok(TrainOutcome {
        final_accuracy: records.last().map(|r| r.val_accuracy),
        spec,
        records,
        manifest,
        metrics_path,
        checkpoint_path,
    })
}

/// Which harness a sweep spec selects and what it produced.
#[derive(Debug)]
pub enum SweepOutcome {
    Rank(SweepReport),
    Placement(PlacementReport),
}

impl SweepOutcome {
    /// Any cell that failed to train or missed its budget.
    pub fn failures(&self) -> usize {
        match self {
            SweepOutcome::Rank(r) => r.cells.iter().filter(|c| c.error.is_some()).count(),
            SweepOutcome::Placement(r) => r.cells.iter().filter(|c| c.error.is_some()).count(),
        }
    }
}

/// Run the sweep described by the spec's `[sweep]` section: two or more
/// placements select the budget-matched placement sweep, anything else the
/// rank sweep.
pub fn cmd_sweep(
    spec_path: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<SweepOutcome> {
    let spec = load_spec(spec_path, overrides)?;
    let Some(sweep) = spec.sweep.clone() else {
        return Err(Error::Spec {
            path: spec_path.display().to_string(),
            message: "sweep subcommand needs a [sweep] section".into(),
        });
    };
    prepare_out(out_dir)?;
    write_resolved(out_dir, &spec)?;
    match spec.train.precision {
        Precision::Single => sweep_impl::<f32>(spec, sweep, out_dir),
        Precision::Double => sweep_impl::<f64>(spec, sweep, out_dir),
    }
}

fn sweep_impl<E: Element>(
    spec: RunSpec,
    sweep: crate::sweep::SweepSpec,
    out_dir: &Path,
) -> Result<SweepOutcome> {
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    let mut timings = Vec::new();

    if sweep.placements.len() >= 2 {
        let report =
            placement_sweep::<E>(&spec.model, &sweep.placements, &spec.task, &spec.train)?;
        write_jsonl(&out_dir.join("placements.jsonl"), &report.cells)?;
        for (i, cell) in report.cells.iter().enumerate() {
            write_jsonl(&cells_dir.join(format!("placement-{i}.jsonl")), &cell.metrics)?;
            timings.push(TimingRecord {
                label: format!("placement.{i}"),
                wall_ms: cell.wall_ms,
            });
        }
        timings.push(TimingRecord { label: "total".into(), wall_ms: report.wall_ms });
        write_jsonl(&out_dir.join("timing.jsonl"), &timings)?;
        Ok(SweepOutcome::Placement(report))
    } else {
        let report = rank_sweep::<E>(&spec.model, &sweep, &spec.task, &spec.train)?;
        write_jsonl(&out_dir.join("cells.jsonl"), &report.cells)?;
        write_jsonl(&out_dir.join("aggregate.jsonl"), &report.aggregates)?;
        for cell in &report.cells {
            let name = format!("{}-r{}-seed{}.jsonl", cell.method, cell.rank, cell.seed);
            write_jsonl(&cells_dir.join(name), &cell.metrics)?;
            timings.push(TimingRecord {
                label: format!("{}.r{}.seed{}", cell.method, cell.rank, cell.seed),
                wall_ms: cell.wall_ms,
            });
        }
        timings.push(TimingRecord { label: "total".into(), wall_ms: report.wall_ms });
        write_jsonl(&out_dir.join("timing.jsonl"), &timings)?;
        Ok(SweepOutcome::Rank(report))
    }
}

/// The three gradient checks a `gradcheck` run performs.
#[derive(Debug, Serialize)]
pub struct GradcheckOutcome {
    pub filter: GradCheckReport,
    pub lora: GradCheckReport,
    pub model: GradCheckReport,
    pub pass: bool,
}

/// Check the isolated filter and adapter ops at 1e-6 and the spec's full
/// model at 1e-5, always in double precision.
pub fn cmd_gradcheck(
    spec_path: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<GradcheckOutcome> {
    let spec = load_spec(spec_path, overrides)?;
    prepare_out(out_dir)?;
    let seed = spec.train.seed;

    let filter = check_filter_gradients(8, 3, 5, &GradCheckSettings::isolated(seed))?;
    let lora = check_lora_gradients(12, 10, 3, &GradCheckSettings::isolated(seed))?;
    let seq_len = spec.model.max_seq_len.min(6);
    let model = check_model_gradients(
        &spec.model,
        &spec.placement,
        2,
        seq_len,
        &GradCheckSettings::full_model(seed),
    )?;

    let outcome = GradcheckOutcome {
        pass: filter.pass && lora.pass && model.pass,
        filter,
        lora,
        model,
    };
    write_json(&out_dir.join("gradcheck.json"), &outcome)?;
    Ok(outcome)
}

/// One randomized-placement audit row.
#[derive(Debug, Serialize)]
pub struct RandomAudit {
    pub placement: String,
    pub total: usize,
    pub agree: bool,
}

/// Spec audit plus fifty randomized placements.
#[derive(Debug, Serialize)]
pub struct AuditOutcome {
    pub spec_placement: String,
    pub spec_report: crate::verify::AuditReport,
    pub random: Vec<RandomAudit>,
    pub pass: bool,
}

/// Compare the production parameter counts against the independent
/// recount, on the spec's placement and on 50 random placements.
pub fn cmd_audit(
    spec_path: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<AuditOutcome> {
    let spec = load_spec(spec_path, overrides)?;
    prepare_out(out_dir)?;
    let spec_report = audit_counts(&spec.model, &spec.placement);

    let mut rng = stream(spec.train.seed, "audit.random");
    let random: Vec<RandomAudit> = (0..50)
        .map(|_| {
            let placement = random_placement(&mut rng, &spec.model);
            let report = audit_counts(&spec.model, &placement);
            RandomAudit {
                placement: placement.id(),
                total: report.production.total(),
                agree: report.agree,
            }
        })
        .collect();

    let outcome = AuditOutcome {
        spec_placement: spec.placement.id(),
        pass: spec_report.agree && random.iter().all(|r| r.agree),
        spec_report,
        random,
    };
    write_json(&out_dir.join("audit.json"), &outcome)?;
    Ok(outcome)
}

/// What a merge produced. The checkpoint is written even when verification
/// fails; `verification.pass` carries the verdict.
#[derive(Debug)]
pub struct MergeOutcome {
    pub manifest: Manifest,
    pub verification: MergeVerification,
}

/// Tolerance the merge verification enforces on logit drift.
pub const MERGE_TOLERANCE: f64 = 1e-5;

/// Fold a checkpoint's adapters into its base weights, verify on 10 random
/// inputs, and write the merged checkpoint.
pub fn cmd_merge(input: &Path, output: &Path) -> Result<MergeOutcome> {
    let manifest = read_manifest(input)?;
    if manifest.merged {
        return Err(Error::AdapterState(format!(
            "{} is already merged; refusing to merge twice",
            input.display()
        )));
    }
    match manifest.precision {
        Precision::Single => merge_impl::<f32>(input, output),
        Precision::Double => merge_impl::<f64>(input, output),
    }
}

fn merge_impl<E: Element>(input: &Path, output: &Path) -> Result<MergeOutcome> {
    let (mut model, manifest) = load_checkpoint::<E>(input)?;
    let config = model.config().clone();
    let mut rng = stream(manifest.seed, "merge.verify");
    let seq_len = config.max_seq_len.min(8);
    let batches: Vec<Vec<Vec<usize>>> = (0..10)
        .map(|_| {
            vec![(0..seq_len).map(|_| rng.random_range(0..config.vocab_size)).collect()]
        })
        .collect();

    let max_logit_diff = merge_equivalence(&mut model, &batches)?;
    let verification = MergeVerification {
        inputs: batches.len(),
        max_logit_diff,
        tolerance: MERGE_TOLERANCE,
        pass: max_logit_diff <= MERGE_TOLERANCE,
    };
    let manifest = save_checkpoint_with(output, &model, Some(verification.clone()))?;
    Ok(MergeOutcome { manifest, verification })
}

/// Attachment cost of a placement against the all-six-matrices baseline,
/// both at encoder dimensions d=768, d_ff=3072, L=12.
#[derive(Debug, Serialize)]
pub struct ReferenceComparison {
    pub baseline_placement: String,
    pub baseline_attachments: usize,
    pub analogous_placement: String,
    pub analogous_attachments: usize,
    pub ratio: f64,
}

/// Parameter counts for the spec's placement plus the fixed reference
/// comparison at encoder scale.
#[derive(Debug, Serialize)]
pub struct CountParamsOutcome {
    pub placement: String,
    pub breakdown: crate::model::CountBreakdown,
    pub total: usize,
    pub attachments: usize,
    pub reference: ReferenceComparison,
}

/// The encoder-scale configuration the reference comparison counts against.
pub fn reference_config() -> ModelConfig {
    ModelConfig {
        num_layers: 12,
        hidden_dim: 768,
        num_heads: 12,
        ffn_dim: 3072,
        vocab_size: 2,
        max_seq_len: 2,
        num_classes: 2,
    }
}

/// Count the baseline (all six matrices at rank 8, no filters) against the
/// leaner adapted-output placement (W_o, W_f1, W_f2 at rank 6 plus
/// per-layer filters at rank 8) at encoder scale.
pub fn reference_comparison() -> ReferenceComparison {
    let config = reference_config();
    let baseline = AdapterPlacement::lora_on(MatrixName::ALL, 8);
    let analogous = AdapterPlacement::lora_on(
        [MatrixName::WO, MatrixName::WF1, MatrixName::WF2],
        6,
    )
    .with_filters_on_all_layers(config.num_layers, 8);

    let baseline_attachments =
        crate::model::count_from_placement(&config, &baseline).adapters_and_filters();
    let analogous_attachments =
        crate::model::count_from_placement(&config, &analogous).adapters_and_filters();
    ReferenceComparison {
        baseline_placement: baseline.id(),
        baseline_attachments,
        analogous_placement: analogous.id(),
        analogous_attachments,
        ratio: analogous_attachments as f64 / baseline_attachments as f64,
    }
}

/// Report the trainable-parameter breakdown for the spec's placement and
/// the encoder-scale reference comparison.
pub fn cmd_count_params(
    spec_path: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<CountParamsOutcome> {
    let spec = load_spec(spec_path, overrides)?;
    prepare_out(out_dir)?;
    let breakdown = crate::model::count_from_placement(&spec.model, &spec.placement);
    let outcome = CountParamsOutcome {
        placement: spec.placement.id(),
        breakdown,
        total: breakdown.total(),
        attachments: breakdown.adapters_and_filters(),
        reference: reference_comparison(),
    };
    write_json(&out_dir.join("counts.json"), &outcome)?;
    Ok(outcome)
}

//! Rank and placement sweep harnesses. Cells are independent runs, so they
//! fan out across a thread pool; results keep spec order regardless of
//! scheduling, and per-cell failures are recorded without sinking the sweep.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptedModel, AdapterPlacement, MatrixName, ModelConfig};
use crate::task::{generate_task, Dataset, SyntheticTask};
use crate::tensor::Element;
use crate::train::{evaluate_accuracy, train, MetricsRecord, TrainConfig};

/// Environment variable capping sweep worker threads. Unset or 0 means the
/// thread pool picks its own width.
pub const WORKERS_ENV: &str = "LORALAB_WORKERS";

/// Adapter recipe a sweep compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Loratrf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Loratrf => "loratrf",
        }
    }
}

/// What to sweep: the rank grid, the methods to compare, one seed per
/// repeat, and (for placement sweeps) the placements to budget-match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ranks: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub placements: Vec<AdapterPlacement>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            ranks: vec![4, 8, 16, 32],
            methods: vec![Method::Lora, Method::Loratrf],
            seeds: vec![0, 1, 2],
            placements: Vec::new(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::InvalidConfig("sweep ranks list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("sweep methods list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep seeds list is empty".into()));
        }
        Ok(())
    }
}

/// One trained sweep cell. `error` carries a failed run's message; such a
/// cell has no metrics. Wall time is measured, so it stays out of the
/// serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub placement: String,
    pub trainable_param_count: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Mean and population standard deviation of final accuracy across the
/// seeds of one (method, rank) group, in spec order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub rank: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Group cells by (method, rank) in first-appearance order and average
/// their final accuracies. Errored cells are skipped.
pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut order: Vec<(String, usize)> = Vec::new();
    for cell in cells {
        let key = (cell.method.clone(), cell.rank);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(method, rank)| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == method && c.rank == rank)
                .filter_map(|c| c.final_accuracy)
                .collect();
            let n = accs.len().max(1) as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            Aggregate { method, rank, mean_accuracy: mean, std_accuracy: var.sqrt(), cells: accs.len() }
        })
        .collect()
}

/// The placement a rank sweep perturbs when the spec supplies none: the
/// attention-output and feed-forward projections, filters everywhere.
pub fn default_sweep_template(config: &ModelConfig) -> AdapterPlacement {
    AdapterPlacement::lora_on([MatrixName::WO, MatrixName::WF1, MatrixName::WF2], 8)
        .with_filters_on_all_layers(config.num_layers, 8)
}

fn cell_placement(
    template: &AdapterPlacement,
    method: Method,
    rank: usize,
    num_layers: usize,
) -> AdapterPlacement {
    let mut p = template.clone();
    p.lora_rank = rank;
    match method {
        Method::Lora => p.filter_layers.clear(),
        Method::Loratrf => {
            if p.filter_layers.is_empty() {
                p.filter_layers = (0..num_layers).collect();
            }
        }
    }
    p
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let workers: usize = raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("{WORKERS_ENV}={raw} is not a worker count"))
        })?;
        if workers > 0 {
            builder = builder.num_threads(workers);
        }
    }
    builder.build().map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

fn run_cell<E: Element>(
    config: &ModelConfig,
    placement: &AdapterPlacement,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    method: Method,
    rank: usize,
    seed: u64,
) -> CellResult {
    let started = Instant::now();
    let mut cell = CellResult {
        method: method.as_str().to_string(),
        rank,
        seed,
        placement: placement.id(),
        trainable_param_count: 0,
        final_loss: None,
        final_accuracy: None,
        metrics: Vec::new(),
        error: None,
        wall_ms: 0,
    };
    let cell_cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = AdaptedModel::<E>::build(config, placement, seed).and_then(|mut model| {
        cell.trainable_param_count = model.count_trainable().total();
        let metrics = train(&mut model, train_data, val_data, &cell_cfg)?;
        let accuracy = match metrics.last() {
            Some(last) => last.val_accuracy,
            None => evaluate_accuracy(&model, val_data)?,
        };
        Ok((metrics, accuracy))
    });
    match outcome {
        Ok((metrics, accuracy)) => {
            cell.final_loss = metrics.last().map(|m| m.train_loss);
            cell.final_accuracy = Some(accuracy);
            cell.metrics = metrics;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell.wall_ms = started.elapsed().as_millis() as u64;
    cell
}

/// Train one cell per (method, rank, seed) over a shared dataset and
/// aggregate accuracy per (method, rank).
pub fn rank_sweep<E: Element>(
    config: &ModelConfig,
    spec: &SweepSpec,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    spec.validate()?;
    config.validate()?;
    let template = match spec.placements.first() {
        Some(p) => p.clone(),
        None => default_sweep_template(config),
    };
    if template.lora_targets.is_empty() {
        return Err(Error::InvalidConfig(
            "rank sweep template placement adapts no matrices; rank has nothing to vary".into(),
        ));
    }
    let started = Instant::now();
    let (train_data, val_data) = generate_task(task, cfg.seed)?;

    let mut grid = Vec::new();
    for &method in &spec.methods {
        for &rank in &spec.ranks {
            for &seed in &spec.seeds {
                grid.push((method, rank, seed));
            }
        }
    }

    let pool = worker_pool()?;
    let cells: Vec<CellResult> = pool.install(|| {
        grid.par_iter()
            .map(|&(method, rank, seed)| {
                let placement = cell_placement(&template, method, rank, config.num_layers);
                if let Err(e) = placement.validate(config) {
                    return CellResult {
                        method: method.as_str().to_string(),
                        rank,
                        seed,
                        placement: placement.id(),
                        trainable_param_count: 0,
                        final_loss: None,
                        final_accuracy: None,
                        metrics: Vec::new(),
                        error: Some(e.to_string()),
                        wall_ms: 0,
                    };
                }
                run_cell::<E>(config, &placement, &train_data, &val_data, cfg, method, rank, seed)
            })
            .collect()
    });

    let aggregates = aggregate(&cells);
    Ok(SweepReport { cells, aggregates, wall_ms: started.elapsed().as_millis() as u64 })
}

/// One placement row of a budget-matched comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementCell {
    pub placement: String,
    /// Rank chosen to land the trainable count nearest the shared budget.
    pub realized_rank: usize,
    /// Adapter plus filter parameters at the realized rank.
    pub realized_count: usize,
    /// The budget every row is matched against (first placement's count).
    pub budget: usize,
    pub within_budget: bool,
    pub final_accuracy: Option<f64>,
    pub metrics: Vec<MetricsRecord>,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub budget: usize,
    pub tolerance: f64,
    pub cells: Vec<PlacementCell>,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Matching tolerance: realized attachment counts may differ from the
/// budget by at most this fraction.
pub const BUDGET_TOLERANCE: f64 = 0.10;

/// Pick the rank whose attachment cost (adapters plus filters; the head is
/// identical everywhere) lands closest to `budget`.
fn match_budget(
    config: &ModelConfig,
    placement: &AdapterPlacement,
    budget: usize,
) -> (usize, usize) {
    if placement.lora_targets.is_empty() {
        let count = crate::model::count_from_placement(config, placement).adapters_and_filters();
        return (placement.lora_rank, count);
    }
    let max_rank = placement
        .lora_targets
        .iter()
        .map(|t| {
            let (m, n) = t.dims(config);
            m.min(n)
        })
        .min()
        .unwrap_or(1)
        .max(1);
    let mut best = (1usize, usize::MAX);
    for rank in 1..=max_rank {
        let mut candidate = placement.clone();
        candidate.lora_rank = rank;
        let count = crate::model::count_from_placement(config, &candidate).adapters_and_filters();
        let miss = count.abs_diff(budget);
        if miss < best.1.abs_diff(budget) || best.1 == usize::MAX {
            best = (rank, count);
        }
    }
    best
}

/// Budget-match every placement to the first one's attachment cost, then
/// train the matched placements. Placements that cannot reach the budget
/// within tolerance are flagged and skipped, not dropped.
pub fn placement_sweep<E: Element>(
    config: &ModelConfig,
    placements: &[AdapterPlacement],
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<PlacementReport> {
    if placements.is_empty() {
        return Err(Error::InvalidConfig("placement sweep needs at least one placement".into()));
    }
    config.validate()?;
    for p in placements {
        p.validate(config)?;
    }
    let started = Instant::now();
    let budget =
        crate::model::count_from_placement(config, &placements[0]).adapters_and_filters();
    let (train_data, val_data) = generate_task(task, cfg.seed)?;

    let matched: Vec<(AdapterPlacement, PlacementCell)> = placements
        .iter()
        .map(|p| {
            let (rank, count) = match_budget(config, p, budget);
            let mut realized = p.clone();
            realized.lora_rank = rank;
            let within =
                count.abs_diff(budget) as f64 <= BUDGET_TOLERANCE * budget.max(1) as f64;
            let cell = PlacementCell {
                placement: realized.id(),
                realized_rank: rank,
                realized_count: count,
                budget,
                within_budget: within,
                final_accuracy: None,
                metrics: Vec::new(),
                error: if within {
                    None
                } else {
                    Some(format!(
                        "no integer rank lands within {:.0}% of budget {budget}; closest is \
                         {count} at rank {rank}",
                        BUDGET_TOLERANCE * 100.0
                    ))
                },
                wall_ms: 0,
            };
            (realized, cell)
        })
        .collect();

    let pool = worker_pool()?;
    let cells: Vec<PlacementCell> = pool.install(|| {
        matched
            .into_par_iter()
            .map(|(placement, mut cell)| {
                if !cell.within_budget {
                    return cell;
                }
                let run = run_cell::<E>(
                    config,
                    &placement,
                    &train_data,
                    &val_data,
                    cfg,
                    if placement.filter_layers.is_empty() { Method::Lora } else { Method::Loratrf },
                    placement.lora_rank,
                    cfg.seed,
                );
                cell.final_accuracy = run.final_accuracy;
                cell.metrics = run.metrics;
                cell.error = run.error;
                cell.wall_ms = run.wall_ms;
                cell
            })
            .collect()
    });

    Ok(PlacementReport {
        budget,
        tolerance: BUDGET_TOLERANCE,
        cells,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

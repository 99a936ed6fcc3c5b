//! Independent oracles that validate the implementation: a central-difference
//! gradient checker, a scalar-loop filter reference sharing no code with the
//! production path, a parameter-count auditor, and a merge-equivalence probe.

use rand::Rng;
use serde::Serialize;

use crate::adapters::{LoraAdapter, Similarity, TaskAwareFilter};
use crate::error::{Error, Result};
use crate::model::{
    count_from_placement, AdaptedModel, AdapterPlacement, CountBreakdown, FilterScope, FilterSite,
    MatrixName, ModelConfig,
};
use crate::rng::stream;
use crate::tensor::{Graph, Tensor};

/// Relative error with the denominator floored at 1e-12 so exact-zero
/// gradient pairs compare as equal instead of dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-12)
}

/// [`relative_error`] with a caller-chosen denominator floor. A floor of
/// `f` under tolerance `t` is an absolute tolerance of `f * t` for entries
/// whose true gradient sits below `f`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Knobs of the finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub delta: f64,
    /// Max acceptable relative error.
    pub tolerance: f64,
    /// Independent random parameter/input draws.
    pub draws: usize,
    /// Per-tensor cap on checked entries; tensors larger than this get a
    /// deterministic random subsample. `usize::MAX` checks every scalar.
    pub max_entries_per_tensor: usize,
    /// Denominator floor for the relative error. Central differences in f64
    /// carry an absolute noise of roughly `eps * |loss| / delta` (~1e-11 at
    /// the default step on unit-scale losses), so gradients below that are
    /// pure measurement noise and cannot satisfy any relative bound. A floor
    /// `f` grants entries an absolute allowance of `f * tolerance` while
    /// leaving every gradient above `f` held to the full relative tolerance.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl GradCheckSettings {
    /// Tight tolerance for single ops checked in isolation. The shallow
    /// loss keeps gradients well above the noise floor, so the denominator
    /// floor stays at the degenerate 1e-12 (exact-zero pairs only).
    pub fn isolated(seed: u64) -> Self {
        GradCheckSettings {
            delta: 1e-5,
            tolerance: 1e-6,
            draws: 20,
            max_entries_per_tensor: usize::MAX,
            denominator_floor: 1e-12,
            seed,
        }
    }

    /// Looser tolerance for the full model (deeper composition compounds
    /// round-off); entries subsampled to keep runtime bounded. The 1e-4
    /// floor folds in an absolute allowance of 1e-9, two orders above the
    /// finite-difference noise and four below typical gradient entries; a
    /// wrong adjoint scales with the gradient and still trips the check on
    /// the large entries of the same tensor.
    pub fn full_model(seed: u64) -> Self {
        GradCheckSettings {
            delta: 1e-5,
            tolerance: 1e-5,
            draws: 20,
            max_entries_per_tensor: 24,
            denominator_floor: 1e-4,
            seed,
        }
    }
}

/// Worst observed disagreement for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// Outcome of a gradient check. `pass` holds exactly when every parameter's
/// max relative error is within tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub subject: String,
    pub delta: f64,
    pub tolerance: f64,
    pub draws: usize,
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(subject: &str, settings: &GradCheckSettings, params: Vec<ParamCheck>) -> Self {
        let pass = params.iter().all(|p| p.max_rel_error <= settings.tolerance);
        GradCheckReport {
            subject: subject.to_string(),
            delta: settings.delta,
            tolerance: settings.tolerance,
            draws: settings.draws,
            params,
            pass,
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients of `loss_fn` against central differences for
/// one fixed draw of parameters and inputs.
///
/// `loss_fn` must rebuild the same computation on the graph it is handed;
/// it is invoked once for the backward pass and twice per checked entry.
pub fn gradcheck_once<F>(
    params: &[(String, Tensor<f64>)],
    mut loss_fn: F,
    settings: &GradCheckSettings,
    draw: usize,
) -> Result<Vec<ParamCheck>>
where
    F: FnMut(&Graph<f64>) -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.clear_grad();
    }
    let g = Graph::new();
    let loss = loss_fn(&g)?;
    g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let mut checks = Vec::with_capacity(params.len());
    for (pi, (name, p)) in params.iter().enumerate() {
        let indices = entry_indices(p.numel(), settings, draw, name);
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: analytic[pi].first().copied().unwrap_or(0.0),
            worst_numeric: 0.0,
            entries_checked: indices.len(),
        };
        for i in indices {
            let original = p.with_data(|d| d[i]);
            p.modify(|d| d[i] = original + settings.delta);
            let plus = eval_loss(&mut loss_fn)?;
            p.modify(|d| d[i] = original - settings.delta);
            let minus = eval_loss(&mut loss_fn)?;
            p.modify(|d| d[i] = original);
            let numeric = (plus - minus) / (2.0 * settings.delta);
            let rel =
                relative_error_with_floor(analytic[pi][i], numeric, settings.denominator_floor);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_index = i;
                worst.worst_analytic = analytic[pi][i];
                worst.worst_numeric = numeric;
            }
        }
        checks.push(worst);
    }
    Ok(checks)
}

fn eval_loss<F>(loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&Graph<f64>) -> Result<Tensor<f64>>,
{
    let g = Graph::new();
    Ok(loss_fn(&g)?.item())
}

fn entry_indices(numel: usize, settings: &GradCheckSettings, draw: usize, name: &str) -> Vec<usize> {
    if numel <= settings.max_entries_per_tensor {
        return (0..numel).collect();
    }
    let mut rng = stream(settings.seed, &format!("gradcheck.entries.{draw}.{name}"));
    let mut picked: Vec<usize> = Vec::with_capacity(settings.max_entries_per_tensor);
    while picked.len() < settings.max_entries_per_tensor {
        let i = rng.random_range(0..numel);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

fn merge_worst(report: &mut Vec<ParamCheck>, draw_checks: Vec<ParamCheck>) {
    if report.is_empty() {
        *report = draw_checks;
        return;
    }
    for (acc, new) in report.iter_mut().zip(draw_checks) {
        acc.entries_checked += new.entries_checked;
        if new.max_rel_error > acc.max_rel_error {
            let entries = acc.entries_checked;
            *acc = new;
            acc.entries_checked = entries;
        }
    }
}

fn randomize_uniform(t: &Tensor<f64>, rng: &mut impl Rng, half_range: f64) {
    t.modify(|d| {
        for v in d.iter_mut() {
            *v = rng.random_range(-half_range..half_range);
        }
    });
}

/// Distance below which a pre-clamp similarity counts as sitting on a clamp
/// kink; central differences are invalid across the kink, so samplers
/// redraw. Comfortably larger than the 1e-5 step.
pub const KINK_MARGIN: f64 = 1e-3;

fn near_clamp_kink(sim_values: &[f64]) -> bool {
    sim_values.iter().any(|s| (s - 0.0).abs() < KINK_MARGIN || (s - 1.0).abs() < KINK_MARGIN)
}

/// Gradient-check the task-aware filter in isolation: random parameters and
/// token rows, kink-avoiding, loss = fixed random weighting of the output.
pub fn check_filter_gradients(
    dim: usize,
    filter_rank: usize,
    tokens: usize,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut all = Vec::new();
    for draw in 0..settings.draws {
        let mut rng = stream(settings.seed, &format!("gradcheck.filter.{draw}"));
        let filter = TaskAwareFilter::<f64>::new(dim, filter_rank, Similarity::Cosine, &mut rng)?;
        let h = Tensor::<f64>::zeros(&[tokens, dim]);
        let weights = Tensor::<f64>::zeros(&[tokens, dim]);
        randomize_uniform(&weights, &mut rng, 1.0);

        let mut attempts = 0;
        loop {
            randomize_uniform(filter.task_vector(), &mut rng, 0.7);
            randomize_uniform(filter.t_down(), &mut rng, 0.7);
            randomize_uniform(filter.t_up(), &mut rng, 0.7);
            randomize_uniform(&h, &mut rng, 1.0);
            let g = Graph::new();
            let (_, sim) = filter.apply_traced(&g, &h)?;
            if !near_clamp_kink(&sim.to_vec()) {
                break;
            }
            attempts += 1;
            if attempts > 500 {
                return Err(Error::InvalidInput(
                    "could not sample a kink-free filter configuration".into(),
                ));
            }
        }

        let params = vec![
            ("task_vector".to_string(), filter.task_vector().clone()),
            ("t_down".to_string(), filter.t_down().clone()),
            ("t_up".to_string(), filter.t_up().clone()),
        ];
        let checks = gradcheck_once(
            &params,
            |g| {
                let out = filter.apply(g, &h)?;
                let weighted = g.mul(&out, &weights)?;
                g.sum_all(&weighted)
            },
            settings,
            draw,
        )?;
        merge_worst(&mut all, checks);
    }
    Ok(GradCheckReport::new("filter_apply", settings, all))
}

/// Gradient-check the low-rank adapter forward in isolation.
pub fn check_lora_gradients(
    m: usize,
    n: usize,
    rank: usize,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut all = Vec::new();
    for draw in 0..settings.draws {
        let mut rng = stream(settings.seed, &format!("gradcheck.lora.{draw}"));
        let w0 = Tensor::<f64>::randn(&mut rng, &[m, n], 0.5);
        let adapter = LoraAdapter::new(w0, rank, 16.0, &mut rng)?;
        randomize_uniform(adapter.matrix_a(), &mut rng, 0.7);
        randomize_uniform(adapter.matrix_b(), &mut rng, 0.7);
        let x = Tensor::<f64>::zeros(&[n, 3]);
        randomize_uniform(&x, &mut rng, 1.0);
        let weights = Tensor::<f64>::zeros(&[m, 3]);
        randomize_uniform(&weights, &mut rng, 1.0);

        let params = vec![
            ("A".to_string(), adapter.matrix_a().clone()),
            ("B".to_string(), adapter.matrix_b().clone()),
        ];
        let checks = gradcheck_once(
            &params,
            |g| {
                let out = adapter.forward(g, &x)?;
                let weighted = g.mul(&out, &weights)?;
                g.sum_all(&weighted)
            },
            settings,
            draw,
        )?;
        merge_worst(&mut all, checks);
    }
    Ok(GradCheckReport::new("lora_forward", settings, all))
}

/// Gradient-check the full model's cross-entropy loss with respect to every
/// trainable tensor, resampling any draw whose filters sit on a clamp kink.
pub fn check_model_gradients(
    config: &ModelConfig,
    placement: &AdapterPlacement,
    batch_size: usize,
    seq_len: usize,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut all = Vec::new();
    for draw in 0..settings.draws {
        let mut rng = stream(settings.seed, &format!("gradcheck.model.{draw}"));
        let model = AdaptedModel::<f64>::build(config, placement, rng.random())?;
        let named: Vec<(String, Tensor<f64>)> = model
            .named_tensors()
            .into_iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name, p.tensor))
            .collect();

        let mut attempts = 0;
        let (batch, labels) = loop {
            for (_, t) in &named {
                randomize_uniform(t, &mut rng, 0.5);
            }
            let batch: Vec<Vec<usize>> = (0..batch_size)
                .map(|_| {
                    (0..seq_len).map(|_| rng.random_range(0..config.vocab_size)).collect()
                })
                .collect();
            let labels: Vec<usize> =
                (0..batch_size).map(|_| rng.random_range(0..config.num_classes)).collect();
            let g = Graph::new();
            let (_, sims) = model.forward_traced(&g, &batch)?;
            if !sims.iter().any(|s| near_clamp_kink(&s.to_vec())) {
                break (batch, labels);
            }
            attempts += 1;
            if attempts > 500 {
                return Err(Error::InvalidInput(
                    "could not sample a kink-free model configuration".into(),
                ));
            }
        };

        let checks = gradcheck_once(
            &named,
            |g| {
                let logits = model.forward(g, &batch)?;
                g.cross_entropy(&logits, &labels)
            },
            settings,
            draw,
        )?;
        merge_worst(&mut all, checks);
    }
    Ok(GradCheckReport::new("model_loss", settings, all))
}

/// Scalar-loop reference for the task-aware filter, sharing no code with the
/// production tensor path. One token row in, one row out.
pub fn filter_reference(
    task_vector: &[f64],
    t_down: &[f64],
    t_up: &[f64],
    filter_rank: usize,
    similarity: Similarity,
    h: &[f64],
) -> Result<Vec<f64>> {
    let d = h.len();
    if task_vector.len() != d || t_down.len() != d * filter_rank || t_up.len() != filter_rank * d {
        return Err(Error::InvalidInput(format!(
            "filter_reference dimension mismatch: d={d}, r_T={filter_rank}, \
             |t|={}, |T_down|={}, |T_up|={}",
            task_vector.len(),
            t_down.len(),
            t_up.len()
        )));
    }

    let score = match similarity {
        Similarity::Cosine => {
            let mut dot = 0.0;
            let mut h_sq = 0.0;
            let mut t_sq = 0.0;
            for j in 0..d {
                dot += h[j] * task_vector[j];
                h_sq += h[j] * h[j];
                t_sq += task_vector[j] * task_vector[j];
            }
            dot / (h_sq.sqrt() * t_sq.sqrt() + 1e-8)
        }
        Similarity::Dot => {
            let mut dot = 0.0;
            for j in 0..d {
                dot += h[j] * task_vector[j];
            }
            dot
        }
    };
    let weight = score.clamp(0.0, 1.0);

    let mut mid = vec![0.0; filter_rank];
    for j in 0..d {
        let reweighted = weight * h[j];
        for k in 0..filter_rank {
            mid[k] += reweighted * t_down[j * filter_rank + k];
        }
    }
    let mut out = h.to_vec();
    for k in 0..filter_rank {
        for j in 0..d {
            out[j] += mid[k] * t_up[k * d + j];
        }
    }
    Ok(out)
}

/// Result of comparing the production count against the independent one.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub production: CountBreakdown,
    pub audit: CountBreakdown,
    pub agree: bool,
}

/// Recompute trainable counts from shapes alone and compare them exactly
/// against the production counting engine.
pub fn audit_counts(config: &ModelConfig, placement: &AdapterPlacement) -> AuditReport {
    let production = count_from_placement(config, placement);
    let audit = independent_count(config, placement);
    AuditReport { agree: production == audit, production, audit }
}

/// The audit-side count. Deliberately re-derived from the weight shapes
/// rather than calling into the model module's arithmetic.
fn independent_count(config: &ModelConfig, placement: &AdapterPlacement) -> CountBreakdown {
    let mut adapters = 0;
    for _layer in 0..config.num_layers {
        for target in &placement.lora_targets {
            let (rows, cols) = match target {
                MatrixName::WQ => (config.hidden_dim, config.hidden_dim),
                MatrixName::WK => (config.hidden_dim, config.hidden_dim),
                MatrixName::WV => (config.hidden_dim, config.hidden_dim),
                MatrixName::WO => (config.hidden_dim, config.hidden_dim),
                MatrixName::WF1 => (config.ffn_dim, config.hidden_dim),
                MatrixName::WF2 => (config.hidden_dim, config.ffn_dim),
            };
            // A is rank×cols, B is rows×rank.
            adapters += placement.lora_rank * cols + rows * placement.lora_rank;
        }
    }

    let mut filters = 0;
    let instances = match placement.filter_scope {
        FilterScope::PerLayer => placement.filter_layers.len(),
        FilterScope::Shared if placement.filter_layers.is_empty() => 0,
        FilterScope::Shared => 1,
    };
    for _ in 0..instances {
        let task_vector = config.hidden_dim;
        let down = config.hidden_dim * placement.filter_rank;
        let up = placement.filter_rank * config.hidden_dim;
        filters += task_vector + down + up;
    }

    let head = config.num_classes * config.hidden_dim + config.num_classes;
    CountBreakdown { adapters, filters, head }
}

/// Draw a random but valid placement, used to fuzz the count audit.
pub fn random_placement(rng: &mut impl Rng, config: &ModelConfig) -> AdapterPlacement {
    let mut placement = AdapterPlacement::default();
    for name in MatrixName::ALL {
        if rng.random_bool(0.5) {
            placement.lora_targets.insert(name);
        }
    }
    let min_dim = placement
        .lora_targets
        .iter()
        .map(|t| {
            let (m, n) = t.dims(config);
            m.min(n)
        })
        .min()
        .unwrap_or(config.hidden_dim);
    placement.lora_rank = rng.random_range(1..min_dim.max(2));
    for l in 0..config.num_layers {
        if rng.random_bool(0.5) {
            placement.filter_layers.insert(l);
        }
    }
    placement.filter_rank = rng.random_range(1..=config.hidden_dim);
    placement.filter_scope =
        if rng.random_bool(0.5) { FilterScope::PerLayer } else { FilterScope::Shared };
    placement.filter_site = match rng.random_range(0..3) {
        0 => FilterSite::LayerOutput,
        1 => FilterSite::PostAttention,
        _ => FilterSite::PostFfn,
    };
    placement
}

/// Largest |logit difference| between the model as-is and the same model
/// with every adapter merged. Leaves the model merged.
pub fn merge_equivalence<E: crate::tensor::Element>(
    model: &mut AdaptedModel<E>,
    batches: &[Vec<Vec<usize>>],
) -> Result<f64> {
    let mut before = Vec::with_capacity(batches.len());
    for batch in batches {
        let g = Graph::new();
        before.push(model.forward(&g, batch)?);
    }
    model.merge_all()?;
    let mut worst = 0.0f64;
    for (batch, reference) in batches.iter().zip(&before) {
        let g = Graph::new();
        let after = model.forward(&g, batch)?;
        worst = worst.max(after.max_abs_diff(reference));
    }
    Ok(worst)
}

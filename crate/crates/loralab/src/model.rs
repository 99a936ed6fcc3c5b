//! A minimal trainable transformer encoder with named weight matrices,
//! adapter/filter placement, and exact trainable-parameter accounting.
//!
//! Every base weight is frozen at construction; the only trainable tensors
//! are the attached adapters, the attached filters, and the classifier
//! head. Each weight draws from its own seed stream, so the base model is
//! bitwise identical across placements for a given seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraAdapter, Similarity, TaskAwareFilter};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Element, Graph, Tensor};

/// The six adaptable weight matrices of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixName {
    #[serde(rename = "W_q")]
    WQ,
    #[serde(rename = "W_k")]
    WK,
    #[serde(rename = "W_v")]
    WV,
    #[serde(rename = "W_o")]
    WO,
    #[serde(rename = "W_f1")]
    WF1,
    #[serde(rename = "W_f2")]
    WF2,
}

impl MatrixName {
    pub const ALL: [MatrixName; 6] = [
        MatrixName::WQ,
        MatrixName::WK,
        MatrixName::WV,
        MatrixName::WO,
        MatrixName::WF1,
        MatrixName::WF2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixName::WQ => "W_q",
            MatrixName::WK => "W_k",
            MatrixName::WV => "W_v",
            MatrixName::WO => "W_o",
            MatrixName::WF1 => "W_f1",
            MatrixName::WF2 => "W_f2",
        }
    }

    /// `(rows, cols)` of this matrix in column convention (`W·x`).
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        match self {
            MatrixName::WQ | MatrixName::WK | MatrixName::WV | MatrixName::WO => (d, d),
            MatrixName::WF1 => (f, d),
            MatrixName::WF2 => (d, f),
        }
    }
}

impl fmt::Display for MatrixName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where inside a layer the task-aware filter is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSite {
    /// Filter the layer's final hidden states.
    #[default]
    LayerOutput,
    /// Filter the attention output before its residual add.
    PostAttention,
    /// Filter the feed-forward output before its residual add.
    PostFfn,
}

/// Whether each filtered layer gets its own filter or all share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    #[default]
    PerLayer,
    Shared,
}

/// Architecture dimensions. Defaults are the desk-scale configuration,
/// small enough for double-precision gradient checks in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 16,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
            self.num_classes,
        ]
        .iter()
        .all(|v| *v > 0);
        if !all_positive {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Which matrices receive low-rank adapters and which layers receive
/// task-aware filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPlacement {
    pub lora_targets: BTreeSet<MatrixName>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub filter_layers: BTreeSet<usize>,
    pub filter_rank: usize,
    pub filter_site: FilterSite,
    pub filter_scope: FilterScope,
    pub similarity: Similarity,
}

impl Default for AdapterPlacement {
    fn default() -> Self {
        AdapterPlacement {
            lora_targets: BTreeSet::new(),
            lora_rank: 8,
            lora_alpha: 16.0,
            filter_layers: BTreeSet::new(),
            filter_rank: 8,
            filter_site: FilterSite::default(),
            filter_scope: FilterScope::default(),
            similarity: Similarity::default(),
        }
    }
}

impl AdapterPlacement {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !self.lora_targets.is_empty() {
            if self.lora_rank == 0 {
                return Err(Error::InvalidConfig("lora_rank must be at least 1".into()));
            }
            for name in &self.lora_targets {
                let (m, n) = name.dims(config);
                if self.lora_rank > m.min(n) {
                    return Err(Error::InvalidConfig(format!(
                        "lora_rank {} too large for {} ({m}x{n}); need r <= {}",
                        self.lora_rank,
                        name,
                        m.min(n)
                    )));
                }
            }
            if self.lora_alpha <= 0.0 {
                return Err(Error::InvalidConfig("lora_alpha must be positive".into()));
            }
        }
        if !self.filter_layers.is_empty() {
            if self.filter_rank == 0 || self.filter_rank > config.hidden_dim {
                return Err(Error::InvalidConfig(format!(
                    "filter_rank {} must satisfy 1 <= r_T <= hidden_dim {}",
                    self.filter_rank, config.hidden_dim
                )));
            }
            if let Some(bad) = self.filter_layers.iter().find(|l| **l >= config.num_layers) {
                return Err(Error::InvalidConfig(format!(
                    "filter layer {bad} out of range for {} layers",
                    config.num_layers
                )));
            }
        }
        Ok(())
    }

    /// Convenience: adapters on `targets` at `rank`, no filters.
    pub fn lora_on(targets: impl IntoIterator<Item = MatrixName>, rank: usize) -> Self {
        AdapterPlacement {
            lora_targets: targets.into_iter().collect(),
            lora_rank: rank,
            ..AdapterPlacement::default()
        }
    }

    /// Add per-layer filters on every layer of an `num_layers`-deep model.
    pub fn with_filters_on_all_layers(mut self, num_layers: usize, filter_rank: usize) -> Self {
        self.filter_layers = (0..num_layers).collect();
        self.filter_rank = filter_rank;
        self
    }

    /// "lora" when only adapters are attached, "loratrf" when filters are in
    /// play, "head_only" when nothing is.
    pub fn method_label(&self) -> &'static str {
        match (self.lora_targets.is_empty(), self.filter_layers.is_empty()) {
            (false, false) => "loratrf",
            (false, true) => "lora",
            (true, false) => "filter_only",
            (true, true) => "head_only",
        }
    }

    /// Compact deterministic identifier used in reports and file names.
    pub fn id(&self) -> String {
        let targets = if self.lora_targets.is_empty() {
            "none".to_string()
        } else {
            self.lora_targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
        };
        let filters = if self.filter_layers.is_empty() {
            "none".to_string()
        } else {
            let layers =
                self.filter_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
            let scope = match self.filter_scope {
                FilterScope::PerLayer => "per_layer",
                FilterScope::Shared => "shared",
            };
            let site = match self.filter_site {
                FilterSite::LayerOutput => "layer_output",
                FilterSite::PostAttention => "post_attention",
                FilterSite::PostFfn => "post_ffn",
            };
            format!("{layers}@{site}/{scope}/rT{}", self.filter_rank)
        };
        format!("{targets}/r{}/filters={filters}", self.lora_rank)
    }
}

/// Trainable-parameter totals split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountBreakdown {
    pub adapters: usize,
    pub filters: usize,
    pub head: usize,
}

impl CountBreakdown {
    pub fn total(&self) -> usize {
        self.adapters + self.filters + self.head
    }

    /// Paper-style accounting: the attachment cost without the task head.
    pub fn adapters_and_filters(&self) -> usize {
        self.adapters + self.filters
    }
}

/// Closed-form trainable count for a placement, without building a model.
///
/// Per adapter on an `m×n` matrix: `r·(m+n)`, applied at every layer for
/// every target. Per filter: `d + 2·d·r_T`, once per filtered layer (or
/// once in total under shared scope). Head: `classes·d + classes`.
pub fn count_from_placement(config: &ModelConfig, placement: &AdapterPlacement) -> CountBreakdown {
    let per_layer: usize = placement
        .lora_targets
        .iter()
        .map(|name| {
            let (m, n) = name.dims(config);
            placement.lora_rank * (m + n)
        })
        .sum();
    let adapters = per_layer * config.num_layers;

    let filter_count = match placement.filter_scope {
        FilterScope::PerLayer => placement.filter_layers.len(),
        FilterScope::Shared => usize::from(!placement.filter_layers.is_empty()),
    };
    let filters =
        filter_count * (config.hidden_dim + 2 * config.hidden_dim * placement.filter_rank);

    let head = config.num_classes * config.hidden_dim + config.num_classes;
    CountBreakdown { adapters, filters, head }
}

/// One row of [`AdaptedModel::freeze_report`].
#[derive(Debug, Clone, Serialize)]
pub struct FreezeEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub trainable: bool,
}

/// A named parameter tensor of a built model.
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

struct Layer<E: Element> {
    weights: BTreeMap<MatrixName, Tensor<E>>,
    ln1_gain: Tensor<E>,
    ln1_bias: Tensor<E>,
    ln2_gain: Tensor<E>,
    ln2_bias: Tensor<E>,
}

/// The assembled testbed: frozen encoder, attached adapters and filters,
/// trainable classifier head.
pub struct AdaptedModel<E: Element> {
    config: ModelConfig,
    placement: AdapterPlacement,
    seed: u64,
    embed_token: Tensor<E>,
    embed_pos: Tensor<E>,
    layers: Vec<Layer<E>>,
    final_gain: Tensor<E>,
    final_bias: Tensor<E>,
    adapters: BTreeMap<(usize, MatrixName), LoraAdapter<E>>,
    filters: Vec<TaskAwareFilter<E>>,
    filter_of_layer: BTreeMap<usize, usize>,
    head_weight: Tensor<E>,
    head_bias: Tensor<E>,
}

impl<E: Element> fmt::Debug for AdaptedModel<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptedModel")
            .field("config", &self.config)
            .field("placement", &self.placement.id())
            .field("seed", &self.seed)
            .field("dtype", &E::DTYPE)
            .field("merged", &self.is_merged())
            .finish_non_exhaustive()
    }
}

impl<E: Element> AdaptedModel<E> {
    /// Deterministically build the model for `(config, placement, seed)`.
    pub fn build(config: &ModelConfig, placement: &AdapterPlacement, seed: u64) -> Result<Self> {
        config.validate()?;
        placement.validate(config)?;
        let d = config.hidden_dim;

        let embed_token =
            Tensor::randn(&mut stream(seed, "embed.token"), &[config.vocab_size, d], 1.0);
        let embed_pos =
            Tensor::randn(&mut stream(seed, "embed.pos"), &[config.max_seq_len, d], 0.1);

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut weights = BTreeMap::new();
            for name in MatrixName::ALL {
                let (m, n) = name.dims(config);
                let std = 1.0 / (n as f64).sqrt();
                let label = format!("layer.{i}.{name}");
                weights.insert(name, Tensor::randn(&mut stream(seed, &label), &[m, n], std));
            }
            layers.push(Layer {
                weights,
                ln1_gain: Tensor::full(&[d], E::one()),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], E::one()),
                ln2_bias: Tensor::zeros(&[d]),
            });
        }

        let mut adapters = BTreeMap::new();
        for i in 0..config.num_layers {
            for name in placement.lora_targets.iter().copied() {
                let label = format!("adapter.{i}.{name}");
                let adapter = LoraAdapter::new(
                    layers[i].weights[&name].clone(),
                    placement.lora_rank,
                    placement.lora_alpha,
                    &mut stream(seed, &label),
                )?;
                adapters.insert((i, name), adapter);
            }
        }

        let mut filters = Vec::new();
        let mut filter_of_layer = BTreeMap::new();
        match placement.filter_scope {
            FilterScope::Shared => {
                if !placement.filter_layers.is_empty() {
                    filters.push(TaskAwareFilter::new(
                        d,
                        placement.filter_rank,
                        placement.similarity,
                        &mut stream(seed, "filter.shared"),
                    )?);
                    for l in placement.filter_layers.iter().copied() {
                        filter_of_layer.insert(l, 0);
                    }
                }
            }
            FilterScope::PerLayer => {
                for l in placement.filter_layers.iter().copied() {
                    let label = format!("filter.{l}");
                    filter_of_layer.insert(l, filters.len());
                    filters.push(TaskAwareFilter::new(
                        d,
                        placement.filter_rank,
                        placement.similarity,
                        &mut stream(seed, &label),
                    )?);
                }
            }
        }

        let mut head_rng = stream(seed, "head");
        let head_weight =
            Tensor::randn(&mut head_rng, &[config.num_classes, d], 1.0 / (d as f64).sqrt())
                .trained();
        let head_bias = Tensor::zeros(&[config.num_classes]).trained();

        Ok(AdaptedModel {
            config: config.clone(),
            placement: placement.clone(),
            seed,
            embed_token,
            embed_pos,
            layers,
            final_gain: Tensor::full(&[d], E::one()),
            final_bias: Tensor::zeros(&[d]),
            adapters,
            filters,
            filter_of_layer,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn placement(&self) -> &AdapterPlacement {
        &self.placement
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&(usize, MatrixName), &LoraAdapter<E>)> {
        self.adapters.iter()
    }

    pub fn filters(&self) -> &[TaskAwareFilter<E>] {
        &self.filters
    }

    /// Logits `[batch × num_classes]` for a batch of token-id sequences.
    pub fn forward(&self, g: &Graph<E>, batch: &[Vec<usize>]) -> Result<Tensor<E>> {
        Ok(self.forward_traced(g, batch)?.0)
    }

    /// Forward pass that also returns every raw (pre-clamp) similarity
    /// tensor produced by the filters, for kink-aware gradient checking.
    pub fn forward_traced(
        &self,
        g: &Graph<E>,
        batch: &[Vec<usize>],
    ) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("forward on an empty batch".into()));
        }
        let mut sims = Vec::new();
        let mut pooled = Vec::with_capacity(batch.len());
        for ids in batch {
            pooled.push(self.encode_sequence(g, ids, &mut sims)?);
        }
        let features = g.concat_rows(&pooled)?;
        let head_t = g.transpose(&self.head_weight)?;
        let scores = g.matmul(&features, &head_t)?;
        let logits = g.add(&scores, &self.head_bias)?;
        Ok((logits, sims))
    }

    fn encode_sequence(
        &self,
        g: &Graph<E>,
        ids: &[usize],
        sims: &mut Vec<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        let tok = g.embedding(&self.embed_token, ids)?;
        let pos = g.slice_rows(&self.embed_pos, 0, ids.len())?;
        let mut x = g.add(&tok, &pos)?;

        for (li, layer) in self.layers.iter().enumerate() {
            let filter = self.filter_of_layer.get(&li).map(|idx| &self.filters[*idx]);

            let xn = g.layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias)?;
            let q = self.apply_matrix(g, li, MatrixName::WQ, &xn)?;
            let k = self.apply_matrix(g, li, MatrixName::WK, &xn)?;
            let v = self.apply_matrix(g, li, MatrixName::WV, &xn)?;
            let concat = self.attention(g, &q, &k, &v)?;
            let mut attn_out = self.apply_matrix(g, li, MatrixName::WO, &concat)?;
            if self.placement.filter_site == FilterSite::PostAttention {
                if let Some(f) = filter {
                    let (out, sim) = f.apply_traced(g, &attn_out)?;
                    attn_out = out;
                    sims.push(sim);
                }
            }
            x = g.add(&x, &attn_out)?;

            let xn2 = g.layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias)?;
            let hidden = self.apply_matrix(g, li, MatrixName::WF1, &xn2)?;
            let hidden = g.gelu(&hidden)?;
            let mut ffn_out = self.apply_matrix(g, li, MatrixName::WF2, &hidden)?;
            if self.placement.filter_site == FilterSite::PostFfn {
                if let Some(f) = filter {
                    let (out, sim) = f.apply_traced(g, &ffn_out)?;
                    ffn_out = out;
                    sims.push(sim);
                }
            }
            x = g.add(&x, &ffn_out)?;

            if self.placement.filter_site == FilterSite::LayerOutput {
                if let Some(f) = filter {
                    let (out, sim) = f.apply_traced(g, &x)?;
                    x = out;
                    sims.push(sim);
                }
            }
        }

        let x = g.layer_norm(&x, &self.final_gain, &self.final_bias)?;
        g.mean_rows(&x)
    }

    fn apply_matrix(
        &self,
        g: &Graph<E>,
        layer: usize,
        name: MatrixName,
        h: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        match self.adapters.get(&(layer, name)) {
            Some(adapter) => adapter.apply_rows(g, h),
            None => {
                let wt = g.transpose(&self.layers[layer].weights[&name])?;
                g.matmul(h, &wt)
            }
        }
    }

    fn attention(
        &self,
        g: &Graph<E>,
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let heads = self.config.num_heads;
        let dh = self.config.hidden_dim / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(&kh)?;
            let scores = g.matmul(&qh, &kt)?;
            let scores = g.scale(&scores, scale)?;
            let attn = g.softmax_rows(&scores)?;
            outputs.push(g.matmul(&attn, &vh)?);
        }
        g.concat_cols(&outputs)
    }

    /// Every parameter tensor with a stable name, in manifest order. Merged
    /// adapters contribute no A/B entries (their delta lives in the base
    /// weight).
    pub fn named_tensors(&self) -> Vec<ParamEntry<E>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor<E>| {
            out.push(ParamEntry { name, tensor: tensor.clone(), trainable: tensor.requires_grad() });
        };
        push("embed.token".into(), &self.embed_token);
        push("embed.pos".into(), &self.embed_pos);
        for (i, layer) in self.layers.iter().enumerate() {
            for name in MatrixName::ALL {
                push(format!("layer.{i}.{name}"), &layer.weights[&name]);
            }
            push(format!("layer.{i}.ln1.gain"), &layer.ln1_gain);
            push(format!("layer.{i}.ln1.bias"), &layer.ln1_bias);
            push(format!("layer.{i}.ln2.gain"), &layer.ln2_gain);
            push(format!("layer.{i}.ln2.bias"), &layer.ln2_bias);
        }
        push("final_ln.gain".into(), &self.final_gain);
        push("final_ln.bias".into(), &self.final_bias);
        push("head.weight".into(), &self.head_weight);
        push("head.bias".into(), &self.head_bias);
        for ((layer, name), adapter) in &self.adapters {
            if adapter.is_merged() {
                continue;
            }
            push(format!("adapter.{layer}.{name}.A"), adapter.matrix_a());
            push(format!("adapter.{layer}.{name}.B"), adapter.matrix_b());
        }
        for (idx, filter) in self.filters.iter().enumerate() {
            let label = match self.placement.filter_scope {
                FilterScope::Shared => "shared".to_string(),
                FilterScope::PerLayer => {
                    // Recover the layer this filter serves.
                    self.filter_of_layer
                        .iter()
                        .find(|(_, v)| **v == idx)
                        .map(|(l, _)| l.to_string())
                        .unwrap_or_else(|| idx.to_string())
                }
            };
            push(format!("filter.{label}.task_vector"), filter.task_vector());
            push(format!("filter.{label}.t_down"), filter.t_down());
            push(format!("filter.{label}.t_up"), filter.t_up());
        }
        out
    }

    /// The tensors the optimizer may update.
    pub fn trainable_tensors(&self) -> Vec<Tensor<E>> {
        self.named_tensors().into_iter().filter(|p| p.trainable).map(|p| p.tensor).collect()
    }

    /// Per-tensor frozen/trainable listing.
    pub fn freeze_report(&self) -> Vec<FreezeEntry> {
        self.named_tensors()
            .into_iter()
            .map(|p| FreezeEntry {
                name: p.name,
                shape: p.tensor.shape().to_vec(),
                numel: p.tensor.numel(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// Trainable totals of the live model, summed from actual tensors.
    pub fn count_trainable(&self) -> CountBreakdown {
        let adapters = self
            .adapters
            .values()
            .filter(|a| !a.is_merged())
            .map(|a| a.trainable_count())
            .sum();
        let filters = self.filters.iter().map(|f| f.trainable_count()).sum();
        let head = self.head_weight.numel() + self.head_bias.numel();
        CountBreakdown { adapters, filters, head }
    }

    /// Bit patterns of every frozen tensor, keyed by name. Taken before and
    /// after training to prove the optimizer never touches them.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, Vec<u64>> {
        self.named_tensors()
            .into_iter()
            .filter(|p| !p.trainable)
            .map(|p| (p.name, p.tensor.data_bits()))
            .collect()
    }

    /// Fold every adapter into its base weight.
    pub fn merge_all(&mut self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::AdapterState("model has no adapters to merge".into()));
        }
        for adapter in self.adapters.values_mut() {
            adapter.merge()?;
        }
        Ok(())
    }

    /// Undo [`AdaptedModel::merge_all`].
    pub fn unmerge_all(&mut self) -> Result<()> {
        for adapter in self.adapters.values_mut() {
            adapter.unmerge()?;
        }
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        !self.adapters.is_empty() && self.adapters.values().all(|a| a.is_merged())
    }
}

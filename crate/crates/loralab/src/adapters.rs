//! The two trainable attachments: low-rank adapters over frozen weight
//! matrices, and task-aware filters over token representations.
//!
//! Both are transparent at construction: a fresh adapter contributes exactly
//! zero (B starts as the zero matrix) and a fresh filter adds exactly zero
//! (the up-projection of its factored transform starts at zero). Training
//! only ever touches the small attachment tensors; the wrapped base weight
//! stays frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Graph, Tensor};

/// How a filter scores a token row against its task vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Cosine similarity, scale-invariant in the token row.
    #[default]
    Cosine,
    /// Raw dot product, kept for experimentation.
    Dot,
}

/// A frozen base weight `W0[m×n]` plus the trainable low-rank pair
/// `B[m×r] · A[r×n]`, contributing `(α/r)·B·A` on top of `W0`.
pub struct LoraAdapter<E: Element> {
    w0: Tensor<E>,
    a: Tensor<E>,
    b: Tensor<E>,
    rank: usize,
    alpha: f64,
    merged: bool,
}

impl<E: Element> LoraAdapter<E> {
    /// Wrap `w0` (frozen, `m×n`). `A[r×n]` is Gaussian with standard
    /// deviation `1/√r`; `B[m×r]` is zero, so the delta starts exactly zero.
    pub fn new<R: Rng>(w0: Tensor<E>, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let (m, n) = w0.as_matrix("lora_new")?;
        if w0.requires_grad() {
            return Err(Error::InvalidConfig(
                "adapter base weight must be frozen".into(),
            ));
        }
        if rank == 0 || rank > m.min(n) {
            return Err(Error::InvalidConfig(format!(
                "lora rank {rank} must satisfy 1 <= r <= min({m}, {n})"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("lora alpha {alpha} must be positive")));
        }
        let a = Tensor::randn(rng, &[rank, n], 1.0 / (rank as f64).sqrt()).trained();
        let b = Tensor::zeros(&[m, rank]).trained();
        Ok(LoraAdapter { w0, a, b, rank, alpha, merged: false })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `(m, n)` of the wrapped weight.
    pub fn dims(&self) -> (usize, usize) {
        (self.w0.shape()[0], self.w0.shape()[1])
    }

    pub fn base_weight(&self) -> &Tensor<E> {
        &self.w0
    }

    pub fn matrix_a(&self) -> &Tensor<E> {
        &self.a
    }

    pub fn matrix_b(&self) -> &Tensor<E> {
        &self.b
    }

    fn scale(&self) -> E {
        E::from_f64(self.alpha / self.rank as f64)
    }

    /// Column-convention forward: `x[n×cols] → W0·x + (α/r)·B·(A·x)`,
    /// shape `[m×cols]`. Gradients flow to A and B only.
    pub fn forward(&self, g: &Graph<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if self.merged {
            return Err(Error::AdapterState(
                "forward on a merged adapter; unmerge first or multiply by the merged weight"
                    .into(),
            ));
        }
        let base = g.matmul(&self.w0, x)?;
        let ax = g.matmul(&self.a, x)?;
        let bax = g.matmul(&self.b, &ax)?;
        let delta = g.scale(&bax, self.scale())?;
        g.add(&base, &delta)
    }

    /// Row-convention application used inside the model:
    /// `h[rows×n] → h·W0ᵀ + (α/r)·(h·Aᵀ)·Bᵀ`, shape `[rows×m]`.
    /// Dispatches to the plain base product once merged.
    pub fn apply_rows(&self, g: &Graph<E>, h: &Tensor<E>) -> Result<Tensor<E>> {
        let w0t = g.transpose(&self.w0)?;
        let base = g.matmul(h, &w0t)?;
        if self.merged {
            return Ok(base);
        }
        let at = g.transpose(&self.a)?;
        let bt = g.transpose(&self.b)?;
        let ha = g.matmul(h, &at)?;
        let hab = g.matmul(&ha, &bt)?;
        let delta = g.scale(&hab, self.scale())?;
        g.add(&base, &delta)
    }

    /// Fold `(α/r)·B·A` into the shared base weight and mark the adapter
    /// merged. Returns the merged weight handle.
    pub fn merge(&mut self) -> Result<Tensor<E>> {
        if self.merged {
            return Err(Error::AdapterState("adapter is already merged".into()));
        }
        self.add_delta_into_base(self.alpha / self.rank as f64);
        self.merged = true;
        Ok(self.w0.clone())
    }

    /// Subtract the delta back out of the base weight, reactivating the
    /// low-rank path.
    pub fn unmerge(&mut self) -> Result<()> {
        if !self.merged {
            return Err(Error::AdapterState("adapter is not merged".into()));
        }
        self.add_delta_into_base(-(self.alpha / self.rank as f64));
        self.merged = false;
        Ok(())
    }

    /// The fold runs in double precision with one rounding at the end, so
    /// the merged weight is the correctly rounded W0 + scale·B·A even in
    /// single precision, and unmerging lands back within one ulp.
    fn add_delta_into_base(&self, scale: f64) {
        let (m, n) = self.dims();
        let delta = self.b.with_data(|bd| {
            self.a.with_data(|ad| {
                let bd: Vec<f64> = bd.iter().map(|v| Element::to_f64(*v)).collect();
                let ad: Vec<f64> = ad.iter().map(|v| Element::to_f64(*v)).collect();
                kernels::matmul(&bd, &ad, m, self.rank, n)
            })
        });
        self.w0.modify(|w| {
            for (wi, di) in w.iter_mut().zip(&delta) {
                *wi = E::from_f64(Element::to_f64(*wi) + scale * di);
            }
        });
    }

    /// The tensors the optimizer may touch: `[A, B]`. Never includes `W0`.
    pub fn trainable_parameters(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }

    /// Closed-form trainable element count: `r·(m+n)`.
    pub fn trainable_count(&self) -> usize {
        let (m, n) = self.dims();
        self.rank * (m + n)
    }
}

/// A trainable task vector `t_ξ[d]` plus a low-rank factored transform
/// `T = T_down[d×r_T] · T_up[r_T×d]`, applied tokenwise:
///
/// each row `h` of the input is reweighted by `clamp01(sim(h, t_ξ))`,
/// transformed by `T`, and the result is added back onto `h`.
pub struct TaskAwareFilter<E: Element> {
    task_vector: Tensor<E>,
    t_down: Tensor<E>,
    t_up: Tensor<E>,
    dim: usize,
    filter_rank: usize,
    similarity: Similarity,
}

impl<E: Element> TaskAwareFilter<E> {
    /// `t_ξ` and `T_down` are Gaussian with variance `1/d`; `T_up` starts
    /// zero, so the filter's additive contribution is exactly zero.
    pub fn new<R: Rng>(
        dim: usize,
        filter_rank: usize,
        similarity: Similarity,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("filter dimension must be positive".into()));
        }
        if filter_rank == 0 || filter_rank > dim {
            return Err(Error::InvalidConfig(format!(
                "filter rank {filter_rank} must satisfy 1 <= r_T <= {dim}"
            )));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let task_vector = Tensor::randn(rng, &[dim], std).trained();
        let t_down = Tensor::randn(rng, &[dim, filter_rank], std).trained();
        let t_up = Tensor::zeros(&[filter_rank, dim]).trained();
        Ok(TaskAwareFilter { task_vector, t_down, t_up, dim, filter_rank, similarity })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filter_rank(&self) -> usize {
        self.filter_rank
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn task_vector(&self) -> &Tensor<E> {
        &self.task_vector
    }

    pub fn t_down(&self) -> &Tensor<E> {
        &self.t_down
    }

    pub fn t_up(&self) -> &Tensor<E> {
        &self.t_up
    }

    /// Filter every row of `h[tokens×d]`; output has the same shape.
    pub fn apply(&self, g: &Graph<E>, h: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.apply_traced(g, h)?.0)
    }

    /// Like [`TaskAwareFilter::apply`] but also returns the raw similarity
    /// scores (before clamping), which gradient checking inspects to stay
    /// clear of the clamp kinks.
    pub fn apply_traced(&self, g: &Graph<E>, h: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let (_t, d) = h.as_matrix("filter_apply")?;
        if d != self.dim {
            return Err(Error::shape_mismatch("filter_apply", h.shape(), &[self.dim]));
        }
        let sim = match self.similarity {
            Similarity::Cosine => g.cosine_sim_rows(h, &self.task_vector)?,
            Similarity::Dot => g.row_dot(h, &self.task_vector)?,
        };
        let weights = g.clamp01(&sim)?;
        let reweighted = g.scale_rows(h, &weights)?;
        let mid = g.matmul(&reweighted, &self.t_down)?;
        let transformed = g.matmul(&mid, &self.t_up)?;
        let out = g.add(h, &transformed)?;
        Ok((out, sim))
    }

    /// The tensors the optimizer may touch: `[t_ξ, T_down, T_up]`.
    pub fn trainable_parameters(&self) -> Vec<Tensor<E>> {
        vec![self.task_vector.clone(), self.t_down.clone(), self.t_up.clone()]
    }

    /// Closed-form trainable element count: `d + 2·d·r_T`.
    pub fn trainable_count(&self) -> usize {
        self.dim + 2 * self.dim * self.filter_rank
    }
}

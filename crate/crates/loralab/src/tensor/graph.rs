//! Dynamic tape: ops record themselves in execution order, `backward`
//! replays adjoints in exact reverse order.
//!
//! A graph is rebuilt for every forward pass. Leaves (parameters, inputs)
//! live outside the graph and survive it; everything an op produces belongs
//! to the graph's lifetime. A graph and its tensors are used from one thread
//! at a time; independent graphs may run on different threads.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use super::{kernels, Element, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the norm product in cosine similarity, guarding
/// zero-norm rows.
pub const COSINE_EPS: f64 = 1e-8;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op<E: Element> {
    Matmul { a: Tensor<E>, b: Tensor<E> },
    Transpose { a: Tensor<E> },
    Add { a: Tensor<E>, b: Tensor<E> },
    Sub { a: Tensor<E>, b: Tensor<E> },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Scale { a: Tensor<E>, factor: E },
    Clamp01 { a: Tensor<E> },
    CosineSim { u: Tensor<E>, v: Tensor<E> },
    CosineSimRows { h: Tensor<E>, v: Tensor<E> },
    RowDot { h: Tensor<E>, v: Tensor<E> },
    ScaleRows { h: Tensor<E>, w: Tensor<E> },
    SoftmaxRows { a: Tensor<E> },
    LayerNorm { a: Tensor<E>, gain: Tensor<E>, bias: Tensor<E> },
    Gelu { a: Tensor<E> },
    Embedding { table: Tensor<E>, ids: Vec<usize> },
    SliceRows { a: Tensor<E>, start: usize },
    SliceCols { a: Tensor<E>, start: usize },
    ConcatRows { parts: Vec<Tensor<E>> },
    ConcatCols { parts: Vec<Tensor<E>> },
    MeanRows { a: Tensor<E> },
    SumAll { a: Tensor<E> },
    CrossEntropy { logits: Tensor<E>, labels: Vec<usize>, probs: Vec<E> },
}

struct Node<E: Element> {
    op: Op<E>,
    out: Tensor<E>,
}

/// Ordered record of executed operations, replayable in reverse.
pub struct Graph<E: Element> {
    nodes: Mutex<Vec<Node<E>>>,
    consumed: AtomicBool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Mutex::new(Vec::new()), consumed: AtomicBool::new(false) }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.lock().expect("graph lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forget all recorded operations and allow a fresh backward pass.
    pub fn reset(&self) {
        self.nodes.lock().expect("graph lock").clear();
        self.consumed.store(false, Ordering::SeqCst);
    }

    fn record(&self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Tensor<E> {
        let out = Tensor::op_output(shape, data, requires_grad);
        self.nodes.lock().expect("graph lock").push(Node { op, out: out.clone() });
        out
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`, recording adjoints `da = dc·bᵀ`, `db = aᵀ·dc`.
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = a.as_matrix("matmul")?;
        let (k2, n) = b.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape_mismatch("matmul", a.shape(), b.shape()));
        }
        let data = a.with_data(|ad| b.with_data(|bd| kernels::matmul(ad, bd, m, k, n)));
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(Op::Matmul { a: a.clone(), b: b.clone() }, vec![m, n], data, rg))
    }

    pub fn transpose(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("transpose")?;
        let data = a.with_data(|ad| kernels::transpose(ad, m, n));
        Ok(self.record(Op::Transpose { a: a.clone() }, vec![n, m], data, a.requires_grad()))
    }

    // ── elementwise ───────────────────────────────────────────────────

    /// Elementwise sum. `b` may also be a vector of length `n` broadcast
    /// over the rows of an `m×n` matrix `a`; the adjoint of the broadcast
    /// operand is sum-reduced over the rows.
    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Elementwise difference, with the same trailing-vector broadcast as
    /// [`Graph::add`].
    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub {
            a: a.clone(),
            b: b.clone(),
        })
    }

    /// Elementwise product, with the same trailing-vector broadcast as
    /// [`Graph::add`].
    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul {
            a: a.clone(),
            b: b.clone(),
        })
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: &Tensor<E>,
        b: &Tensor<E>,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Tensor<E>> {
        let kind = broadcast_kind(name, a.shape(), b.shape())?;
        let data = a.with_data(|ad| {
            b.with_data(|bd| match kind {
                Broadcast::None => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect::<Vec<E>>(),
                Broadcast::RowVector { cols } => {
                    let mut out = Vec::with_capacity(ad.len());
                    for (i, x) in ad.iter().enumerate() {
                        out.push(f(*x, bd[i % cols]));
                    }
                    out
                }
            })
        });
        let rg = a.requires_grad() || b.requires_grad();
        Ok(self.record(op, a.shape().to_vec(), data, rg))
    }

    /// Multiply every element by a plain constant.
    pub fn scale(&self, a: &Tensor<E>, factor: E) -> Result<Tensor<E>> {
        let data = a.with_data(|ad| ad.iter().map(|x| *x * factor).collect());
        let rg = a.requires_grad();
        Ok(self.record(Op::Scale { a: a.clone(), factor }, a.shape().to_vec(), data, rg))
    }

    /// `min(1, max(0, x))` elementwise. The adjoint passes through strictly
    /// inside (0, 1) and is zero in the saturated regime, including at the
    /// boundary points themselves.
    pub fn clamp01(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let one = E::one();
        let zero = E::zero();
        let data = a.with_data(|ad| {
            ad.iter()
                .map(|x| if *x < zero { zero } else if *x > one { one } else { *x })
                .collect()
        });
        let rg = a.requires_grad();
        Ok(self.record(Op::Clamp01 { a: a.clone() }, a.shape().to_vec(), data, rg))
    }

    // ── similarity ────────────────────────────────────────────────────

    /// Cosine similarity of two vectors: `(u·v) / (‖u‖·‖v‖ + ε)` with
    /// `ε = 1e-8`. Returns a scalar (shape `[1]`) tensor.
    pub fn cosine_sim(&self, u: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        let du = u.as_vector("cosine_sim")?;
        let dv = v.as_vector("cosine_sim")?;
        if du != dv {
            return Err(Error::shape_mismatch("cosine_sim", u.shape(), v.shape()));
        }
        let c = u.with_data(|ud| v.with_data(|vd| cosine_rows(ud, vd, 1, du)[0]));
        let rg = u.requires_grad() || v.requires_grad();
        Ok(self.record(Op::CosineSim { u: u.clone(), v: v.clone() }, vec![1], vec![c], rg))
    }

    /// Cosine similarity of every row of `h[t×d]` against the vector `v[d]`;
    /// returns a vector of length `t`.
    pub fn cosine_sim_rows(&self, h: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        let (t, d) = h.as_matrix("cosine_sim_rows")?;
        let dv = v.as_vector("cosine_sim_rows")?;
        if d != dv {
            return Err(Error::shape_mismatch("cosine_sim_rows", h.shape(), v.shape()));
        }
        let data = h.with_data(|hd| v.with_data(|vd| cosine_rows(hd, vd, t, d)));
        let rg = h.requires_grad() || v.requires_grad();
        Ok(self.record(Op::CosineSimRows { h: h.clone(), v: v.clone() }, vec![t], data, rg))
    }

    /// Dot product of every row of `h[t×d]` with `v[d]`.
    pub fn row_dot(&self, h: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
        let (t, d) = h.as_matrix("row_dot")?;
        let dv = v.as_vector("row_dot")?;
        if d != dv {
            return Err(Error::shape_mismatch("row_dot", h.shape(), v.shape()));
        }
        let data = h.with_data(|hd| {
            v.with_data(|vd| {
                (0..t)
                    .map(|i| dot(&hd[i * d..(i + 1) * d], vd))
                    .collect::<Vec<E>>()
            })
        });
        let rg = h.requires_grad() || v.requires_grad();
        Ok(self.record(Op::RowDot { h: h.clone(), v: v.clone() }, vec![t], data, rg))
    }

    /// Scale row `i` of `h[t×d]` by `w[i]`.
    pub fn scale_rows(&self, h: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        let (t, d) = h.as_matrix("scale_rows")?;
        let tw = w.as_vector("scale_rows")?;
        if t != tw {
            return Err(Error::shape_mismatch("scale_rows", h.shape(), w.shape()));
        }
        let data = h.with_data(|hd| {
            w.with_data(|wd| {
                let mut out = Vec::with_capacity(hd.len());
                for i in 0..t {
                    for j in 0..d {
                        out.push(hd[i * d + j] * wd[i]);
                    }
                }
                out
            })
        });
        let rg = h.requires_grad() || w.requires_grad();
        Ok(self.record(Op::ScaleRows { h: h.clone(), w: w.clone() }, vec![t, d], data, rg))
    }

    // ── nonlinearities ────────────────────────────────────────────────

    /// Row-wise softmax; every output row sums to 1.
    pub fn softmax_rows(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("softmax_rows")?;
        let data = a.with_data(|ad| {
            let mut out = Vec::with_capacity(ad.len());
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                out.extend(softmax_row(row));
            }
            out
        });
        let rg = a.requires_grad();
        Ok(self.record(Op::SoftmaxRows { a: a.clone() }, vec![m, n], data, rg))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    /// Uses the population variance and `ε = 1e-5`.
    pub fn layer_norm(
        &self,
        a: &Tensor<E>,
        gain: &Tensor<E>,
        bias: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("layer_norm")?;
        let ng = gain.as_vector("layer_norm")?;
        let nb = bias.as_vector("layer_norm")?;
        if ng != n || nb != n {
            return Err(Error::shape_mismatch("layer_norm", a.shape(), gain.shape()));
        }
        let eps = E::from_f64(LAYER_NORM_EPS);
        let data = a.with_data(|ad| {
            gain.with_data(|gd| {
                bias.with_data(|bd| {
                    let mut out = Vec::with_capacity(ad.len());
                    for i in 0..m {
                        let row = &ad[i * n..(i + 1) * n];
                        let (mean, var) = mean_var(row);
                        let inv = (var + eps).sqrt().recip();
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            out.push(xhat * gd[j] + bd[j]);
                        }
                    }
                    out
                })
            })
        });
        let rg = a.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm { a: a.clone(), gain: gain.clone(), bias: bias.clone() };
        Ok(self.record(op, vec![m, n], data, rg))
    }

    /// GELU in its tanh form:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let data = a.with_data(|ad| ad.iter().map(|x| gelu_value(*x)).collect());
        let rg = a.requires_grad();
        Ok(self.record(Op::Gelu { a: a.clone() }, a.shape().to_vec(), data, rg))
    }

    // ── structure ──────────────────────────────────────────────────────

    /// Gather rows of `table[v×d]` at `ids`, producing `[len(ids)×d]`.
    pub fn embedding(&self, table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        let (v, d) = table.as_matrix("embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("embedding of an empty id sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for table with {v} rows"
            )));
        }
        let data = table.with_data(|td| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&td[id * d..(id + 1) * d]);
            }
            out
        });
        let rg = table.requires_grad();
        let op = Op::Embedding { table: table.clone(), ids: ids.to_vec() };
        Ok(self.record(op, vec![ids.len(), d], data, rg))
    }

    pub fn slice_rows(&self, a: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::bad_shape(
                "slice_rows",
                a.shape(),
                format!("rows {start}..{} out of range", start + len),
            ));
        }
        let data = a.with_data(|ad| ad[start * n..(start + len) * n].to_vec());
        let rg = a.requires_grad();
        Ok(self.record(Op::SliceRows { a: a.clone(), start }, vec![len, n], data, rg))
    }

    pub fn slice_cols(&self, a: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::bad_shape(
                "slice_cols",
                a.shape(),
                format!("cols {start}..{} out of range", start + len),
            ));
        }
        let data = a.with_data(|ad| {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&ad[i * n + start..i * n + start + len]);
            }
            out
        });
        let rg = a.requires_grad();
        Ok(self.record(Op::SliceCols { a: a.clone(), start }, vec![m, len], data, rg))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of zero parts".into()));
        }
        let (_, n) = parts[0].as_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, np) = p.as_matrix("concat_rows")?;
            if np != n {
                return Err(Error::shape_mismatch("concat_rows", parts[0].shape(), p.shape()));
            }
            rows += m;
            p.with_data(|pd| data.extend_from_slice(pd));
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.record(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, n], data, rg))
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero parts".into()));
        }
        let (m, _) = parts[0].as_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut n = 0;
        for p in parts {
            let (mp, np) = p.as_matrix("concat_cols")?;
            if mp != m {
                return Err(Error::shape_mismatch("concat_cols", parts[0].shape(), p.shape()));
            }
            widths.push(np);
            n += np;
        }
        let mut data = vec![E::zero(); m * n];
        let mut col = 0;
        for (p, w) in parts.iter().zip(&widths) {
            p.with_data(|pd| {
                for i in 0..m {
                    data[i * n + col..i * n + col + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
                }
            });
            col += w;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.record(Op::ConcatCols { parts: parts.to_vec() }, vec![m, n], data, rg))
    }

    /// Column means: `a[m×n] → [1×n]`.
    pub fn mean_rows(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = a.as_matrix("mean_rows")?;
        let inv = E::from_f64(1.0 / m as f64);
        let data = a.with_data(|ad| {
            let mut out = vec![E::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] = out[j] + ad[i * n + j];
                }
            }
            for o in out.iter_mut() {
                *o = *o * inv;
            }
            out
        });
        let rg = a.requires_grad();
        Ok(self.record(Op::MeanRows { a: a.clone() }, vec![1, n], data, rg))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let s = a.with_data(|ad| ad.iter().fold(E::zero(), |acc, x| acc + *x));
        let rg = a.requires_grad();
        Ok(self.record(Op::SumAll { a: a.clone() }, vec![1], vec![s], rg))
    }

    // ── loss ──────────────────────────────────────────────────────────

    /// Mean cross-entropy of `logits[b×c]` against integer labels, computed
    /// through a numerically stable log-softmax. Returns a scalar tensor.
    pub fn cross_entropy(&self, logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
        let (b, c) = logits.as_matrix("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::InvalidInput(format!(
                "cross_entropy: {b} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Vec::with_capacity(b * c);
        let loss = logits.with_data(|ld| {
            let mut acc = 0.0f64;
            for (i, &y) in labels.iter().enumerate() {
                let row = &ld[i * c..(i + 1) * c];
                // Log-sum-exp keeps extreme logits finite and lets NaN
                // propagate to the loss instead of being clamped away.
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(Element::to_f64(v)));
                let sum: f64 = row.iter().map(|&v| (Element::to_f64(v) - m).exp()).sum();
                let lse = m + sum.ln();
                acc += lse - Element::to_f64(row[y]);
                probs.extend(row.iter().map(|&v| E::from_f64((Element::to_f64(v) - lse).exp())));
            }
            E::from_f64(acc / b as f64)
        });
        let rg = logits.requires_grad();
        let op = Op::CrossEntropy { logits: logits.clone(), labels: labels.to_vec(), probs };
        Ok(self.record(op, vec![1], vec![loss], rg))
    }

    // ── reverse pass ──────────────────────────────────────────────────

    /// Accumulate adjoints of `loss` into every reachable tensor that
    /// requires gradients. Rejects non-scalar losses, empty graphs, and a
    /// second call without [`Graph::reset`].
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: format!("{:?}", loss.shape()) });
        }
        let nodes = self.nodes.lock().expect("graph lock");
        if nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if self.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::BackwardConsumed);
        }
        loss.accumulate_grad(&[E::one()]);
        for node in nodes.iter().rev() {
            if !node.out.requires_grad() {
                continue;
            }
            let Some(dy) = node.out.grad() else { continue };
            backward_node(&node.op, &node.out, &dy);
        }
        Ok(())
    }
}

// ── shared math helpers ────────────────────────────────────────────────

enum Broadcast {
    None,
    RowVector { cols: usize },
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::None);
    }
    if let ([_, cols], [n]) = (a, b) {
        if cols == n {
            return Ok(Broadcast::RowVector { cols: *cols });
        }
    }
    Err(Error::shape_mismatch(op, a, b))
}

fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    a.iter().zip(b).fold(E::zero(), |acc, (x, y)| acc + *x * *y)
}

fn norm<E: Element>(a: &[E]) -> E {
    dot(a, a).sqrt()
}

fn cosine_rows<E: Element>(h: &[E], v: &[E], t: usize, d: usize) -> Vec<E> {
    let eps = E::from_f64(COSINE_EPS);
    let nv = norm(v);
    (0..t)
        .map(|i| {
            let row = &h[i * d..(i + 1) * d];
            let s = dot(row, v);
            s / (norm(row) * nv + eps)
        })
        .collect()
}

fn softmax_row<E: Element>(row: &[E]) -> Vec<E> {
    let max = row.iter().fold(E::neg_infinity(), |m, x| if *x > m { *x } else { m });
    let exps: Vec<E> = row.iter().map(|x| (*x - max).exp()).collect();
    let sum = exps.iter().fold(E::zero(), |acc, x| acc + *x);
    exps.into_iter().map(|e| e / sum).collect()
}

fn mean_var<E: Element>(row: &[E]) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mean = row.iter().fold(E::zero(), |acc, x| acc + *x) / n;
    let var = row
        .iter()
        .fold(E::zero(), |acc, x| {
            let d = *x - mean;
            acc + d * d
        })
        / n;
    (mean, var)
}

fn gelu_value<E: Element>(x: E) -> E {
    let k = E::from_f64(GELU_K);
    let c = E::from_f64(GELU_C);
    let half = E::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_derivative<E: Element>(x: E) -> E {
    let k = E::from_f64(GELU_K);
    let c = E::from_f64(GELU_C);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * k * (E::one() + three * c * x * x)
}

// ── adjoint rules ──────────────────────────────────────────────────────

fn backward_node<E: Element>(op: &Op<E>, out: &Tensor<E>, dy: &[E]) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let da = b.with_data(|bd| kernels::matmul_nt(dy, bd, m, n, k));
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db = a.with_data(|ad| kernels::matmul_tn(ad, dy, m, k, n));
                b.accumulate_grad(&db);
            }
        }
        Op::Transpose { a } => {
            if a.requires_grad() {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                a.accumulate_grad(&kernels::transpose(dy, n, m));
            }
        }
        Op::Add { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(dy);
            }
            if b.requires_grad() {
                b.accumulate_grad(&reduce_for(b, dy, E::one()));
            }
        }
        Op::Sub { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(dy);
            }
            if b.requires_grad() {
                b.accumulate_grad(&reduce_for(b, dy, E::one().neg()));
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let da = b.with_data(|bd| {
                    if b.numel() == a.numel() {
                        dy.iter().zip(bd).map(|(g, y)| *g * *y).collect::<Vec<E>>()
                    } else {
                        let cols = bd.len();
                        dy.iter()
                            .enumerate()
                            .map(|(idx, g)| *g * bd[idx % cols])
                            .collect()
                    }
                });
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let weighted = a.with_data(|ad| {
                    dy.iter().zip(ad).map(|(g, x)| *g * *x).collect::<Vec<E>>()
                });
                b.accumulate_grad(&reduce_rows_to(b.numel(), &weighted));
            }
        }
        Op::Scale { a, factor } => {
            if a.requires_grad() {
                let da: Vec<E> = dy.iter().map(|g| *g * *factor).collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Clamp01 { a } => {
            if a.requires_grad() {
                let da = a.with_data(|ad| {
                    dy.iter()
                        .zip(ad)
                        .map(|(g, x)| {
                            if *x > E::zero() && *x < E::one() {
                                *g
                            } else {
                                E::zero()
                            }
                        })
                        .collect::<Vec<E>>()
                });
                a.accumulate_grad(&da);
            }
        }
        Op::CosineSim { u, v } => {
            cosine_backward(u, v, 1, u.numel(), dy);
        }
        Op::CosineSimRows { h, v } => {
            let (t, d) = (h.shape()[0], h.shape()[1]);
            cosine_backward(h, v, t, d, dy);
        }
        Op::RowDot { h, v } => {
            let (t, d) = (h.shape()[0], h.shape()[1]);
            if h.requires_grad() {
                let dh = v.with_data(|vd| {
                    let mut dh = vec![E::zero(); t * d];
                    for i in 0..t {
                        for j in 0..d {
                            dh[i * d + j] = dy[i] * vd[j];
                        }
                    }
                    dh
                });
                h.accumulate_grad(&dh);
            }
            if v.requires_grad() {
                let dv = h.with_data(|hd| {
                    let mut dv = vec![E::zero(); d];
                    for i in 0..t {
                        for j in 0..d {
                            dv[j] = dv[j] + dy[i] * hd[i * d + j];
                        }
                    }
                    dv
                });
                v.accumulate_grad(&dv);
            }
        }
        Op::ScaleRows { h, w } => {
            let (t, d) = (h.shape()[0], h.shape()[1]);
            if h.requires_grad() {
                let dh = w.with_data(|wd| {
                    let mut dh = vec![E::zero(); t * d];
                    for i in 0..t {
                        for j in 0..d {
                            dh[i * d + j] = dy[i * d + j] * wd[i];
                        }
                    }
                    dh
                });
                h.accumulate_grad(&dh);
            }
            if w.requires_grad() {
                let dw = h.with_data(|hd| {
                    (0..t)
                        .map(|i| dot(&dy[i * d..(i + 1) * d], &hd[i * d..(i + 1) * d]))
                        .collect::<Vec<E>>()
                });
                w.accumulate_grad(&dw);
            }
        }
        Op::SoftmaxRows { a } => {
            if a.requires_grad() {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let da = out.with_data(|yd| {
                    let mut da = vec![E::zero(); m * n];
                    for i in 0..m {
                        let y = &yd[i * n..(i + 1) * n];
                        let g = &dy[i * n..(i + 1) * n];
                        let inner = dot(g, y);
                        for j in 0..n {
                            da[i * n + j] = y[j] * (g[j] - inner);
                        }
                    }
                    da
                });
                a.accumulate_grad(&da);
            }
        }
        Op::LayerNorm { a, gain, bias } => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let eps = E::from_f64(LAYER_NORM_EPS);
            let inv_n = E::from_f64(1.0 / n as f64);
            a.with_data(|ad| {
                gain.with_data(|gd| {
                    let mut da = vec![E::zero(); m * n];
                    let mut dgain = vec![E::zero(); n];
                    let mut dbias = vec![E::zero(); n];
                    for i in 0..m {
                        let row = &ad[i * n..(i + 1) * n];
                        let g = &dy[i * n..(i + 1) * n];
                        let (mean, var) = mean_var(row);
                        let inv = (var + eps).sqrt().recip();
                        let xhat: Vec<E> = row.iter().map(|x| (*x - mean) * inv).collect();
                        let dxhat: Vec<E> =
                            g.iter().zip(gd.iter()).map(|(gi, gam)| *gi * *gam).collect();
                        let m1 = dxhat.iter().fold(E::zero(), |acc, x| acc + *x) * inv_n;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .fold(E::zero(), |acc, (dx, xh)| acc + *dx * *xh)
                            * inv_n;
                        for j in 0..n {
                            da[i * n + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                            dgain[j] = dgain[j] + g[j] * xhat[j];
                            dbias[j] = dbias[j] + g[j];
                        }
                    }
                    if a.requires_grad() {
                        a.accumulate_grad(&da);
                    }
                    if gain.requires_grad() {
                        gain.accumulate_grad(&dgain);
                    }
                    if bias.requires_grad() {
                        bias.accumulate_grad(&dbias);
                    }
                })
            });
        }
        Op::Gelu { a } => {
            if a.requires_grad() {
                let da = a.with_data(|ad| {
                    dy.iter()
                        .zip(ad)
                        .map(|(g, x)| *g * gelu_derivative(*x))
                        .collect::<Vec<E>>()
                });
                a.accumulate_grad(&da);
            }
        }
        Op::Embedding { table, ids } => {
            if table.requires_grad() {
                let d = table.shape()[1];
                let mut dt = vec![E::zero(); table.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + dy[i * d + j];
                    }
                }
                table.accumulate_grad(&dt);
            }
        }
        Op::SliceRows { a, start } => {
            if a.requires_grad() {
                let (_, n) = (a.shape()[0], a.shape()[1]);
                let rows = out.shape()[0];
                let mut da = vec![E::zero(); a.numel()];
                da[start * n..(start + rows) * n].copy_from_slice(dy);
                a.accumulate_grad(&da);
            }
        }
        Op::SliceCols { a, start } => {
            if a.requires_grad() {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let w = out.shape()[1];
                let mut da = vec![E::zero(); a.numel()];
                for i in 0..m {
                    da[i * n + start..i * n + start + w]
                        .copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                a.accumulate_grad(&da);
            }
        }
        Op::ConcatRows { parts } => {
            let n = out.shape()[1];
            let mut row = 0;
            for p in parts {
                let m = p.shape()[0];
                if p.requires_grad() {
                    p.accumulate_grad(&dy[row * n..(row + m) * n]);
                }
                row += m;
            }
        }
        Op::ConcatCols { parts } => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let mut col = 0;
            for p in parts {
                let w = p.shape()[1];
                if p.requires_grad() {
                    let mut dp = vec![E::zero(); m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&dy[i * n + col..i * n + col + w]);
                    }
                    p.accumulate_grad(&dp);
                }
                col += w;
            }
        }
        Op::MeanRows { a } => {
            if a.requires_grad() {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let inv = E::from_f64(1.0 / m as f64);
                let mut da = vec![E::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = dy[j] * inv;
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::SumAll { a } => {
            if a.requires_grad() {
                a.accumulate_grad(&vec![dy[0]; a.numel()]);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if logits.requires_grad() {
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                let inv_b = E::from_f64(1.0 / b as f64);
                let mut dl = vec![E::zero(); b * c];
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == y { E::one() } else { E::zero() };
                        dl[i * c + j] = dy[0] * (probs[i * c + j] - indicator) * inv_b;
                    }
                }
                logits.accumulate_grad(&dl);
            }
        }
    }
}

/// Adjoint of a cosine-similarity row block shared by the scalar and
/// row-wise variants. `h` is `t×d` (or a single vector when `t == 1`).
fn cosine_backward<E: Element>(h: &Tensor<E>, v: &Tensor<E>, t: usize, d: usize, dy: &[E]) {
    let eps = E::from_f64(COSINE_EPS);
    h.with_data(|hd| {
        v.with_data(|vd| {
            let nv = norm(vd);
            let mut dh = vec![E::zero(); t * d];
            let mut dv = vec![E::zero(); d];
            for i in 0..t {
                let row = &hd[i * d..(i + 1) * d];
                let s = dot(row, vd);
                let nh = norm(row);
                let den = nh * nv + eps;
                let g = den.recip();
                let g2 = g * g;
                // dc/dh = v·g − (s·nv/nh)·h·g²  (second term vanishes as h → 0)
                let h_coef = if nh > E::zero() { s * nv / nh * g2 } else { E::zero() };
                let v_coef = if nv > E::zero() { s * nh / nv * g2 } else { E::zero() };
                for j in 0..d {
                    dh[i * d + j] = dy[i] * (vd[j] * g - h_coef * row[j]);
                    dv[j] = dv[j] + dy[i] * (row[j] * g - v_coef * vd[j]);
                }
            }
            if h.requires_grad() {
                h.accumulate_grad(&dh);
            }
            if v.requires_grad() {
                v.accumulate_grad(&dv);
            }
        })
    });
}

/// Reduce a full-shape adjoint down to `target_len` by summing row blocks;
/// identity when the lengths already match. `sign` folds in subtraction.
fn reduce_for<E: Element>(b: &Tensor<E>, dy: &[E], sign: E) -> Vec<E> {
    let scaled: Vec<E> = dy.iter().map(|g| *g * sign).collect();
    reduce_rows_to(b.numel(), &scaled)
}

fn reduce_rows_to<E: Element>(target_len: usize, dy: &[E]) -> Vec<E> {
    if dy.len() == target_len {
        return dy.to_vec();
    }
    let mut out = vec![E::zero(); target_len];
    for (idx, g) in dy.iter().enumerate() {
        out[idx % target_len] = out[idx % target_len] + *g;
    }
    out
}

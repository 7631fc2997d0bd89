//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is a topological order, so `backward` is a single reverse sweep.
//! Attention, RMS normalisation, rotary embedding and the losses are fused
//! nodes with hand-written gradients; everything else is elementwise or a
//! matrix product.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::rng::Rng;
use crate::tensor::{gemm, Float, HasParams, Precision, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row layout of a batch of sequences packed as `[batch * seq, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxLast(Var),
    RsqrtMeanSq(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv: Vec<T>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        heads: usize,
    },
    Attention(Box<AttentionSaved<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: Var,
    own: Option<(Var, Var)>,
    shared: Option<(Var, Var)>,
    layout: SeqLayout,
    n_shared: usize,
    probs: Vec<T>,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, Var>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Rotation angle for pair `i` of a head of width `head_dim` at `pos`.
pub(crate) fn rope_angle(pos: usize, i: usize, head_dim: usize) -> f64 {
    let freq = 10000f64.powf(-(2.0 * i as f64) / head_dim as f64);
    pos as f64 * freq
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of `t`; tracks gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.nodes[v.0].name = Some(name.to_string());
        self.names.insert(name.to_string(), v);
        v
    }

    /// Untracked input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("expected a matrix, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- products -------------------------------------------------------

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (b0, b1) = self.matrix(b, "matmul")?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out): (Vec<usize>, Vec<T>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            (sa, va.iter().map(|&x| f(x, vb[0])).collect())
        } else if va.len() == 1 {
            (sb, vb.iter().map(|&y| f(va[0], y)).collect())
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        };
        let node = match op {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(shape, out, node, &[a, b]))
    }

    /// Elementwise sum; either side may be a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c_t = T::of(c);
        self.unary(x, |v| v * c_t, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::NonPositive { op: "log" });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::SoftmaxLast(x), &[x])
    }

    /// `1 / sqrt(mean(x²) + eps)` per row of the last dimension; the last
    /// dimension of the result has size 1.
    pub fn rsqrt_meansq(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let eps_t = T::of(eps);
        let mut out = Vec::with_capacity(rows);
        for row in self.value(x).chunks(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(cols as f64) + eps_t;
            if ms <= T::zero() {
                return Err(TensorError::NonPositive { op: "rsqrt_meansq" });
            }
            out.push(T::one() / ms.sqrt());
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = 1;
        Ok(self.push(shape, out, Op::RsqrtMeanSq(x), &[x]))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ w` row by row; `w` has the row width.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(w).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::NonPositive { op: "rmsnorm eps" });
        }
        let eps_t = T::of(eps);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut inv = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xv.chunks(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(cols as f64);
            let r = T::one() / (ms + eps_t).sqrt();
            inv.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::RmsNorm { x, w, inv }, &[x, w]))
    }

    /// Adds a row vector `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(b).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias { x, b }, &[x, b]))
    }

    // ---- indexing -------------------------------------------------------

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                detail: format!("id {bad} out of range for {vocab} rows"),
            });
        }
        let tv = self.value(table);
        let out: Vec<T> = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: "index out of range".into(),
            });
        }
        let xv = self.value(x);
        let out: Vec<T> = idx
            .iter()
            .flat_map(|&i| xv[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let (_, d) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {cols}", start + len),
            });
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, &[x]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Inverted dropout: kept entries are divided by `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                detail: format!("probability {p}"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    // ---- transformer blocks --------------------------------------------

    /// Rotary position embedding on `[rows, heads * head_dim]`; row `r` sits
    /// at `positions[r]`. Adjacent pairs of each head are rotated by
    /// `pos · 10000^(-2i / head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix(x, "rope")?;
        if heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "rope",
                detail: format!("width {width} over {heads} heads needs an even head dimension"),
            });
        }
        if positions.len() != rows {
            return Err(TensorError::Invalid {
                op: "rope",
                detail: format!("{} positions for {rows} rows", positions.len()),
            });
        }
        let mut out = self.value(x).to_vec();
        rotate_rows(&mut out, width, positions, heads, 1.0);
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            heads,
        };
        Ok(self.push(vec![rows, width], out, op, &[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch * seq, d]`. `own` keys/values share the layout of `q`
    /// and are masked causally within each sequence. `shared` keys/values are
    /// `[n, d]` rows visible to every query of every sequence. At least one
    /// of the two must be present; a single softmax covers both.
    pub fn attention(
        &mut self,
        q: Var,
        own: Option<(Var, Var)>,
        shared: Option<(Var, Var)>,
        layout: SeqLayout,
    ) -> Result<Var> {
        let SeqLayout { batch, seq, heads } = layout;
        let (rows, d) = self.matrix(q, "attention")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                detail: format!("q {rows}x{d} vs batch {batch} seq {seq} heads {heads}"),
            });
        }
        if own.is_none() && shared.is_none() {
            return Err(TensorError::Invalid {
                op: "attention",
                detail: "no keys".into(),
            });
        }
        for (k, v) in own.iter().chain(shared.iter()) {
            if self.shape(*k) != self.shape(*v) || self.shape(*k)[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: self.shape(*k).to_vec(),
                    rhs: self.shape(*v).to_vec(),
                });
            }
        }
        if let Some((k, _)) = own {
            if self.shape(k)[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: self.shape(q).to_vec(),
                    rhs: self.shape(k).to_vec(),
                });
            }
        }
        let n_shared = shared.map_or(0, |(k, _)| self.shape(k)[0]);
        let n_own = if own.is_some() { seq } else { 0 };
        let width = n_shared + n_own;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let qv = self.value(q);
        let own_kv = own.map(|(k, v)| (self.value(k), self.value(v)));
        let shared_kv = shared.map(|(k, v)| (self.value(k), self.value(v)));

        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * width];
        out.par_chunks_mut(seq * d)
            .zip(probs.par_chunks_mut(heads * seq * width))
            .enumerate()
            .for_each(|(b, (out_b, probs_b))| {
                let mut scores = vec![T::zero(); width];
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..seq {
                        let qi = &qv[(b * seq + i) * d + c0..][..dh];
                        let visible = n_shared + if own.is_some() { i + 1 } else { 0 };
                        if let Some((ks, _)) = shared_kv {
                            for j in 0..n_shared {
                                scores[j] = dot(qi, &ks[j * d + c0..][..dh]) * scale;
                            }
                        }
                        if let Some((ko, _)) = own_kv {
                            for j in 0..=i {
                                scores[n_shared + j] =
                                    dot(qi, &ko[(b * seq + j) * d + c0..][..dh]) * scale;
                            }
                        }
                        softmax_in_place(&mut scores[..visible]);
                        let p_row = &mut probs_b[(h * seq + i) * width..][..width];
                        p_row[..visible].copy_from_slice(&scores[..visible]);
                        let o = &mut out_b[i * d + c0..][..dh];
                        if let Some((_, vs)) = shared_kv {
                            for j in 0..n_shared {
                                axpy(o, p_row[j], &vs[j * d + c0..][..dh]);
                            }
                        }
                        if let Some((_, vo)) = own_kv {
                            for j in 0..=i {
                                axpy(o, p_row[n_shared + j], &vo[(b * seq + j) * d + c0..][..dh]);
                            }
                        }
                    }
                }
            });
        let mut inputs = vec![q];
        if let Some((k, v)) = own {
            inputs.extend([k, v]);
        }
        if let Some((k, v)) = shared {
            inputs.extend([k, v]);
        }
        let saved = AttentionSaved {
            q,
            own,
            shared,
            layout,
            n_shared,
            probs,
        };
        Ok(self.push(vec![rows, d], out, Op::Attention(Box::new(saved)), &inputs))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: format!("target {bad} out of range for {classes} classes"),
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                detail: "every position is masked".into(),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * classes..][..classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += (lse - row[t]).f64();
            let p = &mut probs[r * classes..][..classes];
            p.iter_mut()
                .zip(row)
                .for_each(|(p, &v)| *p = (v - lse).exp());
        }
        let loss = T::of(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Mean binary cross-entropy with logits over every entry.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                detail: format!("{} targets for {} logits", targets.len(), lv.len()),
            });
        }
        let total: f64 = lv
            .iter()
            .zip(targets)
            .map(|(&x, &y)| {
                let x = x.f64();
                x.max(0.0) - x * y.f64() + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = T::of(total / lv.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-valued `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let mut by_var = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                by_var.insert(Var(i), g);
            }
        }
        let names = self.names.iter().map(|(n, v)| (n.clone(), *v)).collect();
        Ok(Gradients { by_var, names })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Accumulates into an input's gradient when that input is tracked.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body;
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a, |da| if *trans_b {
                    gemm(m, n, k, g, false, bv, false, da, true)
                } else {
                    gemm(m, n, k, g, false, bv, true, da, true)
                });
                acc!(*b, |db| if *trans_b {
                    gemm(n, m, k, g, true, av, false, db, true)
                } else {
                    gemm(k, m, n, av, true, g, false, db, true)
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    acc!(v, |d| if d.len() == g.len() {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + s * x)
                    } else {
                        d[0] = d[0] + s * g.iter().copied().sum::<T>()
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick = |vals: &[T], j: usize| if vals.len() == 1 { vals[0] } else { vals[j] };
                for (v, other) in [(*a, bv), (*b, av)] {
                    acc!(v, |d| if d.len() == g.len() {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d = *d + g[j] * pick(other, j);
                        }
                    } else {
                        d[0] = d[0] + (0..g.len()).map(|j| g[j] * pick(other, j)).sum::<T>()
                    });
                }
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                acc!(*x, |d| d
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d = *d + c * x));
            }
            Op::Exp(x) => acc!(*x, |d| for j in 0..g.len() {
                d[j] = d[j] + g[j] * out[j]
            }),
            Op::Log(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| for j in 0..g.len() {
                    d[j] = d[j] + g[j] / xv[j]
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| for j in 0..g.len() {
                    let s = sigmoid(xv[j]);
                    d[j] = d[j] + g[j] * (s + xv[j] * s * (T::one() - s));
                });
            }
            Op::Sigmoid(x) => acc!(*x, |d| for j in 0..g.len() {
                d[j] = d[j] + g[j] * out[j] * (T::one() - out[j])
            }),
            Op::Tanh(x) => acc!(*x, |d| for j in 0..g.len() {
                d[j] = d[j] + g[j] * (T::one() - out[j] * out[j])
            }),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| for j in 0..g.len() {
                    if xv[j] > T::zero() {
                        d[j] = d[j] + g[j];
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let cols = *node.shape.last().unwrap();
                acc!(*x, |d| for ((dr, gr), yr) in
                    d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                {
                    let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dotp);
                    }
                });
            }
            Op::RsqrtMeanSq(x) => {
                let xv = self.value(*x);
                let cols = xv.len() / out.len();
                let inv_n = T::of(1.0 / cols as f64);
                acc!(*x, |d| for (r, (dr, xr)) in
                    d.chunks_mut(cols).zip(xv.chunks(cols)).enumerate()
                {
                    let coef = -g[r] * out[r] * out[r] * out[r] * inv_n;
                    for j in 0..cols {
                        dr[j] = dr[j] + coef * xr[j];
                    }
                });
            }
            Op::RmsNorm { x, w, inv } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cols = wv.len();
                let inv_n = T::of(1.0 / cols as f64);
                acc!(
                    *w,
                    |dw| for (r, (gr, xr)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        for j in 0..cols {
                            dw[j] = dw[j] + gr[j] * xr[j] * inv[r];
                        }
                    }
                );
                acc!(*x, |dx| for (r, ((dr, gr), xr)) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xv.chunks(cols))
                    .enumerate()
                {
                    let s: T = (0..cols).map(|j| wv[j] * gr[j] * xr[j]).sum();
                    let ir = inv[r];
                    let coef = ir * ir * ir * s * inv_n;
                    for j in 0..cols {
                        dr[j] = dr[j] + ir * wv[j] * gr[j] - coef * xr[j];
                    }
                });
            }
            Op::AddBias { x, b } => {
                let cols = self.value(*b).len();
                acc!(*x, |d| add_into(d, g));
                acc!(*b, |db| for gr in g.chunks(cols) {
                    add_into(db, gr)
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                acc!(*table, |dt| for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d])
                });
            }
            Op::GatherRows { x, idx } => {
                let d = node.shape[1];
                acc!(*x, |dx| for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d])
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc!(p, |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let len = node.shape[1];
                acc!(
                    *x,
                    |dx| for (dr, gr) in dx.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut dr[*start..start + len], gr)
                    }
                );
            }
            Op::Sum(x) => acc!(*x, |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc!(*x, |d| d.iter_mut().for_each(|d| *d = *d + g[0] / n));
            }
            Op::Dropout { x, mask } => acc!(*x, |d| for j in 0..g.len() {
                d[j] = d[j] + g[j] * mask[j]
            }),
            Op::Rope {
                x,
                positions,
                heads,
            } => {
                let width = node.shape[1];
                let mut back = g.to_vec();
                rotate_rows(&mut back, width, positions, *heads, -1.0);
                acc!(*x, |d| add_into(d, &back));
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = node_cols(&self.nodes[logits.0].shape);
                let scale = g[0] / T::of(*count as f64);
                acc!(*logits, |d| for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let dr = &mut d[r * classes..][..classes];
                    let pr = &probs[r * classes..][..classes];
                    for j in 0..classes {
                        dr[j] = dr[j] + scale * pr[j];
                    }
                    dr[t] = dr[t] - scale;
                });
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g[0] / T::of(lv.len() as f64);
                acc!(*logits, |d| for j in 0..lv.len() {
                    d[j] = d[j] + scale * (sigmoid(lv[j]) - targets[j]);
                });
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let SeqLayout { batch, seq, heads } = s.layout;
        let d = self.shape(s.q)[1];
        let dh = d / heads;
        let n_shared = s.n_shared;
        let has_own = s.own.is_some();
        let width = n_shared + if has_own { seq } else { 0 };
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qv = self.value(s.q);
        let own_kv = s.own.map(|(k, v)| (self.value(k), self.value(v)));
        let shared_kv = s.shared.map(|(k, v)| (self.value(k), self.value(v)));

        struct Part<T> {
            dq: Vec<T>,
            dk: Vec<T>,
            dv: Vec<T>,
            dks: Vec<T>,
            dvs: Vec<T>,
        }
        let parts: Vec<Part<T>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut p = Part {
                    dq: vec![T::zero(); seq * d],
                    dk: vec![T::zero(); if has_own { seq * d } else { 0 }],
                    dv: vec![T::zero(); if has_own { seq * d } else { 0 }],
                    dks: vec![T::zero(); n_shared * d],
                    dvs: vec![T::zero(); n_shared * d],
                };
                let mut dp = vec![T::zero(); width];
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..seq {
                        let visible = n_shared + if has_own { i + 1 } else { 0 };
                        let pr = &s.probs[((b * heads + h) * seq + i) * width..][..width];
                        let go = &g[(b * seq + i) * d + c0..][..dh];
                        // dP and dV
                        if let Some((_, vs)) = shared_kv {
                            for j in 0..n_shared {
                                dp[j] = dot(go, &vs[j * d + c0..][..dh]);
                                axpy(&mut p.dvs[j * d + c0..][..dh], pr[j], go);
                            }
                        }
                        if let Some((_, vo)) = own_kv {
                            for j in 0..=i {
                                dp[n_shared + j] = dot(go, &vo[(b * seq + j) * d + c0..][..dh]);
                                axpy(&mut p.dv[j * d + c0..][..dh], pr[n_shared + j], go);
                            }
                        }
                        let centre: T = (0..visible).map(|j| pr[j] * dp[j]).sum();
                        let qi = &qv[(b * seq + i) * d + c0..][..dh];
                        for j in 0..visible {
                            let ds = pr[j] * (dp[j] - centre) * scale;
                            if j < n_shared {
                                let (ks, _) = shared_kv.unwrap();
                                axpy(&mut p.dq[i * d + c0..][..dh], ds, &ks[j * d + c0..][..dh]);
                                axpy(&mut p.dks[j * d + c0..][..dh], ds, qi);
                            } else {
                                let jj = j - n_shared;
                                let (ko, _) = own_kv.unwrap();
                                axpy(
                                    &mut p.dq[i * d + c0..][..dh],
                                    ds,
                                    &ko[(b * seq + jj) * d + c0..][..dh],
                                );
                                axpy(&mut p.dk[jj * d + c0..][..dh], ds, qi);
                            }
                        }
                    }
                }
                p
            })
            .collect();

        let mut scatter = |v: Var, pick: &dyn Fn(&Part<T>) -> &[T], per_batch: bool| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            for (b, part) in parts.iter().enumerate() {
                let src = pick(part);
                if per_batch {
                    add_into(&mut buf[b * src.len()..(b + 1) * src.len()], src);
                } else {
                    add_into(buf, src);
                }
            }
        };
        scatter(s.q, &|p| &p.dq, true);
        if let Some((k, v)) = s.own {
            scatter(k, &|p| &p.dk, true);
            scatter(v, &|p| &p.dv, true);
        }
        if let Some((k, v)) = s.shared {
            scatter(k, &|p| &p.dks, false);
            scatter(v, &|p| &p.dvs, false);
        }
    }
}

fn node_cols(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<T: Float>(y: &mut [T], a: T, x: &[T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y = *y + a * x);
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

fn rotate_rows<T: Float>(
    data: &mut [T],
    width: usize,
    positions: &[usize],
    heads: usize,
    sign: f64,
) {
    let dh = width / heads;
    for (row, &pos) in data.chunks_mut(width).zip(positions) {
        if pos == 0 {
            continue;
        }
        for i in 0..dh / 2 {
            let angle = sign * rope_angle(pos, i, dh);
            let (c, s) = (T::of(angle.cos()), T::of(angle.sin()));
            for h in 0..heads {
                let j = h * dh + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
///
/// Every tracked leaf has an entry; leaves the loss does not reach hold
/// zeros.
pub struct Gradients<T> {
    by_var: HashMap<Var, Vec<T>>,
    names: HashMap<String, Var>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }

    pub fn named(&self, name: &str) -> Option<&[T]> {
        self.names.get(name).and_then(|v| self.get(*v))
    }

    /// Adds each named gradient into the matching trainable tensor, scaled
    /// by `scale`.
    pub fn accumulate_into<P: HasParams<T> + ?Sized>(&self, target: &mut P, scale: T) {
        for (name, t) in target.params_mut() {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = self.named(&name) {
                if scale == T::one() {
                    t.accumulate_grad(g);
                } else {
                    let scaled: Vec<T> = g.iter().map(|&x| x * scale).collect();
                    t.accumulate_grad(&scaled);
                }
            }
        }
    }
}

/// Largest relative error between the graph gradient of a scalar function
/// and central differences `(f(x+eps) - f(x-eps)) / (2 eps)`, over every
/// coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to selected coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::NonPositiveStep);
    }
    let tracked = x.clone().with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&tracked);
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).expect("tracked leaf").to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(x.shape(), data)?;
        let mut g = Graph::new();
        let v = g.leaf(&t);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let mut worst = 0.0f64;
    for &c in coords {
        let mut plus = x.data().to_vec();
        plus[c] += eps;
        let mut minus = x.data().to_vec();
        minus[c] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[c], numeric));
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both are exactly zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn tracked(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        t(shape, data).with_requires_grad(true)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(&t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &[3.0, -1.0, 2.5, 7.0]);

        let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);

        let z = g.leaf(&Tensor::new(&[2, 3], Fill::Zeros).unwrap());
        let any = g.leaf(
            &Tensor::new(
                &[3, 2],
                Fill::Gaussian {
                    mean: 0.0,
                    std: 1.0,
                    seed: 1,
                },
            )
            .unwrap(),
        );
        let zz = g.matmul(z, any).unwrap();
        assert_eq!(g.value(zz), &[0.0; 4]);

        assert!(matches!(
            g.matmul(a, a),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax_lastdim(z);
        for &p in g.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let zero = g.leaf(&t(&[1], &[0.0]));
        let sg = g.sigmoid(zero);
        assert_eq!(g.value(sg), &[0.5]);
        let one = g.leaf(&t(&[1], &[1.0]));
        let si = g.silu(one);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.value(si)[0] - expected).abs() < 1e-15);
        assert!((g.value(si)[0] - 0.731059).abs() < 1e-6);
        assert!(matches!(g.log(zero), Err(TensorError::NonPositive { .. })));
        let a = g.leaf(&t(&[2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(
            g.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            g.rsqrt_meansq(zero, 0.0),
            Err(TensorError::NonPositive { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&tracked(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(&tracked(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(g.backward(s).err(), Some(TensorError::GraphConsumed));
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut frozen = t(&[2], &[1.0, 2.0]);
        let mut live = tracked(&[2], &[3.0, 4.0]);
        let mut g = Graph::new();
        let a = g.param("frozen", &frozen);
        let b = g.param("live", &live);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.named("live").unwrap(), &[1.0, 2.0]);
        struct Two<'a>(&'a mut Tensor<f64>, &'a mut Tensor<f64>);
        impl HasParams<f64> for Two<'_> {
            fn params(&self) -> Vec<(String, &Tensor<f64>)> {
                vec![("frozen".into(), &*self.0), ("live".into(), &*self.1)]
            }
            fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
                vec![
                    ("frozen".into(), &mut *self.0),
                    ("live".into(), &mut *self.1),
                ]
            }
        }
        grads.accumulate_into(&mut Two(&mut frozen, &mut live), 1.0);
        assert!(frozen.grad().is_none());
        assert_eq!(live.grad().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&tracked(&[2], &[1.0, 2.0]));
        let y = g.leaf(&tracked(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&tracked(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn grad_check_examples() {
        let x = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "err {err}");
        let err = grad_check(|g, _x| g.constant(&[1], vec![3.0]), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(
            grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).err(),
            Some(TensorError::NonPositiveStep)
        );
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::new(
            shape,
            Fill::Gaussian {
                mean: 0.0,
                std: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let w = rand_t(g.shape(y), seed);
        let w = g.leaf(&w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let x = rand_t(&[3, 4], 11);
        let other = rand_t(&[3, 4], 12);
        let mat = rand_t(&[4, 5], 13);
        let mat_t = rand_t(&[5, 4], 14);
        let w = rand_t(&[4], 15);
        let one = t(&[1], &[0.8]);
        let pos = t(
            &[3, 4],
            &[0.5, 1.0, 1.5, 2.0, 0.2, 0.4, 0.6, 0.8, 1.1, 1.3, 1.7, 1.9],
        );
        type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;
        let o = other.clone();
        let m = mat.clone();
        let mt = mat_t.clone();
        let wc = w.clone();
        let cases: Vec<(&str, Case, &Tensor<f64>)> = vec![
            (
                "add",
                Box::new(move |g, x| {
                    let b = g.leaf(&o);
                    let y = g.add(x, b)?;
                    weighted_sum(g, y, 1)
                }),
                &x,
            ),
            (
                "sub_scalar",
                Box::new(|g, x| {
                    let b = g.constant(&[1], vec![0.7])?;
                    let y = g.sub(b, x)?;
                    weighted_sum(g, y, 2)
                }),
                &x,
            ),
            (
                "mul_self",
                Box::new(|g, x| {
                    let y = g.mul(x, x)?;
                    weighted_sum(g, y, 3)
                }),
                &x,
            ),
            (
                "matmul",
                Box::new(move |g, x| {
                    let b = g.leaf(&m);
                    let y = g.matmul(x, b)?;
                    weighted_sum(g, y, 4)
                }),
                &x,
            ),
            (
                "matmul_t",
                Box::new(move |g, x| {
                    let b = g.leaf(&mt);
                    let y = g.matmul_t(x, b)?;
                    weighted_sum(g, y, 5)
                }),
                &x,
            ),
            (
                "matmul_rhs",
                Box::new(|g, x| {
                    let y = g.matmul_t(x, x)?;
                    weighted_sum(g, y, 6)
                }),
                &x,
            ),
            (
                "scale_exp",
                Box::new(|g, x| {
                    let y = g.scale(x, 0.5);
                    let y = g.exp(y);
                    weighted_sum(g, y, 7)
                }),
                &x,
            ),
            (
                "log",
                Box::new(|g, x| {
                    let y = g.log(x)?;
                    weighted_sum(g, y, 8)
                }),
                &pos,
            ),
            (
                "silu",
                Box::new(|g, x| {
                    let y = g.silu(x);
                    weighted_sum(g, y, 9)
                }),
                &x,
            ),
            (
                "sigmoid",
                Box::new(|g, x| {
                    let y = g.sigmoid(x);
                    weighted_sum(g, y, 10)
                }),
                &x,
            ),
            (
                "tanh",
                Box::new(|g, x| {
                    let y = g.tanh(x);
                    weighted_sum(g, y, 11)
                }),
                &x,
            ),
            (
                "softmax",
                Box::new(|g, x| {
                    let y = g.softmax_lastdim(x);
                    weighted_sum(g, y, 12)
                }),
                &x,
            ),
            (
                "rsqrt_meansq",
                Box::new(|g, x| {
                    let y = g.rsqrt_meansq(x, 1e-3)?;
                    weighted_sum(g, y, 13)
                }),
                &x,
            ),
            (
                "rmsnorm_x",
                Box::new(move |g, x| {
                    let wv = g.leaf(&wc);
                    let y = g.rmsnorm(x, wv, 1e-5)?;
                    weighted_sum(g, y, 14)
                }),
                &x,
            ),
            (
                "rmsnorm_w",
                Box::new(move |g, wv| {
                    let xv = g.leaf(&rand_t(&[3, 4], 40));
                    let y = g.rmsnorm(xv, wv, 1e-5)?;
                    weighted_sum(g, y, 15)
                }),
                &w,
            ),
            (
                "bias",
                Box::new(|g, b| {
                    let xv = g.leaf(&rand_t(&[3, 4], 41));
                    let y = g.add_bias(xv, b)?;
                    let y = g.tanh(y);
                    weighted_sum(g, y, 16)
                }),
                &w,
            ),
            (
                "embedding",
                Box::new(|g, tab| {
                    let y = g.embedding(tab, &[2, 0, 2, 1])?;
                    weighted_sum(g, y, 17)
                }),
                &x,
            ),
            (
                "gather_concat_slice",
                Box::new(|g, x| {
                    let a = g.gather_rows(x, &[1, 1, 2])?;
                    let c = g.concat_rows(&[a, x])?;
                    let s = g.slice_cols(c, 1, 2)?;
                    let s = g.tanh(s);
                    weighted_sum(g, s, 18)
                }),
                &x,
            ),
            (
                "mean",
                Box::new(|g, x| {
                    let y = g.mul(x, x)?;
                    Ok(g.mean(y))
                }),
                &x,
            ),
            (
                "scalar_mul",
                Box::new(|g, s| {
                    let xv = g.leaf(&rand_t(&[3, 4], 42));
                    let y = g.mul(xv, s)?;
                    weighted_sum(g, y, 19)
                }),
                &one,
            ),
            (
                "cross_entropy",
                Box::new(|g, x| g.cross_entropy(x, &[Some(1), None, Some(3)])),
                &x,
            ),
            (
                "bce",
                Box::new(|g, x| {
                    g.bce_with_logits(x, &[1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1.])
                }),
                &x,
            ),
            (
                "rope",
                Box::new(|g, x| {
                    let y = g.rope(x, &[0, 1, 5], 1)?;
                    weighted_sum(g, y, 20)
                }),
                &x,
            ),
        ];
        for (name, f, input) in &cases {
            let err = grad_check(f, input, 1e-6).unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn attention_gradients_all_inputs() {
        let layout = SeqLayout {
            batch: 2,
            seq: 3,
            heads: 2,
        };
        let base: Vec<Tensor<f64>> = (0..5)
            .map(|i| rand_t(if i < 3 { &[6, 4] } else { &[2, 4] }, 50 + i))
            .collect();
        for which in 0..5 {
            let b2 = base.clone();
            let f = move |g: &mut Graph<f64>, x: Var| {
                let mut vars: Vec<Var> = b2.iter().map(|t| g.leaf(t)).collect();
                vars[which] = x;
                let y = g.attention(
                    vars[0],
                    Some((vars[1], vars[2])),
                    Some((vars[3], vars[4])),
                    layout,
                )?;
                weighted_sum(g, y, 60)
            };
            let err = grad_check(f, &base[which], 1e-6).unwrap();
            assert!(err < 1e-6, "input {which}: {err}");
        }
        // Shared-only (no causal keys).
        let b2 = base.clone();
        let f = move |g: &mut Graph<f64>, x: Var| {
            let kv = (g.leaf(&b2[3]), g.leaf(&b2[4]));
            let y = g.attention(x, None, Some(kv), layout)?;
            weighted_sum(g, y, 61)
        };
        assert!(grad_check(f, &base[0], 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn attention_hand_computed() {
        // One head, d = 2, two positions.
        let layout = SeqLayout {
            batch: 1,
            seq: 2,
            heads: 1,
        };
        let mut g = Graph::<f64>::new();
        let q = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let k = g.leaf(&t(&[2, 2], &[1.0, 1.0, 2.0, 0.0]));
        let v = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = g.attention(q, Some((k, v)), None, layout).unwrap();
        let o = g.value(out);
        // Position 0 only sees itself.
        assert_eq!(&o[0..2], &[1.0, 0.0]);
        // Position 1: scores q1·k0 = 2, q1·k1 = 0, scaled by 1/sqrt(2).
        let s0 = 2.0 / 2f64.sqrt();
        let p0 = s0.exp() / (s0.exp() + 1.0);
        assert!((o[2] - p0).abs() < 1e-12);
        assert!((o[3] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = Tensor::<f32>::new(
            &[5, 7],
            Fill::Gaussian {
                mean: 0.0,
                std: 3.0,
                seed: 2,
            },
        )
        .unwrap();
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let s = g.softmax_lastdim(v);
        for row in g.value(s).chunks(7) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every op appends a node holding its forward value. Nodes are created in
//! topological order, so `backward` walks the tape from the loss towards the
//! start once and accumulates adjoints into the inputs of each node. Leaves
//! created with `requires_grad` keep an accumulated gradient that survives
//! repeated `backward` calls until `zero_grad`.

use rand::Rng;

use crate::doc_attention::{doc_scaled_row, DocLayout};
use crate::error::{Error, Result};
use crate::mask::AttentionMaskMatrix;
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Gelu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    DocSoftmax {
        x: Var,
        layouts: Vec<DocLayout>,
        rows_per_layout: usize,
        per_doc: Vec<f64>,
        scaling: Vec<Vec<f64>>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    SplitHeads {
        x: Var,
        dims: [usize; 4],
    },
    MergeHeads {
        x: Var,
        dims: [usize; 4],
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Batched product `a[..., m, k] · b[..., k, n]`. A 2-D `b` is shared by
    /// every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched product `a[..., m, k] · b[..., n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op_name = if transpose_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err(op_name, a, b));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2;
        if kb != k || (!shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(self.shape_err(op_name, a, b));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let a_blk = &ad[i * m * k..(i + 1) * m * k];
                let b_blk = if shared_b {
                    bd
                } else {
                    &bd[i * k * n..(i + 1) * k * n]
                };
                let c_blk = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    mm_nt(a_blk, b_blk, c_blk, m, k, n);
                } else {
                    mm_nn(a_blk, b_blk, c_blk, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                transpose_b,
            },
            &[a, b],
        ))
    }

    /// Elementwise sum; `b` may be broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err("add", a, b));
        }
        let bd = self.value(b).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Normalizes each last-axis vector to zero mean and unit population
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis. Denied positions get exactly zero weight;
    /// the max shift and the normalizer only range over allowed entries.
    ///
    /// `masks` holds one matrix per leading batch entry (or a single matrix
    /// shared by all rows); rows in between, such as attention heads, reuse
    /// the mask of their batch entry.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        masks: Option<&[AttentionMaskMatrix]>,
    ) -> Result<Var> {
        let cols = self.value(x).last_dim();
        let xd = self.value(x).data();
        let rows = xd.len() / cols.max(1);
        let mut out = vec![0.0; xd.len()];
        let lookup = match masks {
            Some(ms) => Some(MaskLookup::new(ms, rows, cols).ok_or_else(|| Error::Shape {
                op: "masked_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![ms.len(), ms[0].rows(), ms[0].cols()],
            })?),
            None => None,
        };
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let allow = lookup.as_ref().map(|l| l.row(r));
            let allowed = |k: usize| allow.is_none_or(|a| a[k]);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (k, &v) in row.iter().enumerate() {
                if allowed(k) {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: r });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if allowed(k) {
                    o[k] = (v - max).exp();
                    sum += o[k];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Document-scaled attention weights over the last axis. `layouts` holds
    /// one entry per leading batch entry; the remaining rows (heads, queries)
    /// of that entry share it.
    pub fn doc_softmax(&mut self, x: Var, layouts: &[DocLayout]) -> Result<Var> {
        let cols = self.value(x).last_dim();
        let numel = self.value(x).numel();
        let rows = numel / cols.max(1);
        if layouts.is_empty()
            || !rows.is_multiple_of(layouts.len())
            || layouts.iter().any(|l| l.len() != cols)
        {
            return Err(Error::Shape {
                op: "doc_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![layouts.len(), layouts.first().map_or(0, |l| l.len())],
            });
        }
        let rows_per_layout = rows / layouts.len();
        let mut per_doc = vec![0.0; numel];
        let mut weights = vec![0.0; numel];
        let mut scaling = Vec::with_capacity(rows);
        let xd = self.value(x).data();
        for r in 0..rows {
            let layout = &layouts[r / rows_per_layout];
            let span = r * cols..(r + 1) * cols;
            let mut s = vec![0.0; layout.n_docs()];
            doc_scaled_row(
                &xd[span.clone()],
                layout,
                &mut per_doc[span.clone()],
                &mut s,
                &mut weights[span],
            )
            .map_err(|_| Error::DegenerateRow { row: r })?;
            scaling.push(s);
        }
        let value = Tensor::new(self.shape(x).to_vec(), weights)?;
        Ok(self.push(
            value,
            Op::DocSoftmax {
                x,
                layouts: layouts.to_vec(),
                rows_per_layout,
                per_doc,
                scaling,
            },
            &[x],
        ))
    }

    /// Gathers rows of a `[V, d]` table; output shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embedding",
                lhs: shape.to_vec(),
                rhs: vec![bad],
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[B, T, H·dh] → [B, H, T, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: s,
                rhs: vec![heads],
            });
        }
        let dims = [s[0], s[1], heads, s[2] / heads];
        let out = permute_heads(self.value(x).data(), dims, true);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(value, Op::SplitHeads { x, dims }, &[x]))
    }

    /// `[B, H, T, dh] → [B, T, H·dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: s,
                rhs: vec![],
            });
        }
        let dims = [s[0], s[2], s[1], s[3]];
        let out = permute_heads(self.value(x).data(), dims, false);
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] * dims[3]], out)?;
        Ok(self.push(value, Op::MergeHeads { x, dims }, &[x]))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without a new node.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, keep }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T, V]`, skipping rows whose target equals `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let v = s[1];
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= v {
                return Err(Error::TargetOutOfRange { id: t, vocab: v });
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (pv, &x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                z += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= z;
            }
            total += max + z.ln() - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Propagates adjoints from a scalar `loss` and accumulates them into the
    /// gradients of every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let ctx = BackCtx { nodes: &self.nodes };
            match &node.op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        None => node.grad = Some(g),
                    }
                }
                Op::Constant => {}
                op => ctx.propagate(op, &node.value, &g, &mut adj),
            }
        }
        Ok(())
    }
}

struct MaskLookup<'a> {
    masks: &'a [AttentionMaskMatrix],
    rows_per_mask: usize,
    mask_rows: usize,
}

impl<'a> MaskLookup<'a> {
    fn new(masks: &'a [AttentionMaskMatrix], rows: usize, cols: usize) -> Option<Self> {
        let first = masks.first()?;
        let mask_rows = first.rows();
        if masks.iter().any(|m| m.cols() != cols || m.rows() != mask_rows)
            || mask_rows == 0
            || !rows.is_multiple_of(masks.len())
        {
            return None;
        }
        let rows_per_mask = rows / masks.len();
        if !rows_per_mask.is_multiple_of(mask_rows) {
            return None;
        }
        Some(MaskLookup {
            masks,
            rows_per_mask,
            mask_rows,
        })
    }

    fn row(&self, r: usize) -> &[bool] {
        self.masks[r / self.rows_per_mask].row(r % self.mask_rows)
    }
}

fn permute_heads(src: &[f64], dims: [usize; 4], split: bool) -> Vec<f64> {
    let [b, t, h, dh] = dims;
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let merged = ((bi * t + ti) * h + hi) * dh;
                let split_at = ((bi * h + hi) * t + ti) * dh;
                let (from, to) = if split {
                    (merged, split_at)
                } else {
                    (split_at, merged)
                };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

struct BackCtx<'a> {
    nodes: &'a [Node],
}

impl BackCtx<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn slot<'b>(&self, adj: &'b mut [Option<Vec<f64>>], v: Var) -> &'b mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        adj[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                transpose_b,
            } => {
                if self.wants(a) {
                    let bd = self.data(b);
                    let da = self.slot(adj, a);
                    for i in 0..batch {
                        let g_blk = &g[i * m * n..(i + 1) * m * n];
                        let b_blk = if shared_b {
                            bd
                        } else {
                            &bd[i * k * n..(i + 1) * k * n]
                        };
                        let da_blk = &mut da[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            mm_nn(g_blk, b_blk, da_blk, m, n, k);
                        } else {
                            mm_nt(g_blk, b_blk, da_blk, m, n, k);
                        }
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a);
                    let db = self.slot(adj, b);
                    for i in 0..batch {
                        let g_blk = &g[i * m * n..(i + 1) * m * n];
                        let a_blk = &ad[i * m * k..(i + 1) * m * k];
                        let db_blk = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[i * k * n..(i + 1) * k * n]
                        };
                        if transpose_b {
                            mm_tn(g_blk, a_blk, db_blk, m, n, k);
                        } else {
                            mm_tn(a_blk, g_blk, db_blk, m, k, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    let da = self.slot(adj, a);
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if self.wants(b) {
                    let db = self.slot(adj, b);
                    let n = db.len();
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bd = self.data(b);
                    let da = self.slot(adj, a);
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a);
                    let db = self.slot(adj, b);
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { x, c } => {
                let dx = self.slot(adj, x);
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
            &Op::Gelu { x } => {
                let xd = self.data(x);
                let dx = self.slot(adj, x);
                for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xd) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            &Op::Sum { x } => {
                let dx = self.slot(adj, x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Reshape { x } => {
                let dx = self.slot(adj, x);
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = g.len() / d;
                if self.wants(*gain) {
                    let dg = self.slot(adj, *gain);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = self.slot(adj, *bias);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gd = self.data(*gain);
                    let dx = self.slot(adj, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gd[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * h[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = out.data();
                let cols = out.last_dim();
                let dx = self.slot(adj, x);
                for r in 0..y.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let yr = &y[span.clone()];
                    let gr = &g[span.clone()];
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx[span].iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - inner);
                    }
                }
            }
            Op::DocSoftmax {
                x,
                layouts,
                rows_per_layout,
                per_doc,
                scaling,
            } => {
                let cols = out.last_dim();
                let dx = self.slot(adj, *x);
                for (r, s) in scaling.iter().enumerate() {
                    let layout = &layouts[r / rows_per_layout];
                    let base = r * cols;
                    let mut gs = vec![0.0; s.len()];
                    for (n, seg) in layout.segments().iter().enumerate() {
                        let inner: f64 = seg
                            .clone()
                            .map(|k| per_doc[base + k] * g[base + k])
                            .sum();
                        gs[n] = inner;
                        // d w / d p = s_n, so the within-document softmax sees s_n·g
                        for k in seg.clone() {
                            let p = per_doc[base + k];
                            dx[base + k] += s[n] * p * (g[base + k] - inner);
                        }
                    }
                    let inner_s: f64 = s.iter().zip(&gs).map(|(a, b)| a * b).sum();
                    for (n, seg) in layout.segments().iter().enumerate() {
                        dx[base + seg.start] += s[n] * (gs[n] - inner_s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.last_dim();
                let dt = self.slot(adj, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, v)| *a += v);
                }
            }
            &Op::SplitHeads { x, dims } => {
                let back = permute_heads(g, dims, false);
                let dx = self.slot(adj, x);
                dx.iter_mut().zip(&back).for_each(|(d, v)| *d += v);
            }
            &Op::MergeHeads { x, dims } => {
                let back = permute_heads(g, dims, true);
                let dx = self.slot(adj, x);
                dx.iter_mut().zip(&back).for_each(|(d, v)| *d += v);
            }
            Op::Dropout { x, keep } => {
                let dx = self.slot(adj, *x);
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gv * m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                let dl = self.slot(adj, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] += scale * probs[r * v + j];
                    }
                    dl[r * v + t] -= scale;
                }
            }
        }
    }
}

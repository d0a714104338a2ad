//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A `Graph` is rebuilt for every training step: leaves are introduced with
//! [`Graph::constant`] / [`Graph::param`], ops append nodes, and
//! [`Graph::backward`] walks the tape in reverse filling gradient buffers.
//! Gradients accumulate: calling `backward` twice without a fresh graph
//! doubles them.
//!
//! Every kernel keeps a fixed per-output-element summation order, so a fixed
//! seed gives a bit-identical trajectory at any worker count.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::rng;
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    // masking is baked into the saved output (masked weights are exactly 0),
    // so backward needs no mask copy
    MaskedSoftmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        targets: Vec<usize>,
        ignore: Option<usize>,
        kept: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Backprop tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; its gradient is retrievable by name after `backward`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(value, true, Op::Leaf);
        self.params.push((name.to_string(), id));
        id
    }

    // ---- forward ops --------------------------------------------------

    /// `a @ b`, or `a @ bᵀ` when `trans_b`. `a` may carry one leading batch
    /// dim; `b` is either shared (rank 2) or batched alongside (rank 3).
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (am, ak, abatch) = match self.value(a).shape() {
            [m, k] => (*m, *k, None),
            [bsz, m, k] => (*m, *k, Some(*bsz)),
            _ => {
                return Err(self.shape_err("matmul", a, b));
            }
        };
        let (bk, bn, bbatch) = match (self.value(b).shape(), trans_b) {
            ([k, n], false) => (*k, *n, None),
            ([n, k], true) => (*k, *n, None),
            ([bsz, k, n], false) => (*k, *n, Some(*bsz)),
            ([bsz, n, k], true) => (*k, *n, Some(*bsz)),
            _ => {
                return Err(self.shape_err("matmul", a, b));
            }
        };
        if ak != bk || (bbatch.is_some() && abatch != bbatch) {
            return Err(self.shape_err("matmul", a, b));
        }
        let batch = abatch.unwrap_or(1);
        let mut out = vec![0.0; batch * am * bn];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let asl = &ad[i * am * ak..(i + 1) * am * ak];
                let bsl = if bbatch.is_some() {
                    &bd[i * bk * bn..(i + 1) * bk * bn]
                } else {
                    bd
                };
                let osl = &mut out[i * am * bn..(i + 1) * am * bn];
                if trans_b {
                    mm_nt(asl, bsl, osl, am, ak, bn, false);
                } else {
                    mm_nn(asl, bsl, osl, am, ak, bn, false);
                }
            }
        }
        let shape = if abatch.is_some() {
            vec![batch, am, bn]
        } else {
            vec![am, bn]
        };
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::MatMul { a, b, trans_b }))
    }

    /// Elementwise add; `b`'s shape must be a suffix of `a`'s shape and is
    /// broadcast over the leading dims.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != bshape[..] {
            return Err(self.shape_err("add", a, b));
        }
        let bn = self.value(b).numel().max(1);
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        for (chunk, _) in out.chunks_mut(bn).zip(std::iter::repeat(())) {
            for (o, &bv) in chunk.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(ashape, out)?, req, Op::Add { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            req,
            Op::Scale { x, c },
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.tanh(), |x| Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, gelu_fwd, |x| Op::Gelu { x })
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        mk: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        self.push(Tensor::new(shape, out).expect("same shape"), req, mk(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or(AutodiffError::Contract {
            op: "softmax",
            reason: "rank-0 input".into(),
        })?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_row(row);
        }
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Softmax { x }))
    }

    /// Softmax over the key axis of attention scores `[batch*heads, q, k]`,
    /// restricted to keys where `key_mask[b*k_len + k]` is true. Masked
    /// positions get weight exactly 0.
    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        key_mask: &[bool],
        heads: usize,
    ) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let [gh, q_len, k_len] = shape[..] else {
            return Err(AutodiffError::Contract {
                op: "masked_softmax",
                reason: format!("want rank-3 scores, got {:?}", shape),
            });
        };
        if gh % heads != 0 || key_mask.len() != (gh / heads) * k_len {
            return Err(AutodiffError::Contract {
                op: "masked_softmax",
                reason: format!(
                    "scores {:?} with {} heads need a mask of [batch, {}], got len {}",
                    shape,
                    heads,
                    k_len,
                    key_mask.len()
                ),
            });
        }
        let mut out = self.value(x).data().to_vec();
        for bh in 0..gh {
            let b = bh / heads;
            let mask = &key_mask[b * k_len..(b + 1) * k_len];
            if !mask.iter().any(|&m| m) {
                return Err(AutodiffError::Contract {
                    op: "masked_softmax",
                    reason: format!("batch item {} has no unmasked key", b),
                });
            }
            for qi in 0..q_len {
                let row = &mut out[(bh * q_len + qi) * k_len..(bh * q_len + qi + 1) * k_len];
                masked_softmax_row(row, mask);
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            req,
            Op::MaskedSoftmax { x },
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias,
    /// eps = 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or(AutodiffError::Contract {
            op: "layer_norm",
            reason: "rank-0 input".into(),
        })?;
        if self.value(gain).shape() != [cols] || self.value(bias).shape() != [cols] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let mut out = self.value(x).data().to_vec();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut stats = Vec::with_capacity(out.len() / cols.max(1));
        for row in out.chunks_mut(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            stats.push((mu, rstd));
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rstd * g[j] + b[j];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            req,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let [rows, dim] = self.value(table).shape()[..] else {
            return Err(AutodiffError::Contract {
                op: "embedding",
                reason: format!("table must be rank 2, got {:?}", self.value(table).shape()),
            });
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Contract {
                op: "embedding",
                reason: format!("id {} out of range for table of {} rows", bad, rows),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        let td = self.value(table).data();
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let req = self.req(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            req,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: surviving activations scale by 1/(1-p). Identity
    /// when `train` is false or p == 0. The mask is a pure function of
    /// `key`, independent of evaluation order.
    pub fn dropout(&mut self, x: NodeId, p: f64, train: bool, key: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Contract {
                op: "dropout",
                reason: format!("p must be in [0, 1), got {}", p),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|i| {
                if rng::unit_f64(key, i as u64) >= p {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Dropout { x, mask }))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::Contract {
                op: "concat",
                reason: format!("axis {} out of range for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.shape_err("concat", parts[0], p));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let ps = self.value(p).shape()[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * ps * inner..(o + 1) * ps * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + ps * inner].copy_from_slice(src);
            }
            offset += ps;
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            req,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(AutodiffError::Contract {
                op: "slice",
                reason: format!("[{start}, {start}+{len}) on axis {axis} of {:?}", xs),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * len * inner];
        let xd = self.value(x).data();
        for o in 0..outer {
            let src_start = (o * xs[axis] + start) * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&xd[src_start..src_start + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            req,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    /// Mean over `axis` (the axis is removed).
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(AutodiffError::Contract {
                op: "mean",
                reason: format!("axis {} out of range for {:?}", axis, xs),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let n = xs[axis];
        let mut out = vec![0.0; outer * inner];
        let xd = self.value(x).data();
        for o in 0..outer {
            for a in 0..n {
                let src = &xd[(o * n + a) * inner..(o * n + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape = xs;
        shape.remove(axis);
        let req = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, req, Op::Mean { x, axis }))
    }

    /// `[batch*seq, hidden]` → `[batch*heads, seq, hidden/heads]`.
    pub fn split_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let [rows, hidden] = self.value(x).shape()[..] else {
            return Err(AutodiffError::Contract {
                op: "split_heads",
                reason: "want rank-2 input".into(),
            });
        };
        if rows != batch * seq || hidden % heads != 0 {
            return Err(AutodiffError::Contract {
                op: "split_heads",
                reason: format!(
                    "rows {} vs batch*seq {}, hidden {} vs heads {}",
                    rows,
                    batch * seq,
                    hidden,
                    heads
                ),
            });
        }
        let dh = hidden / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = &xd[(b * seq + t) * hidden + h * dh..(b * seq + t) * hidden + (h + 1) * dh];
                    let dst_start = (((b * heads + h) * seq) + t) * dh;
                    out[dst_start..dst_start + dh].copy_from_slice(src);
                }
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(vec![batch * heads, seq, dh], out)?,
            req,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let [gh, t, dh] = self.value(x).shape()[..] else {
            return Err(AutodiffError::Contract {
                op: "merge_heads",
                reason: "want rank-3 input".into(),
            });
        };
        if gh != batch * heads || t != seq {
            return Err(AutodiffError::Contract {
                op: "merge_heads",
                reason: format!("got {:?} for batch {} seq {} heads {}", [gh, t, dh], batch, seq, heads),
            });
        }
        let hidden = heads * dh;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = &xd[(((b * heads + h) * seq) + t) * dh..(((b * heads + h) * seq) + t + 1) * dh];
                    let dst_start = (b * seq + t) * hidden + h * dh;
                    out[dst_start..dst_start + dh].copy_from_slice(src);
                }
            }
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(vec![batch * seq, hidden], out)?,
            req,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Row gather: out[i, :] = x[rows[i], :].
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let [n, dim] = self.value(x).shape()[..] else {
            return Err(AutodiffError::Contract {
                op: "gather_rows",
                reason: "want rank-2 input".into(),
            });
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(AutodiffError::Contract {
                op: "gather_rows",
                reason: format!("row {} out of range ({} rows)", bad, n),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            out.extend_from_slice(&xd[r * dim..(r + 1) * dim]);
        }
        let req = self.req(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), dim], out)?,
            req,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax over rows whose target differs from
    /// `ignore`. Logits are interpreted as rows `[N, classes]` with
    /// N = numel / classes.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::Contract {
                op: "cross_entropy",
                reason: format!("logits must have rank >= 2, got {:?}", shape),
            });
        }
        let classes = *shape.last().expect("rank checked");
        let rows = self.value(logits).numel() / classes;
        if targets.len() != rows {
            return Err(AutodiffError::Contract {
                op: "cross_entropy",
                reason: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        let ld = self.value(logits).data();
        let mut probs = ld.to_vec();
        let mut loss = 0.0;
        let mut kept = 0usize;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let t = targets[r];
            if Some(t) == ignore {
                continue;
            }
            if t >= classes {
                return Err(AutodiffError::Contract {
                    op: "cross_entropy",
                    reason: format!("target {} out of range for {} classes", t, classes),
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
            loss += denom.ln() + max - ld[r * classes + t];
            kept += 1;
        }
        if kept == 0 {
            return Err(AutodiffError::UndefinedLoss(
                "all positions ignored in cross_entropy".into(),
            ));
        }
        loss /= kept as f64;
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                ignore,
                kept,
            },
        ))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ---- backward ------------------------------------------------------

    /// Populate leaf gradients of everything `loss` depends on. `loss` must
    /// be a scalar. Intermediate gradients are transient; leaf gradients
    /// accumulate, so a second `backward` on the same graph doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract {
                op: "backward",
                reason: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let mut work: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let seed_shape = self.value(loss).shape().to_vec();
        work[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                let slot = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(&shape));
                for (d, g) in slot.data_mut().iter_mut().zip(gout.data()) {
                    *d += g;
                }
            } else {
                backprop(&self.nodes, i, &gout, &mut work);
            }
        }
        Ok(())
    }

    /// Gradient tensors for every registered param, zeros when the loss did
    /// not reach it.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match self.grad(*id) {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.value(*id).shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

fn masked_softmax_row(row: &mut [f64], mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in row.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    let mut denom = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            denom += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Get-or-zero transient gradient buffer for a node.
fn slot<'a>(nodes: &[Node], work: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
    work[id.0].get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()))
}

fn backprop(nodes: &[Node], i: usize, gout: &Tensor, work: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (am, ak, batch) = match nodes[a.0].value.shape() {
                [m, k] => (*m, *k, None),
                [bsz, m, k] => (*m, *k, Some(*bsz)),
                _ => unreachable!("validated at forward"),
            };
            let bn = gout.shape()[gout.rank() - 1];
            let b_batched = nodes[b.0].value.rank() == 3;
            let nb = batch.unwrap_or(1);
            let gd = gout.data();
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let da = slot(nodes, work, *a).data_mut();
                for i in 0..nb {
                    let gsl = &gd[i * am * bn..(i + 1) * am * bn];
                    let bsl = if b_batched {
                        &bd[i * ak * bn..(i + 1) * ak * bn]
                    } else {
                        bd
                    };
                    let dsl = &mut da[i * am * ak..(i + 1) * am * ak];
                    if *trans_b {
                        // y = a·bᵀ, b: [n,k]  →  da += g·b
                        mm_nn(gsl, bsl, dsl, am, bn, ak, true);
                    } else {
                        // da += g·bᵀ, b: [k,n]
                        mm_nt(gsl, bsl, dsl, am, bn, ak, true);
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let db = slot(nodes, work, *b).data_mut();
                for i in 0..nb {
                    let gsl = &gd[i * am * bn..(i + 1) * am * bn];
                    let asl = &ad[i * am * ak..(i + 1) * am * ak];
                    let dsl = if b_batched {
                        &mut db[i * ak * bn..(i + 1) * ak * bn]
                    } else {
                        &mut db[..]
                    };
                    if *trans_b {
                        // db += gᵀ·a  (db: [n,k])
                        mm_tn(gsl, asl, dsl, am, bn, ak, true);
                    } else {
                        // db += aᵀ·g  (db: [k,n])
                        mm_tn(asl, gsl, dsl, am, ak, bn, true);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if nodes[a.0].requires_grad {
                let da = slot(nodes, work, *a).data_mut();
                for (d, g) in da.iter_mut().zip(gout.data()) {
                    *d += g;
                }
            }
            if nodes[b.0].requires_grad {
                let bn = nodes[b.0].value.numel().max(1);
                let db = slot(nodes, work, *b).data_mut();
                for chunk in gout.data().chunks(bn) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].value.data();
                let da = slot(nodes, work, *a).data_mut();
                for ((d, g), bv) in da.iter_mut().zip(gout.data()).zip(bd) {
                    *d += g * bv;
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].value.data();
                let db = slot(nodes, work, *b).data_mut();
                for ((d, g), av) in db.iter_mut().zip(gout.data()).zip(ad) {
                    *d += g * av;
                }
            }
        }
        Op::Scale { x, c } => {
            if nodes[x.0].requires_grad {
                let dx = slot(nodes, work, *x).data_mut();
                for (d, g) in dx.iter_mut().zip(gout.data()) {
                    *d += g * c;
                }
            }
        }
        Op::Sigmoid { x } => {
            if nodes[x.0].requires_grad {
                let y = node.value.data();
                let dx = slot(nodes, work, *x).data_mut();
                for ((d, g), yv) in dx.iter_mut().zip(gout.data()).zip(y) {
                    *d += g * yv * (1.0 - yv);
                }
            }
        }
        Op::Tanh { x } => {
            if nodes[x.0].requires_grad {
                let y = node.value.data();
                let dx = slot(nodes, work, *x).data_mut();
                for ((d, g), yv) in dx.iter_mut().zip(gout.data()).zip(y) {
                    *d += g * (1.0 - yv * yv);
                }
            }
        }
        Op::Relu { x } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let dx = slot(nodes, work, *x).data_mut();
                for ((d, g), v) in dx.iter_mut().zip(gout.data()).zip(xv) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let dx = slot(nodes, work, *x).data_mut();
                for ((d, g), v) in dx.iter_mut().zip(gout.data()).zip(xv) {
                    *d += g * gelu_grad(*v);
                }
            }
        }
        Op::Softmax { x } | Op::MaskedSoftmax { x } => {
            // masked entries carry y == 0, so the same formula sends them
            // zero gradient
            if nodes[x.0].requires_grad {
                let cols = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                let dx = slot(nodes, work, *x).data_mut();
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout.data()[r * cols..(r + 1) * cols];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let cols = *node.value.shape().last().expect("rank >= 1");
            let xd = nodes[x.0].value.data();
            let gd = nodes[gain.0].value.data();
            if nodes[x.0].requires_grad {
                let dx = slot(nodes, work, *x).data_mut();
                for (r, &(mu, rstd)) in stats.iter().enumerate() {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout.data()[r * cols..(r + 1) * cols];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rstd;
                        let dxhat = gr[j] * gd[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xr[j] - mu) * rstd;
                        let dxhat = gr[j] * gd[j];
                        dr[j] += rstd * (dxhat - m1 - xhat * m2);
                    }
                }
            }
            if nodes[gain.0].requires_grad {
                let dg = slot(nodes, work, *gain).data_mut();
                for (r, &(mu, rstd)) in stats.iter().enumerate() {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &gout.data()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dg[j] += gr[j] * (xr[j] - mu) * rstd;
                    }
                }
            }
            if nodes[bias.0].requires_grad {
                let db = slot(nodes, work, *bias).data_mut();
                for r in 0..stats.len() {
                    let gr = &gout.data()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        db[j] += gr[j];
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if nodes[table.0].requires_grad {
                let dim = node.value.shape()[1];
                let dt = slot(nodes, work, *table).data_mut();
                for (i, &id) in ids.iter().enumerate() {
                    let g = &gout.data()[i * dim..(i + 1) * dim];
                    let row = &mut dt[id * dim..(id + 1) * dim];
                    for (d, gv) in row.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if nodes[x.0].requires_grad {
                let dx = slot(nodes, work, *x).data_mut();
                for ((d, g), m) in dx.iter_mut().zip(gout.data()).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let ps = nodes[p.0].value.shape()[*axis];
                if nodes[p.0].requires_grad {
                    let dp = slot(nodes, work, p).data_mut();
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        let dst = &mut dp[o * ps * inner..(o + 1) * ps * inner];
                        for (d, g) in dst
                            .iter_mut()
                            .zip(&gout.data()[src_start..src_start + ps * inner])
                        {
                            *d += g;
                        }
                    }
                }
                offset += ps;
            }
        }
        Op::Slice {
            x,
            axis,
            start,
            len,
        } => {
            if nodes[x.0].requires_grad {
                let xs = nodes[x.0].value.shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let dx = slot(nodes, work, *x).data_mut();
                for o in 0..outer {
                    let dst_start = (o * xs[*axis] + start) * inner;
                    let src = &gout.data()[o * len * inner..(o + 1) * len * inner];
                    for (d, g) in dx[dst_start..dst_start + len * inner].iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mean { x, axis } => {
            if nodes[x.0].requires_grad {
                let xs = nodes[x.0].value.shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let n = xs[*axis];
                let inv = 1.0 / n as f64;
                let dx = slot(nodes, work, *x).data_mut();
                for o in 0..outer {
                    let g = &gout.data()[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let dst = &mut dx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if nodes[x.0].requires_grad {
                let dh = node.value.shape()[2];
                let hidden = heads * dh;
                let dx = slot(nodes, work, *x).data_mut();
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src_start = (((b * heads + h) * seq) + t) * dh;
                            let g = &gout.data()[src_start..src_start + dh];
                            let dst = &mut dx
                                [(b * seq + t) * hidden + h * dh..(b * seq + t) * hidden + (h + 1) * dh];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
        }
        Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if nodes[x.0].requires_grad {
                let hidden = node.value.shape()[1];
                let dh = hidden / heads;
                let dx = slot(nodes, work, *x).data_mut();
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let src_start = (b * seq + t) * hidden + h * dh;
                            let g = &gout.data()[src_start..src_start + dh];
                            let dst_start = (((b * heads + h) * seq) + t) * dh;
                            for (d, gv) in dx[dst_start..dst_start + dh].iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
        }
        Op::GatherRows { x, rows } => {
            if nodes[x.0].requires_grad {
                let dim = node.value.shape()[1];
                let dx = slot(nodes, work, *x).data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    let g = &gout.data()[i * dim..(i + 1) * dim];
                    for (d, gv) in dx[r * dim..(r + 1) * dim].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            ignore,
            kept,
        } => {
            if nodes[logits.0].requires_grad {
                let classes = nodes[logits.0]
                    .value
                    .shape()
                    .last()
                    .copied()
                    .expect("rank >= 2");
                let g = gout.data()[0] / *kept as f64;
                let dl = slot(nodes, work, *logits).data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let pr = &probs[r * classes..(r + 1) * classes];
                    let dr = &mut dl[r * classes..(r + 1) * classes];
                    for (j, (d, &p)) in dr.iter_mut().zip(pr).enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *d += g * (p - onehot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_rowsum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x2 = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.3, 9.0, 9.0, 9.0]).unwrap());
        let y2 = g.softmax(x2).unwrap();
        for row in g.value(y2).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let shifted = g.constant(Tensor::new(vec![1, 4], vec![100.3, 99.0, 102.0, 100.0]).unwrap());
        let ys = g.softmax(shifted).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero_before_gain_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8], 3.25));
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 16], (0..32).map(|i| (i as f64 * 1.7).sin() * 3.0).collect()).unwrap());
        let gain = g.constant(Tensor::full(&[16], 1.0));
        let bias = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-10, "mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 - 6.0).collect()).unwrap());
        let eye = g.constant(Tensor::eye(4));
        let y = g.matmul(a, eye, false).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn product_rule() {
        // d(x·y)/dx at (3,4) = 4
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0).reshaped(vec![1, 1]).unwrap());
        let y = g.param("y", Tensor::scalar(4.0).reshaped(vec![1, 1]).unwrap());
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0).reshaped(vec![1, 1]).unwrap());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0).reshaped(vec![1, 1]).unwrap());
        let unused = g.param("unused", Tensor::zeros(&[2, 2]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads["unused"].data(), &[0.0; 4]);
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 7]));
        let loss = g.cross_entropy(logits, &[0, 3, 6], None).unwrap();
        assert!((g.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_20_is_tiny() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![20.0, 0.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0], None).unwrap();
        assert!(g.value(loss).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_ignores_positions() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0]).unwrap());
        let both = g.cross_entropy(logits, &[1, 99], Some(99)).unwrap();
        let single_logits = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let single = g.cross_entropy(single_logits, &[1], None).unwrap();
        assert!((g.value(both).item() - g.value(single).item()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[5, 5], Some(5)),
            Err(AutodiffError::UndefinedLoss(_))
        ));
    }

    #[test]
    fn dropout_identity_in_eval_and_scales_in_train() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[10, 10], 2.0));
        let eval = g.dropout(x, 0.5, false, 7).unwrap();
        assert_eq!(eval, x);
        let train = g.dropout(x, 0.5, true, 7).unwrap();
        let vals = g.value(train).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0).abs() < 1e-12));
        // deterministic per key
        let train2 = g.dropout(x, 0.5, true, 7).unwrap();
        assert_eq!(g.value(train).data(), g.value(train2).data());
    }

    #[test]
    fn masked_softmax_zeroes_pad_weights() {
        let mut g = Graph::new();
        // batch=1, heads=2, q=2, k=3; last key masked out
        let x = g.constant(Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let y = g.masked_softmax(x, &[true, true, false], 2).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.param("b", Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(cat, 1, 2, 1).unwrap();
        assert_eq!(g.value(back).data(), &[5.0, 6.0]);
        let m = g.mean(back, 0).unwrap();
        let m2 = g.mean(m, 0).unwrap();
        g.backward(m2).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[0.5, 0.5]);
        // `a` is reachable through the concat but contributes nothing
        assert_eq!(g.grad(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut g = Graph::new();
        let x = g.param(
            "x",
            Tensor::new(vec![6, 4], (0..24).map(|i| i as f64).collect()).unwrap(),
        );
        let s = g.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(g.value(s).shape(), &[4, 3, 2]);
        let m = g.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(g.value(m).data(), g.value(x).data());
    }

    #[test]
    fn gather_rows_and_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let m = g.mean(y, 0).unwrap();
        let m2 = g.mean(m, 0).unwrap();
        g.backward(m2).unwrap();
        // each of 6 output elements has weight 1/6; row 2 gathered twice
        let got = g.grad(x).unwrap().data().to_vec();
        for (i, want) in [1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0, 2.0 / 6.0, 2.0 / 6.0].iter().enumerate() {
            assert!((got[i] - want).abs() < 1e-12, "{:?}", got);
        }
    }

    #[test]
    fn embedding_lookup_and_scatter_grad() {
        let mut g = Graph::new();
        let table = g.param("t", Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let e = g.embedding(table, &[1, 1, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[2.0, 3.0, 2.0, 3.0, 4.0, 5.0]);
        let m = g.mean(e, 0).unwrap();
        let m2 = g.mean(m, 0).unwrap();
        g.backward(m2).unwrap();
        let got = g.grad(table).unwrap().data().to_vec();
        for (i, want) in [0.0, 0.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0].iter().enumerate() {
            assert!((got[i] - want).abs() < 1e-12, "{:?}", got);
        }
    }

    #[test]
    fn add_broadcasts_and_reduces() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::zeros(&[2, 3]));
        let bias = g.param("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.add(x, bias).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let m = g.mean(y, 0).unwrap();
        let m2 = g.mean(m, 0).unwrap();
        g.backward(m2).unwrap();
        // bias grad sums over the 2 broadcast rows, each element weight 1/3 * 1/2
        let got = g.grad(bias).unwrap().data().to_vec();
        for v in got {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}

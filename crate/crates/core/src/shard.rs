//! Simulated model-parallel classifier head.
//!
//! The `C×d` classifier is cut into `M` contiguous row blocks. Softmax
//! cross-entropy is computed with a two-phase reduction: every shard reports
//! its local maximum logit, the coordinator reduces them to `μ`; every shard
//! then reports `Σ exp(z − μ)` over its own rows, reduced to `Z`. A shard
//! only ever materializes logits for its own class range.
//!
//! Reductions run in ascending shard id so repeated runs are bit-identical.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::rank_logits;
use crate::tensor::Tensor;

/// Contiguous class ranges: the first `C mod M` shards get one extra class.
pub fn partition(classes: usize, shards: usize) -> Result<Vec<Range<usize>>> {
    if shards == 0 || shards > classes {
        return Err(Error::Shard(format!(
            "cannot split {classes} classes into {shards} shards"
        )));
    }
    let base = classes / shards;
    let extra = classes % shards;
    let mut lo = 0;
    Ok((0..shards)
        .map(|s| {
            let hi = lo + base + usize::from(s < extra);
            let r = lo..hi;
            lo = hi;
            r
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub shard_id: usize,
    pub class_range: Range<usize>,
    /// `(hi − lo) × d` rows of the classifier.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalMaxMsg {
    pub shard_id: usize,
    pub local_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpSumMsg {
    pub shard_id: usize,
    pub exp_sum: f64,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.class_range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_range.is_empty()
    }

    pub fn owns(&self, class: usize) -> bool {
        self.class_range.contains(&class)
    }

    pub fn local_logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let row = &self.weight.data()[r * d..(r + 1) * d];
                let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                dot + b
            })
            .collect()
    }

    fn max_msg(&self, logits: &[f64]) -> LocalMaxMsg {
        LocalMaxMsg {
            shard_id: self.shard_id,
            local_max: logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn exp_sum_msg(&self, logits: &[f64], global_max: f64) -> ExpSumMsg {
        ExpSumMsg {
            shard_id: self.shard_id,
            exp_sum: logits.iter().map(|z| (z - global_max).exp()).sum(),
        }
    }

    /// Local top-k as (class, score), best first, ties by class index.
    pub fn local_topk(&self, x: &[f64], k: usize) -> Vec<(usize, f64)> {
        let logits = self.local_logits(x);
        rank_logits(&logits)
            .into_iter()
            .take(k)
            .map(|i| (self.class_range.start + i, logits[i]))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShardContribution {
    pub shard_id: usize,
    pub local_max: f64,
    pub exp_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionSummary {
    pub global_max: f64,
    pub global_expsum: f64,
    pub per_shard: Vec<ShardContribution>,
}

impl ReductionSummary {
    /// `shard_id\tlocal_max\texp_sum` per shard.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for c in &self.per_shard {
            let _ = writeln!(out, "{}\t{}\t{}", c.shard_id, c.local_max, c.exp_sum);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardedCeOutput {
    pub loss: f64,
    pub summary: ReductionSummary,
    /// d loss / d logits, one block per shard.
    pub logit_grads: Vec<Vec<f64>>,
    pub weight_grads: Vec<Tensor>,
    pub bias_grads: Vec<Vec<f64>>,
    /// d loss / d x, reduced over shards in id order.
    pub input_grad: Vec<f64>,
}

impl ShardedCeOutput {
    pub fn concat_logit_grads(&self) -> Vec<f64> {
        self.logit_grads.concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardSet {
    pub shards: Vec<Shard>,
    pub classes: usize,
    pub dim: usize,
}

impl ShardSet {
    /// Row-partitions a dense `C×d` weight and its bias into `m` shards.
    pub fn from_dense(weight: &Tensor, bias: &[f64], m: usize) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[0] != bias.len() {
            return Err(Error::dim(format!(
                "weight {:?} and bias [{}] do not conform",
                weight.shape(),
                bias.len()
            )));
        }
        let (classes, dim) = (weight.shape()[0], weight.shape()[1]);
        let shards = partition(classes, m)?
            .into_iter()
            .enumerate()
            .map(|(shard_id, r)| {
                let data = weight.data()[r.start * dim..r.end * dim].to_vec();
                Shard {
                    shard_id,
                    weight: Tensor::new(vec![r.len(), dim], data).expect("slice of a valid weight"),
                    bias: bias[r.clone()].to_vec(),
                    class_range: r,
                }
            })
            .collect();
        Ok(ShardSet { shards, classes, dim })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dim(format!(
                "input has width {}, shards expect {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn sharded_ce(&self, x: &[f64], label: usize) -> Result<ShardedCeOutput> {
        self.check_input(x)?;
        let owner = self
            .shards
            .iter()
            .position(|s| s.owns(label))
            .ok_or_else(|| Error::Shard(format!("label {label} outside all shard ranges")))?;

        // phase 1: local logits and maxima
        let local: Vec<Vec<f64>> = self.shards.iter().map(|s| s.local_logits(x)).collect();
        let max_msgs: Vec<LocalMaxMsg> = self
            .shards
            .iter()
            .zip(&local)
            .map(|(s, z)| s.max_msg(z))
            .collect();
        let global_max = max_msgs
            .iter()
            .map(|m| m.local_max)
            .fold(f64::NEG_INFINITY, f64::max);
        if !global_max.is_finite() {
            return Err(Error::Numeric("non-finite logits in sharded softmax".into()));
        }

        // phase 2: shifted exponential sums
        let sum_msgs: Vec<ExpSumMsg> = self
            .shards
            .iter()
            .zip(&local)
            .map(|(s, z)| s.exp_sum_msg(z, global_max))
            .collect();
        let global_expsum: f64 = sum_msgs.iter().map(|m| m.exp_sum).sum();

        let label_logit = local[owner][label - self.shards[owner].class_range.start];
        let loss = global_max + global_expsum.ln() - label_logit;

        let mut logit_grads = Vec::with_capacity(self.shards.len());
        let mut weight_grads = Vec::with_capacity(self.shards.len());
        let mut bias_grads = Vec::with_capacity(self.shards.len());
        let mut input_grad = vec![0.0; self.dim];
        for (s, z) in self.shards.iter().zip(&local) {
            let mut g: Vec<f64> = z.iter().map(|v| (v - global_max).exp() / global_expsum).collect();
            if s.owns(label) {
                g[label - s.class_range.start] -= 1.0;
            }
            let mut dw = Vec::with_capacity(s.len() * self.dim);
            let mut dx_local = vec![0.0; self.dim];
            for (r, gr) in g.iter().enumerate() {
                dw.extend(x.iter().map(|xv| gr * xv));
                let row = &s.weight.data()[r * self.dim..(r + 1) * self.dim];
                dx_local.iter_mut().zip(row).for_each(|(d, w)| *d += gr * w);
            }
            input_grad.iter_mut().zip(&dx_local).for_each(|(a, b)| *a += b);
            weight_grads.push(Tensor::new(vec![s.len(), self.dim], dw)?);
            bias_grads.push(g.clone());
            logit_grads.push(g);
        }

        let per_shard = max_msgs
            .iter()
            .zip(&sum_msgs)
            .map(|(m, e)| ShardContribution {
                shard_id: m.shard_id,
                local_max: m.local_max,
                exp_sum: e.exp_sum,
            })
            .collect();
        Ok(ShardedCeOutput {
            loss,
            summary: ReductionSummary {
                global_max,
                global_expsum,
                per_shard,
            },
            logit_grads,
            weight_grads,
            bias_grads,
            input_grad,
        })
    }

    /// Global top-k merged from each shard's local top-k.
    pub fn sharded_topk(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        self.check_input(x)?;
        if k > self.classes {
            return Err(Error::Shard(format!("k = {k} exceeds {} classes", self.classes)));
        }
        let mut candidates: Vec<(usize, f64)> = self
            .shards
            .iter()
            .flat_map(|s| s.local_topk(x, k))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(k);
        Ok(candidates)
    }
}

/// Dense reference: loss and gradients from the autodiff engine.
#[derive(Clone, Debug)]
pub struct DenseCe {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub logit_grad: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
    pub input_grad: Vec<f64>,
}

pub fn dense_ce(weight: &Tensor, bias: &[f64], x: &[f64], label: usize) -> Result<DenseCe> {
    let mut g = Graph::new();
    let w = g.param(weight);
    let b = g.param(&Tensor::vector(bias.to_vec()));
    let xv = g.param(&Tensor::vector(x.to_vec()));
    let logits = g.linear(w, b, xv)?;
    let loss = g.cross_entropy(logits, &[label])?;
    g.backward(loss)?;
    Ok(DenseCe {
        loss: g.value(loss).data()[0],
        logits: g.value(logits).data().to_vec(),
        logit_grad: g.grad(logits).expect("logits are on the loss path").to_vec(),
        weight_grad: g.grad(w).expect("param").to_vec(),
        bias_grad: g.grad(b).expect("param").to_vec(),
        input_grad: g.grad(xv).expect("param").to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceRow {
    pub shards: usize,
    pub loss_delta: f64,
    pub loss_bound: f64,
    pub max_grad_delta: f64,
    pub topk_match: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub rows: Vec<EquivalenceRow>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst_grad_delta(&self) -> f64 {
        self.rows.iter().map(|r| r.max_grad_delta).fold(0.0, f64::max)
    }

    pub fn worst_loss_ratio(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.loss_delta / r.loss_bound)
            .fold(0.0, f64::max)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const EQUIVALENCE_TOL: f64 = 1e-12;

/// Compares the sharded head against the dense engine for each shard count.
pub fn equivalence_check(
    weight: &Tensor,
    bias: &[f64],
    x: &[f64],
    label: usize,
    shard_counts: &[usize],
    topk: usize,
) -> Result<EquivalenceReport> {
    let dense = dense_ce(weight, bias, x, label)?;
    let dense_topk: Vec<usize> = rank_logits(&dense.logits).into_iter().take(topk).collect();
    let mut report = EquivalenceReport::default();
    for &m in shard_counts {
        let set = ShardSet::from_dense(weight, bias, m)?;
        let out = set.sharded_ce(x, label)?;
        let dw: Vec<f64> = out.weight_grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        let max_grad_delta = [
            max_abs_diff(&out.concat_logit_grads(), &dense.logit_grad),
            max_abs_diff(&dw, &dense.weight_grad),
            max_abs_diff(&out.bias_grads.concat(), &dense.bias_grad),
            max_abs_diff(&out.input_grad, &dense.input_grad),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let loss_delta = (out.loss - dense.loss).abs();
        let loss_bound = EQUIVALENCE_TOL * (1.0 + dense.loss.abs());
        let sharded_topk: Vec<usize> = set.sharded_topk(x, topk)?.into_iter().map(|(c, _)| c).collect();
        let topk_match = sharded_topk == dense_topk;
        report.rows.push(EquivalenceRow {
            shards: m,
            loss_delta,
            loss_bound,
            max_grad_delta,
            topk_match,
            passed: loss_delta <= loss_bound && max_grad_delta <= EQUIVALENCE_TOL && topk_match,
        });
    }
    Ok(report)
}

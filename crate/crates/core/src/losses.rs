//! Training objective: batch-hard triplet loss plus label-smoothed
//! cross-entropy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub classes: usize,
}

impl LossConfig {
    /// Margin 0.3, smoothing 0.1, balance 1.0.
    pub fn with_classes(classes: usize) -> Self {
        Self {
            margin: 0.3,
            epsilon: 0.1,
            lambda: 1.0,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Invalid(format!("epsilon must be in [0, 1), got {}", self.epsilon)));
        }
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hardest positive and negative index per anchor. Ties go to the lowest
/// sample index.
pub fn mine_batch_hard(emb: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = emb.shape()[0];
    if labels.len() != n {
        return Err(Error::dim("triplet labels", emb.shape(), &[labels.len()]));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&identity, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Mining {
            identity,
            missing: "positive",
        });
    }
    if counts.len() < 2 {
        return Err(Error::Mining {
            identity: labels[0],
            missing: "negative",
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (mut pos, mut neg) = (None::<(usize, f64)>, None::<(usize, f64)>);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = euclid(emb.row(i), emb.row(j));
            if labels[j] == labels[i] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        out.push((pos.unwrap().0, neg.unwrap().0));
    }
    Ok(out)
}

/// `mean_i max(0, ||f_i - f_i+|| - ||f_i - f_i-|| + margin)` over `[N, D]`
/// embeddings with batch-hard mining.
pub fn triplet_batch_hard(tape: &mut Tape, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    if tape.shape(emb).len() != 2 {
        return Err(Error::dim("triplet embeddings", tape.shape(emb), &[]));
    }
    let pairs = mine_batch_hard(tape.value(emb), labels)?;
    let pos: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let neg: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let fp = tape.index_select(emb, &pos)?;
    let fn_ = tape.index_select(emb, &neg)?;
    let dp = distance_rows(tape, emb, fp)?;
    let dn = distance_rows(tape, emb, fn_)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

fn distance_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum_axis(sq, 1)?;
    Ok(tape.sqrt(s))
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("logits", shape, &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Label {
            label,
            classes: shape[1],
        });
    }
    Ok(())
}

/// Plain cross-entropy `-mean_i log p_{i, y_i}`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    check_labels(&shape, labels)?;
    let ls = tape.log_softmax(logits)?;
    let flat = tape.reshape(ls, &[shape[0] * shape[1], 1])?;
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * shape[1] + y).collect();
    let picked = tape.index_select(flat, &picks)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / shape[0] as f64))
}

/// `-mean_i sum_k ((1 - eps) y_ik + eps / K) log p_ik`.
pub fn ce_label_smoothed(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    check_labels(&shape, labels)?;
    let (n, k) = (shape[0], shape[1]);
    let mut target = Tensor::full(&[n, k], eps / k as f64);
    for (i, &y) in labels.iter().enumerate() {
        target.set(&[i, y], (1.0 - eps) + eps / k as f64);
    }
    let ls = tape.log_softmax(logits)?;
    let t = tape.constant(target);
    let w = tape.mul(t, ls)?;
    let s = tape.sum(w);
    Ok(tape.scale(s, -1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub tri: Var,
    pub total: Var,
}

/// `L_cls + lambda * L_tri`.
pub fn total_loss(
    tape: &mut Tape,
    emb: Var,
    logits: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    if tape.shape(logits).get(1) != Some(&cfg.classes) {
        return Err(Error::dim("logits vs class count", tape.shape(logits), &[cfg.classes]));
    }
    let cls = ce_label_smoothed(tape, logits, labels, cfg.epsilon)?;
    let tri = triplet_batch_hard(tape, emb, labels, cfg.margin)?;
    let weighted = tape.scale(tri, cfg.lambda);
    let total = tape.add(cls, weighted)?;
    Ok(LossParts { cls, tri, total })
}

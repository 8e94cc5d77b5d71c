//! Hungarian matching and the training objective.

use candle_core::{DType, Tensor, D};

use crate::decoder::{DecoderOutput, PredictionSet};
use crate::error::{argument, Error, Result};
use crate::nn::ops::{self, sigmoid, softplus};

/// Optimal one-to-one assignment of the rows of a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs in row order; one per row when rows ≤ columns,
    /// otherwise one per column.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

fn check_matrix(cost: &[Vec<f64>]) -> Result<usize> {
    let m = cost.first().map_or(0, |r| r.len());
    for row in cost {
        if row.len() != m {
            return argument("cost matrix rows differ in length");
        }
        if row.iter().any(|v| v.is_nan()) {
            return argument("cost matrix contains NaN");
        }
        if row.iter().any(|v| v.is_infinite()) {
            return argument("cost matrix contains an infinite entry");
        }
    }
    Ok(m)
}

/// Minimum assignment cost of a rectangular matrix with `n <= m`, returning
/// the column of each row. Shortest augmenting paths with potentials.
fn solve(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    cols
}

fn total(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

fn optimum(cost: &[Vec<f64>], m: usize) -> f64 {
    if cost.is_empty() {
        return 0.0;
    }
    total(cost, &solve(cost, cost.len(), m))
}

fn lexicographic(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    let best = optimum(cost, m);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut fixed = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    let mut free: Vec<usize> = (0..m).collect();
    for r in 0..n {
        let mut chosen = None;
        for (k, &c) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let rest: Vec<Vec<f64>> =
                cost[r + 1..].iter().map(|row| rest_cols.iter().map(|&j| row[j]).collect()).collect();
            let value = fixed_cost + cost[r][c] + optimum(&rest, rest_cols.len());
            if value <= best + tol {
                chosen = Some((k, c));
                break;
            }
        }
        let (k, c) = chosen.expect("an optimal completion always exists");
        fixed_cost += cost[r][c];
        fixed.push(c);
        free.remove(k);
    }
    fixed
}

/// Optimal assignment; among optimal ones, the lexicographically smallest
/// by row then column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = check_matrix(cost)?;
    let n = cost.len();
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    let pairs: Vec<(usize, usize)> = if n <= m {
        lexicographic(cost, m).into_iter().enumerate().collect()
    } else {
        let t: Vec<Vec<f64>> = (0..m).map(|j| cost.iter().map(|row| row[j]).collect()).collect();
        let mut p: Vec<(usize, usize)> =
            lexicographic(&t, n).into_iter().enumerate().map(|(c, r)| (r, c)).collect();
        p.sort();
        p
    };
    let cost_sum = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost: cost_sum })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub best_index: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub mcc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, mask: 5.0, mcc: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub mcc: f64,
}

/// Mean binary cross-entropy from logits over the trailing `(h, w)` dims:
/// `(..., h, w)` → `(...)`.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let per = (softplus(logits)? - logits.broadcast_mul(target)?)?;
    Ok(per.flatten_from(D::Minus2)?.mean(D::Minus1)?)
}

/// `1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)` over the trailing `(h, w)`
/// dims.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = probs.broadcast_mul(target)?.flatten_from(D::Minus2)?.sum(D::Minus1)?;
    let p = probs.flatten_from(D::Minus2)?.sum(D::Minus1)?;
    let g = target.flatten_from(D::Minus2)?.sum(D::Minus1)?;
    let ratio = ((inter * 2.0)? + 1.0)?.div(&((p.broadcast_add(&g))? + 1.0)?)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?)
}

/// `(S, N)` matching costs against `(S, h, w)` targets, detached.
pub fn matching_costs(pred: &PredictionSet, target: &Tensor, weights: &LossWeights) -> Result<Vec<Vec<f64>>> {
    let logits = pred.mask_logits.detach();
    let gt = target.unsqueeze(1)?;
    let bce = bce_loss(&logits, &gt)?;
    let dice = dice_loss(&sigmoid(&logits)?, &gt)?;
    let probs = sigmoid(&pred.prob_logits.detach())?;
    let cost = ((probs * -weights.cls)? + ((bce + dice)? * weights.mask)?)?;
    Ok(cost.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Best query for each sample, through the assignment of the single target
/// to the `N` queries.
pub fn match_queries(pred: &PredictionSet, target: &Tensor, weights: &LossWeights) -> Result<Vec<MatchResult>> {
    let sums: Vec<f64> = target.flatten_from(1)?.sum(1)?.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(s) = sums.iter().position(|&a| a <= 0.0) {
        return argument(format!("target mask {s} is empty"));
    }
    matching_costs(pred, target, weights)?
        .into_iter()
        .map(|row| {
            let a = hungarian(std::slice::from_ref(&row))?;
            let (_, best_index) = a.pairs[0];
            Ok(MatchResult { best_index, cost: a.cost })
        })
        .collect()
}

struct SetLoss {
    cls: Tensor,
    bce: Tensor,
    dice: Tensor,
}

fn set_loss(pred: &PredictionSet, target: &Tensor, weights: &LossWeights) -> Result<(SetLoss, Vec<MatchResult>)> {
    let matches = match_queries(pred, target, weights)?;
    let (s, n) = pred.prob_logits.dims2()?;
    let mut onehot = vec![0.0; s * n];
    for (i, m) in matches.iter().enumerate() {
        onehot[i * n + m.best_index] = 1.0;
    }
    let onehot = ops::constant(onehot, &[s, n], pred.prob_logits.dtype())?;
    let cls = (softplus(&pred.prob_logits)? - (&pred.prob_logits * &onehot)?)?.mean_all()?;
    let (_, _, h, w) = pred.mask_logits.dims4()?;
    let chosen = pred
        .mask_logits
        .broadcast_mul(&onehot.reshape((s, n, 1, 1))?)?
        .sum(1)?
        .reshape((s, h, w))?;
    let bce = bce_loss(&chosen, target)?.mean_all()?;
    let dice = dice_loss(&sigmoid(&chosen)?, target)?.mean_all()?;
    Ok((SetLoss { cls, bce, dice }, matches))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Total objective over the decoder predictions. With deep supervision the
/// class and mask terms are averaged over every prediction set, otherwise
/// only the final set counts. `mcc` is the batch triplet loss, absent when
/// the batch had no triplet. Returns the differentiable total, its
/// breakdown and the final-set matches.
pub fn total_loss(
    out: &DecoderOutput,
    target: &Tensor,
    mcc: Option<&Tensor>,
    weights: &LossWeights,
    deep_supervision: bool,
) -> Result<(Tensor, LossBreakdown, Vec<MatchResult>)> {
    let sets: &[PredictionSet] =
        if deep_supervision { &out.predictions } else { std::slice::from_ref(out.last()) };
    let mut cls = Vec::new();
    let mut bce = Vec::new();
    let mut dice = Vec::new();
    let mut last_matches = Vec::new();
    for set in sets {
        let (l, m) = set_loss(set, target, weights)?;
        cls.push(l.cls);
        bce.push(l.bce);
        dice.push(l.dice);
        last_matches = m;
    }
    let mean = |v: Vec<Tensor>| -> Result<Tensor> {
        let k = v.len() as f64;
        Ok((Tensor::stack(&v, 0)?.sum_all()? / k)?)
    };
    let (cls, bce, dice) = (mean(cls)?, mean(bce)?, mean(dice)?);
    let mut loss = ((&cls * weights.cls)? + ((&bce + &dice)? * weights.mask)?)?;
    let mut breakdown = LossBreakdown {
        total: 0.0,
        cls: scalar(&cls)?,
        mask_bce: scalar(&bce)?,
        mask_dice: scalar(&dice)?,
        mcc: 0.0,
    };
    if let Some(m) = mcc {
        breakdown.mcc = scalar(m)?;
        if weights.mcc != 0.0 {
            loss = (loss + (m * weights.mcc)?)?;
        }
    }
    breakdown.total = scalar(&loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok((loss, breakdown, last_matches))
}

//! Training objectives: quality regression, relative ranking with adaptive
//! margins, self-consistency under an equivariant transform, and their
//! weighted total.
//!
//! Every loss is built on the [`Graph`] so it can be differentiated; the
//! slice-based functions (`quality_loss`, `relative_ranking_loss`, ...) wrap
//! the same graph code for plain evaluation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Graph, Mode, Var};
use crate::tensor::{Scalar, Tensor};

/// Norm used for the regression and consistency distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean absolute difference.
    #[default]
    L1,
    /// Mean squared difference.
    L2,
}

impl FromStr for LossNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            _ => Err(Error::Config(format!("loss norm must be l1 or l2, got {s:?}"))),
        }
    }
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
        })
    }
}

/// Which branch outputs the self-consistency loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConsistencyOn {
    /// Per-sample branch logits.
    #[default]
    Scalar,
    /// Pooled branch features before the FC heads.
    Vector,
}

impl FromStr for ConsistencyOn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "vector" => Ok(Self::Vector),
            _ => Err(Error::Config(format!("consistency_on must be scalar or vector, got {s:?}"))),
        }
    }
}

impl fmt::Display for ConsistencyOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scalar => "scalar",
            Self::Vector => "vector",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the ranking-difference term inside self-consistency.
    pub lambda1: f64,
    /// Weight of the relative ranking loss in the total.
    pub lambda2: f64,
    /// Weight of the self-consistency loss in the total.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.05,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Indices of the highest, second highest, lowest and second lowest targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extremes {
    pub max: usize,
    pub max2: usize,
    pub min: usize,
    pub min2: usize,
}

/// Ties are broken by lowest index. `None` when fewer than four targets are
/// given, in which case the ranking loss is skipped.
pub fn find_extremes(s: &[f64]) -> Option<Extremes> {
    if s.len() < 4 {
        return None;
    }
    let mut desc: Vec<usize> = (0..s.len()).collect();
    desc.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut asc: Vec<usize> = (0..s.len()).collect();
    asc.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    Some(Extremes {
        max: desc[0],
        max2: desc[1],
        min: asc[0],
        min2: asc[1],
    })
}

/// `margin1 = s[max2] - s[min]`, `margin2 = s[max] - s[min2]`, written as
/// the slack `d(s_max, s_min) - d(s_max, s_max2)` (and the `min` analogue) so
/// that predictions equal to the targets cancel exactly in floating point.
pub fn margins(s: &[f64], e: &Extremes) -> (f64, f64) {
    let spread = (s[e.max] - s[e.min]).abs();
    (
        spread - (s[e.max] - s[e.max2]).abs(),
        spread - (s[e.min2] - s[e.min]).abs(),
    )
}

/// Ranking loss graph node and the quantities it was built from.
#[derive(Clone, Copy, Debug)]
pub struct RankingTerm {
    pub loss: Var,
    pub extremes: Extremes,
    pub margin1: f64,
    pub margin2: f64,
}

fn check_targets(op: &'static str, n: usize, s: &[f64]) -> Result<()> {
    if n != s.len() {
        return Err(Error::shape(op, format!("{n} predictions vs {} targets", s.len())));
    }
    if n == 0 {
        return Err(Error::Invalid(format!("{op}: empty batch")));
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{op}: target {bad}")));
    }
    Ok(())
}

fn distance<T: Scalar>(g: &mut Graph<T>, diff: Var, norm: LossNorm) -> Result<Var> {
    let d = match norm {
        LossNorm::L1 => g.abs(diff),
        LossNorm::L2 => g.mul(diff, diff)?,
    };
    Ok(g.mean(d))
}

/// Mean distance between predictions `q` (1D) and targets `s`.
pub fn quality_loss_var<T: Scalar>(g: &mut Graph<T>, q: Var, s: &[f64], norm: LossNorm) -> Result<Var> {
    check_targets("quality_loss", g.value(q).len(), s)?;
    let target = g.constant(Tensor::from_vec(
        g.shape(q),
        s.iter().map(|&v| T::of(v)).collect(),
    )?);
    let diff = g.sub(q, target)?;
    distance(g, diff, norm)
}

fn pick<T: Scalar>(g: &mut Graph<T>, q: Var, i: usize) -> Result<Var> {
    g.gather(q, &[i])
}

/// Triplet ranking loss on the batch extremes:
/// `max{0, d(q_max, q_max2) - d(q_max, q_min) + margin1}
///  + max{0, d(q_min2, q_min) - d(q_max, q_min) + margin2}`, `d(x, y) = |x - y|`.
/// Margins are constants computed from the targets. Returns `None` when the
/// batch has fewer than four samples or all targets are equal.
pub fn ranking_loss_var<T: Scalar>(g: &mut Graph<T>, q: Var, s: &[f64]) -> Result<Option<RankingTerm>> {
    check_targets("relative_ranking_loss", g.value(q).len(), s)?;
    let Some(e) = find_extremes(s) else {
        return Ok(None);
    };
    if s[e.max] == s[e.min] {
        return Ok(None);
    }
    let (m1, m2) = margins(s, &e);
    let q_max = pick(g, q, e.max)?;
    let q_max2 = pick(g, q, e.max2)?;
    let q_min = pick(g, q, e.min)?;
    let q_min2 = pick(g, q, e.min2)?;

    let spread = g.sub(q_max, q_min)?;
    let spread = g.abs(spread);
    let top = g.sub(q_max, q_max2)?;
    let top = g.abs(top);
    let bottom = g.sub(q_min2, q_min)?;
    let bottom = g.abs(bottom);

    let margin1 = g.constant(Tensor::from_vec(&[1], vec![T::of(m1)])?);
    let margin2 = g.constant(Tensor::from_vec(&[1], vec![T::of(m2)])?);
    let a = g.sub(top, spread)?;
    let a = g.add(a, margin1)?;
    let a = g.relu(a);
    let b = g.sub(bottom, spread)?;
    let b = g.add(b, margin2)?;
    let b = g.relu(b);
    let loss = g.add(a, b)?;
    let loss = g.reshape(loss, &[])?;
    Ok(Some(RankingTerm {
        loss,
        extremes: e,
        margin1: m1,
        margin2: m2,
    }))
}

/// One branch output for the batch and for its transformed copy.
#[derive(Clone, Copy, Debug)]
pub struct BranchPair {
    pub original: Var,
    pub transformed: Var,
}

/// `Σ_branches dist(f(B), f(τB)) + λ1 · dist(rr_B, rr_τB)`. Missing ranking
/// terms count as zero.
pub fn self_consistency_var<T: Scalar>(
    g: &mut Graph<T>,
    branches: &[BranchPair],
    rr: Option<(Var, Var)>,
    lambda1: f64,
    norm: LossNorm,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for pair in branches {
        if g.shape(pair.original) != g.shape(pair.transformed) {
            return Err(Error::shape(
                "self_consistency_loss",
                format!(
                    "{:?} vs {:?}",
                    g.shape(pair.original),
                    g.shape(pair.transformed)
                ),
            ));
        }
        let diff = g.sub(pair.original, pair.transformed)?;
        let d = distance(g, diff, norm)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    if let Some((a, b)) = rr {
        let diff = g.sub(a, b)?;
        let d = distance(g, diff, norm)?;
        let d = g.scale(d, T::of(lambda1));
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// `quality + λ2 · ranking + λ3 · consistency`.
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    quality: Var,
    ranking: Option<Var>,
    consistency: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = quality;
    if let Some(r) = ranking {
        let r = g.scale(r, T::of(w.lambda2));
        total = g.add(total, r)?;
    }
    if let Some(c) = consistency {
        let c = g.scale(c, T::of(w.lambda3));
        total = g.add(total, c)?;
    }
    Ok(total)
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub quality: f64,
    pub ranking: f64,
    pub consistency: f64,
    pub total: f64,
    pub margin1: f64,
    pub margin2: f64,
    pub extremes: Option<Extremes>,
}

impl LossReport {
    /// `total` is recomposed from the parts in double precision.
    pub fn new(
        quality: f64,
        ranking: f64,
        consistency: f64,
        weights: &LossWeights,
        ranking_term: Option<&RankingTerm>,
    ) -> Self {
        Self {
            quality,
            ranking,
            consistency,
            total: total_loss(quality, ranking, consistency, weights),
            margin1: ranking_term.map_or(0.0, |r| r.margin1),
            margin2: ranking_term.map_or(0.0, |r| r.margin2),
            extremes: ranking_term.map(|r| r.extremes),
        }
    }

    pub const CSV_HEADER: &'static str = "step,quality,ranking,consistency,total,margin1,margin2";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.quality, self.ranking, self.consistency, self.total, self.margin1, self.margin2
        )
    }
}

fn eval_scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Mean absolute error between predictions and targets.
pub fn quality_loss(q: &[f64], s: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Invalid("quality_loss: empty batch".into()));
    }
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let qv = g.constant(Tensor::from_vec(&[q.len()], q.to_vec())?);
    let l = quality_loss_var(&mut g, qv, s, LossNorm::L1)?;
    Ok(eval_scalar(&g, l))
}

/// Relative ranking loss; 0 when skipped (fewer than four samples or constant targets).
pub fn relative_ranking_loss(q: &[f64], s: &[f64]) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Invalid("relative_ranking_loss: empty batch".into()));
    }
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let qv = g.constant(Tensor::from_vec(&[q.len()], q.to_vec())?);
    Ok(ranking_loss_var(&mut g, qv, s)?.map_or(0.0, |r| eval_scalar(&g, r.loss)))
}

/// Self-consistency with scalar branch logits:
/// `mean|conv_B - conv_τB| + mean|atten_B - atten_τB| + λ1·|rr_B - rr_τB|`.
pub fn self_consistency_loss(
    conv: (&[f64], &[f64]),
    atten: (&[f64], &[f64]),
    rr: (f64, f64),
    lambda1: f64,
) -> Result<f64> {
    let mut g = Graph::<f64>::new(Mode::Eval, 0);
    let mut branches = Vec::new();
    for (a, b) in [conv, atten] {
        if a.len() != b.len() {
            return Err(Error::shape(
                "self_consistency_loss",
                format!("{} vs {} samples", a.len(), b.len()),
            ));
        }
        if a.is_empty() {
            return Err(Error::Invalid("self_consistency_loss: empty batch".into()));
        }
        branches.push(BranchPair {
            original: g.constant(Tensor::from_vec(&[a.len()], a.to_vec())?),
            transformed: g.constant(Tensor::from_vec(&[b.len()], b.to_vec())?),
        });
    }
    let ra = g.constant(Tensor::scalar(rr.0));
    let rb = g.constant(Tensor::scalar(rr.1));
    let l = self_consistency_var(&mut g, &branches, Some((ra, rb)), lambda1, LossNorm::L1)?;
    Ok(eval_scalar(&g, l))
}

pub fn total_loss(quality: f64, ranking: f64, consistency: f64, w: &LossWeights) -> f64 {
    quality + w.lambda2 * ranking + w.lambda3 * consistency
}

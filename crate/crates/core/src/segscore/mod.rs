//! Density-penalized ranking of instance-segmentation proposals.
//!
//! Peak-response maps, background masks and proposal masks are inputs; this
//! module only scores and ranks them. All maps are `[H, W]` tensors.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    /// Weight of the response mass inside the proposal.
    pub alpha: f64,
    /// Weight of the background mass inside the proposal.
    pub beta: f64,
    /// Weight of the density penalty.
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// Binary proposal masks `P_r`.
    pub proposals: Vec<Tensor>,
    /// Peak response map `R`.
    pub response: Tensor,
    /// Background mask `Q`.
    pub background: Tensor,
    /// Category density map `D^c`.
    pub density: Tensor,
    pub weights: ScoreWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

fn plane(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected [H, W], got {s:?}"))),
    }
}

fn same_plane(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (plane(op, a)?, plane(op, b)?);
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn check_binary(op: &'static str, mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain(op, format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Sum of the element-wise product, accumulated in `f64`.
fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `|1 - sum(D ⊙ P)|`: zero when the proposal holds exactly one object's
/// worth of density.
pub fn density_penalty(density: &Tensor, proposal: &Tensor) -> Result<f64> {
    same_plane("density_penalty", density, proposal)?;
    Ok((1.0 - inner(density, proposal)).abs())
}

/// Morphological gradient (3x3 dilation minus 3x3 erosion). Pixels outside
/// the image count as background.
pub fn contour_mask(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = plane("contour_mask", mask)?;
    check_binary("contour_mask", mask)?;
    let m = mask.data();
    let at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[r as usize * w + c as usize] != 0.0
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (mut any, mut all) = (false, true);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let v = at(r + dr, c + dc);
                    any |= v;
                    all &= v;
                }
            }
            if any && !all {
                out[r as usize * w + c as usize] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `α·R*P + R*P̂ − β·Q*P − γ·d_p` for one proposal, where `*` is the sum of
/// the element-wise product and `P̂` the proposal contour.
pub fn proposal_score(set: &ProposalSet, proposal: &Tensor) -> Result<f64> {
    let contour = contour_mask(proposal)?;
    let ScoreWeights { alpha, beta, gamma } = set.weights;
    Ok(alpha * inner(&set.response, proposal) + inner(&set.response, &contour)
        - beta * inner(&set.background, proposal)
        - gamma * density_penalty(&set.density, proposal)?)
}

/// Scores every proposal and sorts by descending score; equal scores keep
/// the lower proposal index first.
pub fn score_proposals(set: &ProposalSet) -> Result<Vec<Ranked>> {
    let ScoreWeights { alpha, beta, gamma } = set.weights;
    if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
        return Err(Error::domain("score_proposals", "weights must be finite"));
    }
    same_plane("score_proposals", &set.response, &set.background)?;
    same_plane("score_proposals", &set.response, &set.density)?;
    let mut scores = Vec::with_capacity(set.proposals.len());
    for p in &set.proposals {
        same_plane("score_proposals", &set.response, p)?;
        check_binary("score_proposals", p)?;
        scores.push(proposal_score(set, p)?);
    }
    Ok(rank_scores(&scores))
}

/// Indices of `scores` in descending score order, lower index first on ties.
pub fn rank_scores(scores: &[f64]) -> Vec<Ranked> {
    let mut ranked: Vec<Ranked> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| Ranked { index, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked
}

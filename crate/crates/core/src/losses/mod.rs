//! Training objectives for the LC and RLC frameworks.
//!
//! Every term is evaluated for a whole mini-batch at once. Per-image
//! normalizations (by set size, mask area or map area) are folded into
//! constant weight tensors together with the batch average, which runs over
//! the images that actually have the set a term is defined on. Weights are
//! exactly zero outside a term's support, so those entries receive exactly
//! zero gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::spatial_mask;
use crate::scenegen::{CountLabel, LcAnnotation, RlcSplit, SceneSample};

/// Per-image supervision as the losses see it. `counts[c]` is `None` for a
/// category without count annotation (RLC set `B`).
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub counts: Vec<Option<CountLabel>>,
    pub presence: Vec<bool>,
    pub t_tilde: u32,
}

impl Supervision {
    pub fn lc(ann: &LcAnnotation) -> Self {
        Supervision {
            counts: ann.labels.iter().copied().map(Some).collect(),
            presence: ann.labels.iter().map(|l| *l != CountLabel::Absent).collect(),
            t_tilde: ann.t_tilde,
        }
    }

    /// Lower-count labels on annotated categories, presence only elsewhere.
    pub fn rlc(sample: &SceneSample, split: &RlcSplit, t_tilde: u32) -> Self {
        let ann = crate::scenegen::annotate_lc(sample, t_tilde);
        Supervision {
            counts: ann
                .labels
                .iter()
                .enumerate()
                .map(|(c, &l)| split.is_annotated(c).then_some(l))
                .collect(),
            presence: sample.gt_counts.iter().map(|&t| t > 0).collect(),
            t_tilde,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.counts.len()
    }

    fn select(&self, f: impl Fn(Option<CountLabel>) -> bool) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| f(self.counts[c])).collect()
    }

    /// `S0`: annotated and absent.
    pub fn absent(&self) -> Vec<usize> {
        self.select(|l| l == Some(CountLabel::Absent))
    }

    /// `S` with the exact counts.
    pub fn exact(&self) -> Vec<(usize, u32)> {
        self.counts
            .iter()
            .enumerate()
            .filter_map(|(c, l)| match l {
                Some(CountLabel::Exact(t)) => Some((c, *t)),
                _ => None,
            })
            .collect()
    }

    /// `S~`: annotated, count at or beyond `t_tilde`.
    pub fn beyond(&self) -> Vec<usize> {
        self.select(|l| l == Some(CountLabel::Beyond))
    }

    /// `B'`: present categories without count annotation.
    pub fn unannotated_present(&self) -> Vec<usize> {
        (0..self.counts.len())
            .filter(|&c| self.counts[c].is_none() && self.presence[c])
            .collect()
    }

    /// Total-count target `Σ_S t_c + t_tilde |S~|` over annotated categories.
    pub fn total_target(&self) -> f32 {
        let exact: u32 = self.exact().iter().map(|&(_, t)| t).sum();
        (exact + self.t_tilde * self.beyond().len() as u32) as f32
    }

    /// Number of categories whose exact count is unknown, `|S~| + |B'|`.
    pub fn unknown_count(&self) -> usize {
        self.beyond().len() + self.unannotated_present().len()
    }
}

fn check_batch(tape: &Tape, v: Var, sup: &[Supervision], op: &'static str, rank: usize) -> Result<Vec<usize>> {
    let s = tape.shape(v).to_vec();
    if s.len() != rank || s[0] != sup.len() || sup.iter().any(|x| x.num_categories() != s[1]) {
        return Err(Error::shape(
            op,
            format!("{s:?} does not match {} images of supervision", sup.len()),
        ));
    }
    Ok(s)
}

fn weighted_sum(tape: &mut Tape, x: Var, w: Tensor) -> Result<Var> {
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// Per-image weight rows, averaged over images with a nonempty row.
/// Returns `None` when no image has one.
fn batch_weights(rows: Vec<Vec<f32>>, shape: &[usize]) -> Option<Tensor> {
    let n = rows.iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
    if n == 0 {
        return None;
    }
    let inv = 1.0 / n as f32;
    let data = rows.into_iter().flatten().map(|v| v * inv).collect();
    Some(Tensor::new(shape.to_vec(), data).expect("weight shape"))
}

/// Multi-label soft-margin classification loss on confidences `[N, C]`:
/// logistic BCE averaged over categories and images.
pub fn loss_class(tape: &mut Tape, scores: Var, sup: &[Supervision]) -> Result<Var> {
    let s = check_batch(tape, scores, sup, "loss_class", 2)?;
    let target: Vec<f32> = sup
        .iter()
        .flat_map(|x| x.presence.iter().map(|&p| if p { 1.0 } else { 0.0 }))
        .collect();
    let target = Tensor::new(s.clone(), target)?;
    let bce = tape.logistic_bce(scores, &target)?;
    let scale = 1.0 / (s[0] * s[1]) as f32;
    let sum = tape.sum(bce)?;
    tape.scale(sum, scale)
}

/// Hard pseudo ground-truth masks for every `c ∈ S`, stacked `[N, C, h, w]`.
#[derive(Clone, Debug)]
pub struct PseudoMasks {
    pub masks: Tensor,
    /// Categories in `S` whose peak map was empty.
    pub empty: usize,
}

pub fn pseudo_masks(peaks: &Tensor, sup: &[Supervision]) -> Result<PseudoMasks> {
    let s = peaks.shape();
    if s.len() != 4 || s[0] != sup.len() {
        return Err(Error::shape(
            "pseudo_masks",
            format!("peaks {s:?} for {} images", sup.len()),
        ));
    }
    let plane = s[2] * s[3];
    let mut data = vec![0.0f32; peaks.len()];
    let mut empty = 0;
    for (i, x) in sup.iter().enumerate() {
        let img = peaks.index(i)?;
        for (c, t) in x.exact() {
            let m = spatial_mask(&img.index(c)?, t);
            if m.is_empty() {
                empty += 1;
                log::warn!("image {i} category {c}: empty peak map, no pseudo ground truth");
            }
            data[(i * s[1] + c) * plane..][..plane].copy_from_slice(m.mask.data());
        }
    }
    Ok(PseudoMasks {
        masks: Tensor::new(s.to_vec(), data)?,
        empty,
    })
}

/// Positive spatial loss: BCE with target 1 of the masked density
/// `D ⊙ B` at mask pixels, normalized by mask area and `|S|`.
pub fn loss_sp_plus(tape: &mut Tape, density: Var, masks: &Tensor, sup: &[Supervision]) -> Result<Option<Var>> {
    let s = check_batch(tape, density, sup, "loss_sp_plus", 4)?;
    if masks.shape() != s.as_slice() {
        return Err(Error::shape(
            "loss_sp_plus",
            format!("masks {:?} vs density {s:?}", masks.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let rows: Vec<Vec<f32>> = sup
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut row = vec![0.0f32; s[1] * plane];
            let set = x.exact();
            for &(c, _) in &set {
                let b = &masks.data()[(i * s[1] + c) * plane..][..plane];
                let area: f32 = b.iter().sum();
                if area > 0.0 {
                    let w = 1.0 / (area * set.len() as f32);
                    for (r, &bv) in row[c * plane..][..plane].iter_mut().zip(b) {
                        *r = bv * w;
                    }
                }
            }
            row
        })
        .collect();
    // an image whose S masks are all empty still counts toward the average
    let with_set = sup.iter().filter(|x| !x.exact().is_empty()).count();
    if with_set == 0 {
        return Ok(None);
    }
    let inv = 1.0 / with_set as f32;
    let w = Tensor::new(s.clone(), rows.into_iter().flatten().map(|v| v * inv).collect())?;
    if w.data().iter().all(|&v| v == 0.0) {
        return Ok(Some(tape.constant(Tensor::scalar(0.0))));
    }
    let b = tape.constant(masks.clone());
    let masked = tape.mul(density, b)?;
    let bce = tape.logistic_bce(masked, &Tensor::ones(&s))?;
    weighted_sum(tape, bce, w).map(Some)
}

/// Negative spatial loss: BCE with target 0 over whole maps of `c ∈ S0`.
pub fn loss_sp_minus(tape: &mut Tape, density: Var, sup: &[Supervision]) -> Result<Option<Var>> {
    let s = check_batch(tape, density, sup, "loss_sp_minus", 4)?;
    let plane = s[2] * s[3];
    let rows = sup
        .iter()
        .map(|x| {
            let mut row = vec![0.0f32; s[1] * plane];
            let set = x.absent();
            for &c in &set {
                row[c * plane..][..plane].fill(1.0 / (set.len() * plane) as f32);
            }
            row
        })
        .collect();
    let Some(w) = batch_weights(rows, &s) else {
        return Ok(None);
    };
    let bce = tape.logistic_bce(density, &Tensor::zeros(&s))?;
    weighted_sum(tape, bce, w).map(Some)
}

/// Predicted counts `[N, C]`: spatial sums of the density maps.
pub fn predicted_counts(tape: &mut Tape, density: Var) -> Result<Var> {
    tape.sum_axes(density, &[2, 3])
}

/// Squared error of `counts: [N, C]` against per-image targets, each image
/// normalized by its set size.
fn squared_error(tape: &mut Tape, counts: Var, sets: &[Vec<(usize, f32)>]) -> Result<Option<Var>> {
    let s = tape.shape(counts).to_vec();
    let rows = sets
        .iter()
        .map(|set| {
            let mut row = vec![0.0f32; s[1]];
            for &(c, _) in set {
                row[c] = 1.0 / set.len() as f32;
            }
            row
        })
        .collect();
    let Some(w) = batch_weights(rows, &s) else {
        return Ok(None);
    };
    let mut target = vec![0.0f32; s[0] * s[1]];
    for (i, set) in sets.iter().enumerate() {
        for &(c, t) in set {
            target[i * s[1] + c] = t;
        }
    }
    let target = tape.constant(Tensor::new(s.clone(), target)?);
    let diff = tape.sub(counts, target)?;
    let sq = tape.mul(diff, diff)?;
    weighted_sum(tape, sq, w).map(Some)
}

/// Zero-margin hinge `max(0, t_tilde - t̂_c)` over each image's `S~`.
fn under_count(tape: &mut Tape, counts: Var, sup: &[Supervision]) -> Result<Option<Var>> {
    let s = tape.shape(counts).to_vec();
    let rows = sup
        .iter()
        .map(|x| {
            let mut row = vec![0.0f32; s[1]];
            let set = x.beyond();
            for &c in &set {
                row[c] = 1.0 / set.len() as f32;
            }
            row
        })
        .collect();
    let Some(w) = batch_weights(rows, &s) else {
        return Ok(None);
    };
    let margin: Vec<f32> = sup
        .iter()
        .flat_map(|x| std::iter::repeat_n(x.t_tilde as f32, s[1]))
        .collect();
    let margin = tape.constant(Tensor::new(s.clone(), margin)?);
    let gap = tape.sub(margin, counts)?;
    let hinge = tape.relu(gap)?;
    weighted_sum(tape, hinge, w).map(Some)
}

/// Count MSE over `S0 ∪ S`.
pub fn loss_mse_count(tape: &mut Tape, counts: Var, sup: &[Supervision]) -> Result<Option<Var>> {
    check_batch(tape, counts, sup, "loss_mse_count", 2)?;
    let sets: Vec<Vec<(usize, f32)>> = sup
        .iter()
        .map(|x| {
            let mut set: Vec<(usize, f32)> = x.absent().into_iter().map(|c| (c, 0.0)).collect();
            set.extend(x.exact().into_iter().map(|(c, t)| (c, t as f32)));
            set
        })
        .collect();
    squared_error(tape, counts, &sets)
}

/// Under-counting penalty over `S~`.
pub fn loss_rank(tape: &mut Tape, counts: Var, sup: &[Supervision]) -> Result<Option<Var>> {
    check_batch(tape, counts, sup, "loss_rank", 2)?;
    under_count(tape, counts, sup)
}

/// Reduced-count loss terms `(mse, rank)` over annotated categories: MSE
/// over `S` (plus `S0` when `include_absent`), hinge over `S~`.
pub fn loss_rcount(
    tape: &mut Tape,
    counts: Var,
    sup: &[Supervision],
    include_absent: bool,
) -> Result<(Option<Var>, Option<Var>)> {
    check_batch(tape, counts, sup, "loss_rcount", 2)?;
    let sets: Vec<Vec<(usize, f32)>> = sup
        .iter()
        .map(|x| {
            let mut set: Vec<(usize, f32)> = x.exact().into_iter().map(|(c, t)| (c, t as f32)).collect();
            if include_absent {
                set.extend(x.absent().into_iter().map(|c| (c, 0.0)));
            }
            set
        })
        .collect();
    let mse = squared_error(tape, counts, &sets)?;
    let rank = under_count(tape, counts, sup)?;
    Ok((mse, rank))
}

/// Total-count loss on `total: [N]`: squared error when every count in the
/// image is known, otherwise a hinge against under-counting the annotated
/// total. Averaged over the batch.
pub fn loss_tot(tape: &mut Tape, total: Var, sup: &[Supervision]) -> Result<Var> {
    let s = tape.shape(total).to_vec();
    if s != [sup.len()] {
        return Err(Error::shape(
            "loss_tot",
            format!("total {s:?} for {} images", sup.len()),
        ));
    }
    let n = sup.len() as f32;
    let target: Vec<f32> = sup.iter().map(Supervision::total_target).collect();
    let exact_w: Vec<f32> = sup
        .iter()
        .map(|x| if x.unknown_count() == 0 { 1.0 / n } else { 0.0 })
        .collect();
    let hinge_w: Vec<f32> = sup
        .iter()
        .map(|x| if x.unknown_count() > 0 { 1.0 / n } else { 0.0 })
        .collect();
    let target = tape.constant(Tensor::new(s.clone(), target)?);
    let diff = tape.sub(total, target)?;
    let sq = tape.mul(diff, diff)?;
    let a = weighted_sum(tape, sq, Tensor::new(s.clone(), exact_w)?)?;
    let under = tape.neg(diff)?;
    let under = tape.relu(under)?;
    let b = weighted_sum(tape, under, Tensor::new(s, hinge_w)?)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Density branch trained by the count losses only.
    One,
    /// Spatial losses added.
    Two,
}

/// Tape handles of the individual terms; `None` for a term that is not
/// defined on the batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub class: Option<Var>,
    pub sp_plus: Option<Var>,
    pub sp_minus: Option<Var>,
    pub mse: Option<Var>,
    pub rank: Option<Var>,
    pub rcount_mse: Option<Var>,
    pub rcount_rank: Option<Var>,
    pub tot: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub sp_plus: f64,
    pub sp_minus: f64,
    pub mse: f64,
    pub rank: f64,
    pub rcount_mse: f64,
    pub rcount_rank: f64,
    pub tot: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `class + mse + λ rank`, plus `sp_plus + sp_minus` in stage two.
    pub fn lc_total(&self, stage: Stage, lambda: f64) -> f64 {
        let base = self.class + self.mse + lambda * self.rank;
        match stage {
            Stage::One => base,
            Stage::Two => base + self.sp_plus + self.sp_minus,
        }
    }

    pub fn rlc_total(&self) -> f64 {
        self.class + self.rcount_mse + self.rcount_rank + self.tot
    }
}

fn value(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v).item() as f64)
}

fn weighted_total(tape: &mut Tape, parts: &[(Option<Var>, f32)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        let Some(v) = v else { continue };
        let v = if w == 1.0 { v } else { tape.scale(v, w)? };
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

fn breakdown(tape: &Tape, t: &LossTerms) -> LossBreakdown {
    LossBreakdown {
        class: value(tape, t.class),
        sp_plus: value(tape, t.sp_plus),
        sp_minus: value(tape, t.sp_minus),
        mse: value(tape, t.mse),
        rank: value(tape, t.rank),
        rcount_mse: value(tape, t.rcount_mse),
        rcount_rank: value(tape, t.rcount_rank),
        tot: value(tape, t.tot),
        total: 0.0,
    }
}

/// LC objective. Spatial terms are ignored in stage one.
pub fn assemble_lc(tape: &mut Tape, terms: &LossTerms, stage: Stage, lambda: f32) -> Result<(Var, LossBreakdown)> {
    let mut t = *terms;
    if stage == Stage::One {
        t.sp_plus = None;
        t.sp_minus = None;
    }
    let total = weighted_total(
        tape,
        &[
            (t.class, 1.0),
            (t.mse, 1.0),
            (t.rank, lambda),
            (t.sp_plus, 1.0),
            (t.sp_minus, 1.0),
        ],
    )?;
    let mut b = breakdown(tape, &t);
    b.total = tape.value(total).item() as f64;
    Ok((total, b))
}

/// RLC objective: classification, reduced-count and total-count terms.
pub fn assemble_rlc(tape: &mut Tape, terms: &LossTerms) -> Result<(Var, LossBreakdown)> {
    let t = terms;
    let total = weighted_total(
        tape,
        &[(t.class, 1.0), (t.rcount_mse, 1.0), (t.rcount_rank, 1.0), (t.tot, 1.0)],
    )?;
    let mut b = breakdown(tape, t);
    b.total = tape.value(total).item() as f64;
    Ok((total, b))
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::error::{Error, Result};

/// Per-category lower-count label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountLabel {
    /// Category absent (`S0`).
    Absent,
    /// Exact count inside the lower-count range `[1, t_tilde)` (`S`).
    Exact(u32),
    /// Count at or beyond `t_tilde`, exact value withheld (`S~`).
    Beyond,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcAnnotation {
    pub labels: Vec<CountLabel>,
    pub t_tilde: u32,
}

impl LcAnnotation {
    fn select(&self, f: impl Fn(&CountLabel) -> bool) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| f(l))
            .map(|(c, _)| c)
            .collect()
    }

    /// `S0`
    pub fn absent(&self) -> Vec<usize> {
        self.select(|l| matches!(l, CountLabel::Absent))
    }

    /// `S`
    pub fn exact(&self) -> Vec<usize> {
        self.select(|l| matches!(l, CountLabel::Exact(_)))
    }

    /// `S~`
    pub fn beyond(&self) -> Vec<usize> {
        self.select(|l| matches!(l, CountLabel::Beyond))
    }

    /// Image-level presence label per category (1 for `S` and `S~`).
    pub fn presence(&self) -> Vec<f32> {
        self.labels
            .iter()
            .map(|l| if matches!(l, CountLabel::Absent) { 0.0 } else { 1.0 })
            .collect()
    }

    /// Known count for `S` and `S0` members.
    pub fn count(&self, c: usize) -> Option<u32> {
        match self.labels[c] {
            CountLabel::Absent => Some(0),
            CountLabel::Exact(t) => Some(t),
            CountLabel::Beyond => None,
        }
    }
}

pub fn annotate_lc(sample: &SceneSample, t_tilde: u32) -> LcAnnotation {
    debug_assert!(t_tilde >= 2);
    let labels = sample
        .gt_counts
        .iter()
        .map(|&t| match t {
            0 => CountLabel::Absent,
            t if t < t_tilde => CountLabel::Exact(t),
            _ => CountLabel::Beyond,
        })
        .collect();
    LcAnnotation { labels, t_tilde }
}

/// Dataset-level partition of categories into count-annotated (`A`) and
/// class-label-only (`B`) sets. Both lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlcSplit {
    pub annotated: Vec<usize>,
    pub unannotated: Vec<usize>,
}

impl RlcSplit {
    /// The LC setting: every category annotated.
    pub fn all(num_categories: usize) -> Self {
        RlcSplit {
            annotated: (0..num_categories).collect(),
            unannotated: Vec::new(),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.annotated.len() + self.unannotated.len()
    }

    pub fn is_annotated(&self, c: usize) -> bool {
        self.annotated.binary_search(&c).is_ok()
    }

    /// `B'`: categories of `B` present in the sample.
    pub fn positive_unannotated(&self, sample: &SceneSample) -> Vec<usize> {
        self.unannotated
            .iter()
            .copied()
            .filter(|&c| sample.gt_counts[c] > 0)
            .collect()
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        let mut all: Vec<usize> = self.annotated.iter().chain(&self.unannotated).copied().collect();
        all.sort_unstable();
        if all != (0..num_categories).collect::<Vec<_>>() {
            return Err(Error::format(
                "split",
                format!("annotated and unannotated sets must partition 0..{num_categories}"),
            ));
        }
        Ok(())
    }
}

/// Uniformly random split with `annotated_count` categories in `A`.
pub fn make_rlc_split(num_categories: usize, annotated_count: usize, seed: u64) -> Result<RlcSplit> {
    if annotated_count > num_categories {
        return Err(Error::format(
            "annotated_count",
            format!("{annotated_count} exceeds {num_categories} categories"),
        ));
    }
    let mut ids: Vec<usize> = (0..num_categories).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut annotated = ids[..annotated_count].to_vec();
    let mut unannotated = ids[annotated_count..].to_vec();
    annotated.sort_unstable();
    unannotated.sort_unstable();
    Ok(RlcSplit { annotated, unannotated })
}

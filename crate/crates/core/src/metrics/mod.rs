//! Counting metrics: the mRMSE family, total-count errors and GAME.
//!
//! Raw predictions are clamped at zero and rounded half away from zero
//! before any error is computed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Nearest non-negative integer count.
pub fn round_count(x: f32) -> u32 {
    if x.is_nan() || x <= 0.0 {
        0
    } else {
        x.round() as u32
    }
}

/// Ground truth and raw predictions per (image, category), image-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    pub num_categories: usize,
    pub gt: Vec<u32>,
    pub pred: Vec<f32>,
}

impl CountTable {
    pub fn new(num_categories: usize) -> Self {
        CountTable {
            num_categories,
            gt: Vec::new(),
            pred: Vec::new(),
        }
    }

    pub fn from_rows(gt: &[Vec<u32>], pred: &[Vec<f32>]) -> Result<Self> {
        let c = gt.first().map_or(0, Vec::len);
        let mut t = CountTable::new(c);
        for (g, p) in gt.iter().zip(pred) {
            t.push(g, p)?;
        }
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "count_table",
                format!("{} gt rows vs {} predictions", gt.len(), pred.len()),
            ));
        }
        Ok(t)
    }

    pub fn push(&mut self, gt: &[u32], pred: &[f32]) -> Result<()> {
        if gt.len() != self.num_categories || pred.len() != self.num_categories {
            return Err(Error::shape(
                "count_table",
                format!(
                    "row of {}/{} entries, expected {}",
                    gt.len(),
                    pred.len(),
                    self.num_categories
                ),
            ));
        }
        if let Some(p) = pred.iter().find(|p| !p.is_finite()) {
            return Err(Error::domain("count_table", format!("non-finite prediction {p}")));
        }
        self.gt.extend_from_slice(gt);
        self.pred.extend_from_slice(pred);
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.gt.len().checked_div(self.num_categories).unwrap_or(0)
    }

    fn column(&self, c: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_images()).map(move |i| {
            let k = i * self.num_categories + c;
            (self.gt[k], round_count(self.pred[k]))
        })
    }

    /// Sub-table over the listed categories, in the given order.
    pub fn categories(&self, cats: &[usize]) -> CountTable {
        let mut t = CountTable::new(cats.len());
        for i in 0..self.num_images() {
            let row = i * self.num_categories;
            t.gt.extend(cats.iter().map(|&c| self.gt[row + c]));
            t.pred.extend(cats.iter().map(|&c| self.pred[row + c]));
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub rmse: f64,
    pub rmse_nz: Option<f64>,
    pub relrmse: f64,
    pub relrmse_nz: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseFamily {
    pub mrmse: f64,
    pub mrmse_nz: f64,
    pub m_relrmse: f64,
    pub m_relrmse_nz: f64,
    pub per_category: Vec<CategoryMetrics>,
}

/// `(rmse, relrmse)` over `(gt, rounded prediction)` pairs; `None` when empty.
fn rmse_pair(pairs: impl Iterator<Item = (u32, u32)>) -> Option<(f64, f64)> {
    let (mut se, mut rel, mut n) = (0.0f64, 0.0f64, 0usize);
    for (t, p) in pairs {
        let d = t as f64 - p as f64;
        se += d * d;
        rel += d * d / (t as f64 + 1.0);
        n += 1;
    }
    (n > 0).then(|| ((se / n as f64).sqrt(), (rel / n as f64).sqrt()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn rmse_family(table: &CountTable) -> Result<RmseFamily> {
    if table.num_images() == 0 || table.num_categories == 0 {
        return Err(Error::shape("rmse_family", "empty count table"));
    }
    let per_category: Vec<CategoryMetrics> = (0..table.num_categories)
        .map(|c| {
            let (rmse, relrmse) = rmse_pair(table.column(c)).expect("non-empty");
            let nz = rmse_pair(table.column(c).filter(|&(t, _)| t > 0));
            CategoryMetrics {
                category: c,
                rmse,
                rmse_nz: nz.map(|v| v.0),
                relrmse,
                relrmse_nz: nz.map(|v| v.1),
            }
        })
        .collect();
    Ok(RmseFamily {
        mrmse: mean(per_category.iter().map(|m| m.rmse)),
        mrmse_nz: mean(per_category.iter().filter_map(|m| m.rmse_nz)),
        m_relrmse: mean(per_category.iter().map(|m| m.relrmse)),
        m_relrmse_nz: mean(per_category.iter().filter_map(|m| m.relrmse_nz)),
        per_category,
    })
}

/// mRMSE over images whose ground truth lies in `lo..=hi`, per category,
/// averaged over categories with at least one such image. `None` when no
/// category qualifies.
pub fn band_mrmse(table: &CountTable, lo: u32, hi: u32) -> Option<f64> {
    let per: Vec<f64> = (0..table.num_categories)
        .filter_map(|c| rmse_pair(table.column(c).filter(|&(t, _)| (lo..=hi).contains(&t))).map(|v| v.0))
        .collect();
    (!per.is_empty()).then(|| mean(per.into_iter()))
}

/// `(RMSE, relRMSE)` of per-image total counts `(gt, raw prediction)`.
pub fn total_count_metrics(totals: &[(u32, f32)]) -> Result<(f64, f64)> {
    rmse_pair(totals.iter().map(|&(t, p)| (t, round_count(p))))
        .ok_or_else(|| Error::shape("total_count_metrics", "no images"))
}

/// GAME(n) of one density map against points in map coordinates: the sum
/// over a `2^n x 2^n` grid of absolute differences between predicted mass
/// and point counts. Maps not divisible by `2^n` are zero-padded on the
/// right and bottom.
pub fn game(pred: &Tensor, points: &[(u32, u32)], n: u32) -> Result<f64> {
    let s = pred.shape();
    if s.len() != 2 {
        return Err(Error::shape("game", format!("density must be 2-D, got {s:?}")));
    }
    if n > 3 {
        return Err(Error::domain("game", format!("level {n} outside 0..=3")));
    }
    let (h, w) = (s[0], s[1]);
    let g = 1usize << n;
    let (ch, cw) = (h.div_ceil(g), w.div_ceil(g));
    let mut cells = vec![0.0f64; g * g];
    for (k, &v) in pred.data().iter().enumerate() {
        let (i, j) = (k / w, k % w);
        cells[(i / ch) * g + j / cw] += v as f64;
    }
    for &(r, c) in points {
        let (r, c) = (r as usize, c as usize);
        if r >= h || c >= w {
            return Err(Error::domain("game", format!("point ({r}, {c}) outside {h}x{w} map")));
        }
        cells[(r / ch) * g + c / cw] -= 1.0;
    }
    Ok(cells.iter().map(|v| v.abs()).sum())
}

/// GAME(0..=3) averaged over `(density, points)` pairs.
pub fn game_dataset<'a>(items: impl IntoIterator<Item = (&'a Tensor, &'a [(u32, u32)])>) -> Result<[f64; 4]> {
    let mut sums = [0.0f64; 4];
    let mut n = 0usize;
    for (d, pts) in items {
        for (level, s) in sums.iter_mut().enumerate() {
            *s += game(d, pts, level as u32)?;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::shape("game_dataset", "no density maps"));
    }
    Ok(sums.map(|s| s / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub num_images: usize,
    pub mrmse: f64,
    pub mrmse_nz: f64,
    pub m_relrmse: f64,
    pub m_relrmse_nz: f64,
    /// mRMSE over ground-truth counts 5..=8.
    pub band_mrmse: Option<f64>,
    pub total_rmse: f64,
    pub total_relrmse: f64,
    /// Source of the predicted total: the dedicated head or the sum of
    /// per-category predictions.
    pub total_source: String,
    pub game: Option<[f64; 4]>,
    /// Set when GAME grids were zero-padded.
    pub game_padded: bool,
    pub per_category: Vec<CategoryMetrics>,
}

pub const BAND: (u32, u32) = (5, 8);

impl MetricsReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("category_id,rmse,rmse_nz,relrmse,relrmse_nz\n");
        for m in &self.per_category {
            out += &format!(
                "{},{:.6},{},{:.6},{}\n",
                m.category,
                m.rmse,
                opt(m.rmse_nz),
                m.relrmse,
                opt(m.relrmse_nz)
            );
        }
        out += &format!(
            "mean,{:.6},{:.6},{:.6},{:.6}\n",
            self.mrmse, self.mrmse_nz, self.m_relrmse, self.m_relrmse_nz
        );
        out += &format!("total,{:.6},,{:.6},\n", self.total_rmse, self.total_relrmse);
        out
    }
}

#[cfg(test)]
mod tests;

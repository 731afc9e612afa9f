use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{self, CountTable, MetricsReport, BAND};
use crate::model::{ModelState, Prediction};
use crate::scenegen::Dataset;
use crate::segscore::io::write_normalized_pgm;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub table: CountTable,
    pub predictions: Vec<Prediction>,
}

/// Predicted per-image total: the total-count head when present, otherwise
/// the sum of per-category predictions.
pub fn predicted_total(p: &Prediction) -> f32 {
    p.total_head.unwrap_or_else(|| p.counts.iter().sum())
}

/// Per-category density with confidence gating applied, so that its mass
/// equals the reported count.
fn gated_density(p: &Prediction, c: usize) -> Result<Tensor> {
    let d = p.density.index(c)?;
    Ok(if p.scores[c] > 0.0 { d } else { Tensor::zeros(d.shape()) })
}

pub fn evaluate(model: &mut ModelState, data: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let images: Vec<&Tensor> = data.samples.iter().map(|s| &s.image).collect();
    let predictions = model.predict(&images, opts.batch_size.max(1))?;
    let c = data.spec.num_categories;
    let mut table = CountTable::new(c);
    for (s, p) in data.samples.iter().zip(&predictions) {
        table.push(&s.gt_counts, &p.counts)?;
    }
    let family = metrics::rmse_family(&table)?;
    let totals: Vec<(u32, f32)> = data
        .samples
        .iter()
        .zip(&predictions)
        .map(|(s, p)| (s.total_count(), predicted_total(p)))
        .collect();
    let (total_rmse, total_relrmse) = metrics::total_count_metrics(&totals)?;

    let map = predictions[0].density.shape()[1];
    let stride = data.spec.image_size / map;
    let mut maps = Vec::new();
    let mut points = Vec::new();
    for (s, p) in data.samples.iter().zip(&predictions) {
        for k in 0..c {
            maps.push(gated_density(p, k)?);
            points.push(
                s.gt_points[k]
                    .iter()
                    .map(|&(r, col)| (r / stride as u32, col / stride as u32))
                    .collect::<Vec<_>>(),
            );
        }
    }
    let game = metrics::game_dataset(maps.iter().zip(&points).map(|(d, p)| (d, p.as_slice())))?;

    let report = MetricsReport {
        config_hash: opts.config_hash.clone(),
        seed: opts.seed,
        num_images: data.len(),
        mrmse: family.mrmse,
        mrmse_nz: family.mrmse_nz,
        m_relrmse: family.m_relrmse,
        m_relrmse_nz: family.m_relrmse_nz,
        band_mrmse: metrics::band_mrmse(&table, BAND.0, BAND.1),
        total_rmse,
        total_relrmse,
        total_source: if predictions[0].total_head.is_some() {
            "head"
        } else {
            "category_sum"
        }
        .into(),
        game: Some(game),
        game_padded: map % 8 != 0,
        per_category: family.per_category,
    };
    Ok(Evaluation {
        report,
        table,
        predictions,
    })
}

/// Counts of the "presence implies one" predictor.
pub fn presence_baseline(data: &Dataset) -> CountTable {
    let mut t = CountTable::new(data.spec.num_categories);
    for s in &data.samples {
        let pred: Vec<f32> = s.gt_counts.iter().map(|&g| if g > 0 { 1.0 } else { 0.0 }).collect();
        t.push(&s.gt_counts, &pred).expect("row width");
    }
    t
}

#[derive(Serialize)]
struct DumpEntry {
    file: String,
    image: usize,
    /// Category id, or `None` for the total-count map.
    category: Option<usize>,
    min: f32,
    max: f32,
}

/// Writes every per-category density map (and the total-count map when
/// present) as a per-map min/max normalized PGM, with the scales recorded
/// in `manifest.json`.
pub fn dump_densities(model: &mut ModelState, data: &Dataset, dir: &Path, batch_size: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images: Vec<&Tensor> = data.samples.iter().map(|s| &s.image).collect();
    let preds = model.predict(&images, batch_size.max(1))?;
    let mut entries = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for c in 0..p.density.shape()[0] {
            let file = format!("density_{i:05}_c{c:02}.pgm");
            let (min, max) = write_normalized_pgm(&dir.join(&file), &p.density.index(c)?)?;
            entries.push(DumpEntry {
                file,
                image: i,
                category: Some(c),
                min,
                max,
            });
        }
    }
    if model.config.framework == crate::model::Framework::Rlc {
        let totals = total_maps(model, &images, batch_size)?;
        for (i, t) in totals.iter().enumerate() {
            let file = format!("density_{i:05}_total.pgm");
            let (min, max) = write_normalized_pgm(&dir.join(&file), t)?;
            entries.push(DumpEntry {
                file,
                image: i,
                category: None,
                min,
                max,
            });
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&path, e))
}

fn total_maps(model: &mut ModelState, images: &[&Tensor], batch_size: usize) -> Result<Vec<Tensor>> {
    use crate::autodiff::{BnMode, Tape};
    let mut out = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(Tensor::stack(&owned)?);
        let fwd = model.forward(&mut tape, &bound, x, BnMode::Eval)?;
        let total = tape.value(fwd.rlc.expect("rlc model").total);
        for n in 0..chunk.len() {
            out.push(total.index(n)?.index(0)?);
        }
    }
    Ok(out)
}

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train_and_evaluate, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{band_mrmse, rmse_family, BAND};
use crate::model::Framework;
use crate::scenegen::{dataset_hash, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Lambda,
    TTilde,
    /// Number of count-annotated categories (RLC).
    Split,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Sweep::Lambda),
            "t_tilde" => Ok(Sweep::TTilde),
            "split" => Ok(Sweep::Split),
            other => Err(Error::Config(format!(
                "unknown sweep {other:?}; expected lambda, t_tilde or split"
            ))),
        }
    }
}

/// Parses a comma-separated value list.
pub fn parse_sweep(values: &str) -> Result<Vec<f64>> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("sweep value {v:?}: {e}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub value: f64,
    pub config_hash: String,
    pub train_hash: String,
    pub test_hash: String,
    pub mrmse: f64,
    pub mrmse_nz: f64,
    pub m_relrmse: f64,
    pub m_relrmse_nz: f64,
    /// mRMSE over test images with ground truth in the 5..=8 band.
    pub band_mrmse: Option<f64>,
    pub total_rmse: f64,
    pub unannotated: Vec<usize>,
    /// mRMSE restricted to categories without count annotation.
    pub unannotated_mrmse: Option<f64>,
    /// Same restriction for the "presence implies one" predictor.
    pub unannotated_baseline_mrmse: Option<f64>,
}

fn arm_config(base: &RunConfig, sweep: Sweep, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let int = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as u64)
        } else {
            Err(Error::Config(format!("sweep value {v} must be a non-negative integer")))
        }
    };
    match sweep {
        Sweep::Lambda => cfg.lambda = value as f32,
        Sweep::TTilde => cfg.t_tilde = int(value)? as u32,
        Sweep::Split => {
            cfg.framework = Framework::Rlc;
            cfg.annotated_count = int(value)? as usize;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one arm per value on shared train/test data. Arms differ only in
/// their supervision or loss weights, never in the images. Writes
/// `ablation.csv` and `ablation.json` under `out` when given.
pub fn ablate(
    base: &RunConfig,
    sweep: Sweep,
    values: &[f64],
    train: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let train_hash = dataset_hash(train);
    let test_hash = dataset_hash(test);
    let baseline = super::presence_baseline(test);
    let mut rows = Vec::new();
    for &value in values {
        let cfg = arm_config(base, sweep, value)?;
        let arm_dir = out.map(|d| d.join(format!("arm_{value}")));
        log::info!("ablation arm {sweep:?}={value}");
        let run = train_and_evaluate(&cfg, train, test, arm_dir.as_deref())?;
        let r = &run.evaluation.report;
        let unannotated = run.outcome.split.unannotated.clone();
        let restricted = |t: &crate::metrics::CountTable| -> Result<Option<f64>> {
            if unannotated.is_empty() {
                return Ok(None);
            }
            Ok(Some(rmse_family(&t.categories(&unannotated))?.mrmse))
        };
        rows.push(AblationRow {
            sweep,
            value,
            config_hash: cfg.hash(),
            train_hash: train_hash.clone(),
            test_hash: test_hash.clone(),
            mrmse: r.mrmse,
            mrmse_nz: r.mrmse_nz,
            m_relrmse: r.m_relrmse,
            m_relrmse_nz: r.m_relrmse_nz,
            band_mrmse: band_mrmse(&run.evaluation.table, BAND.0, BAND.1),
            total_rmse: r.total_rmse,
            unannotated_mrmse: restricted(&run.evaluation.table)?,
            unannotated_baseline_mrmse: restricted(&baseline)?,
            unannotated,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, to_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_vec_pretty(&rows)?).map_err(|e| Error::io(&json, e))?;
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from(
        "sweep,value,train_hash,test_hash,mrmse,mrmse_nz,m_relrmse,m_relrmse_nz,band_mrmse,total_rmse,\
         unannotated_categories,unannotated_mrmse,unannotated_baseline_mrmse\n",
    );
    for r in rows {
        let cats: Vec<String> = r.unannotated.iter().map(usize::to_string).collect();
        out += &format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{},{}\n",
            serde_json::to_value(r.sweep).expect("enum").as_str().expect("string"),
            r.value,
            r.train_hash,
            r.test_hash,
            r.mrmse,
            r.mrmse_nz,
            r.m_relrmse,
            r.m_relrmse_nz,
            opt(r.band_mrmse),
            r.total_rmse,
            cats.join(" "),
            opt(r.unannotated_mrmse),
            opt(r.unannotated_baseline_mrmse),
        );
    }
    out
}

//! Counting metrics (mean absolute error, mean square error), per-image
//! evaluation reports with tile re-assembly, and the paired GMP ablation
//! protocol.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::counter::Counter;
use crate::data::{ImageSample, Split};
use crate::error::{Error, Result};
use crate::localizer::{condition_inputs, Localizer};
use crate::training::{images_to_tensor, train_counter, RunConfig, RunManifest};

/// `MAE = (1/N) sum |y_hat - y|`.
pub fn mae(predicted: &[f64], ground_truth: &[f64]) -> Result<f64> {
    check_metric_inputs(predicted, ground_truth)?;
    let n = predicted.len() as f64;
    Ok(predicted.iter().zip(ground_truth).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

/// `MSE = (1/N) sum (y_hat - y)^2`.
pub fn mse(predicted: &[f64], ground_truth: &[f64]) -> Result<f64> {
    check_metric_inputs(predicted, ground_truth)?;
    let n = predicted.len() as f64;
    Ok(predicted.iter().zip(ground_truth).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n)
}

fn check_metric_inputs(predicted: &[f64], ground_truth: &[f64]) -> Result<()> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::Input(format!(
            "metric inputs differ in length: {} predictions vs {} labels",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Input("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Per-image evaluation record. Tiled samples are re-assembled first, so one
/// row corresponds to one original image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub ground_truth: f64,
    pub predicted: f64,
    pub abs_error: f64,
    /// Sum of the localizer's fine density map, when a localizer is given; a
    /// secondary count estimate, never the primary one.
    pub fine_map_sum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    pub mse: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("id,ground_truth,predicted,abs_error,fine_map_sum\n");
        for r in &self.rows {
            let fine = r.fine_map_sum.map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.ground_truth, r.predicted, r.abs_error, fine
            ));
        }
        csv
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join("eval.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Runs the counter (and optionally the localizer) over one split and
/// aggregates per-image errors. Tiles sharing an original id contribute their
/// counts to a single row.
pub fn evaluate(
    counter: &Counter,
    localizer: Option<&Localizer>,
    samples: &[ImageSample],
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be nonzero".into()));
    }
    let device = Device::Cpu;
    let subset: Vec<&ImageSample> = samples.iter().filter(|s| s.split == split).collect();
    if subset.is_empty() {
        return Err(Error::Input(format!("no samples in the {split:?} split")));
    }

    // (ground truth, predicted, fine sum), accumulated per original image.
    let mut per_image: BTreeMap<String, (f64, f64, Option<f64>)> = BTreeMap::new();
    for chunk in subset.chunks(batch_size) {
        let images = images_to_tensor(chunk, &device)?;
        let coarse = counter.forward(&images)?;
        let counts = coarse.count_values()?;
        let fine_sums = match localizer {
            Some(localizer) => {
                let cond = condition_inputs(&images, &coarse.values.detach())?;
                let fine = localizer.forward(&cond)?;
                Some(fine.sum((1, 2, 3))?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
            }
            None => None,
        };
        for (i, s) in chunk.iter().enumerate() {
            let entry = per_image
                .entry(s.original_id().to_string())
                .or_insert((0.0, 0.0, localizer.map(|_| 0.0)));
            entry.0 += s.dots.count() as f64;
            entry.1 += counts[i];
            if let (Some(total), Some(sums)) = (entry.2.as_mut(), fine_sums.as_ref()) {
                *total += sums[i];
            }
        }
    }

    let rows: Vec<EvalRow> = per_image
        .into_iter()
        .map(|(id, (ground_truth, predicted, fine_map_sum))| EvalRow {
            id,
            ground_truth,
            predicted,
            abs_error: (predicted - ground_truth).abs(),
            fine_map_sum,
        })
        .collect();
    let predicted: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let ground_truth: Vec<f64> = rows.iter().map(|r| r.ground_truth).collect();
    Ok(EvalReport {
        split,
        mae: mae(&predicted, &ground_truth)?,
        mse: mse(&predicted, &ground_truth)?,
        rows,
    })
}

/// A paired ablation run may differ in nothing but the message passing
/// switch; anything else would confound the comparison.
pub fn check_ablation_pair(without_gmp: &RunConfig, full: &RunConfig) -> Result<()> {
    let mut normalized = full.clone();
    normalized.counter.gmp_enabled = without_gmp.counter.gmp_enabled;
    if &normalized != without_gmp {
        return Err(Error::Protocol(
            "ablation pair differs in more than the gmp_enabled flag".into(),
        ));
    }
    if without_gmp.counter.gmp_enabled || !full.counter.gmp_enabled {
        return Err(Error::Protocol(
            "ablation pair must disable gmp in exactly the first config".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeedResult {
    pub seed: u64,
    pub without_gmp_mae: f64,
    pub without_gmp_mse: f64,
    pub full_mae: f64,
    pub full_mse: f64,
}

/// Mean test metrics of the two model variants over paired seeds, plus the
/// absolute improvement attributable to message passing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub per_seed: Vec<AblationSeedResult>,
    pub without_gmp: (f64, f64),
    pub full_model: (f64, f64),
    pub improvement: (f64, f64),
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("variant,mae,mse\n");
        csv.push_str(&format!("w/o GMP,{},{}\n", self.without_gmp.0, self.without_gmp.1));
        csv.push_str(&format!("Full model,{},{}\n", self.full_model.0, self.full_model.1));
        csv.push_str(&format!("improvement,{},{}\n", self.improvement.0, self.improvement.1));
        csv
    }
}

/// Trains the full model and its message-passing-free twin for each seed and
/// compares test-split counting errors. Both runs of a pair share the seed
/// and must traverse the data identically.
pub fn run_ablation(
    base: &RunConfig,
    samples: &[ImageSample],
    dataset_hash: &str,
    seeds: &[u64],
    work_dir: &Path,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Protocol("ablation needs at least one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut full = base.clone();
        full.seed = seed;
        full.counter.gmp_enabled = true;
        let mut without = full.clone();
        without.counter.gmp_enabled = false;
        check_ablation_pair(&without, &full)?;

        let dir_without = work_dir.join(format!("seed{seed}_without_gmp"));
        let dir_full = work_dir.join(format!("seed{seed}_full"));
        let m_without = train_counter(&without, samples, dataset_hash, &dir_without)?;
        let m_full = train_counter(&full, samples, dataset_hash, &dir_full)?;
        check_paired_order(&m_without, &m_full)?;

        let (counter_without, _) = crate::training::load_counter(&dir_without)?;
        let (counter_full, _) = crate::training::load_counter(&dir_full)?;
        let report_without =
            evaluate(&counter_without, None, samples, Split::Test, base.optim.batch_size)?;
        let report_full =
            evaluate(&counter_full, None, samples, Split::Test, base.optim.batch_size)?;
        per_seed.push(AblationSeedResult {
            seed,
            without_gmp_mae: report_without.mae,
            without_gmp_mse: report_without.mse,
            full_mae: report_full.mae,
            full_mse: report_full.mse,
        });
    }

    let n = per_seed.len() as f64;
    let without_gmp = (
        per_seed.iter().map(|r| r.without_gmp_mae).sum::<f64>() / n,
        per_seed.iter().map(|r| r.without_gmp_mse).sum::<f64>() / n,
    );
    let full_model = (
        per_seed.iter().map(|r| r.full_mae).sum::<f64>() / n,
        per_seed.iter().map(|r| r.full_mse).sum::<f64>() / n,
    );
    let report = AblationReport {
        per_seed,
        without_gmp,
        full_model,
        improvement: (without_gmp.0 - full_model.0, without_gmp.1 - full_model.1),
    };
    std::fs::create_dir_all(work_dir)?;
    std::fs::write(work_dir.join("ablation.json"), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(work_dir.join("ablation.csv"), report.to_csv())?;
    Ok(report)
}

fn check_paired_order(a: &RunManifest, b: &RunManifest) -> Result<()> {
    if a.data_order_hash != b.data_order_hash {
        return Err(Error::Protocol(
            "paired ablation runs saw different data orders; results are not comparable".into(),
        ));
    }
    Ok(())
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{chamfer, emd_approx, emd_exact, DEFAULT_AUCTION_EPS, DEFAULT_EXACT_CAP};
use crate::model::Reconstructor;
use crate::pointcloud::{Dataset, PointCloud, Source};

/// Samples pushed through the model at once during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub cd: f64,
    pub emd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_cd: f64,
    pub mean_emd: f64,
    /// False when the clouds were too large for the exact solver and EMD comes from the auction.
    pub emd_exact: bool,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,cd,emd\n");
        for r in &self.rows {
            writeln!(s, "{},{:.10e},{:.10e}", r.sample_id, r.cd, r.emd).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Eval-mode reconstruction of every sample, scored with Chamfer and EMD
/// against its ground truth.
pub fn evaluate<M: Reconstructor + ?Sized>(model: &M, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let m = model.output_points();
    if let Some(bad) = data.samples.iter().position(|s| s.target.len() != m) {
        return Err(Error::Contract(format!(
            "sample {bad} has {} ground-truth points but the model outputs {m}",
            data.samples[bad].target.len()
        )));
    }
    let emd_exact_ok = m <= DEFAULT_EXACT_CAP;

    let mut outputs: Vec<PointCloud> = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let inputs: Vec<&PointCloud> = chunk.iter().map(|s| &s.input).collect();
        let out = model.reconstruct_batch(&PointCloud::batch_tensor(&inputs)?)?;
        outputs.extend(PointCloud::from_batch_tensor(&out, Source::Output)?);
    }

    let rows = outputs
        .par_iter()
        .zip(&data.samples)
        .enumerate()
        .map(|(i, (out, s))| {
            let cd = chamfer(out, &s.target)?;
            let emd = if emd_exact_ok {
                emd_exact(out, &s.target)?.cost
            } else {
                emd_approx(out, &s.target, DEFAULT_AUCTION_EPS)?.cost
            };
            Ok(EvalRow { sample_id: i, cd, emd })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_cd: rows.iter().map(|r| r.cd).sum::<f64>() / n,
        mean_emd: rows.iter().map(|r| r.emd).sum::<f64>() / n,
        rows,
        emd_exact: emd_exact_ok,
    })
}

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{evaluate, train, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{LossSpec, R2PModel};
use crate::pointcloud::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub spec: LossSpec,
    /// Median over seeds of the held-out mean CD.
    pub cd: f64,
    /// Median over seeds of the held-out mean EMD.
    pub emd: f64,
    /// `(seed, cd, emd)` for every run.
    pub runs: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,cd,emd` with the per-variant medians.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,cd,emd\n");
        for r in &self.rows {
            writeln!(s, "{},{:.10e},{:.10e}", r.variant, r.cd, r.emd).unwrap();
        }
        s
    }

    /// `variant,seed,cd,emd` for every individual run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,cd,emd\n");
        for r in &self.rows {
            for (seed, cd, emd) in &r.runs {
                writeln!(s, "{},{seed},{cd:.10e},{emd:.10e}", r.variant).unwrap();
            }
        }
        s
    }
}

/// Trains one model per (loss variant, seed) on `train_set`, all with the
/// same hyper-parameters apart from the loss, and scores each on `test_set`.
pub fn ablate_losses(
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::usage("ablation needs at least one seed"));
    }
    base.validate()?;
    let jobs: Vec<(usize, u64)> = (0..5).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let variants = LossSpec::variants();
    let results = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let cfg = TrainConfig {
                loss: variants[v].1.with_alpha(base.loss.alpha),
                seed,
                ..base.clone()
            };
            let mut model = R2PModel::new(cfg.model, seed)?;
            train(&mut model, train_set, &cfg)?;
            let r = evaluate(&model, test_set)?;
            Ok((v, seed, r.mean_cd, r.mean_emd))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = variants
        .iter()
        .enumerate()
        .map(|(v, (name, spec))| {
            let runs: Vec<(u64, f64, f64)> = results
                .iter()
                .filter(|r| r.0 == v)
                .map(|r| (r.1, r.2, r.3))
                .collect();
            AblationRow {
                variant: name,
                spec: spec.with_alpha(base.loss.alpha),
                cd: median(runs.iter().map(|r| r.1).collect()),
                emd: median(runs.iter().map(|r| r.2).collect()),
                runs,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

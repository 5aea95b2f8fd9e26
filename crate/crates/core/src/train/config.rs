use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{ChamferMode, EmdSolver};
use crate::model::{LossSpec, MetricOptions, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossSpec,
    pub seed: u64,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_interval: usize,
    /// Evaluate on the held-out set every this many epochs (0: never).
    pub eval_interval: usize,
    pub metrics: MetricOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            lr: 2e-4,
            loss: LossSpec::L1,
            seed: 0,
            model: ModelConfig::default(),
            checkpoint_interval: 10,
            eval_interval: 0,
            metrics: MetricOptions {
                chamfer: ChamferMode::Euclidean,
                emd: EmdSolver::Auto {
                    exact_max: 256,
                    eps: crate::metrics::DEFAULT_AUCTION_EPS,
                },
            },
        }
    }
}

fn emd_to_string(s: &EmdSolver) -> String {
    match s {
        EmdSolver::Exact => "exact".into(),
        EmdSolver::Auction { eps } => format!("auction:{eps:e}"),
        EmdSolver::Auto { exact_max, eps } => format!("auto:{exact_max}:{eps:e}"),
    }
}

fn parse_emd(s: &str) -> Result<EmdSolver> {
    let bad = || Error::usage(format!("bad emd solver {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        ["exact"] => Ok(EmdSolver::Exact),
        ["auction", eps] => Ok(EmdSolver::Auction { eps: num(eps)? }),
        ["auto", max, eps] => Ok(EmdSolver::Auto {
            exact_max: max.parse().map_err(|_| bad())?,
            eps: num(eps)?,
        }),
        _ => Err(bad()),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs % 2 != 0 {
            return Err(Error::usage(format!(
                "epochs must be even so the schedule splits in half, got {}",
                self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return Err(Error::usage(format!("alpha must be non-negative, got {}", self.loss.alpha)));
        }
        self.model.validate()
    }

    /// Plain `key=value` lines, one per setting.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("loss", self.loss.to_string());
        kv("alpha", self.loss.alpha.to_string());
        kv("seed", self.seed.to_string());
        kv("n", m.n.to_string());
        kv("m", m.m.to_string());
        kv("h1", m.h1.to_string());
        kv("h2", m.h2.to_string());
        kv("h3", m.h3.to_string());
        kv("h4", m.h4.to_string());
        kv("d1", m.d1.to_string());
        kv("d2", m.d2.to_string());
        kv("batchnorm", m.batchnorm.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        let cd = match self.metrics.chamfer {
            ChamferMode::Euclidean => "euclidean",
            ChamferMode::Squared => "squared",
        };
        kv("chamfer", cd.into());
        kv("emd_solver", emd_to_string(&self.metrics.emd));
        s
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and `#` comments are ignored.
    pub fn from_kv(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut alpha = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "epochs" => cfg.epochs = int()?,
                "batch_size" => cfg.batch_size = int()?,
                "lr" => cfg.lr = v.parse().map_err(|e| err(format!("lr: {e}")))?,
                "loss" => cfg.loss = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "alpha" => alpha = Some(v.parse::<f64>().map_err(|e| err(format!("alpha: {e}")))?),
                "seed" => cfg.seed = v.parse().map_err(|e| err(format!("seed: {e}")))?,
                "n" => cfg.model.n = int()?,
                "m" => cfg.model.m = int()?,
                "h1" => cfg.model.h1 = int()?,
                "h2" => cfg.model.h2 = int()?,
                "h3" => cfg.model.h3 = int()?,
                "h4" => cfg.model.h4 = int()?,
                "d1" => cfg.model.d1 = int()?,
                "d2" => cfg.model.d2 = int()?,
                "batchnorm" => cfg.model.batchnorm = v.parse().map_err(|e| err(format!("batchnorm: {e}")))?,
                "checkpoint_interval" => cfg.checkpoint_interval = int()?,
                "eval_interval" => cfg.eval_interval = int()?,
                "chamfer" => {
                    cfg.metrics.chamfer = match v {
                        "euclidean" => ChamferMode::Euclidean,
                        "squared" => ChamferMode::Squared,
                        _ => return Err(err(format!("unknown chamfer mode {v:?}"))),
                    }
                }
                "emd_solver" => cfg.metrics.emd = parse_emd(v).map_err(|e| err(e.to_string()))?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        if let Some(a) = alpha {
            cfg.loss.alpha = a;
        }
        Ok(cfg)
    }
}

/// Learning rate for `epoch`: constant over the first half, then linear decay
/// reaching exactly zero at the final epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::usage(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    let half = cfg.epochs / 2;
    if epoch < half {
        return Ok(cfg.lr);
    }
    let progress = (epoch - half + 1) as f64 / half as f64;
    Ok(cfg.lr * (1.0 - progress))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0).unwrap(), 2e-4);
        assert_eq!(lr_at(&cfg, 99).unwrap(), 2e-4);
        assert!((lr_at(&cfg, 149).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 199).unwrap(), 0.0);
        assert!(lr_at(&cfg, 200).is_err());
    }

    #[test]
    fn validate_rules() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.epochs = 3;
        assert!(cfg.validate().is_err());
        cfg.epochs = 0;
        cfg.validate().unwrap();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.loss = LossSpec::L5.with_alpha(0.3);
        cfg.seed = 42;
        cfg.model = ModelConfig::tiny(16, 32);
        cfg.model.batchnorm = false;
        cfg.metrics.emd = EmdSolver::Auction { eps: 1e-3 };
        cfg.metrics.chamfer = ChamferMode::Squared;
        let back = TrainConfig::from_kv(&cfg.to_kv(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kv_errors_carry_line_numbers() {
        let e = TrainConfig::from_kv("epochs=4\n\nbogus=1\n", Path::new("cfg.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(TrainConfig::from_kv("loss=l9", Path::new("c")).is_err());
    }
}

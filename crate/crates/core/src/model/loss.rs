//! Two-stage training loss `L = d1(P_m, P_gt) + alpha * d2(P_o, P_gt)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{chamfer_with_grad, emd_with_grad, ChamferMode, EmdSolver};
use crate::pointcloud::{Point, PointCloud};
use crate::tensor::{Graph, Var};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Cd,
    Emd,
    /// Unweighted sum of the two.
    CdEmd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cd => "cd",
            Metric::Emd => "emd",
            Metric::CdEmd => "cd+emd",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Metric::Cd => 0,
            Metric::Emd => 1,
            Metric::CdEmd => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Metric::Cd),
            1 => Some(Metric::Emd),
            2 => Some(Metric::CdEmd),
            _ => None,
        }
    }
}

/// Which metric plays `d1` (first block) and `d2` (second block), and the weight of `d2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub d1: Metric,
    pub d2: Metric,
    pub alpha: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::L1
    }
}

impl LossSpec {
    pub const L1: LossSpec = LossSpec::new(Metric::Cd, Metric::Cd);
    pub const L2: LossSpec = LossSpec::new(Metric::Emd, Metric::Emd);
    pub const L3: LossSpec = LossSpec::new(Metric::CdEmd, Metric::CdEmd);
    pub const L4: LossSpec = LossSpec::new(Metric::Cd, Metric::Emd);
    pub const L5: LossSpec = LossSpec::new(Metric::Emd, Metric::Cd);

    pub const fn new(d1: Metric, d2: Metric) -> Self {
        Self {
            d1,
            d2,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// The five named variants, in order.
    pub fn variants() -> [(&'static str, LossSpec); 5] {
        [
            ("l1", Self::L1),
            ("l2", Self::L2),
            ("l3", Self::L3),
            ("l4", Self::L4),
            ("l5", Self::L5),
        ]
    }

    /// `l1`..`l5` when the metric pair matches a named variant.
    pub fn variant_name(&self) -> Option<&'static str> {
        Self::variants()
            .into_iter()
            .find(|(_, v)| v.d1 == self.d1 && v.d2 == self.d2)
            .map(|(name, _)| name)
    }

    pub fn uses_emd(&self) -> bool {
        self.d1 != Metric::Cd || self.d2 != Metric::Cd
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Self::variants()
            .into_iter()
            .find(|(name, _)| *name == key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::usage(format!("unknown loss variant {s:?}, expected l1..l5")))
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant_name() {
            Some(name) => write!(f, "{name}"),
            None => write!(f, "{}/{}", self.d1.name(), self.d2.name()),
        }
    }
}

/// Solver choices shared by every metric evaluation in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    pub chamfer: ChamferMode,
    pub emd: EmdSolver,
}

pub fn metric_with_grad(metric: Metric, pred: &[Point], gt: &[Point], opts: &MetricOptions) -> Result<(f64, Vec<Point>)> {
    match metric {
        Metric::Cd => chamfer_with_grad(pred, gt, opts.chamfer),
        Metric::Emd => emd_with_grad(pred, gt, opts.emd),
        Metric::CdEmd => {
            let (c, mut g) = chamfer_with_grad(pred, gt, opts.chamfer)?;
            let (e, ge) = emd_with_grad(pred, gt, opts.emd)?;
            for (a, b) in g.iter_mut().zip(ge) {
                for k in 0..3 {
                    a[k] += b[k];
                }
            }
            Ok((c + e, g))
        }
    }
}

pub fn metric_value(metric: Metric, pred: &[Point], gt: &[Point], opts: &MetricOptions) -> Result<f64> {
    Ok(metric_with_grad(metric, pred, gt, opts)?.0)
}

/// Batch means of each term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub d1: f64,
    pub d2: f64,
}

struct Term {
    mean: f64,
    grad: Vec<f64>,
}

fn batch_term(metric: Metric, pred: &[PointCloud], gt: &[PointCloud], weight: f64, opts: &MetricOptions) -> Result<Term> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth clouds",
            pred.len(),
            gt.len()
        )));
    }
    let b = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.iter().map(|p| p.len() * 3).sum());
    for (p, t) in pred.iter().zip(gt) {
        let (v, g) = metric_with_grad(metric, p.points(), t.points(), opts)?;
        sum += v;
        grad.extend(g.iter().flatten().map(|x| x * weight / b));
    }
    Ok(Term { mean: sum / b, grad })
}

/// Loss value without gradients. Each argument holds one cloud per batch item.
pub fn loss(
    p_m: &[PointCloud],
    p_o: &[PointCloud],
    gt: &[PointCloud],
    spec: &LossSpec,
    opts: &MetricOptions,
) -> Result<LossBreakdown> {
    let d1 = batch_term(spec.d1, p_m, gt, 1.0, opts)?.mean;
    let d2 = batch_term(spec.d2, p_o, gt, spec.alpha, opts)?.mean;
    Ok(LossBreakdown {
        total: d1 + spec.alpha * d2,
        d1,
        d2,
    })
}

/// Adds the loss to `graph` as a scalar node whose backward pass feeds the
/// metric subgradients into `p_m` and `p_o` (both `[B,m,3]`).
pub fn attach_loss(
    graph: &mut Graph,
    p_m: Var,
    p_o: Var,
    gt: &[PointCloud],
    spec: &LossSpec,
    opts: &MetricOptions,
) -> Result<(Var, LossBreakdown)> {
    let source = crate::pointcloud::Source::Output;
    let pm = PointCloud::from_batch_tensor(graph.value(p_m), source)?;
    let po = PointCloud::from_batch_tensor(graph.value(p_o), source)?;
    let t1 = batch_term(spec.d1, &pm, gt, 1.0, opts)?;
    let t2 = batch_term(spec.d2, &po, gt, spec.alpha, opts)?;
    let breakdown = LossBreakdown {
        total: t1.mean + spec.alpha * t2.mean,
        d1: t1.mean,
        d2: t2.mean,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let a = graph.external_scalar(p_m, t1.mean, t1.grad)?;
    let b = graph.external_scalar(p_o, spec.alpha * t2.mean, t2.grad)?;
    let total = graph.add(a, b)?;
    Ok((total, breakdown))
}

//! Trajectory evaluation metrics: displacement errors and the diversity
//! diagnostic.
//!
//! The average displacement error is the *root of the mean squared distance*
//! over the prediction horizon, not the mean of distances; the two differ
//! whenever step errors vary, and the fixture `offsets (0,0),(0,2) -> sqrt 2`
//! pins the root-mean-square form. A mean-of-distances variant exists behind
//! [`AdeForm::MeanOfDistances`] for cross-paper comparisons and is not the
//! default.

use crate::geom::Point2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction horizon is empty")]
    EmptyHorizon,
    #[error("length mismatch: {0} predictions vs {1} ground-truth steps")]
    LengthMismatch(usize, usize),
    #[error("need at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdeForm {
    /// Root of the mean squared distance (the defining formula here).
    #[default]
    RootMeanSquare,
    /// Mean of per-step Euclidean distances, common elsewhere in the
    /// literature; clearly labeled non-default.
    MeanOfDistances,
}

/// Average displacement error over aligned future positions.
pub fn ade(pred: &[Point2], gt: &[Point2]) -> Result<f64, MetricsError> {
    ade_with_form(pred, gt, AdeForm::RootMeanSquare)
}

pub fn ade_with_form(pred: &[Point2], gt: &[Point2], form: AdeForm) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyHorizon);
    }
    let n = pred.len() as f64;
    match form {
        AdeForm::RootMeanSquare => {
            let sum_sq: f64 = pred
                .iter()
                .zip(gt)
                .map(|(p, g)| (p.x - g.x).powi(2) + (p.y - g.y).powi(2))
                .sum();
            Ok((sum_sq / n).sqrt())
        }
        AdeForm::MeanOfDistances => {
            let sum: f64 = pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).sum();
            Ok(sum / n)
        }
    }
}

/// Final displacement error: Euclidean distance at the last step.
pub fn fde(pred: &[Point2], gt: &[Point2]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    let (Some(p), Some(g)) = (pred.last(), gt.last()) else {
        return Err(MetricsError::EmptyHorizon);
    };
    Ok(p.distance(*g))
}

/// Best-of-K reduction for one agent: the minimum of a per-sample metric.
pub fn min_over_k(per_sample: &[f64]) -> Result<f64, MetricsError> {
    if per_sample.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    Ok(per_sample.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Maximum final distance between any pair of K sampled futures for one
/// agent; 0 by convention for a single sample.
pub fn mfd(final_positions: &[Point2]) -> Result<f64, MetricsError> {
    if final_positions.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut worst = 0.0f64;
    for i in 0..final_positions.len() {
        for j in i + 1..final_positions.len() {
            worst = worst.max(final_positions[i].distance(final_positions[j]));
        }
    }
    Ok(worst)
}

/// Per-agent metric rows plus the across-agent means reported as
/// minADE_K / minFDE_K / MFD_K.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub k: usize,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub mfd_k: f64,
    pub per_agent: Vec<AgentMetrics>,
}

#[derive(Debug, Clone)]
pub struct AgentMetrics {
    pub agent_id: u64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mfd: f64,
}

/// One agent's K sampled futures against its ground truth. Steps where the
/// ground truth is masked are excluded; an agent invalid at the final step is
/// excluded from FDE/MFD.
#[derive(Debug, Clone)]
pub struct AgentSamples {
    pub agent_id: u64,
    /// `samples[k][t]` predicted position.
    pub samples: Vec<Vec<Point2>>,
    /// `gt[t]` ground-truth position (aligned with samples).
    pub gt: Vec<Point2>,
    /// Validity of the ground truth per step.
    pub valid: Vec<bool>,
}

impl AgentSamples {
    fn masked(&self, seq: &[Point2]) -> Vec<Point2> {
        seq.iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&p, _)| p)
            .collect()
    }

    fn valid_at_final(&self) -> bool {
        self.valid.last().copied().unwrap_or(false)
    }
}

/// Computes minADE_K, minFDE_K (minimized independently per metric), and
/// MFD_K, averaged across agents.
pub fn evaluate_samples(agents: &[AgentSamples]) -> Result<MetricReport, MetricsError> {
    evaluate_samples_with_form(agents, AdeForm::RootMeanSquare)
}

/// [`evaluate_samples`] with a selectable ADE form.
pub fn evaluate_samples_with_form(
    agents: &[AgentSamples],
    form: AdeForm,
) -> Result<MetricReport, MetricsError> {
    let mut per_agent = Vec::new();
    let mut k_max = 0;
    for a in agents {
        if a.samples.is_empty() {
            return Err(MetricsError::NoSamples);
        }
        k_max = k_max.max(a.samples.len());
        let gt_masked = a.masked(&a.gt);
        if gt_masked.is_empty() {
            continue;
        }
        let ades: Result<Vec<f64>, _> = a
            .samples
            .iter()
            .map(|s| ade_with_form(&a.masked(s), &gt_masked, form))
            .collect();
        let min_ade = min_over_k(&ades?)?;

        let (min_fde, agent_mfd) = if a.valid_at_final() {
            let fdes: Result<Vec<f64>, _> = a
                .samples
                .iter()
                .map(|s| fde(&a.masked(s), &gt_masked))
                .collect();
            let finals: Vec<Point2> = a
                .samples
                .iter()
                .map(|s| *s.last().expect("non-empty sample"))
                .collect();
            (min_over_k(&fdes?)?, mfd(&finals)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        per_agent.push(AgentMetrics {
            agent_id: a.agent_id,
            min_ade,
            min_fde,
            mfd: agent_mfd,
        });
    }

    let mean_over = |f: &dyn Fn(&AgentMetrics) -> f64| {
        let vals: Vec<f64> = per_agent
            .iter()
            .map(|m| f(m))
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(MetricReport {
        k: k_max,
        min_ade_k: mean_over(&|m| m.min_ade),
        min_fde_k: mean_over(&|m| m.min_fde),
        mfd_k: mean_over(&|m| m.mfd),
        per_agent,
    })
}

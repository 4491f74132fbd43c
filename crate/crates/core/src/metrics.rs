//! AUC, logloss and per-split evaluation reports.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{EnvId, EnvironmentDataset, FeatureSchema};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{ModelState, Scope};

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores sharing their average rank.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += midrank * pos_in_tie as f64;
        i = j;
    }
    let n_pos = n_pos as f64;
    Ok((pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Mean binary cross-entropy of probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn logloss_metric(labels: &[bool], probs: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(math::PROB_EPS, 1.0 - math::PROB_EPS);
            math::bce(if y { 1.0 } else { 0.0 }, p)
        })
        .sum();
    total / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvMetrics {
    /// `None` when the environment has a single label class.
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (divisor `T - 1`) over environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub logloss_mean: f64,
    pub logloss_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_env: BTreeMap<EnvId, EnvMetrics>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

/// Mean and sample std; std is zero for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    (
        math::mean(values),
        libm::sqrt(math::sample_variance(values)),
    )
}

impl MetricsReport {
    /// Builds a report from per-environment metrics, computing aggregates.
    pub fn from_envs(per_env: BTreeMap<EnvId, EnvMetrics>, mut warnings: Vec<String>) -> Self {
        let aucs: Vec<f64> = per_env.values().filter_map(|m| m.auc).collect();
        let losses: Vec<f64> = per_env.values().map(|m| m.logloss).collect();
        for (t, m) in &per_env {
            if m.auc.is_none() {
                warnings.push(format!(
                    "environment {t}: single label class, AUC excluded from aggregate"
                ));
            }
        }
        let (auc_mean, auc_std) = if aucs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&aucs);
            (Some(m), Some(s))
        };
        let (logloss_mean, logloss_std) = mean_std(&losses);
        Self {
            per_env,
            aggregate: Aggregate {
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
            },
            warnings,
        }
    }
}

/// Scores of every instance of `env` under inference scope.
pub fn inference_scores(model: &ModelState, env: &EnvironmentDataset) -> Result<Vec<f64>> {
    env.instances
        .iter()
        .map(|i| model.logit(i, Scope::Inference))
        .collect()
}

/// Evaluates `model` on each environment using only invariant parameters.
pub fn evaluate_split(
    model: &ModelState,
    schema: &FeatureSchema,
    envs: &[EnvironmentDataset],
) -> Result<MetricsReport> {
    if model.schema() != schema {
        return Err(Error::SchemaMismatch);
    }
    if envs.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut per_env = BTreeMap::new();
    for env in envs {
        let logits = inference_scores(model, env)?;
        let labels: Vec<bool> = env.instances.iter().map(|i| i.label).collect();
        let probs: Vec<f64> = logits.iter().map(|&z| math::clipped_prob(z)).collect();
        let auc = match auc(&labels, &logits) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        per_env.insert(
            env.env_id,
            EnvMetrics {
                auc,
                logloss: logloss_metric(&labels, &probs),
                n: env.len(),
            },
        );
    }
    Ok(MetricsReport::from_envs(per_env, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::LN_2;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[true, false], &[0.1, 0.9]).unwrap(), 0.0);
        assert_eq!(auc(&[true, false, true, false], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[true, true], &[0.1, 0.2]), Err(Error::SingleClass));
        assert!(auc(&[true], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn logloss_examples() {
        assert!((logloss_metric(&[true], &[0.5]) - LN_2).abs() < 1e-15);
        assert!((logloss_metric(&[true, false], &[0.5, 0.5]) - LN_2).abs() < 1e-15);
        let near = logloss_metric(&[true], &[1.0 - 1e-7]);
        assert!((near - 1e-7).abs() < 1e-12);
        // probabilities outside the clip range are clamped
        assert_eq!(logloss_metric(&[true], &[1.0]), near);
    }

    #[test]
    fn aggregates() {
        let env = |auc, logloss| EnvMetrics { auc, logloss, n: 10 };
        let mut per_env = BTreeMap::new();
        per_env.insert(EnvId(7), env(Some(0.7), 0.5));
        per_env.insert(EnvId(8), env(Some(0.8), 0.6));
        let r = MetricsReport::from_envs(per_env.clone(), vec![]);
        assert!((r.aggregate.auc_mean.unwrap() - 0.75).abs() < 1e-15);
        assert!((r.aggregate.auc_std.unwrap() - 0.070_710_678_118_654_76).abs() < 1e-12);

        per_env.insert(EnvId(9), env(None, 0.7));
        let r = MetricsReport::from_envs(per_env, vec![]);
        assert_eq!(r.warnings.len(), 1);
        assert!((r.aggregate.logloss_mean - 0.6).abs() < 1e-15);

        let mut one = BTreeMap::new();
        one.insert(EnvId(0), env(Some(0.6), 0.4));
        let r = MetricsReport::from_envs(one, vec![]);
        assert_eq!(r.aggregate.auc_std, Some(0.0));
        assert_eq!(r.aggregate.logloss_std, 0.0);
    }
}

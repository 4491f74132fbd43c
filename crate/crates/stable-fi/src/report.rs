//! JSON renderings of evaluation reports, training histories and generator
//! ground truth.

use std::collections::BTreeMap;

use serde::Serialize;
use stable_fi_core::metrics::MetricsReport;
use stable_fi_core::synth::GroundTruth;
use stable_fi_core::trainer::TrainHistory;
use stable_fi_core::EnvId;

fn env_map<V: Copy>(m: &BTreeMap<EnvId, V>) -> BTreeMap<u32, V> {
    m.iter().map(|(t, v)| (t.0, *v)).collect()
}

#[derive(Debug, Serialize)]
pub struct EnvEntry {
    pub auc: Option<f64>,
    pub logloss: f64,
    pub n: usize,
}

#[derive(Debug, Serialize)]
pub struct AggregateEntry {
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub logloss_mean: f64,
    pub logloss_std: f64,
}

/// What `eval` ran: the split, how the dataset was cut, and the model.
#[derive(Debug, Clone, Serialize)]
pub struct EvalEcho {
    pub split: String,
    pub train_envs: usize,
    pub valid_envs: usize,
    pub test_envs: usize,
    pub model_kind: String,
    pub embed_dim: usize,
    pub schema_hash: String,
}

#[derive(Debug, Serialize)]
pub struct ReportFile {
    pub per_env: BTreeMap<u32, EnvEntry>,
    pub aggregate: AggregateEntry,
    pub model_hash: String,
    pub seed: u64,
    pub config: EvalEcho,
    pub warnings: Vec<String>,
}

impl ReportFile {
    pub fn new(report: &MetricsReport, model_hash: String, seed: u64, config: EvalEcho) -> Self {
        let a = &report.aggregate;
        Self {
            per_env: report
                .per_env
                .iter()
                .map(|(t, m)| {
                    (
                        t.0,
                        EnvEntry {
                            auc: m.auc,
                            logloss: m.logloss,
                            n: m.n,
                        },
                    )
                })
                .collect(),
            aggregate: AggregateEntry {
                auc_mean: a.auc_mean,
                auc_std: a.auc_std,
                logloss_mean: a.logloss_mean,
                logloss_std: a.logloss_std,
            },
            model_hash,
            seed,
            config,
            warnings: report.warnings.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail") + "\n"
    }
}

/// `AUC <mean> ± <std> | logloss <mean> ± <std>`; AUC shows `n/a` when every
/// environment was single-class.
pub fn summary_line(report: &MetricsReport) -> String {
    let a = &report.aggregate;
    let auc = match (a.auc_mean, a.auc_std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "n/a".to_string(),
    };
    format!(
        "AUC {auc} | logloss {:.4} ± {:.4}",
        a.logloss_mean, a.logloss_std
    )
}

#[derive(Debug, Serialize)]
struct RecordEntry {
    step: usize,
    valid_auc: Option<f64>,
    valid_logloss: f64,
    train_risks: BTreeMap<u32, f64>,
    risk_variance: f64,
    env_weights: BTreeMap<u32, f64>,
}

#[derive(Debug, Serialize)]
struct HistoryFile {
    seed: u64,
    best_step: Option<usize>,
    stop_reason: &'static str,
    records: Vec<RecordEntry>,
}

pub fn history_to_json(history: &TrainHistory) -> String {
    let file = HistoryFile {
        seed: history.seed,
        best_step: history.best_step,
        stop_reason: history.stop_reason.as_str(),
        records: history
            .records
            .iter()
            .map(|r| RecordEntry {
                step: r.step,
                valid_auc: r.valid_auc,
                valid_logloss: r.valid_logloss,
                train_risks: env_map(&r.train_risks.0),
                risk_variance: r.risk_variance,
                env_weights: env_map(&r.env_weights),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("history serialization cannot fail") + "\n"
}

#[derive(Debug, Serialize)]
struct PairEntry {
    field_a: usize,
    field_b: usize,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    kind: &'static str,
    /// Flip probabilities for sp, Bernoulli rates of `x'` for dc.
    p_t: &'a [f64],
    /// Causal strengths (dc only).
    beta_t: &'a [f64],
    stable_pairs: Vec<PairEntry>,
    seed: u64,
    base_fields: &'a [usize],
    embeddings: &'a [Vec<f64>],
}

pub fn truth_to_json(truth: &GroundTruth) -> String {
    let p_t = if truth.flip_probs.is_empty() {
        &truth.bern_probs
    } else {
        &truth.flip_probs
    };
    let file = TruthFile {
        kind: truth.kind.as_str(),
        p_t,
        beta_t: &truth.causal_strengths,
        stable_pairs: truth
            .stable_pairs
            .iter()
            .map(|p| PairEntry {
                field_a: p.field_a,
                field_b: p.field_b,
                weight: p.weight,
            })
            .collect(),
        seed: truth.seed,
        base_fields: &truth.base_fields,
        embeddings: &truth.embeddings,
    };
    serde_json::to_string(&file).expect("truth serialization cannot fail")
}

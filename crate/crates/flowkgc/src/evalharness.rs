//! Ranking evaluation: filtered tail ranking over candidate sets, MRR and
//! Hits@k metrics, k-shot sweeps with latent entropy, and training-log
//! inspection.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::Decoder;
use crate::diffcore::{ParamStore, Tape};
use crate::kgdata::{build_task, categorize_relation, KgError, KnowledgeGraph, RelationCategory};
use crate::model::{Episode, Model};
use crate::npflow::FlowError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error("no relation produced any query")]
    NoQueries,
}

/// Which tails compete against the truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePolicy {
    AllEntities,
    /// Explicit entity-id candidate list; the truth is ranked within it.
    ProvidedList(Vec<usize>),
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub num_queries: usize,
}

/// Optimistic filtered rank: 1 + number of surviving candidates scoring
/// strictly lower than the truth (lower score is better, ties favor the
/// truth).
pub fn rank_of_truth(
    scores: &[f64],
    truth: usize,
    filtered_out: &HashSet<usize>,
) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != truth && !filtered_out.contains(&i) && v < s)
        .count()
}

pub fn compute_metrics(ranks: &[usize]) -> Metrics {
    if ranks.is_empty() {
        return Metrics::default();
    }
    let n = ranks.len() as f64;
    Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        hits5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
        hits10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
        num_queries: ranks.len(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationReport {
    pub relation: String,
    pub category: RelationCategory,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_relation: Vec<RelationReport>,
    /// Query-weighted aggregate over all evaluated relations.
    pub aggregate: Metrics,
    /// Relations skipped for having no queries beyond the support.
    pub skipped: Vec<String>,
    /// Triple encodings performed across all tasks.
    pub encode_count: u64,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k: usize,
    /// Context negatives per support positive.
    pub n: usize,
    pub candidates: CandidatePolicy,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            n: 1,
            candidates: CandidatePolicy::AllEntities,
            seed: 0,
        }
    }
}

/// Deterministic latent for ranking: the prior mean pushed through the
/// flow, no sampling noise.
fn deterministic_latent(
    model: &Model,
    params: &ParamStore,
    mu: &[f64],
) -> Vec<f64> {
    model.flow.forward_f64(params, mu).0
}

/// Rank every query of one relation. Returns per-query ranks.
pub fn evaluate_relation(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    relation: usize,
    cfg: &EvalConfig,
) -> Result<Vec<usize>, EvalError> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ relation as u64);
    let task = build_task(kg, relation, cfg.k, cfg.n, 0, &mut rng)?;
    let tape = Tape::new();
    let ep = Episode::new(model, &tape, params, kg, cfg.seed ^ relation as u64);

    // context: K supports plus nK negatives, every one a counted encoding
    let mut context_points = Vec::with_capacity(task.context.len());
    let mut support_pairs = Vec::with_capacity(cfg.k);
    for &(h, t, y) in &task.context {
        let (hv, tv) = ep.encode_triple(h, t)?;
        if y == 1.0 && support_pairs.len() < cfg.k {
            support_pairs.push((hv, tv));
        }
        context_points.push((hv, tv, y));
    }
    let r_rep = ep.relation_from_support(params, &support_pairs)?;
    let agg = model.np.encode_context(&tape, params, &context_points)?;
    let (mu, _sigma) = model.np.base_distribution(&tape, params, agg)?;
    let z = deterministic_latent(model, params, &mu.data());
    let (zh, zt, dz) = model.decoder.latent_parts_f64(params, &z);
    let r_data = r_rep.data();

    let candidate_ids: Vec<usize> = match &cfg.candidates {
        CandidatePolicy::AllEntities => (0..kg.num_entities()).collect(),
        CandidatePolicy::ProvidedList(ids) => ids.clone(),
    };
    // entity representations are memoized, so this is one GNN pass per
    // distinct entity, not per candidate-query pair
    let cand_reps: Vec<Vec<f64>> = candidate_ids
        .iter()
        .map(|&c| Ok(ep.entity_rep(c)?.data()))
        .collect::<Result<_, EvalError>>()?;

    let mut ranks = Vec::with_capacity(task.target_pos.len());
    for &(h, t_true) in &task.target_pos {
        let (hv, _) = ep.encode_triple(h, t_true)?;
        let h_data = hv.data();
        let scores: Vec<f64> = cand_reps
            .iter()
            .map(|t_rep| Decoder::score_f64(&h_data, &r_data, t_rep, &zh, &zt, dz))
            .collect();
        let truth_pos = candidate_ids.iter().position(|&c| c == t_true);
        let Some(truth_pos) = truth_pos else {
            continue; // truth absent from a provided list: not rankable
        };
        // filter out every other known-true tail for (h, relation)
        let filtered: HashSet<usize> = candidate_ids
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c != t_true && kg.contains(h, relation, c))
            .map(|(i, _)| i)
            .collect();
        ranks.push(rank_of_truth(&scores, truth_pos, &filtered));
    }
    Ok(ranks)
}

/// Evaluate a set of relations and aggregate query-weighted metrics.
/// Relations without queries beyond the support are skipped and listed.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    relations: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    model.reset_encode_count();
    let mut per_relation = Vec::new();
    let mut skipped = Vec::new();
    let mut all_ranks = Vec::new();
    for &rel in relations {
        match evaluate_relation(model, params, kg, rel, cfg) {
            Ok(ranks) => {
                all_ranks.extend_from_slice(&ranks);
                per_relation.push(RelationReport {
                    relation: kg.relations[rel].clone(),
                    category: categorize_relation(kg, rel),
                    metrics: compute_metrics(&ranks),
                });
            }
            Err(EvalError::Kg(KgError::InsufficientData { relation, have, need })) => {
                eprintln!(
                    "warning: skipping relation {relation}: {have} triples, need more than {need}"
                );
                skipped.push(relation);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        aggregate: compute_metrics(&all_ranks),
        per_relation,
        skipped,
        encode_count: model.encode_count(),
    })
}

/// Latent entropy of the prior for one relation at support size k.
pub fn relation_entropy(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    relation: usize,
    k: usize,
    n: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ relation as u64);
    let task = build_task(kg, relation, k, n, 0, &mut rng)?;
    let tape = Tape::new();
    let ep = Episode::new(model, &tape, params, kg, seed ^ relation as u64);
    let mut context_points = Vec::with_capacity(task.context.len());
    for &(h, t, y) in &task.context {
        let (hv, tv) = ep.encode_triple(h, t)?;
        context_points.push((hv, tv, y));
    }
    let agg = model.np.encode_context(&tape, params, &context_points)?;
    let (mu, sigma) = model.np.base_distribution(&tape, params, agg)?;
    Ok(model.flow.latent_entropy(
        params,
        &mu.data(),
        &sigma.data(),
        mc_samples,
        &mut rng,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub metrics: Metrics,
    /// Mean latent entropy of the prior across evaluated relations.
    pub entropy: f64,
}

/// Evaluate the same relations at several support sizes, reporting metrics
/// and the mean prior entropy per k. TSV via [`sweep_tsv`].
pub fn kshot_sweep(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    relations: &[usize],
    ks: &[usize],
    n: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for &k in ks {
        let cfg = EvalConfig {
            k,
            n,
            candidates: CandidatePolicy::AllEntities,
            seed,
        };
        let report = evaluate(model, params, kg, relations, &cfg)?;
        let mut entropies = Vec::new();
        for &rel in relations {
            match relation_entropy(model, params, kg, rel, k, n, mc_samples, seed) {
                Ok(h) => entropies.push(h),
                Err(EvalError::Kg(KgError::InsufficientData { .. })) => {}
                Err(e) => return Err(e),
            }
        }
        if entropies.is_empty() {
            return Err(EvalError::NoQueries);
        }
        let entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
        rows.push(SweepRow {
            k,
            metrics: report.aggregate,
            entropy,
        });
    }
    Ok(rows)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k\tmrr\thits1\thits5\thits10\tentropy\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.k, r.metrics.mrr, r.metrics.hits1, r.metrics.hits5, r.metrics.hits10, r.entropy
        ));
    }
    out
}

/// Extract the per-epoch KL estimate from a key=value training log.
pub fn kl_trajectory(log_text: &str) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for line in log_text.lines() {
        let mut epoch = None;
        let mut kl = None;
        for field in line.split_whitespace() {
            if let Some((key, value)) = field.split_once('=') {
                match key {
                    "epoch" => epoch = value.parse::<usize>().ok(),
                    "kl" => kl = value.parse::<f64>().ok(),
                    _ => {}
                }
            }
        }
        if let (Some(e), Some(k)) = (epoch, kl) {
            out.push((e, k));
        }
    }
    out
}

//! Episode loss and the training loop.
//!
//! Each episode maximizes a margin-based ranking likelihood of the query
//! triples together with an evidence bound on the latent: the posterior is
//! conditioned on context plus labeled targets, the prior on context only,
//! and both share the same flow, so the flow log-determinants cancel in
//! the bound while still shaping the latent the decoder sees.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{AdamState, DiffError, ParamStore, Tape, Var};
use crate::evalharness::{evaluate, CandidatePolicy, EvalConfig, EvalError};
use crate::kgdata::{build_task, build_task_resampled, FewShotTask, KgError, KnowledgeGraph, TaskSplit};
use crate::model::{Episode, Model, ModelConfig};
use crate::npflow::{base_log_density, sample_base, FlowError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {found}, expected {CHECKPOINT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint was produced by a different configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no training relations in the split")]
    NoTrainRelations,
}

/// Direction of the hinge inside the ranking term. `Corrected` treats
/// lower decoder scores as better, penalizing positives that score above
/// negatives; `Literal` keeps the opposite orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossOrientation {
    Corrected,
    Literal,
}

impl std::str::FromStr for LossOrientation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "corrected" => Ok(LossOrientation::Corrected),
            "literal" => Ok(LossOrientation::Literal),
            other => Err(format!("unknown loss orientation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Support size per episode.
    pub k: usize,
    /// Smallest support size sampled during training; episode supports are
    /// drawn uniformly from k_min..=k so the latent uncertainty head sees
    /// contexts of every size it will face at evaluation time.
    pub k_min: usize,
    /// Context negatives per support positive.
    pub n: usize,
    /// Query negatives per query positive.
    pub query_neg_per_pos: usize,
    pub margin: f64,
    pub lr: f64,
    /// Latent samples averaged per episode.
    pub mc_samples: usize,
    /// Episodes per optimizer step.
    pub batch_tasks: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss_orientation: LossOrientation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            k: 5,
            k_min: 5,
            n: 1,
            query_neg_per_pos: 5,
            margin: 2.0,
            lr: 0.001,
            mc_samples: 1,
            batch_tasks: 4,
            episodes_per_epoch: 64,
            epochs: 200,
            patience: 40,
            seed: 0,
            loss_orientation: LossOrientation::Corrected,
        }
    }
}

/// Scalar report of one episode's loss pieces.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EpisodeTerms {
    /// Ranking log-likelihood (negated hinge sum); higher is better.
    pub ranking: f64,
    /// Base posterior log density of the latent sample.
    pub log_q0: f64,
    /// Base prior log density of the latent sample.
    pub log_p0: f64,
    /// Accumulated flow log-determinant; identical in prior and posterior,
    /// so it cancels in the bound.
    pub log_det: f64,
    /// Monte Carlo divergence estimate log q0 - log p0.
    pub kl: f64,
}

/// Negated hinge sum over matched (positive, negative) query pairs.
fn ranking_log_likelihood<'t>(
    pos_scores: &[Var<'t>],
    neg_scores: &[Var<'t>],
    query_neg_per_pos: usize,
    margin: f64,
    orientation: LossOrientation,
) -> Result<Var<'t>, DiffError> {
    assert_eq!(neg_scores.len(), pos_scores.len() * query_neg_per_pos);
    let mut total: Option<Var<'t>> = None;
    for (i, &sp) in pos_scores.iter().enumerate() {
        for &sn in &neg_scores[i * query_neg_per_pos..(i + 1) * query_neg_per_pos] {
            let hinge = match orientation {
                LossOrientation::Corrected => sp.sub(sn)?.add_scalar(margin).relu(),
                LossOrientation::Literal => sn.sub(sp)?.add_scalar(margin).relu(),
            };
            total = Some(match total {
                None => hinge,
                Some(t) => t.add(hinge)?,
            });
        }
    }
    Ok(total.expect("no query pairs").neg())
}

/// Build the loss for one task on the given tape. Returns the scalar to
/// minimize plus the reported terms (averaged over MC samples).
pub fn episode_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    task: &FewShotTask,
    cfg: &TrainConfig,
    episode_seed: u64,
) -> Result<(Var<'t>, EpisodeTerms), TrainError> {
    let ep = Episode::new(model, tape, params, kg, episode_seed);
    let mut rng = ChaCha12Rng::seed_from_u64(episode_seed ^ 0x9e3779b97f4a7c15);

    let mut context_points = Vec::with_capacity(task.context.len());
    let mut support_pairs = Vec::with_capacity(task.k);
    for &(h, t, y) in &task.context {
        let (hv, tv) = ep.encode_triple(h, t)?;
        if y == 1.0 && support_pairs.len() < task.k {
            support_pairs.push((hv, tv));
        }
        context_points.push((hv, tv, y));
    }
    let r_rep = ep.relation_from_support(params, &support_pairs)?;

    let mut pos_pairs = Vec::with_capacity(task.target_pos.len());
    let mut target_points = context_points.clone();
    for &(h, t) in &task.target_pos {
        let (hv, tv) = ep.encode_triple(h, t)?;
        pos_pairs.push((hv, tv));
        target_points.push((hv, tv, 1.0));
    }
    let mut neg_pairs = Vec::with_capacity(task.target_neg.len());
    for &(h, t) in &task.target_neg {
        let (hv, tv) = ep.encode_triple(h, t)?;
        neg_pairs.push((hv, tv));
        target_points.push((hv, tv, 0.0));
    }

    // prior from the context alone, posterior from context plus labeled
    // targets; the latent sample is drawn from the posterior
    let agg_c = model.np.encode_context(tape, params, &context_points)?;
    let (mu_c, sigma_c) = model.np.base_distribution(tape, params, agg_c)?;
    let agg_d = model.np.encode_context(tape, params, &target_points)?;
    let (mu_d, sigma_d) = model.np.base_distribution(tape, params, agg_d)?;

    let mut loss_acc: Option<Var<'t>> = None;
    let mut terms = EpisodeTerms::default();
    for _ in 0..cfg.mc_samples {
        let z0 = sample_base(tape, mu_d, sigma_d, &mut rng)?;
        let (z_t, log_det) = model.flow.forward(tape, params, z0)?;
        let log_q0 = base_log_density(z0, mu_d, sigma_d)?;
        let log_p0 = base_log_density(z0, mu_c, sigma_c)?;

        let mut pos_scores = Vec::with_capacity(pos_pairs.len());
        for &(hv, tv) in &pos_pairs {
            pos_scores.push(model.decoder.score(tape, params, hv, r_rep, tv, z_t)?);
        }
        let mut neg_scores = Vec::with_capacity(neg_pairs.len());
        for &(hv, tv) in &neg_pairs {
            neg_scores.push(model.decoder.score(tape, params, hv, r_rep, tv, z_t)?);
        }
        let ranking = ranking_log_likelihood(
            &pos_scores,
            &neg_scores,
            cfg.query_neg_per_pos,
            cfg.margin,
            cfg.loss_orientation,
        )?;

        // the flow log-determinant appears in both log q(z_T) and
        // log p(z_T) and cancels; the minimized bound is
        // -(ranking - log q0 + log p0)
        let sample_loss = ranking.sub(log_q0)?.add(log_p0)?.neg();
        loss_acc = Some(match loss_acc {
            None => sample_loss,
            Some(acc) => acc.add(sample_loss)?,
        });
        terms.ranking += ranking.scalar_value();
        terms.log_q0 += log_q0.scalar_value();
        terms.log_p0 += log_p0.scalar_value();
        terms.log_det += log_det.scalar_value();
    }
    let inv = 1.0 / cfg.mc_samples as f64;
    terms.ranking *= inv;
    terms.log_q0 *= inv;
    terms.log_p0 *= inv;
    terms.log_det *= inv;
    terms.kl = terms.log_q0 - terms.log_p0;
    Ok((loss_acc.expect("mc_samples > 0").mul_scalar(inv), terms))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val_mrr: f64,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let json = serde_json::to_string(ckpt)?;
    fs::write(path, json)?;
    Ok(())
}

/// Load and validate a checkpoint. When `expected` is given, the stored
/// configuration must match it exactly.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&TrainConfig>,
) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version { found: ckpt.version });
    }
    if let Some(cfg) = expected {
        if *cfg != ckpt.config {
            return Err(TrainError::ConfigMismatch);
        }
    }
    ckpt.params.rebuild_index();
    Ok(ckpt)
}

/// Rebuild the model around a loaded checkpoint. The architecture is
/// reconstructed from the stored config; every parameter must line up by
/// name and shape with the stored values.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(ParamStore, Model), TrainError> {
    let ent = ckpt
        .params
        .lookup("emb.entities")
        .ok_or(TrainError::ConfigMismatch)?;
    let rel = ckpt
        .params
        .lookup("emb.relations")
        .ok_or(TrainError::ConfigMismatch)?;
    let emb = crate::kgdata::EmbeddingTable {
        entities: ckpt.params.get(ent).value.clone(),
        relations: ckpt.params.get(rel).value.clone(),
        dim: ckpt.config.model.d,
    };
    let mut fresh = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(ckpt.config.seed);
    let model = Model::new(&mut fresh, ckpt.config.model.clone(), &emb, &mut rng);
    if fresh.len() != ckpt.params.len() {
        return Err(TrainError::ConfigMismatch);
    }
    for ((_, a), (_, b)) in fresh.iter().zip(ckpt.params.iter()) {
        if a.name != b.name || a.value.shape != b.value.shape {
            return Err(TrainError::ConfigMismatch);
        }
    }
    let mut params = ckpt.params.clone();
    params.rebuild_index();
    Ok((params, model))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub epochs_run: usize,
    pub best_val_mrr: f64,
    pub final_terms: EpisodeTerms,
}

/// Run the full training loop, writing one key=value line per epoch to
/// `log`. Keeps the parameters of the best validation epoch.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    kg: &KnowledgeGraph,
    split: &TaskSplit,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainResult, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::NoTrainRelations);
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    let mut final_terms = EpisodeTerms::default();

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut epoch_loss = 0.0;
        let mut epoch_terms = EpisodeTerms::default();
        let mut episodes = 0usize;
        let mut batch_pending = 0usize;
        params.zero_grads();

        for _ in 0..cfg.episodes_per_epoch {
            let &rel = split.train.choose(&mut rng).expect("non-empty train split");
            let k = rng.random_range(cfg.k_min.min(cfg.k)..=cfg.k);
            let task = match build_task_resampled(kg, rel, k, cfg.n, cfg.query_neg_per_pos, &mut rng)
            {
                Ok(t) => t,
                Err(KgError::InsufficientData { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let episode_seed = rng.random::<u64>();
            let tape = Tape::new();
            let (loss, terms) =
                episode_loss(model, &tape, params, kg, &task, cfg, episode_seed)?;
            let scaled = loss.mul_scalar(1.0 / cfg.batch_tasks as f64);
            tape.backward(scaled)?;
            tape.accumulate_param_grads(params);

            epoch_loss += loss.scalar_value();
            epoch_terms.ranking += terms.ranking;
            epoch_terms.log_q0 += terms.log_q0;
            epoch_terms.log_p0 += terms.log_p0;
            epoch_terms.log_det += terms.log_det;
            episodes += 1;
            batch_pending += 1;
            if batch_pending == cfg.batch_tasks {
                if model.cfg.freeze_embeddings {
                    params.get_mut(model.entity_emb).grad.iter_mut().for_each(|g| *g = 0.0);
                    params.get_mut(model.relation_emb).grad.iter_mut().for_each(|g| *g = 0.0);
                }
                adam.step(params);
                params.zero_grads();
                batch_pending = 0;
            }
        }
        if batch_pending > 0 {
            if model.cfg.freeze_embeddings {
                params.get_mut(model.entity_emb).grad.iter_mut().for_each(|g| *g = 0.0);
                params.get_mut(model.relation_emb).grad.iter_mut().for_each(|g| *g = 0.0);
            }
            adam.step(params);
            params.zero_grads();
        }
        let denom = episodes.max(1) as f64;
        epoch_terms.ranking /= denom;
        epoch_terms.log_q0 /= denom;
        epoch_terms.log_p0 /= denom;
        epoch_terms.log_det /= denom;
        epoch_terms.kl = epoch_terms.log_q0 - epoch_terms.log_p0;
        final_terms = epoch_terms;

        let eval_cfg = EvalConfig {
            k: cfg.k,
            n: cfg.n,
            candidates: CandidatePolicy::AllEntities,
            seed: cfg.seed,
        };
        let val = evaluate(model, params, kg, &split.valid, &eval_cfg)?;
        let val_mrr = val.aggregate.mrr;
        writeln!(
            log,
            "epoch={epoch} loss={} ranking={} logq={} logp={} logdet={} kl={} val_mrr={val_mrr}",
            epoch_loss / denom,
            epoch_terms.ranking,
            epoch_terms.log_q0,
            epoch_terms.log_p0,
            epoch_terms.log_det,
            epoch_terms.kl,
        )?;

        if val_mrr > best_val {
            best_val = val_mrr;
            best_params = Some(params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    // hand back the parameters that scored best on validation
    if let Some(best) = best_params {
        *params = best;
    }
    Ok(TrainResult {
        epochs_run,
        best_val_mrr: best_val,
        final_terms,
    })
}

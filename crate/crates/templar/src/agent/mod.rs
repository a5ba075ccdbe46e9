//! DQN training loop: epsilon-greedy acting, replay with prioritized
//! trajectories, bootstrap targets from a periodically synced frozen copy of
//! the network, and greedy evaluation.
//!
//! The loop is single-threaded and fully deterministic given (seed, game,
//! config); parallelism only appears inside value/gradient computations,
//! where results do not depend on scheduling.

mod replay;

pub use replay::{EmaTracker, ReplayBuffer, Trajectory, Transition};

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::TemplateAction;
use crate::autodiff::{AdamState, Gradients, Tape, Tensor};
use crate::rcmodel::{
    arg_indices, contextualize, embed_doc, embed_template, encoder_block, q_pairs, ModelConfig,
    PairIndices, RcModel, RcModelParams,
};
use crate::retrieval::{extend_observation, retrieve, HistoryBuffer};
use crate::text::{assemble_observation, EmbeddingTable, Lexicon, ObservationDoc, Vocab};
use crate::world::{self, GameSpec, WorldState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no valid actions to select from")]
    EmptyActionSet,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("scoring failed: {0}")]
    Score(#[from] crate::rcmodel::RcError),
}

/// TD-error norm used in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    Absolute,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub lr: f64,
    /// history retrieval window
    pub k: usize,
    pub recency_only: bool,
    pub total_updates: usize,
    pub batch_size: usize,
    pub target_sync: usize,
    pub capacity: usize,
    pub pri_frac: f64,
    pub ema_beta: f64,
    pub eval_episodes: usize,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.98,
            eps_start: 1.0,
            eps_end: 0.05,
            lr: 1e-4,
            k: 2,
            recency_only: false,
            total_updates: 20_000,
            batch_size: 32,
            target_sync: 100,
            capacity: 50_000,
            pri_frac: 0.5,
            ema_beta: 0.9,
            eval_episodes: 5,
            loss_kind: LossKind::Squared,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear anneal from `eps_start` at update 0 to `eps_end` at
    /// `total_updates`, then flat. Endpoints are exact.
    pub fn epsilon_at(&self, update: usize) -> f64 {
        if self.total_updates == 0 || update >= self.total_updates {
            return self.eps_end;
        }
        if update == 0 {
            return self.eps_start;
        }
        let frac = update as f64 / self.total_updates as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Epsilon-greedy choice over valid actions with their values. Greedy ties
/// break toward the earliest action in enumeration order.
pub fn select_action(
    actions: &[TemplateAction],
    values: &[f64],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<TemplateAction, AgentError> {
    if actions.is_empty() {
        return Err(AgentError::EmptyActionSet);
    }
    assert_eq!(actions.len(), values.len());
    if rng.gen::<f64>() < epsilon {
        return Ok(actions[rng.gen_range(0..actions.len())]);
    }
    Ok(actions[argmax_first(values)])
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// TD targets
// ---------------------------------------------------------------------------

/// Bootstrap values are constant within one sync period, so max-Q results
/// are memoized per (next_doc, next_valid) until the target network moves.
#[derive(Default)]
pub struct TargetCache {
    map: HashMap<(Arc<ObservationDoc>, Arc<Vec<TemplateAction>>), f64>,
}

impl TargetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// `r` for terminal transitions, otherwise `r + gamma * max_b Q(o', b)`
/// under the target network.
pub fn td_target(
    transition: &Transition,
    target: &RcModel,
    game: &GameSpec,
    embeds: &EmbeddingTable,
    vocab: &Vocab,
    gamma: f64,
    cache: &mut TargetCache,
) -> Result<f64, AgentError> {
    if transition.done || transition.next_valid.is_empty() {
        return Ok(transition.reward as f64);
    }
    let key = (
        Arc::clone(&transition.next_doc),
        Arc::clone(&transition.next_valid),
    );
    let max_q = match cache.map.get(&key) {
        Some(&v) => v,
        None => {
            let values = target.q_all(
                &transition.next_doc,
                &transition.next_valid,
                &game.templates,
                embeds,
                vocab,
            )?;
            let v = values[argmax_first(&values)];
            cache.map.insert(key, v);
            v
        }
    };
    Ok(transition.reward as f64 + gamma * max_q)
}

// ---------------------------------------------------------------------------
// Gradient step
// ---------------------------------------------------------------------------

/// Identical batch entries merged: same doc, action and target just scale
/// the loss weight, so shared forwards are computed once.
pub(crate) struct BatchEntry {
    pub(crate) action: TemplateAction,
    pub(crate) target: f64,
    pub(crate) weight: f64,
}

pub(crate) struct TemplateGroup {
    pub(crate) template: usize,
    pub(crate) entries: Vec<BatchEntry>,
}

pub(crate) struct DocGroup {
    pub(crate) doc: Arc<ObservationDoc>,
    pub(crate) templates: Vec<TemplateGroup>,
}

pub(crate) fn group_batch(batch: &[Arc<Transition>], targets: &[f64]) -> Vec<DocGroup> {
    let mut groups: Vec<DocGroup> = Vec::new();
    for (tx, &y) in batch.iter().zip(targets) {
        let doc_group = match groups
            .iter_mut()
            .find(|g| Arc::ptr_eq(&g.doc, &tx.doc) || g.doc == tx.doc)
        {
            Some(g) => g,
            None => {
                groups.push(DocGroup {
                    doc: Arc::clone(&tx.doc),
                    templates: Vec::new(),
                });
                groups.last_mut().unwrap()
            }
        };
        let tpl = tx.action.template.0;
        let tpl_group = match doc_group.templates.iter_mut().find(|t| t.template == tpl) {
            Some(t) => t,
            None => {
                doc_group.templates.push(TemplateGroup {
                    template: tpl,
                    entries: Vec::new(),
                });
                doc_group.templates.last_mut().unwrap()
            }
        };
        match tpl_group
            .entries
            .iter_mut()
            .find(|e| e.action == tx.action && e.target == y)
        {
            Some(e) => e.weight += 1.0,
            None => tpl_group.entries.push(BatchEntry {
                action: tx.action,
                target: y,
                weight: 1.0,
            }),
        }
    }
    groups
}

/// Loss and gradients for a grouped batch: mean over batch elements of the
/// per-element TD error (squared or absolute). Doc encodings and
/// verb-contextualized sequences are shared within groups.
pub(crate) fn batch_loss(
    params: &RcModelParams,
    groups: &[DocGroup],
    batch_size: usize,
    game: &GameSpec,
    embeds: &EmbeddingTable,
    vocab: &Vocab,
    loss_kind: LossKind,
) -> (f64, Gradients) {
    let inv_b = 1.0 / batch_size as f64;
    let config = params.config;

    let per_group = |group: &DocGroup| -> (f64, Gradients) {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let demb = tape.constant(embed_doc(&group.doc, embeds, vocab));
        let denc = encoder_block(&mut tape, &vars.enc_shared, demb);
        let mut total: Option<crate::autodiff::Var> = None;
        for tg in &group.templates {
            let vemb = tape.constant(embed_template(&game.templates[tg.template], embeds));
            let ctx = contextualize(&mut tape, &vars, &config, denc, vemb);
            let indices: Vec<PairIndices> = tg
                .entries
                .iter()
                .map(|e| {
                    (
                        arg_indices(&group.doc, e.action.arg0).expect("stored doc has spans"),
                        arg_indices(&group.doc, e.action.arg1).expect("stored doc has spans"),
                    )
                })
                .collect();
            let q = q_pairs(&mut tape, &vars, &config, ctx, &indices);
            let y = tape.constant(Tensor::from_vec(
                tg.entries.len(),
                1,
                tg.entries.iter().map(|e| e.target).collect(),
            ));
            let w = tape.constant(Tensor::from_vec(
                tg.entries.len(),
                1,
                tg.entries.iter().map(|e| e.weight).collect(),
            ));
            let d = tape.sub(q, y);
            let err = match loss_kind {
                LossKind::Squared => tape.mul(d, d),
                LossKind::Absolute => tape.abs(d),
            };
            let weighted = tape.mul(err, w);
            let s = tape.sum_all(weighted);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let total = total.expect("group has at least one template");
        let loss = tape.scale(total, inv_b);
        let grads = tape.backward(loss);
        (tape.value(loss).item(), grads)
    };

    let results: Vec<(f64, Gradients)> = if groups.len() > 1 {
        groups.par_iter().map(per_group).collect()
    } else {
        groups.iter().map(per_group).collect()
    };

    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in &results {
        loss += l;
        grads.merge_scaled(g, 1.0);
    }
    (loss, grads)
}

/// One optimization step: sample, compute targets, regress the predicted
/// values toward them, apply Adam. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut RcModelParams,
    adam: &mut AdamState,
    target: &RcModel,
    buffer: &ReplayBuffer,
    game: &GameSpec,
    embeds: &EmbeddingTable,
    vocab: &Vocab,
    cfg: &TrainConfig,
    cache: &mut TargetCache,
    rng: &mut impl Rng,
) -> Result<f64, AgentError> {
    let batch = buffer.sample(cfg.batch_size, cfg.pri_frac, rng)?;
    let mut targets = Vec::with_capacity(batch.len());
    for tx in &batch {
        targets.push(td_target(tx, target, game, embeds, vocab, cfg.gamma, cache)?);
    }
    let groups = group_batch(&batch, &targets);
    if std::env::var_os("TEMPLAR_STATS").is_some() {
        let toks: usize = groups.iter().map(|g| g.doc.len() * g.templates.len()).sum();
        let tpls: usize = groups.iter().map(|g| g.templates.len()).sum();
        eprintln!("STATS groups={} tplgroups={} toks={}", groups.len(), tpls, toks);
    }
    let (loss, grads) = batch_loss(
        params,
        &groups,
        batch.len(),
        game,
        embeds,
        vocab,
        cfg.loss_kind,
    );
    adam.step(params.tensors_mut(), &grads, cfg.lr);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

/// One metrics row per finished training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: usize,
    pub episode: usize,
    pub score: i64,
    pub epsilon: f64,
    pub loss_ema: f64,
    pub ema_score: f64,
    pub prioritized_count: usize,
}

pub const METRICS_HEADER: &str =
    "update,env_steps,episode,score,epsilon,loss_ema,ema_score,prioritized_count";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.episode,
            self.score,
            self.epsilon,
            self.loss_ema,
            self.ema_score,
            self.prioritized_count
        )
    }
}

pub struct TrainOutcome {
    pub params: RcModelParams,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: f64,
    pub env_steps: usize,
    pub episodes: usize,
}

const LOSS_EMA_DECAY: f64 = 0.99;

/// Per-episode environment cursor: current state, extended doc and valid
/// actions.
struct EpisodeCursor {
    state: WorldState,
    ext_doc: Arc<ObservationDoc>,
    valid: Arc<Vec<TemplateAction>>,
}

fn start_episode(
    game: &GameSpec,
    lexicon: &Lexicon,
    vocab: &mut Vocab,
    history: &mut HistoryBuffer,
    k: usize,
    recency_only: bool,
) -> EpisodeCursor {
    history.clear();
    let (state, obs) = world::reset(game);
    let cur_doc = assemble_observation(
        &obs.location_text,
        &obs.inventory_text,
        &obs.look_text,
        lexicon,
        vocab,
        0,
    );
    let retrieved = retrieve(history, &cur_doc.object_set(), k, recency_only);
    let ext_doc = extend_observation(&cur_doc, &retrieved);
    history.push(Arc::clone(&cur_doc));
    let valid = Arc::new(world::valid_actions(game, &state));
    EpisodeCursor {
        state,
        ext_doc,
        valid,
    }
}

/// Apply one action: step the engine, assemble and extend the next doc
/// (after retrieval over history including the current doc), and compute
/// the next valid set.
#[allow(clippy::type_complexity)]
fn advance(
    game: &GameSpec,
    lexicon: &Lexicon,
    vocab: &mut Vocab,
    history: &mut HistoryBuffer,
    cursor: &EpisodeCursor,
    action: &TemplateAction,
    k: usize,
    recency_only: bool,
) -> (EpisodeCursor, i64, bool) {
    let (next_state, obs, reward, done) =
        world::step(game, &cursor.state, action).expect("action came from the valid set");
    let next_doc = assemble_observation(
        &obs.location_text,
        &obs.inventory_text,
        &obs.look_text,
        lexicon,
        vocab,
        next_state.step_count,
    );
    let retrieved = retrieve(history, &next_doc.object_set(), k, recency_only);
    let next_ext = extend_observation(&next_doc, &retrieved);
    history.push(Arc::clone(&next_doc));
    let next_valid = Arc::new(world::valid_actions(game, &next_state));
    (
        EpisodeCursor {
            state: next_state,
            ext_doc: next_ext,
            valid: next_valid,
        },
        reward,
        done,
    )
}

/// Full training run. Deterministic for a fixed (game, config) pair.
pub fn run_training(
    game: &GameSpec,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    embeds: &EmbeddingTable,
) -> Result<TrainOutcome, AgentError> {
    let lexicon = game.lexicon();
    let mut vocab = Vocab::new();
    let mut params = RcModelParams::init(model_config, cfg.seed);
    let mut target = RcModel::new(params.clone());
    let mut adam = AdamState::new(
        &params
            .entries()
            .into_iter()
            .map(|(_, t)| t)
            .collect::<Vec<_>>(),
    );
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut buffer = ReplayBuffer::new(cfg.capacity);
    let mut cache = TargetCache::new();
    let mut ema = EmaTracker::new(cfg.ema_beta);
    let mut history = HistoryBuffer::new();
    let mut metrics = Vec::new();

    let mut cursor = start_episode(
        game,
        &lexicon,
        &mut vocab,
        &mut history,
        cfg.k,
        cfg.recency_only,
    );
    let mut trajectory = Trajectory::new(0, buffer.next_seq());
    let mut env_steps = 0usize;
    let mut episodes = 0usize;
    let mut loss_ema = 0.0f64;
    let mut saw_loss = false;

    for update in 0..cfg.total_updates {
        if update % cfg.target_sync == 0 {
            target = RcModel::new(params.clone());
            cache.clear();
        }
        let epsilon = cfg.epsilon_at(update);

        // act (values are only computed when exploiting)
        let action = if cursor.valid.is_empty() {
            None
        } else if rng.gen::<f64>() < epsilon {
            Some(cursor.valid[rng.gen_range(0..cursor.valid.len())])
        } else {
            let model = RcModel::new(params.clone());
            let values = model.q_all(
                &cursor.ext_doc,
                &cursor.valid,
                &game.templates,
                embeds,
                &vocab,
            )?;
            Some(cursor.valid[argmax_first(&values)])
        };
        let Some(action) = action else {
            // no live actions (malformed game): restart the episode
            cursor = start_episode(
                game,
                &lexicon,
                &mut vocab,
                &mut history,
                cfg.k,
                cfg.recency_only,
            );
            continue;
        };

        let (next_cursor, reward, done) = advance(
            game,
            &lexicon,
            &mut vocab,
            &mut history,
            &cursor,
            &action,
            cfg.k,
            cfg.recency_only,
        );
        env_steps += 1;
        buffer.push(Transition {
            doc: Arc::clone(&cursor.ext_doc),
            action,
            reward,
            next_doc: Arc::clone(&next_cursor.ext_doc),
            next_valid: Arc::clone(&next_cursor.valid),
            done,
            trajectory: trajectory.id,
        });
        trajectory.len += 1;
        trajectory.final_score += reward;

        // one optimization step per environment step
        let loss = train_step(
            &mut params, &mut adam, &target, &buffer, game, embeds, &vocab, cfg, &mut cache,
            &mut rng,
        )?;
        loss_ema = if saw_loss {
            LOSS_EMA_DECAY * loss_ema + (1.0 - LOSS_EMA_DECAY) * loss
        } else {
            saw_loss = true;
            loss
        };

        if done {
            let score = next_cursor.state.cumulative_score;
            debug_assert_eq!(score, trajectory.final_score);
            let prioritized = ema.finalize(score as f64);
            trajectory.prioritized = Some(prioritized);
            if prioritized {
                buffer.mark_prioritized(trajectory.first_seq, trajectory.len);
            }
            episodes += 1;
            metrics.push(MetricsRow {
                update: update + 1,
                env_steps,
                episode: episodes,
                score,
                epsilon,
                loss_ema,
                ema_score: ema.value().unwrap_or(0.0),
                prioritized_count: buffer.prioritized_len(),
            });
            cursor = start_episode(
                game,
                &lexicon,
                &mut vocab,
                &mut history,
                cfg.k,
                cfg.recency_only,
            );
            trajectory = Trajectory::new(trajectory.id + 1, buffer.next_seq());
        } else {
            cursor = next_cursor;
        }
    }

    let model = RcModel::new(params.clone());
    let final_eval = evaluate(
        &model,
        game,
        embeds,
        cfg.eval_episodes,
        cfg.k,
        cfg.recency_only,
    )?;
    Ok(TrainOutcome {
        params,
        metrics,
        final_eval,
        env_steps,
        episodes,
    })
}

/// Greedy evaluation (epsilon = 0), no learning, history retrieval active.
/// Returns the mean final score over `episodes`.
pub fn evaluate(
    model: &RcModel,
    game: &GameSpec,
    embeds: &EmbeddingTable,
    episodes: usize,
    k: usize,
    recency_only: bool,
) -> Result<f64, AgentError> {
    let lexicon = game.lexicon();
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut vocab = Vocab::new();
        let mut history = HistoryBuffer::new();
        let mut cursor = start_episode(game, &lexicon, &mut vocab, &mut history, k, recency_only);
        loop {
            if cursor.state.done || cursor.valid.is_empty() {
                break;
            }
            let values = model.q_all(
                &cursor.ext_doc,
                &cursor.valid,
                &game.templates,
                embeds,
                &vocab,
            )?;
            let action = cursor.valid[argmax_first(&values)];
            let (next, _, _) = advance(
                game,
                &lexicon,
                &mut vocab,
                &mut history,
                &cursor,
                &action,
                k,
                recency_only,
            );
            cursor = next;
        }
        total += cursor.state.cumulative_score as f64;
    }
    Ok(total / episodes.max(1) as f64)
}

#[cfg(test)]
mod tests;

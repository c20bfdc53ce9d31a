//! Offline training: the evaluator is fitted to logged clicks first, then the
//! actor is fitted by policy gradient against a frozen reward.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{generate, policy_gradient, ActorModel, Decode, Request};
use crate::data::InteractionRecord;
use crate::error::{contract, Error, Result};
use crate::evaluator::{gather_rows, metric_evaluate, EvaluatorModel};
use crate::net::ModelDims;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Lists sampled per request for the policy-gradient estimate.
    pub samples_per_request: usize,
    pub seed: u64,
    pub entropy_bonus: f64,
    /// Divide each request's advantages by the standard deviation of its
    /// sampled rewards.
    pub normalize_advantage: bool,
    /// Tail fraction of the actor's training records held out for the
    /// reward curve.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            samples_per_request: 8,
            seed: 42,
            entropy_bonus: 0.01,
            normalize_advantage: true,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Actor defaults; same as [`Default`].
    pub fn for_actor() -> Self {
        Self::default()
    }

    /// The click model is cheap per step but slow to converge, so it gets
    /// a larger step and many more epochs than the actor.
    pub fn for_evaluator() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} must be in [0, 1)", self.holdout_fraction));
        }
        if !self.entropy_bonus.is_finite() {
            return bad("entropy_bonus must be finite".into());
        }
        Ok(())
    }
}

/// Classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(like: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: like.zeros_like(),
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        let mut v = std::mem::take(&mut self.velocity);
        for (_, t) in v.iter_mut() {
            for x in t.data_mut() {
                *x *= self.momentum;
            }
        }
        v.add_scaled(grads, 1.0)?;
        params.add_scaled(&v, -self.learning_rate)?;
        self.velocity = v;
        Ok(())
    }
}

/// Loss (evaluator) or held-out reward (actor) before training and after
/// every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub initial: f64,
    pub epochs: Vec<f64>,
    /// Number of epochs behind the returned parameters; 0 means the
    /// initial ones.
    pub selected: usize,
}

impl Curve {
    pub fn last(&self) -> f64 {
        self.epochs.last().copied().unwrap_or(self.initial)
    }

    /// Curve value of the returned parameters.
    pub fn selected_value(&self) -> f64 {
        match self.selected {
            0 => self.initial,
            e => self.epochs[e - 1],
        }
    }
}

fn items_tensor(r: &InteractionRecord) -> Result<Tensor> {
    Tensor::from_rows(&r.items)
}

fn mean_bce(model: &EvaluatorModel, records: &[InteractionRecord]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        total += model.bce(&r.user, &items_tensor(r)?, &r.clicks)?;
        count += r.clicks.len();
    }
    Ok(total / count as f64)
}

/// Fits the click model by mini-batch momentum SGD on per-item binary
/// cross-entropy. Returns the model and the mean per-item loss curve.
pub fn train_evaluator(
    records: &[InteractionRecord],
    dims: ModelDims,
    list_len: usize,
    config: &TrainConfig,
) -> Result<(EvaluatorModel, Curve)> {
    config.validate()?;
    if records.is_empty() {
        return contract("cannot train an evaluator on an empty dataset");
    }
    for (i, r) in records.iter().enumerate() {
        if r.clicks.len() != r.items.len() || r.clicks.iter().any(|&c| c > 1) {
            return contract(format!("record {i} lacks binary click labels for every item"));
        }
    }
    let mut model = EvaluatorModel::init(dims, list_len, config.seed);
    let mut opt = Sgd::new(model.params(), config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let initial = mean_bce(&model, records)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut idx: Vec<usize> = (0..records.len()).collect();

    for _ in 0..config.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(config.batch_size) {
            let mut grads = model.params().zeros_like();
            let mut count = 0usize;
            for &i in batch {
                let r = &records[i];
                let (_, g) = model.bce_and_grad(&r.user, &items_tensor(r)?, &r.clicks)?;
                grads.add_scaled(&g, 1.0)?;
                count += r.clicks.len();
            }
            let mut scaled = grads.zeros_like();
            scaled.add_scaled(&grads, 1.0 / count as f64)?;
            opt.step(model.params_mut(), &scaled)?;
        }
        epochs.push(mean_bce(&model, records)?);
    }
    let selected = epochs.len();
    Ok((
        model,
        Curve {
            initial,
            epochs,
            selected,
        },
    ))
}

/// What the actor is trained (and LAST is served) against.
#[derive(Debug, Clone, Copy)]
pub enum Reward<'a> {
    /// NDCG@k against the record's logged clicks.
    Ndcg { k: usize },
    /// evaluator@n of the learned click model.
    Learned { evaluator: &'a EvaluatorModel, n: usize },
}

impl Reward<'_> {
    pub fn score(&self, record: &InteractionRecord, request: &Request, order: &[usize]) -> Result<f64> {
        match *self {
            Reward::Ndcg { k } => metric_evaluate(&record.clicks, order, k),
            Reward::Learned { evaluator, n } => {
                let items = gather_rows(request.candidates(), order)?;
                evaluator.evaluator_at_n(request.user(), &items, n.min(order.len()))
            }
        }
    }
}

fn mean_greedy_reward(
    actor: &ActorModel,
    records: &[InteractionRecord],
    list_len: usize,
    reward: &Reward<'_>,
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in records {
        let req = r.to_request(list_len)?;
        let l = actor.generate(&req, Decode::Greedy)?;
        total += reward.score(r, &req, &l.order)?;
    }
    Ok(total / records.len() as f64)
}

/// REINFORCE with a per-request mean baseline and an entropy bonus.
///
/// For each request `K` lists are sampled; list `k` gets advantage
/// `r_k − mean(r)`, divided by the rewards' standard deviation when
/// `normalize_advantage` is set, and the parameters ascend
/// `Σ_k A_k ∇log P(L_k) + β ∇Σ_t H_t`, averaged over the batch. The returned
/// curve holds the mean greedy reward on the held-out tail of `records`, and
/// the returned parameters are those of the best epoch on that tail.
pub fn train_actor(
    records: &[InteractionRecord],
    dims: ModelDims,
    list_len: usize,
    reward: Reward<'_>,
    config: &TrainConfig,
) -> Result<(ActorModel, Curve)> {
    let actor = ActorModel::init(dims, config.seed);
    train_actor_from(actor, records, list_len, reward, config)
}

/// As [`train_actor`], starting from given parameters.
pub fn train_actor_from(
    mut actor: ActorModel,
    records: &[InteractionRecord],
    list_len: usize,
    reward: Reward<'_>,
    config: &TrainConfig,
) -> Result<(ActorModel, Curve)> {
    config.validate()?;
    if config.samples_per_request < 2 {
        return contract("policy-gradient baseline needs at least 2 samples per request");
    }
    if records.is_empty() {
        return contract("cannot train an actor on an empty dataset");
    }
    let holdout = ((records.len() as f64) * config.holdout_fraction) as usize;
    let (train, held) = records.split_at(records.len() - holdout);
    let dims = *actor.dims();

    let mut opt = Sgd::new(actor.params(), config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xac70_5eed);
    let initial = mean_greedy_reward(&actor, held, list_len, &reward)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best_value = initial;
    let mut best = (0, actor.params().clone());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let k = config.samples_per_request;

    for _ in 0..config.epochs {
        idx.shuffle(&mut rng);
        for batch in idx.chunks(config.batch_size) {
            let mut grads = actor.params().zeros_like();
            for &i in batch {
                let r = &train[i];
                let req = r.to_request(list_len)?;
                let mut lists = Vec::with_capacity(k);
                let mut rewards = Vec::with_capacity(k);
                for _ in 0..k {
                    let l = generate(&dims, actor.params(), &req, Decode::Sample(&mut rng))?;
                    rewards.push(reward.score(r, &req, &l.order)?);
                    lists.push(l.order);
                }
                let baseline = rewards.iter().sum::<f64>() / k as f64;
                let scale = if config.normalize_advantage {
                    let var = rewards.iter().map(|r| (r - baseline).powi(2)).sum::<f64>() / k as f64;
                    1.0 / (var.sqrt() + 1e-8)
                } else {
                    1.0
                };
                for (order, &rw) in lists.iter().zip(&rewards) {
                    let adv = (rw - baseline) * scale;
                    if adv == 0.0 && config.entropy_bonus == 0.0 {
                        continue;
                    }
                    let g = policy_gradient(&dims, actor.params(), &req, order, adv, config.entropy_bonus)?;
                    grads.add_scaled(&g, 1.0)?;
                }
            }
            // ascent: hand the optimizer the negated mean gradient
            let mut descent = grads.zeros_like();
            descent.add_scaled(&grads, -1.0 / (batch.len() * k) as f64)?;
            opt.step(actor.params_mut(), &descent)?;
        }
        let value = mean_greedy_reward(&actor, held, list_len, &reward)?;
        epochs.push(value);
        // without a held-out tail there is nothing to select on
        if held.is_empty() || value > best_value {
            best_value = value;
            best = (epochs.len(), actor.params().clone());
        }
    }
    let (selected, params) = best;
    *actor.params_mut() = params;
    Ok((
        actor,
        Curve {
            initial,
            epochs,
            selected,
        },
    ))
}

/// Sampled REINFORCE estimate `mean_k (r_k − r̄) ∇log P(L_k)` for one
/// request, over all parameters.
pub fn reinforce_estimate<F>(
    actor: &ActorModel,
    request: &Request,
    samples: usize,
    rng: &mut dyn rand::RngCore,
    mut reward: F,
) -> Result<ParamSet>
where
    F: FnMut(&[usize]) -> f64,
{
    if samples < 2 {
        return contract("policy-gradient baseline needs at least 2 samples");
    }
    let dims = *actor.dims();
    let mut lists = Vec::with_capacity(samples);
    let mut rewards = Vec::with_capacity(samples);
    for _ in 0..samples {
        let l = generate(&dims, actor.params(), request, Decode::Sample(rng))?;
        rewards.push(reward(&l.order));
        lists.push(l.order);
    }
    let baseline = rewards.iter().sum::<f64>() / samples as f64;
    let mut grads = actor.params().zeros_like();
    for (order, &rw) in lists.iter().zip(&rewards) {
        let g = policy_gradient(&dims, actor.params(), request, order, rw - baseline, 0.0)?;
        grads.add_scaled(&g, 1.0 / samples as f64)?;
    }
    Ok(grads)
}

//! Learning at serving time.
//!
//! Every entry point here takes the deployed actor by shared reference. Any
//! parameter change is a request-local overlay that is dropped on return, so
//! the deployed parameters are bitwise identical before and after serving.
//!
//! * [`last_parallel`]: one gradient of `log P(greedy list)` over the
//!   adaptable subset, normalized to `α·|θ|/|g|`, tried at each step size; the
//!   evaluator's favourite list wins.
//! * [`last_cascade`]: an iterative predict / evaluate / update loop on a
//!   request-local copy of the adaptable subset.
//! * [`serve_greedy`] and [`serve_sampling`]: single-list and best-of-K
//!   baselines from the unmodified policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{generate, grad_log_prob, ActorModel, Decode, GeneratedList, Request};
use crate::error::{Error, Result};
use crate::tensor::{axpy_overlay, l2_norm, AdaptableMask};

/// Gradients with a smaller L2 norm skip the modification entirely.
pub const ZERO_GRAD_THRESHOLD: f64 = 1e-12;

pub const DEFAULT_STEP_SIZES: [f64; 7] = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];

/// Nested step-size ladder: the first `k` entries form the `k`-trial set.
/// Sizes 1, 3, 5, 7 give `{0}`, `{0,±1}`, `{0,±0.5,±1}`, `{0,±0.5,±1,±2}`.
pub const STEP_LADDER: [f64; 11] = [0.0, 1.0, -1.0, 0.5, -0.5, 2.0, -2.0, 0.25, -0.25, 4.0, -4.0];

pub fn nested_step_sizes(k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > STEP_LADDER.len() {
        return Err(Error::Config(format!(
            "step-set size {k} must be in 1..={}",
            STEP_LADDER.len()
        )));
    }
    Ok(STEP_LADDER[..k].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LastConfig {
    /// Normalization factor α: the modification has norm `α·|θ_masked|`
    /// before scaling by η.
    pub alpha: f64,
    pub step_sizes: Vec<f64>,
    pub mask: AdaptableMask,
    pub cascade_max_iters: usize,
    pub cascade_tol: f64,
    pub cascade_inner_lr: f64,
    pub cascade_samples: usize,
    pub seed: u64,
}

impl LastConfig {
    /// Defaults for `actor`: α = 0.01, seven symmetric step sizes, the
    /// step-scorer stack as the adaptable subset.
    pub fn for_actor(actor: &ActorModel) -> Self {
        Self {
            alpha: 0.01,
            step_sizes: DEFAULT_STEP_SIZES.to_vec(),
            mask: actor.default_mask(),
            cascade_max_iters: 2,
            cascade_tol: 0.0,
            cascade_inner_lr: 0.05,
            cascade_samples: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive and finite");
        }
        if self.step_sizes.is_empty() || !self.step_sizes.iter().all(|e| e.is_finite()) {
            return bad("step_sizes must be a non-empty list of finite values");
        }
        if !self.step_sizes.contains(&0.0) {
            return bad("step_sizes must contain 0");
        }
        if self.cascade_max_iters == 0 || self.cascade_samples == 0 {
            return bad("cascade_max_iters and cascade_samples must be at least 1");
        }
        if self.cascade_tol.is_nan() || self.cascade_tol < 0.0 {
            return bad("cascade_tol must be non-negative");
        }
        if !(self.cascade_inner_lr >= 0.0 && self.cascade_inner_lr.is_finite()) {
            return bad("cascade_inner_lr must be non-negative and finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub eta: f64,
    pub score: f64,
}

/// Outcome of serving one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedResult {
    pub list: GeneratedList,
    pub eta_star: f64,
    /// Evaluation of each step size tried (parallel LAST only).
    pub scores: Vec<StepScore>,
    /// Evaluation of the presented list.
    pub score: f64,
    /// Evaluation of the unmodified greedy list.
    pub base_score: f64,
    /// Cascade iterations run (0 for other policies).
    pub iterations_used: usize,
    /// Lists generated, including the initial greedy list.
    pub lists_generated: usize,
}

/// `α·(|θ|/|g|)·g` over the masked coordinates.
pub fn normalized_delta(theta_masked: &[f64], grad: &[f64], alpha: f64) -> Vec<f64> {
    let scale = alpha * l2_norm(theta_masked) / l2_norm(grad);
    grad.iter().map(|g| scale * g).collect()
}

/// η* among equal best scores: smallest |η|, then positive.
fn better_eta(candidate: StepScore, incumbent: StepScore) -> bool {
    if candidate.score != incumbent.score {
        return candidate.score > incumbent.score;
    }
    let (ca, ia) = (candidate.eta.abs(), incumbent.eta.abs());
    if ca != ia {
        return ca < ia;
    }
    candidate.eta > incumbent.eta
}

pub fn serve_greedy(actor: &ActorModel, request: &Request) -> Result<GeneratedList> {
    actor.generate(request, Decode::Greedy)
}

/// Parallel LAST for one request.
pub fn last_parallel<F>(
    actor: &ActorModel,
    request: &Request,
    mut evaluate: F,
    config: &LastConfig,
) -> Result<ServedResult>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    config.validate()?;
    let dims = actor.dims();
    let theta = actor.params();

    // run the prediction model
    let base = generate(dims, theta, request, Decode::Greedy)?;
    let base_score = evaluate(&base.order)?;
    let mut lists_generated = 1;

    // derivative of the list probability w.r.t. the adaptable subset
    let grad = grad_log_prob(dims, theta, request, &base.order, &config.mask)?;
    if l2_norm(&grad) < ZERO_GRAD_THRESHOLD {
        return Ok(ServedResult {
            list: base,
            eta_star: 0.0,
            scores: vec![StepScore {
                eta: 0.0,
                score: base_score,
            }],
            score: base_score,
            base_score,
            iterations_used: 0,
            lists_generated,
        });
    }

    // normalize the gradient
    let delta = normalized_delta(&config.mask.gather(theta)?, &grad, config.alpha);

    let mut scores = Vec::with_capacity(config.step_sizes.len());
    let mut best: Option<(StepScore, GeneratedList)> = None;
    for &eta in &config.step_sizes {
        let (list, score) = if eta == 0.0 {
            (base.clone(), base_score)
        } else {
            let view = axpy_overlay(theta, &config.mask, &delta, eta)?;
            let list = generate(dims, &view, request, Decode::Greedy)?;
            lists_generated += 1;
            let score = evaluate(&list.order)?;
            (list, score)
        };
        let s = StepScore { eta, score };
        scores.push(s);
        if best.as_ref().is_none_or(|(b, _)| better_eta(s, *b)) {
            best = Some((s, list));
        }
    }
    let (star, list) = best.expect("step_sizes is non-empty");
    Ok(ServedResult {
        list,
        eta_star: star.eta,
        scores,
        score: star.score,
        base_score,
        iterations_used: 0,
        lists_generated,
    })
}

/// Cascade LAST for one request.
///
/// Keeps a request-local shift of the adaptable subset. Each iteration
/// samples lists from the shifted actor, evaluates them, and moves the shift
/// along `Σ_k (E_k − mean E) ∇log P(L_k)`. The best list seen, including the
/// initial greedy one, is returned. Stops once an iteration improves the best
/// score by less than `cascade_tol`, or after `cascade_max_iters`.
pub fn last_cascade<F>(
    actor: &ActorModel,
    request: &Request,
    mut evaluate: F,
    config: &LastConfig,
) -> Result<ServedResult>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    config.validate()?;
    let dims = actor.dims();
    let theta = actor.params();
    let mut rng = ChaCha8Rng::seed_from_u64(request_seed(config.seed, request));

    let base = generate(dims, theta, request, Decode::Greedy)?;
    let base_score = evaluate(&base.order)?;
    let mut lists_generated = 1;
    let mut best = (base.clone(), base_score);
    let mut shift = vec![0.0; config.mask.masked_len()];
    let mut iterations_used = 0;

    for _ in 0..config.cascade_max_iters {
        iterations_used += 1;
        let view = axpy_overlay(theta, &config.mask, &shift, 1.0)?;
        let before = best.1;
        let mut sampled = Vec::with_capacity(config.cascade_samples);
        for _ in 0..config.cascade_samples {
            let list = generate(dims, &view, request, Decode::Sample(&mut rng))?;
            lists_generated += 1;
            let score = evaluate(&list.order)?;
            if score > best.1 {
                best = (list.clone(), score);
            }
            sampled.push((list, score));
        }
        let mean = sampled.iter().map(|(_, s)| s).sum::<f64>() / sampled.len() as f64;
        let mut step = vec![0.0; shift.len()];
        for (list, score) in &sampled {
            let adv = score - mean;
            if adv == 0.0 {
                continue;
            }
            let g = grad_log_prob(dims, &view, request, &list.order, &config.mask)?;
            for (s, gi) in step.iter_mut().zip(&g) {
                *s += adv * gi;
            }
        }
        for (s, d) in shift.iter_mut().zip(&step) {
            *s += config.cascade_inner_lr * d;
        }
        if best.1 - before < config.cascade_tol {
            break;
        }
    }
    Ok(ServedResult {
        list: best.0,
        eta_star: 0.0,
        scores: Vec::new(),
        score: best.1,
        base_score,
        iterations_used,
        lists_generated,
    })
}

/// Best-of-K from the unmodified policy: the greedy list plus `k − 1`
/// seeded samples, with the highest evaluation presented. Ties keep the
/// earlier list.
pub fn serve_sampling<F>(
    actor: &ActorModel,
    request: &Request,
    mut evaluate: F,
    k: usize,
    seed: u64,
) -> Result<ServedResult>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::Config("sampling budget must be at least 1".into()));
    }
    let base = serve_greedy(actor, request)?;
    let base_score = evaluate(&base.order)?;
    let mut best = (base, base_score);
    let mut rng = ChaCha8Rng::seed_from_u64(request_seed(seed, request));
    for _ in 1..k {
        let list = actor.generate(request, Decode::Sample(&mut rng))?;
        let score = evaluate(&list.order)?;
        if score > best.1 {
            best = (list, score);
        }
    }
    Ok(ServedResult {
        list: best.0,
        eta_star: 0.0,
        scores: Vec::new(),
        score: best.1,
        base_score,
        iterations_used: 0,
        lists_generated: k,
    })
}

/// Serving policies under one interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Greedy,
    Sampling,
    Last,
    Cascade,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Greedy, Policy::Sampling, Policy::Last, Policy::Cascade];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Greedy => "greedy",
            Policy::Sampling => "sampling",
            Policy::Last => "last",
            Policy::Cascade => "cascade",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" => Ok(Policy::Greedy),
            "sampling" => Ok(Policy::Sampling),
            "last" | "parallel" => Ok(Policy::Last),
            "cascade" => Ok(Policy::Cascade),
            other => Err(Error::Config(format!("unknown policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Serves `request` with `policy`. The sampling baseline uses
/// `|step_sizes|` lists so it matches parallel LAST's budget.
pub fn serve<F>(
    policy: Policy,
    actor: &ActorModel,
    request: &Request,
    mut evaluate: F,
    config: &LastConfig,
) -> Result<ServedResult>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    match policy {
        Policy::Greedy => {
            let list = serve_greedy(actor, request)?;
            let score = evaluate(&list.order)?;
            Ok(ServedResult {
                list,
                eta_star: 0.0,
                scores: Vec::new(),
                score,
                base_score: score,
                iterations_used: 0,
                lists_generated: 1,
            })
        }
        Policy::Sampling => serve_sampling(actor, request, evaluate, config.step_sizes.len(), config.seed),
        Policy::Last => last_parallel(actor, request, evaluate, config),
        Policy::Cascade => last_cascade(actor, request, evaluate, config),
    }
}

/// Per-request RNG seed: mixes `seed` with the request's feature bits, so a
/// request draws the same samples regardless of what was served before it.
pub fn request_seed(seed: u64, request: &Request) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    let mut feed = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(request.list_len() as u64);
    for v in request.user().iter().chain(request.candidates().data()) {
        feed(v.to_bits());
    }
    h
}

//! The generative list model.
//!
//! A list of `N` items is built one step at a time. At step `t` every
//! candidate not yet chosen is scored by a small head over
//! `[enc(user); enc(item); mean enc of chosen items; t/N]`, and a softmax over
//! the remaining candidates gives the selection probabilities. The list
//! probability is the product of the per-step probabilities of the chosen
//! items.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::net::{self, HeadNames, ModelDims};
use crate::tensor::{masked_softmax, AdaptableMask, ParamRead, ParamSet, Tensor};

pub const SCORER_HIDDEN_W: &str = "scorer.hidden.weight";
pub const SCORER_HIDDEN_B: &str = "scorer.hidden.bias";
pub const SCORER_OUT_W: &str = "scorer.out.weight";
pub const SCORER_OUT_B: &str = "scorer.out.bias";

pub(crate) const SCORER: HeadNames = HeadNames {
    hidden_w: SCORER_HIDDEN_W,
    hidden_b: SCORER_HIDDEN_B,
    out_w: SCORER_OUT_W,
    out_b: SCORER_OUT_B,
};

/// One serving unit: a user, `M` candidates and the list length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    user: Vec<f64>,
    candidates: Tensor,
    list_len: usize,
}

impl Request {
    pub fn new<R: AsRef<[f64]>>(user: Vec<f64>, candidates: &[R], list_len: usize) -> Result<Self> {
        if candidates.is_empty() {
            return contract("request has no candidates");
        }
        let candidates = Tensor::from_rows(candidates)?;
        Self::from_tensor(user, candidates, list_len)
    }

    pub fn from_tensor(user: Vec<f64>, candidates: Tensor, list_len: usize) -> Result<Self> {
        let (m, _) = candidates.dims2()?;
        if list_len == 0 || list_len > m {
            return contract(format!("list length {list_len} must be in 1..={m}"));
        }
        if !user.iter().all(|v| v.is_finite()) || !candidates.all_finite() {
            return contract("request features must be finite");
        }
        Ok(Self {
            user,
            candidates,
            list_len,
        })
    }

    pub fn user(&self) -> &[f64] {
        &self.user
    }

    pub fn candidates(&self) -> &Tensor {
        &self.candidates
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.shape()[0]
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        if self.user.len() != dims.user_dim || self.candidates.shape()[1] != dims.item_dim {
            return contract(format!(
                "request has user dim {} / item dim {}, model expects {} / {}",
                self.user.len(),
                self.candidates.shape()[1],
                dims.user_dim,
                dims.item_dim
            ));
        }
        Ok(())
    }
}

/// An ordered selection of candidate indices with the probability of each
/// choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedList {
    pub order: Vec<usize>,
    pub step_probs: Vec<f64>,
    pub log_prob: f64,
}

pub enum Decode<'r> {
    /// Highest-probability item each step; ties go to the lowest index.
    Greedy,
    Sample(&'r mut dyn RngCore),
}

/// Parameters of the actor together with their dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorModel {
    dims: ModelDims,
    params: ParamSet,
}

impl ActorModel {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self {
            dims,
            params: net::init_params(&dims, SCORER, seed),
        }
    }

    pub fn from_params(dims: ModelDims, params: ParamSet) -> Result<Self> {
        net::check_layout(&dims, SCORER, &params)?;
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The step-scorer stack, the part serving-time adaptation touches by
    /// default.
    pub fn default_mask(&self) -> AdaptableMask {
        AdaptableMask::new(
            &self.params,
            &[SCORER_HIDDEN_W, SCORER_HIDDEN_B, SCORER_OUT_W, SCORER_OUT_B],
        )
        .expect("scorer entries exist")
    }

    pub fn generate(&self, request: &Request, mode: Decode<'_>) -> Result<GeneratedList> {
        generate(&self.dims, &self.params, request, mode)
    }

    pub fn list_log_prob(&self, request: &Request, order: &[usize]) -> Result<(f64, Vec<f64>)> {
        list_log_prob(&self.dims, &self.params, request, order)
    }

    pub fn grad_log_prob(
        &self,
        request: &Request,
        order: &[usize],
        mask: &AdaptableMask,
    ) -> Result<Vec<f64>> {
        grad_log_prob(&self.dims, &self.params, request, order, mask)
    }
}

struct Step {
    remaining: Vec<usize>,
    probs: Vec<f64>,
    chosen: usize, // index into `remaining`
    chosen_so_far: Vec<usize>,
    head: net::HeadCache,
}

struct Rollout {
    enc: net::Encoded,
    steps: Vec<Step>,
}

enum Pick<'a, 'r> {
    Decode(Decode<'r>),
    Forced(&'a [usize]),
}

fn rollout<P: ParamRead + ?Sized>(
    dims: &ModelDims,
    params: &P,
    request: &Request,
    mut pick: Pick<'_, '_>,
) -> Result<Rollout> {
    request.check_dims(dims)?;
    let m = request.num_candidates();
    let n = request.list_len;
    let h = dims.hidden;
    let enc = net::encode(params, &request.user, &request.candidates)?;

    let mut available = vec![true; m];
    let mut chosen_so_far: Vec<usize> = Vec::with_capacity(n);
    let mut context_sum = vec![0.0; h];
    let mut steps = Vec::with_capacity(n);

    for t in 0..n {
        let remaining: Vec<usize> = (0..m).filter(|&j| available[j]).collect();
        let context: Vec<f64> = if chosen_so_far.is_empty() {
            vec![0.0; h]
        } else {
            let k = chosen_so_far.len() as f64;
            context_sum.iter().map(|v| v / k).collect()
        };
        let position = t as f64 / n as f64;
        let mut rows = Vec::with_capacity(remaining.len() * dims.head_input());
        for &j in &remaining {
            net::head_row(&mut rows, enc.user.data(), enc.items.row(j), &context, position);
        }
        let input = Tensor::new(vec![remaining.len(), dims.head_input()], rows)?;
        let (scores, head) = net::head_forward(params, SCORER, input)?;
        let probs = masked_softmax(&scores, &vec![true; scores.len()])?;

        let chosen = match &mut pick {
            Pick::Decode(Decode::Greedy) => {
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            }
            Pick::Decode(Decode::Sample(rng)) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            Pick::Forced(order) => {
                let want = order[t];
                match remaining.iter().position(|&j| j == want) {
                    Some(i) => i,
                    None => return contract(format!("order repeats index {want}")),
                }
            }
        };

        let item = remaining[chosen];
        steps.push(Step {
            remaining,
            probs,
            chosen,
            chosen_so_far: chosen_so_far.clone(),
            head,
        });
        available[item] = false;
        chosen_so_far.push(item);
        for (c, v) in context_sum.iter_mut().zip(enc.items.row(item)) {
            *c += v;
        }
    }
    Ok(Rollout { enc, steps })
}

fn to_list(rollout: &Rollout) -> GeneratedList {
    let order = rollout.steps.iter().map(|s| s.remaining[s.chosen]).collect();
    let step_probs: Vec<f64> = rollout.steps.iter().map(|s| s.probs[s.chosen]).collect();
    let log_prob = step_probs.iter().map(|p| p.ln()).sum();
    GeneratedList {
        order,
        step_probs,
        log_prob,
    }
}

fn check_order(request: &Request, order: &[usize]) -> Result<()> {
    if order.len() != request.list_len {
        return contract(format!(
            "order has {} entries, list length is {}",
            order.len(),
            request.list_len
        ));
    }
    let m = request.num_candidates();
    let mut seen = vec![false; m];
    for &j in order {
        if j >= m {
            return contract(format!("order index {j} out of range for {m} candidates"));
        }
        if std::mem::replace(&mut seen[j], true) {
            return contract(format!("order repeats index {j}"));
        }
    }
    Ok(())
}

pub fn generate<P: ParamRead + ?Sized>(
    dims: &ModelDims,
    params: &P,
    request: &Request,
    mode: Decode<'_>,
) -> Result<GeneratedList> {
    let r = rollout(dims, params, request, Pick::Decode(mode))?;
    Ok(to_list(&r))
}

/// Probability the actor assigns to producing exactly `order`, as
/// `(log_prob, step_probs)`.
pub fn list_log_prob<P: ParamRead + ?Sized>(
    dims: &ModelDims,
    params: &P,
    request: &Request,
    order: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_order(request, order)?;
    let r = rollout(dims, params, request, Pick::Forced(order))?;
    let l = to_list(&r);
    Ok((l.log_prob, l.step_probs))
}

/// Gradient over all parameters of
/// `logp_coef · log P(order) + entropy_coef · Σ_t H_t`, where `H_t` is the
/// entropy of the step-`t` selection distribution along `order`.
pub fn policy_gradient<P: ParamRead + ?Sized>(
    dims: &ModelDims,
    params: &P,
    request: &Request,
    order: &[usize],
    logp_coef: f64,
    entropy_coef: f64,
) -> Result<ParamSet> {
    check_order(request, order)?;
    let r = rollout(dims, params, request, Pick::Forced(order))?;
    let h = dims.hidden;
    let m = request.num_candidates();
    let mut grads = net::zero_params(dims, SCORER);
    let mut d_user = vec![0.0; h];
    let mut d_items = Tensor::zeros(vec![m, h]);

    for step in &r.steps {
        let entropy: f64 = -step
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        let d_scores: Vec<f64> = step
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let onehot = if i == step.chosen { 1.0 } else { 0.0 };
                let ent = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
                logp_coef * (onehot - p) + entropy_coef * ent
            })
            .collect();
        let d_input = net::head_backward(params, SCORER, &step.head, &d_scores, &mut grads)?;

        let k = step.chosen_so_far.len();
        for (row, &j) in step.remaining.iter().enumerate() {
            let d = d_input.row(row);
            for (a, b) in d_user.iter_mut().zip(&d[..h]) {
                *a += b;
            }
            let di = &mut d_items.data_mut()[j * h..(j + 1) * h];
            for (a, b) in di.iter_mut().zip(&d[h..2 * h]) {
                *a += b;
            }
            if k > 0 {
                let d_ctx = &d[2 * h..3 * h];
                for &s in &step.chosen_so_far {
                    let ds = &mut d_items.data_mut()[s * h..(s + 1) * h];
                    for (a, b) in ds.iter_mut().zip(d_ctx) {
                        *a += b / k as f64;
                    }
                }
            }
        }
    }
    net::encode_backward(
        params,
        &request.user,
        &request.candidates,
        &r.enc,
        &d_user,
        &d_items,
        &mut grads,
    )?;
    Ok(grads)
}

/// `∂ log P(order) / ∂θ` restricted to the masked coordinates.
///
/// The log-probability gradient is used rather than `∂P/∂θ`: the two differ
/// by the positive factor `P`, which normalization removes, and the log form
/// does not underflow on long lists.
pub fn grad_log_prob<P: ParamRead + ?Sized>(
    dims: &ModelDims,
    params: &P,
    request: &Request,
    order: &[usize],
    mask: &AdaptableMask,
) -> Result<Vec<f64>> {
    let g = policy_gradient(dims, params, request, order, 1.0, 0.0)?;
    mask.gather(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{axpy_overlay, l2_norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            user_dim: 3,
            item_dim: 4,
            hidden: 5,
        }
    }

    fn random_request(rng: &mut ChaCha8Rng, dims: &ModelDims, m: usize, n: usize) -> Request {
        let user = (0..dims.user_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dims.item_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        Request::new(user, &cands, n).unwrap()
    }

    fn zero_scorer(model: &mut ActorModel) {
        for name in [SCORER_HIDDEN_W, SCORER_HIDDEN_B, SCORER_OUT_W, SCORER_OUT_B] {
            for v in model.params_mut().get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }

    fn permutations(m: usize, n: usize) -> Vec<Vec<usize>> {
        fn rec(m: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for j in 0..m {
                if !cur.contains(&j) {
                    cur.push(j);
                    rec(m, n, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(m, n, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn single_candidate_list() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let req = random_request(&mut rng, &dims, 1, 1);
        let l = model.generate(&req, Decode::Greedy).unwrap();
        assert_eq!(l.order, vec![0]);
        assert_eq!(l.step_probs, vec![1.0]);
        assert_eq!(l.log_prob, 0.0);
        let g = model.grad_log_prob(&req, &[0], &AdaptableMask::all(model.params())).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scorer_is_uniform_over_remaining() {
        let dims = small_dims();
        let mut model = ActorModel::init(dims, 3);
        zero_scorer(&mut model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let req = random_request(&mut rng, &dims, 4, 2);
        let l = model.generate(&req, Decode::Greedy).unwrap();
        assert_eq!(l.step_probs, vec![0.25, 1.0 / 3.0]);
        assert_eq!(l.order, vec![0, 1]);
    }

    #[test]
    fn greedy_is_deterministic_and_self_consistent() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let req = random_request(&mut rng, &dims, 6, 4);
        let a = model.generate(&req, Decode::Greedy).unwrap();
        let b = model.generate(&req, Decode::Greedy).unwrap();
        assert_eq!(a, b);
        let (lp, sp) = model.list_log_prob(&req, &a.order).unwrap();
        assert!((lp - a.log_prob).abs() < 1e-12);
        assert_eq!(sp, a.step_probs);
        let direct: f64 = a.step_probs.iter().map(|p| p.ln()).sum();
        assert!((a.log_prob - direct).abs() < 1e-9);
    }

    #[test]
    fn greedy_picks_modal_item_each_step() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let req = random_request(&mut rng, &dims, 6, 4);
        let l = model.generate(&req, Decode::Greedy).unwrap();
        let r = rollout(&dims, model.params(), &req, Pick::Forced(&l.order)).unwrap();
        for s in &r.steps {
            let max = s.probs.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(s.probs[s.chosen], max);
        }
    }

    #[test]
    fn last_step_of_full_list_is_forced() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let req = random_request(&mut rng, &dims, 2, 2);
        for order in [[0, 1], [1, 0]] {
            let (_, sp) = model.list_log_prob(&req, &order).unwrap();
            assert_eq!(sp[1], 1.0);
        }
    }

    #[test]
    fn enumeration_sums_to_one() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (m, n) in [(4, 2), (5, 3), (3, 3), (5, 1)] {
            let model = ActorModel::init(dims, rng.gen());
            let req = random_request(&mut rng, &dims, m, n);
            let total: f64 = permutations(m, n)
                .iter()
                .map(|o| model.list_log_prob(&req, o).unwrap().0.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "M={m} N={n}: {total}");
        }
    }

    #[test]
    fn rejects_bad_orders_and_requests() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let req = random_request(&mut rng, &dims, 4, 2);
        assert!(model.list_log_prob(&req, &[1, 1]).is_err());
        assert!(model.list_log_prob(&req, &[0, 4]).is_err());
        assert!(model.list_log_prob(&req, &[0]).is_err());
        let cands = vec![vec![0.0; 4]; 2];
        assert!(Request::new(vec![0.0; 3], &cands, 3).is_err());
        assert!(Request::new(vec![f64::NAN, 0.0, 0.0], &cands, 1).is_err());
        let wrong_dims = Request::new(vec![0.0; 2], &cands, 1).unwrap();
        assert!(model.generate(&wrong_dims, Decode::Greedy).is_err());
    }

    #[test]
    fn grad_matches_finite_differences() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let model = ActorModel::init(dims, rng.gen());
            let req = random_request(&mut rng, &dims, 5, 3);
            let order = model.generate(&req, Decode::Sample(&mut rng)).unwrap().order;
            let mask = AdaptableMask::all(model.params());
            let g = model.grad_log_prob(&req, &order, &mask).unwrap();
            let flat = model.params().flatten();
            for _ in 0..20 {
                let k = rng.gen_range(0..flat.len());
                let mut plus = flat.clone();
                plus[k] += h;
                let mut minus = flat.clone();
                minus[k] -= h;
                let lp = list_log_prob(&dims, &model.params().unflatten(&plus).unwrap(), &req, &order).unwrap().0;
                let lm = list_log_prob(&dims, &model.params().unflatten(&minus).unwrap(), &req, &order).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let dims = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = ActorModel::init(dims, 77);
        let req = random_request(&mut rng, &dims, 5, 3);
        let order = vec![2, 0, 4];
        let entropy_sum = |p: &ParamSet| -> f64 {
            let r = rollout(&dims, p, &req, Pick::Forced(&order)).unwrap();
            r.steps
                .iter()
                .map(|s| -s.probs.iter().map(|q| q * q.ln()).sum::<f64>())
                .sum()
        };
        let g = policy_gradient(&dims, model.params(), &req, &order, 0.0, 1.0)
            .unwrap()
            .flatten();
        let flat = model.params().flatten();
        let h = 1e-5;
        for k in (0..flat.len()).step_by(17) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let fd = (entropy_sum(&model.params().unflatten(&plus).unwrap())
                - entropy_sum(&model.params().unflatten(&minus).unwrap()))
                / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-4, "coord {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn normalized_direction_same_for_p_and_logp_gradient() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let req = random_request(&mut rng, &dims, 6, 3);
        let l = model.generate(&req, Decode::Greedy).unwrap();
        let mask = model.default_mask();
        let g = model.grad_log_prob(&req, &l.order, &mask).unwrap();
        let p = l.log_prob.exp();
        let gp: Vec<f64> = g.iter().map(|v| p * v).collect();
        let (ng, ngp) = (l2_norm(&g), l2_norm(&gp));
        for (a, b) in g.iter().zip(&gp) {
            assert!((a / ng - b / ngp).abs() < 1e-9);
        }
    }

    #[test]
    fn overlay_generation_leaves_base_untouched() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 31);
        let before: Vec<u64> = model.params().flatten().iter().map(|v| v.to_bits()).collect();
        let mask = model.default_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let req = random_request(&mut rng, &dims, 6, 3);
        let delta: Vec<f64> = (0..mask.masked_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let view = axpy_overlay(model.params(), &mask, &delta, 0.7).unwrap();
        generate(&dims, &view, &req, Decode::Greedy).unwrap();
        let after: Vec<u64> = model.params().flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);

        let zero = axpy_overlay(model.params(), &mask, &delta, 0.0).unwrap();
        assert_eq!(
            generate(&dims, &zero, &req, Decode::Greedy).unwrap(),
            model.generate(&req, Decode::Greedy).unwrap()
        );
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let dims = small_dims();
        let model = ActorModel::init(dims, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let req = random_request(&mut rng, &dims, 7, 4);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            model.generate(&req, Decode::Sample(&mut r1)).unwrap(),
            model.generate(&req, Decode::Sample(&mut r2)).unwrap()
        );
    }
}

//! Synthetic interaction logs with order-dependent clicks, JSONL dataset IO,
//! and exhaustive search for small instances.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::Request;
use crate::error::{contract, io_err, Error, Result};
use crate::evaluator::sigmoid;

/// Largest instance [`brute_force_best_list`] will enumerate.
pub const MAX_ENUMERATION: u64 = 1_000_000;

const MIN_CLICK_PROB: f64 = 0.001;
const MAX_CLICK_PROB: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Width of user and item factors; features are the factors themselves.
    pub factor_dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    /// Per-position decay of click probability.
    pub rho: f64,
    /// Strength of the penalty for showing an item similar to an earlier one.
    pub lambda_sim: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            factor_dim: 8,
            n_users: 2000,
            n_items: 4000,
            rho: 0.95,
            lambda_sim: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor_dim == 0 || self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} must be in (0, 1]", self.rho)));
        }
        if !(self.lambda_sim.is_finite() && self.lambda_sim >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_sim {} must be finite and non-negative",
                self.lambda_sim
            )));
        }
        Ok(())
    }
}

/// Ground-truth user behaviour standing in for real feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
    pub rho: f64,
    pub lambda_sim: f64,
    pub seed: u64,
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..config.factor_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect()
    };
    let users = draw(config.n_users);
    let items = draw(config.n_items);
    Ok(WorldModel {
        users,
        items,
        rho: config.rho,
        lambda_sim: config.lambda_sim,
        seed,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Click probability at each position of an ordered list:
/// `sigmoid(⟨u, i_j⟩) · ρ^j · exp(−λ · max_{k<j} cos(i_j, i_k))`,
/// clamped to `[0.001, 0.999]`. The first slot has no similarity term.
pub fn click_model<R: AsRef<[f64]>>(world: &WorldModel, user: &[f64], items: &[R]) -> Vec<f64> {
    let mut out = Vec::with_capacity(items.len());
    for (j, item) in items.iter().enumerate() {
        let item = item.as_ref();
        let affinity = sigmoid(dot(user, item));
        let decay = world.rho.powi(j as i32);
        let penalty = if j == 0 {
            1.0
        } else {
            let max_sim = items[..j]
                .iter()
                .map(|prev| cosine(item, prev.as_ref()))
                .fold(f64::NEG_INFINITY, f64::max);
            (-world.lambda_sim * max_sim).exp()
        };
        out.push((affinity * decay * penalty).clamp(MIN_CLICK_PROB, MAX_CLICK_PROB));
    }
    out
}

/// One logged impression: a user, the list shown, and the clicks on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: Vec<f64>,
    pub items: Vec<Vec<f64>>,
    pub clicks: Vec<u8>,
}

impl InteractionRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.items.is_empty() {
            return Err("record has no items".into());
        }
        if self.items.len() != self.clicks.len() {
            return Err(format!(
                "{} items but {} click labels",
                self.items.len(),
                self.clicks.len()
            ));
        }
        if let Some(c) = self.clicks.iter().find(|&&c| c > 1) {
            return Err(format!("click label {c} is not binary"));
        }
        let width = self.items[0].len();
        if self.items.iter().any(|i| i.len() != width) {
            return Err("items have differing feature widths".into());
        }
        Ok(())
    }

    /// The logged list as a re-ranking request over its items.
    pub fn to_request(&self, list_len: usize) -> Result<Request> {
        Request::new(self.user.clone(), &self.items, list_len)
    }
}

/// Samples `n_records` impressions of `m` distinct items in random order,
/// with clicks drawn from [`click_model`].
pub fn generate_dataset(
    world: &WorldModel,
    n_records: usize,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if n == 0 || n > m {
        return Err(Error::Config(format!("need 1 <= N <= M, got N={n}, M={m}")));
    }
    if m > world.items.len() {
        return Err(Error::Config(format!(
            "M={m} exceeds the item pool of {}",
            world.items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<usize> = (0..world.items.len()).collect();
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let user = world.users[rng.gen_range(0..world.users.len())].clone();
        let items: Vec<Vec<f64>> = pool
            .choose_multiple(&mut rng, m)
            .map(|&i| world.items[i].clone())
            .collect();
        let probs = click_model(world, &user, &items);
        let clicks = probs.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
        records.push(InteractionRecord {
            user,
            items,
            clicks,
        });
    }
    Ok(records)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[InteractionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: InteractionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(parse_err)?;
        records.push(record);
    }
    Ok(records)
}

/// Number of ordered `n`-of-`m` arrangements, saturating.
pub fn arrangements(m: usize, n: usize) -> u64 {
    (0..n as u64).fold(1u64, |acc, i| acc.saturating_mul(m as u64 - i))
}

/// Exhaustive search over every ordered `N`-of-`M` list. Ties go to the
/// lexicographically smallest order.
pub fn brute_force_best_list<F>(request: &Request, mut evaluate: F) -> Result<(Vec<usize>, f64)>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let m = request.num_candidates();
    let n = request.list_len();
    let count = arrangements(m, n);
    if count > MAX_ENUMERATION {
        return contract(format!(
            "{count} arrangements of {n} from {m} exceed the enumeration limit {MAX_ENUMERATION}"
        ));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut order = Vec::with_capacity(n);
    let mut used = vec![false; m];
    enumerate(m, n, &mut order, &mut used, &mut |o| {
        let s = evaluate(o)?;
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((o.to_vec(), s));
        }
        Ok(())
    })?;
    Ok(best.expect("at least one arrangement"))
}

fn enumerate(
    m: usize,
    n: usize,
    order: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if order.len() == n {
        return visit(order);
    }
    for j in 0..m {
        if !used[j] {
            used[j] = true;
            order.push(j);
            enumerate(m, n, order, used, visit)?;
            order.pop();
            used[j] = false;
        }
    }
    Ok(())
}

//! Offline evaluation: every policy serves the same requests under the same
//! list budget, and the chosen lists are scored with the ranking metrics and
//! the learned evaluator.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::actor::{ActorModel, Request};
use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::evaluator::{gather_rows, map_at_k, ndcg_at_k, permute_labels, EvaluatorModel};
use crate::last::{nested_step_sizes, serve, LastConfig, Policy, ServedResult, DEFAULT_STEP_SIZES};
use crate::training::Reward;

/// Which evaluation function the multi-list policies maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    /// NDCG@N against logged labels.
    Ndcg,
    /// evaluator@N of the learned click model.
    Learned,
}

impl std::str::FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndcg" => Ok(RewardKind::Ndcg),
            "learned" => Ok(RewardKind::Learned),
            other => Err(Error::Config(format!("unknown reward `{other}`"))),
        }
    }
}

/// Shared setup for benchmark and sweep runs.
#[derive(Debug, Clone)]
pub struct BenchSetup<'a> {
    pub actor: &'a ActorModel,
    pub evaluator: &'a EvaluatorModel,
    pub records: &'a [InteractionRecord],
    pub list_len: usize,
    pub reward: RewardKind,
    pub last: LastConfig,
}

impl<'a> BenchSetup<'a> {
    pub fn new(
        actor: &'a ActorModel,
        evaluator: &'a EvaluatorModel,
        records: &'a [InteractionRecord],
        list_len: usize,
    ) -> Self {
        Self {
            actor,
            evaluator,
            records,
            list_len,
            reward: RewardKind::Learned,
            last: LastConfig::for_actor(actor),
        }
    }

    fn reward(&self) -> Reward<'a> {
        match self.reward {
            RewardKind::Ndcg => Reward::Ndcg { k: self.list_len },
            RewardKind::Learned => Reward::Learned {
                evaluator: self.evaluator,
                n: self.list_len,
            },
        }
    }

    /// Serves every record with `policy`, returning the per-request results.
    pub fn serve_all(&self, policy: Policy, config: &LastConfig) -> Result<Vec<ServedResult>> {
        let reward = self.reward();
        self.records
            .iter()
            .map(|r| {
                let req = r.to_request(self.list_len)?;
                serve(policy, self.actor, &req, |o| reward.score(r, &req, o), config)
            })
            .collect()
    }
}

/// Configuration giving every policy the same budget of `k` lists.
pub fn budget_config(base: &LastConfig, k: usize) -> Result<LastConfig> {
    if k == 0 {
        return Err(Error::Config("budget must be at least 1 list".into()));
    }
    let mut cfg = base.clone();
    cfg.step_sizes = if k == DEFAULT_STEP_SIZES.len() {
        DEFAULT_STEP_SIZES.to_vec()
    } else {
        nested_step_sizes(k)?
    };
    // cascade: greedy list + iters × samples
    let extra = k.saturating_sub(1).max(1);
    cfg.cascade_samples = (extra / 2).max(1);
    cfg.cascade_max_iters = (extra / cfg.cascade_samples).max(1);
    cfg.cascade_tol = 0.0;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub policy: Policy,
    pub map_at_5: f64,
    pub map_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub evaluator_at_5: f64,
    pub evaluator_at_10: f64,
    /// Total lists generated over all requests.
    pub lists_generated: usize,
    pub wall_time_s: f64,
    /// Two-sided sign-test p-value of LAST against this policy on the
    /// per-request serving score; `None` on LAST's own row.
    pub p_vs_last: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub budget: usize,
    pub rows: Vec<BenchmarkRow>,
    /// Per-request serving scores by policy, in row order.
    pub scores: Vec<Vec<f64>>,
}

impl BenchmarkReport {
    pub fn row(&self, policy: Policy) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn scores_of(&self, policy: Policy) -> Option<&[f64]> {
        let i = self.rows.iter().position(|r| r.policy == policy)?;
        Some(&self.scores[i])
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "policy",
        "map@5",
        "map@10",
        "ndcg@5",
        "ndcg@10",
        "evaluator@5",
        "evaluator@10",
        "lists_generated",
        "wall_time_s",
        "p_vs_last",
    ];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(Self::CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.policy.name().to_string(),
                format!("{:.6}", r.map_at_5),
                format!("{:.6}", r.map_at_10),
                format!("{:.6}", r.ndcg_at_5),
                format!("{:.6}", r.ndcg_at_10),
                format!("{:.6}", r.evaluator_at_5),
                format!("{:.6}", r.evaluator_at_10),
                r.lists_generated.to_string(),
                format!("{:.3}", r.wall_time_s),
                r.p_vs_last.map_or(String::new(), |p| format!("{p:.6e}")),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    /// Fixed-width table without timings, so output is reproducible.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12} {:>8} {:>10}\n",
            "policy", "map@5", "map@10", "ndcg@5", "ndcg@10", "evaluator@5", "evaluator@10", "lists", "p_vs_last"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12.4} {:>12.4} {:>8} {:>10}\n",
                r.policy.name(),
                r.map_at_5,
                r.map_at_10,
                r.ndcg_at_5,
                r.ndcg_at_10,
                r.evaluator_at_5,
                r.evaluator_at_10,
                r.lists_generated,
                r.p_vs_last.map_or("-".to_string(), |p| format!("{p:.2e}")),
            ));
        }
        s
    }
}

/// Result of a paired two-sided sign test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Exact two-sided sign test of `a` against `b`; ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::Contract("sign test needs paired samples".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if n == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).map_err(|e| Error::Contract(e.to_string()))?;
        (2.0 * dist.cdf(wins.min(losses) as u64)).min(1.0)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

fn eval_at(eval: &EvaluatorModel, req: &Request, order: &[usize], n: usize) -> Result<f64> {
    let items = gather_rows(req.candidates(), order)?;
    eval.evaluator_at_n(req.user(), &items, n.min(order.len()))
}

/// Runs every policy over the records with a budget of `budget` lists each.
pub fn run_benchmark(setup: &BenchSetup<'_>, policies: &[Policy], budget: usize) -> Result<BenchmarkReport> {
    let cfg = budget_config(&setup.last, budget)?;
    let mut rows = Vec::with_capacity(policies.len());
    let mut scores = Vec::with_capacity(policies.len());
    for &policy in policies {
        let start = Instant::now();
        let served = setup.serve_all(policy, &cfg)?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let n = served.len().max(1) as f64;
        let mut row = BenchmarkRow {
            policy,
            map_at_5: 0.0,
            map_at_10: 0.0,
            ndcg_at_5: 0.0,
            ndcg_at_10: 0.0,
            evaluator_at_5: 0.0,
            evaluator_at_10: 0.0,
            lists_generated: 0,
            wall_time_s,
            p_vs_last: None,
        };
        for (r, s) in setup.records.iter().zip(&served) {
            let req = r.to_request(setup.list_len)?;
            let labels = permute_labels(&r.clicks, &s.list.order)?;
            row.map_at_5 += map_at_k(&labels, 5) / n;
            row.map_at_10 += map_at_k(&labels, 10) / n;
            row.ndcg_at_5 += ndcg_at_k(&labels, 5) / n;
            row.ndcg_at_10 += ndcg_at_k(&labels, 10) / n;
            row.evaluator_at_5 += eval_at(setup.evaluator, &req, &s.list.order, 5)? / n;
            row.evaluator_at_10 += eval_at(setup.evaluator, &req, &s.list.order, 10)? / n;
            row.lists_generated += s.lists_generated;
        }
        rows.push(row);
        scores.push(served.iter().map(|s| s.score).collect::<Vec<_>>());
    }
    if let Some(li) = policies.iter().position(|&p| p == Policy::Last) {
        for i in 0..rows.len() {
            if i != li {
                rows[i].p_vs_last = Some(sign_test(&scores[li], &scores[i])?.p_value);
            }
        }
    }
    Ok(BenchmarkReport {
        budget,
        rows,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Size of the nested step-size set.
    Steps,
    Alpha,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(SweepParam::Steps),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::Config(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_score: f64,
    /// Per-request winning scores.
    pub scores: Vec<f64>,
}

/// Parallel LAST over a grid of step-set sizes or α values.
pub fn run_sweep(setup: &BenchSetup<'_>, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = setup.last.clone();
        match param {
            SweepParam::Steps => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("step-set size {value} must be a positive integer")));
                }
                cfg.step_sizes = nested_step_sizes(value as usize)?;
            }
            SweepParam::Alpha => cfg.alpha = value,
        }
        let served = setup.serve_all(Policy::Last, &cfg)?;
        let scores: Vec<f64> = served.iter().map(|s| s.score).collect();
        let mean_score = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        rows.push(SweepRow {
            value,
            mean_score,
            scores,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(param: SweepParam, rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let name = match param {
        SweepParam::Steps => "steps",
        SweepParam::Alpha => "alpha",
    };
    w.write_record([name, "mean_score"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.value.to_string(), format!("{:.6}", r.mean_score)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("csv: {e}")))
}

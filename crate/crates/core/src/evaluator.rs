//! List evaluation: exact ranking metrics over logged labels and a learned
//! per-item click model.

use crate::error::{contract, Result};
use crate::net::{self, HeadNames, ModelDims};
use crate::tensor::{AdaptableMask, ParamRead, ParamSet, Tensor};

pub const CLICK_HIDDEN_W: &str = "click.hidden.weight";
pub const CLICK_HIDDEN_B: &str = "click.hidden.bias";
pub const CLICK_OUT_W: &str = "click.out.weight";
pub const CLICK_OUT_B: &str = "click.out.bias";

const CLICK_HEAD: HeadNames = HeadNames {
    hidden_w: CLICK_HIDDEN_W,
    hidden_b: CLICK_HIDDEN_B,
    out_w: CLICK_OUT_W,
    out_b: CLICK_OUT_B,
};

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

fn dcg(labels: &[u8], k: usize) -> f64 {
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| f64::from(l) * discount(i))
        .sum()
}

/// NDCG@k with linear gain `rel / log2(i + 1)` (1-based `i`). Zero when the
/// list holds no relevant item.
pub fn ndcg_at_k(labels: &[u8], k: usize) -> f64 {
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(labels, k) / idcg
}

/// Truncated average precision: the sum of precision@i over relevant
/// positions `i ≤ k`, divided by `min(k, total relevant)`.
pub fn map_at_k(labels: &[u8], k: usize) -> f64 {
    let total = labels.iter().filter(|&&l| l > 0).count();
    if total == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in labels.iter().take(k).enumerate() {
        if l > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(total) as f64
}

/// Per-candidate labels arranged as the served list would show them: the
/// chosen `order` first, then the unchosen candidates in index order. The
/// tail only contributes to the total-relevant count.
pub fn permute_labels(labels: &[u8], order: &[usize]) -> Result<Vec<u8>> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::with_capacity(labels.len());
    for &j in order {
        match seen.get_mut(j) {
            Some(s) if !*s => *s = true,
            Some(_) => return contract(format!("order repeats index {j}")),
            None => return contract(format!("no label for candidate {j}")),
        }
        out.push(labels[j]);
    }
    out.extend(
        labels
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(&l, _)| l),
    );
    Ok(out)
}

/// NDCG@k of `order` under fixed per-candidate labels.
pub fn metric_evaluate(labels: &[u8], order: &[usize], k: usize) -> Result<f64> {
    Ok(ndcg_at_k(&permute_labels(labels, order)?, k))
}

/// Learned click-probability model over whole lists.
///
/// Each item's logit comes from a head over
/// `[enc(user); enc(item); mean item encoding of the list; position]`, so the
/// same item scores differently depending on its neighbours and its slot.
/// The position feature is `j / list_len`, with `list_len` fixed at
/// construction so logged lists longer than the served length stay on the
/// same scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorModel {
    dims: ModelDims,
    list_len: usize,
    params: ParamSet,
}

struct Forward {
    enc: net::Encoded,
    head: net::HeadCache,
    probs: Vec<f64>,
}

impl EvaluatorModel {
    pub fn init(dims: ModelDims, list_len: usize, seed: u64) -> Self {
        Self {
            dims,
            list_len: list_len.max(1),
            params: net::init_params(&dims, CLICK_HEAD, seed),
        }
    }

    pub fn from_params(dims: ModelDims, list_len: usize, params: ParamSet) -> Result<Self> {
        if list_len == 0 {
            return contract("evaluator list length must be positive");
        }
        net::check_layout(&dims, CLICK_HEAD, &params)?;
        Ok(Self {
            dims,
            list_len,
            params,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mask_all(&self) -> AdaptableMask {
        AdaptableMask::all(&self.params)
    }

    fn forward<P: ParamRead + ?Sized>(&self, params: &P, user: &[f64], items: &Tensor) -> Result<Forward> {
        let (len, item_dim) = items.dims2()?;
        if len == 0 {
            return contract("cannot evaluate an empty list");
        }
        if user.len() != self.dims.user_dim || item_dim != self.dims.item_dim {
            return contract(format!(
                "evaluator expects user dim {} / item dim {}, got {} / {item_dim}",
                self.dims.user_dim,
                self.dims.item_dim,
                user.len()
            ));
        }
        let h = self.dims.hidden;
        let enc = net::encode(params, user, items)?;
        let mut mean = vec![0.0; h];
        for j in 0..len {
            for (m, v) in mean.iter_mut().zip(enc.items.row(j)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= len as f64;
        }
        let mut rows = Vec::with_capacity(len * self.dims.head_input());
        for j in 0..len {
            let position = j as f64 / self.list_len as f64;
            net::head_row(&mut rows, enc.user.data(), enc.items.row(j), &mean, position);
        }
        let input = Tensor::new(vec![len, self.dims.head_input()], rows)?;
        let (logits, head) = net::head_forward(params, CLICK_HEAD, input)?;
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(Forward { enc, head, probs })
    }

    /// Click probability at each position of `items` (rows in list order).
    pub fn predict_click_probs(&self, user: &[f64], items: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&self.params, user, items)?.probs)
    }

    /// Mean predicted click probability over the first `n` positions.
    pub fn evaluator_at_n(&self, user: &[f64], items: &Tensor, n: usize) -> Result<f64> {
        let (len, _) = items.dims2()?;
        if n == 0 || n > len {
            return contract(format!("evaluator@{n} needs 1..={len} positions"));
        }
        let probs = self.predict_click_probs(user, items)?;
        Ok(mean_top(&probs, n))
    }

    /// Summed binary cross-entropy against `clicks` and its gradient.
    pub fn bce_and_grad(&self, user: &[f64], items: &Tensor, clicks: &[u8]) -> Result<(f64, ParamSet)> {
        let f = self.forward(&self.params, user, items)?;
        if clicks.len() != f.probs.len() {
            return contract("clicks and items differ in length");
        }
        let loss = bce(&f.probs, clicks);
        let d_logits: Vec<f64> = f
            .probs
            .iter()
            .zip(clicks)
            .map(|(&p, &y)| p - f64::from(y))
            .collect();

        let h = self.dims.hidden;
        let len = clicks.len();
        let mut grads = net::zero_params(&self.dims, CLICK_HEAD);
        let d_input = net::head_backward(&self.params, CLICK_HEAD, &f.head, &d_logits, &mut grads)?;
        let mut d_user = vec![0.0; h];
        let mut d_items = Tensor::zeros(vec![len, h]);
        let mut d_mean = vec![0.0; h];
        for j in 0..len {
            let d = d_input.row(j);
            for (a, b) in d_user.iter_mut().zip(&d[..h]) {
                *a += b;
            }
            for (a, b) in d_items.data_mut()[j * h..(j + 1) * h].iter_mut().zip(&d[h..2 * h]) {
                *a += b;
            }
            for (a, b) in d_mean.iter_mut().zip(&d[2 * h..3 * h]) {
                *a += b;
            }
        }
        for j in 0..len {
            for (a, b) in d_items.data_mut()[j * h..(j + 1) * h].iter_mut().zip(&d_mean) {
                *a += b / len as f64;
            }
        }
        net::encode_backward(&self.params, user, items, &f.enc, &d_user, &d_items, &mut grads)?;
        Ok((loss, grads))
    }

    /// Summed binary cross-entropy without the gradient.
    pub fn bce(&self, user: &[f64], items: &Tensor, clicks: &[u8]) -> Result<f64> {
        let probs = self.predict_click_probs(user, items)?;
        if clicks.len() != probs.len() {
            return contract("clicks and items differ in length");
        }
        Ok(bce(&probs, clicks))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce(probs: &[f64], clicks: &[u8]) -> f64 {
    const EPS: f64 = 1e-12;
    probs
        .iter()
        .zip(clicks)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y > 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

pub(crate) fn mean_top(probs: &[f64], n: usize) -> f64 {
    probs[..n].iter().sum::<f64>() / n as f64
}

/// Rows of `candidates` picked out in `order`.
pub fn gather_rows(candidates: &Tensor, order: &[usize]) -> Result<Tensor> {
    let (m, _) = candidates.dims2()?;
    let mut rows = Vec::with_capacity(order.len());
    for &j in order {
        if j >= m {
            return contract(format!("order index {j} out of range for {m} candidates"));
        }
        rows.push(candidates.row(j));
    }
    Tensor::from_rows(&rows)
}

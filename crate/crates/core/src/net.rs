//! Building blocks shared by the actor and the learned evaluator: a user tower,
//! an item tower, and a two-layer scoring head over
//! `[user enc; item enc; context enc; position]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{
    affine_backward, affine_forward, tanh_backward, tanh_forward, ParamRead, ParamSet, Tensor,
};

pub const USER_ENC_W: &str = "user_enc.weight";
pub const USER_ENC_B: &str = "user_enc.bias";
pub const ITEM_ENC_W: &str = "item_enc.weight";
pub const ITEM_ENC_B: &str = "item_enc.bias";

/// Feature and hidden widths of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub user_dim: usize,
    pub item_dim: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            user_dim: 8,
            item_dim: 8,
            hidden: 32,
        }
    }
}

impl ModelDims {
    /// Width of a head input row: user, item, context encodings plus position.
    pub fn head_input(&self) -> usize {
        3 * self.hidden + 1
    }
}

/// Names of the four tensors making up a scoring head.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadNames {
    pub hidden_w: &'static str,
    pub hidden_b: &'static str,
    pub out_w: &'static str,
    pub out_b: &'static str,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-s..s)).collect())
        .expect("shape product matches")
}

fn layout(dims: &ModelDims, head: HeadNames) -> Vec<(&'static str, Vec<usize>, usize)> {
    let h = dims.hidden;
    // (name, shape, fan_in); fan_in 0 marks a bias
    vec![
        (USER_ENC_W, vec![dims.user_dim, h], dims.user_dim),
        (USER_ENC_B, vec![h], 0),
        (ITEM_ENC_W, vec![dims.item_dim, h], dims.item_dim),
        (ITEM_ENC_B, vec![h], 0),
        (head.hidden_w, vec![dims.head_input(), h], dims.head_input()),
        (head.hidden_b, vec![h], 0),
        (head.out_w, vec![h, 1], h),
        (head.out_b, vec![1], 0),
    ]
}

/// All-zero parameter set with the model layout.
pub(crate) fn zero_params(dims: &ModelDims, head: HeadNames) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape, _) in layout(dims, head) {
        p.insert(name, Tensor::zeros(shape));
    }
    p
}

/// Fresh parameters for encoders plus one head; weights uniform in
/// `±1/sqrt(fan_in)`, biases zero.
pub(crate) fn init_params(dims: &ModelDims, head: HeadNames, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, shape, fan_in) in layout(dims, head) {
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            uniform(&mut rng, shape, fan_in)
        };
        p.insert(name, t);
    }
    p
}

/// Checks that `params` has exactly the layout `init_params` would produce.
pub(crate) fn check_layout(dims: &ModelDims, head: HeadNames, params: &ParamSet) -> Result<()> {
    let expected = zero_params(dims, head);
    if expected.len() != params.len() {
        return contract(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        ));
    }
    for ((en, et), (gn, gt)) in expected.iter().zip(params.iter()) {
        if en != gn || et.shape() != gt.shape() {
            return contract(format!(
                "parameter `{gn}` {:?} does not match expected `{en}` {:?}",
                gt.shape(),
                et.shape()
            ));
        }
    }
    Ok(())
}

pub(crate) struct Encoded {
    pub user: Tensor,  // [1, H]
    pub items: Tensor, // [M, H]
}

pub(crate) fn encode<P: ParamRead + ?Sized>(
    params: &P,
    user: &[f64],
    items: &Tensor,
) -> Result<Encoded> {
    let u = Tensor::new(vec![1, user.len()], user.to_vec())?;
    let user = tanh_forward(&affine_forward(&u, params.param(USER_ENC_W)?, params.param(USER_ENC_B)?)?);
    let items = tanh_forward(&affine_forward(
        items,
        params.param(ITEM_ENC_W)?,
        params.param(ITEM_ENC_B)?,
    )?);
    Ok(Encoded { user, items })
}

/// Accumulates encoder parameter gradients into `grads` given upstream
/// gradients on the (activated) encodings.
pub(crate) fn encode_backward<P: ParamRead + ?Sized>(
    params: &P,
    user: &[f64],
    items: &Tensor,
    enc: &Encoded,
    d_user: &[f64],
    d_items: &Tensor,
    grads: &mut ParamSet,
) -> Result<()> {
    let u = Tensor::new(vec![1, user.len()], user.to_vec())?;
    let dz = tanh_backward(&Tensor::new(vec![1, d_user.len()], d_user.to_vec())?, &enc.user)?;
    let g = affine_backward(&dz, &u, params.param(USER_ENC_W)?)?;
    accumulate(grads, USER_ENC_W, &g.weight)?;
    accumulate(grads, USER_ENC_B, &g.bias)?;

    let dz = tanh_backward(d_items, &enc.items)?;
    let g = affine_backward(&dz, items, params.param(ITEM_ENC_W)?)?;
    accumulate(grads, ITEM_ENC_W, &g.weight)?;
    accumulate(grads, ITEM_ENC_B, &g.bias)?;
    Ok(())
}

pub(crate) fn accumulate(grads: &mut ParamSet, name: &str, g: &Tensor) -> Result<()> {
    let t = grads
        .get_mut(name)
        .ok_or_else(|| crate::Error::UnknownParam(name.to_string()))?;
    if t.len() != g.len() {
        return contract(format!("gradient for `{name}` has wrong size"));
    }
    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    Ok(())
}

/// Row `[user; item; context; position]` for the head.
pub(crate) fn head_row(out: &mut Vec<f64>, user: &[f64], item: &[f64], context: &[f64], position: f64) {
    out.extend_from_slice(user);
    out.extend_from_slice(item);
    out.extend_from_slice(context);
    out.push(position);
}

pub(crate) struct HeadCache {
    pub input: Tensor,  // [B, 3H+1]
    pub hidden: Tensor, // [B, H], activated
}

pub(crate) fn head_forward<P: ParamRead + ?Sized>(
    params: &P,
    names: HeadNames,
    input: Tensor,
) -> Result<(Vec<f64>, HeadCache)> {
    let hidden = tanh_forward(&affine_forward(
        &input,
        params.param(names.hidden_w)?,
        params.param(names.hidden_b)?,
    )?);
    let out = affine_forward(&hidden, params.param(names.out_w)?, params.param(names.out_b)?)?;
    Ok((out.into_data(), HeadCache { input, hidden }))
}

/// Backward through the head; accumulates head gradients and returns the
/// gradient on the input rows.
pub(crate) fn head_backward<P: ParamRead + ?Sized>(
    params: &P,
    names: HeadNames,
    cache: &HeadCache,
    d_scores: &[f64],
    grads: &mut ParamSet,
) -> Result<Tensor> {
    let d_out = Tensor::new(vec![d_scores.len(), 1], d_scores.to_vec())?;
    let g_out = affine_backward(&d_out, &cache.hidden, params.param(names.out_w)?)?;
    accumulate(grads, names.out_w, &g_out.weight)?;
    accumulate(grads, names.out_b, &g_out.bias)?;
    let dz = tanh_backward(&g_out.input, &cache.hidden)?;
    let g_hid = affine_backward(&dz, &cache.input, params.param(names.hidden_w)?)?;
    accumulate(grads, names.hidden_w, &g_hid.weight)?;
    accumulate(grads, names.hidden_b, &g_hid.bias)?;
    Ok(g_hid.input)
}

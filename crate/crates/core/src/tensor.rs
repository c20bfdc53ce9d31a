//! Dense tensors, named parameter sets and the handful of layer primitives the
//! actor and evaluator networks are built from.
//!
//! Every layer has an explicit backward function; there is no tape. The
//! networks are fixed and small, so each model wires its own reverse pass out
//! of [`affine_backward`] and [`tanh_backward`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a `[rows, cols]` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return contract(format!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => contract(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[b,o] = Σ_i input[b,i]·weight[i,o] + bias[o]`.
pub fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, in_dim) = input.dims2()?;
    let (w_in, out_dim) = weight.dims2()?;
    if w_in != in_dim || bias.shape() != [out_dim] {
        return contract(format!(
            "affine shapes do not conform: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let mut out = Vec::with_capacity(batch * out_dim);
    for b in 0..batch {
        let x = input.row(b);
        let mut acc = bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w_row = &weight.data()[i * out_dim..(i + 1) * out_dim];
            for (a, &w) in acc.iter_mut().zip(w_row) {
                *a += xi * w;
            }
        }
        out.extend_from_slice(&acc);
    }
    Tensor::new(vec![batch, out_dim], out)
}

/// Partials of an affine map with respect to its three operands.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn affine_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<AffineGrads> {
    let (batch, in_dim) = input.dims2()?;
    let (w_in, out_dim) = weight.dims2()?;
    if w_in != in_dim || grad_out.shape() != [batch, out_dim] {
        return contract(format!(
            "affine backward shapes do not conform: grad_out {:?}, input {:?}, weight {:?}",
            grad_out.shape(),
            input.shape(),
            weight.shape()
        ));
    }
    let mut g_in = vec![0.0; batch * in_dim];
    let mut g_w = vec![0.0; in_dim * out_dim];
    let mut g_b = vec![0.0; out_dim];
    for b in 0..batch {
        let go = grad_out.row(b);
        let x = input.row(b);
        for (gb, &g) in g_b.iter_mut().zip(go) {
            *gb += g;
        }
        for i in 0..in_dim {
            let w_row = &weight.data()[i * out_dim..(i + 1) * out_dim];
            g_in[b * in_dim + i] = w_row.iter().zip(go).map(|(w, g)| w * g).sum();
            let xi = x[i];
            if xi != 0.0 {
                for (gw, &g) in g_w[i * out_dim..(i + 1) * out_dim].iter_mut().zip(go) {
                    *gw += xi * g;
                }
            }
        }
    }
    Ok(AffineGrads {
        input: Tensor::new(vec![batch, in_dim], g_in)?,
        weight: Tensor::new(vec![in_dim, out_dim], g_w)?,
        bias: Tensor::vector(g_b),
    })
}

pub fn tanh_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.tanh()).collect(),
    }
}

/// Backward through `tanh` given the *activated* output.
pub fn tanh_backward(grad_out: &Tensor, activated: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != activated.shape() {
        return contract("tanh backward shape mismatch");
    }
    Ok(Tensor {
        shape: grad_out.shape.clone(),
        data: grad_out
            .data
            .iter()
            .zip(&activated.data)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect(),
    })
}

/// Softmax over the entries where `mask` is true; masked-out entries are
/// exactly zero. Uses max-subtraction so large scores stay finite.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return contract("masked_softmax: scores and mask differ in length");
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return contract("masked_softmax: mask selects no entries");
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Read access to named parameters, shared by owned sets and overlays.
pub trait ParamRead {
    fn param(&self, name: &str) -> Result<&Tensor>;
}

/// Ordered name → tensor map. Iteration order is insertion order, which
/// fixes the layout of flattened vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flat_len(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this set's layout from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.flat_len() {
            return contract(format!(
                "unflatten: expected {} values, got {}",
                self.flat_len(),
                flat.len()
            ));
        }
        let mut offset = 0;
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for (k, t) in &self.entries {
            let n = t.len();
            entries.insert(
                k.clone(),
                Tensor::new(t.shape.clone(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(Self { entries })
    }

    /// `self += scale * other`, entry by entry. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return contract("add_scaled: parameter sets differ in layout");
        }
        for ((ka, a), (kb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if ka != kb || a.shape != b.shape {
                return contract(format!("add_scaled: `{ka}` does not match `{kb}`"));
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

impl ParamRead for ParamSet {
    fn param(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

/// The subset of a [`ParamSet`] that serving-time adaptation may touch.
///
/// Names are kept in the parameter set's own order so masked vectors have a
/// fixed layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptableMask {
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl AdaptableMask {
    pub fn new<S: AsRef<str>>(params: &ParamSet, names: &[S]) -> Result<Self> {
        for n in names {
            if params.get(n.as_ref()).is_none() {
                return Err(Error::UnknownParam(n.as_ref().to_string()));
            }
        }
        let mut out = Self {
            names: Vec::new(),
            sizes: Vec::new(),
        };
        for (k, t) in params.iter() {
            if names.iter().any(|n| n.as_ref() == k) {
                out.names.push(k.to_string());
                out.sizes.push(t.len());
            }
        }
        Ok(out)
    }

    /// Mask covering every entry of `params`.
    pub fn all(params: &ParamSet) -> Self {
        Self {
            names: params.names().map(str::to_string).collect(),
            sizes: params.iter().map(|(_, t)| t.len()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn masked_len(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Concatenates the masked entries of `params` in mask order.
    pub fn gather<P: ParamRead + ?Sized>(&self, params: &P) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.masked_len());
        for (name, &size) in self.names.iter().zip(&self.sizes) {
            let t = params.param(name)?;
            if t.len() != size {
                return contract(format!("mask entry `{name}` changed size"));
            }
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    /// Inverse of [`gather`](Self::gather) onto a zero set shaped like `like`.
    pub fn scatter(&self, like: &ParamSet, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.masked_len() {
            return contract("scatter: length does not match mask");
        }
        let mut out = like.zeros_like();
        let mut offset = 0;
        for (name, &size) in self.names.iter().zip(&self.sizes) {
            let t = out
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            t.data_mut().copy_from_slice(&flat[offset..offset + size]);
            offset += size;
        }
        Ok(out)
    }
}

/// A parameter set seen through a per-request shift of its masked entries.
/// The base is borrowed immutably and never written.
#[derive(Debug, Clone)]
pub struct ParamView<'a> {
    base: &'a ParamSet,
    shifted: IndexMap<String, Tensor>,
}

impl<'a> ParamView<'a> {
    pub fn base(&self) -> &'a ParamSet {
        self.base
    }

    /// Materializes the view as an owned set.
    pub fn to_param_set(&self) -> ParamSet {
        let mut out = self.base.clone();
        for (k, t) in &self.shifted {
            out.insert(k.clone(), t.clone());
        }
        out
    }
}

impl ParamRead for ParamView<'_> {
    fn param(&self, name: &str) -> Result<&Tensor> {
        match self.shifted.get(name) {
            Some(t) => Ok(t),
            None => self.base.param(name),
        }
    }
}

/// View of `base` with masked entries replaced by `base + scale·delta`.
pub fn axpy_overlay<'a>(
    base: &'a ParamSet,
    mask: &AdaptableMask,
    delta: &[f64],
    scale: f64,
) -> Result<ParamView<'a>> {
    if delta.len() != mask.masked_len() {
        return contract(format!(
            "overlay delta has {} values, mask covers {}",
            delta.len(),
            mask.masked_len()
        ));
    }
    let mut shifted = IndexMap::with_capacity(mask.names.len());
    let mut offset = 0;
    for (name, &size) in mask.names.iter().zip(&mask.sizes) {
        let t = base.param(name)?;
        if t.len() != size {
            return contract(format!("mask entry `{name}` changed size"));
        }
        let d = &delta[offset..offset + size];
        let data = t.data().iter().zip(d).map(|(x, dx)| x + scale * dx).collect();
        shifted.insert(name.clone(), Tensor::new(t.shape.clone(), data)?);
        offset += size;
    }
    Ok(ParamView { base, shifted })
}

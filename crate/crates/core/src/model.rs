//! Model definition shared by every sampler.
//!
//! Ratings are modelled as `r ~ N(U_iᵀV_j + a_i + b_j, 1/tau)` with
//! zero-mean Gaussian priors on the factor rows (diagonal precisions
//! `lambda_u`, `lambda_v`) and on the biases (`lambda_a`, `lambda_b`).
//! All indices are zero-based.
//!
//! The functions here are the reference forms of the gradient estimators.
//! The worker loop in [`crate::cluster`] uses an accumulating fast path that
//! performs the same arithmetic in the same order.

use std::ops::Range;

use crate::error::{Error, Result};

/// One observed `(user, item, rating)` triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingTuple {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

impl RatingTuple {
    pub fn new(user: usize, item: usize, rating: f64) -> Self {
        RatingTuple { user, item, rating }
    }
}

/// Dense row-major matrix of latent vectors, one row per user or item.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        FactorMatrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_row_major(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::arg(format!(
                "factor matrix {}x{} needs {} entries, got {}",
                rows,
                dim,
                rows * dim,
                data.len()
            )));
        }
        Ok(FactorMatrix { rows, dim, data })
    }

    pub fn from_fn(rows: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            for d in 0..dim {
                data.push(f(r, d));
            }
        }
        FactorMatrix { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous slice holding rows `range`.
    pub fn row_block(&self, range: Range<usize>) -> &[f64] {
        &self.data[range.start * self.dim..range.end * self.dim]
    }

    /// Overwrites rows starting at `start` with `values` (row-major).
    pub fn set_row_block(&mut self, start: usize, values: &[f64]) -> Result<()> {
        if !values.len().is_multiple_of(self.dim.max(1))
            || start * self.dim + values.len() > self.data.len()
        {
            return Err(Error::arg(format!(
                "row block of {} values at row {} does not fit a {}x{} matrix",
                values.len(),
                start,
                self.rows,
                self.dim
            )));
        }
        self.data[start * self.dim..start * self.dim + values.len()].copy_from_slice(values);
        Ok(())
    }

    /// Sum of squares of column `d`.
    pub fn column_sum_sq(&self, d: usize) -> f64 {
        self.data
            .iter()
            .skip(d)
            .step_by(self.dim)
            .map(|x| x * x)
            .sum()
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Parameters of one Markov chain of the bias-extended model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub u: FactorMatrix,
    pub v: FactorMatrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub lambda_u: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub chain_id: usize,
    pub iteration: u64,
}

impl ChainState {
    /// All-zero factors and biases with every precision set to `precision`.
    pub fn new(n_users: usize, n_items: usize, dim: usize, precision: f64) -> Self {
        ChainState {
            u: FactorMatrix::zeros(n_users, dim),
            v: FactorMatrix::zeros(n_items, dim),
            a: vec![0.0; n_users],
            b: vec![0.0; n_items],
            lambda_u: vec![precision; dim],
            lambda_v: vec![precision; dim],
            lambda_a: precision,
            lambda_b: precision,
            chain_id: 0,
            iteration: 0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.u.rows()
    }

    pub fn n_items(&self) -> usize {
        self.v.rows()
    }

    pub fn dim(&self) -> usize {
        self.u.dim()
    }

    /// `U_userᵀ V_item + a_user + b_item`.
    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.n_users() {
            return Err(Error::Index {
                what: "user",
                index: user,
                bound: self.n_users(),
            });
        }
        if item >= self.n_items() {
            return Err(Error::Index {
                what: "item",
                index: item,
                bound: self.n_items(),
            });
        }
        Ok(self.predict_unchecked(user, item))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, user: usize, item: usize) -> f64 {
        dot(self.u.row(user), self.v.row(item)) + self.a[user] + self.b[item]
    }

    /// `rating − predict`.
    #[inline]
    pub fn residual(&self, t: &RatingTuple) -> f64 {
        t.rating - self.predict_unchecked(t.user, t.item)
    }

    /// Checks dimensions, finiteness and positivity of the precisions.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.v.dim() != dim
            || self.a.len() != self.n_users()
            || self.b.len() != self.n_items()
            || self.lambda_u.len() != dim
            || self.lambda_v.len() != dim
        {
            return Err(Error::arg("chain state dimensions are inconsistent"));
        }
        let precisions = self
            .lambda_u
            .iter()
            .chain(&self.lambda_v)
            .chain([&self.lambda_a, &self.lambda_b]);
        for &p in precisions {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::arg(format!(
                    "precision {p} is not positive and finite"
                )));
            }
        }
        self.check_finite()
    }

    /// Divergence guard over every parameter.
    pub fn check_finite(&self) -> Result<()> {
        let blocks: [(&str, &[f64]); 4] = [
            ("U", self.u.as_slice()),
            ("V", self.v.as_slice()),
            ("a", &self.a),
            ("b", &self.b),
        ];
        for (name, values) in blocks {
            if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    chain: self.chain_id,
                    iteration: self.iteration,
                    detail: format!("{name}[{pos}] = {}", values[pos]),
                });
            }
        }
        Ok(())
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Latent dimension `D`.
    pub dim: usize,
    /// Likelihood precision.
    pub tau: f64,
    /// Gamma hyper-prior shape.
    pub alpha0: f64,
    /// Gamma hyper-prior rate.
    pub beta0: f64,
    /// Minibatch size `m`.
    pub minibatch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 10,
            tau: 2.0,
            alpha0: 1.0,
            beta0: 1.0,
            minibatch_size: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::arg("latent dimension must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::arg("tau must be positive"));
        }
        if !(self.alpha0 > 0.0 && self.beta0 > 0.0) {
            return Err(Error::arg(
                "Gamma hyper-prior shape and rate must be positive",
            ));
        }
        if self.minibatch_size == 0 {
            return Err(Error::arg("minibatch size must be at least 1"));
        }
        Ok(())
    }
}

/// A contiguous rectangle of the rating matrix and the ratings inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsBlock {
    id: usize,
    tuples: Vec<RatingTuple>,
    row_range: Range<usize>,
    col_range: Range<usize>,
    user_counts: Vec<usize>,
    item_counts: Vec<usize>,
}

impl RatingsBlock {
    pub fn new(
        id: usize,
        row_range: Range<usize>,
        col_range: Range<usize>,
        tuples: Vec<RatingTuple>,
    ) -> Result<Self> {
        let mut user_counts = vec![0; row_range.len()];
        let mut item_counts = vec![0; col_range.len()];
        for t in &tuples {
            if !row_range.contains(&t.user) || !col_range.contains(&t.item) {
                return Err(Error::arg(format!(
                    "tuple ({}, {}) lies outside block {} rows {:?} cols {:?}",
                    t.user, t.item, id, row_range, col_range
                )));
            }
            if !t.rating.is_finite() {
                return Err(Error::arg(format!(
                    "non-finite rating for ({}, {})",
                    t.user, t.item
                )));
            }
            user_counts[t.user - row_range.start] += 1;
            item_counts[t.item - col_range.start] += 1;
        }
        Ok(RatingsBlock {
            id,
            tuples,
            row_range,
            col_range,
            user_counts,
            item_counts,
        })
    }

    /// One block covering the whole `n_users × n_items` matrix.
    pub fn whole(tuples: Vec<RatingTuple>, n_users: usize, n_items: usize) -> Result<Self> {
        RatingsBlock::new(0, 0..n_users, 0..n_items, tuples)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tuples(&self) -> &[RatingTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn row_range(&self) -> Range<usize> {
        self.row_range.clone()
    }

    pub fn col_range(&self) -> Range<usize> {
        self.col_range.clone()
    }

    /// `N_{i*}` within this block; zero for users outside the row range.
    pub fn user_count(&self, user: usize) -> usize {
        if self.row_range.contains(&user) {
            self.user_counts[user - self.row_range.start]
        } else {
            0
        }
    }

    /// `N_{*j}` within this block; zero for items outside the column range.
    pub fn item_count(&self, item: usize) -> usize {
        if self.col_range.contains(&item) {
            self.item_counts[item - self.col_range.start]
        } else {
            0
        }
    }

    /// Users with at least one rating here, with their counts.
    pub fn user_counts(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let start = self.row_range.start;
        self.user_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(move |(k, &n)| (start + k, n))
    }

    /// Items with at least one rating here, with their counts.
    pub fn item_counts(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let start = self.col_range.start;
        self.item_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(move |(k, &n)| (start + k, n))
    }
}

/// Addresses one parameter group of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    User(usize),
    Item(usize),
    UserBias(usize),
    ItemBias(usize),
}

impl Param {
    /// True when `t` carries likelihood information about this parameter.
    #[inline]
    pub fn touches(&self, t: &RatingTuple) -> bool {
        match *self {
            Param::User(i) | Param::UserBias(i) => t.user == i,
            Param::Item(j) | Param::ItemBias(j) => t.item == j,
        }
    }

    /// Current value as a vector (length 1 for biases).
    pub fn value(&self, state: &ChainState) -> Vec<f64> {
        match *self {
            Param::User(i) => state.u.row(i).to_vec(),
            Param::Item(j) => state.v.row(j).to_vec(),
            Param::UserBias(i) => vec![state.a[i]],
            Param::ItemBias(j) => vec![state.b[j]],
        }
    }

    /// Diagonal prior precision matching [`Param::value`].
    pub fn prior_precision(&self, state: &ChainState) -> Vec<f64> {
        match *self {
            Param::User(_) => state.lambda_u.clone(),
            Param::Item(_) => state.lambda_v.clone(),
            Param::UserBias(_) => vec![state.lambda_a],
            Param::ItemBias(_) => vec![state.lambda_b],
        }
    }

    fn width(&self, state: &ChainState) -> usize {
        match self {
            Param::User(_) | Param::Item(_) => state.dim(),
            _ => 1,
        }
    }
}

/// Likelihood score of one tuple with respect to `param`; zero when the
/// tuple does not involve it.
pub fn score(state: &ChainState, tau: f64, t: &RatingTuple, param: Param) -> Vec<f64> {
    let mut out = vec![0.0; param.width(state)];
    add_score(state, tau, t, param, &mut out);
    out
}

#[inline]
fn add_score(state: &ChainState, tau: f64, t: &RatingTuple, param: Param, acc: &mut [f64]) {
    if !param.touches(t) {
        return;
    }
    let res = state.residual(t);
    match param {
        Param::User(_) => {
            for (o, &x) in acc.iter_mut().zip(state.v.row(t.item)) {
                *o += tau * res * x;
            }
        }
        Param::Item(_) => {
            for (o, &x) in acc.iter_mut().zip(state.u.row(t.user)) {
                *o += tau * res * x;
            }
        }
        Param::UserBias(_) | Param::ItemBias(_) => acc[0] += tau * res,
    }
}

/// Exact log-posterior gradient: `Σ_n score_n − Λ ⊙ θ` over `tuples`.
pub fn full_gradient(
    state: &ChainState,
    tau: f64,
    tuples: &[RatingTuple],
    param: Param,
) -> Vec<f64> {
    let mut acc = vec![0.0; param.width(state)];
    for t in tuples {
        add_score(state, tau, t, param, &mut acc);
    }
    let value = param.value(state);
    let precision = param.prior_precision(state);
    for ((g, x), p) in acc.iter_mut().zip(&value).zip(&precision) {
        *g -= p * x;
    }
    acc
}

/// Mean score over a minibatch, `ḡ = (1/m) Σ score_n`.
pub fn minibatch_mean(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    param: Param,
) -> Result<Vec<f64>> {
    if minibatch.is_empty() {
        return Err(Error::arg("minibatch must not be empty"));
    }
    let mut acc = vec![0.0; param.width(state)];
    for t in minibatch {
        add_score(state, tau, t, param, &mut acc);
    }
    let m = minibatch.len() as f64;
    for g in &mut acc {
        *g /= m;
    }
    Ok(acc)
}

/// Sparse-support unbiased gradient estimator:
/// `N_eff · ḡ − 𝕀[param ∈ minibatch] · Λθ / h̄`.
///
/// `effective_n` is `N` on a single machine and `N^(s)/v^(s)` on block `s`.
/// Returns the zero vector when no tuple of the minibatch touches `param`.
pub fn g3(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    param: Param,
    effective_n: f64,
    h_bar: f64,
) -> Result<Vec<f64>> {
    if !(h_bar > 0.0 && h_bar <= 1.0) {
        return Err(Error::arg(format!("bias corrector {h_bar} outside (0, 1]")));
    }
    let mean = minibatch_mean(state, tau, minibatch, param)?;
    if !minibatch.iter().any(|t| param.touches(t)) {
        return Ok(mean);
    }
    let value = param.value(state);
    let precision = param.prior_precision(state);
    Ok(mean
        .iter()
        .zip(&value)
        .zip(&precision)
        .map(|((g, x), p)| effective_n * g - p * x / h_bar)
        .collect())
}

/// `τ (r − predict) V_item` when the tuple belongs to `target_user`, else 0.
pub fn score_term(state: &ChainState, tau: f64, t: &RatingTuple, target_user: usize) -> Vec<f64> {
    score(state, tau, t, Param::User(target_user))
}

/// Item-side counterpart of [`score_term`].
pub fn item_score_term(
    state: &ChainState,
    tau: f64,
    t: &RatingTuple,
    target_item: usize,
) -> Vec<f64> {
    score(state, tau, t, Param::Item(target_item))
}

pub fn full_gradient_user(
    state: &ChainState,
    tau: f64,
    tuples: &[RatingTuple],
    user: usize,
) -> Vec<f64> {
    full_gradient(state, tau, tuples, Param::User(user))
}

pub fn full_gradient_item(
    state: &ChainState,
    tau: f64,
    tuples: &[RatingTuple],
    item: usize,
) -> Vec<f64> {
    full_gradient(state, tau, tuples, Param::Item(item))
}

pub fn minibatch_mean_score(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    user: usize,
) -> Result<Vec<f64>> {
    minibatch_mean(state, tau, minibatch, Param::User(user))
}

pub fn g3_estimator(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    user: usize,
    effective_n: f64,
    h_bar: f64,
) -> Result<Vec<f64>> {
    g3(state, tau, minibatch, Param::User(user), effective_n, h_bar)
}

/// Probability that a size-`m` with-replacement minibatch drawn from `n`
/// tuples contains at least one of the `n_i` tuples of a given user:
/// `1 − (1 − n_i/n)^m`.
pub fn bias_corrector(n_i: usize, n: usize, m: usize) -> Result<f64> {
    if n_i == 0 {
        return Err(Error::arg(
            "bias corrector is undefined for a count of zero",
        ));
    }
    if n_i > n {
        return Err(Error::arg(format!("count {n_i} exceeds block size {n}")));
    }
    if m == 0 {
        return Err(Error::arg("minibatch size must be at least 1"));
    }
    let miss = 1.0 - n_i as f64 / n as f64;
    Ok(1.0 - miss.powf(m as f64))
}

/// Visit-weighted corrector `h̄ = Σ_s v_s h_s` over `(v_s, h_s)` pairs.
pub fn distributed_corrector(per_block: &[(f64, f64)]) -> Result<f64> {
    let total: f64 = per_block.iter().map(|(v, _)| v).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::arg(format!(
            "visit frequencies sum to {total}, expected 1"
        )));
    }
    for &(v, h) in per_block {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::arg(format!("visit frequency {v} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::arg(format!("corrector {h} outside [0, 1]")));
        }
    }
    Ok(per_block.iter().map(|(v, h)| v * h).sum())
}

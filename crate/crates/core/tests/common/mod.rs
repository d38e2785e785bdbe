//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use dsgld::cluster::{init_chain, worker_round, RoundRequest, ServerConfig, SubParameters, Worker};
use dsgld::model::Param;
use dsgld::partition::{uniform_visits, PartitionPlan};
use dsgld::samplers::NoiseSource;
use dsgld::{ChainState, FactorMatrix, RatingTuple};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random factors, biases and precisions.
pub fn random_state<R: Rng>(rng: &mut R, n_users: usize, n_items: usize, dim: usize) -> ChainState {
    let mut s = ChainState::new(n_users, n_items, dim, 1.0);
    s.u = FactorMatrix::from_fn(n_users, dim, |_, _| normal(rng));
    s.v = FactorMatrix::from_fn(n_items, dim, |_, _| normal(rng));
    s.a = (0..n_users).map(|_| normal(rng)).collect();
    s.b = (0..n_items).map(|_| normal(rng)).collect();
    s.lambda_u = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
    s.lambda_v = (0..dim).map(|_| rng.random_range(0.5..3.0)).collect();
    s.lambda_a = rng.random_range(0.5..3.0);
    s.lambda_b = rng.random_range(0.5..3.0);
    s
}

pub fn random_tuples<R: Rng>(
    rng: &mut R,
    n_users: usize,
    n_items: usize,
    n: usize,
) -> Vec<RatingTuple> {
    (0..n)
        .map(|_| {
            RatingTuple::new(
                rng.random_range(0..n_users),
                rng.random_range(0..n_items),
                rng.random_range(1.0..5.0),
            )
        })
        .collect()
}

/// Six ratings over three users and three items; every user and item appears twice.
pub fn six_tuples() -> Vec<RatingTuple> {
    vec![
        RatingTuple::new(0, 0, 4.0),
        RatingTuple::new(0, 1, 2.5),
        RatingTuple::new(1, 0, 3.0),
        RatingTuple::new(1, 2, 5.0),
        RatingTuple::new(2, 1, 1.0),
        RatingTuple::new(2, 2, 3.5),
    ]
}

/// Log joint density up to a constant, written out term by term.
pub fn log_joint(s: &ChainState, tau: f64, tuples: &[RatingTuple]) -> f64 {
    let mut lj = 0.0;
    for t in tuples {
        let mut pred = s.a[t.user] + s.b[t.item];
        for d in 0..s.dim() {
            pred += s.u.row(t.user)[d] * s.v.row(t.item)[d];
        }
        lj -= 0.5 * tau * (t.rating - pred).powi(2);
    }
    for i in 0..s.n_users() {
        for d in 0..s.dim() {
            lj -= 0.5 * s.lambda_u[d] * s.u.row(i)[d].powi(2);
        }
        lj -= 0.5 * s.lambda_a * s.a[i].powi(2);
    }
    for j in 0..s.n_items() {
        for d in 0..s.dim() {
            lj -= 0.5 * s.lambda_v[d] * s.v.row(j)[d].powi(2);
        }
        lj -= 0.5 * s.lambda_b * s.b[j].powi(2);
    }
    lj
}

/// Mutable access to coordinate `k` of `param`.
pub fn coord(s: &mut ChainState, param: Param, k: usize) -> &mut f64 {
    match param {
        Param::User(i) => &mut s.u.row_mut(i)[k],
        Param::Item(j) => &mut s.v.row_mut(j)[k],
        Param::UserBias(i) => &mut s.a[i],
        Param::ItemBias(j) => &mut s.b[j],
    }
}

pub fn all_params(s: &ChainState) -> Vec<Param> {
    let mut out = Vec::new();
    for i in 0..s.n_users() {
        out.push(Param::User(i));
        out.push(Param::UserBias(i));
    }
    for j in 0..s.n_items() {
        out.push(Param::Item(j));
        out.push(Param::ItemBias(j));
    }
    out
}

/// Every ordered index sequence of length `m` over `0..n`.
pub fn all_minibatches(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |k| {
                    let mut p = prefix.clone();
                    p.push(k);
                    p
                })
            })
            .collect();
    }
    out
}

/// Share of all size-`m` minibatches over `0..n` that contain an index below `n_i`.
pub fn enumerated_inclusion(n_i: usize, n: usize, m: usize) -> f64 {
    let all = all_minibatches(n, m);
    let hits = all.iter().filter(|mb| mb.iter().any(|&k| k < n_i)).count();
    hits as f64 / all.len() as f64
}

/// The request the server sends for `(chain, block)` in `round`.
pub fn request_for(
    cfg: &ServerConfig,
    plan: &PartitionPlan,
    state: &ChainState,
    chain: usize,
    block: usize,
    round: u64,
) -> RoundRequest {
    let b = plan.block(block);
    RoundRequest {
        chain_id: chain,
        block_id: block,
        round,
        params: SubParameters::extract(state, b.row_range(), b.col_range()),
        lambda_u: state.lambda_u.clone(),
        lambda_v: state.lambda_v.clone(),
        lambda_a: state.lambda_a,
        lambda_b: state.lambda_b,
        tau: cfg.model.tau,
        eps: cfg.schedule.step_size(round - 1),
        round_length: cfg.round_length,
        minibatch_size: cfg.model.minibatch_size,
        visit: uniform_visits(plan).v[block],
        noise: NoiseSource::new(cfg.seed, (chain * plan.blocks().len() + block) as u64),
        inject_noise: true,
    }
}

/// Replays round 1 of `chain` by running `blocks` one after another on a
/// single state.
pub fn sequential_first_round(
    cfg: &ServerConfig,
    plan: &PartitionPlan,
    workers: &[Worker],
    chain: usize,
    blocks: &[usize],
) -> ChainState {
    let mut state = init_chain(cfg, plan, chain);
    for &b in blocks {
        let req = request_for(cfg, plan, &state, chain, b, 1);
        let reply = worker_round(&req, &workers[b]).expect("worker round");
        reply.params.install(&mut state).expect("install");
    }
    state
}

pub fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn state_diff(x: &ChainState, y: &ChainState) -> f64 {
    max_abs_diff(x.u.as_slice(), y.u.as_slice())
        .max(max_abs_diff(x.v.as_slice(), y.v.as_slice()))
        .max(max_abs_diff(&x.a, &y.a))
        .max(max_abs_diff(&x.b, &y.b))
}

/// Mean and standard error of the mean from `batches` batch means.
pub fn batch_mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let size = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (mean, (var / batches as f64).sqrt())
}

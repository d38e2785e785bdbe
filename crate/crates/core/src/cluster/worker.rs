//! The worker side of a round: `γ` Langevin iterations over one block.

use rand::Rng;

use super::protocol::{RoundReply, RoundRequest, SubParameters};
use crate::error::{Error, Result};
use crate::model::RatingsBlock;
use crate::partition::{Correctors, PartitionPlan};
use crate::samplers::{langevin_step, Noise, ZeroNoise};

#[derive(Debug, Clone, Copy)]
struct LocalTuple {
    row: usize,
    col: usize,
    rating: f64,
}

/// Owns one block of ratings and the distributed bias correctors of the
/// users and items inside it.
#[derive(Debug, Clone)]
pub struct Worker {
    block: RatingsBlock,
    local: Vec<LocalTuple>,
    user_h: Vec<f64>,
    item_h: Vec<f64>,
}

impl Worker {
    /// `user_h` / `item_h` cover the block's row and column ranges.
    pub fn new(block: RatingsBlock, user_h: Vec<f64>, item_h: Vec<f64>) -> Result<Self> {
        if user_h.len() != block.row_range().len() || item_h.len() != block.col_range().len() {
            return Err(Error::arg("corrector slices do not match the block ranges"));
        }
        let (r0, c0) = (block.row_range().start, block.col_range().start);
        let local = block
            .tuples()
            .iter()
            .map(|t| LocalTuple {
                row: t.user - r0,
                col: t.item - c0,
                rating: t.rating,
            })
            .collect();
        Ok(Worker {
            block,
            local,
            user_h,
            item_h,
        })
    }

    pub fn from_plan(
        plan: &PartitionPlan,
        block_id: usize,
        correctors: &Correctors,
    ) -> Result<Self> {
        if block_id >= plan.blocks().len() {
            return Err(Error::Index {
                what: "block",
                index: block_id,
                bound: plan.blocks().len(),
            });
        }
        let block = plan.block(block_id).clone();
        let user_h = correctors.user[block.row_range()].to_vec();
        let item_h = correctors.item[block.col_range()].to_vec();
        Worker::new(block, user_h, item_h)
    }

    pub fn block(&self) -> &RatingsBlock {
        &self.block
    }

    /// Runs one round; see [`worker_round`].
    pub fn round(&self, request: &RoundRequest) -> Result<RoundReply> {
        worker_round(request, self)
    }

    fn check_request(&self, req: &RoundRequest) -> Result<()> {
        let p = &req.params;
        p.check_shape()?;
        let fail = |what: String| Err(Error::Protocol(what));
        if req.block_id != self.block.id() {
            return fail(format!(
                "request for block {} sent to block {}",
                req.block_id,
                self.block.id()
            ));
        }
        if p.rows() != self.block.row_range() || p.cols() != self.block.col_range() {
            return fail(format!(
                "request covers rows {:?} cols {:?}, block {} has rows {:?} cols {:?}",
                p.rows(),
                p.cols(),
                self.block.id(),
                self.block.row_range(),
                self.block.col_range()
            ));
        }
        if req.lambda_u.len() != p.dim || req.lambda_v.len() != p.dim || p.dim == 0 {
            return fail("precision vectors do not match the latent dimension".into());
        }
        if req.round_length > 0 && !self.block.is_empty() {
            if req.minibatch_size == 0 {
                return Err(Error::arg("minibatch size must be at least one"));
            }
            if !(req.eps > 0.0 && req.eps.is_finite()) {
                return Err(Error::arg(format!(
                    "step size must be positive, got {}",
                    req.eps
                )));
            }
            if !(req.visit > 0.0 && req.visit <= 1.0) {
                return Err(Error::arg(format!(
                    "visit frequency {} outside (0, 1]",
                    req.visit
                )));
            }
        }
        Ok(())
    }
}

/// Draws `m` tuple positions uniformly with replacement from `0..n`.
pub fn sample_minibatch<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..n)).collect()
}

/// Minibatch stream segment for `round`; the Gaussian noise uses the next one.
pub fn minibatch_segment(round: u64) -> u64 {
    round * 2
}

/// Performs `round_length` iterations on the request's sub-parameters.
///
/// Each iteration draws a with-replacement minibatch, then moves every
/// distinct user and item in it (ascending order; for each user `U_i` then
/// `a_i`, then for each item `V_j` then `b_j`), all from the values held at
/// the start of the iteration.
pub fn worker_round(req: &RoundRequest, worker: &Worker) -> Result<RoundReply> {
    worker.check_request(req)?;
    let mut p = req.params.clone();
    let n = worker.local.len();
    if req.round_length == 0 || n == 0 {
        return Ok(reply(req, p, 0, f64::NAN));
    }
    let dim = p.dim;
    let m = req.minibatch_size;
    let eff_n = n as f64 / req.visit;
    let tau = req.tau;
    let inv_m = 1.0 / m as f64;

    let mut mb_rng = req.noise.rng(minibatch_segment(req.round));
    let mut gauss: Box<dyn Noise> = if req.inject_noise {
        Box::new(req.noise.gaussian(minibatch_segment(req.round) + 1))
    } else {
        Box::new(ZeroNoise)
    };

    let (n_rows, n_cols) = (p.n_rows(), p.n_cols());
    let mut u_acc = vec![0.0; n_rows * dim];
    let mut a_acc = vec![0.0; n_rows];
    let mut v_acc = vec![0.0; n_cols * dim];
    let mut b_acc = vec![0.0; n_cols];
    let mut row_seen = vec![false; n_rows];
    let mut col_seen = vec![false; n_cols];
    let mut rows: Vec<usize> = Vec::with_capacity(m);
    let mut cols: Vec<usize> = Vec::with_capacity(m);
    let mut new_u = Vec::with_capacity(m * dim);
    let mut new_a = Vec::with_capacity(m);
    let mut new_v = Vec::with_capacity(m * dim);
    let mut new_b = Vec::with_capacity(m);
    let mut last_rmse = f64::NAN;
    let la = [req.lambda_a];
    let lb = [req.lambda_b];

    for it in 0..req.round_length {
        let mut sq = 0.0;
        for _ in 0..m {
            let t = worker.local[mb_rng.random_range(0..n)];
            let (r, c) = (t.row, t.col);
            let ur = &p.u[r * dim..(r + 1) * dim];
            let vc = &p.v[c * dim..(c + 1) * dim];
            let pred = crate::model::dot(ur, vc) + p.a[r] + p.b[c];
            let res = t.rating - pred;
            sq += res * res;
            if !row_seen[r] {
                row_seen[r] = true;
                rows.push(r);
            }
            if !col_seen[c] {
                col_seen[c] = true;
                cols.push(c);
            }
            for d in 0..dim {
                u_acc[r * dim + d] += tau * res * vc[d];
                v_acc[c * dim + d] += tau * res * ur[d];
            }
            a_acc[r] += tau * res;
            b_acc[c] += tau * res;
        }
        last_rmse = (sq * inv_m).sqrt();
        rows.sort_unstable();
        cols.sort_unstable();

        new_u.resize(rows.len() * dim, 0.0);
        new_a.resize(rows.len(), 0.0);
        let mut mean = vec![0.0; dim];
        for (k, &r) in rows.iter().enumerate() {
            let h = worker.user_h[r];
            for d in 0..dim {
                mean[d] = u_acc[r * dim + d] / m as f64;
            }
            langevin_step(
                &p.u[r * dim..(r + 1) * dim],
                &mean,
                &req.lambda_u,
                eff_n,
                h,
                req.eps,
                gauss.as_mut(),
                &mut new_u[k * dim..(k + 1) * dim],
            );
            langevin_step(
                &p.a[r..r + 1],
                &[a_acc[r] / m as f64],
                &la,
                eff_n,
                h,
                req.eps,
                gauss.as_mut(),
                &mut new_a[k..k + 1],
            );
        }
        new_v.resize(cols.len() * dim, 0.0);
        new_b.resize(cols.len(), 0.0);
        for (k, &c) in cols.iter().enumerate() {
            let h = worker.item_h[c];
            for d in 0..dim {
                mean[d] = v_acc[c * dim + d] / m as f64;
            }
            langevin_step(
                &p.v[c * dim..(c + 1) * dim],
                &mean,
                &req.lambda_v,
                eff_n,
                h,
                req.eps,
                gauss.as_mut(),
                &mut new_v[k * dim..(k + 1) * dim],
            );
            langevin_step(
                &p.b[c..c + 1],
                &[b_acc[c] / m as f64],
                &lb,
                eff_n,
                h,
                req.eps,
                gauss.as_mut(),
                &mut new_b[k..k + 1],
            );
        }

        let finite = new_u
            .iter()
            .chain(&new_a)
            .chain(&new_v)
            .chain(&new_b)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Divergence {
                chain: req.chain_id,
                iteration: it as u64,
                detail: format!(
                    "non-finite parameter in block {} during round {} (eps {:e})",
                    req.block_id, req.round, req.eps
                ),
            });
        }
        for (k, &r) in rows.iter().enumerate() {
            p.u[r * dim..(r + 1) * dim].copy_from_slice(&new_u[k * dim..(k + 1) * dim]);
            p.a[r] = new_a[k];
            u_acc[r * dim..(r + 1) * dim].fill(0.0);
            a_acc[r] = 0.0;
            row_seen[r] = false;
        }
        for (k, &c) in cols.iter().enumerate() {
            p.v[c * dim..(c + 1) * dim].copy_from_slice(&new_v[k * dim..(k + 1) * dim]);
            p.b[c] = new_b[k];
            v_acc[c * dim..(c + 1) * dim].fill(0.0);
            b_acc[c] = 0.0;
            col_seen[c] = false;
        }
        rows.clear();
        cols.clear();
    }
    Ok(reply(req, p, req.round_length as u64, last_rmse))
}

fn reply(
    req: &RoundRequest,
    params: SubParameters,
    iterations: u64,
    train_rmse: f64,
) -> RoundReply {
    RoundReply {
        chain_id: req.chain_id,
        block_id: req.block_id,
        round: req.round,
        iterations,
        params,
        train_rmse,
    }
}

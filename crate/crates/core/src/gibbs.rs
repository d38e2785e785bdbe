//! Gibbs sampler for BPMF with Gaussian-Wishart hyper-priors.
//!
//! The model has no bias terms. Ratings are centered by the training mean
//! before sampling; stored snapshots carry that mean in every user bias so
//! that [`ChainState::predict`] returns predictions on the rating scale.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::cluster::{check_burn_in, SampleStore};
use crate::error::{Error, Result};
use crate::eval::state_rmse;
use crate::model::{ChainState, FactorMatrix, RatingTuple};
use crate::samplers::NoiseSource;

/// Prior `Θ₀ = {μ₀, β₀, W₀, ν₀}` on one side's `(μ, Λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWishartParams {
    pub mu0: DVector<f64>,
    pub beta0: f64,
    pub w0: DMatrix<f64>,
    pub nu0: f64,
}

impl GaussianWishartParams {
    /// `μ₀ = 0`, `β₀ = 2`, `W₀ = I`, `ν₀ = D`.
    pub fn standard(dim: usize) -> Self {
        GaussianWishartParams {
            mu0: DVector::zeros(dim),
            beta0: 2.0,
            w0: DMatrix::identity(dim, dim),
            nu0: dim as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.w0.shape() != (d, d) {
            return Err(Error::arg("prior dimensions are inconsistent"));
        }
        if !(self.beta0 > 0.0) || !(self.nu0 >= d as f64) {
            return Err(Error::arg(format!(
                "need beta0 > 0 and nu0 >= D, got beta0 {} nu0 {}",
                self.beta0, self.nu0
            )));
        }
        if (&self.w0 - self.w0.transpose()).amax() > 1e-12 * (1.0 + self.w0.amax()) {
            return Err(Error::arg("W0 is not symmetric"));
        }
        if Cholesky::new(self.w0.clone()).is_none() {
            return Err(Error::arg("W0 is not positive-definite"));
        }
        Ok(())
    }
}

/// `(μ, Λ)` of one side.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorHyper {
    pub mu: DVector<f64>,
    pub lambda: DMatrix<f64>,
}

impl FactorHyper {
    pub fn standard(dim: usize) -> Self {
        FactorHyper {
            mu: DVector::zeros(dim),
            lambda: DMatrix::identity(dim, dim),
        }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Conjugate Normal-Wishart posterior given the rows of `factors`.
pub fn hyper_posterior(
    factors: &FactorMatrix,
    prior: &GaussianWishartParams,
) -> Result<GaussianWishartParams> {
    let (n, d) = (factors.rows(), factors.dim());
    if n == 0 {
        return Err(Error::arg(
            "hyper-parameter update needs at least one factor row",
        ));
    }
    if d != prior.dim() {
        return Err(Error::arg("factor and prior dimensions differ"));
    }
    let x = DMatrix::from_row_slice(n, d, factors.as_slice());
    let mean: DVector<f64> = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let nf = n as f64;
    // scatter = N · S
    let scatter = centered.transpose() * &centered;
    let beta = prior.beta0 + nf;
    let diff = &prior.mu0 - &mean;
    let w0_inv = Cholesky::new(prior.w0.clone())
        .ok_or_else(|| Error::Numerical("W0 is not positive-definite".into()))?
        .inverse();
    let w_inv =
        symmetrize(&(w0_inv + scatter + (&diff * diff.transpose()) * (prior.beta0 * nf / beta)));
    let w = Cholesky::new(w_inv)
        .ok_or_else(|| Error::Numerical("posterior scale matrix is not positive-definite".into()))?
        .inverse();
    Ok(GaussianWishartParams {
        mu0: (&prior.mu0 * prior.beta0 + &mean * nf) / beta,
        beta0: beta,
        w0: symmetrize(&w),
        nu0: prior.nu0 + nf,
    })
}

/// Wishart draw by the Bartlett construction; `E[Λ] = ν W`.
pub fn sample_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    nu: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(nu > d as f64 - 1.0) {
        return Err(Error::arg(format!(
            "Wishart degrees of freedom {nu} too small for dimension {d}"
        )));
    }
    let l = Cholesky::new(symmetrize(scale))
        .ok_or_else(|| Error::Numerical("Wishart scale is not positive-definite".into()))?
        .unpack();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = Gamma::new((nu - i as f64) / 2.0, 2.0)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(symmetrize(&(&la * la.transpose())))
}

/// `mean + L⁻ᵀ z` with `L Lᵀ = precision`: a draw from `N(mean, precision⁻¹)`.
fn sample_gaussian_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    let y = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    Ok(mean + y)
}

/// Draws `Λ` from the Wishart posterior, then `μ ~ N(μ*, (β* Λ)⁻¹)`.
pub fn sample_hyper<R: Rng + ?Sized>(
    factors: &FactorMatrix,
    prior: &GaussianWishartParams,
    rng: &mut R,
) -> Result<FactorHyper> {
    let post = hyper_posterior(factors, prior)?;
    let lambda = sample_wishart(&post.w0, post.nu0, rng)?;
    let chol = Cholesky::new(&lambda * post.beta0)
        .ok_or_else(|| Error::Numerical("sampled precision is not positive-definite".into()))?;
    let mu = sample_gaussian_precision(&post.mu0, &chol, rng)?;
    Ok(FactorHyper { mu, lambda })
}

/// Gaussian conditional of one row: `(mean, precision)`.
///
/// `ratings` are `(other-side index, centered rating)` pairs.
pub fn row_conditional(
    ratings: &[(usize, f64)],
    other: &FactorMatrix,
    hyper: &FactorHyper,
    tau: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, _, precision) = conditional_parts(ratings, other, hyper, tau)?;
    Ok((mean, precision))
}

/// Mean, Cholesky factor of the precision, and its inverse.
type ConditionalParts = (DVector<f64>, Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>);

fn conditional_parts(
    ratings: &[(usize, f64)],
    other: &FactorMatrix,
    hyper: &FactorHyper,
    tau: f64,
) -> Result<ConditionalParts> {
    let d = hyper.mu.len();
    let mut precision = hyper.lambda.clone();
    let mut rhs = &hyper.lambda * &hyper.mu;
    for &(j, r) in ratings {
        let v = DVectorView::from_slice(other.row(j), d);
        precision.ger(tau, &v, &v, 1.0);
        rhs.axpy(tau * r, &v, 1.0);
    }
    let chol = Cholesky::new(precision.clone())
        .ok_or_else(|| Error::Numerical("conditional precision is singular".into()))?;
    let covariance = chol.inverse();
    let mean = covariance * rhs;
    Ok((mean, chol, precision))
}

/// One draw of a row from `N(μ*, Λ*⁻¹)`.
pub fn sample_user_conditional<R: Rng + ?Sized>(
    ratings: &[(usize, f64)],
    other: &FactorMatrix,
    hyper: &FactorHyper,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mean, chol, _) = conditional_parts(ratings, other, hyper, tau)?;
    Ok(sample_gaussian_precision(&mean, &chol, rng)?
        .as_slice()
        .to_vec())
}

/// Draws every row of one side in parallel. Row `k` uses stream
/// `streams[k]`, segment `sweep`, so results do not depend on scheduling.
pub fn sample_side(
    ratings: &[Vec<(usize, f64)>],
    other: &FactorMatrix,
    hyper: &FactorHyper,
    tau: f64,
    seed: u64,
    streams: &[u64],
    sweep: u64,
) -> Result<FactorMatrix> {
    if streams.len() != ratings.len() {
        return Err(Error::arg("one noise stream per row is required"));
    }
    let d = hyper.mu.len();
    let rows: Vec<Vec<f64>> = ratings
        .par_iter()
        .zip(streams.par_iter())
        .map(|(r, &s)| {
            let mut rng = NoiseSource::new(seed, s).rng(sweep);
            sample_user_conditional(r, other, hyper, tau, &mut rng)
        })
        .collect::<Result<_>>()?;
    FactorMatrix::from_row_major(ratings.len(), d, rows.concat())
}

#[derive(Debug, Clone)]
pub struct GibbsConfig {
    pub dim: usize,
    pub tau: f64,
    pub user_prior: GaussianWishartParams,
    pub item_prior: GaussianWishartParams,
    pub sweeps: u64,
    pub burn_in_threshold: f64,
    pub thin: u64,
    pub init_sd: f64,
    pub seed: u64,
    /// Stop after the sweep during which this much time has passed.
    pub max_duration: Option<Duration>,
    /// Start from these factors instead of a random draw (e.g. an SGD fit).
    pub initial: Option<(FactorMatrix, FactorMatrix)>,
}

impl GibbsConfig {
    pub fn new(dim: usize) -> Self {
        GibbsConfig {
            dim,
            tau: 2.0,
            user_prior: GaussianWishartParams::standard(dim),
            item_prior: GaussianWishartParams::standard(dim),
            sweeps: 100,
            burn_in_threshold: f64::INFINITY,
            thin: 1,
            init_sd: 0.1,
            seed: 0,
            max_duration: None,
            initial: None,
        }
    }
}

/// Per-sweep progress passed to the observer.
pub struct GibbsSweep<'a> {
    pub sweep: u64,
    pub train_rmse: f64,
    pub eval_rmse: f64,
    pub store: &'a SampleStore,
    pub sampled: bool,
}

#[derive(Debug)]
pub struct GibbsOutput {
    pub store: SampleStore,
    pub final_state: ChainState,
    pub user_hyper: FactorHyper,
    pub item_hyper: FactorHyper,
}

const HYPER_STREAM: u64 = u64::MAX - 1;
const INIT_STREAM: u64 = u64::MAX;

/// Runs `cfg.sweeps` sweeps. Each sweep draws both sides' hyper-parameters,
/// then every user row given the current items, then every item row given
/// the freshly drawn users.
pub fn run_gibbs<F>(
    train: &[RatingTuple],
    n_users: usize,
    n_items: usize,
    cfg: &GibbsConfig,
    eval: &[RatingTuple],
    mut observer: F,
) -> Result<GibbsOutput>
where
    F: FnMut(&GibbsSweep) -> Result<()>,
{
    if cfg.sweeps == 0 {
        return Err(Error::arg("at least one sweep is required"));
    }
    if cfg.thin == 0 || cfg.dim == 0 || !(cfg.tau > 0.0) {
        return Err(Error::arg("thin, dim and tau must be positive"));
    }
    cfg.user_prior.validate()?;
    cfg.item_prior.validate()?;
    if cfg.user_prior.dim() != cfg.dim || cfg.item_prior.dim() != cfg.dim {
        return Err(Error::arg("prior dimension differs from dim"));
    }
    if n_users == 0 || n_items == 0 {
        return Err(Error::arg("the rating matrix has no users or no items"));
    }
    let offset = if train.is_empty() {
        0.0
    } else {
        train.iter().map(|t| t.rating).sum::<f64>() / train.len() as f64
    };
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_users];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
    for t in train {
        if t.user >= n_users || t.item >= n_items {
            return Err(Error::Index {
                what: "rating",
                index: t.user.max(t.item),
                bound: n_users.max(n_items),
            });
        }
        by_user[t.user].push((t.item, t.rating - offset));
        by_item[t.item].push((t.user, t.rating - offset));
    }
    let user_streams: Vec<u64> = (0..n_users as u64).collect();
    let item_streams: Vec<u64> = (n_users as u64..(n_users + n_items) as u64).collect();

    let mut state = ChainState::new(n_users, n_items, cfg.dim, 1.0);
    state.a.fill(offset);
    match &cfg.initial {
        Some((u, v)) => {
            if (u.rows(), u.dim(), v.rows(), v.dim()) != (n_users, cfg.dim, n_items, cfg.dim) {
                return Err(Error::arg("initial factors have the wrong shape"));
            }
            state.u = u.clone();
            state.v = v.clone();
        }
        None => {
            let mut rng = NoiseSource::new(cfg.seed, INIT_STREAM).rng(0);
            for x in state
                .u
                .as_mut_slice()
                .iter_mut()
                .chain(state.v.as_mut_slice())
            {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = cfg.init_sd * z;
            }
        }
    }

    let mut store = SampleStore::new(1);
    let mut user_hyper = FactorHyper::standard(cfg.dim);
    let mut item_hyper = FactorHyper::standard(cfg.dim);
    if cfg.burn_in_threshold == f64::INFINITY {
        store.mark_burn_in(0);
    }
    let start = Instant::now();
    for sweep in 1..=cfg.sweeps {
        if cfg.max_duration.is_some_and(|d| start.elapsed() >= d) {
            break;
        }
        let mut rng = NoiseSource::new(cfg.seed, HYPER_STREAM).rng(sweep);
        let with_sweep = |e: Error| match e {
            Error::Numerical(m) => Error::Numerical(format!("sweep {sweep}: {m}")),
            other => other,
        };
        user_hyper = sample_hyper(&state.u, &cfg.user_prior, &mut rng).map_err(with_sweep)?;
        item_hyper = sample_hyper(&state.v, &cfg.item_prior, &mut rng).map_err(with_sweep)?;
        state.u = sample_side(
            &by_user,
            &state.v,
            &user_hyper,
            cfg.tau,
            cfg.seed,
            &user_streams,
            sweep,
        )
        .map_err(with_sweep)?;
        state.v = sample_side(
            &by_item,
            &state.u,
            &item_hyper,
            cfg.tau,
            cfg.seed,
            &item_streams,
            sweep,
        )
        .map_err(with_sweep)?;
        for d in 0..cfg.dim {
            state.lambda_u[d] = user_hyper.lambda[(d, d)];
            state.lambda_v[d] = item_hyper.lambda[(d, d)];
        }
        state.iteration = sweep;
        state.check_finite()?;

        let eval_rmse = state_rmse(&state, eval);
        let mut sampled = false;
        if store.burn_in_complete() {
            sampled = store.collect_sample(0, &state, sweep, cfg.thin);
        } else if check_burn_in(&[eval_rmse], cfg.burn_in_threshold) {
            store.mark_burn_in(sweep);
        }
        observer(&GibbsSweep {
            sweep,
            train_rmse: state_rmse(&state, train),
            eval_rmse,
            store: &store,
            sampled,
        })?;
    }
    Ok(GibbsOutput {
        store,
        final_state: state,
        user_hyper,
        item_hyper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn posterior_degrees_of_freedom() {
        let f = FactorMatrix::from_fn(7, 2, |r, c| (r + c) as f64 * 0.1);
        let prior = GaussianWishartParams::standard(2);
        let post = hyper_posterior(&f, &prior).unwrap();
        assert_eq!(post.nu0, prior.nu0 + 7.0);
        assert_eq!(post.beta0, prior.beta0 + 7.0);
    }

    #[test]
    fn zero_factors_give_zero_posterior_mean() {
        let f = FactorMatrix::zeros(1000, 3);
        let post = hyper_posterior(&f, &GaussianWishartParams::standard(3)).unwrap();
        assert!(post.mu0.amax() == 0.0);
    }

    #[test]
    fn scalar_conditional() {
        // one rating r with v = 1, tau = 1, mu = 0, lambda = 1 -> N(r/2, 1/2)
        let v = FactorMatrix::from_row_major(1, 1, vec![1.0]).unwrap();
        let (mean, precision) =
            row_conditional(&[(0, 3.0)], &v, &FactorHyper::standard(1), 1.0).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-15);
        assert!((precision[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn no_ratings_means_prior() {
        let v = FactorMatrix::zeros(1, 2);
        let hyper = FactorHyper {
            mu: DVector::from_vec(vec![1.0, -2.0]),
            lambda: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let (mean, precision) = row_conditional(&[], &v, &hyper, 2.0).unwrap();
        assert!((mean - &hyper.mu).amax() < 1e-12);
        assert_eq!(precision, hyper.lambda);
    }

    #[test]
    fn conditional_mean_solves_the_normal_equations() {
        let v = FactorMatrix::from_fn(4, 2, |r, c| ((r * 3 + c) % 5) as f64 * 0.3 - 0.5);
        let hyper = FactorHyper {
            mu: DVector::from_vec(vec![0.2, -0.1]),
            lambda: DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]),
        };
        let ratings = [(0, 1.0), (2, -0.5), (3, 2.0)];
        let (mean, _) = row_conditional(&ratings, &v, &hyper, 2.0).unwrap();
        // gradient of the quadratic objective vanishes at the mean
        let mut grad = -(&hyper.lambda * (&mean - &hyper.mu));
        for &(j, r) in &ratings {
            let vj = DVector::from_row_slice(v.row(j));
            grad += &vj * (2.0 * (r - vj.dot(&mean)));
        }
        assert!(grad.amax() < 1e-12);
    }

    #[test]
    fn scalar_wishart_is_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_element(1, 1, 0.4);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_wishart(&w, 3.0, &mut rng).unwrap()[(0, 0)])
            .sum::<f64>()
            / n as f64;
        assert!((mean / 1.2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn single_sweep() {
        let train = vec![
            RatingTuple::new(0, 0, 5.0),
            RatingTuple::new(0, 1, 3.0),
            RatingTuple::new(1, 0, 4.0),
        ];
        let mut cfg = GibbsConfig::new(2);
        cfg.sweeps = 1;
        let mut calls = 0;
        let out = run_gibbs(&train, 2, 2, &cfg, &train, |s| {
            calls += 1;
            assert_eq!(s.sweep, 1);
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(out.final_state.iteration, 1);
        assert_eq!(out.store.len(), 1);
    }
}

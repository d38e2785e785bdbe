//! Parameter update rules.
//!
//! The Langevin step for any parameter row `θ` visited through block `s` is
//!
//! ```text
//! θ ← θ + (ε/2)·[(N_s/v_s)·ḡ(θ) − Λθ/h̄] + ν,    ν ~ N(0, ε·I)
//! ```
//!
//! Single-machine SGLD is the case `N_s = N`, `v_s = 1`, `h̄ = h`. The SGD
//! baseline is the same drift with `ν ≡ 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{minibatch_mean, ChainState, ModelConfig, Param, RatingTuple};

/// Polynomially decaying step size `ε_t = ε₀ (1 + t/κ)^(−γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub eps0: f64,
    pub kappa: f64,
    pub gamma_decay: f64,
}

impl StepSchedule {
    /// `gamma_decay` must lie in `(0.5, 1]` so that `Σε = ∞` and `Σε² < ∞`.
    pub fn new(eps0: f64, kappa: f64, gamma_decay: f64) -> Result<Self> {
        if !(eps0 > 0.0 && eps0.is_finite()) {
            return Err(Error::arg(format!("eps0 must be positive, got {eps0}")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::arg(format!("kappa must be positive, got {kappa}")));
        }
        if !(gamma_decay > 0.5 && gamma_decay <= 1.0) {
            return Err(Error::arg(format!(
                "gamma_decay must lie in (0.5, 1], got {gamma_decay}"
            )));
        }
        Ok(StepSchedule {
            eps0,
            kappa,
            gamma_decay,
        })
    }

    pub fn step_size(&self, t: u64) -> f64 {
        self.eps0 * (1.0 + t as f64 / self.kappa).powf(-self.gamma_decay)
    }
}

/// Gamma distribution in the shape/rate convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(Error::arg(format!(
                "Gamma({shape}, {rate}) needs positive shape and rate"
            )));
        }
        Ok(GammaParams { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // rand_distr is parameterised by scale = 1/rate
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("validated Gamma parameters")
            .sample(rng)
    }
}

/// Source of standard-normal variates for the injected Langevin noise.
pub trait Noise {
    fn standard_normal(&mut self) -> f64;
}

/// Noise that always returns zero; turns a Langevin step into an SGD step.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

/// Reproducible random streams.
///
/// `(seed, stream_id)` selects a ChaCha8 stream; each stream is further cut
/// into segments of 2^36 words so that, for instance, every round of a
/// `(chain, block)` pair owns its own disjoint run of variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSource {
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        NoiseSource { seed, stream_id }
    }

    /// Generator positioned at the start of `segment`.
    pub fn rng(&self, segment: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(u128::from(segment) << 36);
        rng
    }

    pub fn gaussian(&self, segment: u64) -> GaussianStream {
        GaussianStream {
            rng: self.rng(segment),
        }
    }
}

/// Standard-normal draws from one segment of a [`NoiseSource`].
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl Noise for GaussianStream {
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Block size `N_s` and visit frequency `v_s`; the gradient scale is `N_s / v_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockScale {
    pub block_size: usize,
    pub visit: f64,
}

impl BlockScale {
    /// Single-machine case: the block is the whole dataset.
    pub fn whole(n: usize) -> Self {
        BlockScale {
            block_size: n,
            visit: 1.0,
        }
    }

    pub fn effective_n(&self) -> f64 {
        self.block_size as f64 / self.visit
    }

    fn validate(&self) -> Result<()> {
        if !(self.visit > 0.0 && self.visit <= 1.0) {
            return Err(Error::arg(format!(
                "visit frequency {} outside (0, 1]",
                self.visit
            )));
        }
        Ok(())
    }
}

/// One Langevin step for a parameter row, written into `out`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn langevin_step<N: Noise + ?Sized>(
    current: &[f64],
    mean_score: &[f64],
    precision: &[f64],
    effective_n: f64,
    h_bar: f64,
    eps: f64,
    noise: &mut N,
    out: &mut [f64],
) {
    let half = 0.5 * eps;
    let sd = eps.sqrt();
    for d in 0..current.len() {
        let drift = effective_n * mean_score[d] - precision[d] * current[d] / h_bar;
        out[d] = current[d] + half * drift + sd * noise.standard_normal();
    }
}

fn check_step(eps: f64, h_bar: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::arg(format!("step size must be positive, got {eps}")));
    }
    if !(h_bar > 0.0 && h_bar <= 1.0) {
        return Err(Error::arg(format!("bias corrector {h_bar} outside (0, 1]")));
    }
    Ok(())
}

/// Langevin update of any single parameter; see the module docs.
#[allow(clippy::too_many_arguments)]
pub fn dsgld_update<N: Noise + ?Sized>(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    param: Param,
    scale: BlockScale,
    h_bar: f64,
    eps: f64,
    noise: &mut N,
) -> Result<Vec<f64>> {
    check_step(eps, h_bar)?;
    scale.validate()?;
    if !minibatch.iter().any(|t| param.touches(t)) {
        return Err(Error::arg(format!(
            "{param:?} does not appear in the minibatch"
        )));
    }
    let mean = minibatch_mean(state, tau, minibatch, param)?;
    let current = param.value(state);
    let precision = param.prior_precision(state);
    let mut out = vec![0.0; current.len()];
    langevin_step(
        &current,
        &mean,
        &precision,
        scale.effective_n(),
        h_bar,
        eps,
        noise,
        &mut out,
    );
    if let Some(x) = out.iter().find(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            chain: state.chain_id,
            iteration: state.iteration,
            detail: format!("{param:?} update produced {x}"),
        });
    }
    Ok(out)
}

/// New `U_user`.
#[allow(clippy::too_many_arguments)]
pub fn dsgld_update_user<N: Noise + ?Sized>(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    user: usize,
    scale: BlockScale,
    h_bar: f64,
    eps: f64,
    noise: &mut N,
) -> Result<Vec<f64>> {
    dsgld_update(
        state,
        tau,
        minibatch,
        Param::User(user),
        scale,
        h_bar,
        eps,
        noise,
    )
}

/// New `V_item`.
#[allow(clippy::too_many_arguments)]
pub fn dsgld_update_item<N: Noise + ?Sized>(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    item: usize,
    scale: BlockScale,
    h_bar: f64,
    eps: f64,
    noise: &mut N,
) -> Result<Vec<f64>> {
    dsgld_update(
        state,
        tau,
        minibatch,
        Param::Item(item),
        scale,
        h_bar,
        eps,
        noise,
    )
}

/// New `(a_user, b_item)`. `h_bars` holds the user and item correctors.
#[allow(clippy::too_many_arguments)]
pub fn dsgld_update_biases<N: Noise + ?Sized>(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    user: usize,
    item: usize,
    scale: BlockScale,
    h_bars: (f64, f64),
    eps: f64,
    noise: &mut N,
) -> Result<(f64, f64)> {
    let a = dsgld_update(
        state,
        tau,
        minibatch,
        Param::UserBias(user),
        scale,
        h_bars.0,
        eps,
        noise,
    )?;
    let b = dsgld_update(
        state,
        tau,
        minibatch,
        Param::ItemBias(item),
        scale,
        h_bars.1,
        eps,
        noise,
    )?;
    Ok((a[0], b[0]))
}

/// SGD baseline: the Langevin drift with no injected noise.
#[allow(clippy::too_many_arguments)]
pub fn sgd_update_user(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    user: usize,
    scale: BlockScale,
    h_bar: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    dsgld_update_user(
        state,
        tau,
        minibatch,
        user,
        scale,
        h_bar,
        eps,
        &mut ZeroNoise,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn sgd_update_item(
    state: &ChainState,
    tau: f64,
    minibatch: &[RatingTuple],
    item: usize,
    scale: BlockScale,
    h_bar: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    dsgld_update_item(
        state,
        tau,
        minibatch,
        item,
        scale,
        h_bar,
        eps,
        &mut ZeroNoise,
    )
}

/// Conjugate Gamma conditionals of every precision given the factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionConditionals {
    pub lambda_u: Vec<GammaParams>,
    pub lambda_v: Vec<GammaParams>,
    pub lambda_a: GammaParams,
    pub lambda_b: GammaParams,
}

pub fn precision_conditionals(
    state: &ChainState,
    cfg: &ModelConfig,
) -> Result<PrecisionConditionals> {
    let n_users = state.n_users() as f64;
    let n_items = state.n_items() as f64;
    let (alpha0, beta0) = (cfg.alpha0, cfg.beta0);
    let lambda_u = (0..state.dim())
        .map(|d| {
            GammaParams::new(
                alpha0 + n_users / 2.0,
                beta0 + 0.5 * state.u.column_sum_sq(d),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let lambda_v = (0..state.dim())
        .map(|d| {
            GammaParams::new(
                alpha0 + n_items / 2.0,
                beta0 + 0.5 * state.v.column_sum_sq(d),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let sum_sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    Ok(PrecisionConditionals {
        lambda_u,
        lambda_v,
        lambda_a: GammaParams::new(alpha0 + n_users / 2.0, beta0 + 0.5 * sum_sq(&state.a))?,
        lambda_b: GammaParams::new(alpha0 + n_items / 2.0, beta0 + 0.5 * sum_sq(&state.b))?,
    })
}

/// Replaces every precision with an independent draw from its conditional.
pub fn gibbs_sample_precisions<R: Rng + ?Sized>(
    state: &mut ChainState,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let cond = precision_conditionals(state, cfg)?;
    for (lambda, g) in state.lambda_u.iter_mut().zip(&cond.lambda_u) {
        *lambda = g.sample(rng);
    }
    for (lambda, g) in state.lambda_v.iter_mut().zip(&cond.lambda_v) {
        *lambda = g.sample(rng);
    }
    state.lambda_a = cond.lambda_a.sample(rng);
    state.lambda_b = cond.lambda_b.sample(rng);
    // a Gamma draw can underflow to zero for tiny shapes
    for lambda in state.lambda_u.iter_mut().chain(state.lambda_v.iter_mut()) {
        *lambda = lambda.max(f64::MIN_POSITIVE);
    }
    state.lambda_a = state.lambda_a.max(f64::MIN_POSITIVE);
    state.lambda_b = state.lambda_b.max(f64::MIN_POSITIVE);
    Ok(())
}

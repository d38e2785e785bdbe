//! The parameter server: owns every chain's global state and drives rounds.
//!
//! Each chain runs on its own thread. A round fetches the chain's group from
//! the cyclic schedule, sends one request per block of the group, waits for
//! all replies and installs them. Chains only meet at a coordinator, which
//! evaluates the burn-in rule, stores thinned samples and forwards per-round
//! reports to an observer. Until burn-in is declared every chain waits for
//! the coordinator's verdict after each round, because the rule pools the
//! RMSE of all chains; afterwards chains run freely.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{RoundReply, RoundRequest, SubParameters};
use super::store::{check_burn_in, SampleStore};
use super::transport::{InProcessTransport, Transport};
use super::worker::Worker;
use crate::error::{Error, Result};
use crate::eval::state_rmse;
use crate::model::{ChainState, ModelConfig, RatingTuple};
use crate::partition::{schedule_round, uniform_visits, PartitionPlan};
use crate::samplers::{gibbs_sample_precisions, Noise, NoiseSource, StepSchedule};

/// Streams `CHAIN_STREAM_BASE + c` carry chain `c`'s initialization (segment 0)
/// and its round-`r` precision draw (segment `r`). Worker streams are
/// `c · blocks + b`.
pub const CHAIN_STREAM_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Langevin noise, burn-in, thinning and precision resampling.
    Sampling,
    /// Plain SGD: no noise, fixed precisions, no samples.
    Optimization,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model: ModelConfig,
    pub schedule: StepSchedule,
    pub round_length: usize,
    pub chains: usize,
    pub max_rounds: u64,
    pub max_duration: Option<Duration>,
    pub burn_in_threshold: f64,
    pub thin: u64,
    pub hyper_interval: u64,
    pub mode: Mode,
    pub precision_init: f64,
    /// Standard deviation of the initial factor entries.
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            model: ModelConfig::default(),
            schedule: StepSchedule {
                eps0: 1e-5,
                kappa: 1000.0,
                gamma_decay: 0.51,
            },
            round_length: 50,
            chains: 1,
            max_rounds: 100,
            max_duration: None,
            burn_in_threshold: f64::INFINITY,
            thin: 10,
            hyper_interval: 50,
            mode: Mode::Sampling,
            precision_init: 2.0,
            init_sd: 0.1,
            seed: 0,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self, plan: &PartitionPlan) -> Result<()> {
        self.model.validate()?;
        if self.chains == 0 {
            return Err(Error::arg("at least one chain is required"));
        }
        if self.chains > plan.groups().len() {
            return Err(Error::arg(format!(
                "{} chains exceed the {} orthogonal groups",
                self.chains,
                plan.groups().len()
            )));
        }
        if self.thin == 0 || self.hyper_interval == 0 {
            return Err(Error::arg("thin and hyper_interval must be at least one"));
        }
        if !(self.precision_init > 0.0) || !(self.init_sd >= 0.0) {
            return Err(Error::arg(
                "initial precision must be positive and init_sd non-negative",
            ));
        }
        if self.burn_in_threshold.is_nan() {
            return Err(Error::arg("burn-in threshold is NaN"));
        }
        Ok(())
    }
}

/// What one chain did in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub chain: usize,
    pub round: u64,
    pub group: usize,
    pub eps: f64,
    /// Mean over the group's blocks of the last-minibatch RMSE.
    pub train_rmse: f64,
    /// RMSE of the current state on the evaluation tuples.
    pub eval_rmse: f64,
}

/// Everything the observer sees after a round completes for all live chains.
pub struct RoundEvent<'a> {
    pub round: u64,
    /// Sorted by chain id.
    pub reports: &'a [ChainReport],
    pub store: &'a SampleStore,
    /// Chains that stored a snapshot this round.
    pub sampled: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub round: u64,
    pub chain: usize,
    pub group: usize,
}

#[derive(Debug)]
pub struct RunOutput {
    pub store: SampleStore,
    pub final_states: Vec<ChainState>,
    /// Block-rounds attempted per chain.
    pub block_rounds: Vec<u64>,
    pub rounds_completed: Vec<u64>,
    /// Divergences; the affected chains stopped early.
    pub failures: Vec<Error>,
    pub trace: Vec<ScheduleEntry>,
}

enum ChainMsg {
    Report {
        report: ChainReport,
        sample: Option<ChainState>,
    },
    Done {
        chain: usize,
        last_round: u64,
        state: Box<ChainState>,
        block_rounds: u64,
        failure: Option<Error>,
    },
    Abort(Error),
}

/// Initial state of chain `c`: factors i.i.d. `N(0, init_sd²)`, zero biases.
pub fn init_chain(cfg: &ServerConfig, plan: &PartitionPlan, chain: usize) -> ChainState {
    let mut state = ChainState::new(
        plan.n_users(),
        plan.n_items(),
        cfg.model.dim,
        cfg.precision_init,
    );
    state.chain_id = chain;
    let mut g = NoiseSource::new(cfg.seed, CHAIN_STREAM_BASE + chain as u64).gaussian(0);
    for x in state
        .u
        .as_mut_slice()
        .iter_mut()
        .chain(state.v.as_mut_slice())
    {
        *x = cfg.init_sd * g.standard_normal();
    }
    state
}

/// One worker per block with the correctors of the uniform cyclic schedule.
pub fn build_workers(plan: &PartitionPlan, minibatch_size: usize) -> Result<Vec<Worker>> {
    let correctors = plan.correctors(minibatch_size, &uniform_visits(plan))?;
    (0..plan.blocks().len())
        .map(|b| Worker::from_plan(plan, b, &correctors))
        .collect()
}

/// Runs with in-process workers.
pub fn run_in_process<F>(
    cfg: &ServerConfig,
    plan: &PartitionPlan,
    eval: &[RatingTuple],
    observer: F,
) -> Result<RunOutput>
where
    F: FnMut(&RoundEvent) -> Result<()>,
{
    let transport = InProcessTransport::new(build_workers(plan, cfg.model.minibatch_size)?);
    run_server(cfg, plan, &transport, eval, observer)
}

struct ChainCtx<'a> {
    cfg: &'a ServerConfig,
    plan: &'a PartitionPlan,
    transport: &'a dyn Transport,
    eval: &'a [RatingTuple],
    visits: Vec<f64>,
    stop: &'a AtomicBool,
    start: Instant,
    wait_for_burn_in: bool,
}

/// Drives `cfg.chains` chains over `plan` until the round or time budget is
/// spent. `observer` is called once per completed round, in round order.
pub fn run_server<F>(
    cfg: &ServerConfig,
    plan: &PartitionPlan,
    transport: &dyn Transport,
    eval: &[RatingTuple],
    mut observer: F,
) -> Result<RunOutput>
where
    F: FnMut(&RoundEvent) -> Result<()>,
{
    cfg.validate(plan)?;
    let chains = cfg.chains;
    let sampling = cfg.mode == Mode::Sampling;
    let immediate = cfg.burn_in_threshold == f64::INFINITY;
    let mut store = SampleStore::new(chains);
    if sampling && immediate {
        store.mark_burn_in(0);
    }
    let stop = AtomicBool::new(false);
    let ctx = ChainCtx {
        cfg,
        plan,
        transport,
        eval,
        visits: uniform_visits(plan).v,
        stop: &stop,
        start: Instant::now(),
        wait_for_burn_in: sampling && !immediate,
    };

    let (tx, rx) = mpsc::channel::<ChainMsg>();
    let mut decisions: Vec<Option<mpsc::Sender<bool>>> = Vec::with_capacity(chains);
    let mut decision_rxs = Vec::with_capacity(chains);
    for _ in 0..chains {
        let (dtx, drx) = mpsc::channel();
        decisions.push(Some(dtx));
        decision_rxs.push(drx);
    }

    thread::scope(|scope| {
        for (c, drx) in decision_rxs.into_iter().enumerate() {
            let tx = tx.clone();
            let ctx = &ctx;
            thread::Builder::new()
                .name(format!("chain-{c}"))
                .spawn_scoped(scope, move || run_chain(ctx, c, &tx, &drx))
                .expect("spawning chain thread");
        }
        drop(tx);

        let mut pending: BTreeMap<u64, Vec<(ChainReport, Option<ChainState>)>> = BTreeMap::new();
        let mut last_round: Vec<Option<u64>> = vec![None; chains];
        let mut final_states: Vec<Option<ChainState>> = vec![None; chains];
        let mut block_rounds = vec![0u64; chains];
        let mut failures = Vec::new();
        let mut trace = Vec::new();
        let mut abort: Option<Error> = None;
        let mut next = 1u64;

        for msg in rx.iter() {
            match msg {
                ChainMsg::Report { report, sample } => {
                    pending
                        .entry(report.round)
                        .or_default()
                        .push((report, sample));
                }
                ChainMsg::Done {
                    chain,
                    last_round: lr,
                    state,
                    block_rounds: br,
                    failure,
                } => {
                    last_round[chain] = Some(lr);
                    final_states[chain] = Some(*state);
                    block_rounds[chain] = br;
                    failures.extend(failure);
                    decisions[chain] = None;
                }
                ChainMsg::Abort(e) => {
                    if abort.is_none() {
                        abort = Some(e);
                    }
                    stop.store(true, Ordering::SeqCst);
                    decisions.iter_mut().for_each(|d| *d = None);
                }
            }
            // Flush every round that all live chains have reported.
            loop {
                let complete = (0..chains).all(|c| {
                    last_round[c].is_some_and(|l| l < next)
                        || pending
                            .get(&next)
                            .is_some_and(|v| v.iter().any(|(r, _)| r.chain == c))
                });
                if !complete || !pending.contains_key(&next) {
                    break;
                }
                let mut entries = pending.remove(&next).unwrap();
                entries.sort_by_key(|(r, _)| r.chain);
                let mut sampled = Vec::new();
                for (report, sample) in &entries {
                    trace.push(ScheduleEntry {
                        round: next,
                        chain: report.chain,
                        group: report.group,
                    });
                    if let Some(state) = sample {
                        if store.collect_sample(report.chain, state, next, cfg.thin) {
                            sampled.push(report.chain);
                        }
                    }
                }
                let reports: Vec<ChainReport> = entries.into_iter().map(|(r, _)| r).collect();
                if ctx.wait_for_burn_in && !store.burn_in_complete() {
                    let rmses: Vec<f64> = reports.iter().map(|r| r.eval_rmse).collect();
                    let verdict = check_burn_in(&rmses, cfg.burn_in_threshold);
                    if verdict {
                        store.mark_burn_in(next);
                    }
                    for r in &reports {
                        if let Some(d) = &decisions[r.chain] {
                            let _ = d.send(verdict);
                        }
                    }
                }
                if abort.is_none() {
                    let event = RoundEvent {
                        round: next,
                        reports: &reports,
                        store: &store,
                        sampled: &sampled,
                    };
                    if let Err(e) = observer(&event) {
                        abort = Some(e);
                        stop.store(true, Ordering::SeqCst);
                        decisions.iter_mut().for_each(|d| *d = None);
                    }
                }
                next += 1;
            }
        }

        if let Some(e) = abort {
            return Err(e);
        }
        Ok(RunOutput {
            store,
            final_states: final_states
                .into_iter()
                .map(|s| s.expect("every chain reports its final state"))
                .collect(),
            rounds_completed: last_round.into_iter().map(|l| l.unwrap_or(0)).collect(),
            block_rounds,
            failures,
            trace,
        })
    })
}

fn run_chain(
    ctx: &ChainCtx,
    c: usize,
    tx: &mpsc::Sender<ChainMsg>,
    decision: &mpsc::Receiver<bool>,
) {
    let cfg = ctx.cfg;
    let mut state = init_chain(cfg, ctx.plan, c);
    let mut burned = !ctx.wait_for_burn_in;
    let mut block_rounds = 0u64;
    let mut last = 0u64;
    let mut failure = None;
    let chain_noise = NoiseSource::new(cfg.seed, CHAIN_STREAM_BASE + c as u64);

    for round in 1..=cfg.max_rounds {
        if ctx.stop.load(Ordering::SeqCst)
            || cfg.max_duration.is_some_and(|d| ctx.start.elapsed() >= d)
        {
            break;
        }
        let t = round - 1;
        let group = match schedule_round(ctx.plan, cfg.chains, t) {
            Ok(g) => g[c],
            Err(e) => {
                let _ = tx.send(ChainMsg::Abort(e));
                break;
            }
        };
        let eps = cfg.schedule.step_size(t);
        block_rounds += ctx.plan.groups()[group].block_ids.len() as u64;
        let replies = match run_round(ctx, &state, c, round, group, eps) {
            Ok(r) => r,
            Err(e @ Error::Divergence { .. }) => {
                failure = Some(e);
                break;
            }
            Err(e) => {
                let _ = tx.send(ChainMsg::Abort(e));
                break;
            }
        };
        for reply in &replies {
            reply
                .params
                .install(&mut state)
                .expect("reply shapes were checked");
        }
        state.iteration = round;
        if let Err(e) = state.check_finite() {
            failure = Some(e);
            break;
        }
        let train: Vec<f64> = replies
            .iter()
            .map(|r| r.train_rmse)
            .filter(|x| x.is_finite())
            .collect();
        let report = ChainReport {
            chain: c,
            round,
            group,
            eps,
            train_rmse: if train.is_empty() {
                f64::NAN
            } else {
                train.iter().sum::<f64>() / train.len() as f64
            },
            eval_rmse: state_rmse(&state, ctx.eval),
        };
        last = round;

        if !burned {
            if tx
                .send(ChainMsg::Report {
                    report,
                    sample: None,
                })
                .is_err()
            {
                break;
            }
            match decision.recv() {
                Ok(v) => burned = v,
                Err(_) => break,
            }
            continue;
        }
        let mut sample = None;
        if cfg.mode == Mode::Sampling {
            if round % cfg.thin == 0 {
                sample = Some(state.clone());
            }
            if round % cfg.hyper_interval == 0 {
                let mut rng = chain_noise.rng(round);
                if let Err(e) = gibbs_sample_precisions(&mut state, &cfg.model, &mut rng) {
                    let _ = tx.send(ChainMsg::Abort(e));
                    break;
                }
            }
        }
        if tx.send(ChainMsg::Report { report, sample }).is_err() {
            break;
        }
    }
    let _ = tx.send(ChainMsg::Done {
        chain: c,
        last_round: last,
        state: Box::new(state),
        block_rounds,
        failure,
    });
}

/// Dispatches one round of chain `c` and returns the validated replies.
fn run_round(
    ctx: &ChainCtx,
    state: &ChainState,
    c: usize,
    round: u64,
    group: usize,
    eps: f64,
) -> Result<Vec<RoundReply>> {
    let cfg = ctx.cfg;
    let n_blocks = ctx.plan.blocks().len() as u64;
    let mut pending = Vec::new();
    for &b in &ctx.plan.groups()[group].block_ids {
        let block = ctx.plan.block(b);
        let request = RoundRequest {
            chain_id: c,
            block_id: b,
            round,
            params: SubParameters::extract(state, block.row_range(), block.col_range()),
            lambda_u: state.lambda_u.clone(),
            lambda_v: state.lambda_v.clone(),
            lambda_a: state.lambda_a,
            lambda_b: state.lambda_b,
            tau: cfg.model.tau,
            eps,
            round_length: cfg.round_length,
            minibatch_size: cfg.model.minibatch_size,
            visit: ctx.visits[b],
            noise: NoiseSource::new(cfg.seed, c as u64 * n_blocks + b as u64),
            inject_noise: cfg.mode == Mode::Sampling,
        };
        pending.push((b, ctx.transport.submit(request)));
    }
    let mut replies = Vec::with_capacity(pending.len());
    let mut first_err = None;
    for (b, p) in pending {
        match p.and_then(|p| p.wait()) {
            Ok(r) => {
                let block = ctx.plan.block(b);
                if r.chain_id != c || r.block_id != b || r.round != round {
                    first_err.get_or_insert(Error::Protocol(format!(
                        "reply for chain {} block {} round {} does not match request",
                        r.chain_id, r.block_id, r.round
                    )));
                } else if r.params.rows() != block.row_range()
                    || r.params.cols() != block.col_range()
                {
                    first_err.get_or_insert(Error::Protocol(format!(
                        "reply shape mismatch from block {b}"
                    )));
                } else {
                    r.params
                        .check_shape()
                        .map_err(|e| first_err.get_or_insert(e))
                        .ok();
                    replies.push(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    check_disjoint_writes(&replies)?;
    Ok(replies)
}

fn overlaps(a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> bool {
    !a.is_empty() && !b.is_empty() && a.start < b.end && b.start < a.end
}

/// Within one round the replies must write disjoint rows of `U`/`a` and of `V`/`b`.
pub fn check_disjoint_writes(replies: &[RoundReply]) -> Result<()> {
    for (k, x) in replies.iter().enumerate() {
        for y in &replies[k + 1..] {
            if overlaps(&x.params.rows(), &y.params.rows())
                || overlaps(&x.params.cols(), &y.params.cols())
            {
                return Err(Error::Protocol(format!(
                    "blocks {} and {} write overlapping parameter rows",
                    x.block_id, y.block_id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{split_column, split_square};

    fn grid_data(n: usize) -> Vec<RatingTuple> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if (i * 7 + j * 3) % 4 != 0 {
                    out.push(RatingTuple::new(i, j, ((i + 2 * j) % 5) as f64 + 1.0));
                }
            }
        }
        out
    }

    fn config(chains: usize, rounds: u64) -> ServerConfig {
        ServerConfig {
            model: ModelConfig {
                dim: 2,
                minibatch_size: 4,
                ..ModelConfig::default()
            },
            schedule: StepSchedule::new(1e-3, 100.0, 0.51).unwrap(),
            round_length: 3,
            chains,
            max_rounds: rounds,
            thin: 1,
            hyper_interval: 2,
            seed: 7,
            ..ServerConfig::default()
        }
    }

    #[test]
    fn zero_round_length_leaves_state_alone() {
        let data = grid_data(4);
        let plan = split_square(&data, 4, 4, 1).unwrap();
        let mut cfg = config(1, 5);
        cfg.round_length = 0;
        cfg.hyper_interval = 1000;
        cfg.burn_in_threshold = 0.0;
        let out = run_in_process(&cfg, &plan, &data, |_| Ok(())).unwrap();
        let mut init = init_chain(&cfg, &plan, 0);
        init.iteration = 5;
        assert_eq!(out.final_states[0], init);
        assert!(out.store.is_empty());
    }

    #[test]
    fn two_chains_follow_the_rotation() {
        let data = grid_data(4);
        let plan = split_square(&data, 4, 4, 2).unwrap();
        let out = run_in_process(&config(2, 4), &plan, &data, |_| Ok(())).unwrap();
        let groups: Vec<(u64, usize, usize)> = out
            .trace
            .iter()
            .map(|e| (e.round, e.chain, e.group))
            .collect();
        assert_eq!(&groups[..4], &[(1, 0, 0), (1, 1, 1), (2, 0, 1), (2, 1, 0)]);
        assert_eq!(out.block_rounds, vec![8, 8]);
    }

    #[test]
    fn observer_sees_rounds_in_order() {
        let data = grid_data(6);
        let plan = split_column(&data, 6, 6, 3).unwrap();
        let mut seen = Vec::new();
        run_in_process(&config(3, 6), &plan, &data, |ev| {
            seen.push((
                ev.round,
                ev.reports.iter().map(|r| r.chain).collect::<Vec<_>>(),
            ));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 6);
        for (k, (round, chains)) in seen.iter().enumerate() {
            assert_eq!(*round, k as u64 + 1);
            assert_eq!(chains, &vec![0, 1, 2]);
        }
    }

    #[test]
    fn observer_error_aborts() {
        let data = grid_data(4);
        let plan = split_square(&data, 4, 4, 1).unwrap();
        let r = run_in_process(&config(1, 50), &plan, &data, |ev| {
            if ev.round == 3 {
                Err(Error::arg("stop"))
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
    }

    #[test]
    fn too_many_chains_rejected() {
        let data = grid_data(4);
        let plan = split_square(&data, 4, 4, 2).unwrap();
        assert!(run_in_process(&config(3, 1), &plan, &data, |_| Ok(())).is_err());
    }

    #[test]
    fn overlapping_replies_are_rejected() {
        let mk =
            |b: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| RoundReply {
                chain_id: 0,
                block_id: b,
                round: 1,
                iterations: 0,
                params: SubParameters {
                    row_start: rows.start,
                    col_start: cols.start,
                    dim: 1,
                    u: vec![0.0; rows.len()],
                    v: vec![0.0; cols.len()],
                    a: vec![0.0; rows.len()],
                    b: vec![0.0; cols.len()],
                },
                train_rmse: 0.0,
            };
        assert!(check_disjoint_writes(&[mk(0, 0..2, 0..2), mk(3, 2..4, 2..4)]).is_ok());
        assert!(check_disjoint_writes(&[mk(0, 0..2, 0..4), mk(1, 2..4, 0..4)]).is_err());
    }
}

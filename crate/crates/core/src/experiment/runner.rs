//! Wires data, partitioning, the runtime and evaluation together.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Algorithm, RunConfig, TransportKind};
use super::metrics::{read_metrics, MetricsWriter};
use crate::cluster::transport::serve;
use crate::cluster::{
    build_workers, InProcessTransport, Mode, RunOutput, ScheduleEntry, ServerConfig,
    SocketTransport, Transport,
};
use crate::data::{load_ratings, split_train_test, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    relative_improvement, rmse, state_rmse, Clip, PredictiveEnsemble, RunningPredictor,
};
use crate::gibbs::{run_gibbs, GibbsConfig};
use crate::model::{ModelConfig, RatingTuple};
use crate::partition::{split_column, split_square, PartitionPlan};
use crate::samplers::StepSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    /// Posterior-averaged test RMSE when samples exist, else the point estimate's.
    pub final_test_rmse: f64,
    pub samples_collected: usize,
    pub wall_seconds: f64,
    pub rounds: u64,
    pub metrics_rows: u64,
}

impl RunSummary {
    pub fn render(&self) -> String {
        format!(
            "algorithm {}\nfinal test RMSE {:.6}\nsamples collected {}\nrounds {}\nwall time {:.3} s\n",
            self.algorithm, self.final_test_rmse, self.samples_collected, self.rounds, self.wall_seconds
        )
    }
}

/// Loads and splits the configured rating file, or generates synthetic data.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => split_train_test(load_ratings(path, cfg.seed)?, cfg.test_fraction, cfg.seed),
        None => Ok(synth_generate(&cfg.synth_spec())?.dataset),
    }
}

/// Block layout implied by the algorithm and worker count.
pub fn build_plan(cfg: &RunConfig, data: &Dataset) -> Result<PartitionPlan> {
    let (l, m) = (data.n_users, data.n_items);
    match cfg.algorithm {
        Algorithm::Sgld | Algorithm::Sgd | Algorithm::Gibbs => split_square(&data.train, l, m, 1),
        Algorithm::DsgldS => split_square(&data.train, l, m, cfg.square_side()?),
        Algorithm::DsgldC => split_column(&data.train, l, m, cfg.workers),
        Algorithm::Dsgd => split_square(&data.train, l, m, cfg.workers),
    }
}

/// Runtime settings derived from a run configuration.
pub fn server_config(cfg: &RunConfig) -> Result<ServerConfig> {
    Ok(ServerConfig {
        model: ModelConfig {
            dim: cfg.dim,
            tau: cfg.tau,
            alpha0: cfg.alpha0,
            beta0: cfg.beta0,
            minibatch_size: cfg.minibatch_size,
        },
        schedule: StepSchedule::new(cfg.eps0, cfg.kappa, cfg.gamma_decay)?,
        round_length: cfg.round_length,
        chains: cfg.chains,
        max_rounds: cfg.max_rounds,
        max_duration: cfg
            .max_seconds
            .is_finite()
            .then(|| Duration::from_secs_f64(cfg.max_seconds)),
        burn_in_threshold: cfg.burn_in_rmse_threshold,
        thin: cfg.thin,
        hyper_interval: cfg.hyper_interval,
        mode: if cfg.algorithm.is_sampler() {
            Mode::Sampling
        } else {
            Mode::Optimization
        },
        precision_init: cfg.precision_init,
        init_sd: cfg.init_sd,
        seed: cfg.seed,
    })
}

/// Seeded subsample of the test set for per-round RMSE, in original order.
pub fn eval_subset(test: &[RatingTuple], fraction: f64, seed: u64) -> Vec<RatingTuple> {
    if fraction >= 1.0 || test.is_empty() {
        return test.to_vec();
    }
    let k = ((fraction * test.len() as f64).round() as usize).clamp(1, test.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut picked = index::sample(&mut rng, test.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| test[i]).collect()
}

fn clip_of(cfg: &RunConfig) -> Option<Clip> {
    cfg.clip.map(|(min, max)| Clip { min, max })
}

fn trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace");
    PathBuf::from(s)
}

fn write_trace(path: &Path, plan: &PartitionPlan, trace: &[ScheduleEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round\tchain\tgroup\tblocks")?;
    for e in trace {
        let blocks: Vec<String> = plan.groups()[e.group]
            .block_ids
            .iter()
            .map(|b| b.to_string())
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            e.round,
            e.chain,
            e.group,
            blocks.join(",")
        )?;
    }
    w.flush()?;
    Ok(())
}

fn make_transport(cfg: &RunConfig, plan: &PartitionPlan) -> Result<Box<dyn Transport>> {
    let timeout = Duration::from_secs_f64(cfg.reply_timeout_seconds.min(1e9));
    Ok(match cfg.transport {
        TransportKind::InProcess => Box::new(
            InProcessTransport::new(build_workers(plan, cfg.minibatch_size)?).with_timeout(timeout),
        ),
        TransportKind::Socket => {
            let addrs = cfg
                .worker_addrs
                .iter()
                .map(|a| {
                    a.to_socket_addrs()
                        .ok()
                        .and_then(|mut it| it.next())
                        .ok_or_else(|| Error::Config {
                            key: "worker_addrs".into(),
                            message: format!("cannot resolve {a:?}"),
                        })
                })
                .collect::<Result<Vec<SocketAddr>>>()?;
            if addrs.len() != plan.blocks().len() {
                return Err(Error::Config {
                    key: "worker_addrs".into(),
                    message: format!(
                        "{} addresses for {} blocks",
                        addrs.len(),
                        plan.blocks().len()
                    ),
                });
            }
            Box::new(SocketTransport::new(addrs, Some(timeout)))
        }
    })
}

/// Validates `cfg`, loads its data and runs it.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    run_on_dataset(cfg, &data)
}

/// Runs `cfg` on already loaded data, writing metrics to `cfg.out`.
pub fn run_on_dataset(cfg: &RunConfig, data: &Dataset) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let mut metrics = MetricsWriter::create(&cfg.out, &cfg.entries(), cfg.clock)?;
    if cfg.algorithm == Algorithm::Gibbs {
        return run_gibbs_experiment(cfg, data, &mut metrics, start);
    }
    let plan = build_plan(cfg, data)?;
    let scfg = server_config(cfg)?;
    let eval = eval_subset(&data.test, cfg.eval_fraction, cfg.seed);
    let clip = clip_of(cfg);
    let algo = cfg.algorithm.name();
    let mut running = RunningPredictor::new(data.test.clone());
    let mut rounds = 0;

    let transport = make_transport(cfg, &plan)?;
    let result = crate::cluster::run_server(&scfg, &plan, transport.as_ref(), &eval, |ev| {
        rounds = ev.round;
        for &c in ev.sampled {
            let snap = ev
                .store
                .snapshots(c)
                .last()
                .expect("sampled chain has a snapshot");
            running.add(&snap.state)?;
        }
        if !ev.store.is_empty() {
            let train = mean_finite(ev.reports.iter().map(|r| r.train_rmse));
            let test = if data.test.is_empty() {
                f64::NAN
            } else {
                running.rmse(clip)?
            };
            metrics.emit(
                ev.round,
                "ensemble",
                algo,
                train,
                test,
                ev.store.len(),
                ev.reports[0].eps,
            )?;
        } else {
            for r in ev.reports {
                metrics.emit(
                    ev.round,
                    &r.chain.to_string(),
                    algo,
                    r.train_rmse,
                    r.eval_rmse,
                    0,
                    r.eps,
                )?;
            }
        }
        Ok(())
    });
    drop(transport);
    let out: RunOutput = result?;
    if cfg.trace {
        write_trace(&trace_path(&cfg.out), &plan, &out.trace)?;
    }
    if let Some(e) = out.failures.into_iter().next() {
        return Err(e);
    }
    let final_test_rmse = if data.test.is_empty() {
        f64::NAN
    } else if !out.store.is_empty() {
        let ens = PredictiveEnsemble::from_store(&out.store)?;
        rmse(&ens.predict_all(&data.test)?, &data.test, clip)?
    } else {
        let per_chain: Vec<f64> = out
            .final_states
            .iter()
            .map(|s| match clip {
                None => Ok(state_rmse(s, &data.test)),
                Some(c) => {
                    let preds: Vec<f64> = data
                        .test
                        .iter()
                        .map(|t| s.predict(t.user, t.item))
                        .collect::<Result<_>>()?;
                    rmse(&preds, &data.test, Some(c))
                }
            })
            .collect::<Result<_>>()?;
        per_chain.iter().sum::<f64>() / per_chain.len() as f64
    };
    Ok(RunSummary {
        algorithm: cfg.algorithm,
        final_test_rmse,
        samples_collected: out.store.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
        rounds,
        metrics_rows: metrics.rows(),
    })
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Gibbs settings derived from a run configuration.
pub fn gibbs_config(cfg: &RunConfig) -> GibbsConfig {
    GibbsConfig {
        tau: cfg.tau,
        sweeps: cfg.max_rounds,
        burn_in_threshold: cfg.burn_in_rmse_threshold,
        thin: cfg.thin,
        init_sd: cfg.init_sd,
        seed: cfg.seed,
        max_duration: cfg
            .max_seconds
            .is_finite()
            .then(|| Duration::from_secs_f64(cfg.max_seconds)),
        ..GibbsConfig::new(cfg.dim)
    }
}

fn run_gibbs_experiment(
    cfg: &RunConfig,
    data: &Dataset,
    metrics: &mut MetricsWriter,
    start: Instant,
) -> Result<RunSummary> {
    let mut gcfg = gibbs_config(cfg);
    if cfg.warm_start_rounds > 0 {
        let warm = RunConfig {
            algorithm: Algorithm::Sgd,
            max_rounds: cfg.warm_start_rounds,
            ..cfg.clone()
        };
        let plan = build_plan(&warm, data)?;
        let out = crate::cluster::run_in_process(&server_config(&warm)?, &plan, &[], |_| Ok(()))?;
        let s = &out.final_states[0];
        gcfg.initial = Some((s.u.clone(), s.v.clone()));
    }
    let eval = eval_subset(&data.test, cfg.eval_fraction, cfg.seed);
    let clip = clip_of(cfg);
    let mut running = RunningPredictor::new(data.test.clone());
    let mut rounds = 0;
    let out = run_gibbs(&data.train, data.n_users, data.n_items, &gcfg, &eval, |s| {
        rounds = s.sweep;
        if s.sampled {
            running.add(
                &s.store
                    .snapshots(0)
                    .last()
                    .expect("snapshot was just stored")
                    .state,
            )?;
        }
        if !s.store.is_empty() {
            let test = if data.test.is_empty() {
                f64::NAN
            } else {
                running.rmse(clip)?
            };
            metrics.emit(
                s.sweep,
                "ensemble",
                "gibbs",
                s.train_rmse,
                test,
                s.store.len(),
                0.0,
            )?;
        } else {
            metrics.emit(s.sweep, "0", "gibbs", s.train_rmse, s.eval_rmse, 0, 0.0)?;
        }
        Ok(())
    })?;
    let final_test_rmse = if data.test.is_empty() {
        f64::NAN
    } else if !out.store.is_empty() {
        running.rmse(clip)?
    } else {
        state_rmse(&out.final_state, &data.test)
    };
    Ok(RunSummary {
        algorithm: Algorithm::Gibbs,
        final_test_rmse,
        samples_collected: out.store.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
        rounds,
        metrics_rows: metrics.rows(),
    })
}

/// Serves one block over TCP for a run configured by `cfg`.
pub fn serve_worker(cfg: &RunConfig, block: usize, listen: &str) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let plan = build_plan(cfg, &data)?;
    let mut workers = build_workers(&plan, cfg.minibatch_size)?;
    if block >= workers.len() {
        return Err(Error::Index {
            what: "block",
            index: block,
            bound: workers.len(),
        });
    }
    let worker = workers.swap_remove(block);
    let listener = TcpListener::bind(listen)?;
    serve(listener, Arc::new(worker))
}

/// Final RMSE of a metrics file, plus its relative improvement over a
/// baseline file when given.
pub fn summarize(metrics: impl AsRef<Path>, baseline: Option<&Path>) -> Result<String> {
    let final_rmse = |p: &Path| -> Result<(String, f64)> {
        let rows = read_metrics(p)?;
        let last = rows
            .last()
            .ok_or_else(|| Error::arg(format!("{} has no metrics rows", p.display())))?;
        Ok((last.algorithm.clone(), last.test_rmse))
    };
    let (algo, r_x) = final_rmse(metrics.as_ref())?;
    let mut out = format!("{algo}: final test RMSE {r_x:.6}\n");
    if let Some(b) = baseline {
        let (balgo, r_d) = final_rmse(b)?;
        let ri = relative_improvement(r_x, r_d)?;
        out.push_str(&format!(
            "{balgo}: final test RMSE {r_d:.6}\nrelative improvement over {balgo}: {:+.2}%\n",
            100.0 * ri
        ));
    }
    Ok(out)
}

mod common;

use common::*;
use dsgld::cluster::{build_workers, check_disjoint_writes, run_in_process, ServerConfig};
use dsgld::data::{split_train_test, Dataset, IdMap};
use dsgld::eval::{relative_improvement, rmse, PredictiveEnsemble};
use dsgld::gibbs::{sample_side, FactorHyper};
use dsgld::model::{bias_corrector, full_gradient, g3, minibatch_mean, Param};
use dsgld::partition::{is_orthogonal, schedule_round, split_column, split_square, PartitionPlan};
use dsgld::samplers::{
    dsgld_update, dsgld_update_user, sgd_update_user, BlockScale, NoiseSource, StepSchedule,
    ZeroNoise,
};
use dsgld::{ChainState, FactorMatrix, ModelConfig, RatingTuple};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tuples_strategy(
    max_users: usize,
    max_items: usize,
    max_n: usize,
) -> impl Strategy<Value = (usize, usize, Vec<RatingTuple>)> {
    (1..=max_users, 1..=max_items).prop_flat_map(move |(l, m)| {
        let t = (0..l, 0..m, -2.0..2.0f64).prop_map(|(u, i, r)| RatingTuple::new(u, i, r));
        (Just(l), Just(m), prop::collection::vec(t, 1..=max_n))
    })
}

/// A plan and the number of tuples it was built from.
fn plan_strategy() -> impl Strategy<Value = (PartitionPlan, usize)> {
    (tuples_strategy(12, 12, 60), 1..=6usize, any::<bool>()).prop_filter_map(
        "split needs enough rows and columns",
        |((l, m, tuples), k, square)| {
            let plan = if square {
                split_square(&tuples, l, m, k)
            } else {
                split_column(&tuples, l, m, k)
            };
            plan.ok().map(|p| (p, tuples.len()))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn estimators_are_unbiased_over_all_minibatches(
        (l, m_items, tuples) in tuples_strategy(3, 3, 6),
        m in 1..=3usize,
        seed in any::<u64>(),
        tau in 0.2..3.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, l, m_items, 2);
        let n = tuples.len();
        let batches = all_minibatches(n, m);
        for param in all_params(&state) {
            let n_i = tuples.iter().filter(|t| param.touches(t)).count();
            if n_i == 0 {
                continue;
            }
            let exact = full_gradient(&state, tau, &tuples, param);
            let h = bias_corrector(n_i, n, m).unwrap();
            let (value, prec) = (param.value(&state), param.prior_precision(&state));
            let mut g1 = vec![0.0; exact.len()];
            let mut g3m = vec![0.0; exact.len()];
            for idx in &batches {
                let mb: Vec<RatingTuple> = idx.iter().map(|&k| tuples[k]).collect();
                let mean = minibatch_mean(&state, tau, &mb, param).unwrap();
                let est = g3(&state, tau, &mb, param, n as f64, h).unwrap();
                if !mb.iter().any(|t| param.touches(t)) {
                    prop_assert!(est.iter().all(|&x| x == 0.0));
                }
                for d in 0..exact.len() {
                    g1[d] += (n as f64 * mean[d] - prec[d] * value[d]) / batches.len() as f64;
                    g3m[d] += est[d] / batches.len() as f64;
                }
            }
            let scale = exact.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            prop_assert!(max_abs_diff(&g1, &exact) <= 1e-12 * scale);
            prop_assert!(max_abs_diff(&g3m, &exact) <= 1e-12 * scale);
        }
    }

    #[test]
    fn corrector_is_the_inclusion_probability(n in 1..=6usize, frac in 0.0..1.0f64, m in 1..=3usize) {
        let n_i = 1 + ((n - 1) as f64 * frac) as usize;
        let h = bias_corrector(n_i, n, m).unwrap();
        prop_assert!((h - enumerated_inclusion(n_i, n, m)).abs() <= 1e-12);
        prop_assert!(h > 0.0 && h <= 1.0);
    }

    #[test]
    fn gradients_match_finite_differences(
        (l, m, tuples) in tuples_strategy(4, 4, 12),
        dim in 1..=4usize,
        seed in any::<u64>(),
        tau in 0.2..3.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = random_state(&mut rng, l, m, dim);
        let clamp = |x: &mut f64| *x = x.clamp(-2.0, 2.0);
        state.u.as_mut_slice().iter_mut().chain(state.v.as_mut_slice()).for_each(clamp);
        for param in all_params(&state) {
            let g = full_gradient(&state, tau, &tuples, param);
            for (d, &gd) in g.iter().enumerate() {
                let h = 1e-4;
                let mut plus = state.clone();
                *coord(&mut plus, param, d) += h;
                let mut minus = state.clone();
                *coord(&mut minus, param, d) -= h;
                let fd = (log_joint(&plus, tau, &tuples) - log_joint(&minus, tau, &tuples)) / (2.0 * h);
                prop_assert!((fd - gd).abs() <= 1e-5 * gd.abs().max(1.0), "{param:?}[{d}]: {fd} vs {gd}");
            }
        }
    }

    #[test]
    fn predict_is_symmetric_under_swapping_sides(n in 1..=5usize, dim in 1..=3usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_state(&mut rng, n, n, dim);
        let mut swapped = s.clone();
        std::mem::swap(&mut swapped.u, &mut swapped.v);
        std::mem::swap(&mut swapped.a, &mut swapped.b);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (s.predict(i, j).unwrap(), swapped.predict(j, i).unwrap());
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn step_sizes_never_increase(eps0 in 1e-8..1.0f64, kappa in 1.0..1e5f64, gamma in 0.501..1.0f64, t in 0..10_000_000u64) {
        let s = StepSchedule::new(eps0, kappa, gamma).unwrap();
        prop_assert!(s.step_size(t + 1) <= s.step_size(t));
    }

    #[test]
    fn sgd_is_langevin_without_noise(seed in any::<u64>(), eps in 1e-6..1e-2f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, 3, 3, 2);
        let tuples = six_tuples();
        let scale = BlockScale::whole(6);
        let x = sgd_update_user(&state, 2.0, &tuples, 1, scale, 0.7, eps).unwrap();
        let y = dsgld_update_user(&state, 2.0, &tuples, 1, scale, 0.7, eps, &mut ZeroNoise).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn plans_tile_the_data_into_orthogonal_groups((plan, n) in plan_strategy()) {
        let total: usize = plan.blocks().iter().map(|b| b.len()).sum();
        prop_assert_eq!(total, n);
        for b in plan.blocks() {
            for t in b.tuples() {
                prop_assert!(b.row_range().contains(&t.user) && b.col_range().contains(&t.item));
            }
        }
        for x in plan.blocks() {
            for y in plan.blocks() {
                if x.id() != y.id() {
                    let overlap = x.row_range().start < y.row_range().end
                        && y.row_range().start < x.row_range().end
                        && x.col_range().start < y.col_range().end
                        && y.col_range().start < x.col_range().end;
                    prop_assert!(!overlap);
                }
            }
        }
        for g in plan.groups() {
            for (k, &x) in g.block_ids.iter().enumerate() {
                for &y in &g.block_ids[k + 1..] {
                    prop_assert!(is_orthogonal(plan.block(x), plan.block(y)));
                }
            }
        }
        let groups = plan.groups().len();
        for chains in 1..=groups {
            let mut seen = vec![vec![0; groups]; chains];
            for t in 0..groups as u64 {
                for (c, g) in schedule_round(&plan, chains, t).unwrap().into_iter().enumerate() {
                    seen[c][g] += 1;
                }
            }
            prop_assert!(seen.iter().flatten().all(|&n| n == 1));
        }
    }

    #[test]
    fn rmse_ignores_order(preds in prop::collection::vec(-3.0..3.0f64, 1..30), seed in any::<u64>()) {
        let tuples: Vec<RatingTuple> = preds.iter().enumerate().map(|(k, &p)| RatingTuple::new(k, 0, p.sin())).collect();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let p2: Vec<f64> = order.iter().map(|&k| preds[k]).collect();
        let t2: Vec<RatingTuple> = order.iter().map(|&k| tuples[k]).collect();
        let (x, y) = (rmse(&preds, &tuples, None).unwrap(), rmse(&p2, &t2, None).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
    }

    #[test]
    fn relative_improvement_sign(r_d in 0.1..2.0f64, delta in -0.09..0.09f64) {
        prop_assert_eq!(relative_improvement(r_d, r_d).unwrap(), 0.0);
        let up = relative_improvement(r_d + delta, r_d).unwrap();
        let down = relative_improvement(r_d - delta, r_d).unwrap();
        prop_assert!((up + down).abs() <= 1e-12);
        prop_assert_eq!(up < 0.0, delta > 0.0);
    }

    #[test]
    fn duplicated_snapshots_leave_predictions_unchanged(seed in any::<u64>(), k in 1..5usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<ChainState> = (0..k).map(|_| random_state(&mut rng, 3, 4, 2)).collect();
        let once = PredictiveEnsemble::new(states.iter().collect()).unwrap();
        let twice = PredictiveEnsemble::new(states.iter().chain(&states).collect()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let (x, y) = (once.predict(i, j).unwrap(), twice.predict(i, j).unwrap());
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn splits_are_seeded_partitions(n in 2..200usize, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let tuples: Vec<RatingTuple> = (0..n).map(|k| RatingTuple::new(k, k, k as f64)).collect();
        let data = Dataset {
            train: tuples,
            test: Vec::new(),
            n_users: n,
            n_items: n,
            user_ids: IdMap::identity(n),
            item_ids: IdMap::identity(n),
        };
        let a = split_train_test(data.clone(), frac, seed).unwrap();
        let b = split_train_test(data, frac, seed).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(a.test.len(), (frac * n as f64).round() as usize);
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).map(|t| t.user).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn concurrent_group_equals_sequential_replay(seed in any::<u64>(), p in 2..=3usize, round_length in 1..8usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tuples = random_tuples(&mut rng, 9, 9, 70);
        let plan = split_square(&tuples, 9, 9, p).unwrap();
        let cfg = ServerConfig {
            model: ModelConfig { dim: 2, minibatch_size: 4, ..ModelConfig::default() },
            round_length,
            max_rounds: 1,
            seed,
            ..ServerConfig::default()
        };
        let out = run_in_process(&cfg, &plan, &[], |_| Ok(())).unwrap();
        let workers = build_workers(&plan, 4).unwrap();
        let group = plan.groups()[0].block_ids.clone();
        let mut reversed = group.clone();
        reversed.reverse();
        let fwd = sequential_first_round(&cfg, &plan, &workers, 0, &group);
        let bwd = sequential_first_round(&cfg, &plan, &workers, 0, &reversed);
        prop_assert_eq!(state_diff(&out.final_states[0], &fwd), 0.0);
        prop_assert_eq!(state_diff(&fwd, &bwd), 0.0);
    }
}

#[test]
fn injected_noise_has_variance_eps() {
    // No likelihood and no prior: each step is θ + √ε z.
    let mut state = ChainState::new(1, 1, 1, 1.0);
    state.lambda_a = 0.0;
    let tuples = vec![RatingTuple::new(0, 0, 1.0)];
    let eps = 0.03;
    let mut noise = NoiseSource::new(1, 2).gaussian(0);
    let n = 100_000;
    let steps: Vec<f64> = (0..n)
        .map(|_| {
            let next = dsgld_update(
                &state,
                0.0,
                &tuples,
                Param::UserBias(0),
                BlockScale::whole(1),
                1.0,
                eps,
                &mut noise,
            )
            .unwrap()[0];
            let d = next - state.a[0];
            state.a[0] = next;
            d
        })
        .collect();
    let mean = steps.iter().sum::<f64>() / n as f64;
    let var = steps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    // the variance estimate has relative SE √(2/n) ≈ 0.45%
    assert!((var / eps - 1.0).abs() < 0.02, "variance {var} vs {eps}");
}

#[test]
fn wishart_mean_is_nu_times_scale() {
    let w = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, -0.05, 0.0, -0.05, 0.3]);
    let nu = 6.0;
    let mut rng = NoiseSource::new(3, 0).rng(0);
    let n = 100_000;
    let mut sum = DMatrix::zeros(3, 3);
    for _ in 0..n {
        sum += dsgld::gibbs::sample_wishart(&w, nu, &mut rng).unwrap();
    }
    let mean = sum / n as f64;
    let expected = &w * nu;
    for p in 0..3 {
        assert!((mean[(p, p)] / expected[(p, p)] - 1.0).abs() < 0.02);
        for q in 0..3 {
            // off-diagonals against the diagonal scale
            let tol = 0.02 * (expected[(p, p)] * expected[(q, q)]).sqrt();
            assert!((mean[(p, q)] - expected[(p, q)]).abs() < tol, "({p},{q})");
        }
    }
}

#[test]
fn permuting_users_permutes_their_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 2;
    let items = FactorMatrix::from_fn(5, d, |_, _| normal(&mut rng));
    let ratings: Vec<Vec<(usize, f64)>> = (0..4)
        .map(|i| (0..3).map(|k| ((i + k) % 5, normal(&mut rng))).collect())
        .collect();
    let hyper = FactorHyper {
        mu: DVector::from_element(d, 0.1),
        lambda: DMatrix::identity(d, d) * 2.0,
    };
    let streams: Vec<u64> = (0..4).collect();
    let base = sample_side(&ratings, &items, &hyper, 2.0, 5, &streams, 3).unwrap();
    let perm = [2usize, 0, 3, 1];
    let p_ratings: Vec<_> = perm.iter().map(|&i| ratings[i].clone()).collect();
    let p_streams: Vec<u64> = perm.iter().map(|&i| streams[i]).collect();
    let permuted = sample_side(&p_ratings, &items, &hyper, 2.0, 5, &p_streams, 3).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(permuted.row(k), base.row(i));
    }
}

#[test]
fn replies_of_one_group_write_disjoint_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tuples = random_tuples(&mut rng, 8, 8, 60);
    let plan = split_square(&tuples, 8, 8, 4).unwrap();
    let cfg = ServerConfig {
        model: ModelConfig {
            dim: 2,
            minibatch_size: 4,
            ..ModelConfig::default()
        },
        round_length: 3,
        ..ServerConfig::default()
    };
    let workers = build_workers(&plan, 4).unwrap();
    let state = dsgld::cluster::init_chain(&cfg, &plan, 0);
    for g in plan.groups() {
        let replies: Vec<_> = g
            .block_ids
            .iter()
            .map(|&b| {
                workers[b]
                    .round(&request_for(&cfg, &plan, &state, 0, b, 1))
                    .unwrap()
            })
            .collect();
        check_disjoint_writes(&replies).unwrap();
    }
}

use pimaex_core::env::oracle::random_params;
use pimaex_core::env::{Action, ConsumeExplore, EnvParams};
use pimaex_core::influence::{self, Outcome};
use pimaex_core::ppo::gae;
use pimaex_core::rnd::{ObsNormalizer, RunningMeanVar};
use pimaex_core::rng;
use proptest::prelude::*;

fn params(seed: u64) -> EnvParams {
    random_params(&mut rng::stream(seed, rng::Stream::Init, 3, 0))
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn env_state_stays_in_bounds(seed in any::<u64>(), acts in prop::collection::vec(0usize..3, 1..400)) {
        let p = params(seed);
        let mut env = ConsumeExplore::new(p.clone()).unwrap();
        env.reset(seed);
        let n = p.n_agents;
        for t in 0..acts.len() {
            if env.is_done() {
                break;
            }
            let joint: Vec<Action> = (0..n).map(|i| Action::from_index(acts[(t * n + i) % acts.len()]).unwrap()).collect();
            let before = env.state().clone();
            let out = env.step(&joint).unwrap();
            let s = env.state();
            prop_assert_eq!(s.step_index as usize, t + 1);
            prop_assert!(s.yield_level >= p.yield_init && s.yield_level <= p.yield_max);
            prop_assert!(s.yield_level >= before.yield_level);
            prop_assert!(s.explore_counter < p.explores_per_level);
            for i in 0..n {
                prop_assert!(s.supply[i] <= p.supply_max);
                prop_assert!(s.timer[i] <= p.cycle_len);
                let consumed = joint[i] == Action::Consume && before.supply[i] > 0;
                let mut want = if consumed { p.reward_consume } else { 0.0 };
                if out.explore_success[i] == Some(false) {
                    want -= p.penalty;
                }
                prop_assert_eq!(out.rewards[i], want);
                prop_assert_eq!(out.explore_success[i].is_some(), joint[i] == Action::Explore);
            }
            for (i, o) in env.observations().iter().enumerate() {
                let d = o.decode(&p);
                prop_assert_eq!(d.supply, s.supply[i]);
                prop_assert_eq!(d.timer, s.timer[i]);
                prop_assert_eq!(d.yield_level, s.yield_level);
                prop_assert_eq!(d.explore_counter, s.explore_counter);
                prop_assert_eq!(d.depot_flag, s.depot_has_space(&p, i));
                prop_assert!(o.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            prop_assert_eq!(out.done, s.step_index == p.episode_len);
        }
    }

    #[test]
    fn explore_probability_is_a_probability(seed in any::<u64>(), k in 0usize..12) {
        let p = params(seed);
        let q = p.explore_success_probability(k.min(p.n_agents));
        prop_assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(p in distribution(3), q in distribution(3)) {
        prop_assert!(influence::policy_influence_kl(&p, &q) >= 0.0);
        prop_assert!(influence::policy_influence_kl(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn pmi_expectation_under_informed_is_kl(p in distribution(3), q in distribution(3)) {
        let e: f64 = (0..3).map(|a| p[a] * influence::policy_influence_pmi(&p, &q, a)).sum();
        prop_assert!((e - influence::policy_influence_kl(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn marginal_is_a_distribution(informed in distribution(3), cfs in prop::collection::vec(distribution(3), 1..10),
                                  vals in prop::collection::vec(-5.0f64..5.0, 22)) {
        let o = |p: &Vec<f64>, k: usize| Outcome { policy: p.clone(), ext: vals[2 * k], int: vals[2 * k + 1] };
        let inf = o(&informed, 0);
        let cf: Vec<_> = cfs.iter().enumerate().map(|(k, p)| o(p, k + 1)).collect();
        let m = influence::marginalize(&inf, &cf).unwrap();
        prop_assert!((m.policy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(m.policy.iter().all(|v| *v > 0.0));
        let n = (cf.len() + 1) as f64;
        let ext = (inf.ext + cf.iter().map(|c| c.ext).sum::<f64>()) / n;
        prop_assert!((m.ext - ext).abs() < 1e-12);
    }

    #[test]
    fn gae_is_linear_in_rewards_and_values(
        r1 in prop::collection::vec(-3.0f64..3.0, 12), r2 in prop::collection::vec(-3.0f64..3.0, 12),
        v1 in prop::collection::vec(-3.0f64..3.0, 12), v2 in prop::collection::vec(-3.0f64..3.0, 12),
        dones in prop::collection::vec(any::<bool>(), 12), b in (-3.0f64..3.0, -3.0f64..3.0),
        a in -2.0f64..2.0, c in -2.0f64..2.0, gamma in 0.5f64..1.0, lam in 0.0f64..1.0, episodic in any::<bool>(),
    ) {
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| a * p + c * q).collect::<Vec<_>>();
        let (a1, t1) = gae(&r1, &v1, &dones, b.0, gamma, lam, episodic).unwrap();
        let (a2, t2) = gae(&r2, &v2, &dones, b.1, gamma, lam, episodic).unwrap();
        let (am, tm) = gae(&mix(&r1, &r2), &mix(&v1, &v2), &dones, a * b.0 + c * b.1, gamma, lam, episodic).unwrap();
        for (got, want) in am.iter().zip(mix(&a1, &a2)).chain(tm.iter().zip(mix(&t1, &t2))) {
            prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
        for t in 0..12 {
            prop_assert!((t1[t] - (a1[t] + v1[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn running_moments_merge_like_sequential_updates(xs in prop::collection::vec(-100.0f64..100.0, 0..60),
                                                     split in 0usize..60) {
        let k = split.min(xs.len());
        let (mut left, mut right, mut all) = (RunningMeanVar::default(), RunningMeanVar::default(), RunningMeanVar::default());
        xs[..k].iter().for_each(|x| left.update(*x));
        xs[k..].iter().for_each(|x| right.update(*x));
        xs.iter().for_each(|x| all.update(*x));
        left.merge(&right);
        prop_assert_eq!(left.count, all.count);
        prop_assert!((left.mean - all.mean).abs() < 1e-9);
        prop_assert!((left.var() - all.var()).abs() < 1e-7 * (1.0 + all.var()));
    }

    #[test]
    fn normalized_observations_are_clipped(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 2..40),
                                           probe in prop::collection::vec(-1e3f64..1e3, 5)) {
        let mut n = ObsNormalizer::new(5);
        rows.iter().for_each(|r| n.update(r));
        let z = n.normalize(&probe);
        prop_assert!(z.iter().all(|v| v.abs() <= 5.0));
        let s = n.standardize(&probe);
        for (a, b) in z.iter().zip(&s) {
            prop_assert_eq!(*a, b.clamp(-5.0, 5.0));
        }
    }
}

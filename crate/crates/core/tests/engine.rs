use pimaex_core::config::RunConfig;
use pimaex_core::env::oracle::{compare_with_reference, random_params};
use pimaex_core::env::EnvParams;
use pimaex_core::nn::gradcheck::check_network;
use pimaex_core::rng;

#[test]
fn engine_matches_reference_model() {
    let mut r = rng::stream(11, rng::Stream::Init, 0, 0);
    let mut sets = vec![EnvParams::default()];
    sets.extend((0..4).map(|_| random_params(&mut r)));
    for (k, p) in sets.iter().enumerate() {
        let rep = compare_with_reference(p, 20_000, k as u64).unwrap();
        assert_eq!(rep.mismatch, None, "{p:?}");
        assert_eq!(rep.steps, 20_000);
    }
}

#[test]
fn default_network_gradients_match_finite_differences() {
    let cfg = RunConfig::default().net_config();
    let g = check_network(&cfg, 0, 2, 1e-5).unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
    assert!(g.segments.iter().all(|s| s.params > 0));
}

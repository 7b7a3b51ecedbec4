use revcd_bench::{model, random, synthetic, trainer};

#[test]
fn fixtures_match_the_benchmark_preset() {
    let (cfg, ds) = synthetic();
    assert_eq!((ds.d_s(), ds.d_x()), (8, 16));
    let m = model(&cfg, &ds);
    assert_eq!(m.config.hidden, cfg.model.hidden);
    assert_eq!(trainer(&cfg, &ds).step(), 0);
}

#[test]
fn random_matrices_are_seeded() {
    assert_eq!(random(4, 3, 1), random(4, 3, 1));
    assert_ne!(random(4, 3, 1), random(4, 3, 2));
}

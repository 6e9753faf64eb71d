use dmfnet::config::NetConfig;
use dmfnet::diffarray::{Graph, Initializer, ParamStore};
use dmfnet::generator::{generate_coarse, seed_merge, CoarseGenerator};
use dmfnet::geometry::PointSet;
use dmfnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (NetConfig, ParamStore, CoarseGenerator) {
    let cfg = NetConfig::toy();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let gen = CoarseGenerator::new(&mut store, &mut init, &cfg).unwrap();
    (cfg, store, gen)
}

fn random_fused(seed: u64, c: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![1, c], (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_params(store: &mut ParamStore, prefix: &str) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
}

#[test]
fn coarse_cloud_has_n0_rows_and_is_deterministic() {
    let (cfg, store, gen) = setup(1);
    let f = random_fused(2, cfg.c);
    let run = || {
        let mut g = Graph::inference(&store);
        let fv = g.constant(f.clone());
        let p0 = generate_coarse(&mut g, &gen, fv).unwrap();
        g.value(p0).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[cfg.n0, 3]);
    assert!(a.is_finite());
    assert_eq!(a, run());
}

#[test]
fn zero_parameters_collapse_to_the_origin() {
    let (cfg, mut store, gen) = setup(3);
    zero_params(&mut store, "generator");
    let mut g = Graph::inference(&store);
    let fv = g.constant(random_fused(4, cfg.c));
    let p0 = generate_coarse(&mut g, &gen, fv).unwrap();
    assert_eq!(g.value(p0), &Tensor::zeros(vec![cfg.n0, 3]));
}

#[test]
fn zeroed_residual_blocks_pass_their_input_through() {
    let (cfg, mut store, gen) = setup(5);
    zero_params(&mut store, "generator.block");
    let f = random_fused(6, cfg.c);
    let mut g = Graph::inference(&store);
    let fv = g.constant(f);
    let p0 = generate_coarse(&mut g, &gen, fv).unwrap();
    // with identity blocks the head sees [expand(F), replicate(F)] directly
    let x = gen.expand.forward(&mut g, fv).unwrap();
    let rep = g.replicate_row(fv, cfg.n0).unwrap();
    let x = g.concat(&[x, rep], 1).unwrap();
    for block in &gen.blocks {
        let y = block.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
    let direct = gen.head.forward(&mut g, x).unwrap();
    assert_eq!(g.value(p0), g.value(direct));
}

#[test]
fn generator_rejects_a_multi_row_input() {
    let (cfg, store, gen) = setup(7);
    let mut g = Graph::inference(&store);
    let fv = g.constant(Tensor::zeros(vec![2, cfg.c]));
    assert!(generate_coarse(&mut g, &gen, fv).is_err());
}

#[test]
fn seed_merge_appends_an_fps_subset_of_the_partial_cloud() {
    let cfg = NetConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let partial = PointSet::new(
        Tensor::new(vec![cfg.n, 3], (0..cfg.n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
    )
    .unwrap();
    let p0 = Tensor::new(vec![cfg.n0, 3], (0..cfg.n0 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let pv = g.constant(p0.clone());
    let merged = seed_merge(&mut g, pv, &partial).unwrap();
    let m = g.value(merged);
    assert_eq!(m.shape(), &[2 * cfg.n0, 3]);
    for r in 0..cfg.n0 {
        assert_eq!(m.row(r), p0.row(r));
    }
    let mut seen = Vec::new();
    for r in cfg.n0..2 * cfg.n0 {
        let hit = (0..cfg.n).find(|&i| partial.coords().row(i) == m.row(r));
        let i = hit.expect("merged row is a row of the partial cloud");
        assert!(!seen.contains(&i), "FPS rows are distinct");
        seen.push(i);
    }

    let small = PointSet::new(Tensor::zeros(vec![cfg.n0 - 1, 3])).unwrap();
    assert!(seed_merge(&mut g, pv, &small).is_err());
}

#[test]
fn zero_coarse_points_are_rejected_by_config() {
    assert!(NetConfig { n0: 0, ..NetConfig::toy() }.validate().is_err());
}

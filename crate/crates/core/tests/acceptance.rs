//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Every tolerance and frozen training setting is
//! a named constant below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dmfnet::cli::{self, EvalArgs, GenDataArgs, TrainArgs, PUBLISHED_AVG_L2_CD};
use dmfnet::config::{NetConfig, Preset};
use dmfnet::dataio::checkpoint::Checkpoint;
use dmfnet::dataio::image::parse_ppm;
use dmfnet::dataio::ply::parse_ply;
use dmfnet::dataio::{
    gen_primitive, gen_samples, load_checkpoint, load_dataset, load_ply, load_ppm, render_silhouette, save_checkpoint,
    save_ply, save_ppm, viewpoints, DatasetManifest, DatasetSpec, ShapeKind,
};
use dmfnet::diffarray::gradcheck::{check_inputs, check_params, random_projection};
use dmfnet::diffarray::{attention_heads, multi_head_attention, transpose_conv1d, Graph, Initializer, ParamStore, Var};
use dmfnet::error::ParseErrorKind;
use dmfnet::geometry::{fps, knn, pairwise_sq_dist, PointSet};
use dmfnet::metrics::{cd_l1, cd_l2, chamfer_var, f_score, ChamferKind};
use dmfnet::model::DmfNet;
use dmfnet::training::{evaluate, fit, train_batch, AdamState, TrainConfig};
use dmfnet::upsampler::{sut, Sut};
use dmfnet::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const SHAPE_BUDGET: Duration = Duration::from_secs(60);
// criterion 2
const FD_H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;
const E2E_COORDS: usize = 200;
const E2E_TOL: f64 = 1e-4;
/// Denominator floor of the end-to-end relative error: at h = 1e-5 the
/// central difference of a loss near 0.7 carries absolute noise near 1e-11,
/// so gradients below 1e-6 are compared in absolute terms.
const E2E_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(600);
// criterion 3
const ORACLE_TRIALS: usize = 100;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
// criterion 4
const PERMUTATION_TOL: f64 = 1e-9;
const STOCHASTIC_TOL: f64 = 1e-12;
// criterion 5, frozen after the first measured run (ratio 0.49, overfit 0.0425)
const HELD_OUT_RATIO: f64 = 0.5;
const TRAIN_SAMPLES: usize = 64;
const HELD_OUT_SAMPLES: usize = 16;
const TRAIN_EPOCHS: usize = 60;
const TRAIN_BATCH: usize = 8;
const TRAIN_LR: f64 = 1e-3;
const OVERFIT_TARGET: f64 = 0.05;
const OVERFIT_ITERS: usize = 500;
const OVERFIT_LR: f64 = 3e-3;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
// criterion 8
const PLY_TOL: f64 = 1e-7;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn lib<T>(r: dmfnet::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointSet {
    PointSet::new(random_tensor(rng, &[n, 3])).unwrap()
}

fn toy_samples(count: usize, seed: u64) -> Vec<dmfnet::dataio::CloudSample> {
    let cfg = NetConfig::toy();
    gen_samples(&DatasetSpec::balanced(count, cfg.n, cfg.image_size, seed)).unwrap()
}

// ---- 1 ------------------------------------------------------------------------

fn paper_shapes() -> Outcome {
    let t = Instant::now();
    let cfg = NetConfig::paper();
    let net = lib(DmfNet::new(cfg.clone(), 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = lib(gen_primitive(ShapeKind::Sphere, cfg.n, &mut rng))?;
    let image = lib(render_silhouette(&cloud, viewpoints()[3], cfg.image_size, cfg.image_size))?;
    let mut g = net.inference_graph();
    let fw = lib(net.forward(&mut g, &cloud, &image))?;
    let expected: [(&str, Var, [usize; 2]); 9] = [
        ("F_P", fw.f_p, [128, 512]),
        ("F_I", fw.f_i, [49, 512]),
        ("W_IP", fw.w_ip, [49, 128]),
        ("W_PI", fw.w_pi, [128, 49]),
        ("F", fw.fused, [1, 512]),
        ("P_0", fw.p0, [256, 3]),
        ("merged", fw.seed, [512, 3]),
        ("P_1", fw.p1, [1024, 3]),
        ("P_C", fw.pc, [2048, 3]),
    ];
    for (name, v, shape) in expected {
        ensure!(g.shape(v) == shape, "{name} is {:?}, expected {shape:?}", g.shape(v));
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < SHAPE_BUDGET, "took {elapsed:.1?}");
    Ok(format!("9 shapes exact, {elapsed:.1?} (< {SHAPE_BUDGET:?})"))
}

// ---- 2 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = (0.0f64, "");
    let mut count = 0;
    let mut fd = |name: &'static str, shapes: &[&[usize]], f: &dyn Fn(&mut Graph, &[Var]) -> dmfnet::Result<Var>| {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let report = lib(check_inputs(&inputs, FD_H, |g, v| {
            let out = f(g, v)?;
            random_projection(g, out, 99)
        }))?;
        count += 1;
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, name);
        }
        ensure!(report.max_rel_err < PRIMITIVE_TOL, "{name}: relative error {:.2e}", report.max_rel_err);
        Ok(())
    };
    fd("matmul", &[&[3, 4], &[4, 2]], &|g, v| g.matmul(v[0], v[1]))?;
    fd("matmul_nt", &[&[3, 4], &[5, 4]], &|g, v| g.matmul_nt(v[0], v[1]))?;
    fd("linear", &[&[2, 3, 4], &[4, 5], &[5]], &|g, v| g.linear(v[0], v[1], Some(v[2])))?;
    fd("add", &[&[3, 2], &[3, 2]], &|g, v| g.add(v[0], v[1]))?;
    fd("sub", &[&[3, 2], &[3, 2]], &|g, v| g.sub(v[0], v[1]))?;
    fd("mul", &[&[3, 2], &[3, 2]], &|g, v| g.mul(v[0], v[1]))?;
    fd("add_bias", &[&[4, 3], &[3]], &|g, v| g.add_bias(v[0], v[1]))?;
    fd("scale", &[&[4, 3]], &|g, v| g.scale(v[0], -1.7))?;
    fd("relu", &[&[5, 4]], &|g, v| g.relu(v[0]))?;
    fd("tanh", &[&[5, 4]], &|g, v| g.tanh(v[0]))?;
    fd("softmax_last", &[&[3, 5]], &|g, v| g.softmax_last(v[0]))?;
    fd("layer_norm", &[&[4, 6], &[6], &[6]], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    fd("max_over_axis", &[&[4, 5, 3]], &|g, v| g.max_over_axis(v[0], 1))?;
    fd("mean_over_axis", &[&[4, 5, 3]], &|g, v| g.mean_over_axis(v[0], 1))?;
    fd("sum", &[&[4, 2]], &|g, v| g.sum(v[0]))?;
    fd("concat", &[&[2, 3], &[2, 5]], &|g, v| g.concat(&[v[0], v[1]], 1))?;
    fd("slice", &[&[3, 6]], &|g, v| g.slice(v[0], 1, 2, 3))?;
    fd("reshape", &[&[3, 4]], &|g, v| g.reshape(v[0], vec![2, 6]))?;
    fd("transpose", &[&[3, 4]], &|g, v| g.transpose(v[0]))?;
    fd("gather_rows", &[&[4, 3]], &|g, v| g.gather_rows(v[0], vec![1, 1, 3, 0, 2, 1], &[3, 2]))?;
    fd("scale_rows", &[&[4, 3], &[4]], &|g, v| g.scale_rows(v[0], v[1]))?;
    fd("conv2d", &[&[5, 5, 2], &[3, 3, 2, 3], &[3]], &|g, v| g.conv2d(v[0], v[1], v[2], 2, 1))?;
    fd("transpose_conv1d", &[&[3, 4], &[4, 6], &[2]], &|g, v| transpose_conv1d(g, v[0], v[1], v[2], 3))?;
    fd("attention", &[&[4, 6], &[5, 6], &[5, 6]], &|g, v| attention_heads(g, v[0], v[1], v[2], 2))?;
    fd("multi_head_attention", &[&[3, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4]], &|g, v| {
        multi_head_attention(g, v[0], v[0], v[0], 2, v[1], v[2], v[3], v[4])
    })?;
    fd("chamfer_l1", &[&[7, 3], &[5, 3]], &|g, v| chamfer_var(g, ChamferKind::L1, v[0], v[1]))?;
    fd("chamfer_l2", &[&[7, 3], &[5, 3]], &|g, v| chamfer_var(g, ChamferKind::L2, v[0], v[1]))?;
    let primitives = format!("{count} primitive checks, worst {:.1e} ({})", worst.0, worst.1);

    let cfg = NetConfig::toy();
    let sample = gen_samples(&DatasetSpec::balanced(1, cfg.n, cfg.image_size, 7)).unwrap().remove(0);
    let mut net = lib(DmfNet::new(cfg, 11))?;
    let mut store = std::mem::take(&mut net.params);
    let report = lib(check_params(&mut store, E2E_COORDS, FD_H, 5, |g| {
        Ok(net.loss(g, &sample.partial, &sample.image, &sample.gt)?.1.total)
    }))?;
    let rel = report
        .entries
        .iter()
        .map(|&(_, _, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(E2E_FLOOR))
        .fold(0.0, f64::max);
    let elapsed = t.elapsed();
    ensure!(report.checked >= E2E_COORDS, "only {} coordinates checked", report.checked);
    ensure!(rel < E2E_TOL, "end-to-end relative error {rel:.2e}");
    ensure!(elapsed < GRAD_BUDGET, "took {elapsed:.1?}");
    Ok(format!(
        "{primitives} (< {PRIMITIVE_TOL:e}); end-to-end {} coords max {rel:.1e} (< {E2E_TOL:e}); {elapsed:.1?}",
        report.checked
    ))
}

// ---- 3 ------------------------------------------------------------------------

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn oracle_knn(q: &Tensor, r: &Tensor, k: usize) -> Vec<Vec<usize>> {
    (0..q.rows())
        .map(|i| {
            let mut order: Vec<usize> = (0..r.rows()).collect();
            order.sort_by(|&a, &b| sq(q.row(i), r.row(a)).total_cmp(&sq(q.row(i), r.row(b))));
            order.truncate(k);
            order
        })
        .collect()
}

fn oracle_fps(p: &Tensor, m: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    while chosen.len() < m {
        let (mut best, mut best_d) = (0, -1.0);
        for j in 0..p.rows() {
            let d = chosen.iter().map(|&c| sq(p.row(c), p.row(j))).fold(f64::INFINITY, f64::min);
            if !chosen.contains(&j) && d > best_d {
                (best, best_d) = (j, d);
            }
        }
        chosen.push(best);
    }
    chosen
}

fn oracle_chamfer(y: &PointSet, gt: &PointSet, squared: bool) -> f64 {
    let half = |a: &PointSet, b: &PointSet| {
        let s: f64 = a
            .points()
            .map(|p| {
                let d = b.points().map(|q| sq(&p, &q)).fold(f64::INFINITY, f64::min);
                if squared {
                    d
                } else {
                    d.sqrt()
                }
            })
            .sum();
        s / (2.0 * a.len() as f64)
    };
    half(y, gt) + half(gt, y)
}

fn oracle_fscore(y: &PointSet, gt: &PointSet, tau: f64) -> f64 {
    let frac = |a: &PointSet, b: &PointSet| {
        a.points().filter(|p| b.points().any(|q| sq(p, &q).sqrt() <= tau)).count() as f64 / a.len() as f64
    };
    let (p, r) = (frac(y, gt), frac(gt, y));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = 0.0f64;
    for trial in 0..ORACLE_TRIALS {
        let (n, m) = (rng.gen_range(2..=64), rng.gen_range(1..=64));
        let d = rng.gen_range(1..=4);
        let a = random_tensor(&mut rng, &[n, d]);
        let b = random_tensor(&mut rng, &[m, d]);

        let dist = lib(pairwise_sq_dist(&a, &b))?;
        for i in 0..n {
            for j in 0..m {
                worst = worst.max((dist.data()[i * m + j] - sq(a.row(i), b.row(j))).abs());
            }
        }
        let k = rng.gen_range(1..=m);
        let nbr = lib(knn(&a, &b, k))?;
        let want = oracle_knn(&a, &b, k);
        ensure!((0..n).all(|i| nbr.row(i) == want[i].as_slice()), "knn differs on trial {trial}");
        let s = rng.gen_range(1..=n);
        ensure!(lib(fps(&a, s))?.data() == oracle_fps(&a, s).as_slice(), "fps differs on trial {trial}");

        let (y, gt) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
        let tau = rng.gen_range(0.05..0.6);
        for (got, want) in [
            (cd_l1(&y, &gt), oracle_chamfer(&y, &gt, false)),
            (cd_l2(&y, &gt), oracle_chamfer(&y, &gt, true)),
            (lib(f_score(&y, &gt, tau))?, oracle_fscore(&y, &gt, tau)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let elapsed = t.elapsed();
    ensure!(worst <= ORACLE_TOL, "scalar deviation {worst:.2e}");
    ensure!(elapsed < ORACLE_BUDGET, "took {elapsed:.1?}");
    Ok(format!(
        "{ORACLE_TRIALS} instances each, indices exact, scalars within {worst:.1e} (<= {ORACLE_TOL:e}); {elapsed:.1?}"
    ))
}

// ---- 4 ------------------------------------------------------------------------

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    // splitting with a zero displacement head replicates parents, and every
    // ratio multiplies the row count
    for r in 1..=3 {
        let cfg = NetConfig { up_ratio: r, ..NetConfig::toy() };
        let mut store = ParamStore::new();
        let stage = lib(Sut::new(&mut store, &mut Initializer::new(41), "sut", &cfg))?;
        let p = random_tensor(&mut rng, &[40, 3]);
        let f = random_tensor(&mut rng, &[1, cfg.c]);
        {
            let mut g = Graph::inference(&store);
            let (pv, fv) = (g.constant(p.clone()), g.constant(f.clone()));
            let out = lib(sut(&mut g, &stage, pv, fv))?;
            ensure!(g.shape(out.points) == [r * 40, 3], "SUT size law fails at r = {r}");
        }
        for prm in store.iter_mut().filter(|p| p.name.starts_with("sut.head")) {
            prm.value = Tensor::zeros(prm.value.shape().to_vec());
        }
        let mut g = Graph::inference(&store);
        let (pv, fv) = (g.constant(p.clone()), g.constant(f));
        let out = lib(sut(&mut g, &stage, pv, fv))?;
        let pts = g.value(out.points);
        ensure!((0..r * 40).all(|i| pts.row(i) == p.row(i / r)), "zero displacement does not replicate at r = {r}");
    }

    let cloud = random_tensor(&mut rng, &[48, 3]);
    let full = lib(fps(&cloud, 48))?;
    for m in 1..48 {
        ensure!(lib(fps(&cloud, m))?.data() == &full.data()[..m], "FPS prefix property fails at m = {m}");
    }

    let cfg = NetConfig::toy();
    let net = lib(DmfNet::new(cfg.clone(), 3))?;
    let sample = gen_samples(&DatasetSpec::balanced(1, cfg.n, cfg.image_size, 4)).unwrap().remove(0);
    let mut perm: Vec<usize> = (0..cfg.n).collect();
    perm.shuffle(&mut rng);
    let shuffled = lib(sample.partial.select(&perm))?;
    let mut g = net.inference_graph();
    let a = lib(net.forward(&mut g, &sample.partial, &sample.image))?;
    let b = lib(net.forward(&mut g, &shuffled, &sample.image))?;

    for (name, w) in [("W_IP", a.w_ip), ("W_PI", a.w_pi)] {
        let w = g.value(w);
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            ensure!(w.row(r).iter().all(|&x| x >= 0.0), "{name} row {r} has a negative entry");
            ensure!((s - 1.0).abs() < STOCHASTIC_TOL, "{name} row {r} sums to {s}");
        }
    }
    for (name, mixed, src) in [("F_IP", a.f_ip, a.f_p), ("F_PI", a.f_pi, a.f_i)] {
        let (m, s) = (g.value(mixed), g.value(src));
        for c in 0..s.last_dim() {
            let lo = (0..s.rows()).map(|r| s.row(r)[c]).fold(f64::INFINITY, f64::min);
            let hi = (0..s.rows()).map(|r| s.row(r)[c]).fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                (0..m.rows()).all(|r| m.row(r)[c] >= lo - 1e-10 && m.row(r)[c] <= hi + 1e-10),
                "{name} channel {c} leaves the convex hull"
            );
        }
    }
    let drift = g.value(a.fused).max_abs_diff(g.value(b.fused));
    ensure!(drift <= PERMUTATION_TOL, "fused vector moved by {drift:.2e} under permutation");
    Ok(format!(
        "replication, size law r = 1..3, FPS prefix, row-stochastic attention, convex mixing, permutation drift {drift:.1e} (<= {PERMUTATION_TOL:e})"
    ))
}

// ---- 5 ------------------------------------------------------------------------

fn training() -> Outcome {
    let t = Instant::now();
    let cfg = NetConfig::toy();
    let train = toy_samples(TRAIN_SAMPLES, 1);
    let held_out = toy_samples(HELD_OUT_SAMPLES, 2);
    let mut net = lib(DmfNet::new(cfg.clone(), 0))?;
    let mut state = AdamState::new(&net.params);
    let tc = TrainConfig { lr0: TRAIN_LR, epochs: TRAIN_EPOCHS, batch_size: TRAIN_BATCH, seed: 3, ..TrainConfig::default() };
    let mut first = None;
    lib(fit(&mut net, &mut state, &train, &tc, 0, |log, net, _| {
        if log.epoch == 1 {
            first = Some(evaluate(net, &held_out, 0.01)?.mean.cd_l1);
        }
        Ok(())
    }))?;
    let first = first.ok_or("no epoch ran")?;
    let last = lib(evaluate(&net, &held_out, 0.01))?.mean.cd_l1;
    let ratio = last / first;

    let sample = toy_samples(1, 5).remove(0);
    let mut net = lib(DmfNet::new(cfg, 0))?;
    let mut state = AdamState::new(&net.params);
    let oc = TrainConfig { lr0: OVERFIT_LR, ..TrainConfig::default() };
    for _ in 0..OVERFIT_ITERS {
        lib(train_batch(&mut net, &[&sample], &mut state, OVERFIT_LR, &oc))?;
    }
    let overfit = cd_l1(&lib(dmfnet::training::predict(&net, &sample))?, &sample.gt);
    let elapsed = t.elapsed();

    let detail = format!(
        "held-out L1-CD {first:.4} after epoch 1 -> {last:.4} after {TRAIN_EPOCHS} (ratio {ratio:.3}, <= {HELD_OUT_RATIO}); \
         overfit L1-CD {overfit:.4} after {OVERFIT_ITERS} steps (< {OVERFIT_TARGET}); {elapsed:.0?}"
    );
    ensure!(ratio <= HELD_OUT_RATIO, "{detail}");
    ensure!(overfit < OVERFIT_TARGET, "{detail}");
    ensure!(elapsed < TRAIN_BUDGET, "{detail}");
    Ok(detail)
}

// ---- 6 and 7 -------------------------------------------------------------------

fn gen_args(out: &Path) -> GenDataArgs {
    GenDataArgs { preset: Preset::Toy, count: 8, counts: None, seed: 60, occlusion: 0.4, sets: vec![], out: out.into() }
}

fn train_args(data: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        data: data.into(),
        out: out.into(),
        preset: Preset::Toy,
        sets: vec![],
        lr: Some(1e-3),
        epochs: Some(3),
        batch_size: Some(4),
        seed: Some(61),
        net_seed: 62,
        checkpoint_every: 1,
        resume: None,
    }
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("data");
    lib(cli::cmd_gen_data(&gen_args(&data)))?;
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    lib(cli::cmd_train(&train_args(&data, &a)))?;
    lib(cli::cmd_train(&train_args(&data, &b)))?;
    let files = ["ckpt_epoch0001.dmfn", "ckpt_epoch0002.dmfn", "ckpt_epoch0003.dmfn", "final.dmfn", "train_log.csv", "config.json"];
    let mut bytes = 0;
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)).map_err(|e| e.to_string())?, std::fs::read(b.join(f)).map_err(|e| e.to_string())?);
        ensure!(x == y, "{f} differs between identical runs");
        bytes += x.len();
    }
    Ok(format!("{} files ({bytes} bytes) byte-identical across two 3-epoch runs", files.len()))
}

fn eval_layout(root: &Path) -> Outcome {
    let data = root.join("data");
    let eval = |checkpoint: Option<&Path>, gt: bool| {
        lib(cli::cmd_eval(&EvalArgs {
            checkpoint: checkpoint.map(Path::to_path_buf),
            config: None,
            data: data.clone(),
            out: None,
            tau: 0.01,
            gt_as_prediction: gt,
        }))
    };
    let gt = eval(None, true)?;
    let header: Vec<&str> = gt.csv.lines().next().unwrap_or("").split(',').collect();
    ensure!(header == ["metric", "Avg", "box", "cylinder", "sphere"], "CSV header {header:?}");
    let text_header: Vec<&str> = gt.text.lines().next().unwrap_or("").split('|').map(str::trim).collect();
    ensure!(text_header[1] == "Avg", "text header {text_header:?}");
    ensure!(gt.csv.lines().nth(1) == Some("l2_cd_x1e3,0.000000,0.000000,0.000000,0.000000"), "ground truth CD row");
    ensure!(gt.csv.lines().nth(2) == Some("f_score@0.01,1.000000,1.000000,1.000000,1.000000"), "ground truth F row");
    ensure!(gt.text.contains(&PUBLISHED_AVG_L2_CD.to_string()), "published reference missing");

    let ck = root.join("run_a/final.dmfn");
    let (x, y) = (eval(Some(&ck), false)?, eval(Some(&ck), false)?);
    ensure!(x == y, "two evaluations differ");
    let avg = x.text.lines().nth(1).unwrap_or("").to_string();
    Ok(format!(
        "Avg column first, ground truth scores 0/1, trained toy row \"{}\" (published {PUBLISHED_AVG_L2_CD} is context only)",
        avg.split_whitespace().collect::<Vec<_>>().join(" ")
    ))
}

// ---- 8 ------------------------------------------------------------------------

fn io_round_trips(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let cloud = random_cloud(&mut rng, 500);
    let ply = root.join("c.ply");
    lib(save_ply(&ply, &cloud))?;
    let back = lib(load_ply(&ply))?;
    let err = back.coords().max_abs_diff(cloud.coords());
    ensure!(err < PLY_TOL, "PLY error {err:.2e}");
    lib(save_ply(&ply, &back))?;
    ensure!(lib(load_ply(&ply))? == back, "PLY second trip not exact");

    let img = lib(render_silhouette(&cloud, viewpoints()[5], 24, 24))?;
    let ppm = root.join("i.ppm");
    lib(save_ppm(&ppm, &img))?;
    ensure!(lib(load_ppm(&ppm))? == img, "PPM round trip not exact");

    let net = lib(DmfNet::new(NetConfig::toy(), 81))?;
    let state = AdamState::new(&net.params);
    let ck = root.join("m.dmfn");
    lib(save_checkpoint(&ck, &net.params, &state, 4))?;
    let mut other = lib(DmfNet::new(NetConfig::toy(), 82))?;
    let mut other_state = AdamState::new(&other.params);
    ensure!(lib(load_checkpoint(&ck, &mut other.params, &mut other_state))? == 4, "epoch lost");
    let mut quantized = net.params.clone();
    quantized.quantize_f32();
    ensure!(other.params == quantized, "checkpoint does not restore the f32-quantized values");

    let data = root.join("data/manifest.json");
    let text = std::fs::read_to_string(&data).map_err(|e| e.to_string())?;
    let parsed: DatasetManifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure!(parsed.to_json() == text, "manifest does not re-serialize identically");
    ensure!(lib(load_dataset(&data))?.0 == parsed, "manifest load differs");

    let p = Path::new("x.ply");
    let head = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
    let typed = [
        (parse_ply(&format!("{head}0 0 0\n1 1 1\n2 2 2\n3 3 3\n"), p).map(|_| ()), "count mismatch"),
        (parse_ply(&format!("{head}0 0 0\n1 1 1\n2 q 2\n3 3 3\n4 4 4\n"), p).map(|_| ()), "non-numeric"),
        (parse_ply("ply\nformat binary 1.0\n", p).map(|_| ()), "malformed header"),
        (parse_ppm("P6\n1 1\n255\n", p).map(|_| ()), "malformed image header"),
    ];
    let mut kinds = Vec::new();
    let want_kind = |k: &ParseErrorKind, what: &str| match what {
        "count mismatch" => matches!(k, ParseErrorKind::CountMismatch { .. }),
        "non-numeric" => matches!(k, ParseErrorKind::NonNumeric(_)),
        _ => matches!(k, ParseErrorKind::MalformedHeader(_)),
    };
    for (r, what) in typed {
        match r {
            Err(Error::Parse { ref kind, .. }) if !want_kind(kind, what) => {
                return Err(format!("{what}: got the wrong kind {kind}"));
            }
            Err(Error::Parse { line, kind, .. }) => kinds.push(format!("{kind} at line {line}")),
            other => return Err(format!("{what}: expected a parse error, got {other:?}")),
        }
    }
    ensure!(
        matches!(
            parse_ply(&format!("{head}0 0 0\n1 1 1\n2 2 2\n3 3 3\n"), p),
            Err(Error::Parse { line: 12, kind: ParseErrorKind::CountMismatch { declared: 5, found: 4 }, .. })
        ),
        "count mismatch is not reported at line 12"
    );
    let mut bad = Checkpoint { epoch: 0, step: 0, tensors: Default::default() }.to_bytes();
    bad[0] = b'?';
    ensure!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))), "bad magic accepted");
    let broken = text.replacen("\"version\"", "\"surprise\": 1, \"version\"", 1);
    let mpath = root.join("broken_manifest.json");
    std::fs::write(&mpath, broken).map_err(|e| e.to_string())?;
    ensure!(matches!(DatasetManifest::load(&mpath), Err(Error::Manifest(_))), "unknown manifest field accepted");
    Ok(format!(
        "PLY {err:.1e} then exact, PPM exact, checkpoint exact after f32 quantization, manifest exact; typed errors: {}",
        kinds.join(", ")
    ))
}

// ---- driver -------------------------------------------------------------------

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let r = root.path();
    let criteria: [(&str, Box<dyn Fn() -> Outcome + '_>); 8] = [
        ("paper-scale shape contract", Box::new(paper_shapes)),
        ("gradient suite", Box::new(gradients)),
        ("oracle equivalence", Box::new(oracles)),
        ("structural invariants", Box::new(invariants)),
        ("toy training", Box::new(training)),
        ("determinism", Box::new(move || determinism(r))),
        ("evaluation table layout", Box::new(move || eval_layout(r))),
        ("I/O round trips", Box::new(move || io_round_trips(r))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use dmfnet::config::NetConfig;
use dmfnet::dataio::checkpoint::{read_checkpoint, Checkpoint};
use dmfnet::dataio::image::{parse_ppm, ppm_string};
use dmfnet::dataio::manifest::{gen_sample, MANIFEST_FILE};
use dmfnet::dataio::ply::parse_ply;
use dmfnet::dataio::synth::{silhouette_scale, SPLAT_RADIUS};
use dmfnet::dataio::{
    gen_dataset, gen_primitive, gen_samples, load_checkpoint, load_dataset, load_ply, load_ppm, occlude,
    render_silhouette, save_checkpoint, save_ply, save_ppm, viewpoints, DatasetManifest, DatasetSpec, ShapeKind,
};
use dmfnet::encoders::ImageInput;
use dmfnet::error::ParseErrorKind;
use dmfnet::geometry::PointSet;
use dmfnet::model::DmfNet;
use dmfnet::training::{evaluate, AdamState};
use dmfnet::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointSet {
    PointSet::new(Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).unwrap()
}

fn parse_kind(e: Error) -> (usize, ParseErrorKind) {
    match e {
        Error::Parse { line, kind, .. } => (line, kind),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

// ---- primitives -------------------------------------------------------------

#[test]
fn sphere_points_lie_on_the_unit_sphere() {
    let s = gen_primitive(ShapeKind::Sphere, 500, &mut rng(1)).unwrap();
    assert_eq!(s.len(), 500);
    for p in s.points() {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sphere_octants_are_balanced() {
    let n = 10_000;
    let s = gen_primitive(ShapeKind::Sphere, n, &mut rng(2)).unwrap();
    let mut counts = [0usize; 8];
    for p in s.points() {
        let o = usize::from(p[0] > 0.0) | usize::from(p[1] > 0.0) << 1 | usize::from(p[2] > 0.0) << 2;
        counts[o] += 1;
    }
    // multinomial cell: mean n/8, standard deviation sqrt(n·(1/8)·(7/8))
    let mean = n as f64 / 8.0;
    let sigma = (n as f64 * 0.125 * 0.875).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn box_points_lie_on_exactly_one_face() {
    for seed in 0..5 {
        let b = gen_primitive(ShapeKind::Box, 2000, &mut rng(seed)).unwrap();
        let ext: Vec<f64> = (0..3).map(|d| b.points().map(|p| p[d].abs()).fold(0.0, f64::max)).collect();
        for p in b.points() {
            let on = (0..3).filter(|&d| p[d].abs() == ext[d]).count();
            assert_eq!(on, 1, "{p:?} vs extents {ext:?}");
        }
        assert!(b.max_radius() <= 1.0 + 1e-12);
    }
}

#[test]
fn every_primitive_fits_the_unit_sphere() {
    for kind in ShapeKind::ALL {
        for seed in 0..5 {
            let c = gen_primitive(kind, 300, &mut rng(seed)).unwrap();
            assert!(c.max_radius() <= 1.0 + 1e-12);
        }
    }
    assert!(gen_primitive(ShapeKind::Sphere, 0, &mut rng(0)).is_err());
    assert!("torus".parse::<ShapeKind>().is_err());
    assert_eq!("cylinder".parse::<ShapeKind>().unwrap(), ShapeKind::Cylinder);
}

// ---- occlusion --------------------------------------------------------------

#[test]
fn smallest_fraction_removes_the_most_extreme_point() {
    let mut r = rng(3);
    let gt = random_cloud(&mut r, 50);
    let top = (0..50).max_by(|&a, &b| gt.point(a)[2].total_cmp(&gt.point(b)[2])).unwrap();
    let out = occlude(&gt, [0.0, 0.0, 1.0], 1.0 / 50.0, &mut r).unwrap();
    assert_eq!(out.len(), 50);
    let survivors: Vec<usize> = (0..50).filter(|&i| i != top).collect();
    for (row, &i) in survivors.iter().enumerate() {
        assert_eq!(out.point(row), gt.point(i));
    }
    assert_ne!(out.point(49), gt.point(top));
}

#[test]
fn half_occlusion_keeps_the_lower_half_of_a_symmetric_cloud() {
    let mut r = rng(4);
    let half = random_cloud(&mut r, 100);
    let mut pts: Vec<[f64; 3]> = half.points().collect();
    pts.extend(half.points().map(|p| [p[0], p[1], -p[2]]));
    let gt = PointSet::from_points(&pts).unwrap();
    let mut zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();
    zs.sort_by(f64::total_cmp);
    let median = 0.5 * (zs[99] + zs[100]);
    let out = occlude(&gt, [0.0, 0.0, 1.0], 0.5, &mut r).unwrap();
    assert_eq!(out.len(), 200);
    for p in out.points() {
        assert!(p[2] <= median);
        assert!(pts.contains(&p));
    }
    for f in [0.0, 1.0, -0.1] {
        assert!(occlude(&gt, [0.0, 0.0, 1.0], f, &mut r).is_err());
    }
    assert!(occlude(&gt, [0.0; 3], 0.5, &mut r).is_err());
}

// ---- silhouettes ------------------------------------------------------------

#[test]
fn sphere_silhouette_area_matches_the_disc() {
    let sphere = gen_primitive(ShapeKind::Sphere, 20_000, &mut rng(5)).unwrap();
    for v in [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], viewpoints()[7]] {
        let img = render_silhouette(&sphere, v, 64, 64).unwrap();
        let lit = img.pixels().data().iter().step_by(3).filter(|&&x| x == 1.0).count() as f64;
        let r = silhouette_scale(64, 64) + SPLAT_RADIUS;
        let area = std::f64::consts::PI * r * r;
        assert!((lit - area).abs() < 0.1 * area, "{lit} lit pixels vs disc area {area}");
        assert!(img.pixels().data().iter().all(|&x| x == 0.0 || x == 1.0));
    }
}

// ---- PLY ----------------------------------------------------------------------

#[test]
fn ply_round_trip_within_nine_digits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ply");
    let cloud = random_cloud(&mut rng(6), 300);
    save_ply(&path, &cloud).unwrap();
    let back = load_ply(&path).unwrap();
    assert!(back.coords().max_abs_diff(cloud.coords()) < 1e-7);
    // a second trip through the text form is exact
    save_ply(&path, &back).unwrap();
    assert_eq!(load_ply(&path).unwrap(), back);
}

#[test]
fn single_origin_point_file_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let origin = PointSet::from_points(&[[0.0, 0.0, 0.0]]).unwrap();
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    save_ply(&a, &origin).unwrap();
    save_ply(&b, &origin).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let expected = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                    property float z\nend_header\n0 0 0\n";
    assert_eq!(String::from_utf8(bytes).unwrap(), expected);
}

#[test]
fn ply_errors_are_typed_with_line_numbers() {
    let p = Path::new("t.ply");
    let header = |n: usize| {
        format!(
            "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        )
    };
    let rows = "0 0 0\n1 1 1\n2 2 2\n3 3 3\n";
    // four rows on lines 8 to 11, so the missing fifth row would be line 12
    let (line, kind) = parse_kind(parse_ply(&format!("{}{rows}", header(5)), p).unwrap_err());
    assert_eq!(kind, ParseErrorKind::CountMismatch { declared: 5, found: 4 });
    assert_eq!(line, 12);

    let (line, kind) = parse_kind(parse_ply(&format!("{}0 0 0\n1 x 1\n", header(2)), p).unwrap_err());
    assert!(matches!(kind, ParseErrorKind::NonNumeric(t) if t == "x"));
    assert_eq!(line, 9);

    let bad = header(1).replace("format ascii 1.0", "format binary_little_endian 1.0") + "0 0 0\n";
    let (line, kind) = parse_kind(parse_ply(&bad, p).unwrap_err());
    assert!(matches!(kind, ParseErrorKind::MalformedHeader(_)));
    assert_eq!(line, 2);

    let (line, kind) = parse_kind(parse_ply("plx\n", p).unwrap_err());
    assert!(matches!(kind, ParseErrorKind::MalformedHeader(_)));
    assert_eq!(line, 1);

    assert!(matches!(load_ply("/nonexistent/x.ply"), Err(Error::Io { .. })));
}

// ---- PPM ----------------------------------------------------------------------

#[test]
fn ppm_round_trip_is_exact_for_byte_levels() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(7);
    let data = (0..10 * 12 * 3).map(|_| r.gen_range(0..=255u32) as f64 / 255.0).collect();
    let img = ImageInput::new(Tensor::new(vec![10, 12, 3], data).unwrap()).unwrap();
    let path = dir.path().join("i.ppm");
    save_ppm(&path, &img).unwrap();
    let back = load_ppm(&path).unwrap();
    assert_eq!(back, img);
    assert_eq!(ppm_string(&back), std::fs::read_to_string(&path).unwrap());

    let sil = render_silhouette(&gen_primitive(ShapeKind::Box, 500, &mut r).unwrap(), viewpoints()[3], 32, 32).unwrap();
    save_ppm(&path, &sil).unwrap();
    assert_eq!(load_ppm(&path).unwrap(), sil);
}

#[test]
fn ppm_errors_are_typed() {
    let p = Path::new("t.ppm");
    let (line, kind) = parse_kind(parse_ppm("P6\n1 1\n255\n0 0 0\n", p).unwrap_err());
    assert!(matches!(kind, ParseErrorKind::MalformedHeader(_)));
    assert_eq!(line, 1);
    let (_, kind) = parse_kind(parse_ppm("P3\n2 1\n255\n0 0 0\n", p).unwrap_err());
    assert_eq!(kind, ParseErrorKind::CountMismatch { declared: 6, found: 3 });
    let (line, kind) = parse_kind(parse_ppm("P3\n# comment\n1 1\n255\n0 300 0\n", p).unwrap_err());
    assert!(matches!(kind, ParseErrorKind::NonNumeric(_)));
    assert_eq!(line, 5);
    assert!(parse_ppm("P3\n# comment\n1 1\n255\n0 255 0\n", p).is_ok());
}

// ---- checkpoints ----------------------------------------------------------------

fn quantized(v: f64) -> f64 {
    v as f32 as f64
}

#[test]
fn checkpoint_round_trip_is_f32_exact_and_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let net = DmfNet::new(NetConfig::toy(), 3).unwrap();
    let mut state = AdamState::new(&net.params);
    let mut r = rng(8);
    for t in state.m.iter_mut().chain(state.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|x| *x = r.gen_range(0.0..1e-3));
    }
    state.t = 17;
    let (a, b) = (dir.path().join("a.dmfn"), dir.path().join("b.dmfn"));
    save_checkpoint(&a, &net.params, &state, 5).unwrap();
    save_checkpoint(&b, &net.params, &state, 5).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut fresh = DmfNet::new(NetConfig::toy(), 99).unwrap();
    let mut fresh_state = AdamState::new(&fresh.params);
    let epoch = load_checkpoint(&a, &mut fresh.params, &mut fresh_state).unwrap();
    assert_eq!(epoch, 5);
    assert_eq!(fresh_state.t, 17);
    for ((_, p), (_, q)) in net.params.iter().zip(fresh.params.iter()) {
        assert_eq!(p.name, q.name);
        let want: Vec<f64> = p.value.data().iter().map(|&v| quantized(v)).collect();
        assert_eq!(q.value.data(), want.as_slice());
    }
    for (m, n) in state.m.iter().zip(&fresh_state.m) {
        assert!(m.data().iter().zip(n.data()).all(|(&x, &y)| quantized(x) == y));
    }

    let ck = read_checkpoint(&a).unwrap();
    let names: Vec<&String> = ck.tensors.keys().collect();
    assert!(names.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(ck.tensors.len(), 3 * net.params.len());
}

#[test]
fn quantized_model_evaluates_identically_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::toy();
    let data = gen_samples(&DatasetSpec::balanced(3, cfg.n, cfg.image_size, 9)).unwrap();
    let mut net = DmfNet::new(cfg.clone(), 4).unwrap();
    net.params.quantize_f32();
    let state = AdamState::new(&net.params);
    let path = dir.path().join("m.dmfn");
    save_checkpoint(&path, &net.params, &state, 0).unwrap();
    let mut other = DmfNet::new(cfg, 5).unwrap();
    let mut other_state = AdamState::new(&other.params);
    load_checkpoint(&path, &mut other.params, &mut other_state).unwrap();
    assert_eq!(evaluate(&net, &data, 0.01).unwrap(), evaluate(&other, &data, 0.01).unwrap());
}

#[test]
fn checkpoint_mismatches_are_named_and_load_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dmfn");
    let small = NetConfig { sat_blocks: 2, ..NetConfig::toy() };
    let net = DmfNet::new(small, 1).unwrap();
    save_checkpoint(&path, &net.params, &AdamState::new(&net.params), 1).unwrap();

    // the full toy model has one more attention block than the file
    let mut bigger = DmfNet::new(NetConfig::toy(), 2).unwrap();
    let before = bigger.params.clone();
    let mut st = AdamState::new(&bigger.params);
    match load_checkpoint(&path, &mut bigger.params, &mut st) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("sat2") && msg.contains("missing"), "{msg}"),
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
    assert_eq!(bigger.params, before);

    let wide = NetConfig { c_local: 16, ..NetConfig::toy() };
    let wide = DmfNet::new(wide, 1).unwrap();
    let wpath = dir.path().join("w.dmfn");
    save_checkpoint(&wpath, &wide.params, &AdamState::new(&wide.params), 1).unwrap();
    let mut target = DmfNet::new(NetConfig::toy(), 2).unwrap();
    let mut st = AdamState::new(&target.params);
    match load_checkpoint(&wpath, &mut target.params, &mut st) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("shape"), "{msg}"),
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn checkpoint_header_is_validated() {
    let ck = Checkpoint { epoch: 0, step: 0, tensors: BTreeMap::new() };
    let good = ck.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&good).unwrap(), ck);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint(m)) if m.contains("version")));
    let mut trailing = good;
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
}

// ---- datasets ---------------------------------------------------------------------

fn dir_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        counts: vec![(ShapeKind::Sphere, 2), (ShapeKind::Box, 2)],
        n: 64,
        image_size: 16,
        seed,
        occlusion: 0.4,
    }
}

#[test]
fn dataset_is_byte_reproducible_and_loads_back() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = gen_dataset(&small_spec(11), a.path()).unwrap();
    gen_dataset(&small_spec(11), b.path()).unwrap();
    assert_eq!(dir_contents(a.path()), dir_contents(b.path()));

    let cats: Vec<&str> = m.samples.iter().map(|s| s.category.as_str()).collect();
    assert_eq!(cats, ["sphere", "sphere", "box", "box"]);

    let (loaded_m, samples) = load_dataset(a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded_m, m);
    let direct = gen_samples(&small_spec(11)).unwrap();
    for (s, d) in samples.iter().zip(&direct) {
        assert_eq!(s.image, d.image);
        assert_eq!((s.viewpoint, s.image_viewpoint), (d.viewpoint, d.image_viewpoint));
        assert!(s.gt.coords().max_abs_diff(d.gt.coords()) < 1e-7);
        assert!(s.partial.coords().max_abs_diff(d.partial.coords()) < 1e-7);
        assert!(s.gt.max_radius() <= 1.0 + 1e-7);
    }

    let text = std::fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap();
    let parsed: DatasetManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.to_json(), text);
}

#[test]
fn manifest_validation_catches_broken_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&small_spec(12), dir.path()).unwrap();
    let mpath = dir.path().join(MANIFEST_FILE);

    let mut wrong_n = m.clone();
    wrong_n.n = 65;
    wrong_n.save(&mpath).unwrap();
    assert!(matches!(load_dataset(&mpath), Err(Error::Manifest(_))));

    let mut missing = m.clone();
    missing.samples[1].gt = "samples/none.ply".into();
    missing.save(&mpath).unwrap();
    assert!(matches!(load_dataset(&mpath), Err(Error::Io { .. })));

    std::fs::write(&mpath, m.to_json().replace("\"version\": 1", "\"version\": 1, \"extra\": 0")).unwrap();
    assert!(matches!(load_dataset(&mpath), Err(Error::Manifest(_))));
}

#[test]
fn image_and_occlusion_viewpoints_usually_differ() {
    let spec = DatasetSpec { counts: vec![(ShapeKind::Sphere, 100)], n: 16, image_size: 8, seed: 13, occlusion: 0.4 };
    let differ = (0..100)
        .map(|i| gen_sample(ShapeKind::Sphere, i, &spec).unwrap())
        .filter(|s| s.viewpoint != s.image_viewpoint)
        .count();
    // each draw matches with probability 1/24, so about 96 of 100 differ
    assert!((85..100).contains(&differ) || differ == 100, "{differ}");
    assert!(differ > 0);
}

#[test]
fn samples_do_not_depend_on_generation_order() {
    let spec = small_spec(14);
    let all = gen_samples(&spec).unwrap();
    assert_eq!(gen_sample(ShapeKind::Box, 3, &spec).unwrap(), all[3]);
    assert_ne!(all[0].gt, all[1].gt);
}

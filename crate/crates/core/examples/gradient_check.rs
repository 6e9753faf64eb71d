//! Finite-difference check of the end-to-end loss gradient at toy scale.
//!
//! Usage: `cargo run --release --example gradient_check [coords] [h]`
//!
//! Gradients smaller than the finite-difference noise (about `1e-16·loss/h`)
//! cannot be resolved, so relative errors are taken against a denominator of
//! at least `FLOOR`.

use std::time::Instant;

use dmfnet::config::NetConfig;
use dmfnet::dataio::{gen_samples, DatasetSpec};
use dmfnet::diffarray::gradcheck::check_params;
use dmfnet::model::DmfNet;

const FLOOR: f64 = 1e-6;

fn main() -> anyhow::Result<()> {
    let coords: usize = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    let h: f64 = std::env::args().nth(2).map_or(Ok(1e-5), |s| s.parse())?;
    let cfg = NetConfig::toy();
    let sample = gen_samples(&DatasetSpec::balanced(1, cfg.n, cfg.image_size, 7))?.remove(0);
    let mut net = DmfNet::new(cfg, 11)?;
    // the check perturbs the store while the closure borrows the modules
    let mut store = std::mem::take(&mut net.params);
    let t = Instant::now();
    let report = check_params(&mut store, coords, h, 5, |g| {
        Ok(net.loss(g, &sample.partial, &sample.image, &sample.gt)?.1.total)
    })?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    let (worst, &(p, i, a, n)) = report
        .entries
        .iter()
        .map(|e| (rel(e.2, e.3), e))
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .expect("at least one coordinate");
    let name = &store.iter().nth(p).expect("parameter index").1.name;
    println!(
        "checked {} parameter coordinates with h = {h:e} in {:.1?}",
        report.checked,
        t.elapsed()
    );
    println!("max relative error {worst:.3e} at {name}[{i}]: analytic {a:.9e}, numeric {n:.9e}");
    Ok(())
}

//! Runs a randomly initialized network at paper scale on one synthetic
//! sample and prints the shape of every stage.
//!
//! ```text
//! cargo run --release --example shape_contract [paper|toy]
//! ```

use std::time::Instant;

use dmfnet::config::{NetConfig, Preset};
use dmfnet::dataio::{gen_primitive, render_silhouette, viewpoints, ShapeKind};
use dmfnet::model::DmfNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let preset: Preset = std::env::args().nth(1).as_deref().unwrap_or("paper").parse()?;
    let cfg = NetConfig::preset(preset);

    let t = Instant::now();
    let net = DmfNet::new(cfg.clone(), 0)?;
    println!(
        "initialized {} parameters ({} tensors) in {:.2?}",
        net.params.num_scalars(),
        net.params.len(),
        t.elapsed()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = gen_primitive(ShapeKind::Sphere, cfg.n, &mut rng)?;
    let image = render_silhouette(&cloud, viewpoints()[3], cfg.image_size, cfg.image_size)?;

    let t = Instant::now();
    let mut g = net.inference_graph();
    let fw = net.forward(&mut g, &cloud, &image)?;
    let elapsed = t.elapsed();

    for (name, v) in [
        ("F_P", fw.f_p),
        ("F_I", fw.f_i),
        ("W_IP", fw.w_ip),
        ("W_PI", fw.w_pi),
        ("F", fw.fused),
        ("P_0", fw.p0),
        ("merged seed", fw.seed),
        ("P_1", fw.p1),
        ("P_C", fw.pc),
    ] {
        println!("{name:>12}: {:?}", g.shape(v));
    }
    println!("forward pass took {elapsed:.2?}");
    Ok(())
}

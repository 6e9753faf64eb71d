//! Overfits the toy network on one shape, then completes its partial cloud
//! and writes every stage of the cascade as PLY files.
//!
//! ```text
//! cargo run --release --example complete_cloud [out_dir] [steps=150]
//! ```

use std::path::PathBuf;

use dmfnet::config::NetConfig;
use dmfnet::dataio::{gen_sample, save_ply, save_ppm, DatasetSpec, ShapeKind};
use dmfnet::geometry::PointSet;
use dmfnet::metrics::cd_l1;
use dmfnet::model::DmfNet;
use dmfnet::training::{train_batch, AdamState, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dmfnet_complete_example"));
    let steps: usize = args.next().map_or(Ok(150), |s| s.parse())?;
    std::fs::create_dir_all(&out)?;

    let cfg = NetConfig::toy();
    let spec = DatasetSpec::balanced(1, cfg.n, cfg.image_size, 5);
    let sample = gen_sample(ShapeKind::Cylinder, 0, &spec)?;
    let mut net = DmfNet::new(cfg, 0)?;
    let mut state = AdamState::new(&net.params);
    let tc = TrainConfig { lr0: 3e-3, ..TrainConfig::default() };
    for step in 0..steps {
        let r = train_batch(&mut net, &[&sample], &mut state, tc.lr0, &tc)?;
        if step % 50 == 0 {
            println!("step {step:>4}: total loss {:.4}", r.total);
        }
    }

    let mut g = net.inference_graph();
    let fw = net.forward(&mut g, &sample.partial, &sample.image)?;
    save_ply(out.join("partial.ply"), &sample.partial)?;
    save_ply(out.join("gt.ply"), &sample.gt)?;
    save_ppm(out.join("image.ppm"), &sample.image)?;
    for (name, v) in [("p0", fw.p0), ("seed", fw.seed), ("p1", fw.p1), ("completed", fw.pc)] {
        let cloud = PointSet::new(g.value(v).clone())?;
        save_ply(out.join(format!("{name}.ply")), &cloud)?;
        println!("{name:>10}: {:>4} points, L1-CD to ground truth {:.4}", cloud.len(), cd_l1(&cloud, &sample.gt));
    }
    println!("partial input L1-CD {:.4}", cd_l1(&sample.partial, &sample.gt));
    println!("files in {}", out.display());
    Ok(())
}

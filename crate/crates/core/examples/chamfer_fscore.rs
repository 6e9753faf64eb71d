//! Chamfer distances and F-Score between a box and progressively noisier
//! copies of it, plus the Chamfer gradient that training follows.
//!
//! ```text
//! cargo run --release --example chamfer_fscore
//! ```

use dmfnet::dataio::{gen_primitive, ShapeKind};
use dmfnet::diffarray::{Graph, ParamStore};
use dmfnet::geometry::PointSet;
use dmfnet::metrics::{cd_l1, cd_l2, chamfer_var, f_score, ChamferKind, CD_DISPLAY_SCALE};
use dmfnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = gen_primitive(ShapeKind::Box, 1024, &mut rng)?;

    println!("{:>8} {:>10} {:>14} {:>10} {:>10}", "noise", "L1-CD", "L2-CD x10^3", "F@0.01", "F@0.05");
    for sigma in [0.0, 0.002, 0.01, 0.03, 0.1] {
        let noisy: Vec<f64> = gt.coords().data().iter().map(|&x| x + sigma * rng.gen_range(-1.0..1.0)).collect();
        let y = PointSet::new(Tensor::new(vec![gt.len(), 3], noisy)?)?;
        println!(
            "{sigma:>8} {:>10.5} {:>14.4} {:>10.3} {:>10.3}",
            cd_l1(&y, &gt),
            cd_l2(&y, &gt) * CD_DISPLAY_SCALE,
            f_score(&y, &gt, 0.01)?,
            f_score(&y, &gt, 0.05)?
        );
    }

    // Moving every prediction along the negative gradient lowers the distance.
    let shifted: Vec<f64> = gt.coords().data().iter().enumerate().map(|(i, &x)| x + if i % 3 == 0 { 0.1 } else { 0.0 }).collect();
    let shifted = Tensor::new(vec![gt.len(), 3], shifted)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let y = g.constant(shifted.clone());
    let target = g.constant(gt.coords().clone());
    let loss = chamfer_var(&mut g, ChamferKind::L1, y, target)?;
    let grads = g.backward(loss)?;
    let dy = grads.wrt(y).expect("prediction gradient");
    let step: Vec<f64> = shifted.data().iter().zip(dy.data()).map(|(x, d)| x - 20.0 * d).collect();
    let stepped = PointSet::new(Tensor::new(vec![gt.len(), 3], step)?)?;
    println!(
        "shifted by 0.1 in x: L1-CD {:.5}, after one gradient step {:.5}",
        g.value(loss).data()[0],
        cd_l1(&stepped, &gt)
    );
    Ok(())
}

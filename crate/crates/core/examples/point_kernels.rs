//! Farthest point sampling, k-nearest neighbors and pairwise distances on a
//! random cloud, with timings at the two model resolutions.
//!
//! ```text
//! cargo run --release --example point_kernels
//! ```

use std::time::Instant;

use dmfnet::dataio::{gen_primitive, ShapeKind};
use dmfnet::geometry::{fps, knn, pairwise_sq_dist};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [256, 2048] {
        let cloud = gen_primitive(ShapeKind::Cylinder, n, &mut rng)?;
        let pts = cloud.coords();

        let t = Instant::now();
        let d = pairwise_sq_dist(pts, pts)?;
        let t_dist = t.elapsed();

        let t = Instant::now();
        let nbr = knn(pts, pts, 16)?;
        let t_knn = t.elapsed();

        let t = Instant::now();
        let picked = fps(pts, n / 8)?;
        let t_fps = t.elapsed();

        // the first neighbor of every point is the point itself
        let self_first = (0..n).filter(|&i| nbr.row(i)[0] == i).count();
        let idx = picked.data();
        let spread = idx
            .iter()
            .map(|&i| {
                idx.iter()
                    .filter(|&&j| j != i)
                    .map(|&j| d.data()[i * n + j])
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);

        println!("n = {n}");
        println!("  pairwise distances {:?} in {t_dist:.2?}", d.shape());
        println!("  16-NN graph in {t_knn:.2?}; {self_first}/{n} rows start with the point itself");
        println!(
            "  FPS of {} points in {t_fps:.2?}; first picks {:?}, min spacing {spread:.4}",
            idx.len(),
            &idx[..4]
        );
    }
    Ok(())
}

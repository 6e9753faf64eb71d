//! Coarse decoder: the fused vector is split into `N_0` point features,
//! each paired with the fused vector again, refined by two residual shared
//! MLPs and projected to coordinates.

use crate::config::NetConfig;
use crate::diffarray::{Activation, Graph, Initializer, Mlp, ParamStore, TransposeConv1d, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps, PointSet};

#[derive(Debug, Clone)]
pub struct CoarseGenerator {
    pub expand: TransposeConv1d,
    pub blocks: [Mlp; 2],
    pub head: Mlp,
    pub n0: usize,
}

impl CoarseGenerator {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &NetConfig) -> Result<Self> {
        let c = cfg.c;
        let block = |store: &mut ParamStore, init: &mut Initializer, i: usize| {
            Mlp::new(store, init, &format!("generator.block{i}"), &[2 * c, c, 2 * c], Activation::Identity)
        };
        Ok(Self {
            expand: TransposeConv1d::new(store, init, "generator.expand", c, c, cfg.n0)?,
            blocks: [block(store, init, 0)?, block(store, init, 1)?],
            head: Mlp::new(store, init, "generator.head", &[2 * c, c, 3], Activation::Identity)?,
            n0: cfg.n0,
        })
    }
}

/// `P_0`, an `N_0×3` node.
pub fn generate_coarse(g: &mut Graph, gen: &CoarseGenerator, fused: Var) -> Result<Var> {
    if g.value(fused).rows() != 1 {
        return Err(Error::shape("generate_coarse", g.shape(fused), &[1]));
    }
    let x = gen.expand.forward(g, fused)?;
    let rep = g.replicate_row(fused, gen.n0)?;
    let mut x = g.concat(&[x, rep], 1)?;
    for block in &gen.blocks {
        let y = block.forward(g, x)?;
        x = g.add(x, y)?;
    }
    gen.head.forward(g, x)
}

/// `[P_0; FPS(P, N_0)]`, the `2N_0×3` seed cloud.
pub fn seed_merge(g: &mut Graph, p0: Var, partial: &PointSet) -> Result<Var> {
    let n0 = g.value(p0).rows();
    if partial.len() < n0 {
        return Err(Error::invalid(
            "seed_merge",
            format!("partial cloud of {} points is smaller than N_0 = {n0}", partial.len()),
        ));
    }
    let idx = fps(partial.coords(), n0)?;
    let sampled = g.constant(partial.coords().select_rows(idx.data()));
    g.concat(&[p0, sampled], 0)
}

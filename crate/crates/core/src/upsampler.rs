//! Shape-aware upsample transformers.
//!
//! One stage embeds local geometry with the neighborhood communication block,
//! enhances it with self-attention, splits each point into `r` children and
//! predicts a displacement for every child relative to its parent.

use crate::config::NetConfig;
use crate::diffarray::{
    attention_heads, Activation, Graph, Initializer, LayerNorm, Linear, Mlp, MultiHeadAttention,
    ParamStore, TransposeConv1d, Var,
};
use crate::encoders::{EdgeDiff, EdgeLayer};
use crate::error::{Error, Result};
use crate::geometry::knn;

/// Neighborhood communication block.
///
/// Coordinate context `[p_i, p_i − p_ij]` goes through `alpha`, feature
/// context `[f_i, f_i − f_ij]` of the point-wise embedding `F_in` through
/// `beta`; both are maxed over the `k` neighbors and concatenated.
#[derive(Debug, Clone)]
pub struct Ncb {
    pub embed: Linear,
    pub alpha: EdgeLayer,
    pub beta: EdgeLayer,
    pub k: usize,
}

impl Ncb {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &NetConfig) -> Result<Self> {
        let (c, half) = (cfg.c_point(), cfg.c_local / 2);
        let diff = EdgeDiff::CenterMinusNeighbor;
        Ok(Self {
            embed: Linear::new(store, init, &format!("{name}.embed"), 3, c, true)?,
            alpha: EdgeLayer::new(store, init, &format!("{name}.alpha"), 3, half, diff)?,
            beta: EdgeLayer::new(store, init, &format!("{name}.beta"), c, half, diff)?,
            k: cfg.k_ncb,
        })
    }
}

/// `F_L`, an `N_in×C_L` node. The neighborhood size is capped at `N_in`.
pub fn ncb(g: &mut Graph, block: &Ncb, p_in: Var) -> Result<Var> {
    let n = g.value(p_in).rows();
    let k = block.k.min(n);
    let coords = g.value(p_in).clone();
    let geo = block.alpha.forward(g, p_in, &knn(&coords, &coords, k)?)?;

    let f_in = block.embed.forward(g, p_in)?;
    let f_in = g.relu(f_in)?;
    let fv = g.value(f_in).clone();
    let feat = block.beta.forward(g, f_in, &knn(&fv, &fv, k)?)?;
    g.concat(&[geo, feat], 1)
}

/// Self-attention block: `Z = LN(Q + MHA(Q, K, V))`, output `Z + FFN(Z)`.
#[derive(Debug, Clone)]
pub struct SatBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: Mlp,
}

impl SatBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            ffn: Mlp::new(store, init, &format!("{name}.ffn"), &[d, d, d], Activation::Identity)?,
        })
    }
}

pub fn sat_block(g: &mut Graph, block: &SatBlock, x: Var) -> Result<Var> {
    let a = &block.attn;
    let (wq, wk, wv, wo) = (g.param(a.wq), g.param(a.wk), g.param(a.wv), g.param(a.wo));
    if g.value(x).last_dim() != g.value(wq).shape()[0] {
        return Err(Error::shape("sat_block", g.shape(x), g.shape(wq)));
    }
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let h = attention_heads(g, q, k, v, a.heads)?;
    let h = g.matmul(h, wo)?;
    let z = g.add(q, h)?;
    let z = block.norm.forward(g, z)?;
    let f = block.ffn.forward(g, z)?;
    g.add(z, f)
}

#[derive(Debug, Clone)]
pub struct Sut {
    pub ncb: Ncb,
    /// `[F_L, F]` to the transformer width.
    pub proj: Linear,
    pub sat: Vec<SatBlock>,
    pub split: TransposeConv1d,
    /// `[expanded, replicated F_L]` to the displacement.
    pub head: Mlp,
    pub ratio: usize,
}

impl Sut {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &NetConfig) -> Result<Self> {
        let (cl, ce) = (cfg.c_local, cfg.c_enh);
        let sat = (0..cfg.sat_blocks)
            .map(|i| SatBlock::new(store, init, &format!("{name}.sat{i}"), ce, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            ncb: Ncb::new(store, init, &format!("{name}.ncb"), cfg)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), cl + cfg.c, ce, true)?,
            sat,
            split: TransposeConv1d::new(store, init, &format!("{name}.split"), ce, cl, cfg.up_ratio)?,
            head: Mlp::new(store, init, &format!("{name}.head"), &[2 * cl, cl, 3], Activation::Identity)?,
            ratio: cfg.up_ratio,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SutOutput {
    /// `r·N_in×3`; row `r·i + j` is a child of input point `i`.
    pub points: Var,
    pub local: Var,
    pub enhanced: Var,
    pub delta: Var,
}

pub fn sut(g: &mut Graph, stage: &Sut, p_in: Var, fused: Var) -> Result<SutOutput> {
    let n = g.value(p_in).rows();
    if g.value(p_in).last_dim() != 3 {
        return Err(Error::shape("sut", g.shape(p_in), &[n, 3]));
    }
    let local = ncb(g, &stage.ncb, p_in)?;
    let rep = g.replicate_row(fused, n)?;
    let x = g.concat(&[local, rep], 1)?;
    let mut x = stage.proj.forward(g, x)?;
    for block in &stage.sat {
        x = sat_block(g, block, x)?;
    }
    let enhanced = x;
    let expanded = stage.split.forward(g, enhanced)?;
    let parent_local = g.repeat_rows(local, stage.ratio)?;
    let h = g.concat(&[expanded, parent_local], 1)?;
    let delta = stage.head.forward(g, h)?;
    let parents = g.repeat_rows(p_in, stage.ratio)?;
    let points = g.add(parents, delta)?;
    Ok(SutOutput {
        points,
        local,
        enhanced,
        delta,
    })
}

/// Two cascaded stages: `(P_1, P_C)`.
pub fn upsample_pipeline(g: &mut Graph, stages: &[Sut; 2], seed: Var, fused: Var) -> Result<(SutOutput, SutOutput)> {
    let first = sut(g, &stages[0], seed, fused)?;
    let second = sut(g, &stages[1], first.points, fused)?;
    Ok((first, second))
}

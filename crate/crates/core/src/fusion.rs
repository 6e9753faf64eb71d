//! Dual-channel modality fusion.
//!
//! Each modality's global vector is appended to every row of the other
//! modality's features; a shared MLP plus softmax turns those rows into an
//! attention matrix over the first modality's rows. The two enhanced feature
//! sets are stacked and max-pooled into one fused vector.

use crate::config::NetConfig;
use crate::diffarray::{Activation, Graph, Initializer, Mlp, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DualFusion {
    /// Image side: `[F_I, G_P]` rows to attention over point rows.
    pub mu: Mlp,
    /// Point side: `[F_P, G_I]` rows to attention over pixel rows.
    pub theta: Mlp,
}

impl DualFusion {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &NetConfig) -> Result<Self> {
        let c = cfg.c;
        Ok(Self {
            mu: Mlp::new(store, init, "fusion.mu", &[2 * c, c, cfg.n_p()], Activation::Identity)?,
            theta: Mlp::new(store, init, "fusion.theta", &[2 * c, c, cfg.n_i()], Activation::Identity)?,
        })
    }
}

/// Channel-wise max over rows, `n×C → 1×C`.
pub fn global_pool(g: &mut Graph, feat: Var) -> Result<Var> {
    let c = g.value(feat).last_dim();
    let m = g.max_over_axis(feat, 0)?;
    g.reshape(m, vec![1, c])
}

/// `softmax(mlp([side, replicate(other_global)]))`, an `n×m` row-stochastic matrix.
pub fn enhance_and_attend(g: &mut Graph, side: Var, other_global: Var, mlp: &Mlp, m: usize) -> Result<Var> {
    if mlp.cout() != m {
        return Err(Error::invalid(
            "enhance_and_attend",
            format!("attention width {} does not match {m} rows", mlp.cout()),
        ));
    }
    let n = g.value(side).rows();
    let rep = g.replicate_row(other_global, n)?;
    let x = g.concat(&[side, rep], 1)?;
    let logits = mlp.forward(g, x)?;
    g.softmax_last(logits)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `1×C`.
    pub fused: Var,
    /// `N_I×N_P`.
    pub w_ip: Var,
    /// `N_P×N_I`.
    pub w_pi: Var,
    /// Point features mixed per pixel, `N_I×C`.
    pub f_ip: Var,
    /// Pixel features mixed per point, `N_P×C`.
    pub f_pi: Var,
}

pub fn dual_fuse(g: &mut Graph, fusion: &DualFusion, f_p: Var, f_i: Var) -> Result<FusionOutput> {
    if g.value(f_p).last_dim() != g.value(f_i).last_dim() {
        return Err(Error::shape("dual_fuse", g.shape(f_p), g.shape(f_i)));
    }
    let (n_p, n_i) = (g.value(f_p).rows(), g.value(f_i).rows());
    let g_p = global_pool(g, f_p)?;
    let g_i = global_pool(g, f_i)?;
    let w_ip = enhance_and_attend(g, f_i, g_p, &fusion.mu, n_p)?;
    let w_pi = enhance_and_attend(g, f_p, g_i, &fusion.theta, n_i)?;
    let f_ip = g.matmul(w_ip, f_p)?;
    let f_pi = g.matmul(w_pi, f_i)?;
    let both = g.concat(&[f_ip, f_pi], 0)?;
    let fused = global_pool(g, both)?;
    Ok(FusionOutput {
        fused,
        w_ip,
        w_pi,
        f_ip,
        f_pi,
    })
}

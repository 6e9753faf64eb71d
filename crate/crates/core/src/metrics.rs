//! Chamfer distances, the three-stage training loss, and F-Score.

use serde::{Deserialize, Serialize};

use crate::diffarray::{Graph, Primitive, Saved, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps, PointSet};
use crate::tensor::Tensor;

/// Default F-Score distance threshold in unit-sphere space.
pub const DEFAULT_FSCORE_TAU: f64 = 0.01;

/// Chamfer distances are displayed multiplied by this factor.
pub const CD_DISPLAY_SCALE: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferKind {
    /// Euclidean distances.
    L1,
    /// Squared Euclidean distances.
    L2,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `to` for every row of `from` (ties: smaller index).
fn nearest(from: &Tensor, to: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(from.rows());
    let mut dist = Vec::with_capacity(from.rows());
    for i in 0..from.rows() {
        let p = from.row(i);
        let mut best = f64::INFINITY;
        let mut bj = 0;
        for j in 0..to.rows() {
            let d = sq_dist(p, to.row(j));
            if d < best {
                best = d;
                bj = j;
            }
        }
        idx.push(bj);
        dist.push(best);
    }
    (idx, dist)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 2 || b.ndim() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::shape("chamfer", a.shape(), b.shape()));
    }
    Ok(())
}

fn chamfer_value(kind: ChamferKind, y: &Tensor, gt: &Tensor) -> (f64, Vec<usize>) {
    let (fwd, dfwd) = nearest(y, gt);
    let (bwd, dbwd) = nearest(gt, y);
    let term = |d: f64| match kind {
        ChamferKind::L1 => d.sqrt(),
        ChamferKind::L2 => d,
    };
    let a: f64 = dfwd.iter().map(|&d| term(d)).sum::<f64>() / (2 * y.rows()) as f64;
    let b: f64 = dbwd.iter().map(|&d| term(d)).sum::<f64>() / (2 * gt.rows()) as f64;
    let mut pairing = fwd;
    pairing.extend(bwd);
    (a + b, pairing)
}

/// Chamfer distance between two point sets.
pub fn chamfer(kind: ChamferKind, y: &PointSet, gt: &PointSet) -> f64 {
    chamfer_value(kind, y.coords(), gt.coords()).0
}

pub fn cd_l1(y: &PointSet, gt: &PointSet) -> f64 {
    chamfer(ChamferKind::L1, y, gt)
}

pub fn cd_l2(y: &PointSet, gt: &PointSet) -> f64 {
    chamfer(ChamferKind::L2, y, gt)
}

/// Chamfer distance as a graph primitive. The min is differentiated through
/// the argmin pairing fixed in the forward pass; a zero-length L1 pair
/// contributes a zero subgradient.
#[derive(Debug)]
struct ChamferOp(ChamferKind);

impl Primitive for ChamferOp {
    fn name(&self) -> &'static str {
        match self.0 {
            ChamferKind::L1 => "chamfer_l1",
            ChamferKind::L2 => "chamfer_l2",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
        check_pair(inputs[0], inputs[1])?;
        let (v, pairing) = chamfer_value(self.0, inputs[0], inputs[1]);
        Ok((Tensor::scalar(v), Saved::Indices(pairing)))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, saved: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
        let (y, gt) = (inputs[0], inputs[1]);
        let Saved::Indices(pairing) = saved else {
            unreachable!("chamfer saves its pairing")
        };
        let (n, m, c) = (y.rows(), gt.rows(), y.last_dim());
        let (fwd, bwd) = pairing.split_at(n);
        let gv = g.item();
        let mut dy = vec![0.0; y.numel()];
        let mut dgt = vec![0.0; gt.numel()];
        let kind = self.0;
        // d(term)/d(from) for one pair, scaled by `w`
        let pair = |from: &[f64], to: &[f64], w: f64, dfrom: &mut [f64], dto: &mut [f64]| {
            let coef = match kind {
                ChamferKind::L2 => 2.0 * w,
                ChamferKind::L1 => {
                    let d = sq_dist(from, to).sqrt();
                    if d == 0.0 {
                        return;
                    }
                    w / d
                }
            };
            for k in 0..c {
                let diff = coef * (from[k] - to[k]);
                dfrom[k] += diff;
                dto[k] -= diff;
            }
        };
        let wf = gv / (2 * n) as f64;
        for (i, &j) in fwd.iter().enumerate() {
            let (a, b) = (&mut dy[i * c..(i + 1) * c], &mut dgt[j * c..(j + 1) * c]);
            pair(y.row(i), gt.row(j), wf, a, b);
        }
        let wb = gv / (2 * m) as f64;
        for (j, &i) in bwd.iter().enumerate() {
            let (a, b) = (&mut dgt[j * c..(j + 1) * c], &mut dy[i * c..(i + 1) * c]);
            pair(gt.row(j), y.row(i), wb, a, b);
        }
        vec![
            Some(Tensor::new(y.shape().to_vec(), dy).unwrap()),
            Some(Tensor::new(gt.shape().to_vec(), dgt).unwrap()),
        ]
    }
}

/// Differentiable Chamfer distance between two `n×3` / `m×3` nodes.
pub fn chamfer_var(g: &mut Graph, kind: ChamferKind, y: Var, gt: Var) -> Result<Var> {
    g.apply(Box::new(ChamferOp(kind)), &[y, gt])
}

/// Harmonic mean of precision and recall at distance threshold `tau`.
pub fn f_score(y: &PointSet, gt: &PointSet, tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("f_score", format!("tau must be positive, got {tau}")));
    }
    let tau2 = tau * tau;
    let (_, dy) = nearest(y.coords(), gt.coords());
    let (_, dg) = nearest(gt.coords(), y.coords());
    let precision = dy.iter().filter(|&&d| d <= tau2).count() as f64 / dy.len() as f64;
    let recall = dg.iter().filter(|&&d| d <= tau2).count() as f64 / dg.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Ground truth downsampled to the resolution of each supervised stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPyramid {
    /// Target of the merged seed cloud.
    pub y0: PointSet,
    /// Target of the first upsampler.
    pub y1: PointSet,
    pub ygt: PointSet,
}

/// Selects `y1` as the first `n1` FPS picks of `ygt` and `y0` as the first
/// `n0_concat` of those, so `y0 ⊂ y1 ⊂ ygt`.
pub fn build_pyramid(ygt: &PointSet, n0_concat: usize, n1: usize) -> Result<GroundTruthPyramid> {
    if n0_concat == 0 || n0_concat > n1 || n1 > ygt.len() {
        return Err(Error::invalid(
            "build_pyramid",
            format!(
                "need 1 <= n0 <= n1 <= N, got n0={n0_concat} n1={n1} N={}",
                ygt.len()
            ),
        ));
    }
    let order = fps(ygt.coords(), n1)?;
    let idx = order.data();
    Ok(GroundTruthPyramid {
        y0: ygt.select(&idx[..n0_concat])?,
        y1: ygt.select(idx)?,
        ygt: ygt.clone(),
    })
}

/// Per-stage L1 Chamfer losses of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cd_coarse: f64,
    pub cd_intermediate: f64,
    pub cd_final: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(cd_coarse: f64, cd_intermediate: f64, cd_final: f64) -> Self {
        Self {
            cd_coarse,
            cd_intermediate,
            cd_final,
            total: cd_coarse + cd_intermediate + cd_final,
        }
    }

    /// Term-wise mean.
    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::from_terms(
            s(|r| r.cd_coarse),
            s(|r| r.cd_intermediate),
            s(|r| r.cd_final),
        )
    }
}

/// Graph nodes of the three-term loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub coarse: Var,
    pub intermediate: Var,
    pub final_: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            cd_coarse: g.value(self.coarse).item(),
            cd_intermediate: g.value(self.intermediate).item(),
            cd_final: g.value(self.final_).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `L1-CD(P0', Y0) + L1-CD(P1, Y1) + L1-CD(PC, Ygt)` with unit weights.
///
/// The merged seed and the first upsampler output must match the pyramid's
/// resolutions; the final cloud is compared against the full ground truth.
pub fn total_loss(
    g: &mut Graph,
    seed: Var,
    p1: Var,
    pc: Var,
    pyr: &GroundTruthPyramid,
) -> Result<LossVars> {
    for (name, v, target) in [("seed", seed, &pyr.y0), ("intermediate", p1, &pyr.y1)] {
        if g.value(v).rows() != target.len() {
            return Err(Error::invalid(
                "total_loss",
                format!(
                    "{name} cloud has {} points, target has {}",
                    g.value(v).rows(),
                    target.len()
                ),
            ));
        }
    }
    let y0 = g.constant(pyr.y0.coords().clone());
    let y1 = g.constant(pyr.y1.coords().clone());
    let ygt = g.constant(pyr.ygt.coords().clone());
    let coarse = chamfer_var(g, ChamferKind::L1, seed, y0)?;
    let intermediate = chamfer_var(g, ChamferKind::L1, p1, y1)?;
    let final_ = chamfer_var(g, ChamferKind::L1, pc, ygt)?;
    let s = g.add(coarse, intermediate)?;
    let total = g.add(s, final_)?;
    Ok(LossVars {
        coarse,
        intermediate,
        final_,
        total,
    })
}

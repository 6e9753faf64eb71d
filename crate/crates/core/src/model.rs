//! The full network: encoders, fusion, coarse generator and two upsamplers,
//! with their parameters in one [`ParamStore`].

use crate::config::NetConfig;
use crate::diffarray::{Graph, Initializer, ParamStore, Var};
use crate::encoders::{encode_image, encode_points, ImageEncoder, ImageInput, PointEncoder};
use crate::error::Result;
use crate::fusion::{dual_fuse, DualFusion};
use crate::generator::{generate_coarse, seed_merge, CoarseGenerator};
use crate::geometry::PointSet;
use crate::metrics::{build_pyramid, total_loss, LossVars};
use crate::tensor::IndexTensor;
use crate::upsampler::{upsample_pipeline, Sut};

#[derive(Debug, Clone)]
pub struct DmfNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub points: PointEncoder,
    pub image: ImageEncoder,
    pub fusion: DualFusion,
    pub generator: CoarseGenerator,
    pub upsamplers: [Sut; 2],
}

/// Every intermediate of one forward pass, as graph nodes.
#[derive(Debug, Clone)]
pub struct Forward {
    pub f_p: Var,
    pub source_idx: IndexTensor,
    pub f_i: Var,
    pub w_ip: Var,
    pub w_pi: Var,
    pub f_ip: Var,
    pub f_pi: Var,
    pub fused: Var,
    pub p0: Var,
    pub seed: Var,
    pub p1: Var,
    pub pc: Var,
}

impl DmfNet {
    /// A randomly initialized network; the same `seed` gives identical weights.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let store = &mut params;
        let points = PointEncoder::new(store, &mut init, &cfg)?;
        let image = ImageEncoder::new(store, &mut init, &cfg)?;
        let fusion = DualFusion::new(store, &mut init, &cfg)?;
        let generator = CoarseGenerator::new(store, &mut init, &cfg)?;
        let upsamplers = [
            Sut::new(store, &mut init, "upsampler.sut0", &cfg)?,
            Sut::new(store, &mut init, "upsampler.sut1", &cfg)?,
        ];
        Ok(Self {
            cfg,
            params,
            points,
            image,
            fusion,
            generator,
            upsamplers,
        })
    }

    /// A recording graph over this network's parameters.
    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    /// A graph that evaluates without recording intermediates for backward.
    pub fn inference_graph(&self) -> Graph<'_> {
        Graph::inference(&self.params)
    }

    /// Runs the whole pipeline on `g`, which must be built over `self.params`.
    pub fn forward(&self, g: &mut Graph, partial: &PointSet, image: &ImageInput) -> Result<Forward> {
        let pf = encode_points(g, &self.points, partial, &self.cfg)?;
        let pix = encode_image(g, &self.image, image, &self.cfg)?;
        let fo = dual_fuse(g, &self.fusion, pf.feat, pix.feat)?;
        let p0 = generate_coarse(g, &self.generator, fo.fused)?;
        let seed = seed_merge(g, p0, partial)?;
        let (s1, s2) = upsample_pipeline(g, &self.upsamplers, seed, fo.fused)?;
        Ok(Forward {
            f_p: pf.feat,
            source_idx: pf.source_idx,
            f_i: pix.feat,
            w_ip: fo.w_ip,
            w_pi: fo.w_pi,
            f_ip: fo.f_ip,
            f_pi: fo.f_pi,
            fused: fo.fused,
            p0,
            seed,
            p1: s1.points,
            pc: s2.points,
        })
    }

    /// Forward pass plus the three-term loss against `gt`.
    pub fn loss(
        &self,
        g: &mut Graph,
        partial: &PointSet,
        image: &ImageInput,
        gt: &PointSet,
    ) -> Result<(Forward, LossVars)> {
        let fw = self.forward(g, partial, image)?;
        let pyr = build_pyramid(gt, self.cfg.n_seed(), self.cfg.n1())?;
        let loss = total_loss(g, fw.seed, fw.p1, fw.pc, &pyr)?;
        Ok((fw, loss))
    }
}

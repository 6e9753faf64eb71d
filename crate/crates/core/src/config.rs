//! Architectural constants with `paper` and `toy` presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Every shape constant of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Points in the partial input and in the ground truth.
    pub n: usize,
    /// Points of the coarse cloud.
    pub n0: usize,
    /// Shared feature width of both encoders and of the fused vector.
    pub c: usize,
    /// Width of the local feature produced by the neighborhood block.
    pub c_local: usize,
    /// Width inside the transformer blocks.
    pub c_enh: usize,
    /// Square input image side.
    pub image_size: usize,
    pub heads: usize,
    /// Points per upsampler parent.
    pub up_ratio: usize,
    pub k_edge: usize,
    pub k_pool: [usize; 2],
    pub pool_ratio: usize,
    pub k_ncb: usize,
    /// Output widths of the two EdgeConv layers.
    pub edge_widths: [usize; 2],
    pub image_stem_stride: usize,
    pub image_stage_strides: [usize; 4],
    pub sat_blocks: usize,
}

impl NetConfig {
    /// All constants of the published configuration.
    pub fn paper() -> Self {
        Self {
            n: 2048,
            n0: 256,
            c: 512,
            c_local: 128,
            c_enh: 512,
            image_size: 224,
            heads: 4,
            up_ratio: 2,
            k_edge: 20,
            k_pool: [16, 6],
            pool_ratio: 4,
            k_ncb: 16,
            edge_widths: [64, 256],
            image_stem_stride: 2,
            image_stage_strides: [2, 2, 2, 2],
            sat_blocks: 3,
        }
    }

    /// Laptop-sized configuration used for gradient checks and training runs.
    pub fn toy() -> Self {
        Self {
            n: 256,
            n0: 64,
            c: 64,
            c_local: 32,
            c_enh: 64,
            image_size: 32,
            heads: 2,
            up_ratio: 2,
            k_edge: 20,
            k_pool: [16, 6],
            pool_ratio: 4,
            k_ncb: 16,
            edge_widths: [16, 32],
            image_stem_stride: 2,
            image_stage_strides: [1, 2, 1, 2],
            sat_blocks: 3,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    /// Rows of the point-wise feature.
    pub fn n_p(&self) -> usize {
        self.n / (self.pool_ratio * self.pool_ratio)
    }

    /// Side of the final image feature map.
    pub fn grid(&self) -> usize {
        // a 3x3 convolution with padding 1 maps side s to ceil(s / stride)
        let mut side = self.image_size;
        for s in std::iter::once(self.image_stem_stride).chain(self.image_stage_strides) {
            side = side.div_ceil(s);
        }
        side
    }

    /// Rows of the pixel-wise feature.
    pub fn n_i(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Points of the merged seed cloud.
    pub fn n_seed(&self) -> usize {
        2 * self.n0
    }

    pub fn n1(&self) -> usize {
        self.n_seed() * self.up_ratio
    }

    pub fn n_out(&self) -> usize {
        self.n1() * self.up_ratio
    }

    /// Width of the coordinate MLP inside the neighborhood block.
    pub fn c_point(&self) -> usize {
        self.c_local / 2
    }

    /// Channel widths of the stem and the four image stages.
    pub fn image_widths(&self) -> [usize; 4] {
        [self.c / 8, self.c / 4, self.c / 2, self.c]
    }

    /// Checks every divisibility and ordering constraint before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("n", self.n),
            ("n0", self.n0),
            ("c", self.c),
            ("c_local", self.c_local),
            ("c_enh", self.c_enh),
            ("image_size", self.image_size),
            ("heads", self.heads),
            ("up_ratio", self.up_ratio),
            ("k_edge", self.k_edge),
            ("k_pool[0]", self.k_pool[0]),
            ("k_pool[1]", self.k_pool[1]),
            ("pool_ratio", self.pool_ratio),
            ("k_ncb", self.k_ncb),
            ("edge_widths[0]", self.edge_widths[0]),
            ("edge_widths[1]", self.edge_widths[1]),
            ("image_stem_stride", self.image_stem_stride),
            ("sat_blocks", self.sat_blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.image_stage_strides.contains(&0) {
            return fail("image stage strides must be positive".into());
        }
        let pool2 = self.pool_ratio * self.pool_ratio;
        if self.n % pool2 != 0 {
            return fail(format!(
                "n = {} is not divisible by pool_ratio^2 = {pool2}",
                self.n
            ));
        }
        let pooled = self.n / self.pool_ratio;
        if self.k_edge > pooled {
            return fail(format!(
                "k_edge = {} exceeds the {pooled} points seen by the second EdgeConv",
                self.k_edge
            ));
        }
        if self.k_pool[0] > self.n || self.k_pool[1] > pooled {
            return fail(format!("pooling neighborhoods {:?} too large", self.k_pool));
        }
        if self.n0 > self.n {
            return fail(format!("n0 = {} exceeds n = {}", self.n0, self.n));
        }
        if self.n1() > self.n {
            return fail(format!(
                "intermediate cloud of {} points exceeds the {}-point ground truth",
                self.n1(),
                self.n
            ));
        }
        if self.c % 8 != 0 {
            return fail(format!("c = {} must be divisible by 8", self.c));
        }
        if self.c_local % 2 != 0 {
            return fail(format!("c_local = {} must be even", self.c_local));
        }
        if self.c_enh % self.heads != 0 {
            return fail(format!(
                "heads = {} must divide c_enh = {}",
                self.heads, self.c_enh
            ));
        }
        if self.image_size < 8 {
            return fail(format!("image_size = {} is below 8 pixels", self.image_size));
        }
        Ok(())
    }
}

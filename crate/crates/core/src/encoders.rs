//! The point encoder (dynamic EdgeConv interleaved with self-attention graph
//! pooling) and the residual image encoder. Both emit row-wise features of
//! the same width `C`.

use crate::config::NetConfig;
use crate::diffarray::{Conv2d, Graph, Initializer, Linear, ParamId, ParamStore, ResidualBlock2d, Var};
use crate::error::{Error, Result};
use crate::geometry::{gather_centers_var, gather_neighbors_var, knn, NeighborIndex, PointSet};
use crate::tensor::{IndexTensor, Tensor};

/// The difference term that accompanies the center feature on each edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeDiff {
    /// `[f_i, f_j − f_i]`, the EdgeConv convention.
    NeighborMinusCenter,
    /// `[f_i, f_i − f_j]`, the context-vector convention of the upsampler.
    CenterMinusNeighbor,
}

/// One shared linear layer plus relu over edge features, evaluated for every
/// (point, neighbor) pair.
///
/// The weight is stored as the `2cin × cout` matrix acting on the concatenated
/// edge feature, but the product is split into a per-center and a
/// per-neighbor term so no `n×k×2cin` tensor is materialized:
/// `[f_i, f_j − f_i]·[W1; W2] = f_i·(W1 − W2) + f_j·W2`.
#[derive(Debug, Clone)]
pub struct EdgeLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub diff: EdgeDiff,
}

impl EdgeLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        diff: EdgeDiff,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init.uniform_fan_in(vec![2 * cin, cout], 2 * cin),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?,
            cin,
            cout,
            diff,
        })
    }

    /// Edge activations of shape `n×k×cout`.
    pub fn edges(&self, g: &mut Graph, x: Var, nbr: &NeighborIndex) -> Result<Var> {
        if g.value(x).last_dim() != self.cin {
            return Err(Error::shape("edge layer", g.shape(x), &[self.cin]));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let w1 = g.slice(w, 0, 0, self.cin)?;
        let w2 = g.slice(w, 0, self.cin, self.cin)?;
        let (center_w, nbr_w) = match self.diff {
            EdgeDiff::NeighborMinusCenter => (g.sub(w1, w2)?, w2),
            EdgeDiff::CenterMinusNeighbor => (g.add(w1, w2)?, g.scale(w2, -1.0)?),
        };
        let center = g.linear(x, center_w, Some(b))?;
        let neighbor = g.linear(x, nbr_w, None)?;
        let center = gather_centers_var(g, center, nbr.k())?;
        let neighbor = gather_neighbors_var(g, neighbor, nbr)?;
        let e = g.add(center, neighbor)?;
        g.relu(e)
    }

    /// Edge activations max-pooled over each neighborhood: `n×cout`.
    pub fn forward(&self, g: &mut Graph, x: Var, nbr: &NeighborIndex) -> Result<Var> {
        let e = self.edges(g, x, nbr)?;
        g.max_over_axis(e, 1)
    }
}

/// EdgeConv over the `k`-nearest-neighbor graph of `knn_source` (coordinates
/// for the first layer, the layer's own input features afterwards).
pub fn edgeconv(g: &mut Graph, layer: &EdgeLayer, feat: Var, knn_source: &Tensor, k: usize) -> Result<Var> {
    let n = g.value(feat).rows();
    if k > n {
        return Err(Error::invalid("edgeconv", format!("k = {k} exceeds {n} points")));
    }
    let nbr = knn(knn_source, knn_source, k)?;
    layer.forward(g, feat, &nbr)
}

/// Self-attention graph pooling: a mean-aggregation graph convolution scores
/// every point, the top `n / ratio` survive and are gated by their score.
#[derive(Debug, Clone)]
pub struct SagPool {
    pub score: Linear,
}

#[derive(Debug, Clone)]
pub struct Pooled {
    /// Gated surviving features, ordered by descending score.
    pub feat: Var,
    /// Row of the input each survivor came from.
    pub kept: Vec<usize>,
    /// Score of every input row.
    pub scores: Vec<f64>,
}

impl SagPool {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            score: Linear::new(store, init, &format!("{name}.score"), c, 1, true)?,
        })
    }
}

/// Indices of the `m` largest scores, largest first, ties to the smaller index.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

pub fn sagpool(
    g: &mut Graph,
    pool: &SagPool,
    feat: Var,
    coords: &Tensor,
    ratio: usize,
    k: usize,
) -> Result<Pooled> {
    let n = g.value(feat).rows();
    if ratio == 0 || n % ratio != 0 {
        return Err(Error::invalid(
            "sagpool",
            format!("ratio {ratio} does not divide {n} points"),
        ));
    }
    if coords.rows() != n {
        return Err(Error::shape("sagpool", g.shape(feat), coords.shape()));
    }
    let nbr = knn(coords, coords, k)?;
    let gathered = gather_neighbors_var(g, feat, &nbr)?;
    let agg = g.mean_over_axis(gathered, 1)?;
    let s = pool.score.forward(g, agg)?;
    let s = g.tanh(s)?;
    let scores = g.value(s).data().to_vec();
    let kept = top_m(&scores, n / ratio);
    let m = kept.len();
    let f = g.gather_rows(feat, kept.clone(), &[m])?;
    let sk = g.gather_rows(s, kept.clone(), &[m])?;
    let feat = g.scale_rows(f, sk)?;
    Ok(Pooled { feat, kept, scores })
}

#[derive(Debug, Clone)]
pub struct PointEncoder {
    pub edge: [EdgeLayer; 2],
    pub pool: [SagPool; 2],
    pub head: Linear,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &NetConfig) -> Result<Self> {
        let [w0, w1] = cfg.edge_widths;
        let nbr = EdgeDiff::NeighborMinusCenter;
        Ok(Self {
            edge: [
                EdgeLayer::new(store, init, "encoders.points.edge0", 3, w0, nbr)?,
                EdgeLayer::new(store, init, "encoders.points.edge1", w0, w1, nbr)?,
            ],
            pool: [
                SagPool::new(store, init, "encoders.points.pool0", w0)?,
                SagPool::new(store, init, "encoders.points.pool1", w1)?,
            ],
            head: Linear::new(store, init, "encoders.points.head", w1, cfg.c, true)?,
        })
    }
}

/// Point-wise feature `F_P` and the input row behind each feature row.
#[derive(Debug, Clone)]
pub struct PointFeature {
    pub feat: Var,
    pub source_idx: IndexTensor,
}

pub fn encode_points(g: &mut Graph, enc: &PointEncoder, cloud: &PointSet, cfg: &NetConfig) -> Result<PointFeature> {
    if cloud.len() != cfg.n {
        return Err(Error::invalid(
            "encode_points",
            format!("expected {} points, got {}", cfg.n, cloud.len()),
        ));
    }
    let coords = cloud.coords();
    let x = g.constant(coords.clone());
    let h = edgeconv(g, &enc.edge[0], x, coords, cfg.k_edge)?;
    let p0 = sagpool(g, &enc.pool[0], h, coords, cfg.pool_ratio, cfg.k_pool[0])?;
    let coords1 = coords.select_rows(&p0.kept);

    let feat_space = g.value(p0.feat).clone();
    let h = edgeconv(g, &enc.edge[1], p0.feat, &feat_space, cfg.k_edge)?;
    let p1 = sagpool(g, &enc.pool[1], h, &coords1, cfg.pool_ratio, cfg.k_pool[1])?;

    let source: Vec<usize> = p1.kept.iter().map(|&i| p0.kept[i]).collect();
    Ok(PointFeature {
        feat: enc.head.forward(g, p1.feat)?,
        source_idx: IndexTensor::from_vec(source),
    })
}

/// An RGB image with values in `[0, 1]`, stored `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput(Tensor);

impl ImageInput {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("image", s, &[s[0], s.get(1).copied().unwrap_or(0), 3]));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image", "pixel values must lie in [0, 1]"));
        }
        Ok(Self(pixels))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub stem: Conv2d,
    /// Four stages of two residual blocks.
    pub stages: Vec<[ResidualBlock2d; 2]>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &NetConfig) -> Result<Self> {
        let widths = cfg.image_widths();
        let stem = Conv2d::new(store, init, "encoders.image.stem", 3, 3, widths[0], cfg.image_stem_stride)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (s, (&w, &stride)) in widths.iter().zip(&cfg.image_stage_strides).enumerate() {
            let name = format!("encoders.image.stage{s}");
            stages.push([
                ResidualBlock2d::new(store, init, &format!("{name}.block0"), cin, w, stride)?,
                ResidualBlock2d::new(store, init, &format!("{name}.block1"), w, w, 1)?,
            ]);
            cin = w;
        }
        Ok(Self { stem, stages })
    }
}

/// Pixel-wise feature `F_I`: the final feature map flattened row-major.
#[derive(Debug, Clone)]
pub struct PixelFeature {
    pub feat: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub fn encode_image(g: &mut Graph, enc: &ImageEncoder, image: &ImageInput, cfg: &NetConfig) -> Result<PixelFeature> {
    if image.height() != cfg.image_size || image.width() != cfg.image_size {
        return Err(Error::invalid(
            "encode_image",
            format!(
                "expected {0}x{0} image, got {1}x{2}",
                cfg.image_size,
                image.height(),
                image.width()
            ),
        ));
    }
    let x = g.constant(image.pixels().clone());
    let h = enc.stem.forward(g, x)?;
    let mut h = g.relu(h)?;
    for stage in &enc.stages {
        for block in stage {
            h = block.forward(g, h)?;
        }
    }
    let s = g.shape(h).to_vec();
    let feat = g.reshape(h, vec![s[0] * s[1], s[2]])?;
    Ok(PixelFeature {
        feat,
        grid_h: s[0],
        grid_w: s[1],
    })
}

//! Parameterized building blocks composed from the primitives.

use super::{Graph, Initializer, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Shared affine layer `[.., cin] -> [.., cout]`; parameters `<name>.weight`, `<name>.bias`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform_fan_in(vec![cin, cout], cin),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Stack of shared linear layers with relu between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub last: Activation,
}

impl Mlp {
    /// `widths = [cin, h1, ..., cout]`; layers are named `<name>.layer<i>`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        widths: &[usize],
        last: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp {name} needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.layer{i}"), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(Self { layers, last })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            x = if i + 1 < n {
                g.relu(x)?
            } else {
                self.last.apply(g, x)?
            };
        }
        Ok(x)
    }

    pub fn cin(&self) -> usize {
        self.layers[0].cin
    }

    pub fn cout(&self) -> usize {
        self.layers.last().unwrap().cout
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![width]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width]))?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Square-kernel convolution with `k/2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let kernel = store.add(
            format!("{name}.kernel"),
            init.uniform_fan_in(vec![size, size, cin, cout], size * size * cin),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
        Ok(Self {
            kernel,
            bias,
            stride,
            pad: size / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.conv2d(x, k, b, self.stride, self.pad)
    }
}

/// conv-norm-relu-conv-norm plus skip, then relu. The skip is a strided
/// 1x1 convolution whenever the block changes resolution or width.
#[derive(Debug, Clone)]
pub struct ResidualBlock2d {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let skip = if stride != 1 || cin != cout {
            Some(Conv2d::new(store, init, &format!("{name}.skip"), 1, cin, cout, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), 3, cin, cout, stride)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cout)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), 3, cout, cout, 1)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cout)?,
            skip,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        g.relu(y)
    }
}

/// Scaled dot-product attention per head over pre-projected `q`, `k`, `v`
/// (`n×d`, `m×d`, `m×d`); heads are concatenated back to `n×d`.
pub fn attention_heads(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(
            "multi_head_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    if g.value(k).last_dim() != d || g.value(v).last_dim() != d {
        return Err(Error::shape("multi_head_attention", g.shape(q), g.shape(k)));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_last(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Full multi-head attention: project `q`, `k`, `v`, attend per head, project out.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let q = g.matmul(q, wq)?;
    let k = g.matmul(k, wk)?;
    let v = g.matmul(v, wv)?;
    let o = attention_heads(g, q, k, v, heads)?;
    g.matmul(o, wo)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {d} not divisible by {heads} heads"
            )));
        }
        let mut w = |s: &str| store.add(format!("{name}.{s}"), init.uniform_fan_in(vec![d, d], d));
        Ok(Self {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
            heads,
        })
    }
}

/// Point-splitting transpose convolution with kernel = stride = `ratio`.
///
/// `w` is `cin × (ratio·cout)`; output row `ratio·i + j` is input row `i`
/// times the `j`-th `cin × cout` block of `w`, plus `b`.
pub fn transpose_conv1d(g: &mut Graph, x: Var, w: Var, b: Var, ratio: usize) -> Result<Var> {
    if ratio < 1 {
        return Err(Error::invalid("transpose_conv1d", "ratio must be >= 1"));
    }
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || ws[1] % ratio != 0 {
        return Err(Error::shape("transpose_conv1d", &xs, &ws));
    }
    let cout = ws[1] / ratio;
    let y = g.matmul(x, w)?;
    let y = g.reshape(y, vec![xs[0] * ratio, cout])?;
    g.add_bias(y, b)
}

#[derive(Debug, Clone)]
pub struct TransposeConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ratio: usize,
    pub cout: usize,
}

impl TransposeConv1d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio < 1 {
            return Err(Error::Config(format!("{name}: ratio must be >= 1")));
        }
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init.uniform_fan_in(vec![cin, ratio * cout], cin),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]))?,
            ratio,
            cout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        transpose_conv1d(g, x, w, b, self.ratio)
    }
}

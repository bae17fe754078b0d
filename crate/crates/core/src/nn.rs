//! Parameterized layers shared by the encoders, CAM, the masked-token
//! predictor and the decoder. Layers only hold parameter names; values live
//! in a [`ParamStore`] and are bound on a [`Graph`] at forward time.

use std::sync::Arc;

use magnet_autograd::{AttentionSpec, Graph, ParamStore, Scalar, Var};

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x W + b` with `W: fan_in x fan_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        store.init_linear(seed, &self.weight_name(), self.fan_in, self.fan_out);
        store.init_zeros(&self.bias_name(), 1, self.fan_out);
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.init_zeros(&self.weight_name(), self.fan_in, self.fan_out);
        store.init_zeros(&self.bias_name(), 1, self.fan_out);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.init_full(&format!("{}.gamma", self.name), 1, self.dim, 1.0);
        store.init_zeros(&format!("{}.beta", self.name), 1, self.dim);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{}.gamma", self.name))?;
        let beta = g.param(&format!("{}.beta", self.name))?;
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

/// Dense layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`; layer `i` is named `{name}.fc{i}`.
    pub fn new(name: &str, dims: &[usize]) -> Self {
        Self {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| Linear::new(format!("{name}.fc{i}"), d[0], d[1]))
                .collect(),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for l in &self.layers {
            l.init(store, seed);
        }
    }

    /// Zeroes the last layer so the MLP starts as the constant zero map.
    pub fn init_zero_output<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.init(store, seed);
        if let Some(last) = self.layers.last() {
            last.init_zero(store);
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.gelu(x);
            }
            x = l.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Pre-norm transformer layer over `batch` sequences of `len` rows.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub width: usize,
}

impl TransformerBlock {
    pub fn new(name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(format!("{name}.norm1"), width),
            qkv: Linear::new(format!("{name}.qkv"), width, 3 * width),
            proj: Linear::new(format!("{name}.proj"), width, width),
            norm2: LayerNorm::new(format!("{name}.norm2"), width),
            mlp: Mlp::new(&format!("{name}.mlp"), &[width, mlp_ratio * width, width]),
            heads,
            width,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.norm1.init(store);
        self.qkv.init(store, seed);
        self.proj.init(store, seed);
        self.norm2.init(store);
        self.mlp.init(store, seed);
    }

    /// Zeroes both residual branch outputs, making the block the identity.
    pub fn zero_residuals<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.proj.init_zero(store);
        if let Some(last) = self.mlp.layers.last() {
            last.init_zero(store);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        len: usize,
        key_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.slice_cols(qkv, 0, self.width)?;
        let k = g.slice_cols(qkv, self.width, self.width)?;
        let v = g.slice_cols(qkv, 2 * self.width, self.width)?;
        let spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: self.heads,
            key_mask,
        };
        let a = g.attention(q, k, v, spec)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        Ok(g.add(x, m)?)
    }
}

/// Residual convolutional block on a `batch x h x w` map:
/// depthwise 3x3, layer norm, pointwise expansion, GELU, pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub name: String,
    pub channels: usize,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl ConvBlock {
    pub fn new(name: &str, channels: usize, mlp_ratio: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            norm: LayerNorm::new(format!("{name}.norm"), channels),
            mlp: Mlp::new(&format!("{name}.mlp"), &[channels, mlp_ratio * channels, channels]),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        store.init_normal(seed, &format!("{}.dw", self.name), 9, self.channels, 1.0 / 3.0);
        store.init_zeros(&format!("{}.dw.b", self.name), 1, self.channels);
        self.norm.init(store);
        self.mlp.init(store, seed);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let k = g.param(&format!("{}.dw", self.name))?;
        let kb = g.param(&format!("{}.dw.b", self.name))?;
        let y = g.depthwise_conv3(x, k, batch, h, w)?;
        let y = g.add_row(y, kb)?;
        let y = self.norm.forward(g, y)?;
        let y = self.mlp.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

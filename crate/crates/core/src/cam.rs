//! Cross-modal alignment module.
//!
//! For every pyramid scale `k` the image map is average-pooled to `k x k`,
//! refined by a 3-layer MLP and exchanged with the words through a
//! bidirectional attention that shares one similarity matrix. Image outputs
//! are upsampled back to full resolution; both modalities are concatenated
//! over scales, reduced by a 2-layer MLP, squashed by tanh and added to the
//! input. The reduction MLPs end in zero-initialized layers so the module
//! starts as the identity.

use std::collections::HashMap;
use std::sync::Arc;

use magnet_autograd::{AttentionSpec, Graph, ParamStore, Scalar, SparseMap, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, StageHook, StagePair, TextBatch};
use crate::error::{config_err, input_err, Result};
use crate::nn::{Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    pub scales: Vec<usize>,
    pub heads: usize,
    /// Width of the shared query/key space of the cross attention.
    pub width: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 3, 6],
            heads: 2,
            width: 64,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return config_err("CAM needs at least one pyramid scale");
        }
        if self.scales[0] == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("CAM scales {:?} must be positive and strictly increasing", self.scales));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return config_err(format!("CAM width {} not divisible by {} heads", self.width, self.heads));
        }
        Ok(())
    }

    /// Scales that fit a `h x w` map.
    pub fn scales_for(&self, h: usize, w: usize) -> Vec<usize> {
        self.scales.iter().copied().filter(|&k| k <= h.min(w)).collect()
    }
}

/// Caches the sparse pooling/upsampling operators per geometry.
#[derive(Default)]
pub struct SpatialCache<T> {
    pools: HashMap<(usize, usize, usize), Arc<SparseMap<T>>>,
    ups: HashMap<(usize, usize, usize, usize), Arc<SparseMap<T>>>,
}

impl<T: Scalar> SpatialCache<T> {
    pub fn new() -> Self {
        Self {
            pools: HashMap::new(),
            ups: HashMap::new(),
        }
    }

    pub fn pool(&mut self, h: usize, w: usize, k: usize) -> Result<Arc<SparseMap<T>>> {
        if let Some(m) = self.pools.get(&(h, w, k)) {
            return Ok(m.clone());
        }
        let m = Arc::new(SparseMap::adaptive_avg_pool(h, w, k)?);
        self.pools.insert((h, w, k), m.clone());
        Ok(m)
    }

    pub fn upsample(&mut self, h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Arc<SparseMap<T>> {
        self.ups
            .entry((h_in, w_in, h_out, w_out))
            .or_insert_with(|| Arc::new(SparseMap::bilinear(h_in, w_in, h_out, w_out)))
            .clone()
    }
}

/// Adaptive average pooling of every map in the batch onto a `k x k` grid.
pub fn pyramid_pool<T: Scalar>(g: &mut Graph<'_, T>, p: &FeatureMap, k: usize) -> Result<FeatureMap> {
    let map = Arc::new(SparseMap::adaptive_avg_pool(p.h, p.w, k)?);
    pool_with(g, p, k, map)
}

fn pool_with<T: Scalar>(g: &mut Graph<'_, T>, p: &FeatureMap, k: usize, map: Arc<SparseMap<T>>) -> Result<FeatureMap> {
    let var = g.spatial(p.var, map, p.batch)?;
    Ok(FeatureMap { var, h: k, w: k, ..*p })
}

/// Bidirectional cross attention through one shared similarity matrix
/// `A = proj_text(O) proj_image(P)^T / sqrt(d)`: words read the image with the
/// row softmax of `A`, image positions read the words with its column softmax.
#[derive(Clone, Debug)]
pub struct Xmha {
    pub text_q: Linear,
    pub image_k: Linear,
    pub text_v: Linear,
    pub image_v: Linear,
    pub text_out: Linear,
    pub image_out: Linear,
    pub heads: usize,
}

impl Xmha {
    pub fn new(name: &str, d: usize, c: usize, width: usize, heads: usize) -> Self {
        Self {
            text_q: Linear::new(format!("{name}.text_q"), d, width),
            image_k: Linear::new(format!("{name}.image_k"), c, width),
            text_v: Linear::new(format!("{name}.text_v"), d, width),
            image_v: Linear::new(format!("{name}.image_v"), c, width),
            text_out: Linear::new(format!("{name}.text_out"), width, d),
            image_out: Linear::new(format!("{name}.image_out"), width, c),
            heads,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for l in [
            &self.text_q,
            &self.image_k,
            &self.text_v,
            &self.image_v,
            &self.text_out,
            &self.image_out,
        ] {
            l.init(store, seed);
        }
    }

    /// Returns `(O_p2t, P_t2p)` with the native widths of `o` and `p`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        o: Var,
        text: &TextBatch,
        p: &FeatureMap,
    ) -> Result<(Var, Var)> {
        if text.len == 0 {
            return input_err("cross attention over zero-length text");
        }
        let n = p.pixels();
        let qt = self.text_q.forward(g, o)?;
        let ki = self.image_k.forward(g, p.var)?;
        let vt = self.text_v.forward(g, o)?;
        let vi = self.image_v.forward(g, p.var)?;
        let to_image = AttentionSpec {
            batch: p.batch,
            q_len: text.len,
            k_len: n,
            heads: self.heads,
            key_mask: None,
        };
        let ot = g.attention(qt, ki, vi, to_image)?;
        let to_text = AttentionSpec {
            batch: p.batch,
            q_len: n,
            k_len: text.len,
            heads: self.heads,
            key_mask: Some(text.key_mask.clone()),
        };
        let pi = g.attention(ki, qt, vt, to_text)?;
        let ot = self.text_out.forward(g, ot)?;
        let pi = self.image_out.forward(g, pi)?;
        Ok((ot, pi))
    }
}

/// Intermediate results of one CAM call.
#[derive(Clone, Copy, Debug)]
pub struct CamParts {
    pub text_concat: Var,
    pub image_concat: Var,
    pub o: Var,
    pub p: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct CamStage {
    pub stage: usize,
    pub scales: Vec<usize>,
    pub mlps: Vec<Mlp>,
    pub xmhas: Vec<Xmha>,
    pub text_reduce: Mlp,
    pub image_reduce: Mlp,
    pub d: usize,
    pub c: usize,
}

impl CamStage {
    /// `stage` is 1-based; `scales` must already fit the stage's map.
    pub fn new(stage: usize, d: usize, c: usize, scales: &[usize], cfg: &CamConfig) -> Result<Self> {
        CamConfig {
            scales: scales.to_vec(),
            ..cfg.clone()
        }
        .validate()?;
        let name = format!("cam.stage{stage}");
        let k = scales.len();
        Ok(Self {
            stage,
            scales: scales.to_vec(),
            mlps: scales
                .iter()
                .map(|s| Mlp::new(&format!("{name}.scale{s}.mlp"), &[c, c, c, c]))
                .collect(),
            xmhas: scales
                .iter()
                .map(|s| Xmha::new(&format!("{name}.scale{s}.xmha"), d, c, cfg.width, cfg.heads))
                .collect(),
            text_reduce: Mlp::new(&format!("{name}.text_reduce"), &[k * d, d, d]),
            image_reduce: Mlp::new(&format!("{name}.image_reduce"), &[k * c, c, c]),
            d,
            c,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for m in &self.mlps {
            m.init(store, seed);
        }
        for x in &self.xmhas {
            x.init(store, seed);
        }
        self.text_reduce.init_zero_output(store, seed);
        self.image_reduce.init_zero_output(store, seed);
    }

    pub fn image_concat_channels(&self) -> usize {
        self.scales.len() * self.c
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        o: Var,
        p: &FeatureMap,
        text: &TextBatch,
        cache: &mut SpatialCache<T>,
    ) -> Result<(Var, FeatureMap)> {
        let parts = self.forward_parts(g, o, p, text, cache)?;
        Ok((parts.o, parts.p))
    }

    pub fn forward_parts<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        o: Var,
        p: &FeatureMap,
        text: &TextBatch,
        cache: &mut SpatialCache<T>,
    ) -> Result<CamParts> {
        if p.c != self.c || g.shape(o) != (text.batch * text.len, self.d) {
            return input_err(format!(
                "CAM stage {} expects widths ({}, {}), got image {} and text {:?}",
                self.stage,
                self.d,
                self.c,
                p.c,
                g.shape(o)
            ));
        }
        let mut texts = Vec::with_capacity(self.scales.len());
        let mut images = Vec::with_capacity(self.scales.len());
        for ((&k, mlp), xmha) in self.scales.iter().zip(&self.mlps).zip(&self.xmhas) {
            let pooled = pool_with(g, p, k, cache.pool(p.h, p.w, k)?)?;
            let refined = pooled.with_var(mlp.forward(g, pooled.var)?);
            let (ot, pi) = xmha.forward(g, o, text, &refined)?;
            let up = g.spatial(pi, cache.upsample(k, k, p.h, p.w), p.batch)?;
            texts.push(ot);
            images.push(up);
        }
        let text_concat = g.concat_cols(&texts)?;
        let image_concat = g.concat_cols(&images)?;
        let dt = self.text_reduce.forward(g, text_concat)?;
        let dt = g.tanh(dt);
        let di = self.image_reduce.forward(g, image_concat)?;
        let di = g.tanh(di);
        let o_next = g.add(o, dt)?;
        let p_next = g.add(p.var, di)?;
        Ok(CamParts {
            text_concat,
            image_concat,
            o: o_next,
            p: p.with_var(p_next),
        })
    }
}

/// One CAM stage per encoder stage, used as the encoder's stage hook.
pub struct Cam<'a, T> {
    pub stages: &'a [CamStage],
    pub cache: SpatialCache<T>,
    pub calls: usize,
}

impl<'a, T: Scalar> Cam<'a, T> {
    pub fn new(stages: &'a [CamStage]) -> Self {
        Self {
            stages,
            cache: SpatialCache::new(),
            calls: 0,
        }
    }
}

impl<T: Scalar> StageHook<T> for Cam<'_, T> {
    fn after_stage(&mut self, g: &mut Graph<'_, T>, pair: StagePair, text: &TextBatch) -> Result<StagePair> {
        let Some(stage) = self.stages.iter().find(|s| s.stage == pair.stage) else {
            return input_err(format!("no CAM for stage {}", pair.stage));
        };
        self.calls += 1;
        let (o, p) = stage.forward(g, pair.o, &pair.p, text, &mut self.cache)?;
        Ok(StagePair { o, p, ..pair })
    }
}

/// Builds CAM stages for maps of the given per-stage sizes, keeping only the
/// scales that fit each map.
pub fn build_stages(cfg: &CamConfig, d: usize, dims: &[usize], sizes: &[usize]) -> Result<Vec<CamStage>> {
    cfg.validate()?;
    dims.iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&c, &n))| {
            let scales = cfg.scales_for(n, n);
            if scales.is_empty() {
                return config_err(format!("no CAM scale fits the {n}x{n} stage-{} map", i + 1));
            }
            CamStage::new(i + 1, d, c, &scales, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use magnet_autograd::Tensor;

    #[test]
    fn config_validation() {
        assert!(CamConfig::default().validate().is_ok());
        for bad in [vec![], vec![2, 1], vec![0, 1], vec![1, 1]] {
            assert!(CamConfig { scales: bad, ..CamConfig::default() }.validate().is_err());
        }
        assert_eq!(CamConfig::default().scales_for(4, 4), vec![1, 2, 3]);
        assert_eq!(CamConfig::default().scales_for(2, 2), vec![1, 2]);
    }

    #[test]
    fn pool_rejects_oversized_scale() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(16, 2));
        let fm = FeatureMap {
            var: x,
            batch: 1,
            h: 4,
            w: 4,
            c: 2,
        };
        assert!(pyramid_pool(&mut g, &fm, 5).is_err());
        assert!(pyramid_pool(&mut g, &fm, 4).is_ok());
    }
}

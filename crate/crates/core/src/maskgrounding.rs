//! Mask grounding: masked expression tokens are predicted from the masked
//! language features, the final-stage image features and an embedding of the
//! ground-truth mask, by a transformer over the concatenated sequence.

use std::sync::Arc;

use magnet_autograd::{Graph, ParamStore, Scalar, SparseMap, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{CLS, MASK, PAD};
use crate::encoders::{FeatureMap, TextBatch};
use crate::error::{config_err, input_err, Result};
use crate::nn::{LayerNorm, Linear, Mlp, TransformerBlock};

/// What the mask encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskInput {
    /// Normalized foreground centroid `(cx, cy)`.
    Center,
    /// Mean final-stage image feature inside the ground-truth region.
    Average,
    /// No mask token in the predictor sequence.
    None,
}

impl std::str::FromStr for MaskInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "center" => Ok(Self::Center),
            "average" => Ok(Self::Average),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown mask input `{s}` (center, average, none)")),
        }
    }
}

/// Which side of the concatenation is linearly projected to match the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Image tokens are projected to the language width.
    ImageToLanguage,
    /// Language tokens are projected to the final image width.
    LanguageToImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundingConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_rate: f64,
    pub mask_input: MaskInput,
    /// When false the predictor sees only the masked text.
    pub use_image: bool,
    pub projection: Projection,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            heads: 4,
            mlp_ratio: 2,
            mask_rate: 0.15,
            mask_input: MaskInput::Center,
            use_image: true,
            projection: Projection::ImageToLanguage,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return config_err("predictor depth must be >= 1");
        }
        if self.heads == 0 || self.mlp_ratio == 0 {
            return config_err("predictor heads and mlp ratio must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return config_err(format!("mask rate {} outside (0, 1]", self.mask_rate));
        }
        if !self.use_image && self.mask_input != MaskInput::None {
            return config_err("a mask input needs the image branch (set mask_input = \"none\" for text-only)");
        }
        Ok(())
    }
}

/// A masked expression and the supervision for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
    pub centroid: (f64, f64),
}

fn maskable(t: usize) -> bool {
    t != PAD && t != CLS && t != MASK
}

/// Masks each maskable token independently with probability `p`; if none is
/// chosen one maskable position is drawn uniformly. Consumes one uniform draw
/// per maskable token plus one more in the fallback case.
pub fn mask_tokens<R: Rng + ?Sized>(tokens: &[usize], centroid: (f64, f64), p: f64, rng: &mut R) -> Result<MaskedBatch> {
    if !(p > 0.0 && p <= 1.0) {
        return input_err(format!("mask probability {p} outside (0, 1]"));
    }
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| maskable(tokens[i])).collect();
    if candidates.is_empty() {
        return input_err("expression has no maskable token");
    }
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
    if positions.is_empty() {
        positions.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut masked = tokens.to_vec();
    let targets = positions.iter().map(|&i| tokens[i]).collect();
    for &i in &positions {
        masked[i] = MASK;
    }
    Ok(MaskedBatch {
        tokens: masked,
        positions,
        targets,
        centroid,
    })
}

/// Per-sample area-weighted averaging of an `h x w` stage map inside the
/// ground-truth masks (each `size x size`), as one operator over the whole
/// batch (`batch * h * w` inputs, `batch` outputs).
pub fn region_average_map<T: Scalar>(masks: &[&[u8]], size: usize, h: usize, w: usize) -> Result<SparseMap<T>> {
    if h == 0 || w == 0 || size % h != 0 || size % w != 0 {
        return input_err(format!("mask size {size} not a multiple of the {h}x{w} map"));
    }
    let (sy, sx) = (size / h, size / w);
    let mut rows = Vec::with_capacity(masks.len());
    for (b, m) in masks.iter().enumerate() {
        if m.len() != size * size {
            return input_err(format!("mask {b} has {} pixels, expected {}", m.len(), size * size));
        }
        let mut counts = vec![0usize; h * w];
        for r in 0..size {
            for c in 0..size {
                if m[r * size + c] != 0 {
                    counts[(r / sy) * w + c / sx] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return input_err(format!("mask {b} is empty"));
        }
        rows.push(
            counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(j, &n)| (b * h * w + j, T::from_f64_lossy(n as f64 / total as f64)))
                .collect(),
        );
    }
    Ok(SparseMap::from_rows(masks.len() * h * w, rows))
}

/// 2-layer MLP embedding of the mask input.
#[derive(Clone, Debug)]
pub struct MaskEncoder {
    pub mlp: Mlp,
}

impl MaskEncoder {
    pub fn new(name: &str, input: usize, width: usize) -> Self {
        Self {
            mlp: Mlp::new(name, &[input, width, width]),
        }
    }

    /// Embeds centroids; every coordinate must lie in `[0, 1]`.
    pub fn encode_centroids<T: Scalar>(&self, g: &mut Graph<'_, T>, centroids: &[(f64, f64)]) -> Result<Var> {
        if let Some(c) = centroids
            .iter()
            .find(|(x, y)| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return input_err(format!("centroid {c:?} outside [0, 1]^2"));
        }
        let t = Tensor::from_fn(centroids.len(), 2, |r, c| {
            let (x, y) = centroids[r];
            T::from_f64_lossy(if c == 0 { x } else { y })
        });
        let x = g.constant(t);
        self.mlp.forward(g, x)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.mlp.forward(g, x)
    }
}

/// Everything the predictor needs besides the masked language features.
pub struct GroundingInputs<'a, T> {
    pub image: Option<&'a FeatureMap>,
    pub batches: &'a [MaskedBatch],
    /// Required for [`MaskInput::Average`].
    pub region_average: Option<Arc<SparseMap<T>>>,
}

#[derive(Clone, Debug)]
pub struct MaskGrounding {
    pub config: GroundingConfig,
    pub width: usize,
    pub lang_width: usize,
    pub image_width: usize,
    pub image_tokens: usize,
    pub vocab_size: usize,
    pub image_proj: Option<Linear>,
    pub text_proj: Option<Linear>,
    pub mask_encoder: Option<MaskEncoder>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl MaskGrounding {
    pub const TYPE_EMBEDDING: &'static str = "grounding.type_emb";
    pub const IMAGE_POSITION: &'static str = "grounding.image_pos";

    /// `image_tokens` is the number of final-stage positions per sample.
    pub fn new(
        config: GroundingConfig,
        lang_width: usize,
        image_width: usize,
        image_tokens: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let width = match config.projection {
            Projection::ImageToLanguage => lang_width,
            Projection::LanguageToImage => image_width,
        };
        if width % config.heads != 0 {
            return config_err(format!("predictor width {width} not divisible by {} heads", config.heads));
        }
        let (image_proj, text_proj) = match (config.use_image, config.projection) {
            (true, Projection::ImageToLanguage) => {
                (Some(Linear::new("grounding.image_proj", image_width, lang_width)), None)
            }
            (_, Projection::LanguageToImage) => (None, Some(Linear::new("grounding.text_proj", lang_width, image_width))),
            (false, Projection::ImageToLanguage) => (None, None),
        };
        let mask_encoder = match config.mask_input {
            MaskInput::Center => Some(MaskEncoder::new("grounding.mask_encoder", 2, width)),
            MaskInput::Average => Some(MaskEncoder::new("grounding.mask_encoder", image_width, width)),
            MaskInput::None => None,
        };
        Ok(Self {
            blocks: (0..config.depth)
                .map(|i| TransformerBlock::new(&format!("grounding.predictor.block{i}"), width, config.heads, config.mlp_ratio))
                .collect(),
            norm: LayerNorm::new("grounding.predictor.norm", width),
            head: Linear::new("grounding.predictor.head", width, vocab_size),
            config,
            width,
            lang_width,
            image_width,
            image_tokens,
            vocab_size,
            image_proj,
            text_proj,
            mask_encoder,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        if let Some(l) = &self.image_proj {
            l.init(store, seed);
        }
        if let Some(l) = &self.text_proj {
            l.init(store, seed);
        }
        if let Some(m) = &self.mask_encoder {
            m.mlp.init(store, seed);
        }
        store.init_normal(seed, Self::TYPE_EMBEDDING, 3, self.width, 0.1);
        if self.config.use_image {
            store.init_normal(seed, Self::IMAGE_POSITION, self.image_tokens, self.width, 0.1);
        }
        for b in &self.blocks {
            b.init(store, seed);
        }
        self.norm.init(store);
        self.head.init(store, seed);
    }

    /// Rows per predictor sequence.
    pub fn sequence_len(&self, text_len: usize) -> usize {
        let image = if self.config.use_image { self.image_tokens } else { 0 };
        let mask = usize::from(self.config.mask_input != MaskInput::None);
        text_len + image + mask
    }

    fn typed<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, kind: usize) -> Result<Var> {
        let table = g.param(Self::TYPE_EMBEDDING)?;
        let row = g.gather_rows(table, &[kind])?;
        Ok(g.add_row(x, row)?)
    }

    /// Logits for every masked slot of every sample, in batch order then
    /// position order, together with the matching target ids.
    pub fn predict_masked<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        o_masked: Var,
        text: &TextBatch,
        inputs: &GroundingInputs<'_, T>,
    ) -> Result<(Var, Vec<usize>)> {
        let (batch, len) = (text.batch, text.len);
        if inputs.batches.len() != batch {
            return input_err(format!("{} masked batches for {batch} sequences", inputs.batches.len()));
        }
        for mb in inputs.batches {
            if let Some(&p) = mb.positions.iter().find(|&&p| p >= len) {
                return input_err(format!("masked position {p} outside sequence of length {len}"));
            }
        }
        let mut text_rows = o_masked;
        if let Some(proj) = &self.text_proj {
            text_rows = proj.forward(g, text_rows)?;
        }
        let text_rows = self.typed(g, text_rows, 0)?;
        let mut parts = vec![text_rows];
        let mut image_rows = 0;
        if self.config.use_image {
            let Some(img) = inputs.image else {
                return input_err("predictor needs final-stage image features");
            };
            if img.pixels() != self.image_tokens || img.batch != batch {
                return input_err(format!(
                    "predictor built for {} image tokens, got {}x{} maps for {} samples",
                    self.image_tokens, img.h, img.w, img.batch
                ));
            }
            let mut x = img.var;
            if let Some(proj) = &self.image_proj {
                x = proj.forward(g, x)?;
            }
            let x = self.typed(g, x, 1)?;
            let pos = g.param(Self::IMAGE_POSITION)?;
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..self.image_tokens).collect();
            let pos = g.gather_rows(pos, &idx)?;
            parts.push(g.add(x, pos)?);
            image_rows = self.image_tokens;
        }
        let mut mask_rows = 0;
        if let Some(enc) = &self.mask_encoder {
            let c = match self.config.mask_input {
                MaskInput::Center => {
                    let cs: Vec<(f64, f64)> = inputs.batches.iter().map(|b| b.centroid).collect();
                    enc.encode_centroids(g, &cs)?
                }
                MaskInput::Average => {
                    let (Some(img), Some(map)) = (inputs.image, inputs.region_average.clone()) else {
                        return input_err("average mask input needs image features and region weights");
                    };
                    let avg = g.spatial(img.var, map, 1)?;
                    enc.encode(g, avg)?
                }
                MaskInput::None => unreachable!(),
            };
            parts.push(self.typed(g, c, 2)?);
            mask_rows = 1;
        }
        let seq = self.sequence_len(len);
        debug_assert_eq!(seq, len + image_rows + mask_rows);
        let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        // reorder [all text; all image; all mask] into per-sample sequences
        let (text_base, image_base) = (0, batch * len);
        let mask_base = image_base + batch * image_rows;
        let mut order = Vec::with_capacity(batch * seq);
        let mut key_mask = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            for i in 0..len {
                order.push(text_base + b * len + i);
                key_mask.push(text.key_mask[b * len + i]);
            }
            for j in 0..image_rows {
                order.push(image_base + b * image_rows + j);
                key_mask.push(true);
            }
            if mask_rows == 1 {
                order.push(mask_base + b);
                key_mask.push(true);
            }
        }
        let mut x = g.gather_rows(all, &order)?;
        let key_mask = Arc::new(key_mask);
        for blk in &self.blocks {
            x = blk.forward(g, x, batch, seq, Some(key_mask.clone()))?;
        }
        let mut read = Vec::new();
        let mut targets = Vec::new();
        for (b, mb) in inputs.batches.iter().enumerate() {
            for (&p, &t) in mb.positions.iter().zip(&mb.targets) {
                read.push(b * seq + p);
                targets.push(t);
            }
        }
        if read.is_empty() {
            return input_err("no masked positions");
        }
        let x = g.gather_rows(x, &read)?;
        let x = self.norm.forward(g, x)?;
        let logits = self.head.forward(g, x)?;
        Ok((logits, targets))
    }
}

/// Mean cross-entropy over the masked slots.
pub fn grounding_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return input_err("grounding loss over zero masked positions");
    }
    if g.shape(logits).0 != targets.len() {
        return input_err(format!("{} logit rows for {} targets", g.shape(logits).0, targets.len()));
    }
    Ok(g.cross_entropy(logits, targets)?)
}

//! Four-stage image and language encoders.
//!
//! Feature maps are stored as `(batch * h * w) x c` matrices in row-major
//! pixel order; language features as `(batch * len) x d`. After every stage
//! the image features are fused with the language features by a
//! one-directional pixel-word attention block, and an optional
//! [`StageHook`] (CAM) may rewrite both.

use std::sync::Arc;

use magnet_autograd::{AttentionSpec, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::PAD;
use crate::error::{config_err, input_err, Result};
use crate::nn::{ConvBlock, LayerNorm, Linear, TransformerBlock};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_dims: Vec<usize>,
    pub lang_width: usize,
    pub lang_layers_per_stage: usize,
    pub heads: usize,
    pub patch: usize,
    pub blocks_per_stage: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_dims: vec![32, 64, 128, 256],
            lang_width: 64,
            lang_layers_per_stage: 1,
            heads: 4,
            patch: 4,
            blocks_per_stage: 1,
            mlp_ratio: 2,
            max_len: crate::datagen::MAX_LEN,
            vocab_size: crate::datagen::Vocabulary::standard().len(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dims.len() != STAGES {
            return config_err(format!("encoder needs {STAGES} image dims, got {}", self.image_dims.len()));
        }
        if self.image_dims.iter().any(|&c| c == 0) || self.lang_width == 0 {
            return config_err("encoder widths must be positive");
        }
        if self.heads == 0 || self.lang_width % self.heads != 0 {
            return config_err(format!("lang width {} not divisible by {} heads", self.lang_width, self.heads));
        }
        if self.patch == 0 || self.lang_layers_per_stage == 0 || self.blocks_per_stage == 0 || self.mlp_ratio == 0 {
            return config_err("patch, layer counts and mlp ratio must be positive");
        }
        if self.max_len < 2 || self.vocab_size < 4 {
            return config_err("max_len must be >= 2 and vocab_size >= 4");
        }
        Ok(())
    }

    /// Total downsampling factor of the last stage.
    pub fn stride(&self, stage: usize) -> usize {
        self.patch << stage
    }

    /// Spatial size of each stage output for a square `image_size` input.
    pub fn stage_sizes(&self, image_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let stride = self.stride(s);
            if image_size % stride != 0 {
                return config_err(format!("image size {image_size} not divisible by stage-{} stride {stride}", s + 1));
            }
            out.push(image_size / stride);
        }
        Ok(out)
    }
}

/// A batch of spatial feature maps bound on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureMap {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

/// Token ids for a batch of equal-length sequences plus the derived key mask.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub key_mask: Arc<Vec<bool>>,
}

impl TextBatch {
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return input_err("empty text batch");
        };
        let len = first.len();
        if len == 0 {
            return input_err("zero-length text");
        }
        if sequences.iter().any(|s| s.len() != len) {
            return input_err("sequences in a batch must share one length");
        }
        let tokens: Vec<usize> = sequences.iter().flatten().copied().collect();
        let key_mask = Arc::new(tokens.iter().map(|&t| t != PAD).collect());
        Ok(Self {
            tokens,
            batch: sequences.len(),
            len,
            key_mask,
        })
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.len..(b + 1) * self.len]
    }
}

/// Per-stage language features `o` and image features `p`.
#[derive(Clone, Copy, Debug)]
pub struct StagePair {
    pub stage: usize,
    pub o: Var,
    pub p: FeatureMap,
}

/// Called once after each encoder stage; may rewrite both modalities.
pub trait StageHook<T: Scalar> {
    fn after_stage(&mut self, g: &mut Graph<'_, T>, pair: StagePair, text: &TextBatch) -> Result<StagePair>;
}

#[derive(Clone, Debug)]
pub struct ImageStage {
    pub index: usize,
    pub fold: usize,
    pub embed: Linear,
    pub norm: LayerNorm,
    pub blocks: Vec<ConvBlock>,
}

impl ImageStage {
    fn new(cfg: &EncoderConfig, index: usize) -> Self {
        let (fold, in_c) = if index == 0 {
            (cfg.patch, 3)
        } else {
            (2, cfg.image_dims[index - 1])
        };
        let c = cfg.image_dims[index];
        let name = format!("image.stage{}", index + 1);
        Self {
            index,
            fold,
            embed: Linear::new(format!("{name}.embed"), fold * fold * in_c, c),
            norm: LayerNorm::new(format!("{name}.norm"), c),
            blocks: (0..cfg.blocks_per_stage)
                .map(|b| ConvBlock::new(&format!("{name}.block{b}"), c, cfg.mlp_ratio))
                .collect(),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.embed.init(store, seed);
        self.norm.init(store);
        for b in &self.blocks {
            b.init(store, seed);
        }
    }

    /// Folds `fold x fold` patches into channels, projects, and applies the
    /// stage's conv blocks.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: &FeatureMap) -> Result<FeatureMap> {
        if x.h % self.fold != 0 || x.w % self.fold != 0 {
            return input_err(format!(
                "stage {} input {}x{} not divisible by {}",
                self.index + 1,
                x.h,
                x.w,
                self.fold
            ));
        }
        let (h, w) = (x.h / self.fold, x.w / self.fold);
        let folded = g.space_to_depth(x.var, x.batch, x.h, x.w, self.fold)?;
        let y = self.embed.forward(g, folded)?;
        let mut y = self.norm.forward(g, y)?;
        for b in &self.blocks {
            y = b.forward(g, y, x.batch, h, w)?;
        }
        Ok(FeatureMap {
            var: y,
            batch: x.batch,
            h,
            w,
            c: self.embed.fan_out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub stages: Vec<Vec<TransformerBlock>>,
}

impl LanguageEncoder {
    pub const TOKEN_EMBEDDING: &'static str = "lang.tok_emb";
    pub const POSITION_EMBEDDING: &'static str = "lang.pos_emb";

    fn new(cfg: &EncoderConfig) -> Self {
        Self {
            width: cfg.lang_width,
            max_len: cfg.max_len,
            vocab_size: cfg.vocab_size,
            stages: (0..STAGES)
                .map(|s| {
                    (0..cfg.lang_layers_per_stage)
                        .map(|l| {
                            TransformerBlock::new(
                                &format!("lang.stage{}.layer{l}", s + 1),
                                cfg.lang_width,
                                cfg.heads,
                                cfg.mlp_ratio,
                            )
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        store.init_normal(seed, Self::TOKEN_EMBEDDING, self.vocab_size, self.width, 1.0);
        store.init_normal(seed, Self::POSITION_EMBEDDING, self.max_len, self.width, 0.1);
        for blocks in &self.stages {
            for b in blocks {
                b.init(store, seed);
            }
        }
    }

    /// Token plus position embeddings (the token table holds the MASK row).
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, text: &TextBatch) -> Result<Var> {
        if text.len > self.max_len {
            return input_err(format!("sequence length {} exceeds positional table {}", text.len, self.max_len));
        }
        if let Some(&t) = text.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return input_err(format!("token id {t} outside vocabulary of {}", self.vocab_size));
        }
        let tok = g.param(Self::TOKEN_EMBEDDING)?;
        let pos = g.param(Self::POSITION_EMBEDDING)?;
        let t = g.gather_rows(tok, &text.tokens)?;
        let idx: Vec<usize> = (0..text.batch).flat_map(|_| 0..text.len).collect();
        let p = g.gather_rows(pos, &idx)?;
        Ok(g.add(t, p)?)
    }

    pub fn stage<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, stage: usize, text: &TextBatch) -> Result<Var> {
        if text.len > self.max_len {
            return input_err(format!("sequence length {} exceeds positional table {}", text.len, self.max_len));
        }
        let Some(blocks) = self.stages.get(stage) else {
            return input_err(format!("no language stage {}", stage + 1));
        };
        let mut x = x;
        for b in blocks {
            x = b.forward(g, x, text.batch, text.len, Some(text.key_mask.clone()))?;
        }
        Ok(x)
    }

    pub fn zero_residuals<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for blocks in &self.stages {
            for b in blocks {
                b.zero_residuals(store);
            }
        }
    }
}

/// One-directional language-to-pixel fusion: every pixel attends over the
/// words, the attended vector gates a projection of the pixel, and the result
/// is added back through a tanh gate.
#[derive(Clone, Debug)]
pub struct PixelWordFusion {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub pixel: Linear,
    pub mix: Linear,
    pub gate: Linear,
}

impl PixelWordFusion {
    fn new(stage: usize, c: usize, d: usize) -> Self {
        let name = format!("fusion.stage{}", stage + 1);
        Self {
            query: Linear::new(format!("{name}.query"), c, c),
            key: Linear::new(format!("{name}.key"), d, c),
            value: Linear::new(format!("{name}.value"), d, c),
            pixel: Linear::new(format!("{name}.pixel"), c, c),
            mix: Linear::new(format!("{name}.mix"), c, c),
            gate: Linear::new(format!("{name}.gate"), c, c),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for l in [&self.query, &self.key, &self.value, &self.pixel, &self.mix, &self.gate] {
            l.init(store, seed);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        p: &FeatureMap,
        o: Var,
        text: &TextBatch,
    ) -> Result<FeatureMap> {
        let q = self.query.forward(g, p.var)?;
        let k = self.key.forward(g, o)?;
        let v = self.value.forward(g, o)?;
        let spec = AttentionSpec {
            batch: p.batch,
            q_len: p.pixels(),
            k_len: text.len,
            heads: 1,
            key_mask: Some(text.key_mask.clone()),
        };
        let att = g.attention(q, k, v, spec)?;
        let px = self.pixel.forward(g, p.var)?;
        let m = g.mul(att, px)?;
        let m = self.mix.forward(g, m)?;
        let gate = self.gate.forward(g, m)?;
        let gate = g.tanh(gate);
        let delta = g.mul(gate, m)?;
        let out = g.add(p.var, delta)?;
        Ok(p.with_var(out))
    }
}

/// Image and language encoders with their per-stage fusion blocks.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub image: Vec<ImageStage>,
    pub language: LanguageEncoder,
    pub fusion: Vec<PixelWordFusion>,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            image: (0..STAGES).map(|s| ImageStage::new(&config, s)).collect(),
            language: LanguageEncoder::new(&config),
            fusion: (0..STAGES)
                .map(|s| PixelWordFusion::new(s, config.image_dims[s], config.lang_width))
                .collect(),
            config,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for s in &self.image {
            s.init(store, seed);
        }
        self.language.init(store, seed);
        for f in &self.fusion {
            f.init(store, seed);
        }
    }

    /// Binds a `(batch * h * w) x 3` image tensor as the encoder input.
    pub fn image_input<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        images: Tensor<T>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<FeatureMap> {
        if images.shape() != (batch * h * w, 3) {
            return input_err(format!(
                "image tensor {:?} does not match {batch} images of {h}x{w}x3",
                images.shape()
            ));
        }
        let stride = self.config.stride(STAGES - 1);
        if h % stride != 0 || w % stride != 0 {
            return input_err(format!("image {h}x{w} not divisible by encoder stride {stride}"));
        }
        Ok(FeatureMap {
            var: g.input(images),
            batch,
            h,
            w,
            c: 3,
        })
    }

    /// Runs all stages, calling `hook` once after each.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        image: FeatureMap,
        text: &TextBatch,
        mut hook: Option<&mut dyn StageHook<T>>,
    ) -> Result<Vec<StagePair>> {
        if text.batch != image.batch {
            return input_err(format!("{} images but {} expressions", image.batch, text.batch));
        }
        let mut o = self.language.embed(g, text)?;
        let mut p = image;
        let mut pairs = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            p = self.image[s].forward(g, &p)?;
            o = self.language.stage(g, o, s, text)?;
            p = self.fusion[s].forward(g, &p, o, text)?;
            let mut pair = StagePair { stage: s + 1, o, p };
            if let Some(h) = hook.as_deref_mut() {
                pair = h.after_stage(g, pair, text)?;
            }
            o = pair.o;
            p = pair.p;
            pairs.push(pair);
        }
        Ok(pairs)
    }

    /// Language-only pass used for the masked expression.
    pub fn language_only<T: Scalar>(&self, g: &mut Graph<'_, T>, text: &TextBatch) -> Result<Var> {
        let mut o = self.language.embed(g, text)?;
        for s in 0..STAGES {
            o = self.language.stage(g, o, s, text)?;
        }
        Ok(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_dims: vec![4, 4, 6, 8],
            lang_width: 8,
            heads: 2,
            vocab_size: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_stage_sizes_at_64() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.stage_sizes(64).unwrap(), vec![16, 8, 4, 2]);
        assert!(cfg.stage_sizes(48).is_err());
    }

    #[test]
    fn text_batch_builds_pad_mask() {
        let t = TextBatch::new(&[vec![2, 5, 0], vec![2, 0, 0]]).unwrap();
        assert_eq!(*t.key_mask, vec![true, true, false, true, false, false]);
        assert!(TextBatch::new(&[vec![2], vec![2, 3]]).is_err());
        assert!(TextBatch::new(&[]).is_err());
    }

    #[test]
    fn rejects_sequences_longer_than_position_table() {
        let enc = Encoders::new(tiny()).unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 0);
        let mut g = Graph::with_params(&store);
        let t = TextBatch::new(&[vec![2; 13]]).unwrap();
        assert!(enc.language.embed(&mut g, &t).is_err());
    }

    #[test]
    fn stage_rejects_odd_dims() {
        let enc = Encoders::new(tiny()).unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 0);
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(9, 4));
        let fm = FeatureMap {
            var: x,
            batch: 1,
            h: 3,
            w: 3,
            c: 4,
        };
        assert!(enc.image[1].forward(&mut g, &fm).is_err());
    }
}
